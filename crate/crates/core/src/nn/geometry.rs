use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Border handling for sliding windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(input / stride)`, padding split low/high with the
    /// odd voxel on the high side.
    Same,
    /// No padding; output extent `(input - window) / stride + 1`.
    Valid,
}

/// Sliding-window geometry along one spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisGeometry {
    pub input: usize,
    pub output: usize,
    pub window: usize,
    pub stride: usize,
    pub pad_lo: usize,
}

impl AxisGeometry {
    pub fn new(input: usize, window: usize, stride: usize, padding: Padding) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::config(format!(
                "window {window} and stride {stride} must be positive"
            )));
        }
        let (output, pad_lo) = match padding {
            Padding::Valid => {
                if input < window {
                    return Err(Error::mismatch(format!(
                        "window {window} larger than input extent {input}"
                    )));
                }
                ((input - window) / stride + 1, 0)
            }
            Padding::Same => {
                let output = input.div_ceil(stride);
                let total = ((output - 1) * stride + window).saturating_sub(input);
                (output, total / 2)
            }
        };
        Ok(AxisGeometry {
            input,
            output,
            window,
            stride,
            pad_lo,
        })
    }

    /// Input coordinate hit by output `o` at window tap `t`, if inside the input.
    #[inline]
    pub fn source(&self, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad_lo as isize;
        (i >= 0 && (i as usize) < self.input).then_some(i as usize)
    }

    /// Half-open range of outputs whose tap `t` lands inside the input.
    pub fn valid_outputs(&self, t: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.output && self.source(lo, t).is_none() {
            lo += 1;
        }
        let mut hi = lo;
        while hi < self.output && self.source(hi, t).is_some() {
            hi += 1;
        }
        (lo, hi)
    }
}

/// Geometry of a cubic window over the three spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry3 {
    pub axes: [AxisGeometry; 3],
}

impl Geometry3 {
    pub fn new(spatial: [usize; 3], window: usize, stride: usize, padding: Padding) -> Result<Self> {
        Ok(Geometry3 {
            axes: [
                AxisGeometry::new(spatial[0], window, stride, padding)?,
                AxisGeometry::new(spatial[1], window, stride, padding)?,
                AxisGeometry::new(spatial[2], window, stride, padding)?,
            ],
        })
    }

    pub fn output(&self) -> [usize; 3] {
        [self.axes[0].output, self.axes[1].output, self.axes[2].output]
    }

    pub fn input_volume(&self) -> usize {
        self.axes.iter().map(|a| a.input).product()
    }

    pub fn output_volume(&self) -> usize {
        self.axes.iter().map(|a| a.output).product()
    }
}

/// Promote a `[C, D, H, W]` tensor to a batch of one; 5-D input passes through.
pub(crate) fn as_batch<T: Real>(x: &Tensor<T>) -> Result<(std::borrow::Cow<'_, Tensor<T>>, bool)> {
    match x.rank() {
        5 => Ok((std::borrow::Cow::Borrowed(x), false)),
        4 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            Ok((std::borrow::Cow::Owned(x.clone().reshape(&shape)?), true))
        }
        _ => Err(Error::mismatch(format!(
            "expected [C,D,H,W] or [N,C,D,H,W], got {:?}",
            x.shape()
        ))),
    }
}

/// Undo [`as_batch`] on an output.
pub(crate) fn unbatch<T: Real>(y: Tensor<T>, was_single: bool) -> Result<Tensor<T>> {
    if was_single {
        let shape = y.shape()[1..].to_vec();
        y.reshape(&shape)
    } else {
        Ok(y)
    }
}

pub(crate) fn spatial(x: &Tensor<impl Real>) -> [usize; 3] {
    let s = x.shape();
    [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]]
}
