//! Declarative network descriptions: blocks, pipelines, presets and exact
//! parameter accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::geometry::{AxisGeometry, Padding};

/// Input ROI shape `[channels, depth, height, width]`.
pub const ROI_SHAPE: [usize; 4] = [1, 29, 29, 29];

/// One block of a pipeline or of the fusion tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// `Conv3D(kernel, filters)` with same padding and stride 1, followed by
    /// batch-norm and ReLU.
    ConvBlock {
        kernel: usize,
        in_channels: usize,
        filters: usize,
    },
    /// Four parallel bands concatenated along channels:
    /// 1. 1³ conv to `bottleneck` → 3³ conv → 3³ conv
    /// 2. 1³ conv to `bottleneck` → 3³ conv
    /// 3. 3³ max-pool (stride 1) → 1³ conv
    /// 4. 1³ conv
    InceptionBlock {
        in_channels: usize,
        bottleneck: usize,
        band_widths: [usize; 4],
    },
    MaxPool {
        pool: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool,
    Flatten,
    Concat,
    Dropout { keep_prob: f64 },
    Dense { inputs: usize, outputs: usize },
    Relu,
    Softmax,
}

impl BlockSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BlockSpec::ConvBlock { .. } => "conv_block",
            BlockSpec::InceptionBlock { .. } => "inception_block",
            BlockSpec::MaxPool { .. } => "maxpool",
            BlockSpec::GlobalAvgPool => "global_avgpool",
            BlockSpec::Flatten => "flatten",
            BlockSpec::Concat => "concat",
            BlockSpec::Dropout { .. } => "dropout",
            BlockSpec::Dense { .. } => "dense",
            BlockSpec::Relu => "relu",
            BlockSpec::Softmax => "softmax",
        }
    }

    /// Trainable parameter count by closed-form formula.
    pub fn parameter_count(&self) -> usize {
        match *self {
            BlockSpec::ConvBlock {
                kernel,
                in_channels,
                filters,
            } => conv_unit_params(in_channels, filters, kernel),
            BlockSpec::InceptionBlock {
                in_channels: n,
                bottleneck: b,
                band_widths: [w1, w2, w3, w4],
            } => {
                conv_unit_params(n, b, 1)
                    + conv_unit_params(b, w1, 3)
                    + conv_unit_params(w1, w1, 3)
                    + conv_unit_params(n, b, 1)
                    + conv_unit_params(b, w2, 3)
                    + conv_unit_params(n, w3, 1)
                    + conv_unit_params(n, w4, 1)
            }
            BlockSpec::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }
}

/// Convolution weights + bias + batch-norm gamma/beta.
fn conv_unit_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k * k + c_out + 2 * c_out
}

/// Output width of an Inception block: `1.5·n` rounded half up.
pub fn channel_rule(n: usize) -> usize {
    (3 * n).div_ceil(2)
}

/// Per-band widths summing to [`channel_rule`]; the 0–3 leftover channels go
/// to band 2, then band 1, then band 3.
pub fn band_widths(n: usize) -> [usize; 4] {
    let total = channel_rule(n);
    let mut w = [total / 4; 4];
    for &band in [1, 0, 2].iter().take(total % 4) {
        w[band] += 1;
    }
    w
}

/// Width of the leading 1³ convolutions in bands 1–3.
pub fn bottleneck_width(n: usize) -> usize {
    (n / 2).max(4)
}

pub fn build_conv_block(kernel: usize, in_channels: usize, filters: usize) -> Result<BlockSpec> {
    if kernel.is_multiple_of(2) {
        return Err(Error::config(format!("conv block kernel {kernel} must be odd")));
    }
    if filters == 0 || in_channels == 0 {
        return Err(Error::config("conv block needs at least one channel in and out"));
    }
    Ok(BlockSpec::ConvBlock {
        kernel,
        in_channels,
        filters,
    })
}

pub fn build_inception_block(n_in: usize) -> Result<BlockSpec> {
    if n_in < 4 {
        return Err(Error::config(format!(
            "inception block needs at least 4 input channels, got {n_in}"
        )));
    }
    Ok(BlockSpec::InceptionBlock {
        in_channels: n_in,
        bottleneck: bottleneck_width(n_in),
        band_widths: band_widths(n_in),
    })
}

fn grid_pool() -> BlockSpec {
    BlockSpec::MaxPool {
        pool: 3,
        stride: 2,
        padding: Padding::Same,
    }
}

const STAGES: usize = 4;

fn check_roi(input_shape: [usize; 4]) -> Result<usize> {
    let [c, d, h, w] = input_shape;
    if c != 1 || d != h || h != w {
        return Err(Error::config(format!(
            "pipelines take a single-channel cube, got {input_shape:?}"
        )));
    }
    if d < 1 << STAGES {
        return Err(Error::config(format!(
            "input extent {d} too small for {STAGES} halvings"
        )));
    }
    Ok(d)
}

/// Conv block, four `[inception, max-pool]` stages, then global average pooling.
pub fn build_pipeline(input_shape: [usize; 4], f0: usize) -> Result<Vec<BlockSpec>> {
    check_roi(input_shape)?;
    if f0 < 4 {
        return Err(Error::config(format!("f0 must be at least 4, got {f0}")));
    }
    let mut blocks = vec![build_conv_block(3, 1, f0)?];
    let mut n = f0;
    for _ in 0..STAGES {
        blocks.push(build_inception_block(n)?);
        blocks.push(grid_pool());
        n = channel_rule(n);
    }
    blocks.push(BlockSpec::GlobalAvgPool);
    Ok(blocks)
}

/// One named input and the blocks that process it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub input: String,
    pub blocks: Vec<BlockSpec>,
}

/// Full late-fusion network: one pipeline per input, then a shared tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: [usize; 4],
    pub pipelines: Vec<PipelineSpec>,
    pub tail: Vec<BlockSpec>,
    pub classes: usize,
}

/// Output shape and parameter count of one named layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
}

/// Per-layer trainable parameter counts and their total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub layers: Vec<(String, usize)>,
    pub total: usize,
}

fn block_output(block: &BlockSpec, shape: &[usize]) -> Result<Vec<usize>> {
    let spatial_in = |what: &str| -> Result<[usize; 4]> {
        match *shape {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::mismatch(format!("{what} needs a [C,D,H,W] input, got {shape:?}"))),
        }
    };
    match *block {
        BlockSpec::ConvBlock {
            kernel,
            in_channels,
            filters,
        } => {
            let [c, d, h, w] = spatial_in("conv block")?;
            if c != in_channels {
                return Err(Error::mismatch(format!(
                    "conv block expects {in_channels} channels, got {c}"
                )));
            }
            if kernel % 2 == 0 {
                return Err(Error::config("conv block kernel must be odd"));
            }
            Ok(vec![filters, d, h, w])
        }
        BlockSpec::InceptionBlock {
            in_channels,
            bottleneck,
            band_widths,
        } => {
            let [c, d, h, w] = spatial_in("inception block")?;
            if c != in_channels {
                return Err(Error::mismatch(format!(
                    "inception block expects {in_channels} channels, got {c}"
                )));
            }
            if in_channels < 4 || bottleneck == 0 || band_widths.contains(&0) {
                return Err(Error::config("degenerate inception block"));
            }
            Ok(vec![band_widths.iter().sum(), d, h, w])
        }
        BlockSpec::MaxPool {
            pool,
            stride,
            padding,
        } => {
            let [c, d, h, w] = spatial_in("max-pool")?;
            let out = |n| AxisGeometry::new(n, pool, stride, padding).map(|g| g.output);
            Ok(vec![c, out(d)?, out(h)?, out(w)?])
        }
        BlockSpec::GlobalAvgPool => Ok(vec![spatial_in("global average pool")?[0]]),
        BlockSpec::Flatten => {
            spatial_in("flatten")?;
            Ok(vec![shape.iter().product()])
        }
        BlockSpec::Dropout { keep_prob } => {
            crate::nn::activation::check_keep_prob(keep_prob)?;
            Ok(shape.to_vec())
        }
        BlockSpec::Relu | BlockSpec::Softmax => Ok(shape.to_vec()),
        BlockSpec::Dense { inputs, outputs } => {
            if shape != [inputs] {
                return Err(Error::mismatch(format!(
                    "dense layer expects [{inputs}], got {shape:?}"
                )));
            }
            Ok(vec![outputs])
        }
        BlockSpec::Concat => Err(Error::config("concat may only open the fusion tail")),
    }
}

impl NetworkSpec {
    /// Validate and assemble a network description.
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 4],
        pipelines: Vec<PipelineSpec>,
        tail: Vec<BlockSpec>,
        classes: usize,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            name: name.into(),
            input_shape,
            pipelines,
            tail,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        if self.pipelines.is_empty() {
            return Err(Error::config("network has no pipelines"));
        }
        let first = &self.pipelines[0].blocks;
        for p in &self.pipelines {
            if &p.blocks != first {
                return Err(Error::config(format!(
                    "pipeline {:?} differs structurally from {:?}",
                    p.input, self.pipelines[0].input
                )));
            }
        }
        match first.last() {
            Some(BlockSpec::GlobalAvgPool | BlockSpec::Flatten) => {}
            _ => {
                return Err(Error::config(
                    "pipelines must end in global average pooling or flatten",
                ))
            }
        }
        let n = self.tail.len();
        let tail_ok = n >= 3
            && self.tail[0] == BlockSpec::Concat
            && self.tail[n - 1] == BlockSpec::Softmax
            && matches!(self.tail[n - 2], BlockSpec::Dense { outputs, .. } if outputs == self.classes)
            && self.tail[1..].iter().all(|b| {
                matches!(
                    b,
                    BlockSpec::Dropout { .. } | BlockSpec::Dense { .. } | BlockSpec::Relu | BlockSpec::Softmax
                )
            })
            && self.tail[1..n - 1].iter().all(|b| *b != BlockSpec::Softmax);
        if !tail_ok {
            return Err(Error::config(format!(
                "fusion tail must run concat → … → dense({}) → softmax",
                self.classes
            )));
        }
        self.trace().map(|_| ())
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.pipelines.iter().map(|p| p.input.as_str()).collect()
    }

    /// Per-layer output shapes (per sample, without the batch axis) and
    /// parameter counts, in execution order.
    pub fn trace(&self) -> Result<Vec<LayerInfo>> {
        let mut layers = Vec::new();
        let mut feature = 0;
        for p in &self.pipelines {
            let mut shape = self.input_shape.to_vec();
            for (i, block) in p.blocks.iter().enumerate() {
                shape = block_output(block, &shape)?;
                layers.push(LayerInfo {
                    name: format!("{}/{}{i}", p.input, block.kind()),
                    kind: block.kind().into(),
                    output_shape: shape.clone(),
                    parameters: block.parameter_count(),
                });
            }
            feature += shape[0];
        }
        let mut shape = vec![feature];
        for (i, block) in self.tail.iter().enumerate() {
            if *block != BlockSpec::Concat {
                shape = block_output(block, &shape)?;
            }
            layers.push(LayerInfo {
                name: format!("fusion/{}{i}", block.kind()),
                kind: block.kind().into(),
                output_shape: shape.clone(),
                parameters: block.parameter_count(),
            });
        }
        Ok(layers)
    }

    /// Length of the concatenated per-pipeline feature vector.
    pub fn fused_width(&self) -> Result<usize> {
        let trace = self.trace()?;
        Ok(trace
            .iter()
            .find(|l| l.kind == "concat")
            .map(|l| l.output_shape[0])
            .unwrap_or(0))
    }
}

/// Exact trainable parameter count, per layer and in total.
pub fn count_parameters(spec: &NetworkSpec) -> Result<ParamReport> {
    let layers: Vec<(String, usize)> = spec
        .trace()?
        .into_iter()
        .filter(|l| l.parameters > 0)
        .map(|l| (l.name, l.parameters))
        .collect();
    let total = layers.iter().map(|(_, n)| n).sum();
    Ok(ParamReport { layers, total })
}

fn check_inputs(inputs: &[&str]) -> Result<()> {
    let mut sorted: Vec<&str> = inputs.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != inputs.len() || !(inputs.len() == 2 || inputs.len() == 4) {
        return Err(Error::config(format!(
            "unsupported pipeline input set {inputs:?}: use 2 or 4 distinct ROIs"
        )));
    }
    Ok(())
}

/// The proposed Inception-based fusion network.
pub fn build_fusion_network(
    inputs: &[&str],
    f0: usize,
    classes: usize,
    keep_prob: f64,
) -> Result<NetworkSpec> {
    check_inputs(inputs)?;
    let blocks = build_pipeline(ROI_SHAPE, f0)?;
    let mut width = f0;
    for _ in 0..STAGES {
        width = channel_rule(width);
    }
    let pipelines = inputs
        .iter()
        .map(|name| PipelineSpec {
            input: name.to_string(),
            blocks: blocks.clone(),
        })
        .collect();
    let tail = vec![
        BlockSpec::Concat,
        BlockSpec::Dropout { keep_prob },
        BlockSpec::Dense {
            inputs: width * inputs.len(),
            outputs: classes,
        },
        BlockSpec::Softmax,
    ];
    NetworkSpec::new("proposed", ROI_SHAPE, pipelines, tail, classes)
}

/// Shape of the comparison network built from plain conv blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Filters of the first conv block; later blocks double it.
    pub g0: usize,
    /// Width of the hidden fully-connected layer.
    pub hidden: usize,
    pub conv_blocks: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            g0: 8,
            hidden: 64,
            conv_blocks: STAGES,
        }
    }
}

/// AlexNet-style comparison network: conv blocks with doubling filters,
/// flatten instead of global pooling, and a hidden dense layer.
pub fn build_alexnet_baseline(
    inputs: &[&str],
    config: BaselineConfig,
    classes: usize,
    keep_prob: f64,
) -> Result<NetworkSpec> {
    check_inputs(inputs)?;
    if config.conv_blocks != STAGES {
        return Err(Error::config(format!(
            "baseline must have {STAGES} conv blocks, got {}",
            config.conv_blocks
        )));
    }
    if config.g0 == 0 || config.hidden == 0 {
        return Err(Error::config("baseline widths must be positive"));
    }
    check_roi(ROI_SHAPE)?;
    let mut blocks = Vec::new();
    let mut c_in = 1;
    for i in 0..STAGES {
        let filters = config.g0 << i;
        blocks.push(build_conv_block(3, c_in, filters)?);
        blocks.push(grid_pool());
        c_in = filters;
    }
    blocks.push(BlockSpec::Flatten);
    let probe = NetworkSpec {
        name: String::new(),
        input_shape: ROI_SHAPE,
        pipelines: vec![PipelineSpec {
            input: inputs[0].to_string(),
            blocks: blocks.clone(),
        }],
        tail: vec![],
        classes,
    };
    let flat = probe
        .trace()?
        .last()
        .map(|l| l.output_shape[0])
        .unwrap_or(0);
    let pipelines = inputs
        .iter()
        .map(|name| PipelineSpec {
            input: name.to_string(),
            blocks: blocks.clone(),
        })
        .collect();
    let tail = vec![
        BlockSpec::Concat,
        BlockSpec::Dropout { keep_prob },
        BlockSpec::Dense {
            inputs: flat * inputs.len(),
            outputs: config.hidden,
        },
        BlockSpec::Relu,
        BlockSpec::Dense {
            inputs: config.hidden,
            outputs: classes,
        },
        BlockSpec::Softmax,
    ];
    NetworkSpec::new("alexnet", ROI_SHAPE, pipelines, tail, classes)
}

/// Named network configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Preset {
    Proposed4Roi,
    Proposed2RoiSmri,
    Proposed2RoiDti,
    Alexnet4Roi,
    Alexnet2RoiSmri,
    Alexnet2RoiDti,
}

pub const DEFAULT_F0: usize = 8;
pub const DEFAULT_KEEP_PROB: f64 = 0.5;

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Proposed4Roi,
        Preset::Proposed2RoiSmri,
        Preset::Proposed2RoiDti,
        Preset::Alexnet4Roi,
        Preset::Alexnet2RoiSmri,
        Preset::Alexnet2RoiDti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Proposed4Roi => "proposed-4roi",
            Preset::Proposed2RoiSmri => "proposed-2roi-smri",
            Preset::Proposed2RoiDti => "proposed-2roi-dti",
            Preset::Alexnet4Roi => "alexnet-4roi",
            Preset::Alexnet2RoiSmri => "alexnet-2roi-smri",
            Preset::Alexnet2RoiDti => "alexnet-2roi-dti",
        }
    }

    /// Manifest columns feeding the pipelines, in pipeline order.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Preset::Proposed4Roi | Preset::Alexnet4Roi => &["smri_l", "smri_r", "dti_l", "dti_r"],
            Preset::Proposed2RoiSmri | Preset::Alexnet2RoiSmri => &["smri_l", "smri_r"],
            Preset::Proposed2RoiDti | Preset::Alexnet2RoiDti => &["dti_l", "dti_r"],
        }
    }

    pub fn is_proposed(self) -> bool {
        matches!(
            self,
            Preset::Proposed4Roi | Preset::Proposed2RoiSmri | Preset::Proposed2RoiDti
        )
    }

    /// Build the network. `width` overrides f0 (proposed) or g0 (baseline).
    pub fn build(self, classes: usize, width: Option<usize>, keep_prob: f64) -> Result<NetworkSpec> {
        let mut spec = if self.is_proposed() {
            build_fusion_network(self.inputs(), width.unwrap_or(DEFAULT_F0), classes, keep_prob)?
        } else {
            let mut config = BaselineConfig::default();
            if let Some(g0) = width {
                config.g0 = g0;
            }
            build_alexnet_baseline(self.inputs(), config, classes, keep_prob)?
        };
        spec.name = self.name().to_string();
        Ok(spec)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset {s:?}")))
    }
}

impl TryFrom<String> for Preset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Preset> for String {
    fn from(p: Preset) -> String {
        p.name().to_string()
    }
}
