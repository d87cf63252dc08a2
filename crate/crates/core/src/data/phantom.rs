//! Synthetic ROI phantoms: a centered ellipsoid whose size and edge
//! sharpness depend on the class, in two contrasts with opposite polarity.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Label, Manifest, Roi, SubjectRecord};
use super::sampler::PADDED_EXTENT;
use super::split::TEST_PER_CLASS;
use super::vvol::write_volume;
use crate::error::{Error, Result};
use crate::seed::{rng_for, Role};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub classes: Vec<Label>,
    pub per_class: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Per-subject uniform jitter of radius and center, in voxels.
    pub jitter: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            classes: vec![Label::AD, Label::NC],
            per_class: 40,
            seed: 7,
            noise: 0.1,
            jitter: 0.5,
        }
    }
}

impl PhantomConfig {
    /// 2 classes are AD and NC, 3 are AD, MCI and NC.
    pub fn classes_for(count: usize) -> Result<Vec<Label>> {
        match count {
            2 => Ok(vec![Label::AD, Label::NC]),
            3 => Ok(Label::ALL.to_vec()),
            _ => Err(Error::config(format!("phantoms support 2 or 3 classes, not {count}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut labels = self.classes.clone();
        labels.sort();
        labels.dedup();
        if labels.len() < 2 || labels.len() != self.classes.len() {
            return Err(Error::config("phantoms need at least two distinct classes"));
        }
        if self.per_class <= TEST_PER_CLASS {
            return Err(Error::config(format!(
                "per-class count {} is below the split minimum {}",
                self.per_class,
                TEST_PER_CLASS + 1
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) || !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::config("noise and jitter must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Mean radius (voxels) and logistic edge slope per class.
fn class_shape(label: Label) -> (f64, f64) {
    match label {
        Label::NC => (10.0, 1.6),
        Label::MCI => (8.5, 1.2),
        Label::AD => (7.0, 0.8),
    }
}

/// Ellipsoid semi-axis scales of the left and right ROI.
fn side_axes(roi: Roi) -> [f64; 3] {
    match roi {
        Roi::SmriL | Roi::DtiL => [1.0, 0.85, 1.15],
        Roi::SmriR | Roi::DtiR => [1.1, 0.8, 1.05],
    }
}

struct Geometry {
    radius: f64,
    slope: f64,
    center: [f64; 3],
}

/// Occupancy in `[0, 1]` of one side's ellipsoid.
fn occupancy(g: &Geometry, axes: [f64; 3]) -> Vec<f64> {
    let n = PADDED_EXTENT;
    let mut out = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let r2: f64 = (0..3).map(|a| ((p[a] - g.center[a]) / axes[a]).powi(2)).sum();
                let edge = g.radius - r2.sqrt();
                out.push(1.0 / (1.0 + (-g.slope * edge).exp()));
            }
        }
    }
    out
}

/// Write four `[1, 33, 33, 33]` volumes per subject plus `manifest.csv` under `out_dir`.
pub fn generate_phantoms(config: &PhantomConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::config(e.to_string()))?;
    let mid = (PADDED_EXTENT - 1) as f64 / 2.0;
    let mut subjects = Vec::new();
    for (ci, &label) in config.classes.iter().enumerate() {
        let (radius, slope) = class_shape(label);
        for i in 0..config.per_class {
            let id = format!("{label}_{i:03}");
            let mut rng = rng_for(config.seed, Role::Phantom, (ci * config.per_class + i) as u64);
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng| {
                if config.jitter > 0.0 {
                    rng.random_range(-config.jitter..=config.jitter)
                } else {
                    0.0
                }
            };
            let mut volumes = BTreeMap::new();
            for side in [[Roi::SmriL, Roi::DtiL], [Roi::SmriR, Roi::DtiR]] {
                let g = Geometry {
                    radius: radius + jitter(&mut rng),
                    slope,
                    center: [mid + jitter(&mut rng), mid + jitter(&mut rng), mid + jitter(&mut rng)],
                };
                let occ = occupancy(&g, side_axes(side[0]));
                for roi in side {
                    let data: Vec<f32> = occ
                        .iter()
                        .map(|&o| {
                            let clean = match roi {
                                Roi::SmriL | Roi::SmriR => 0.2 + 0.6 * o,
                                Roi::DtiL | Roi::DtiR => 0.8 - 0.5 * o,
                            };
                            let eps = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            (clean + eps) as f32
                        })
                        .collect();
                    let n = PADDED_EXTENT;
                    let t = Tensor::new(vec![1, n, n, n], data)?;
                    let path = vol_dir.join(format!("{id}_{}.vvol", roi.column()));
                    write_volume(&path, &t)?;
                    volumes.insert(roi, path);
                }
            }
            subjects.push(SubjectRecord {
                subject_id: id,
                label,
                volumes,
            });
        }
    }
    let manifest = Manifest::new(subjects)?;
    write_manifest(&manifest, out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
