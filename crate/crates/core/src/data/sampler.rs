use std::collections::HashMap;

use rand::Rng;

use super::manifest::{Label, Manifest, Roi, Task};
use super::vvol::read_volume;
use crate::error::{Error, Result};
use crate::nn::one_hot;
use crate::tensor::Tensor;

pub const ROI_EXTENT: usize = 29;
pub const MARGIN: usize = 2;
pub const PADDED_EXTENT: usize = ROI_EXTENT + 2 * MARGIN;

/// A `[1, 33, 33, 33]` ROI volume carrying the shift margin.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedRoi {
    pub tensor: Tensor,
    pub subject: String,
    pub roi: Roi,
}

impl PaddedRoi {
    /// Accepts `[33, 33, 33]` or `[1, 33, 33, 33]`.
    pub fn new(tensor: Tensor, subject: impl Into<String>, roi: Roi) -> Result<Self> {
        let p = PADDED_EXTENT;
        let tensor = match tensor.shape() {
            [a, b, c] if [*a, *b, *c] == [p; 3] => tensor.reshape(&[1, p, p, p])?,
            [1, a, b, c] if [*a, *b, *c] == [p; 3] => tensor,
            s => return Err(Error::mismatch(format!("ROI volume must be 33³, got {s:?}"))),
        };
        if !tensor.all_finite() {
            return Err(Error::Numeric("ROI volume holds non-finite values".into()));
        }
        Ok(PaddedRoi {
            tensor,
            subject: subject.into(),
            roi,
        })
    }
}

/// A uniform draw from {-2, ..., 2} per axis.
pub fn draw_shift(rng: &mut impl Rng) -> [i32; 3] {
    let m = MARGIN as i32;
    [(); 3].map(|_| rng.random_range(-m..=m))
}

/// The `[1, 29, 29, 29]` window displaced by `shift` from the center.
pub fn shift_crop(roi: &PaddedRoi, shift: [i32; 3]) -> Result<Tensor> {
    let mut offset = vec![0];
    for d in shift {
        let o = MARGIN as i32 + d;
        if !(0..=2 * MARGIN as i32).contains(&o) {
            return Err(Error::config(format!("shift {shift:?} exceeds the ±{MARGIN} margin")));
        }
        offset.push(o as usize);
    }
    roi.tensor.crop(&offset, &[1, ROI_EXTENT, ROI_EXTENT, ROI_EXTENT])
}

pub fn center_crop(roi: &PaddedRoi) -> Result<Tensor> {
    shift_crop(roi, [0; 3])
}

pub fn augment_shift(roi: &PaddedRoi, rng: &mut impl Rng) -> Result<Tensor> {
    shift_crop(roi, draw_shift(rng))
}

/// `(tau·n, floor(tau·n / eta))`.
pub fn epoch_plan(n_train_subjects: usize, tau: usize, eta: usize) -> Result<(usize, usize)> {
    if n_train_subjects == 0 || tau == 0 || eta == 0 {
        return Err(Error::config("epoch plan needs positive subjects, tau and eta"));
    }
    let images = tau * n_train_subjects;
    Ok((images, images / eta))
}

#[derive(Debug, Clone)]
pub struct LoadedSubject {
    pub id: String,
    pub label: Label,
    /// Class index within the task.
    pub class: usize,
    /// One ROI per network input, in input order.
    pub rois: Vec<PaddedRoi>,
}

/// The volumes a task needs, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub inputs: Vec<Roi>,
    pub subjects: Vec<LoadedSubject>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Load every subject whose label takes part in `task`.
    pub fn load(manifest: &Manifest, inputs: &[Roi], task: Task) -> Result<Self> {
        let mut subjects = Vec::new();
        for rec in &manifest.subjects {
            let Some(class) = task.class_index(rec.label) else { continue };
            let rois = inputs
                .iter()
                .map(|&roi| {
                    let path = rec.volumes.get(&roi).ok_or_else(|| {
                        Error::config(format!("subject {} has no {} volume", rec.subject_id, roi.column()))
                    })?;
                    PaddedRoi::new(read_volume(path)?, &rec.subject_id, roi)
                })
                .collect::<Result<Vec<_>>>()?;
            subjects.push(LoadedSubject {
                id: rec.subject_id.clone(),
                label: rec.label,
                class,
                rois,
            });
        }
        Self::from_subjects(task, inputs.to_vec(), subjects)
    }

    pub fn from_subjects(task: Task, inputs: Vec<Roi>, subjects: Vec<LoadedSubject>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in subjects.iter().enumerate() {
            if s.rois.len() != inputs.len() {
                return Err(Error::mismatch(format!("subject {} has {} ROIs", s.id, s.rois.len())));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateSubject(s.id.clone()));
            }
        }
        Ok(Dataset {
            task,
            inputs,
            subjects,
            index,
        })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Dataset positions of `ids` grouped by task class; ids of other
    /// labels are skipped, unknown ids are an error.
    pub fn members(&self, by_label: &std::collections::BTreeMap<Label, Vec<String>>) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.task.classes().len()];
        for (label, ids) in by_label {
            let Some(class) = self.task.class_index(*label) else { continue };
            for id in ids {
                let i = self
                    .position(id)
                    .ok_or_else(|| Error::config(format!("subject {id:?} is not in the dataset")))?;
                out[class].push(i);
            }
        }
        Ok(out)
    }

    /// One `[n, 1, 29, 29, 29]` tensor per input for the given subjects and shifts.
    pub fn assemble(&self, picks: &[(usize, [i32; 3])]) -> Result<Vec<Tensor>> {
        (0..self.inputs.len())
            .map(|k| {
                let crops = picks
                    .iter()
                    .map(|&(s, shift)| shift_crop(&self.subjects[s].rois[k], shift))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&crops.iter().collect::<Vec<_>>())
            })
            .collect()
    }
}

/// Uniform class, then uniform subject within the class.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    members: Vec<Vec<usize>>,
}

impl BalancedSampler {
    pub fn new(members: Vec<Vec<usize>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InsufficientSubjects("no classes to sample".into()));
        }
        if let Some(k) = members.iter().position(Vec::is_empty) {
            return Err(Error::InsufficientSubjects(format!("class {k} has no training subjects")));
        }
        Ok(BalancedSampler { members })
    }

    pub fn classes(&self) -> usize {
        self.members.len()
    }

    pub fn subjects(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    /// `(class, subject)`.
    pub fn draw(&self, rng: &mut impl Rng) -> (usize, usize) {
        let class = rng.random_range(0..self.members.len());
        let pool = &self.members[class];
        (class, pool[rng.random_range(0..pool.len())])
    }
}

pub struct Batch {
    /// `[eta, 1, 29, 29, 29]` per network input.
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// One-hot `[eta, K]`.
    pub targets: Tensor,
}

/// `eta` balanced draws, each shifted by one offset shared across the subject's ROIs.
pub fn balanced_batch(data: &Dataset, sampler: &BalancedSampler, eta: usize, rng: &mut impl Rng) -> Result<Batch> {
    if eta == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut picks = Vec::with_capacity(eta);
    let mut labels = Vec::with_capacity(eta);
    for _ in 0..eta {
        let (class, subject) = sampler.draw(rng);
        picks.push((subject, draw_shift(rng)));
        labels.push(class);
    }
    Ok(Batch {
        inputs: data.assemble(&picks)?,
        targets: one_hot(&labels, sampler.classes())?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roi(seed: u64) -> PaddedRoi {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[1, 33, 33, 33], |_| rng.random()).unwrap();
        PaddedRoi::new(t, "s", Roi::SmriL).unwrap()
    }

    #[test]
    fn zero_shift_is_center_crop_and_crop_oracle() {
        let r = roi(1);
        let c = center_crop(&r).unwrap();
        assert_eq!(c, r.tensor.crop(&[0, 2, 2, 2], &[1, 29, 29, 29]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = draw_shift(&mut rng);
            let off: Vec<usize> = std::iter::once(0).chain(s.iter().map(|&d| (2 + d) as usize)).collect();
            assert_eq!(shift_crop(&r, s).unwrap(), r.tensor.crop(&off, &[1, 29, 29, 29]).unwrap());
        }
        assert!(shift_crop(&r, [3, 0, 0]).is_err());
    }

    #[test]
    fn shift_bounds_and_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let s = draw_shift(&mut rng);
            assert!(s.iter().all(|d| (-2..=2).contains(d)));
            counts[(s[0] + 2) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.2).abs() < 0.02);
        }
    }

    #[test]
    fn epoch_plans() {
        assert_eq!(epoch_plan(439, 5, 15).unwrap(), (2195, 146));
        assert_eq!(epoch_plan(1, 1, 1).unwrap(), (1, 1));
        assert_eq!(epoch_plan(100, 5, 15).unwrap(), (500, 33));
        assert!(epoch_plan(0, 5, 15).is_err());
    }

    #[test]
    fn padded_roi_validation() {
        assert!(PaddedRoi::new(Tensor::zeros(&[33, 33, 33]).unwrap(), "a", Roi::DtiL).is_ok());
        assert!(PaddedRoi::new(Tensor::zeros(&[1, 29, 29, 29]).unwrap(), "a", Roi::DtiL).is_err());
        let mut t = Tensor::zeros(&[33, 33, 33]).unwrap();
        t.data_mut()[5] = f32::NAN;
        assert!(PaddedRoi::new(t, "a", Roi::DtiL).is_err());
    }

    #[test]
    fn binary_balance_and_batch_shapes() {
        let members = vec![(0..5).collect::<Vec<_>>(), (5..45).collect()];
        let sampler = BalancedSampler::new(members).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let ones = (0..n).filter(|_| sampler.draw(&mut rng).0 == 1).count();
        let f = ones as f64 / n as f64;
        assert!((0.48..=0.52).contains(&f), "{f}");
        assert!(BalancedSampler::new(vec![vec![0], vec![]]).is_err());

        let subjects = (0..4)
            .map(|i| LoadedSubject {
                id: format!("s{i}"),
                label: if i < 2 { Label::AD } else { Label::NC },
                class: usize::from(i >= 2),
                rois: vec![roi(i), roi(10 + i)],
            })
            .collect();
        let data = Dataset::from_subjects(Task::AdNc, vec![Roi::SmriL, Roi::SmriR], subjects).unwrap();
        let sampler = BalancedSampler::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
        let b = balanced_batch(&data, &sampler, 15, &mut rng).unwrap();
        assert_eq!(b.inputs.len(), 2);
        assert_eq!(b.inputs[0].shape(), &[15, 1, 29, 29, 29]);
        assert_eq!(b.targets.shape(), &[15, 2]);
        assert_eq!(b.labels.len(), 15);
    }
}
