//! Confusion matrices, accuracy/sensitivity/specificity with normal-approximation
//! intervals, and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::PROB_FLOOR;
use crate::tensor::Tensor;

pub const DEFAULT_THETA: f64 = 1.96;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Mean per-class recall over classes that have samples.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        let recalls: Vec<f64> = self
            .counts
            .iter()
            .enumerate()
            .filter_map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::mismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::InvalidLabel(format!("class index {} out of range 0..{k}", p.max(t))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        classes: (0..k).map(|i| i.to_string()).collect(),
        counts,
    })
}

/// `None` marks an undefined metric (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy for any K; sensitivity and specificity when `positive` is given
/// and the matrix is binary.
pub fn metrics(cm: &ConfusionMatrix, positive: Option<usize>) -> Result<Metrics> {
    let accuracy = ratio(cm.trace(), cm.total());
    let (mut sensitivity, mut specificity) = (None, None);
    if let Some(p) = positive {
        if cm.k() != 2 || p > 1 {
            return Err(Error::config("sensitivity/specificity need a binary matrix and class 0 or 1"));
        }
        let n = 1 - p;
        let (tp, fn_) = (cm.counts[p][p], cm.counts[p][n]);
        let (tn, fp) = (cm.counts[n][n], cm.counts[n][p]);
        sensitivity = ratio(tp, tp + fn_);
        specificity = ratio(tn, tn + fp);
    }
    Ok(Metrics {
        accuracy,
        sensitivity,
        specificity,
    })
}

/// Half-width `theta·sqrt(val·(1−val)/n)` of the normal-approximation (Wald) interval.
pub fn confidence_interval(value: f64, n: usize, theta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidSampleCount);
    }
    if !(0.0..=1.0).contains(&value) || !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::config(format!("value {value} must lie in [0, 1] and theta {theta} be positive")));
    }
    Ok(theta * (value * (1.0 - value) / n as f64).sqrt())
}

/// Wilson score interval `(low, high)`.
pub fn wilson_interval(value: f64, n: usize, theta: f64) -> Result<(f64, f64)> {
    confidence_interval(value, n, theta)?;
    let n = n as f64;
    let z2 = theta * theta;
    let denom = 1.0 + z2 / n;
    let center = (value + z2 / (2.0 * n)) / denom;
    let half = theta * (value * (1.0 - value) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok((center - half, center + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWithCi {
    pub value: f64,
    /// Half-width of the interval.
    pub ci: f64,
    pub n: usize,
    pub theta: f64,
}

impl MetricWithCi {
    pub fn new(value: f64, n: usize, theta: f64) -> Result<Self> {
        Ok(MetricWithCi {
            value,
            ci: confidence_interval(value, n, theta)?,
            n,
            theta,
        })
    }

    /// `0.933 ±0.089 [0.844, 1.022]`
    pub fn summary(&self) -> String {
        format!(
            "{:.3} ±{:.3} [{:.3}, {:.3}]",
            self.value,
            self.ci,
            self.value - self.ci,
            self.value + self.ci
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub accuracy: Option<MetricWithCi>,
    pub sensitivity: Option<MetricWithCi>,
    pub specificity: Option<MetricWithCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub preset: String,
    pub subset: String,
    pub n: usize,
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    /// Mean cross-entropy over the subset.
    pub loss: f64,
    pub metrics: ReportMetrics,
}

impl EvalReport {
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        task: Task,
        preset: &str,
        subset: &str,
        loss: f64,
        theta: f64,
    ) -> Result<Self> {
        let n = cm.total() as usize;
        let m = metrics(cm, task.positive_class())?;
        let with_ci = |v: Option<f64>| v.map(|v| MetricWithCi::new(v, n, theta)).transpose();
        Ok(EvalReport {
            task,
            preset: preset.to_string(),
            subset: subset.to_string(),
            n,
            classes: cm.classes.clone(),
            confusion: cm.counts.clone(),
            loss,
            metrics: ReportMetrics {
                accuracy: with_ci(m.accuracy)?,
                sensitivity: with_ci(m.sensitivity)?,
                specificity: with_ci(m.specificity)?,
            },
        })
    }

    /// `ACC 0.933 ±0.089 [0.844, 1.022]  SEN ...  SPC ...`
    pub fn summary_line(&self) -> String {
        let mut parts = vec![format!("{} {} {} n={}", self.preset, self.task, self.subset, self.n)];
        for (name, m) in [
            ("ACC", &self.metrics.accuracy),
            ("SEN", &self.metrics.sensitivity),
            ("SPC", &self.metrics.specificity),
        ] {
            match m {
                Some(m) => parts.push(format!("{name} {}", m.summary())),
                None if name == "ACC" || self.task.positive_class().is_some() => {
                    parts.push(format!("{name} undefined"))
                }
                None => {}
            }
        }
        parts.join("  ")
    }

    pub const CSV_HEADER: &'static str = "preset,task,subset,n,loss,accuracy,accuracy_ci,sensitivity,sensitivity_ci,specificity,specificity_ci";

    pub fn csv_row(&self) -> String {
        let cell = |m: &Option<MetricWithCi>| match m {
            Some(m) => format!("{},{}", m.value, m.ci),
            None => ",".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.preset,
            self.task,
            self.subset,
            self.n,
            self.loss,
            cell(&self.metrics.accuracy),
            cell(&self.metrics.sensitivity),
            cell(&self.metrics.specificity)
        )
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Infer-mode predictions on center crops.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// `[n, K]`.
    pub probs: Tensor,
    pub mean_loss: f64,
}

impl Scored {
    pub fn accuracy(&self) -> f64 {
        let hits = self.labels.iter().zip(&self.predictions).filter(|(a, b)| a == b).count();
        hits as f64 / self.labels.len() as f64
    }
}

pub const EVAL_BATCH: usize = 16;

/// Score the given dataset positions.
pub fn score(net: &Network, data: &Dataset, subjects: &[usize]) -> Result<Scored> {
    if subjects.is_empty() {
        return Err(Error::InsufficientSubjects("nothing to evaluate".into()));
    }
    let k = data.task.classes().len();
    let mut probs = Vec::with_capacity(subjects.len() * k);
    for chunk in subjects.chunks(EVAL_BATCH) {
        let picks: Vec<_> = chunk.iter().map(|&s| (s, [0; 3])).collect();
        let inputs = data.assemble(&picks)?;
        probs.extend_from_slice(net.infer(&inputs)?.probs.data());
    }
    let labels: Vec<usize> = subjects.iter().map(|&s| data.subjects[s].class).collect();
    let probs = Tensor::new(vec![subjects.len(), k], probs)?;
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(subjects.len());
    for (row, &y) in probs.data().chunks(k).zip(&labels) {
        loss -= (row[y] as f64).max(PROB_FLOOR).ln();
        predictions.push(argmax(row));
    }
    Ok(Scored {
        labels,
        predictions,
        probs,
        mean_loss: loss / subjects.len() as f64,
    })
}

/// Full report on dataset positions `subjects`.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    subjects: &[usize],
    preset: &str,
    subset: &str,
    theta: f64,
) -> Result<EvalReport> {
    let scored = score(net, data, subjects)?;
    let mut cm = confusion(&scored.predictions, &scored.labels, data.task.classes().len())?;
    cm.classes = data.task.classes().iter().map(|l| l.to_string()).collect();
    EvalReport::from_confusion(&cm, data.task, preset, subset, scored.mean_loss, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round3(x: f64) -> f64 {
        (x * 1000.0).round() / 1000.0
    }

    #[test]
    fn reference_half_widths() {
        let cases = [
            (0.933, 30, 0.089),
            (0.9, 30, 0.107),
            (0.867, 30, 0.122),
            (0.833, 30, 0.133),
            (0.8, 30, 0.143),
            (0.733, 30, 0.158),
            (0.667, 30, 0.169),
            (0.62, 45, 0.142),
            (0.689, 45, 0.135),
            (1.0, 30, 0.0),
        ];
        for (v, n, h) in cases {
            assert_eq!(round3(confidence_interval(v, n, DEFAULT_THETA).unwrap()), h, "{v} {n}");
        }
        assert!(matches!(confidence_interval(0.5, 0, 1.96), Err(Error::InvalidSampleCount)));
        assert!(confidence_interval(1.5, 3, 1.96).is_err());
    }

    #[test]
    fn wilson_differs_from_wald_and_stays_in_unit_interval() {
        let (lo, hi) = wilson_interval(1.0, 30, 1.96).unwrap();
        assert!(hi <= 1.0 + 1e-12 && lo > 0.85 && lo < 1.0);
        let (lo, hi) = wilson_interval(0.5, 100, 1.96).unwrap();
        assert!(((lo + hi) / 2.0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 0, 1, 1, 1], &[0, 0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 0], vec![0, 3]]);
        let cm = confusion(&[0; 5], &[0, 1, 1, 0, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 0], vec![3, 0]]);
        assert!(matches!(confusion(&[2], &[0], 2), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn metric_examples() {
        let cm = ConfusionMatrix {
            classes: vec!["AD".into(), "NC".into()],
            counts: vec![vec![14, 1], vec![1, 14]],
        };
        let m = metrics(&cm, Some(0)).unwrap();
        for v in [m.accuracy, m.sensitivity, m.specificity] {
            assert_eq!(round3(v.unwrap()), 0.933);
        }
        let perfect = ConfusionMatrix {
            classes: cm.classes.clone(),
            counts: vec![vec![15, 0], vec![0, 15]],
        };
        let m = metrics(&perfect, Some(0)).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (Some(1.0), Some(1.0), Some(1.0)));
        let no_pos = ConfusionMatrix {
            classes: cm.classes.clone(),
            counts: vec![vec![0, 0], vec![3, 7]],
        };
        assert_eq!(metrics(&no_pos, Some(0)).unwrap().sensitivity, None);
    }

    #[test]
    fn report_json_marks_undefined_as_null() {
        let cm = ConfusionMatrix {
            classes: vec!["AD".into(), "NC".into()],
            counts: vec![vec![0, 0], vec![3, 7]],
        };
        let r = EvalReport::from_confusion(&cm, Task::AdNc, "p", "test", 0.5, 1.96).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert!(v["metrics"]["sensitivity"].is_null());
        assert_eq!(v["metrics"]["accuracy"]["value"], 0.7);
        assert_eq!(v["n"], 10);
        assert!(r.summary_line().contains("SEN undefined"));
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    proptest! {
        #[test]
        fn half_width_shape(n in 1usize..500, v in 0.0f64..=1.0) {
            let h = confidence_interval(v, n, 1.96).unwrap();
            prop_assert!(h <= confidence_interval(0.5, n, 1.96).unwrap() + 1e-15);
            prop_assert!(confidence_interval(v, n + 1, 1.96).unwrap() <= h);
            if v > 0.0 && v < 1.0 {
                prop_assert!(confidence_interval(v, n + 1, 1.96).unwrap() < h);
            }
        }

        #[test]
        fn tally_oracle_and_order_independence(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200), rot in 0usize..200) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let cm = confusion(&p, &t, 3).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let n = pairs.iter().filter(|&&(a, b)| a == j && b == i).count() as u64;
                    prop_assert_eq!(cm.counts[i][j], n);
                }
            }
            let mut rotated = pairs.clone();
            rotated.rotate_left(rot % pairs.len());
            let (p2, t2): (Vec<usize>, Vec<usize>) = rotated.into_iter().unzip();
            prop_assert_eq!(metrics(&confusion(&p2, &t2, 3).unwrap(), None).unwrap(), metrics(&cm, None).unwrap());
        }

        #[test]
        fn balanced_test_set_accuracy_is_balanced_accuracy(per in 1u64..30, hits in prop::collection::vec(0u64..30, 3)) {
            let counts: Vec<Vec<u64>> = (0..3).map(|i| {
                let h = hits[i].min(per);
                let mut row = vec![0; 3];
                row[i] = h;
                row[(i + 1) % 3] = per - h;
                row
            }).collect();
            let cm = ConfusionMatrix { classes: vec!["a".into(), "b".into(), "c".into()], counts };
            let acc = metrics(&cm, None).unwrap().accuracy.unwrap();
            prop_assert!((acc - cm.balanced_accuracy().unwrap()).abs() < 1e-12);
        }
    }
}
