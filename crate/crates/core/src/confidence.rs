//! Softmax, confidence scores and the selective-accuracy curve.
//!
//! All scores are computed in `f64` even though logits are stored as `f32`,
//! so that threshold comparisons do not depend on summation order.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{LabeledDataset, PredictionSet};

/// Scalar confidence of a prediction. Higher always means more confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMetric {
    /// Largest softmax probability, in `(0, 1]`.
    #[default]
    MaxProb,
    /// Largest minus second-largest logit, in `[0, inf)`.
    LogitGap,
    /// Largest minus second-largest probability, in `[0, 1)`.
    ProbGap,
    /// Negative entropy of the softmax distribution (natural log), in `[-ln C, 0]`.
    NegEntropy,
}

impl ConfidenceMetric {
    pub const ALL: [ConfidenceMetric; 4] = [
        ConfidenceMetric::MaxProb,
        ConfidenceMetric::LogitGap,
        ConfidenceMetric::ProbGap,
        ConfidenceMetric::NegEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceMetric::MaxProb => "max_prob",
            ConfidenceMetric::LogitGap => "logit_gap",
            ConfidenceMetric::ProbGap => "prob_gap",
            ConfidenceMetric::NegEntropy => "neg_entropy",
        }
    }

    fn needs_two_classes(self) -> bool {
        matches!(self, ConfidenceMetric::LogitGap | ConfidenceMetric::ProbGap)
    }

    /// Threshold at which every example exits.
    pub fn exit_all_threshold(self) -> f64 {
        match self {
            ConfidenceMetric::NegEntropy => f64::MIN,
            _ => 0.0,
        }
    }

    /// Threshold at which no example exits; the cascade degenerates to the
    /// ensemble of its models.
    ///
    /// For the probability-valued metrics this is 1. A threshold at or above
    /// this value never lets an example out early, even when floating point
    /// saturates a score to exactly 1.
    pub fn never_exit_threshold(self) -> f64 {
        match self {
            ConfidenceMetric::LogitGap => f64::MAX,
            _ => 1.0,
        }
    }

    /// Exit rule: `score >= threshold`, unless the threshold is the
    /// never-exit ceiling.
    #[inline]
    pub fn exits(self, score: f64, threshold: f64) -> bool {
        threshold < self.never_exit_threshold() && score >= threshold
    }

    /// Score a logit vector.
    pub fn score_logits(self, logits: &[f64]) -> f64 {
        match self {
            ConfidenceMetric::LogitGap => {
                let (first, second) = top_two(logits);
                first - second
            }
            _ => self.score_probs(&softmax(logits)),
        }
    }

    /// Score a probability vector directly (no re-normalization).
    ///
    /// `LogitGap` is the log-odds `ln p1 - ln p2`, which is the logit gap of
    /// any logit vector whose softmax is `probs`.
    pub fn score_probs(self, probs: &[f64]) -> f64 {
        match self {
            ConfidenceMetric::MaxProb => probs.iter().copied().fold(f64::MIN, f64::max),
            ConfidenceMetric::ProbGap => {
                let (first, second) = top_two(probs);
                first - second
            }
            ConfidenceMetric::LogitGap => {
                let (first, second) = top_two(probs);
                (first.ln() - second.ln()).min(f64::MAX)
            }
            ConfidenceMetric::NegEntropy => probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum(),
        }
    }
}

impl fmt::Display for ConfidenceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfidenceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "max_prob" | "maxprob" => Ok(ConfidenceMetric::MaxProb),
            "logit_gap" | "logitgap" => Ok(ConfidenceMetric::LogitGap),
            "prob_gap" | "probgap" => Ok(ConfidenceMetric::ProbGap),
            "neg_entropy" | "negentropy" | "entropy" => Ok(ConfidenceMetric::NegEntropy),
            _ => Err(Error::invalid(format!("unknown confidence metric `{s}`"))),
        }
    }
}

/// Largest and second-largest values. With a single element the second is
/// `-inf`.
fn top_two(values: &[f64]) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    (first, second)
}

/// Numerically stable softmax (subtracts the maximum before exponentiating).
pub fn softmax<T: Copy + Into<f64>>(logits: &[T]) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    softmax_into(logits, &mut out);
    out
}

pub(crate) fn softmax_into<T: Copy + Into<f64>>(logits: &[T], out: &mut Vec<f64>) {
    out.clear();
    let max = logits
        .iter()
        .map(|&v| v.into())
        .fold(f64::NEG_INFINITY, f64::max);
    out.extend(logits.iter().map(|&v| (v.into() - max).exp()));
    let total: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<T: Copy + PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Confidence score of a single logit vector.
pub fn confidence<T: Copy + Into<f64>>(logits: &[T], metric: ConfidenceMetric) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("confidence of an empty logit vector"));
    }
    if metric.needs_two_classes() && logits.len() < 2 {
        return Err(Error::invalid(format!(
            "{metric} needs at least two classes"
        )));
    }
    let logits: Vec<f64> = logits.iter().map(|&v| v.into()).collect();
    Ok(metric.score_logits(&logits))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Percentage of examples kept, in `(0, 100]`.
    pub k: f64,
    pub accuracy: f64,
}

/// Accuracy on the top-k% most confident examples, for increasing k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveAccuracyCurve {
    pub points: Vec<CurvePoint>,
}

impl SelectiveAccuracyCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "accuracy"])?;
        for p in &self.points {
            w.write_record([p.k.to_string(), p.accuracy.to_string()])?;
        }
        w.flush()
    }
}

/// Selective-accuracy curve of one model.
///
/// For each `k` the `ceil(k * N / 100)` examples with the highest confidence
/// are kept (ties broken by ascending example index) and their accuracy is
/// reported. The returned points are sorted by `k` and deduplicated.
pub fn selective_accuracy(
    preds: &PredictionSet,
    labels: &LabeledDataset,
    metric: ConfidenceMetric,
    ks: &[f64],
) -> Result<SelectiveAccuracyCurve> {
    if ks.is_empty() {
        return Err(Error::invalid("selective accuracy needs at least one k"));
    }
    if let Some(&k) = ks.iter().find(|&&k| !(k > 0.0 && k <= 100.0)) {
        return Err(Error::invalid(format!("k = {k} is outside (0, 100]")));
    }
    let n = preds.num_examples();
    if n != labels.len() {
        return Err(Error::DimensionMismatch {
            entry: preds.model_id.clone(),
            expected: labels.len(),
            actual: n,
        });
    }
    if metric.needs_two_classes() && preds.num_classes() < 2 {
        return Err(Error::invalid(format!(
            "{metric} needs at least two classes"
        )));
    }

    let mut scored: Vec<(f64, bool)> = (0..n)
        .map(|i| {
            let row: Vec<f64> = preds.row(i).iter().map(|&v| f64::from(v)).collect();
            let correct = argmax(&row) as u32 == labels.labels[i];
            (metric.score_logits(&row), correct)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ascending index among equal scores.
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut correct_prefix = Vec::with_capacity(n + 1);
    correct_prefix.push(0usize);
    for &i in &order {
        let last = *correct_prefix.last().unwrap();
        correct_prefix.push(last + usize::from(scored[i].1));
    }
    scored.clear();

    let mut ks: Vec<f64> = ks.to_vec();
    ks.sort_by(f64::total_cmp);
    ks.dedup();
    let points = ks
        .into_iter()
        .map(|k| {
            let keep = if k == 100.0 {
                n
            } else {
                ((k * n as f64 / 100.0).ceil() as usize).clamp(1, n)
            };
            CurvePoint {
                k,
                accuracy: correct_prefix[keep] as f64 / keep as f64,
            }
        })
        .collect();
    Ok(SelectiveAccuracyCurve { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform() {
        for p in softmax(&[0.0f64, 0.0, 0.0]) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_reference_values() {
        // Reference values from 30-digit evaluation of e^x / sum e^x.
        let p = softmax(&[2.0f64, 1.0, 0.0]);
        let expected = [
            0.665_240_955_774_821_9,
            0.244_728_471_054_797_6,
            0.090_030_573_170_380_46,
        ];
        for (a, b) in p.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&[1000.0f32, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn metric_examples() {
        assert_abs_diff_eq!(
            confidence(&[0.5f32; 4], ConfidenceMetric::MaxProb).unwrap(),
            0.25,
            epsilon = 1e-12
        );
        assert_eq!(
            confidence(&[2.0f64, 1.0, 0.0], ConfidenceMetric::LogitGap).unwrap(),
            1.0
        );
        // -sum p ln p at 30 digits: -0.832395581839938872951923725855
        assert_abs_diff_eq!(
            confidence(&[2.0f64, 1.0, 0.0], ConfidenceMetric::NegEntropy).unwrap(),
            -0.832_395_581_839_938_9,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            confidence(&[2.0f64, 1.0, 0.0], ConfidenceMetric::ProbGap).unwrap(),
            0.665_240_955_774_821_9 - 0.244_728_471_054_797_6,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gap_metrics_reject_single_class() {
        assert!(confidence(&[1.0f32], ConfidenceMetric::LogitGap).is_err());
        assert!(confidence(&[1.0f32], ConfidenceMetric::ProbGap).is_err());
        assert_eq!(
            confidence(&[1.0f32], ConfidenceMetric::MaxProb).unwrap(),
            1.0
        );
    }

    #[test]
    fn metric_parsing_round_trips() {
        for m in ConfidenceMetric::ALL {
            assert_eq!(m.name().parse::<ConfidenceMetric>().unwrap(), m);
        }
        assert!("bogus".parse::<ConfidenceMetric>().is_err());
    }

    #[test]
    fn never_exit_threshold_blocks_saturated_scores() {
        let m = ConfidenceMetric::MaxProb;
        let saturated = m.score_logits(&[1000.0, 0.0]);
        assert_eq!(saturated, 1.0);
        assert!(!m.exits(saturated, 1.0));
        assert!(m.exits(saturated, 0.999));
        assert!(m.exits(0.0, m.exit_all_threshold()));
    }

    fn fixture(rows: &[[f32; 2]], labels: &[u32]) -> (PredictionSet, LabeledDataset) {
        let logits = rows.iter().flatten().copied().collect();
        (
            PredictionSet::new("m", "t", logits, 2, 1.0).unwrap(),
            LabeledDataset::new(labels.to_vec()),
        )
    }

    #[test]
    fn selective_accuracy_upper_bound_shape() {
        // Correct predictions all more confident than incorrect ones; 6 of 10 correct.
        let rows: Vec<[f32; 2]> = (0..10).map(|i| [10.0 - i as f32, 0.0]).collect();
        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let (p, l) = fixture(&rows, &labels);
        let ks: Vec<f64> = (1..=10).map(|i| i as f64 * 10.0).collect();
        let curve = selective_accuracy(&p, &l, ConfidenceMetric::MaxProb, &ks).unwrap();
        for pt in &curve.points {
            if pt.k <= 60.0 {
                assert_eq!(pt.accuracy, 1.0, "k = {}", pt.k);
            } else {
                assert_abs_diff_eq!(pt.accuracy, 6.0 / (pt.k / 10.0), epsilon = 1e-12);
            }
        }
        for w in curve.points.windows(2) {
            assert!(w[1].accuracy <= w[0].accuracy);
        }
    }

    #[test]
    fn selective_accuracy_ties_use_example_order() {
        // Identical confidences: keeping 1 of 2 takes example 0.
        let (p, l) = fixture(&[[1.0, 0.0], [1.0, 0.0]], &[1, 0]);
        let c = selective_accuracy(&p, &l, ConfidenceMetric::MaxProb, &[50.0]).unwrap();
        assert_eq!(c.points[0].accuracy, 0.0);
    }

    #[test]
    fn selective_accuracy_errors() {
        let (p, l) = fixture(&[[1.0, 0.0]], &[0]);
        assert!(selective_accuracy(&p, &l, ConfidenceMetric::MaxProb, &[]).is_err());
        assert!(selective_accuracy(&p, &l, ConfidenceMetric::MaxProb, &[0.0]).is_err());
        assert!(selective_accuracy(&p, &l, ConfidenceMetric::MaxProb, &[101.0]).is_err());
    }

    #[test]
    fn curve_csv_header() {
        let curve = SelectiveAccuracyCurve {
            points: vec![CurvePoint {
                k: 50.0,
                accuracy: 0.5,
            }],
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,accuracy\n50,0.5\n");
    }

    fn logit_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 2..12)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in logit_vec()) {
            let p = softmax(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_shift_invariant(v in logit_vec(), c in -1.0e4f64..1.0e4) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            for (a, b) in softmax(&v).iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_preserves_argmax(v in logit_vec()) {
            prop_assert_eq!(argmax(&softmax(&v)), argmax(&v));
        }

        #[test]
        fn metrics_invariant_under_class_permutation(v in logit_vec(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm = v.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for m in ConfidenceMetric::ALL {
                let a = m.score_logits(&v);
                let b = m.score_logits(&perm);
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} {} {}", m, a, b);
            }
        }

        #[test]
        fn metric_ranges(v in logit_vec()) {
            let c = v.len() as f64;
            let max_prob = ConfidenceMetric::MaxProb.score_logits(&v);
            prop_assert!(max_prob > 0.0 && max_prob <= 1.0);
            let gap = ConfidenceMetric::ProbGap.score_logits(&v);
            prop_assert!((0.0..=1.0).contains(&gap));
            prop_assert!(ConfidenceMetric::LogitGap.score_logits(&v) >= 0.0);
            let ne = ConfidenceMetric::NegEntropy.score_logits(&v);
            prop_assert!(ne <= 0.0 && ne >= -c.ln() - 1e-9);
        }
    }
}
