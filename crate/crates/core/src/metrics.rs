//! Evaluation and reward arithmetic: confusion-matrix metrics, AUC,
//! recall@K, NDCG@K, batch rewards and serving cost.
//!
//! Binary metrics treat "non-defect" as the positive class unless a
//! different polarity is requested. Percentages are kept unrounded; use
//! [`round2`] for reporting.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Defect,
    NonDefect,
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "defect" | "d" | "bad" => Ok(Label::Defect),
            "non-defect" | "nondefect" | "non_defect" | "n" | "good" => Ok(Label::NonDefect),
            other => Err(Error::InvalidInput(format!("unknown label `{other}`"))),
        }
    }
}

/// Rounds to two decimals, halves away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(gold: &[Label], pred: &[Label], positive: Label) -> Result<ConfusionCounts> {
    if gold.len() != pred.len() {
        return Err(Error::InvalidInput(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidInput("no examples".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&g, &p) in gold.iter().zip(pred) {
        match (g == positive, p == positive) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub pos_acc: f64,
    pub pos_prec: f64,
    pub neg_acc: f64,
    pub neg_prec: f64,
    pub pos_f1: f64,
    pub neg_f1: f64,
    pub defect_rate: f64,
    pub model_defect_rate: f64,
}

fn pct(num: u64, den: u64) -> f64 {
    100.0 * num as f64 / den as f64
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Harmonic-mean F1 from precision and recall (any common scale).
pub fn f1(precision: f64, recall: f64) -> f64 {
    harmonic(precision, recall)
}

pub fn binary_metrics(c: &ConfusionCounts) -> Result<BinaryMetrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidInput("confusion counts are all zero".into()));
    }
    let gold_pos = c.tp + c.fn_;
    let gold_neg = c.tn + c.fp;
    if gold_pos == 0 || gold_neg == 0 {
        return Err(Error::DegenerateInput(format!(
            "balanced accuracy needs both classes (positive {gold_pos}, negative {gold_neg})"
        )));
    }
    let pos_acc = pct(c.tp, gold_pos);
    let neg_acc = pct(c.tn, gold_neg);
    let precision = |hit: u64, predicted: u64| {
        if predicted == 0 {
            0.0
        } else {
            pct(hit, predicted)
        }
    };
    let pos_prec = precision(c.tp, c.tp + c.fp);
    let neg_prec = precision(c.tn, c.tn + c.fn_);
    Ok(BinaryMetrics {
        acc: pct(c.tp + c.tn, total),
        bacc: (pos_acc + neg_acc) / 2.0,
        pos_acc,
        pos_prec,
        neg_acc,
        neg_prec,
        pos_f1: harmonic(pos_prec, pos_acc),
        neg_f1: harmonic(neg_prec, neg_acc),
        defect_rate: pct(gold_neg, total),
        model_defect_rate: pct(c.tn + c.fn_, total),
    })
}

impl BinaryMetrics {
    pub fn rounded(&self) -> BinaryMetrics {
        BinaryMetrics {
            acc: round2(self.acc),
            bacc: round2(self.bacc),
            pos_acc: round2(self.pos_acc),
            pos_prec: round2(self.pos_prec),
            neg_acc: round2(self.neg_acc),
            neg_prec: round2(self.neg_prec),
            pos_f1: round2(self.pos_f1),
            neg_f1: round2(self.neg_f1),
            defect_rate: round2(self.defect_rate),
            model_defect_rate: round2(self.model_defect_rate),
        }
    }
}

/// Balanced accuracy from two class recalls given in percent.
pub fn bacc(pos_recall: f64, neg_recall: f64) -> Result<f64> {
    for v in [pos_recall, neg_recall] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::InvalidInput(format!(
                "recall {v} is outside [0, 100]"
            )));
        }
    }
    Ok((pos_recall + neg_recall) / 2.0)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from average ranks in O(n log n).
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = scores.iter().filter(|(_, y)| *y).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateInput(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rank sums are accumulated doubled so tied blocks stay integral.
    let mut pos_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j, average (i + 1 + j) / 2
        let avg2 = (i + 1 + j) as u128;
        let pos_in_block = sorted[i..j].iter().filter(|(_, y)| *y).count() as u128;
        pos_rank_sum2 += avg2 * pos_in_block;
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R_pos - P(P+1)/2, doubled on both sides
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    /// Candidates, best first.
    pub items: Vec<String>,
    /// Graded relevance per item; unjudged items count as 0.
    pub judgments: BTreeMap<String, f64>,
}

impl RankedList {
    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(dup) = self.items.iter().find(|i| !seen.insert(i.as_str())) {
            return Err(Error::InvalidInput(format!("item `{dup}` ranked twice")));
        }
        if let Some((k, v)) = self
            .judgments
            .iter()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidInput(format!("relevance of `{k}` is {v}")));
        }
        Ok(())
    }

    fn gain_at(&self, i: usize) -> f64 {
        self.judgments.get(&self.items[i]).copied().unwrap_or(0.0)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    Ok(())
}

pub fn recall_at_k(r: &RankedList, k: usize) -> Result<f64> {
    r.validate()?;
    check_k(k)?;
    let relevant = r.judgments.values().filter(|v| **v > 0.0).count();
    if relevant == 0 {
        return Err(Error::DegenerateInput("no relevant items".into()));
    }
    let hits = (0..k.min(r.items.len()))
        .filter(|&i| r.gain_at(i) > 0.0)
        .count();
    Ok(hits as f64 / relevant as f64)
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains
        .enumerate()
        .map(|(i, rel)| (2f64.powf(rel) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// DCG@k with gain `2^rel - 1` and discount `1 / log2(rank + 1)`.
pub fn dcg_at_k(r: &RankedList, k: usize) -> Result<f64> {
    r.validate()?;
    check_k(k)?;
    Ok(dcg((0..k.min(r.items.len())).map(|i| r.gain_at(i))))
}

/// DCG@k normalized by the best achievable DCG@k over all judged items.
pub fn ndcg_at_k(r: &RankedList, k: usize) -> Result<f64> {
    let actual = dcg_at_k(r, k)?;
    let mut ideal: Vec<f64> = r.judgments.values().copied().filter(|v| *v > 0.0).collect();
    if ideal.is_empty() {
        return Err(Error::DegenerateInput("all gains are zero".into()));
    }
    ideal.sort_by(|a, b| b.total_cmp(a));
    Ok(actual / dcg(ideal.into_iter().take(k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shaping {
    #[default]
    Identity,
    Scale {
        c: f64,
    },
    /// Scale by `c`, then clamp to `[lo, hi]`.
    ClipScale {
        c: f64,
        lo: f64,
        hi: f64,
    },
}

impl Shaping {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Shaping::Identity => x,
            Shaping::Scale { c } => c * x,
            Shaping::ClipScale { c, lo, hi } => (c * x).clamp(lo, hi),
        }
    }
}

impl std::str::FromStr for Shaping {
    type Err = Error;

    /// `identity`, `scale:C` or `clip:LO:HI:C`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidInput(format!("bad number `{t}` in shaping `{s}`")))
        };
        match parts.as_slice() {
            ["identity"] => Ok(Shaping::Identity),
            ["scale", c] => Ok(Shaping::Scale { c: num(c)? }),
            ["clip", lo, hi, c] => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(Error::InvalidInput(format!("clip bounds {lo} > {hi}")));
                }
                Ok(Shaping::ClipScale { c: num(c)?, lo, hi })
            }
            _ => Err(Error::InvalidInput(format!(
                "shaping `{s}` is not identity, scale:C or clip:LO:HI:C"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedSample {
    pub input: String,
    pub output: String,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBatch {
    pub task: String,
    pub samples: Vec<RewardedSample>,
    pub m_with: Option<f64>,
    pub m_base: Option<f64>,
    pub shaping: Shaping,
    pub reward: Option<f64>,
}

impl RewardBatch {
    pub fn new(
        task: impl Into<String>,
        samples: impl IntoIterator<Item = (String, String)>,
    ) -> Self {
        RewardBatch {
            task: task.into(),
            samples: samples
                .into_iter()
                .map(|(input, output)| RewardedSample {
                    input,
                    output,
                    reward: None,
                })
                .collect(),
            m_with: None,
            m_base: None,
            shaping: Shaping::Identity,
            reward: None,
        }
    }
}

/// Shapes the metric gain and writes the same reward onto every sample.
pub fn batch_reward(
    m_with: f64,
    m_base: f64,
    shaping: Shaping,
    mut batch: RewardBatch,
) -> RewardBatch {
    let reward = shaping.apply(m_with - m_base);
    batch.m_with = Some(m_with);
    batch.m_base = Some(m_base);
    batch.shaping = shaping;
    batch.reward = Some(reward);
    for s in &mut batch.samples {
        s.reward = Some(reward);
    }
    batch
}

/// Dollars per million samples.
pub fn cost_per_million(gpu_cost_per_second: f64, throughput: f64) -> Result<f64> {
    if throughput.is_nan() || throughput <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "throughput must be positive, got {throughput}"
        )));
    }
    Ok(gpu_cost_per_second / throughput * 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Defect as D, NonDefect as N};

    fn ranked(items: &[&str], judged: &[(&str, f64)]) -> RankedList {
        RankedList {
            items: items.iter().map(|s| s.to_string()).collect(),
            judgments: judged.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[N, N, N], &[N, N, N], N).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 3,
                fp: 0,
                tn: 0,
                fn_: 0
            }
        );
        let c = confusion(&[D, N], &[N, D], N).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 0,
                fp: 1,
                tn: 0,
                fn_: 1
            }
        );
        assert!(matches!(
            confusion(&[D], &[D, N], N),
            Err(Error::InvalidInput(_))
        ));
        // flipped polarity swaps the roles
        let c = confusion(&[D, N], &[D, D], D).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                tn: 0,
                fn_: 0
            }
        );
    }

    #[test]
    fn binary_metric_examples() {
        let m = binary_metrics(&ConfusionCounts {
            tp: 9,
            fn_: 1,
            tn: 3,
            fp: 1,
        })
        .unwrap();
        assert!((m.pos_acc - 90.0).abs() < 1e-12);
        assert!((m.neg_acc - 75.0).abs() < 1e-12);
        assert!((m.bacc - 82.5).abs() < 1e-12);
        assert!((m.pos_prec - 90.0).abs() < 1e-12);
        assert!((m.defect_rate - 400.0 / 14.0).abs() < 1e-12);
        assert!((m.model_defect_rate - 400.0 / 14.0).abs() < 1e-12);

        let perfect = binary_metrics(&ConfusionCounts {
            tp: 5,
            fn_: 0,
            tn: 5,
            fp: 0,
        })
        .unwrap();
        assert_eq!((perfect.acc, perfect.bacc), (100.0, 100.0));

        assert!(matches!(
            binary_metrics(&ConfusionCounts::default()),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            binary_metrics(&ConfusionCounts {
                tp: 3,
                ..Default::default()
            }),
            Err(Error::DegenerateInput(_))
        ));
        // nothing predicted negative: negative precision falls back to 0
        let m = binary_metrics(&ConfusionCounts {
            tp: 3,
            fp: 2,
            tn: 0,
            fn_: 0,
        })
        .unwrap();
        assert_eq!((m.neg_prec, m.neg_f1), (0.0, 0.0));
    }

    #[test]
    fn published_anchors() {
        assert_eq!(round2(bacc(94.49, 74.76).unwrap()), 84.63);
        assert_eq!(round2(bacc(91.59, 79.81).unwrap()), 85.70);
        assert_eq!(bacc(100.0, 100.0).unwrap(), 100.0);
        assert!(bacc(101.0, 50.0).is_err());
        assert_eq!(round2(f1(73.24, 72.87)), 73.05);
        assert_eq!(round2(cost_per_million(0.0027, 20.22).unwrap()), 133.53);
        assert_eq!(round2(cost_per_million(0.0027, 8.79).unwrap()), 307.17);
        assert_eq!(cost_per_million(0.0, 3.0).unwrap(), 0.0);
        assert!(cost_per_million(0.1, 0.0).is_err());
    }

    #[test]
    fn auc_examples() {
        let s = [(0.9, true), (0.8, true), (0.1, false), (0.7, false)];
        assert_eq!(auc(&s).unwrap(), 1.0);
        assert_eq!(auc(&[(0.5, true), (0.5, false)]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[(0.5, true)]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn ranking_examples() {
        let r = ranked(&["a", "x", "b"], &[("a", 1.0), ("b", 1.0)]);
        assert_eq!(recall_at_k(&r, 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&r, 10).unwrap(), 1.0);
        assert!(matches!(
            recall_at_k(&ranked(&["a"], &[]), 1),
            Err(Error::DegenerateInput(_))
        ));

        let r = ranked(&["p", "q"], &[("p", 0.0), ("q", 3.0)]);
        let v = ndcg_at_k(&r, 2).unwrap();
        assert!((dcg_at_k(&r, 2).unwrap() - 7.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        let ideal = ranked(&["q", "p"], &[("p", 1.0), ("q", 3.0)]);
        assert!((ndcg_at_k(&ideal, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            ndcg_at_k(&ranked(&["a"], &[("a", 0.0)]), 1),
            Err(Error::DegenerateInput(_))
        ));
        assert!(ndcg_at_k(&ranked(&["a", "a"], &[("a", 1.0)]), 1).is_err());
    }

    #[test]
    fn reward_examples() {
        let batch = RewardBatch::new("gen", (0..3).map(|i| (format!("x{i}"), format!("y{i}"))));
        let out = batch_reward(0.62, 0.60, Shaping::Identity, batch.clone());
        assert!((out.reward.unwrap() - 0.02).abs() < 1e-12);
        assert!(out.samples.iter().all(|s| s.reward == out.reward));
        assert_eq!(
            batch_reward(0.6, 0.6, Shaping::Identity, batch.clone()).reward,
            Some(0.0)
        );
        let scaled = batch_reward(0.62, 0.60, Shaping::Scale { c: 10.0 }, batch);
        assert!((scaled.reward.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn shaping_parse() {
        assert_eq!("identity".parse::<Shaping>().unwrap(), Shaping::Identity);
        assert_eq!(
            "scale:10".parse::<Shaping>().unwrap(),
            Shaping::Scale { c: 10.0 }
        );
        let clip: Shaping = "clip:-1:1:100".parse().unwrap();
        assert_eq!(clip.apply(0.02), 1.0);
        assert!("clip:1:-1:2".parse::<Shaping>().is_err());
        assert!("log".parse::<Shaping>().is_err());
    }

    proptest! {
        #[test]
        fn bacc_is_mean_of_recalls(tp in 0u64..50, fp in 1u64..50, tn in 0u64..50, fn_ in 1u64..50) {
            let m = binary_metrics(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap();
            prop_assert_eq!(m.bacc, (m.pos_acc + m.neg_acc) / 2.0);
            prop_assert_eq!(m.bacc, bacc(m.pos_acc, m.neg_acc).unwrap());
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..30),
        ) {
            prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
            let squashed: Vec<(f64, bool)> = scores.iter().map(|(s, y)| (s.exp(), *y)).collect();
            prop_assert_eq!(auc(&scores).unwrap(), auc(&squashed).unwrap());
        }

        #[test]
        fn recall_and_dcg_monotone_in_k(
            gains in proptest::collection::vec(0u8..4, 1..8),
        ) {
            let items: Vec<String> = (0..gains.len()).map(|i| format!("i{i}")).collect();
            let judgments = items.iter().zip(&gains).map(|(i, g)| (i.clone(), f64::from(*g))).collect();
            let r = RankedList { items, judgments };
            prop_assume!(gains.iter().any(|g| *g > 0));
            for k in 1..gains.len() + 2 {
                prop_assert!(recall_at_k(&r, k).unwrap() <= recall_at_k(&r, k + 1).unwrap());
                prop_assert!(dcg_at_k(&r, k).unwrap() <= dcg_at_k(&r, k + 1).unwrap());
            }
        }

        #[test]
        fn ndcg_one_when_sorted(mut gains in proptest::collection::vec(0u8..4, 1..8), k in 1usize..10) {
            prop_assume!(gains.iter().any(|g| *g > 0));
            gains.sort_by(|a, b| b.cmp(a));
            let items: Vec<String> = (0..gains.len()).map(|i| format!("i{i}")).collect();
            let judgments = items.iter().zip(&gains).map(|(i, g)| (i.clone(), f64::from(*g))).collect();
            let r = RankedList { items, judgments };
            prop_assert!((ndcg_at_k(&r, k).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn identity_reward_antisymmetric(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let batch = RewardBatch::new("t", [("x".to_string(), "y".to_string())]);
            let fwd = batch_reward(a, b, Shaping::Identity, batch.clone()).reward.unwrap();
            let rev = batch_reward(b, a, Shaping::Identity, batch).reward.unwrap();
            prop_assert_eq!(fwd, -rev);
        }
    }
}
