//! Evaluation metrics. Accuracy is always reported over the fixed A and S
//! partitions, independently of the grouping used during training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::mitigation::TrainedModel;
use crate::synth::Dataset;

/// Area under the ROC curve via the Mann–Whitney statistic, ties counted 0.5.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateInput("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    // midranks over tied runs, 1-based
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid = (start + 1 + end) as f64 / 2.0;
        let pos_in_run = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum_pos += mid * pos_in_run as f64;
        start = end;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_auc: f64,
    pub overall_acc: f64,
    /// Accuracy of `A=0`, `A=1`, `S=0`, `S=1`.
    pub per_group: BTreeMap<String, f64>,
    pub min_acc_a: f64,
    pub gap_a: f64,
    pub min_acc_s: f64,
    pub gap_s: f64,
}

/// Scores a prediction vector against a dataset: AUC on the scores and
/// accuracy at threshold 0.5 (`score > 0.5` predicts class 1).
pub fn evaluate_scores(scores: &[f64], data: &Dataset) -> Result<EvalReport> {
    if scores.len() != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} samples",
            scores.len(),
            data.len()
        )));
    }
    for a in 0..2u8 {
        for s in 0..2u8 {
            if !data.samples().iter().any(|x| x.a == a && x.s == s) {
                return Err(Error::MissingCell { a, s });
            }
        }
    }
    let labels: Vec<u8> = data.samples().iter().map(|x| x.y).collect();
    let overall_auc = auc(scores, &labels)?;

    // correct / total for [A=0, A=1, S=0, S=1]
    let mut tally = [(0usize, 0usize); 4];
    let mut correct = 0usize;
    for (x, &p) in data.samples().iter().zip(scores) {
        let hit = (p > 0.5) == (x.y == 1);
        correct += hit as usize;
        for cell in [x.a as usize, 2 + x.s as usize] {
            tally[cell].0 += hit as usize;
            tally[cell].1 += 1;
        }
    }
    let acc: Vec<f64> = tally.iter().map(|(c, n)| *c as f64 / *n as f64).collect();
    let names = ["A=0", "A=1", "S=0", "S=1"];
    Ok(EvalReport {
        overall_auc,
        overall_acc: correct as f64 / data.len() as f64,
        per_group: names.iter().map(|n| n.to_string()).zip(acc.iter().copied()).collect(),
        min_acc_a: acc[0].min(acc[1]),
        gap_a: (acc[0] - acc[1]).abs(),
        min_acc_s: acc[2].min(acc[3]),
        gap_s: (acc[2] - acc[3]).abs(),
    })
}

pub fn evaluate(model: &TrainedModel, data: &Dataset) -> Result<EvalReport> {
    evaluate_scores(&model.predict(data)?, data)
}

/// Pearson correlation and its two-sided p-value from a t-test with
/// `n − 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch("x and y differ in length".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!("need ≥ 3 points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::DegenerateInput(e.to_string()))?;
        2.0 * dist.cdf(-t.abs())
    };
    Ok((r, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Distribution;
    use crate::synth::{sample_dataset, FeatureConfig, Sample};

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn auc_matches_pairwise_count_with_ties() {
        let scores = [0.2, 0.5, 0.5, 0.1, 0.9, 0.5, 0.2, 0.7];
        let labels = [0, 1, 0, 0, 1, 1, 1, 0];
        assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-15);
    }

    fn hand_dataset() -> Dataset {
        // (y, s, a) per sample; every (a, s) cell twice
        let atoms = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)];
        let cfg = FeatureConfig { d_y: 1, d_a: 1, d_s: 1, ..FeatureConfig::default() };
        let samples = atoms
            .iter()
            .map(|&(y, s, a)| Sample { features: vec![0.0; 3], y, s, a, group: None })
            .collect();
        Dataset::new(samples, Distribution::uniform(8), 0, cfg).unwrap()
    }

    #[test]
    fn hand_fixture_per_group_accuracy() {
        let d = hand_dataset();
        // predict class 1 iff a = 1: right on aligned samples only
        let scores: Vec<f64> = d.samples().iter().map(|s| if s.a == 1 { 0.9 } else { 0.1 }).collect();
        let r = evaluate_scores(&scores, &d).unwrap();
        assert_eq!(r.overall_acc, 0.5);
        assert_eq!(r.per_group["A=0"], 0.5);
        assert_eq!(r.per_group["S=1"], 0.5);
        assert_eq!(r.gap_s, 0.0);
        assert_eq!(r.overall_auc, 0.5);

        // predict the label except on sample (y=1, s=1, a=0)
        let scores: Vec<f64> = d
            .samples()
            .iter()
            .map(|s| if (s.y, s.s, s.a) == (1, 1, 0) { 0.2 } else if s.y == 1 { 0.8 } else { 0.3 })
            .collect();
        let r = evaluate_scores(&scores, &d).unwrap();
        assert_eq!(r.overall_acc, 7.0 / 8.0);
        assert_eq!(r.per_group["A=0"], 0.75);
        assert_eq!(r.per_group["A=1"], 1.0);
        assert_eq!(r.per_group["S=0"], 1.0);
        assert_eq!(r.per_group["S=1"], 0.75);
        assert_eq!((r.min_acc_a, r.gap_a), (0.75, 0.25));
        assert_eq!((r.min_acc_s, r.gap_s), (0.75, 0.25));
    }

    #[test]
    fn missing_cell_is_reported() {
        let d = hand_dataset();
        let keep: Vec<usize> = (0..8).filter(|&i| !(d.samples()[i].a == 1 && d.samples()[i].s == 0)).collect();
        let sub = d.subset(&keep).unwrap();
        let err = evaluate_scores(&vec![0.5; sub.len()], &sub);
        assert!(matches!(err, Err(Error::MissingCell { a: 1, s: 0 })));
    }

    #[test]
    fn random_scores_give_chance_accuracy() {
        use rand::{Rng, SeedableRng};
        let d = sample_dataset(&Distribution::uniform(8), 20_000, &FeatureConfig::default(), 4).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let scores: Vec<f64> = (0..d.len()).map(|_| rng.random()).collect();
        let r = evaluate_scores(&scores, &d).unwrap();
        assert!((r.overall_acc - 0.5).abs() < 0.02);
        assert!(r.gap_a < 0.03 && r.gap_s < 0.03);
        assert!((r.overall_auc - 0.5).abs() < 0.02);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (r, p) = pearson(&x, &x).unwrap();
        assert!((r - 1.0).abs() < 1e-15 && p < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap().0 + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::DegenerateInput(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn pearson_matches_covariance_formula() {
        let x = [0.527, 0.113, 0.0, 0.131, 0.189];
        let y = [0.61, 0.70, 0.74, 0.69, 0.66];
        let n = 5.0;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let expected = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let (r, p) = pearson(&x, &y).unwrap();
        assert!((r - expected).abs() < 1e-12);
        // scipy.stats.pearsonr on the same points
        assert!((r + 0.9594657884335452).abs() < 1e-12);
        assert!((p - 0.009736618028404637).abs() < 1e-9, "{p}");
    }
}
