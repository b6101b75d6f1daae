//! Calibration statistics: binned expected calibration error, accuracy,
//! failure-prediction AUROC, reliability-curve data, and modality gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::CalibrationRecord;

/// Per-bin statistics over the interval ((m-1)/M, m/M].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    /// 1-based bin index.
    pub m: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_conf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceConfig {
    /// Number of bins (M).
    pub bins: usize,
    /// Restrict to attempted records before binning.
    pub attempted_only: bool,
}

impl Default for EceConfig {
    fn default() -> Self {
        EceConfig {
            bins: 10,
            attempted_only: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub image: f64,
    pub text: f64,
    /// image minus text.
    pub gap: f64,
}

impl MetricPair {
    fn new(image: f64, text: f64) -> Self {
        MetricPair {
            image,
            text,
            gap: image - text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub acc: MetricPair,
    pub ece: MetricPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<MetricPair>,
}

/// Per-group image/text metric pairs and their differences. The "all" key
/// aggregates every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub groups: BTreeMap<String, GapEntry>,
}

fn filtered<'a>(records: &'a [CalibrationRecord], attempted_only: bool) -> Vec<&'a CalibrationRecord> {
    records
        .iter()
        .filter(|r| !attempted_only || r.attempted)
        .collect()
}

/// Assigns a confidence to its 1-based bin under the ((m-1)/M, m/M]
/// convention, with confidence 0 in bin 1. Boundary membership is decided by
/// direct comparison so the result agrees exactly with a per-record check.
fn bin_index(confidence: f64, bins: usize) -> usize {
    debug_assert!((0.0..=1.0).contains(&confidence));
    let mut idx = (confidence * bins as f64).ceil() as usize;
    idx = idx.clamp(1, bins);
    while idx > 1 && confidence <= (idx - 1) as f64 / bins as f64 {
        idx -= 1;
    }
    while idx < bins && confidence > idx as f64 / bins as f64 {
        idx += 1;
    }
    idx
}

/// Bins records into M BinStats; empty bins are included with count 0.
pub fn reliability_curve(records: &[CalibrationRecord], cfg: &EceConfig) -> Result<Vec<BinStat>> {
    assert!(cfg.bins >= 1);
    let records = filtered(records, cfg.attempted_only);
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let m = cfg.bins;
    let mut counts = vec![0usize; m];
    let mut conf_sums = vec![0.0f64; m];
    let mut correct_counts = vec![0usize; m];
    for record in &records {
        let idx = bin_index(record.confidence, m) - 1;
        counts[idx] += 1;
        conf_sums[idx] += record.confidence;
        correct_counts[idx] += record.correct as usize;
    }
    Ok((0..m)
        .map(|i| BinStat {
            m: i + 1,
            lower: i as f64 / m as f64,
            upper: (i + 1) as f64 / m as f64,
            count: counts[i],
            avg_conf: (counts[i] > 0).then(|| conf_sums[i] / counts[i] as f64),
            acc: (counts[i] > 0).then(|| correct_counts[i] as f64 / counts[i] as f64),
        })
        .collect())
}

/// Expected calibration error: sum over bins of (|B_m|/n)·|acc - avgConf|.
pub fn ece(records: &[CalibrationRecord], cfg: &EceConfig) -> Result<f64> {
    let curve = reliability_curve(records, cfg)?;
    Ok(ece_from_curve(&curve))
}

/// Recomputes the ECE sum from already-binned statistics.
pub fn ece_from_curve(curve: &[BinStat]) -> f64 {
    let n: usize = curve.iter().map(|b| b.count).sum();
    curve
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| {
            let weight = b.count as f64 / n as f64;
            weight * (b.acc.unwrap() - b.avg_conf.unwrap()).abs()
        })
        .sum()
}

pub fn accuracy(records: &[CalibrationRecord], attempted_only: bool) -> Result<f64> {
    let records = filtered(records, attempted_only);
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Probability that a random correct record carries higher confidence than a
/// random incorrect one, ties counted one half (Mann-Whitney form, computed
/// via average ranks in O(n log n)).
pub fn auroc(records: &[CalibrationRecord], attempted_only: bool) -> Result<f64> {
    let records = filtered(records, attempted_only);
    let mut scored: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence, r.correct)).collect();
    let n_pos = scored.iter().filter(|(_, c)| *c).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateAuroc);
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("confidences are finite"));

    // average ranks over tie groups, 1-indexed
    let n = scored.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &scored[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Per-group image/text metric pairs for the modality-gap analysis. Groups by
/// category and adds an overall "all" entry.
pub fn modality_gap(
    records_image: &[CalibrationRecord],
    records_text: &[CalibrationRecord],
    cfg: &EceConfig,
) -> Result<GapReport> {
    let mut by_group: BTreeMap<String, (Vec<CalibrationRecord>, Vec<CalibrationRecord>)> =
        BTreeMap::new();
    for r in records_image {
        by_group.entry(r.group.category.clone()).or_default().0.push(r.clone());
    }
    for r in records_text {
        by_group.entry(r.group.category.clone()).or_default().1.push(r.clone());
    }
    by_group.insert(
        "all".to_string(),
        (records_image.to_vec(), records_text.to_vec()),
    );

    let mut groups = BTreeMap::new();
    for (name, (img, txt)) in by_group {
        if img.is_empty() {
            return Err(Error::MissingModalitySide {
                group: name,
                side: "image",
            });
        }
        if txt.is_empty() {
            return Err(Error::MissingModalitySide {
                group: name,
                side: "text",
            });
        }
        let acc = MetricPair::new(
            accuracy(&img, cfg.attempted_only)?,
            accuracy(&txt, cfg.attempted_only)?,
        );
        let ece_pair = MetricPair::new(ece(&img, cfg)?, ece(&txt, cfg)?);
        let auroc_pair = match (
            auroc(&img, cfg.attempted_only),
            auroc(&txt, cfg.attempted_only),
        ) {
            (Ok(a), Ok(b)) => Some(MetricPair::new(a, b)),
            _ => None, // degenerate on one side
        };
        groups.insert(
            name,
            GapEntry {
                acc,
                ece: ece_pair,
                auroc: auroc_pair,
            },
        );
    }
    Ok(GapReport { groups })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::GroupLabels;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub fn record(confidence: f64, correct: bool) -> CalibrationRecord {
        record_in("cat", "image", confidence, correct, true)
    }

    pub fn record_in(
        category: &str,
        modality: &str,
        confidence: f64,
        correct: bool,
        attempted: bool,
    ) -> CalibrationRecord {
        CalibrationRecord {
            item_id: "r".into(),
            confidence,
            correct,
            attempted,
            group: GroupLabels {
                category: category.into(),
                subtask: "s".into(),
                modality: modality.into(),
                strategy: "cot".into(),
                eval_config: "general".into(),
            },
        }
    }

    fn random_records(rng: &mut StdRng, n: usize) -> Vec<CalibrationRecord> {
        (0..n)
            .map(|_| {
                let conf: f64 = rng.gen();
                record_in("cat", "image", conf, rng.gen_bool(0.5), rng.gen_bool(0.9))
            })
            .collect()
    }

    #[test]
    fn single_record_single_bin() {
        let r = vec![record(0.9, true)];
        let cfg = EceConfig::default();
        assert!((ece(&r, &cfg).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ten_records_one_bin_arithmetic() {
        let records: Vec<_> = (0..10).map(|i| record(0.9, i < 6)).collect();
        let cfg = EceConfig::default();
        let value = ece(&records, &cfg).unwrap();
        assert!((value - 0.3).abs() < 1e-12, "got {value}");
    }

    #[test]
    fn ece_matches_brute_force_on_random_sets() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(1..500);
            let records = random_records(&mut rng, n);
            for bins in [1usize, 5, 10, 15] {
                let cfg = EceConfig { bins, attempted_only: true };
                let fast = ece(&records, &cfg);
                let slow = oracle::ece_brute_force(&records, &cfg);
                match (fast, slow) {
                    (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                    (Err(_), None) => {}
                    other => panic!("disagreement: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn ece_invariant_under_permutation_and_duplication() {
        let mut rng = StdRng::seed_from_u64(11);
        let records = random_records(&mut rng, 100);
        let cfg = EceConfig::default();
        let base = ece(&records, &cfg).unwrap();
        let mut reversed = records.clone();
        reversed.reverse();
        assert!((ece(&reversed, &cfg).unwrap() - base).abs() < 1e-12);
        let doubled: Vec<_> = records.iter().chain(&records).cloned().collect();
        assert!((ece(&doubled, &cfg).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn one_bin_reduces_to_accuracy_minus_mean_confidence() {
        let mut rng = StdRng::seed_from_u64(13);
        let records = random_records(&mut rng, 200);
        let cfg = EceConfig { bins: 1, attempted_only: true };
        let kept: Vec<_> = records.iter().filter(|r| r.attempted).collect();
        let acc = kept.iter().filter(|r| r.correct).count() as f64 / kept.len() as f64;
        let mean_conf = kept.iter().map(|r| r.confidence).sum::<f64>() / kept.len() as f64;
        assert!((ece(&records, &cfg).unwrap() - (acc - mean_conf).abs()).abs() < 1e-12);
    }

    #[test]
    fn empty_after_filtering_is_error() {
        let records = vec![record_in("c", "image", 0.5, false, false)];
        assert!(matches!(
            ece(&records, &EceConfig::default()),
            Err(Error::EmptyRecords)
        ));
    }

    #[test]
    fn bin_boundaries_follow_left_open_convention() {
        assert_eq!(bin_index(0.0, 10), 1);
        assert_eq!(bin_index(0.1, 10), 1);
        assert_eq!(bin_index(0.1000001, 10), 2);
        assert_eq!(bin_index(1.0, 10), 10);
        assert_eq!(bin_index(0.9, 10), 9);
    }

    #[test]
    fn accuracy_basics() {
        let all: Vec<_> = (0..4).map(|_| record(0.5, true)).collect();
        assert_eq!(accuracy(&all, true).unwrap(), 1.0);
        let mixed: Vec<_> = (0..5).map(|i| record(0.5, i < 3)).collect();
        assert_eq!(accuracy(&mixed, true).unwrap(), 0.6);
    }

    #[test]
    fn auroc_perfect_separation_and_ties() {
        let r = vec![record(0.9, true), record(0.1, false)];
        assert_eq!(auroc(&r, true).unwrap(), 1.0);
        let ties: Vec<_> = (0..6).map(|i| record(0.7, i % 2 == 0)).collect();
        assert_eq!(auroc(&ties, true).unwrap(), 0.5);
        let degenerate = vec![record(0.9, true)];
        assert!(matches!(auroc(&degenerate, true), Err(Error::DegenerateAuroc)));
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..10 {
            let records = random_records(&mut rng, 200);
            let fast = auroc(&records, true);
            let slow = oracle::auroc_pairwise(&records, true);
            match (fast, slow) {
                (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (Err(_), None) => {}
                other => panic!("disagreement: {other:?}"),
            }
        }
    }

    #[test]
    fn auroc_is_rank_invariant() {
        let mut rng = StdRng::seed_from_u64(23);
        let records = random_records(&mut rng, 150);
        let transformed: Vec<_> = records
            .iter()
            .map(|r| {
                let mut t = r.clone();
                // strictly increasing transform of confidence
                t.confidence = (r.confidence * 0.5 + 0.1).sqrt();
                t
            })
            .collect();
        let a = auroc(&records, true).unwrap();
        let b = auroc(&transformed, true).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn curve_counts_sum_and_reconstruct_ece() {
        let mut rng = StdRng::seed_from_u64(29);
        let records = random_records(&mut rng, 400);
        let cfg = EceConfig::default();
        let curve = reliability_curve(&records, &cfg).unwrap();
        assert_eq!(curve.len(), 10);
        let n: usize = curve.iter().map(|b| b.count).sum();
        assert_eq!(n, records.iter().filter(|r| r.attempted).count());
        for bin in curve.iter().filter(|b| b.count > 0) {
            let avg = bin.avg_conf.unwrap();
            assert!(bin.lower < avg || (bin.m == 1 && avg == 0.0));
            assert!(avg <= bin.upper);
        }
        assert_eq!(ece_from_curve(&curve), ece(&records, &cfg).unwrap());
    }

    #[test]
    fn curve_single_bin_fixture() {
        let records: Vec<_> = (0..10).map(|i| record(0.95, i < 8)).collect();
        let curve = reliability_curve(&records, &EceConfig::default()).unwrap();
        let top = &curve[9];
        assert_eq!(top.count, 10);
        assert!((top.avg_conf.unwrap() - 0.95).abs() < 1e-12);
        assert!((top.acc.unwrap() - 0.8).abs() < 1e-12);
        assert!(curve[..9].iter().all(|b| b.count == 0));
    }

    #[test]
    fn curve_two_bin_hand_tabulation() {
        let records = vec![
            record(0.55, true),
            record(0.6, false),
            record(0.95, true),
            record(0.85, true),
        ];
        let curve = reliability_curve(&records, &EceConfig::default()).unwrap();
        assert_eq!(curve[5].count, 2); // bin 6: (0.5, 0.6]
        assert!((curve[5].avg_conf.unwrap() - 0.575).abs() < 1e-12);
        assert!((curve[5].acc.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(curve[8].count, 1); // bin 9: (0.8, 0.9]
        assert_eq!(curve[9].count, 1); // bin 10: (0.9, 1.0]
    }

    #[test]
    fn modality_gap_table_cell() {
        // image side: conf 0.9, 10 records, (0.9 - ece) chosen to land on known pair
        let image: Vec<_> = (0..1000)
            .map(|i| record_in("all_cat", "image", 0.9, i < 433, true))
            .collect();
        let text: Vec<_> = (0..1000)
            .map(|i| record_in("all_cat", "text", 0.9, i < 616, true))
            .collect();
        let report = modality_gap(&image, &text, &EceConfig::default()).unwrap();
        let entry = &report.groups["all"];
        assert!((entry.ece.image - 0.467).abs() < 1e-12);
        assert!((entry.ece.text - 0.284).abs() < 1e-12);
        assert!((entry.ece.gap - 0.183).abs() < 1e-12);
    }

    #[test]
    fn modality_gap_identical_sets_is_zero() {
        let records: Vec<_> = (0..10).map(|i| record(0.7, i < 5)).collect();
        let report = modality_gap(&records, &records, &EceConfig::default()).unwrap();
        for entry in report.groups.values() {
            assert_eq!(entry.acc.gap, 0.0);
            assert_eq!(entry.ece.gap, 0.0);
        }
    }

    #[test]
    fn modality_gap_missing_side_is_error() {
        let image = vec![record_in("only_img", "image", 0.5, true, true)];
        let text: Vec<CalibrationRecord> = vec![record_in("other", "text", 0.5, true, true)];
        assert!(matches!(
            modality_gap(&image, &text, &EceConfig::default()),
            Err(Error::MissingModalitySide { .. })
        ));
    }
}
