//! Exemplar selection, multi-exemplar voting and the evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ProcedureAnnotation;
use crate::error::CoreError;

/// Whether exemplars must share the query's dive number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DnMode {
    #[default]
    WithDn,
    WithoutDn,
}

impl std::str::FromStr for DnMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "with_dn" | "with-dn" | "dn" => Ok(Self::WithDn),
            "without_dn" | "without-dn" | "random" => Ok(Self::WithoutDn),
            _ => Err(CoreError::InvalidConfig(format!("unknown dn mode {s:?}"))),
        }
    }
}

/// Derives a per-item seed from a run seed.
pub fn mix_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Indices into `train` of the instances eligible as exemplars for `query`.
pub fn eligible_exemplars(train: &[&ProcedureAnnotation], query: &ProcedureAnnotation, mode: DnMode) -> Vec<usize> {
    train
        .iter()
        .enumerate()
        .filter(|(_, a)| a.video_id != query.video_id)
        .filter(|(_, a)| mode == DnMode::WithoutDn || a.action_code == query.action_code)
        .map(|(i, _)| i)
        .collect()
}

/// Draws `m` exemplar indices into `train`, without replacement while
/// eligible instances last, then with replacement.
pub fn select_exemplars(
    train: &[&ProcedureAnnotation],
    query: &ProcedureAnnotation,
    m: usize,
    mode: DnMode,
    seed: u64,
) -> Result<Vec<usize>, CoreError> {
    let mut pool = eligible_exemplars(train, query, mode);
    if pool.is_empty() {
        return Err(CoreError::NoExemplarAvailable(query.video_id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut out: Vec<usize> = pool.iter().copied().take(m).collect();
    while out.len() < m {
        out.push(pool[rng.gen_range(0..pool.len())]);
    }
    Ok(out)
}

/// `(1/M) Σ_j (relative_j + y_Zj)`.
pub fn vote(pairs: &[(f64, f64)]) -> Result<f64, CoreError> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyList);
    }
    Ok(pairs.iter().map(|(r, y)| r + y).sum::<f64>() / pairs.len() as f64)
}

/// Sorted, disjoint union of the intervals `[t_k, t_{k+1}]`.
fn interval_union(t: &[usize]) -> Vec<(usize, usize)> {
    let mut iv: Vec<(usize, usize)> = t.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
    iv.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (a, b) in iv {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

fn measure(iv: &[(usize, usize)]) -> usize {
    iv.iter().map(|(a, b)| b - a).sum()
}

/// IoU of the transition-interval unions of one sample. Two zero-length
/// unions count as a match only when the transitions coincide.
pub fn interval_iou(pred: &[usize], gt: &[usize]) -> f64 {
    let (p, g) = (interval_union(pred), interval_union(gt));
    let mut inter = 0;
    for &(a, b) in &p {
        for &(c, d) in &g {
            let (lo, hi) = (a.max(c), b.min(d));
            if hi > lo {
                inter += hi - lo;
            }
        }
    }
    let union = measure(&p) + measure(&g) - inter;
    if union == 0 {
        return if pred == gt { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}

/// Fraction of samples whose interval IoU reaches `d`.
pub fn aiou(pred: &[Vec<usize>], gt: &[Vec<usize>], d: f64) -> Result<f64, CoreError> {
    if pred.len() != gt.len() {
        return Err(CoreError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(CoreError::EmptyList);
    }
    let mut hits = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(CoreError::LengthMismatch(p.len(), g.len()));
        }
        if p.len() < 2 {
            return Err(CoreError::InvalidConfig("aiou needs at least 2 transitions per sample".into()));
        }
        if interval_iou(p, g) >= d {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(y: &[f64], y_hat: &[f64]) -> Result<f64, CoreError> {
    if y.len() != y_hat.len() {
        return Err(CoreError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.len() < 2 {
        return Err(CoreError::DegenerateSeries);
    }
    let (a, b) = (average_ranks(y), average_ranks(y_hat));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::DegenerateSeries);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `(1/N) Σ |y_i − ŷ_i| / (y_max − y_min)`, as a fraction.
pub fn relative_l2(y: &[f64], y_hat: &[f64], y_max: f64, y_min: f64) -> Result<f64, CoreError> {
    if y.len() != y_hat.len() {
        return Err(CoreError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(CoreError::EmptyList);
    }
    let range = y_max - y_min;
    if !(range > 0.0) {
        return Err(CoreError::ZeroRange);
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs() / range).sum::<f64>() / y.len() as f64)
}

pub const AIOU_THRESHOLDS: [f64; 2] = [0.5, 0.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// AIoU keyed by threshold; empty for variants without segmentation.
    pub aiou: BTreeMap<String, f64>,
    pub spearman_rho: f64,
    pub relative_l2: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(
        y: &[f64],
        y_hat: &[f64],
        transitions: Option<(&[Vec<usize>], &[Vec<usize>])>,
        y_range: (f64, f64),
    ) -> Result<Self, CoreError> {
        let mut map = BTreeMap::new();
        if let Some((pred, gt)) = transitions {
            for d in AIOU_THRESHOLDS {
                map.insert(d.to_string(), aiou(pred, gt, d)?);
            }
        }
        Ok(Self {
            aiou: map,
            spearman_rho: spearman(y, y_hat)?,
            relative_l2: relative_l2(y, y_hat, y_range.1, y_range.0)?,
            n: y.len(),
        })
    }

    pub fn aiou_at(&self, d: f64) -> Option<f64> {
        self.aiou.get(&d.to_string()).copied()
    }

    /// `AIoU@0.5  AIoU@0.75  ρ  R-ℓ2×100`, percentages for AIoU.
    pub fn table_row(&self) -> String {
        let a = |d| self.aiou_at(d).map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        format!(
            "{}\t{}\t{:.4}\t{:.4}",
            a(0.5),
            a(0.75),
            self.spearman_rho,
            100.0 * self.relative_l2
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, code: &str) -> ProcedureAnnotation {
        ProcedureAnnotation {
            video_id: id.into(),
            action_code: code.parse().unwrap(),
            difficulty: 0.0,
            score: 1.0,
            judge_scores: None,
            frame_count: 10,
            boundaries: vec![3, 6],
        }
    }

    #[test]
    fn forced_and_excluded_exemplars() {
        let train = [ann("a", "107B"), ann("b", "107B"), ann("c", "307C")];
        let refs: Vec<_> = train.iter().collect();
        assert_eq!(select_exemplars(&refs, &train[0], 1, DnMode::WithDn, 5).unwrap(), vec![1]);
        for seed in 0..20 {
            let picks = select_exemplars(&refs, &train[0], 4, DnMode::WithoutDn, seed).unwrap();
            assert!(!picks.contains(&0));
        }
        let lonely = ann("z", "307C");
        let no_c: Vec<_> = train[..2].iter().collect();
        assert!(matches!(
            select_exemplars(&no_c, &lonely, 1, DnMode::WithDn, 0),
            Err(CoreError::NoExemplarAvailable(_))
        ));
    }

    #[test]
    fn selection_is_reproducible_and_distinct() {
        let train: Vec<_> = (0..31).map(|i| ann(&format!("v{i}"), "107B")).collect();
        let refs: Vec<_> = train.iter().collect();
        let a = select_exemplars(&refs, &train[0], 10, DnMode::WithDn, 0).unwrap();
        assert_eq!(a, select_exemplars(&refs, &train[0], 10, DnMode::WithDn, 0).unwrap());
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote(&[(2.0, 70.0); 4]).unwrap(), 72.0);
        assert_eq!(vote(&[(0.0, 70.0), (0.0, 80.0)]).unwrap(), 75.0);
        assert_eq!(vote(&[(0.0, 70.0), (0.0, 72.0), (0.0, 77.0)]).unwrap(), 73.0);
        assert!(matches!(vote(&[]), Err(CoreError::EmptyList)));
    }

    #[test]
    fn aiou_examples() {
        assert!((interval_iou(&[10, 20], &[12, 22]) - 8.0 / 12.0).abs() < 1e-15);
        let pred = vec![vec![10, 20]];
        let gt = vec![vec![12, 22]];
        assert_eq!(aiou(&pred, &gt, 0.5).unwrap(), 1.0);
        assert_eq!(aiou(&pred, &gt, 0.75).unwrap(), 0.0);
        // IoU 0.4: [0,10] vs [6,10] ∪ … → 4/10.
        let pred = vec![vec![10, 20], vec![0, 10]];
        let gt = vec![vec![12, 22], vec![6, 10]];
        assert_eq!(aiou(&pred, &gt, 0.5).unwrap(), 0.5);
        assert_eq!(aiou(&gt, &gt, 1.0).unwrap(), 1.0);
        assert!(aiou(&pred, &gt[..1], 0.5).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(CoreError::DegenerateSeries)));
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn relative_l2_examples() {
        let r = relative_l2(&[80.0, 90.0, 100.0], &[85.0, 90.0, 95.0], 100.0, 80.0).unwrap();
        assert!((r - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(relative_l2(&[1.0], &[1.0], 2.0, 0.0).unwrap(), 0.0);
        assert_eq!(relative_l2(&[0.0], &[20.0], 100.0, 80.0).unwrap(), 1.0);
        assert!(matches!(relative_l2(&[1.0], &[1.0], 1.0, 1.0), Err(CoreError::ZeroRange)));
    }

    #[test]
    fn report_json_round_trip() {
        let (pred, gt) = (vec![vec![1, 5]; 3], vec![vec![2, 5]; 3]);
        let r = MetricReport::compute(
            &[1.0, 2.0, 3.0],
            &[1.5, 2.0, 2.5],
            Some((&pred, &gt)),
            (0.0, 4.0),
        )
        .unwrap();
        let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.aiou_at(0.5), Some(1.0));
        assert_eq!(r.aiou_at(0.75), Some(1.0));
    }
}
