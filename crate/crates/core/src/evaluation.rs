//! Template matching protocols: closed-set identification (CMC), open-set
//! identification (TPIR at FPIR), verification (TAR at FAR) and the 10-fold
//! pair-accuracy protocol.
//!
//! Conventions shared by every metric:
//! - a score `>= threshold` is an accept;
//! - ranking ties are broken by gallery index, lower first;
//! - operating points use step thresholds chosen among the observed scores
//!   (plus one value just above the largest), taking the smallest threshold
//!   whose false-positive rate does not exceed the target.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::aggregation::AggregatedRep;
use crate::error::{Error, Result};
use crate::math::{cosine_similarity, DenseMatrix};

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_FPIR_TARGETS: [f64; 2] = [0.01, 0.10];
pub const DEFAULT_FAR_TARGETS: [f64; 2] = [0.001, 0.01];
pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub entries: Vec<(String, AggregatedRep)>,
}

impl Gallery {
    pub fn new(entries: Vec<(String, AggregatedRep)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::Protocol(format!("duplicate gallery subject '{id}'")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, subject: &str) -> Option<usize> {
        self.entries.iter().position(|(id, _)| id == subject)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub rep: AggregatedRep,
    pub subject_id: String,
    pub mated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub probes: Vec<Probe>,
}

impl ProbeSet {
    /// Marks each probe as mated iff its subject is enrolled in `gallery`.
    pub fn against(gallery: &Gallery, probes: Vec<(String, AggregatedRep)>) -> Self {
        Self {
            probes: probes
                .into_iter()
                .map(|(subject_id, rep)| Probe {
                    mated: gallery.index_of(&subject_id).is_some(),
                    rep,
                    subject_id,
                })
                .collect(),
        }
    }

    /// Gallery index of each probe's true subject, `None` when unmated.
    pub fn truth(&self, gallery: &Gallery) -> Result<Vec<Option<usize>>> {
        self.probes
            .iter()
            .map(|p| {
                let idx = gallery.index_of(&p.subject_id);
                if idx.is_some() != p.mated {
                    return Err(Error::Protocol(format!(
                        "probe of subject '{}' has inconsistent mated flag",
                        p.subject_id
                    )));
                }
                Ok(idx)
            })
            .collect()
    }
}

/// Pairwise cosine similarities, `P x G`. Zero vectors score -1.
pub fn score_matrix<P: AsRef<[f64]>, G: AsRef<[f64]>>(probes: &[P], gallery: &[G]) -> DenseMatrix {
    let mut s = DenseMatrix::zeros(probes.len(), gallery.len());
    for (i, p) in probes.iter().enumerate() {
        for (j, g) in gallery.iter().enumerate() {
            s[(i, j)] = cosine_similarity(p.as_ref(), g.as_ref());
        }
    }
    s
}

pub fn score_probes(probes: &ProbeSet, gallery: &Gallery) -> DenseMatrix {
    let p: Vec<&[f64]> = probes.probes.iter().map(|p| p.rep.vector.as_slice()).collect();
    let g: Vec<&[f64]> = gallery.entries.iter().map(|(_, r)| r.vector.as_slice()).collect();
    score_matrix(&p, &g)
}

/// 1-based rank of `target` in `row`: entries scoring higher, or scoring the
/// same at a lower index, come first.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Index and score of the best gallery entry; ties go to the lowest index.
pub fn top_match(row: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &s) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best
}

fn mated_truth(truth: &[Option<usize>]) -> Result<Vec<usize>> {
    truth
        .iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Protocol(format!("unmated probe {i} in closed-set evaluation"))))
        .collect()
}

/// Identification rate at each requested rank. Every probe must be mated.
pub fn closed_set_ir(scores: &DenseMatrix, truth: &[Option<usize>], ranks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if truth.len() != scores.rows() {
        return Err(Error::shape("closed_set_ir", scores.rows(), truth.len()));
    }
    let truth = mated_truth(truth)?;
    if truth.is_empty() {
        return Err(Error::EmptySet);
    }
    let probe_ranks: Vec<usize> = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| rank_of(scores.row(i), t))
        .collect();
    let n = probe_ranks.len() as f64;
    Ok(ranks
        .iter()
        .map(|&r| (r, probe_ranks.iter().filter(|&&pr| pr <= r).count() as f64 / n))
        .collect())
}

/// Full CMC curve for ranks `1..=G`.
pub fn cmc_curve(scores: &DenseMatrix, truth: &[Option<usize>]) -> Result<Vec<(usize, f64)>> {
    let ranks: Vec<usize> = (1..=scores.cols()).collect();
    closed_set_ir(scores, truth, &ranks)
}

/// Largest count `c` in `0..=total` with `c / total <= target`.
fn allowed_count(target: f64, total: usize) -> usize {
    (0..=total)
        .rev()
        .find(|&c| c as f64 / total as f64 <= target)
        .unwrap_or(0)
}

/// Sorted distinct values of `scores` followed by a value just above the maximum.
fn candidate_thresholds(scores: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut c: Vec<f64> = scores.collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    let top = c.last().copied().unwrap_or(0.0);
    c.push(top.next_up());
    c
}

/// Smallest candidate threshold admitting at most `allowed` of the negatives.
/// `negatives_desc` is sorted in decreasing order.
fn step_threshold(negatives_desc: &[f64], candidates: &[f64], allowed: usize) -> f64 {
    if allowed >= negatives_desc.len() {
        return candidates[0];
    }
    let pivot = negatives_desc[allowed];
    let k = candidates.partition_point(|&c| c <= pivot);
    candidates[k]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpirPoint {
    pub target_fpir: f64,
    pub tpir: f64,
    pub threshold: f64,
    pub achieved_fpir: f64,
    /// Ties among unmated scores kept the achieved FPIR below the closest
    /// attainable value under the target.
    pub tie_limited: bool,
}

/// Open-set identification: for each FPIR target, calibrate the threshold
/// on the top scores of unmated probes and count mated probes whose top match
/// is correct and clears it.
pub fn open_set_tpir(scores: &DenseMatrix, truth: &[Option<usize>], fpir_targets: &[f64]) -> Result<Vec<TpirPoint>> {
    if truth.len() != scores.rows() {
        return Err(Error::shape("open_set_tpir", scores.rows(), truth.len()));
    }
    if scores.cols() == 0 {
        return Err(Error::Protocol("open-set evaluation needs a non-empty gallery".into()));
    }
    let tops: Vec<(usize, f64)> = scores
        .iter_rows()
        .map(|r| top_match(r).expect("non-empty gallery"))
        .collect();
    let mut unmated: Vec<f64> = tops
        .iter()
        .zip(truth)
        .filter(|(_, t)| t.is_none())
        .map(|(&(_, s), _)| s)
        .collect();
    let mated: Vec<(usize, f64, usize)> = tops
        .iter()
        .zip(truth)
        .filter_map(|(&(j, s), t)| t.map(|t| (j, s, t)))
        .collect();
    if unmated.is_empty() {
        return Err(Error::Protocol(
            "open-set evaluation needs at least one unmated probe".into(),
        ));
    }
    if mated.is_empty() {
        return Err(Error::Protocol(
            "open-set evaluation needs at least one mated probe".into(),
        ));
    }
    unmated.sort_by(|a, b| b.total_cmp(a));
    let candidates = candidate_thresholds(tops.iter().map(|&(_, s)| s));
    let u = unmated.len();
    Ok(fpir_targets
        .iter()
        .map(|&target| {
            let allowed = allowed_count(target, u);
            let tau = step_threshold(&unmated, &candidates, allowed);
            let false_pos = unmated.iter().filter(|&&s| s >= tau).count();
            let hits = mated.iter().filter(|&&(j, s, t)| j == t && s >= tau).count();
            TpirPoint {
                target_fpir: target,
                tpir: hits as f64 / mated.len() as f64,
                threshold: tau,
                achieved_fpir: false_pos as f64 / u as f64,
                tie_limited: false_pos < allowed,
            }
        })
        .collect())
}

/// `(threshold, fpir, tpir)` at every candidate threshold, increasing threshold.
pub fn open_set_curve(scores: &DenseMatrix, truth: &[Option<usize>]) -> Vec<(f64, f64, f64)> {
    let tops: Vec<(usize, f64)> = scores.iter_rows().filter_map(top_match).collect();
    let n_unmated = truth.iter().filter(|t| t.is_none()).count().max(1) as f64;
    let n_mated = truth.iter().filter(|t| t.is_some()).count().max(1) as f64;
    candidate_thresholds(tops.iter().map(|&(_, s)| s))
        .into_iter()
        .map(|tau| {
            let mut fp = 0;
            let mut tp = 0;
            for (&(j, s), t) in tops.iter().zip(truth) {
                match t {
                    None if s >= tau => fp += 1,
                    Some(t) if *t == j && s >= tau => tp += 1,
                    _ => {}
                }
            }
            (tau, fp as f64 / n_unmated, tp as f64 / n_mated)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TarPoint {
    pub target_far: f64,
    pub tar: f64,
    pub threshold: f64,
    pub achieved_far: f64,
}

/// True accept rate at the smallest step threshold whose false accept rate
/// on `impostor` stays within each target.
pub fn verification_tar(genuine: &[f64], impostor: &[f64], far_targets: &[f64]) -> Result<Vec<TarPoint>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol("verification needs genuine and impostor scores".into()));
    }
    let mut neg: Vec<f64> = impostor.to_vec();
    neg.sort_by(|a, b| b.total_cmp(a));
    let candidates = candidate_thresholds(genuine.iter().chain(impostor).copied());
    Ok(far_targets
        .iter()
        .map(|&target| {
            let allowed = allowed_count(target, neg.len());
            let tau = step_threshold(&neg, &candidates, allowed);
            let fa = neg.iter().filter(|&&s| s >= tau).count();
            let ta = genuine.iter().filter(|&&s| s >= tau).count();
            TarPoint {
                target_far: target,
                tar: ta as f64 / genuine.len() as f64,
                threshold: tau,
                achieved_far: fa as f64 / neg.len() as f64,
            }
        })
        .collect())
}

/// `(threshold, far, tar)` at every candidate threshold.
pub fn roc_curve(genuine: &[f64], impostor: &[f64]) -> Vec<(f64, f64, f64)> {
    let ng = genuine.len().max(1) as f64;
    let ni = impostor.len().max(1) as f64;
    candidate_thresholds(genuine.iter().chain(impostor).copied())
        .into_iter()
        .map(|tau| {
            let far = impostor.iter().filter(|&&s| s >= tau).count() as f64 / ni;
            let tar = genuine.iter().filter(|&&s| s >= tau).count() as f64 / ng;
            (tau, far, tar)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairAccuracy {
    pub fold_accuracies: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

/// Threshold maximizing the number of correct same/different decisions;
/// the smallest such threshold on ties.
pub fn best_threshold(scores: &[f64], same: &[bool]) -> f64 {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(same.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let candidates = candidate_thresholds(scores.iter().copied());
    // at the smallest candidate everything is accepted
    let mut correct: i64 = same.iter().filter(|&&s| s).count() as i64;
    let mut best = (correct, candidates[0]);
    let mut cursor = 0;
    for w in candidates.windows(2) {
        // moving the threshold from w[0] to w[1] rejects every pair scoring w[0]
        while cursor < pairs.len() && pairs[cursor].0 < w[1] {
            correct += if pairs[cursor].1 { -1 } else { 1 };
            cursor += 1;
        }
        if correct > best.0 {
            best = (correct, w[1]);
        }
    }
    best.1
}

/// Splits the pairs into `folds` contiguous folds; each fold is scored at the
/// threshold that maximizes accuracy on the remaining folds.
pub fn pairwise_protocol(scores: &[f64], same: &[bool], folds: usize) -> Result<PairAccuracy> {
    if scores.len() != same.len() {
        return Err(Error::shape("pairwise_protocol", scores.len(), same.len()));
    }
    let n = scores.len();
    if folds < 2 || n < folds {
        return Err(Error::Protocol(format!("{n} pairs cannot be split into {folds} folds")));
    }
    let bounds: Vec<usize> = (0..=folds).map(|k| k * n / folds).collect();
    let mut fold_accuracies = Vec::with_capacity(folds);
    let mut fold_thresholds = Vec::with_capacity(folds);
    for k in 0..folds {
        let (lo, hi) = (bounds[k], bounds[k + 1]);
        let train_s: Vec<f64> = scores[..lo].iter().chain(&scores[hi..]).copied().collect();
        let train_y: Vec<bool> = same[..lo].iter().chain(&same[hi..]).copied().collect();
        let tau = best_threshold(&train_s, &train_y);
        let correct = (lo..hi).filter(|&i| (scores[i] >= tau) == same[i]).count();
        fold_accuracies.push(correct as f64 / (hi - lo) as f64);
        fold_thresholds.push(tau);
    }
    let mean = fold_accuracies.iter().sum::<f64>() / folds as f64;
    let std = (fold_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / folds as f64).sqrt();
    Ok(PairAccuracy {
        fold_accuracies,
        fold_thresholds,
        mean,
        std,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub cmc: Vec<(usize, f64)>,
    pub tpir_fpir: Vec<TpirPoint>,
    pub tar_far: Vec<TarPoint>,
    pub pair_accuracy: Option<PairAccuracy>,
}

impl EvalReport {
    /// One `metric=<name> target=<v> value=<v> threshold=<v>` line per value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |name: &str, target: &dyn std::fmt::Display, value: f64, threshold: Option<f64>| {
            let th = threshold.map_or_else(|| "na".to_string(), |t| t.to_string());
            let _ = writeln!(s, "metric={name} target={target} value={value} threshold={th}");
        };
        for &(rank, ir) in &self.cmc {
            line("ir", &rank, ir, None);
        }
        for p in &self.tpir_fpir {
            line("tpir", &p.target_fpir, p.tpir, Some(p.threshold));
            line("fpir_achieved", &p.target_fpir, p.achieved_fpir, Some(p.threshold));
            line(
                "fpir_tie_limited",
                &p.target_fpir,
                if p.tie_limited { 1.0 } else { 0.0 },
                Some(p.threshold),
            );
        }
        for p in &self.tar_far {
            line("tar", &p.target_far, p.tar, Some(p.threshold));
            line("far_achieved", &p.target_far, p.achieved_far, Some(p.threshold));
        }
        if let Some(pa) = &self.pair_accuracy {
            line("pair_accuracy_mean", &"na", pa.mean, None);
            line("pair_accuracy_std", &"na", pa.std, None);
            for (k, (a, t)) in pa.fold_accuracies.iter().zip(&pa.fold_thresholds).enumerate() {
                line("pair_accuracy_fold", &k, *a, Some(*t));
            }
        }
        s
    }
}

/// Closed-set IR over the mated probes, TPIR at FPIR when unmated probes
/// exist, and TAR at FAR over all probe-gallery comparisons.
pub fn evaluate_identification(
    probes: &ProbeSet,
    gallery: &Gallery,
    ranks: &[usize],
    fpir_targets: &[f64],
    far_targets: &[f64],
) -> Result<EvalReport> {
    if gallery.is_empty() || probes.probes.is_empty() {
        return Err(Error::Protocol(
            "identification needs a non-empty gallery and probe set".into(),
        ));
    }
    let scores = score_probes(probes, gallery);
    let truth = probes.truth(gallery)?;
    let mut report = EvalReport::default();

    let mated_rows: Vec<usize> = (0..truth.len()).filter(|&i| truth[i].is_some()).collect();
    if !mated_rows.is_empty() {
        let sub = DenseMatrix::from_rows(&mated_rows.iter().map(|&i| scores.row(i).to_vec()).collect::<Vec<_>>())?;
        let sub_truth: Vec<Option<usize>> = mated_rows.iter().map(|&i| truth[i]).collect();
        report.cmc = closed_set_ir(&sub, &sub_truth, ranks)?;
    }
    if !mated_rows.is_empty() && mated_rows.len() < truth.len() {
        report.tpir_fpir = open_set_tpir(&scores, &truth, fpir_targets)?;
    }
    let (genuine, impostor) = split_scores(&scores, &truth);
    if !genuine.is_empty() && !impostor.is_empty() {
        report.tar_far = verification_tar(&genuine, &impostor, far_targets)?;
    }
    Ok(report)
}

/// Genuine (true-subject) and impostor scores of a probe-gallery matrix.
pub fn split_scores(scores: &DenseMatrix, truth: &[Option<usize>]) -> (Vec<f64>, Vec<f64>) {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        for (j, &s) in scores.row(i).iter().enumerate() {
            if *t == Some(j) {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    (genuine, impostor)
}
