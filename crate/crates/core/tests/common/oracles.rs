//! Brute-force reference implementations of the matching metrics. They sort
//! or sweep exhaustively and share no code with the library.

#![allow(dead_code)]

/// IR at every rank `1..=G` via a stable descending sort of each row.
pub fn cmc_by_sort(scores: &[Vec<f64>], truth: &[usize]) -> Vec<f64> {
    let g = scores[0].len();
    let mut hits = vec![0usize; g + 1];
    for (row, &t) in scores.iter().zip(truth) {
        let mut idx: Vec<usize> = (0..g).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let rank = idx.iter().position(|&j| j == t).unwrap() + 1;
        for h in &mut hits[rank..=g] {
            *h += 1;
        }
    }
    (1..=g).map(|r| hits[r] as f64 / truth.len() as f64).collect()
}

/// Observed values in increasing order, then one value just above the largest.
fn candidates(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut c: Vec<f64> = values.collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c.dedup();
    let above = c.last().unwrap().next_up();
    c.push(above);
    c
}

fn top(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &s) in row.iter().enumerate() {
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// `(threshold, tpir, fpir)` at the first threshold in an ascending sweep
/// over observed top scores whose FPIR is within `target`.
pub fn tpir_by_sweep(scores: &[Vec<f64>], truth: &[Option<usize>], target: f64) -> (f64, f64, f64) {
    let tops: Vec<(usize, f64)> = scores.iter().map(|r| top(r)).collect();
    let n_unmated = truth.iter().filter(|t| t.is_none()).count() as f64;
    let n_mated = truth.iter().filter(|t| t.is_some()).count() as f64;
    for tau in candidates(tops.iter().map(|t| t.1)) {
        let mut fp = 0.0;
        let mut tp = 0.0;
        for (&(j, s), t) in tops.iter().zip(truth) {
            if s >= tau {
                match t {
                    None => fp += 1.0,
                    Some(t) if *t == j => tp += 1.0,
                    Some(_) => {}
                }
            }
        }
        if fp / n_unmated <= target {
            return (tau, tp / n_mated, fp / n_unmated);
        }
    }
    unreachable!("the top candidate accepts nothing")
}

/// `(threshold, tar, far)` by an ascending sweep over all observed scores.
pub fn tar_by_sweep(genuine: &[f64], impostor: &[f64], target: f64) -> (f64, f64, f64) {
    for tau in candidates(genuine.iter().chain(impostor).copied()) {
        let far = impostor.iter().filter(|&&s| s >= tau).count() as f64 / impostor.len() as f64;
        if far <= target {
            let tar = genuine.iter().filter(|&&s| s >= tau).count() as f64 / genuine.len() as f64;
            return (tau, tar, far);
        }
    }
    unreachable!("the top candidate accepts nothing")
}

/// Fold accuracies of the contiguous k-fold protocol, searching every
/// candidate threshold on the training folds and keeping the first best.
pub fn pair_folds_by_search(scores: &[f64], same: &[bool], folds: usize) -> Vec<f64> {
    let n = scores.len();
    (0..folds)
        .map(|k| {
            let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
            let train: Vec<usize> = (0..n).filter(|&i| i < lo || i >= hi).collect();
            let accuracy = |tau: f64, idx: &mut dyn Iterator<Item = usize>| {
                let mut correct = 0usize;
                let mut total = 0usize;
                for i in idx {
                    total += 1;
                    if (scores[i] >= tau) == same[i] {
                        correct += 1;
                    }
                }
                (correct, total)
            };
            let mut best: Option<(usize, f64)> = None;
            for tau in candidates(train.iter().map(|&i| scores[i])) {
                let (c, _) = accuracy(tau, &mut train.iter().copied());
                if best.is_none_or(|(bc, _)| c > bc) {
                    best = Some((c, tau));
                }
            }
            let (c, t) = accuracy(best.unwrap().1, &mut (lo..hi));
            c as f64 / t as f64
        })
        .collect()
}
