//! Template triplets: batch-hard mining and the squared-distance hinge loss.

use crate::math::{squared_euclidean, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// For every anchor with at least one positive and one negative, pairs the
/// farthest same-label template with the nearest different-label template
/// (squared euclidean). Ties go to the lowest index.
pub fn mine_hard_triplets(reps: &DenseMatrix, labels: &[usize]) -> Vec<Triplet> {
    let t = reps.rows();
    debug_assert_eq!(t, labels.len());
    let mut out = Vec::new();
    for a in 0..t {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for b in 0..t {
            if b == a {
                continue;
            }
            let d = squared_euclidean(reps.row(a), reps.row(b));
            if labels[b] == labels[a] {
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((b, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((b, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (hardest_pos, hardest_neg) {
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative: n,
            });
        }
    }
    out
}

/// Every valid `(anchor, positive, negative)` combination.
pub fn mine_all_triplets(labels: &[usize]) -> Vec<Triplet> {
    let t = labels.len();
    let mut out = Vec::new();
    for a in 0..t {
        for p in (0..t).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..t).filter(|&n| labels[n] != labels[a]) {
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: n,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad: DenseMatrix,
    /// Triplets with a strictly positive hinge.
    pub active: usize,
}

/// `sum_k [alpha + d(a_k, p_k) - d(a_k, n_k)]_+` and its gradient with
/// respect to every representation. A hinge argument of exactly zero takes
/// the zero-gradient branch.
pub fn triplet_loss(reps: &DenseMatrix, triplets: &[Triplet], alpha: f64) -> TripletLoss {
    let d = reps.cols();
    let mut grad = DenseMatrix::zeros(reps.rows(), d);
    let mut loss = 0.0;
    let mut active = 0;
    for tr in triplets {
        let (ra, rp, rn) = (reps.row(tr.anchor), reps.row(tr.positive), reps.row(tr.negative));
        let arg = alpha + squared_euclidean(ra, rp) - squared_euclidean(ra, rn);
        if arg <= 0.0 {
            continue;
        }
        loss += arg;
        active += 1;
        for j in 0..d {
            let (a, p, n) = (ra[j], rp[j], rn[j]);
            grad[(tr.anchor, j)] += 2.0 * (n - p);
            grad[(tr.positive, j)] += 2.0 * (p - a);
            grad[(tr.negative, j)] += 2.0 * (a - n);
        }
    }
    TripletLoss { loss, grad, active }
}
