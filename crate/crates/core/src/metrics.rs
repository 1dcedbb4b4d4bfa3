//! Multi-label evaluation: per-class and overall precision/recall/F1 at a
//! fixed threshold, Top-3 variants, and mean average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub top3_cf1: f64,
    pub top3_of1: f64,
    /// `None` for classes without a positive target (excluded from mAP).
    pub per_class_ap: Vec<Option<f64>>,
}

/// Average precision: mean over positive ranks `r` of precision@r, with
/// samples ranked by descending score and ties broken by ascending index.
/// Returns `None` when there is no positive target.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), targets.len(), "scores/targets length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    // Exact running sum num/den while it fits, so small cases round once.
    let mut exact = Some((0u128, 1u128));
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits as u128, rank as u128 + 1));
        }
    }
    if hits == 0 {
        return None;
    }
    let small = |v: u128| v < 1 << 53;
    Some(match exact.and_then(|(n, d)| Some((n, d.checked_mul(hits as u128)?))) {
        Some((n, d)) if small(n) && small(d) => n as f64 / d as f64,
        _ => sum / hits as f64,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `n/d + a/b` in lowest terms, `None` on overflow.
fn add_fraction(n: u128, d: u128, a: u128, b: u128) -> Option<(u128, u128)> {
    let g = gcd(d, b);
    let den = d.checked_mul(b / g)?;
    let num = n.checked_mul(b / g)?.checked_add(a.checked_mul(d / g)?)?;
    let r = gcd(num, den);
    Some((num / r, den / r))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

struct Counts {
    tp: Vec<usize>,
    fp: Vec<usize>,
    fn_: Vec<usize>,
}

impl Counts {
    fn tally(preds: &[Vec<bool>], targets: &[Vec<bool>], classes: usize) -> Self {
        let mut c = Counts {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        };
        for (p, t) in preds.iter().zip(targets) {
            for j in 0..classes {
                match (p[j], t[j]) {
                    (true, true) => c.tp[j] += 1,
                    (true, false) => c.fp[j] += 1,
                    (false, true) => c.fn_[j] += 1,
                    _ => {}
                }
            }
        }
        c
    }

    /// (CP, CR, CF1, OP, OR, OF1)
    fn summary(&self) -> (f64, f64, f64, f64, f64, f64) {
        let l = self.tp.len() as f64;
        let cp = (0..self.tp.len())
            .map(|j| ratio(self.tp[j], self.tp[j] + self.fp[j]))
            .sum::<f64>()
            / l;
        let cr = (0..self.tp.len())
            .map(|j| ratio(self.tp[j], self.tp[j] + self.fn_[j]))
            .sum::<f64>()
            / l;
        let (tp, fp, fn_): (usize, usize, usize) = (
            self.tp.iter().sum(),
            self.fp.iter().sum(),
            self.fn_.iter().sum(),
        );
        let op = ratio(tp, tp + fp);
        let or = ratio(tp, tp + fn_);
        (cp, cr, f1(cp, cr), op, or, f1(op, or))
    }
}

/// Indices of the `n` highest scores, ties broken by ascending index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Full metric suite over `n` samples by `L` classes.
pub fn evaluate(scores: &[Vec<f64>], targets: &[Vec<bool>], threshold: f64) -> Result<MetricsReport> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(Error::shape("evaluate", &[scores.len()], &[targets.len()]));
    }
    let classes = scores[0].len();
    if classes == 0
        || scores.iter().any(|s| s.len() != classes)
        || targets.iter().any(|t| t.len() != classes)
    {
        return Err(Error::Argument("ragged score/target rows".into()));
    }

    let preds: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| s.iter().map(|&v| v >= threshold).collect())
        .collect();
    let (cp, cr, cf1, op, or, of1) = Counts::tally(&preds, targets, classes).summary();

    let top3: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| {
            let mut p = vec![false; classes];
            for j in top_n(s, 3) {
                p[j] = true;
            }
            p
        })
        .collect();
    let (_, _, top3_cf1, _, _, top3_of1) = Counts::tally(&top3, targets, classes).summary();

    let per_class_ap: Vec<Option<f64>> = (0..classes)
        .map(|j| {
            let col: Vec<f64> = scores.iter().map(|s| s[j]).collect();
            let t: Vec<bool> = targets.iter().map(|t| t[j]).collect();
            let ap = average_precision(&col, &t);
            if ap.is_none() {
                log::warn!("class {j} has no positive targets; excluded from mAP");
            }
            ap
        })
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };

    Ok(MetricsReport {
        map,
        cp,
        cr,
        cf1,
        op,
        or,
        of1,
        top3_cf1,
        top3_of1,
        per_class_ap,
    })
}
