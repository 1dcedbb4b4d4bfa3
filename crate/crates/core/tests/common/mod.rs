//! Straight-line reference implementations used as test oracles. Nothing
//! here calls into the library's numeric kernels.

#![allow(dead_code)]

use gkgnet::numerics::{ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(r: &mut ChaCha8Rng, n: usize, c: usize) -> Rows {
    (0..n).map(|_| (0..c).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(rows: &Rows) -> Tensor {
    let c = rows[0].len();
    Tensor::new(&[rows.len(), c], rows.concat()).unwrap()
}

pub fn to_rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.id_of(name).unwrap_or_else(|| panic!("no param {name}"))).value.clone()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Top-k by cosine, ties to the lower index, by repeated selection.
pub fn ref_topk(dest: &[f64], src: &[&[f64]], k: usize) -> Vec<usize> {
    let sims: Vec<f64> = src.iter().map(|s| cosine(dest, s)).collect();
    let mut taken = vec![false; src.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(src.len()) {
        let mut best: Option<usize> = None;
        for j in 0..src.len() {
            if taken[j] {
                continue;
            }
            match best {
                None => best = Some(j),
                Some(b) if sims[j] > sims[b] => best = Some(j),
                _ => {}
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// `[g][i]` neighbor lists over contiguous channel slices.
pub fn ref_group_knn(dest: &Rows, src: &Rows, groups: usize, k: usize) -> Vec<Vec<Vec<usize>>> {
    let cg = dest[0].len() / groups;
    (0..groups)
        .map(|g| {
            let sl = |r: &Vec<f64>| r[g * cg..(g + 1) * cg].to_vec();
            let s: Rows = src.iter().map(sl).collect();
            let sref: Vec<&[f64]> = s.iter().map(|r| r.as_slice()).collect();
            dest.iter().map(|d| ref_topk(&sl(d), &sref, k)).collect()
        })
        .collect()
}

pub fn matvec_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cout = w.shape()[1];
    (0..cout)
        .map(|j| {
            let mut acc = b.data()[j];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * cout + j];
            }
            acc
        })
        .collect()
}

pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn ref_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct RefModule {
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl RefModule {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        Self {
            fuse_w: param(store, &format!("{prefix}.fuse.w")),
            fuse_b: param(store, &format!("{prefix}.fuse.b")),
            w1: param(store, &format!("{prefix}.ffn.w1")),
            b1: param(store, &format!("{prefix}.ffn.b1")),
            w2: param(store, &format!("{prefix}.ffn.w2")),
            b2: param(store, &format!("{prefix}.ffn.b2")),
        }
    }
}

/// One module update, destination row by destination row:
/// aggregate each group as the max over neighbors of `D_g - S_g`, then
/// `D + FFN(D + Fuse([D, D'_1..D'_G]))`.
pub fn ref_kgcn(dest: &Rows, src: &Rows, m: &RefModule, groups: usize, k: usize) -> Rows {
    let c = dest[0].len();
    let cg = c / groups;
    let nbrs = ref_group_knn(dest, src, groups, k);
    let mut out = Vec::new();
    for (i, d) in dest.iter().enumerate() {
        let mut agg = vec![f64::NEG_INFINITY; c];
        for g in 0..groups {
            for &j in &nbrs[g][i] {
                for ch in g * cg..(g + 1) * cg {
                    agg[ch] = agg[ch].max(d[ch] - src[j][ch]);
                }
            }
        }
        let mut cat = d.clone();
        cat.extend_from_slice(&agg);
        let fused = matvec_affine(&cat, &m.fuse_w, &m.fuse_b);
        let h: Vec<f64> = d.iter().zip(&fused).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = matvec_affine(&h, &m.w1, &m.b1).into_iter().map(ref_gelu).collect();
        let ffn = matvec_affine(&hidden, &m.w2, &m.b2);
        out.push(d.iter().zip(&ffn).map(|(a, b)| a + b).collect());
    }
    out
}

/// Patch rows by explicit pixel addressing, each patch flattened (row, col, channel).
pub fn naive_patchify(image: &Tensor, p: usize) -> Rows {
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let px = |y: usize, x: usize, c: usize| image.data()[(y * w + x) * ch + c];
    let mut rows = Vec::new();
    for gy in 0..h / p {
        for gx in 0..w / p {
            let mut r = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..ch {
                        r.push(px(gy * p + dy, gx * p + dx, c));
                    }
                }
            }
            rows.push(r);
        }
    }
    rows
}

/// Average of each 2x2 window of a row-major grid.
pub fn naive_window_mean(rows: &Rows, grid: (usize, usize)) -> Rows {
    let (h, w) = grid;
    let mut out = Vec::new();
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            let cells = [y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1];
            out.push(
                (0..rows[0].len())
                    .map(|c| cells.iter().map(|&i| rows[i][c]).sum::<f64>() / 4.0)
                    .collect(),
            );
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct RefMetrics {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub top3_cf1: f64,
    pub top3_of1: f64,
    pub map: f64,
}

fn div0(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ref_prf(pred: &[Vec<bool>], targets: &[Vec<bool>]) -> (f64, f64, f64, f64, f64, f64) {
    let l = targets[0].len();
    let (mut sp, mut sr) = (0.0, 0.0);
    let (mut tp_all, mut pred_all, mut pos_all) = (0.0, 0.0, 0.0);
    for c in 0..l {
        let mut tp = 0.0;
        let mut npred = 0.0;
        let mut npos = 0.0;
        for n in 0..targets.len() {
            if pred[n][c] && targets[n][c] {
                tp += 1.0;
            }
            if pred[n][c] {
                npred += 1.0;
            }
            if targets[n][c] {
                npos += 1.0;
            }
        }
        sp += div0(tp, npred);
        sr += div0(tp, npos);
        tp_all += tp;
        pred_all += npred;
        pos_all += npos;
    }
    let (cp, cr) = (sp / l as f64, sr / l as f64);
    let (op, or) = (div0(tp_all, pred_all), div0(tp_all, pos_all));
    (cp, cr, f1(cp, cr), op, or, f1(op, or))
}

/// AP by counting, for every positive, how many samples rank at or above it.
pub fn ref_ap(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| targets[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let rank = (0..scores.len()).filter(|&j| ahead(i, j)).count() as f64;
            let hits = positives.iter().filter(|&&j| ahead(i, j)).count() as f64;
            hits / rank
        })
        .sum();
    Some(total / positives.len() as f64)
}

pub fn ref_metrics(scores: &[Vec<f64>], targets: &[Vec<bool>], thr: f64) -> RefMetrics {
    let l = targets[0].len();
    let pred: Vec<Vec<bool>> = scores.iter().map(|s| s.iter().map(|&v| v >= thr).collect()).collect();
    let (cp, cr, cf1, op, or, of1) = ref_prf(&pred, targets);
    let top3: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| {
            (0..l)
                .map(|c| {
                    let better = (0..l).filter(|&d| s[d] > s[c] || (s[d] == s[c] && d < c)).count();
                    better < 3
                })
                .collect()
        })
        .collect();
    let (_, _, top3_cf1, _, _, top3_of1) = ref_prf(&top3, targets);
    let aps: Vec<f64> = (0..l)
        .filter_map(|c| {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let t: Vec<bool> = targets.iter().map(|t| t[c]).collect();
            ref_ap(&col, &t)
        })
        .collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    RefMetrics {
        cp,
        cr,
        cf1,
        op,
        or,
        of1,
        top3_cf1,
        top3_of1,
        map,
    }
}

/// Random score/target matrix with some tied scores.
pub fn random_scores(r: &mut ChaCha8Rng, n: usize, l: usize) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let scores = (0..n)
        .map(|_| {
            (0..l)
                .map(|_| {
                    if r.gen_bool(0.2) {
                        (r.gen_range(0..5) as f64) / 4.0
                    } else {
                        r.gen_range(0.0..1.0)
                    }
                })
                .collect()
        })
        .collect();
    let targets = (0..n).map(|_| (0..l).map(|_| r.gen_bool(0.3)).collect()).collect();
    (scores, targets)
}
