//! Grouped K-nearest-neighbor graph construction.
//!
//! Node features are split along the channel axis into `G` contiguous
//! slices. Every destination slice picks its own `k` most cosine-similar
//! source slices, so one destination node ends up connected to anywhere
//! between `k` and `k * G` distinct source nodes.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Patch,
    Label,
}

/// A set of graph nodes with their current features.
#[derive(Clone, Debug)]
pub struct NodeSet {
    pub features: Tensor,
    pub kind: NodeKind,
    /// Spatial layout `(rows, cols)` of patch nodes, row-major.
    pub grid: Option<(usize, usize)>,
}

impl NodeSet {
    pub fn patches(features: Tensor, grid: (usize, usize)) -> Result<Self> {
        if features.shape().len() != 2 || grid.0 * grid.1 != features.rows() {
            return Err(Error::shape("patch grid", features.shape(), &[grid.0, grid.1]));
        }
        Ok(Self {
            features,
            kind: NodeKind::Patch,
            grid: Some(grid),
        })
    }

    pub fn labels(features: Tensor) -> Self {
        Self {
            features,
            kind: NodeKind::Label,
            grid: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-group neighbor tables, `idx[g][i][..k]`, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedKnnGraph {
    groups: usize,
    k: usize,
    n_dest: usize,
    n_src: usize,
    idx: Arc<[usize]>,
    /// Scalar multiplies spent on similarity evaluation.
    pub sim_multiply_count: u64,
}

impl GroupedKnnGraph {
    /// Rebuilds a graph from a flat `[G][N_D][k]` table (e.g. a replayed one).
    pub fn from_table(
        groups: usize,
        k: usize,
        n_dest: usize,
        n_src: usize,
        idx: impl Into<Arc<[usize]>>,
    ) -> Result<Self> {
        let idx: Arc<[usize]> = idx.into();
        if idx.len() != groups * n_dest * k {
            return Err(Error::shape("graph table", &[groups, n_dest, k], &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&s| s >= n_src) {
            return Err(Error::Contract(format!("neighbor index {bad} >= {n_src}")));
        }
        Ok(Self {
            groups,
            k,
            n_dest,
            n_src,
            idx,
            sim_multiply_count: 0,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_dest(&self) -> usize {
        self.n_dest
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    /// Shared handle to the flat table.
    pub fn table(&self) -> Arc<[usize]> {
        self.idx.clone()
    }

    /// Neighbors of destination `i` in group `g`, most similar first.
    pub fn neighbors(&self, g: usize, i: usize) -> &[usize] {
        let start = (g * self.n_dest + i) * self.k;
        &self.idx[start..start + self.k]
    }

    /// Number of distinct source nodes destination `i` touches across all groups.
    pub fn neighbor_union_size(&self, i: usize) -> usize {
        assert!(i < self.n_dest, "destination {i} out of range {}", self.n_dest);
        let mut all: Vec<usize> = (0..self.groups)
            .flat_map(|g| self.neighbors(g, i).iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all.len()
    }
}

fn feature_dims(dest: &Tensor, src: &Tensor) -> Result<(usize, usize, usize)> {
    if dest.shape().len() != 2 || src.shape().len() != 2 || dest.cols() != src.cols() {
        return Err(Error::shape("knn features", dest.shape(), src.shape()));
    }
    Ok((dest.rows(), src.rows(), dest.cols()))
}

fn by_similarity(sims: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b))
}

/// Brute-force cosine top-`k`: for each destination row, every source is
/// scored as `a.b / (|a| |b|)` and the full candidate list is sorted.
pub fn knn_indices(dest: &Tensor, src: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n_dest, n_src, _) = feature_dims(dest, src)?;
    if k == 0 || k > n_src {
        return Err(Error::Argument(format!("k={k} must be in 1..={n_src}")));
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    let mut out = Vec::with_capacity(n_dest);
    for i in 0..n_dest {
        let d = dest.row(i);
        let nd = norm(d);
        let sims: Vec<f64> = (0..n_src)
            .map(|j| {
                let s = src.row(j);
                let dot: f64 = d.iter().zip(s).map(|(a, b)| (a / nd) * (b / norm(s))).sum();
                dot
            })
            .collect();
        let mut order: Vec<usize> = (0..n_src).collect();
        order.sort_by(by_similarity(&sims));
        order.truncate(k);
        out.push(order);
    }
    Ok(out)
}

fn normalized_slices(x: &Tensor, groups: usize) -> Vec<f64> {
    let c = x.cols();
    let cg = c / groups;
    let mut data = x.data().to_vec();
    for chunk in data.chunks_mut(cg) {
        let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        chunk.iter_mut().for_each(|v| *v /= n);
    }
    data
}

/// Grouped KNN over the channel-split features. `k` is clamped to the
/// number of sources.
pub fn group_knn(dest: &Tensor, src: &Tensor, groups: usize, k: usize) -> Result<GroupedKnnGraph> {
    let (n_dest, n_src, c) = feature_dims(dest, src)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Argument(format!(
            "feature width {c} not divisible by {groups} groups"
        )));
    }
    if k == 0 {
        return Err(Error::Argument("K must be >= 1".into()));
    }
    if n_src == 0 {
        return Err(Error::Argument("empty source node set".into()));
    }
    let k = k.min(n_src);
    let cg = c / groups;
    let dn = normalized_slices(dest, groups);
    let sn = normalized_slices(src, groups);

    let mut idx = Vec::with_capacity(groups * n_dest * k);
    let mut sims = vec![0.0; n_src];
    let mut order: Vec<usize> = Vec::with_capacity(n_src);
    let mut mults = 0u64;
    for g in 0..groups {
        for i in 0..n_dest {
            let d = &dn[i * c + g * cg..i * c + (g + 1) * cg];
            for (j, s) in sims.iter_mut().enumerate() {
                let row = &sn[j * c + g * cg..j * c + (g + 1) * cg];
                *s = d.iter().zip(row).map(|(a, b)| a * b).sum();
                mults += cg as u64;
            }
            order.clear();
            order.extend(0..n_src);
            let cmp = by_similarity(&sims);
            if k < n_src {
                order.select_nth_unstable_by(k - 1, &cmp);
            }
            order[..k].sort_unstable_by(&cmp);
            idx.extend_from_slice(&order[..k]);
        }
    }
    Ok(GroupedKnnGraph {
        groups,
        k,
        n_dest,
        n_src,
        idx: idx.into(),
        sim_multiply_count: mults,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_all_ties_use_index_order() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let idx = knn_indices(&x, &x, 3).unwrap();
        assert!(idx.iter().all(|r| r == &[0, 1, 2]));
    }

    #[test]
    fn knn_hand_cosine() {
        let d = Tensor::from_rows(&[&[1.0, 0.0]]);
        let s = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        assert_eq!(knn_indices(&d, &s, 2).unwrap(), vec![vec![0, 1]]);
        let d = Tensor::from_rows(&[&[1.0, 1.0]]);
        let s = Tensor::from_rows(&[&[2.0, 2.0], &[1.0, 0.0]]);
        assert_eq!(knn_indices(&d, &s, 1).unwrap(), vec![vec![0]]);
        assert!(knn_indices(&d, &s, 3).is_err());
    }

    // Four sources; destination D1's first slice points along S1/S2 and its
    // second slice along S3/S4. D2's slices both rank S2 in their top two.
    fn two_group_fixture() -> (Tensor, Tensor) {
        let src = Tensor::from_rows(&[
            &[1.0, 0.1, 0.0, 1.0],
            &[1.0, 0.2, 1.0, 0.0],
            &[0.0, 1.0, 1.0, 0.1],
            &[0.1, 1.0, 1.0, 0.2],
        ]);
        let dest = Tensor::from_rows(&[&[1.0, 0.15, 1.0, 0.15], &[1.0, 0.0, 1.0, -1.0]]);
        (dest, src)
    }

    #[test]
    fn two_groups_reach_four_sources() {
        let (dest, src) = two_group_fixture();
        let g = group_knn(&dest, &src, 2, 2).unwrap();
        let mut g0 = g.neighbors(0, 0).to_vec();
        let mut g1 = g.neighbors(1, 0).to_vec();
        g0.sort();
        g1.sort();
        assert_eq!(g0, vec![0, 1]);
        assert_eq!(g1, vec![2, 3]);
        assert_eq!(g.neighbor_union_size(0), 4);
    }

    #[test]
    fn overlapping_groups_reach_three_sources() {
        let (dest, src) = two_group_fixture();
        let g = group_knn(&dest, &src, 2, 2).unwrap();
        assert!(g.neighbors(0, 1).contains(&1) && g.neighbors(1, 1).contains(&1));
        assert_eq!(g.neighbor_union_size(1), 3);
    }

    #[test]
    fn group_knn_errors() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(group_knn(&x, &x, 2, 1).is_err());
        assert!(group_knn(&x, &x, 1, 0).is_err());
    }

    #[test]
    fn k_is_clamped() {
        let x = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = group_knn(&x, &x, 1, 9).unwrap();
        assert_eq!(g.k(), 2);
        // self is most similar
        assert_eq!(g.neighbors(0, 0), &[0, 1]);
        assert_eq!(g.neighbors(0, 1), &[1, 0]);
    }

    #[test]
    fn single_group_union_is_k() {
        let x = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let g = group_knn(&x, &x, 1, 2).unwrap();
        assert!((0..3).all(|i| g.neighbor_union_size(i) == 2));
    }

    #[test]
    fn duplicated_slices_fully_overlap() {
        let x = Tensor::from_rows(&[&[1.0, 0.3, 1.0, 0.3], &[0.2, 1.0, 0.2, 1.0], &[1.0, 1.0, 1.0, 1.0]]);
        let g = group_knn(&x, &x, 2, 2).unwrap();
        assert!((0..3).all(|i| g.neighbor_union_size(i) == 2));
    }

    #[test]
    fn from_table_validates() {
        assert!(GroupedKnnGraph::from_table(1, 1, 1, 1, vec![1]).is_err());
        assert!(GroupedKnnGraph::from_table(1, 1, 2, 1, vec![0]).is_err());
        assert!(GroupedKnnGraph::from_table(1, 1, 1, 1, vec![0]).is_ok());
    }
}
