//! Group KGCN module.
//!
//! For each destination node `D_i` and group `g`, the aggregate is the
//! elementwise max over the group's `k` selected sources of
//! `D_ig - S_kg`. The update is
//!
//! ```text
//! D_i' = D_i + FFN(D_i + Fuse(Concat(D_i, D'_i1, ..., D'_iG)))
//! FFN(x) = W2 gelu(W1 x + b1) + b2
//! ```
//!
//! The same module serves patch-level updates (sources are the patches
//! themselves) and cross-level updates (patches to labels).

use crate::error::{Error, Result};
use crate::graph::{group_knn, GroupedKnnGraph, NodeKind, NodeSet};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Parameters of one Group KGCN module.
#[derive(Clone, Debug)]
pub struct GroupKgcnParams {
    pub dim: usize,
    pub groups: usize,
    pub k: usize,
    pub expansion: usize,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl GroupKgcnParams {
    /// Registers the module's parameters under `prefix` (e.g. `stage1.patch.0`).
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        groups: usize,
        k: usize,
        expansion: usize,
    ) -> Result<Self> {
        if groups == 0 || dim % groups != 0 {
            return Err(Error::Argument(format!("dim {dim} not divisible by G={groups}")));
        }
        if k == 0 || expansion == 0 {
            return Err(Error::Argument("K and FFN expansion must be >= 1".into()));
        }
        let hidden = dim * expansion;
        Ok(Self {
            dim,
            groups,
            k,
            expansion,
            fuse_w: store.add_uniform_weight(format!("{prefix}.fuse.w"), 2 * dim, dim)?,
            fuse_b: store.add_zeros(format!("{prefix}.fuse.b"), &[dim])?,
            ffn_w1: store.add_uniform_weight(format!("{prefix}.ffn.w1"), dim, hidden)?,
            ffn_b1: store.add_zeros(format!("{prefix}.ffn.b1"), &[hidden])?,
            ffn_w2: store.add_uniform_weight(format!("{prefix}.ffn.w2"), hidden, dim)?,
            ffn_b2: store.add_zeros(format!("{prefix}.ffn.b2"), &[dim])?,
        })
    }

    /// Applies the module outside of any training tape.
    pub fn apply(&self, store: &ParamStore, dest: &NodeSet, src: &NodeSet) -> Result<NodeSet> {
        let mut tape = Tape::no_grad();
        let d = NodeVars::from_set(&mut tape, dest);
        let s = NodeVars::from_set(&mut tape, src);
        let (out, _) = group_kgcn_forward(&mut tape, store, &d, &s, self)?;
        Ok(NodeSet {
            features: tape.value(out.features).clone(),
            kind: dest.kind,
            grid: dest.grid,
        })
    }
}

/// A node set whose features live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct NodeVars {
    pub features: Var,
    pub kind: NodeKind,
    pub grid: Option<(usize, usize)>,
}

impl NodeVars {
    pub fn from_set(tape: &mut Tape, set: &NodeSet) -> Self {
        Self {
            features: tape.input(set.features.clone()),
            kind: set.kind,
            grid: set.grid,
        }
    }
}

/// Per-group aggregates `D'_g`, stored side by side as one `[N_D, C]` node
/// so that group `g` occupies columns `g*C/G .. (g+1)*C/G`.
#[derive(Clone, Copy, Debug)]
pub struct GroupAggregate {
    pub combined: Var,
    pub groups: usize,
}

impl GroupAggregate {
    /// Copy of group `g`'s `[N_D, C/G]` block.
    pub fn group(&self, tape: &Tape, g: usize) -> Tensor {
        let t = tape.value(self.combined);
        let cg = t.cols() / self.groups;
        let data = (0..t.rows())
            .flat_map(|r| t.row(r)[g * cg..(g + 1) * cg].to_vec())
            .collect();
        Tensor::new(&[t.rows(), cg], data).expect("group block")
    }
}

/// Group max-relative aggregation over a prebuilt graph.
pub fn group_max_relative(
    tape: &mut Tape,
    dest: Var,
    src: Var,
    graph: &GroupedKnnGraph,
) -> Result<GroupAggregate> {
    let (dv, sv) = (tape.value(dest), tape.value(src));
    if dv.rows() != graph.n_dest() || sv.rows() != graph.n_src() || dv.cols() != sv.cols() {
        return Err(Error::shape("group_max_relative", dv.shape(), sv.shape()));
    }
    let table = graph.table();
    let mut diffs = Vec::with_capacity(graph.k());
    for slot in 0..graph.k() {
        let gathered = tape.group_gather(src, table.clone(), graph.groups(), graph.k(), slot)?;
        diffs.push(tape.sub(dest, gathered)?);
    }
    Ok(GroupAggregate {
        combined: tape.max_over_set(&diffs)?,
        groups: graph.groups(),
    })
}

/// Builds the grouped graph from the current features, aggregates, and
/// applies the residual update. Returns the updated destination nodes and
/// the graph that was used.
pub fn group_kgcn_forward(
    tape: &mut Tape,
    store: &ParamStore,
    dest: &NodeVars,
    src: &NodeVars,
    p: &GroupKgcnParams,
) -> Result<(NodeVars, GroupedKnnGraph)> {
    let (n_dest, c) = {
        let d = tape.value(dest.features);
        (d.rows(), d.cols())
    };
    let n_src = tape.value(src.features).rows();
    if c != p.dim || tape.value(src.features).cols() != p.dim {
        return Err(Error::shape(
            "group_kgcn_forward",
            tape.value(dest.features).shape(),
            &[p.dim],
        ));
    }

    let mut built = None;
    let table = {
        let (dv, sv) = (tape.value(dest.features).clone(), tape.value(src.features).clone());
        tape.routed(|| {
            let g = group_knn(&dv, &sv, p.groups, p.k)?;
            let t = g.indices().to_vec();
            built = Some(g);
            Ok(t)
        })?
    };
    let graph = match built {
        Some(g) => g,
        None => GroupedKnnGraph::from_table(p.groups, p.k.min(n_src), n_dest, n_src, table)?,
    };

    let agg = group_max_relative(tape, dest.features, src.features, &graph)?;
    let cat = tape.concat_last_dim(&[dest.features, agg.combined])?;
    let (fw, fb) = (tape.param(store, p.fuse_w), tape.param(store, p.fuse_b));
    let fused = tape.affine(cat, fw, fb)?;
    let h = tape.add(dest.features, fused)?;
    let (w1, b1) = (tape.param(store, p.ffn_w1), tape.param(store, p.ffn_b1));
    let hidden = tape.affine(h, w1, b1)?;
    let act = tape.gelu(hidden);
    let (w2, b2) = (tape.param(store, p.ffn_w2), tape.param(store, p.ffn_b2));
    let ffn = tape.affine(act, w2, b2)?;
    let out = tape.add(dest.features, ffn)?;
    Ok((
        NodeVars {
            features: out,
            ..*dest
        },
        graph,
    ))
}

/// Cross-level update: labels are destinations, patches are sources.
pub fn cross_level_update(
    tape: &mut Tape,
    store: &ParamStore,
    labels: &NodeVars,
    patches: &NodeVars,
    p: &GroupKgcnParams,
) -> Result<(NodeVars, GroupedKnnGraph)> {
    if labels.kind != NodeKind::Label || patches.kind != NodeKind::Patch {
        return Err(Error::Argument("cross-level edges run from patches to labels".into()));
    }
    group_kgcn_forward(tape, store, labels, patches, p)
}
