use serde::{Deserialize, Serialize};

use crate::data::class_names;
use crate::error::Result;
use crate::model::{GkgModel, ModuleKind};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub dest: usize,
    pub group: usize,
    /// Source indices in neighbor order (most similar first).
    pub sources: Vec<usize>,
    /// `[row, col]` of each source on the source patch grid.
    pub source_cells: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleRecord {
    pub kind: ModuleKind,
    pub index: usize,
    #[serde(rename = "G")]
    pub groups: usize,
    pub k: usize,
    pub n_dest: usize,
    pub n_src: usize,
    /// Source patch grid `[rows, cols]`.
    pub grid: [usize; 2],
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: usize,
    pub modules: Vec<ModuleRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionRecord {
    pub stages: Vec<StageRecord>,
    pub labels: Vec<String>,
}

impl ConnectionRecord {
    pub fn num_modules(&self) -> usize {
        self.stages.iter().map(|s| s.modules.len()).sum()
    }
}

/// Runs one forward pass with capture on and records every module's neighbor table.
pub fn export_connections(model: &GkgModel, image: &Tensor) -> Result<ConnectionRecord> {
    let trace = model.trace(image, true)?;
    let mut stages: Vec<StageRecord> = (0..model.config.dims.len())
        .map(|stage| StageRecord {
            stage,
            modules: Vec::new(),
        })
        .collect();
    for snap in &trace.snapshots {
        let g = &snap.graph;
        let cols = snap.src_grid.1;
        let mut edges = Vec::with_capacity(g.n_dest() * g.groups());
        for dest in 0..g.n_dest() {
            for group in 0..g.groups() {
                let sources = g.neighbors(group, dest).to_vec();
                let source_cells = sources.iter().map(|&s| [s / cols, s % cols]).collect();
                edges.push(Edge {
                    dest,
                    group,
                    sources,
                    source_cells,
                });
            }
        }
        stages[snap.stage].modules.push(ModuleRecord {
            kind: snap.kind,
            index: snap.index,
            groups: g.groups(),
            k: g.k(),
            n_dest: g.n_dest(),
            n_src: g.n_src(),
            grid: [snap.src_grid.0, snap.src_grid.1],
            edges,
        });
    }
    Ok(ConnectionRecord {
        stages,
        labels: class_names(model.config.num_classes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn micro_record_shape() {
        let cfg = ModelConfig::micro();
        let model = GkgModel::new(cfg.clone(), 2).unwrap();
        let img = Tensor::filled(&[32, 32, 3], 0.3);
        let rec = export_connections(&model, &img).unwrap();
        let expected: usize = cfg
            .patch_modules
            .iter()
            .zip(&cfg.cross_modules)
            .map(|(a, b)| a + b)
            .sum();
        assert_eq!(rec.num_modules(), expected);
        assert_eq!(rec.labels.len(), cfg.num_classes);
        for st in &rec.stages {
            for m in &st.modules {
                if m.kind == ModuleKind::Cross {
                    assert_eq!(m.n_dest, cfg.num_classes);
                }
                assert_eq!(m.edges.len(), m.n_dest * m.groups);
                assert!(m.edges.iter().all(|e| e.sources.iter().all(|&s| s < m.n_src)));
            }
        }
    }
}
