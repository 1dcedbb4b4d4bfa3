//! Full network assembly: patch embedding, pyramid stages of patch-level
//! and cross-level Group KGCN modules, downsampling between stages, and the
//! two-headed classifier `Y = sigmoid(Y_patch + Y_label)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{cross_level_update, group_kgcn_forward, GroupKgcnParams, NodeVars};
use crate::graph::{GroupedKnnGraph, NodeKind};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

fn default_expansion() -> usize {
    4
}

/// Network shape. All per-stage lists have one entry per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default = "ModelConfig::desk")]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dims: Vec<usize>,
    pub patch_modules: Vec<usize>,
    pub cross_modules: Vec<usize>,
    pub num_classes: usize,
    pub k: usize,
    pub groups: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
}

impl ModelConfig {
    /// Default desk-scale network: 32x32 input, 2x2 patches, grids 16/8/4/2.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 2,
            dims: vec![16, 32, 64, 64],
            patch_modules: vec![1, 1, 2, 1],
            cross_modules: vec![1, 1, 1, 1],
            num_classes: 8,
            k: 9,
            groups: 2,
            ffn_expansion: 4,
        }
    }

    /// Smallest network that still exercises every mechanism; used for
    /// gradient checks. Grids 8/4/2/1.
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            dims: vec![8, 16, 16, 16],
            patch_modules: vec![1, 1, 1, 1],
            cross_modules: vec![1, 1, 1, 1],
            num_classes: 4,
            k: 3,
            groups: 2,
            ffn_expansion: 4,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("model.{f}");
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(Error::config(field("image_size"), "sizes must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                field("patch_size"),
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            ));
        }
        let stages = self.dims.len();
        if stages == 0 {
            return Err(Error::config(field("dims"), "need at least one stage"));
        }
        if self.patch_modules.len() != stages {
            return Err(Error::config(field("patch_modules"), format!("expected {stages} entries")));
        }
        if self.cross_modules.len() != stages {
            return Err(Error::config(field("cross_modules"), format!("expected {stages} entries")));
        }
        if self.num_classes == 0 {
            return Err(Error::config(field("num_classes"), "must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config(field("k"), "must be >= 1"));
        }
        if self.groups == 0 {
            return Err(Error::config(field("groups"), "must be >= 1"));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config(field("ffn_expansion"), "must be >= 1"));
        }
        for (s, &d) in self.dims.iter().enumerate() {
            if d == 0 || d % self.groups != 0 {
                return Err(Error::config(
                    field("dims"),
                    format!("stage {} width {d} not divisible by groups {}", s + 1, self.groups),
                ));
            }
        }
        if self.dims.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(field("dims"), "widths must be nondecreasing"));
        }
        let mut g = self.grid();
        for s in 0..stages - 1 {
            if g % 2 != 0 {
                return Err(Error::config(
                    field("image_size"),
                    format!("grid {g}x{g} at end of stage {} cannot be halved", s + 1),
                ));
            }
            g /= 2;
        }
        Ok(())
    }

    pub fn stage_plans(&self) -> Vec<StagePlan> {
        let mut g = self.grid();
        self.dims
            .iter()
            .enumerate()
            .map(|(s, &dim)| {
                let plan = StagePlan {
                    num_patch_modules: self.patch_modules[s],
                    num_cross_modules: self.cross_modules[s],
                    dim,
                    grid: (g, g),
                };
                g /= 2;
                plan
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub num_patch_modules: usize,
    pub num_cross_modules: usize,
    pub dim: usize,
    pub grid: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Patch,
    Cross,
}

/// What one module invocation saw and produced.
#[derive(Clone, Debug)]
pub struct ModuleSnapshot {
    pub kind: ModuleKind,
    /// 0-based stage index.
    pub stage: usize,
    pub index: usize,
    pub graph: GroupedKnnGraph,
    pub src_grid: (usize, usize),
    pub input: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.add_uniform_weight(format!("{prefix}.w"), fan_in, fan_out)?,
            b: store.add_zeros(format!("{prefix}.b"), &[fan_out])?,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    plan: StagePlan,
    patch: Vec<GroupKgcnParams>,
    cross: Vec<GroupKgcnParams>,
}

/// Anything trainable that maps an image to one logit per class.
pub trait MultiLabelNet: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn num_classes(&self) -> usize;
    fn logits(&self, tape: &mut Tape, image: &Tensor) -> Result<Var>;
}

/// Tape handles for one forward pass.
pub struct ForwardVars {
    pub logits_patch: Var,
    pub logits_label: Var,
    pub logits: Var,
    pub scores: Var,
    pub snapshots: Vec<ModuleSnapshot>,
}

/// Detached forward result.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits_patch: Tensor,
    pub logits_label: Tensor,
    pub scores: Tensor,
    pub snapshots: Vec<ModuleSnapshot>,
}

#[derive(Clone, Debug)]
pub struct GkgModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: Affine,
    pos: ParamId,
    stages: Vec<Stage>,
    downsamplers: Vec<Affine>,
    label_embed: ParamId,
    label_projectors: Vec<Affine>,
    head_patch: Affine,
    head_label_w: ParamId,
    head_label_b: ParamId,
}

impl GkgModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let plans = config.stage_plans();
        let p = config.patch_size;
        let c1 = config.dims[0];
        let n1 = config.grid() * config.grid();
        let l = config.num_classes;

        let embed = Affine::new(&mut store, "embed", p * p * config.channels, c1)?;
        let pos = store.add_zeros("embed.pos", &[n1, c1])?;
        let label_embed = store.add_uniform("label.embed", &[l, c1], l, c1)?;

        let mut stages = Vec::new();
        let mut downsamplers = Vec::new();
        let mut label_projectors = Vec::new();
        for (s, plan) in plans.iter().enumerate() {
            let name = s + 1;
            let mk = |store: &mut ParamStore, kind: &str, m: usize| {
                GroupKgcnParams::new(
                    store,
                    &format!("stage{name}.{kind}.{m}"),
                    plan.dim,
                    config.groups,
                    config.k,
                    config.ffn_expansion,
                )
            };
            let patch = (0..plan.num_patch_modules)
                .map(|m| mk(&mut store, "patch", m))
                .collect::<Result<_>>()?;
            let cross = (0..plan.num_cross_modules)
                .map(|m| mk(&mut store, "cross", m))
                .collect::<Result<_>>()?;
            stages.push(Stage {
                plan: plan.clone(),
                patch,
                cross,
            });
            if let Some(next) = plans.get(s + 1) {
                downsamplers.push(Affine::new(&mut store, &format!("down{name}"), plan.dim, next.dim)?);
                label_projectors.push(Affine::new(
                    &mut store,
                    &format!("label.proj{name}"),
                    plan.dim,
                    next.dim,
                )?);
            }
        }
        let c_last = *config.dims.last().expect("validated");
        let head_patch = Affine::new(&mut store, "head.patch", c_last, l)?;
        let head_label_w = store.add_uniform("head.label.w", &[l, c_last], c_last, 1)?;
        let head_label_b = store.add_zeros("head.label.b", &[l])?;

        Ok(Self {
            config,
            params: store,
            embed,
            pos,
            stages,
            downsamplers,
            label_embed,
            label_projectors,
            head_patch,
            head_label_w,
            head_label_b,
        })
    }

    pub fn stage_plans(&self) -> Vec<StagePlan> {
        self.stages.iter().map(|s| s.plan.clone()).collect()
    }

    /// Module parameter sets in forward order, with kind and stage.
    pub fn modules(&self) -> impl Iterator<Item = (usize, ModuleKind, &GroupKgcnParams)> {
        self.stages.iter().enumerate().flat_map(|(s, st)| {
            st.patch
                .iter()
                .map(move |p| (s, ModuleKind::Patch, p))
                .chain(st.cross.iter().map(move |p| (s, ModuleKind::Cross, p)))
        })
    }

    pub fn num_modules(&self) -> usize {
        self.modules().count()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.channels];
        if image.shape() != want {
            return Err(Error::shape("image", image.shape(), &want));
        }
        Ok(())
    }

    /// Splits the image into non-overlapping patches, embeds each one and
    /// adds the positional table.
    pub fn patchify_embed(&self, tape: &mut Tape, image: &Tensor) -> Result<NodeVars> {
        self.patchify_embed_with(&self.params, tape, image)
    }

    fn patchify_embed_with(&self, store: &ParamStore, tape: &mut Tape, image: &Tensor) -> Result<NodeVars> {
        self.check_image(image)?;
        let (patches, grid) = patchify(image, self.config.patch_size)?;
        let x = tape.input(patches);
        let e = self.embed.apply(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        Ok(NodeVars {
            features: tape.add(e, pos)?,
            kind: NodeKind::Patch,
            grid: Some(grid),
        })
    }

    /// 2x2 mean pooling over the patch grid followed by the boundary projection.
    pub fn downsample(&self, tape: &mut Tape, boundary: usize, patches: &NodeVars) -> Result<NodeVars> {
        self.downsample_with(&self.params, tape, boundary, patches)
    }

    fn downsample_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        boundary: usize,
        patches: &NodeVars,
    ) -> Result<NodeVars> {
        let grid = patches
            .grid
            .ok_or_else(|| Error::Argument("downsample needs a patch grid".into()))?;
        let pooled = tape.window_mean_pool(patches.features, grid)?;
        let proj = self.downsamplers[boundary].apply(tape, store, pooled)?;
        Ok(NodeVars {
            features: proj,
            kind: NodeKind::Patch,
            grid: Some((grid.0 / 2, grid.1 / 2)),
        })
    }

    pub fn forward(&self, tape: &mut Tape, image: &Tensor, capture: bool) -> Result<ForwardVars> {
        self.forward_with(&self.params, tape, image, capture)
    }

    /// `forward` reading parameter values from `store`, which must share this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        image: &Tensor,
        capture: bool,
    ) -> Result<ForwardVars> {
        let mut patches = self.patchify_embed_with(store, tape, image)?;
        let mut labels = NodeVars {
            features: tape.param(store, self.label_embed),
            kind: NodeKind::Label,
            grid: None,
        };
        let mut snapshots = Vec::new();
        let mut snap = |tape: &Tape, kind, stage, index, graph, src_grid, input: Var, output: Var| {
            if capture {
                snapshots.push(ModuleSnapshot {
                    kind,
                    stage,
                    index,
                    graph,
                    src_grid,
                    input: tape.value(input).clone(),
                    output: tape.value(output).clone(),
                });
            }
        };

        for (s, stage) in self.stages.iter().enumerate() {
            let grid = patches.grid.expect("patch grid");
            for (m, p) in stage.patch.iter().enumerate() {
                let (next, graph) = group_kgcn_forward(tape, store, &patches, &patches, p)?;
                snap(tape, ModuleKind::Patch, s, m, graph, grid, patches.features, next.features);
                patches = next;
            }
            for (m, p) in stage.cross.iter().enumerate() {
                let (next, graph) = cross_level_update(tape, store, &labels, &patches, p)?;
                snap(tape, ModuleKind::Cross, s, m, graph, grid, labels.features, next.features);
                labels = next;
            }
            if s + 1 < self.stages.len() {
                patches = self.downsample_with(store, tape, s, &patches)?;
                labels.features = self.label_projectors[s].apply(tape, store, labels.features)?;
            }
        }

        let pooled = tape.mean_pool_rows(patches.features)?;
        let lp = self.head_patch.apply(tape, store, pooled)?;
        let logits_patch = tape.reshape(lp, &[self.config.num_classes])?;
        let (hw, hb) = (tape.param(store, self.head_label_w), tape.param(store, self.head_label_b));
        let logits_label = tape.row_dot(labels.features, hw, hb)?;
        let logits = tape.add(logits_patch, logits_label)?;
        let scores = tape.sigmoid(logits);
        Ok(ForwardVars {
            logits_patch,
            logits_label,
            logits,
            scores,
            snapshots,
        })
    }

    /// Forward pass without gradient bookkeeping.
    pub fn trace(&self, image: &Tensor, capture: bool) -> Result<ForwardTrace> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, image, capture)?;
        Ok(ForwardTrace {
            logits_patch: tape.value(out.logits_patch).clone(),
            logits_label: tape.value(out.logits_label).clone(),
            scores: tape.value(out.scores).clone(),
            snapshots: out.snapshots,
        })
    }
}

impl MultiLabelNet for GkgModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        Ok(self.forward(tape, image, false)?.logits)
    }
}

/// Rearranges an `[H, W, ch]` image into `[(H/P)*(W/P), P*P*ch]` patch rows,
/// patches in row-major grid order, each flattened as (row, col, channel).
pub fn patchify(image: &Tensor, p: usize) -> Result<(Tensor, (usize, usize))> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("patchify", shape, &[0, 0, 0]));
    }
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Argument(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let data = image.data();
    let mut out = Vec::with_capacity(h * w * ch);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let start = ((py * p + dy) * w + px * p) * ch;
                out.extend_from_slice(&data[start..start + p * ch]);
            }
        }
    }
    Ok((Tensor::new(&[gh * gw, p * p * ch], out)?, (gh, gw)))
}

/// A single affine layer over the flattened image; the reference baseline.
#[derive(Clone, Debug)]
pub struct LinearBaseline {
    pub params: ParamStore,
    input_shape: Vec<usize>,
    num_classes: usize,
    layer: Affine,
}

impl LinearBaseline {
    pub fn new(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let d: usize = input_shape.iter().product();
        let mut params = ParamStore::new(seed);
        let layer = Affine::new(&mut params, "linear", d, num_classes)?;
        Ok(Self {
            params,
            input_shape: input_shape.to_vec(),
            num_classes,
            layer,
        })
    }
}

impl MultiLabelNet for LinearBaseline {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::shape("baseline input", image.shape(), &self.input_shape));
        }
        let flat = image.clone().reshape(&[1, image.numel()])?;
        let x = tape.input(flat);
        let y = self.layer.apply(tape, &self.params, x)?;
        tape.reshape(y, &[self.num_classes])
    }
}
