//! Layer and network-graph abstractions: stem → stages of modules →
//! decision layer, where a module is either a plain chain or a branched
//! (concat-joined) sub-network.

mod build;
mod count;
mod forward;
mod serialize;

pub use build::{LayerParams, Network};
pub use count::{flop_count, layer_flops_map, layer_param_count, param_count};
pub use forward::{classification_loss, forward, ForwardRecord, Mode, ParamVars, BN_EPS, BN_MOMENTUM};
pub use serialize::{parse_netspec, write_netspec};

use crate::error::{Error, Result};

/// What a single layer does. Extents are the layer's own view; global
/// consistency is checked by [`NetworkSpec::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Fc { in_dim: usize, out_dim: usize },
    Conv { in_ch: usize, out_ch: usize, kh: usize, kw: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { k: usize, stride: usize, pad: usize },
    AvgPool { k: usize, stride: usize, pad: usize },
    BatchNorm { ch: usize },
    /// Joins the branch outputs of a branched module along channels.
    Concat,
    /// The single decision layer: a linear map to class logits.
    Decision { in_dim: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self { id: id.into(), kind }
    }

    /// Output channel count when this layer owns prunable channels.
    pub fn out_channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Fc { out_dim, .. } => Some(out_dim),
            LayerKind::Conv { out_ch, .. } => Some(out_ch),
            _ => None,
        }
    }
}

/// A module is the growing unit: a chain, or parallel branches whose
/// outputs are concatenated.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleSpec {
    Chain(Vec<LayerSpec>),
    Branched { branches: Vec<Vec<LayerSpec>>, concat: LayerSpec },
}

impl ModuleSpec {
    pub fn layers(&self) -> Vec<&LayerSpec> {
        match self {
            ModuleSpec::Chain(layers) => layers.iter().collect(),
            ModuleSpec::Branched { branches, concat } => {
                let mut v: Vec<&LayerSpec> = branches.iter().flatten().collect();
                v.push(concat);
                v
            }
        }
    }
}

/// Modules sharing one output spatial extent, with the pooling (or other)
/// transition applied after the stage.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StageSpec {
    pub modules: Vec<ModuleSpec>,
    pub transition: Vec<LayerSpec>,
}

/// An auxiliary classifier head tapped off a module output; used as a
/// training aid for deep grown nets and stripped at evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxHeadSpec {
    pub stage: usize,
    pub module: usize,
    pub layers: Vec<LayerSpec>,
    pub decision: LayerSpec,
    pub loss_weight: f64,
}

/// Full structural description of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Shape of one input sample: `[d]` for vector inputs, `[C,H,W]` for
    /// images.
    pub input_shape: Vec<usize>,
    pub stem: Vec<LayerSpec>,
    pub stages: Vec<StageSpec>,
    /// Layers between the last stage and the decision layer (global
    /// pooling for conv nets); empty for plain FC nets.
    pub head: Vec<LayerSpec>,
    pub decision: LayerSpec,
    pub aux_heads: Vec<AuxHeadSpec>,
}

/// Data shape flowing between layers.
#[derive(Clone, Debug, PartialEq)]
pub enum DataShape {
    Vector(usize),
    Image { c: usize, h: usize, w: usize },
}

impl DataShape {
    pub fn channels(&self) -> usize {
        match *self {
            DataShape::Vector(d) => d,
            DataShape::Image { c, .. } => c,
        }
    }

    fn from_input(shape: &[usize]) -> Result<Self> {
        match shape {
            [d] => Ok(DataShape::Vector(*d)),
            [c, h, w] => Ok(DataShape::Image { c: *c, h: *h, w: *w }),
            other => Err(Error::Validation(vec![format!(
                "input shape must be [d] or [C,H,W], got {other:?}"
            )])),
        }
    }
}

fn pool_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    crate::tensor::tape::out_extent(extent, k, stride, pad).filter(|&e| e > 0)
}

/// Output shape of one layer given its input shape.
pub fn layer_out_shape(kind: &LayerKind, input: &DataShape) -> std::result::Result<DataShape, String> {
    match kind {
        LayerKind::Fc { in_dim, out_dim } => {
            let d = match *input {
                DataShape::Vector(d) => d,
                DataShape::Image { c, h: 1, w: 1 } => c,
                DataShape::Image { c, h, w } => {
                    return Err(format!(
                        "fc layer fed non-flat image {c}×{h}×{w}; pool to 1×1 first"
                    ))
                }
            };
            if d != *in_dim {
                return Err(format!("fc expects {in_dim} inputs, gets {d}"));
            }
            Ok(DataShape::Vector(*out_dim))
        }
        LayerKind::Decision { in_dim, classes } => {
            let d = match *input {
                DataShape::Vector(d) => d,
                DataShape::Image { c, h: 1, w: 1 } => c,
                DataShape::Image { c, h, w } => {
                    return Err(format!(
                        "decision layer fed non-flat image {c}×{h}×{w}; pool to 1×1 first"
                    ))
                }
            };
            if d != *in_dim {
                return Err(format!("decision expects {in_dim} inputs, gets {d}"));
            }
            Ok(DataShape::Vector(*classes))
        }
        LayerKind::Conv { in_ch, out_ch, kh, kw, stride, pad } => match *input {
            DataShape::Image { c, h, w } => {
                if c != *in_ch {
                    return Err(format!("conv expects {in_ch} channels, gets {c}"));
                }
                let oh = pool_out(h, *kh, *stride, *pad)
                    .ok_or_else(|| format!("conv output height nonpositive from {h}"))?;
                let ow = pool_out(w, *kw, *stride, *pad)
                    .ok_or_else(|| format!("conv output width nonpositive from {w}"))?;
                Ok(DataShape::Image { c: *out_ch, h: oh, w: ow })
            }
            DataShape::Vector(_) => Err("conv layer fed vector data".into()),
        },
        LayerKind::Relu => Ok(input.clone()),
        LayerKind::MaxPool { k, stride, pad } | LayerKind::AvgPool { k, stride, pad } => {
            match *input {
                DataShape::Image { c, h, w } => {
                    let oh = pool_out(h, *k, *stride, *pad)
                        .ok_or_else(|| format!("pool output height nonpositive from {h}"))?;
                    let ow = pool_out(w, *k, *stride, *pad)
                        .ok_or_else(|| format!("pool output width nonpositive from {w}"))?;
                    Ok(DataShape::Image { c, h: oh, w: ow })
                }
                DataShape::Vector(_) => Err("pool layer fed vector data".into()),
            }
        }
        LayerKind::BatchNorm { ch } => {
            if input.channels() != *ch {
                return Err(format!("batchnorm over {ch} channels, gets {}", input.channels()));
            }
            Ok(input.clone())
        }
        LayerKind::Concat => Err("concat shape is computed at the module level".into()),
    }
}

fn chain_out_shape(
    layers: &[LayerSpec],
    mut shape: DataShape,
    problems: &mut Vec<String>,
) -> DataShape {
    for layer in layers {
        match layer_out_shape(&layer.kind, &shape) {
            Ok(next) => shape = next,
            Err(msg) => {
                problems.push(format!("{}: {msg}", layer.id));
                return shape;
            }
        }
    }
    shape
}

fn module_out_shape(
    module: &ModuleSpec,
    input: &DataShape,
    problems: &mut Vec<String>,
) -> DataShape {
    match module {
        ModuleSpec::Chain(layers) => chain_out_shape(layers, input.clone(), problems),
        ModuleSpec::Branched { branches, concat } => {
            let mut outs = Vec::new();
            for branch in branches {
                outs.push(chain_out_shape(branch, input.clone(), problems));
            }
            let mut spatial: Option<(usize, usize)> = None;
            let mut total_c = 0;
            for out in &outs {
                match *out {
                    DataShape::Image { c, h, w } => {
                        total_c += c;
                        match spatial {
                            None => spatial = Some((h, w)),
                            Some((sh, sw)) if sh == h && sw == w => {}
                            Some((sh, sw)) => problems.push(format!(
                                "{}: branch spatial extents disagree: {h}×{w} vs {sh}×{sw}",
                                concat.id
                            )),
                        }
                    }
                    DataShape::Vector(_) => {
                        problems.push(format!("{}: concat of vector branches unsupported", concat.id))
                    }
                }
            }
            let (h, w) = spatial.unwrap_or((1, 1));
            DataShape::Image { c: total_c, h, w }
        }
    }
}

impl NetworkSpec {
    /// All layers in canonical traversal order (stem, stages with their
    /// modules and transitions, head, aux heads, decision).
    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut v: Vec<&LayerSpec> = self.stem.iter().collect();
        for stage in &self.stages {
            for module in &stage.modules {
                v.extend(module.layers());
            }
            v.extend(stage.transition.iter());
        }
        v.extend(self.head.iter());
        for aux in &self.aux_heads {
            v.extend(aux.layers.iter());
            v.push(&aux.decision);
        }
        v.push(&self.decision);
        v
    }

    pub fn module_count(&self) -> usize {
        self.stages.iter().map(|s| s.modules.len()).sum()
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.modules.len()).collect()
    }

    pub fn classes(&self) -> usize {
        match self.decision.kind {
            LayerKind::Decision { classes, .. } => classes,
            _ => 0,
        }
    }

    /// Output shape of the main trunk just before the decision layer (the
    /// final latent space).
    pub fn latent_dim(&self) -> Result<usize> {
        match self.decision.kind {
            LayerKind::Decision { in_dim, .. } => Ok(in_dim),
            _ => Err(Error::Validation(vec!["decision layer has wrong kind".into()])),
        }
    }

    /// Checks every structural invariant and reports all violations.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();

        // unique ids
        let mut seen = std::collections::HashSet::new();
        for layer in self.layers() {
            if !seen.insert(layer.id.clone()) {
                problems.push(format!("duplicate layer id: {}", layer.id));
            }
        }

        // exactly one decision layer, and it must be of decision kind
        if !matches!(self.decision.kind, LayerKind::Decision { .. }) {
            problems.push("decision layer must have decision kind".into());
        }
        for layer in self.layers() {
            if layer.id != self.decision.id
                && !self.aux_heads.iter().any(|a| a.decision.id == layer.id)
                && matches!(layer.kind, LayerKind::Decision { .. })
            {
                problems.push(format!("extra decision layer: {}", layer.id));
            }
        }

        // shape propagation along the trunk
        match DataShape::from_input(&self.input_shape) {
            Err(e) => {
                if let Error::Validation(msgs) = e {
                    problems.extend(msgs);
                }
            }
            Ok(mut shape) => {
                shape = chain_out_shape(&self.stem, shape, &mut problems);
                for (si, stage) in self.stages.iter().enumerate() {
                    let mut spatial: Option<(usize, usize)> = None;
                    for module in &stage.modules {
                        shape = module_out_shape(module, &shape, &mut problems);
                        if let DataShape::Image { h, w, .. } = shape {
                            match spatial {
                                None => spatial = Some((h, w)),
                                Some((sh, sw)) if sh == h && sw == w => {}
                                Some((sh, sw)) => problems.push(format!(
                                    "stage {si}: module output spatial {h}×{w} differs from {sh}×{sw}"
                                )),
                            }
                        }
                    }
                    shape = chain_out_shape(&stage.transition, shape, &mut problems);
                }
                shape = chain_out_shape(&self.head, shape, &mut problems);

                // decision input must match the latent dimension
                if let Err(msg) = layer_out_shape(&self.decision.kind, &shape) {
                    problems.push(format!("{}: {msg}", self.decision.id));
                }

                // aux head attachment and shapes
                for (ai, aux) in self.aux_heads.iter().enumerate() {
                    match self.module_output_shape(aux.stage, aux.module) {
                        Some(tap) => {
                            let mut p2 = Vec::new();
                            let out = chain_out_shape(&aux.layers, tap, &mut p2);
                            problems.extend(p2.into_iter().map(|m| format!("aux {ai}: {m}")));
                            if let Err(msg) = layer_out_shape(&aux.decision.kind, &out) {
                                problems.push(format!("aux {ai} decision: {msg}"));
                            }
                        }
                        None => problems.push(format!(
                            "aux {ai} attaches to missing module ({}, {})",
                            aux.stage, aux.module
                        )),
                    }
                }
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Output shape of a specific module (None if out of range or the
    /// trunk fails shape propagation before it).
    pub fn module_output_shape(&self, stage: usize, module: usize) -> Option<DataShape> {
        let mut problems = Vec::new();
        let mut shape = DataShape::from_input(&self.input_shape).ok()?;
        shape = chain_out_shape(&self.stem, shape, &mut problems);
        for (si, st) in self.stages.iter().enumerate() {
            for (mi, m) in st.modules.iter().enumerate() {
                shape = module_out_shape(m, &shape, &mut problems);
                if si == stage && mi == module {
                    if problems.is_empty() {
                        return Some(shape);
                    }
                    return None;
                }
            }
            shape = chain_out_shape(&st.transition, shape, &mut problems);
        }
        None
    }

    // ── builders ─────────────────────────────────────────────────────

    /// Plain fully-connected classifier: ReLU after every hidden layer,
    /// ending in a linear decision layer. The last hidden width is the
    /// final latent dimension.
    pub fn fc_classifier(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        assert!(!hidden.is_empty(), "fc classifier needs at least one hidden layer");
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for (i, &width) in hidden.iter().enumerate() {
            layers.push(LayerSpec::new(
                format!("s0.m0.fc{i}"),
                LayerKind::Fc { in_dim: prev, out_dim: width },
            ));
            layers.push(LayerSpec::new(format!("s0.m0.relu{i}"), LayerKind::Relu));
            prev = width;
        }
        NetworkSpec {
            input_shape: vec![input_dim],
            stem: Vec::new(),
            stages: vec![StageSpec { modules: vec![ModuleSpec::Chain(layers)], transition: Vec::new() }],
            head: Vec::new(),
            decision: LayerSpec::new(
                "decision",
                LayerKind::Decision { in_dim: prev, classes },
            ),
            aux_heads: Vec::new(),
        }
    }

    /// Renumber module-level layer ids after structural edits so that ids
    /// stay canonical (`s<stage>.m<module>.<role>`).
    pub fn reassign_module_ids(&mut self) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (mi, module) in stage.modules.iter_mut().enumerate() {
                match module {
                    ModuleSpec::Chain(layers) => {
                        for layer in layers.iter_mut() {
                            let role = layer.id.rsplit('.').next().unwrap_or("l").to_string();
                            layer.id = format!("s{si}.m{mi}.{role}");
                        }
                    }
                    ModuleSpec::Branched { branches, concat } => {
                        for (bi, branch) in branches.iter_mut().enumerate() {
                            for (li, layer) in branch.iter_mut().enumerate() {
                                let role = layer
                                    .id
                                    .rsplit('.')
                                    .next()
                                    .map(|s| s.to_string())
                                    .unwrap_or_else(|| format!("l{li}"));
                                layer.id = format!("s{si}.m{mi}.b{bi}.{role}");
                            }
                        }
                        concat.id = format!("s{si}.m{mi}.concat");
                    }
                }
            }
            for layer in stage.transition.iter_mut() {
                let role = layer.id.rsplit('.').next().unwrap_or("t").to_string();
                layer.id = format!("s{si}.t.{role}");
            }
        }
    }
}

/// The branched module template grown by the architecture search: four
/// parallel branches (1×1 | 1×1→3×3 | 1×1→3×3→3×3 | 3×3-maxpool→1×1), each
/// conv followed by batchnorm and ReLU.
#[derive(Clone, Copy, Debug)]
pub struct BranchWidths {
    pub b1x1: usize,
    pub b3x3_reduce: usize,
    pub b3x3: usize,
    pub bdbl_reduce: usize,
    pub bdbl: usize,
    pub bpool_proj: usize,
}

impl BranchWidths {
    pub fn out_channels(&self) -> usize {
        self.b1x1 + self.b3x3 + self.bdbl + self.bpool_proj
    }
}

fn conv_bn_relu(prefix: &str, idx: usize, in_ch: usize, out_ch: usize, k: usize, pad: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(
            format!("{prefix}.conv{idx}"),
            LayerKind::Conv { in_ch, out_ch, kh: k, kw: k, stride: 1, pad },
        ),
        LayerSpec::new(format!("{prefix}.bn{idx}"), LayerKind::BatchNorm { ch: out_ch }),
        LayerSpec::new(format!("{prefix}.relu{idx}"), LayerKind::Relu),
    ]
}

/// Build one branched module from input channel count and branch widths.
pub fn branched_module(stage: usize, module: usize, in_ch: usize, widths: BranchWidths) -> ModuleSpec {
    let p = |b: usize| format!("s{stage}.m{module}.b{b}");
    let b0 = conv_bn_relu(&p(0), 0, in_ch, widths.b1x1, 1, 0);
    let mut b1 = conv_bn_relu(&p(1), 0, in_ch, widths.b3x3_reduce, 1, 0);
    b1.extend(conv_bn_relu(&p(1), 1, widths.b3x3_reduce, widths.b3x3, 3, 1));
    let mut b2 = conv_bn_relu(&p(2), 0, in_ch, widths.bdbl_reduce, 1, 0);
    b2.extend(conv_bn_relu(&p(2), 1, widths.bdbl_reduce, widths.bdbl, 3, 1));
    b2.extend(conv_bn_relu(&p(2), 2, widths.bdbl, widths.bdbl, 3, 1));
    let mut b3 = vec![LayerSpec::new(
        format!("{}.pool0", p(3)),
        LayerKind::MaxPool { k: 3, stride: 1, pad: 1 },
    )];
    b3.extend(conv_bn_relu(&p(3), 1, in_ch, widths.bpool_proj, 1, 0));
    ModuleSpec::Branched {
        branches: vec![b0, b1, b2, b3],
        concat: LayerSpec::new(format!("s{stage}.m{module}.concat"), LayerKind::Concat),
    }
}

/// Small modular conv classifier in the branched-module template, used at
/// desk scale for growing and pruning experiments. `stage_modules[i]` gives
/// the number of modules in stage `i`; all modules of a stage share the
/// same branch widths.
pub fn modular_conv_classifier(
    input: (usize, usize, usize),
    stem_ch: usize,
    stage_widths: &[BranchWidths],
    stage_modules: &[usize],
    classes: usize,
) -> NetworkSpec {
    assert_eq!(stage_widths.len(), stage_modules.len());
    let (in_c, h, _w) = input;
    let stem = conv_bn_relu("stem", 0, in_c, stem_ch, 3, 1);
    let mut stages = Vec::new();
    let mut in_ch = stem_ch;
    let mut spatial = h;
    for (si, (&widths, &n_modules)) in stage_widths.iter().zip(stage_modules).enumerate() {
        let mut modules = Vec::new();
        for mi in 0..n_modules {
            modules.push(branched_module(si, mi, in_ch, widths));
            in_ch = widths.out_channels();
        }
        let transition = if si + 1 < stage_widths.len() {
            spatial /= 2;
            vec![LayerSpec::new(
                format!("s{si}.t.pool"),
                LayerKind::MaxPool { k: 2, stride: 2, pad: 0 },
            )]
        } else {
            Vec::new()
        };
        stages.push(StageSpec { modules, transition });
    }
    let head = vec![LayerSpec::new(
        "head.gap",
        LayerKind::AvgPool { k: spatial, stride: 1, pad: 0 },
    )];
    NetworkSpec {
        input_shape: vec![in_c, h, h],
        stem,
        stages,
        head,
        decision: LayerSpec::new("decision", LayerKind::Decision { in_dim: in_ch, classes }),
        aux_heads: Vec::new(),
    }
}

/// Attach the standard pair of auxiliary heads to stage `stage` (after the
/// first module and before the last), when that stage has at least two
/// modules.
pub fn attach_aux_heads(spec: &mut NetworkSpec, stage: usize, loss_weight: f64) {
    let Some(st) = spec.stages.get(stage) else { return };
    let n = st.modules.len();
    if n < 2 {
        return;
    }
    let taps = [(0usize, "aux0"), (n - 2, "aux1")];
    for (module, name) in taps {
        let Some(DataShape::Image { c, h, w }) = spec.module_output_shape(stage, module) else {
            continue;
        };
        let classes = spec.classes();
        let fc_dim = 32;
        let layers = vec![
            LayerSpec::new(format!("{name}.gap"), LayerKind::AvgPool { k: h.min(w), stride: 1, pad: 0 }),
            LayerSpec::new(format!("{name}.fc"), LayerKind::Fc { in_dim: c, out_dim: fc_dim }),
            LayerSpec::new(format!("{name}.relu"), LayerKind::Relu),
        ];
        spec.aux_heads.push(AuxHeadSpec {
            stage,
            module,
            layers,
            decision: LayerSpec::new(
                format!("{name}.decision"),
                LayerKind::Decision { in_dim: fc_dim, classes },
            ),
            loss_weight,
        });
    }
}
