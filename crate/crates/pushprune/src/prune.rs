//! Structural pruning: turn per-channel utility scores into keep/drop
//! masks, then rebuild a genuinely smaller network — dropping filter rows,
//! the dependent input depths of every downstream consumer, spliced concat
//! ranges and batchnorm statistic rows, while copying every surviving
//! weight unchanged.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::deconv::UtilityScores;
use crate::error::{Error, Result};
use crate::nn::{
    flop_count, param_count, LayerKind, LayerParams, LayerSpec, ModuleSpec, Network, NetworkSpec,
};
use crate::tensor::Tensor;

/// Pseudo-producer id for network input channels (never prunable).
const INPUT_PRODUCER: &str = "~input";

/// Keep/drop vectors over the output channels of every prunable producer
/// layer (trunk fc/conv; the decision layer and aux heads are never output-
/// pruned).
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub keep: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    /// All-true mask over a spec's prunable layers.
    pub fn identity(spec: &NetworkSpec) -> Self {
        let graph = ChannelGraph::build(spec).expect("valid spec");
        let keep = graph
            .prunable
            .iter()
            .map(|id| (id.clone(), vec![true; graph.out_channels[id]]))
            .collect();
        Self { keep }
    }

    pub fn kept(&self, id: &str) -> Option<usize> {
        self.keep.get(id).map(|v| v.iter().filter(|&&k| k).count())
    }

    pub fn dropped_total(&self) -> usize {
        self.keep
            .values()
            .map(|v| v.iter().filter(|&&k| !k).count())
            .sum()
    }
}

/// Which weight layer consumes which upstream channels, in traversal order.
#[derive(Debug)]
struct ChannelGraph {
    /// Prunable producer ids in traversal order (trunk fc/conv, decision
    /// excluded).
    prunable: Vec<String>,
    /// Output channel counts of every producer (incl. decision / aux fc).
    out_channels: BTreeMap<String, usize>,
    /// Input provenance of every weight layer: (consumer id, kind info,
    /// provenance of each input channel).
    consumers: Vec<ConsumerRecord>,
    /// Batchnorm id → provenance of its channels.
    bn_assoc: Vec<(String, Vec<(String, usize)>)>,
}

#[derive(Debug)]
struct ConsumerRecord {
    id: String,
    /// per-input-channel weight cost multiplier: out·kh·kw for conv,
    /// out for fc — with `out` resolved against the current mask for
    /// prunable consumers.
    kind: ConsumerKind,
    inputs: Vec<(String, usize)>,
    /// whether this consumer's parameters are part of the trunk count
    /// (aux-head layers are not)
    counted: bool,
}

#[derive(Debug, Clone, Copy)]
enum ConsumerKind {
    Fc,
    Conv { kh: usize, kw: usize },
}

type Flow = Vec<(String, usize)>;

impl ChannelGraph {
    fn build(spec: &NetworkSpec) -> Result<Self> {
        let mut graph = ChannelGraph {
            prunable: Vec::new(),
            out_channels: BTreeMap::new(),
            consumers: Vec::new(),
            bn_assoc: Vec::new(),
        };
        let input_c = match spec.input_shape.as_slice() {
            [d] => *d,
            [c, _, _] => *c,
            other => {
                return Err(Error::Validation(vec![format!("bad input shape {other:?}")]))
            }
        };
        let mut flow: Flow = (0..input_c).map(|i| (INPUT_PRODUCER.to_string(), i)).collect();

        let mut module_flows: Vec<Vec<Flow>> = Vec::new();
        graph.walk_chain(&spec.stem, &mut flow, true)?;
        for stage in &spec.stages {
            let mut outs = Vec::new();
            for module in &stage.modules {
                match module {
                    ModuleSpec::Chain(layers) => graph.walk_chain(layers, &mut flow, true)?,
                    ModuleSpec::Branched { branches, .. } => {
                        let module_in = flow.clone();
                        let mut joined: Flow = Vec::new();
                        for branch in branches {
                            let mut bflow = module_in.clone();
                            graph.walk_chain(branch, &mut bflow, true)?;
                            joined.extend(bflow);
                        }
                        flow = joined;
                    }
                }
                outs.push(flow.clone());
            }
            module_flows.push(outs);
            graph.walk_chain(&stage.transition, &mut flow, true)?;
        }
        graph.walk_chain(&spec.head, &mut flow, true)?;

        // decision consumes the final latent; its outputs are the classes
        graph.consumers.push(ConsumerRecord {
            id: spec.decision.id.clone(),
            kind: ConsumerKind::Fc,
            inputs: flow.clone(),
            counted: true,
        });
        graph
            .out_channels
            .insert(spec.decision.id.clone(), spec.decision.out_channels().unwrap_or(0).max(
                match spec.decision.kind {
                    LayerKind::Decision { classes, .. } => classes,
                    _ => 0,
                },
            ));

        // aux heads consume module outputs; their layers are not prunable
        for aux in &spec.aux_heads {
            let tap = module_flows
                .get(aux.stage)
                .and_then(|m| m.get(aux.module))
                .ok_or_else(|| {
                    Error::Validation(vec![format!(
                        "aux head attaches to missing module ({}, {})",
                        aux.stage, aux.module
                    )])
                })?;
            let mut aflow = tap.clone();
            graph.walk_chain(&aux.layers, &mut aflow, false)?;
            graph.consumers.push(ConsumerRecord {
                id: aux.decision.id.clone(),
                kind: ConsumerKind::Fc,
                inputs: aflow,
                counted: false,
            });
        }
        Ok(graph)
    }

    fn walk_chain(&mut self, layers: &[LayerSpec], flow: &mut Flow, prunable: bool) -> Result<()> {
        for layer in layers {
            match &layer.kind {
                LayerKind::Fc { out_dim, .. } => {
                    self.consumers.push(ConsumerRecord {
                        id: layer.id.clone(),
                        kind: ConsumerKind::Fc,
                        inputs: flow.clone(),
                        counted: prunable,
                    });
                    self.out_channels.insert(layer.id.clone(), *out_dim);
                    if prunable {
                        self.prunable.push(layer.id.clone());
                    }
                    *flow = (0..*out_dim).map(|i| (layer.id.clone(), i)).collect();
                }
                LayerKind::Conv { out_ch, kh, kw, .. } => {
                    self.consumers.push(ConsumerRecord {
                        id: layer.id.clone(),
                        kind: ConsumerKind::Conv { kh: *kh, kw: *kw },
                        inputs: flow.clone(),
                        counted: prunable,
                    });
                    self.out_channels.insert(layer.id.clone(), *out_ch);
                    if prunable {
                        self.prunable.push(layer.id.clone());
                    }
                    *flow = (0..*out_ch).map(|i| (layer.id.clone(), i)).collect();
                }
                LayerKind::BatchNorm { .. } => {
                    self.bn_assoc.push((layer.id.clone(), flow.clone()));
                }
                LayerKind::Decision { classes, .. } => {
                    // only reachable for aux decisions via walk_chain(false)
                    self.consumers.push(ConsumerRecord {
                        id: layer.id.clone(),
                        kind: ConsumerKind::Fc,
                        inputs: flow.clone(),
                        counted: false,
                    });
                    self.out_channels.insert(layer.id.clone(), *classes);
                    *flow = (0..*classes).map(|i| (layer.id.clone(), i)).collect();
                }
                LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } => {}
                LayerKind::Concat => {
                    return Err(Error::Validation(vec![
                        "concat encountered in plain chain walk".into()
                    ]))
                }
            }
        }
        Ok(())
    }
}

fn is_kept(mask: &PruneMask, producer: &str, chan: usize) -> bool {
    match mask.keep.get(producer) {
        Some(keep) => keep[chan],
        None => true, // input / aux / decision channels are always kept
    }
}

/// Parameters removed by dropping one more output channel of `layer`,
/// given the current mask state.
fn marginal_cost(graph: &ChannelGraph, mask: &PruneMask, layer: &str) -> usize {
    let mut cost = 0usize;
    // own row: kept inputs (+1 bias); kernel area for conv
    for rec in &graph.consumers {
        if rec.id == layer {
            let kept_in = rec
                .inputs
                .iter()
                .filter(|(p, c)| is_kept(mask, p, *c))
                .count();
            cost += match rec.kind {
                ConsumerKind::Fc => kept_in + 1,
                ConsumerKind::Conv { kh, kw } => kept_in * kh * kw + 1,
            };
        }
    }
    // batchnorm rows tied to this producer's channels
    for (_, prov) in &graph.bn_assoc {
        if prov.iter().any(|(p, _)| p == layer) {
            cost += 2;
        }
    }
    // downstream input depths
    for rec in &graph.consumers {
        if rec.counted && rec.inputs.iter().any(|(p, _)| p == layer) {
            let out_kept = mask
                .keep
                .get(&rec.id)
                .map(|k| k.iter().filter(|&&b| b).count())
                .unwrap_or_else(|| graph.out_channels.get(&rec.id).copied().unwrap_or(0));
            cost += match rec.kind {
                ConsumerKind::Fc => out_kept,
                ConsumerKind::Conv { kh, kw } => out_kept * kh * kw,
            };
        }
    }
    cost
}

/// Drop the globally lowest-scoring channels until this iteration's
/// parameter reduction reaches `step_fraction` of the current count
/// (±1 channel granularity), respecting a one-channel floor per layer.
/// Ties break by (layer traversal index, channel index) ascending.
pub fn select_prune_set(
    net: &Network,
    scores: &UtilityScores,
    step_fraction: f64,
) -> Result<PruneMask> {
    if !(step_fraction > 0.0 && step_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "step_fraction must be in (0,1), got {step_fraction}"
        )));
    }
    let graph = ChannelGraph::build(&net.spec)?;
    let mut mask = PruneMask::identity(&net.spec);

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new(); // (score, layer_idx, chan)
    for (li, id) in graph.prunable.iter().enumerate() {
        let layer_scores = scores.by_layer.get(id).ok_or_else(|| {
            Error::Contract(format!("no utility scores for prunable layer {id}"))
        })?;
        if layer_scores.len() != graph.out_channels[id] {
            return Err(Error::Contract(format!(
                "scores for {id} cover {} channels, layer has {}",
                layer_scores.len(),
                graph.out_channels[id]
            )));
        }
        for (c, &s) in layer_scores.iter().enumerate() {
            candidates.push((s, li, c));
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let target = (step_fraction * param_count(&net.spec) as f64).round() as usize;
    let mut removed = 0usize;
    let mut infeasible = true;
    for &(_, li, chan) in &candidates {
        if removed >= target {
            infeasible = false;
            break;
        }
        let id = &graph.prunable[li];
        let keep = mask.keep.get_mut(id).expect("mask covers prunable layers");
        let kept_count = keep.iter().filter(|&&k| k).count();
        if kept_count <= 1 {
            continue; // one-channel floor
        }
        removed += marginal_cost(&graph, &mask, id);
        mask.keep.get_mut(id).expect("prunable")[chan] = false;
    }
    if removed >= target {
        infeasible = false;
    }
    if infeasible {
        log::warn!(
            "prune step infeasible: one-channel floors bind at {removed} of {target} parameters; returning maximal feasible mask"
        );
    }
    Ok(mask)
}

/// Per-layer row of a prune report.
#[derive(Clone, Debug, Serialize)]
pub struct LayerPruneRow {
    pub id: String,
    pub kept: usize,
    pub dropped: usize,
}

/// Bookkeeping emitted by [`apply_prune`].
#[derive(Clone, Debug, Serialize)]
pub struct PruneReport {
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: usize,
    pub flops_after: usize,
    pub layers: Vec<LayerPruneRow>,
}

struct Rebuilder<'a> {
    net: &'a Network,
    graph: &'a ChannelGraph,
    mask: &'a PruneMask,
    params: std::collections::HashMap<String, LayerParams>,
}

impl<'a> Rebuilder<'a> {
    fn inputs_of(&self, id: &str) -> Result<&Vec<(String, usize)>> {
        self.graph
            .consumers
            .iter()
            .find(|r| r.id == id)
            .map(|r| &r.inputs)
            .ok_or_else(|| Error::Contract(format!("no channel record for {id}")))
    }

    fn kept_inputs(&self, id: &str) -> Result<Vec<usize>> {
        Ok(self
            .inputs_of(id)?
            .iter()
            .enumerate()
            .filter(|(_, (p, c))| is_kept(self.mask, p, *c))
            .map(|(i, _)| i)
            .collect())
    }

    fn kept_outputs(&self, id: &str, out: usize) -> Vec<usize> {
        match self.mask.keep.get(id) {
            Some(keep) => (0..out).filter(|&c| keep[c]).collect(),
            None => (0..out).collect(),
        }
    }

    /// Rebuild one layer's spec (and stash its spliced parameters).
    fn rebuild_layer(&mut self, layer: &LayerSpec) -> Result<LayerSpec> {
        let id = layer.id.clone();
        let kind = match &layer.kind {
            LayerKind::Fc { out_dim, .. } => {
                let rows = self.kept_inputs(&id)?;
                let cols = self.kept_outputs(&id, *out_dim);
                let Some(LayerParams::Fc { w, b }) = self.net.params(&id) else {
                    return Err(Error::Contract(format!("missing params for {id}")));
                };
                let new_w = gather_2d(w, &rows, &cols)?;
                let new_b = gather_1d(b, &cols)?;
                self.params.insert(id.clone(), LayerParams::Fc { w: new_w, b: new_b });
                LayerKind::Fc { in_dim: rows.len(), out_dim: cols.len() }
            }
            LayerKind::Decision { classes, .. } => {
                let rows = self.kept_inputs(&id)?;
                let Some(LayerParams::Fc { w, b }) = self.net.params(&id) else {
                    return Err(Error::Contract(format!("missing params for {id}")));
                };
                let cols: Vec<usize> = (0..*classes).collect();
                let new_w = gather_2d(w, &rows, &cols)?;
                self.params
                    .insert(id.clone(), LayerParams::Fc { w: new_w, b: b.clone() });
                LayerKind::Decision { in_dim: rows.len(), classes: *classes }
            }
            LayerKind::Conv { out_ch, kh, kw, stride, pad, .. } => {
                let in_keep = self.kept_inputs(&id)?;
                let out_keep = self.kept_outputs(&id, *out_ch);
                let Some(LayerParams::Conv { w, b }) = self.net.params(&id) else {
                    return Err(Error::Contract(format!("missing params for {id}")));
                };
                let new_w = gather_conv(w, &out_keep, &in_keep)?;
                let new_b = gather_1d(b, &out_keep)?;
                self.params.insert(id.clone(), LayerParams::Conv { w: new_w, b: new_b });
                LayerKind::Conv {
                    in_ch: in_keep.len(),
                    out_ch: out_keep.len(),
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                }
            }
            LayerKind::BatchNorm { .. } => {
                let prov = self
                    .graph
                    .bn_assoc
                    .iter()
                    .find(|(bid, _)| *bid == id)
                    .map(|(_, p)| p)
                    .ok_or_else(|| Error::Contract(format!("no bn record for {id}")))?;
                let keep: Vec<usize> = prov
                    .iter()
                    .enumerate()
                    .filter(|(_, (p, c))| is_kept(self.mask, p, *c))
                    .map(|(i, _)| i)
                    .collect();
                let Some(LayerParams::BatchNorm { gamma, beta, run_mean, run_var }) =
                    self.net.params(&id)
                else {
                    return Err(Error::Contract(format!("missing params for {id}")));
                };
                self.params.insert(
                    id.clone(),
                    LayerParams::BatchNorm {
                        gamma: gather_1d(gamma, &keep)?,
                        beta: gather_1d(beta, &keep)?,
                        run_mean: keep.iter().map(|&i| run_mean[i]).collect(),
                        run_var: keep.iter().map(|&i| run_var[i]).collect(),
                    },
                );
                LayerKind::BatchNorm { ch: keep.len() }
            }
            passthrough => passthrough.clone(),
        };
        Ok(LayerSpec { id, kind })
    }

    fn rebuild_chain(&mut self, layers: &[LayerSpec]) -> Result<Vec<LayerSpec>> {
        layers.iter().map(|l| self.rebuild_layer(l)).collect()
    }
}

fn gather_1d(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Tensor::from_vec([idx.len()], idx.iter().map(|&i| t.data()[i]).collect())
}

/// Select rows and columns of an [r, c] matrix.
fn gather_2d(t: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &cc in cols {
            out.push(t.data()[r * c + cc]);
        }
    }
    Tensor::from_vec([rows.len(), cols.len()], out)
}

/// Select filters (axis 0) and input depths (axis 1) of [F, C, kh, kw].
fn gather_conv(t: &Tensor, f_keep: &[usize], c_keep: &[usize]) -> Result<Tensor> {
    let (c, kh, kw) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    let kk = kh * kw;
    let mut out = Vec::with_capacity(f_keep.len() * c_keep.len() * kk);
    for &f in f_keep {
        for &ci in c_keep {
            let base = (f * c + ci) * kk;
            out.extend_from_slice(&t.data()[base..base + kk]);
        }
    }
    Tensor::from_vec([f_keep.len(), c_keep.len(), kh, kw], out)
}

/// Excise dropped channels and their downstream dependencies, copying every
/// surviving weight value unchanged.
pub fn apply_prune(net: &Network, mask: &PruneMask) -> Result<(Network, PruneReport)> {
    let graph = ChannelGraph::build(&net.spec)?;
    // mask consistency
    for id in &graph.prunable {
        match mask.keep.get(id) {
            None => {
                return Err(Error::Validation(vec![format!("mask missing layer {id}")]))
            }
            Some(keep) => {
                if keep.len() != graph.out_channels[id] {
                    return Err(Error::Validation(vec![format!(
                        "mask for {id} has {} entries, layer has {} channels",
                        keep.len(),
                        graph.out_channels[id]
                    )]));
                }
                if !keep.iter().any(|&k| k) {
                    return Err(Error::Validation(vec![format!(
                        "mask drops every channel of {id}"
                    )]));
                }
            }
        }
    }
    for id in mask.keep.keys() {
        if !graph.prunable.contains(id) {
            return Err(Error::Validation(vec![format!(
                "mask names non-prunable layer {id}"
            )]));
        }
    }

    let mut rb = Rebuilder { net, graph: &graph, mask, params: Default::default() };
    let spec = &net.spec;
    let new_stem = rb.rebuild_chain(&spec.stem)?;
    let mut new_stages = Vec::new();
    for stage in &spec.stages {
        let mut modules = Vec::new();
        for module in &stage.modules {
            modules.push(match module {
                ModuleSpec::Chain(layers) => ModuleSpec::Chain(rb.rebuild_chain(layers)?),
                ModuleSpec::Branched { branches, concat } => ModuleSpec::Branched {
                    branches: branches
                        .iter()
                        .map(|b| rb.rebuild_chain(b))
                        .collect::<Result<_>>()?,
                    concat: concat.clone(),
                },
            });
        }
        new_stages.push(crate::nn::StageSpec {
            modules,
            transition: rb.rebuild_chain(&stage.transition)?,
        });
    }
    let new_head = rb.rebuild_chain(&spec.head)?;
    let mut new_aux = Vec::new();
    for aux in &spec.aux_heads {
        new_aux.push(crate::nn::AuxHeadSpec {
            stage: aux.stage,
            module: aux.module,
            layers: rb.rebuild_chain(&aux.layers)?,
            decision: rb.rebuild_layer(&aux.decision)?,
            loss_weight: aux.loss_weight,
        });
    }
    let new_decision = rb.rebuild_layer(&spec.decision)?;

    let new_spec = NetworkSpec {
        input_shape: spec.input_shape.clone(),
        stem: new_stem,
        stages: new_stages,
        head: new_head,
        decision: new_decision,
        aux_heads: new_aux,
    };

    let report = PruneReport {
        params_before: param_count(spec),
        params_after: param_count(&new_spec),
        flops_before: flop_count(spec),
        flops_after: flop_count(&new_spec),
        layers: graph
            .prunable
            .iter()
            .map(|id| {
                let keep = &mask.keep[id];
                let kept = keep.iter().filter(|&&k| k).count();
                LayerPruneRow { id: id.clone(), kept, dropped: keep.len() - kept }
            })
            .collect(),
    };

    let params = rb.params;
    let new_net = Network::from_parts(new_spec, params)?;
    Ok((new_net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use crate::nn::{forward, modular_conv_classifier, BranchWidths, Mode};
    use crate::tensor::tape::Tape;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn uniform_scores(spec: &NetworkSpec, value: f64) -> UtilityScores {
        let graph = ChannelGraph::build(spec).unwrap();
        let by_layer = graph
            .prunable
            .iter()
            .map(|id| (id.clone(), vec![value; graph.out_channels[id]]))
            .collect();
        UtilityScores { by_layer }
    }

    fn params_identical(a: &Network, b: &Network) -> bool {
        let mut same = true;
        a.for_each_param(|id, slot, t| {
            let mut found = false;
            b.for_each_param(|id2, slot2, t2| {
                if id == id2 && slot == slot2 {
                    found = true;
                    if t.data() != t2.data() || t.shape() != t2.shape() {
                        same = false;
                    }
                }
            });
            if !found {
                same = false;
            }
        });
        same
    }

    #[test]
    fn identity_mask_round_trips_bitwise() {
        let spec = NetworkSpec::fc_classifier(6, &[5, 4], 3);
        let net = Network::build(spec.clone(), 7).unwrap();
        let mask = PruneMask::identity(&spec);
        let (pruned, report) = apply_prune(&net, &mask).unwrap();
        assert_eq!(report.params_before, report.params_after);
        assert!(params_identical(&net, &pruned));
    }

    #[test]
    fn equal_scores_drop_lowest_layer_and_channel_first() {
        let spec = NetworkSpec::fc_classifier(6, &[5, 4], 3);
        let net = Network::build(spec.clone(), 1).unwrap();
        let scores = uniform_scores(&spec, 1.0);
        // small step: exactly one channel should fall, the first channel of
        // the first layer in traversal order
        let mask = select_prune_set(&net, &scores, 0.02).unwrap();
        assert_eq!(mask.kept("s0.m0.fc0"), Some(4));
        assert!(!mask.keep["s0.m0.fc0"][0]);
        assert_eq!(mask.kept("s0.m0.fc1"), Some(4));
    }

    #[test]
    fn selection_is_deterministic() {
        let spec = NetworkSpec::fc_classifier(8, &[6, 6], 3);
        let net = Network::build(spec.clone(), 2).unwrap();
        let mut seed = 5;
        let graph_scores = {
            let mut s = uniform_scores(&spec, 0.0);
            for v in s.by_layer.values_mut() {
                for x in v.iter_mut() {
                    *x = lcg(&mut seed).abs();
                }
            }
            s
        };
        let m1 = select_prune_set(&net, &graph_scores, 0.3).unwrap();
        let m2 = select_prune_set(&net, &graph_scores, 0.3).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn removed_estimate_matches_closed_form_recount() {
        let spec = NetworkSpec::fc_classifier(10, &[8, 7, 6], 4);
        let net = Network::build(spec.clone(), 3).unwrap();
        let mut seed = 11;
        let mut scores = uniform_scores(&spec, 0.0);
        for v in scores.by_layer.values_mut() {
            for x in v.iter_mut() {
                *x = lcg(&mut seed).abs();
            }
        }
        let before = param_count(&spec);
        let mask = select_prune_set(&net, &scores, 0.25).unwrap();
        let (pruned, report) = apply_prune(&net, &mask).unwrap();
        assert_eq!(report.params_before, before);
        assert_eq!(report.params_after, param_count(&pruned.spec));
        // the step lands within one channel's params of the target
        let removed = before - report.params_after;
        let target = (0.25 * before as f64).round() as usize;
        assert!(removed >= target, "removed {removed} < target {target}");
        // overshoot bounded by the largest single marginal cost: generously
        // bound it by the largest layer's row size
        assert!(removed - target < 2 * 11 * 8);
    }

    #[test]
    fn floor_binds_to_maximal_feasible_mask() {
        let spec = NetworkSpec::fc_classifier(4, &[3, 3], 2);
        let net = Network::build(spec.clone(), 4).unwrap();
        let scores = uniform_scores(&spec, 1.0);
        // impossible target: 99% of parameters
        let mask = select_prune_set(&net, &scores, 0.99).unwrap();
        for id in ["s0.m0.fc0", "s0.m0.fc1"] {
            assert_eq!(mask.kept(id), Some(1), "floor violated for {id}");
        }
        let (pruned, _) = apply_prune(&net, &mask).unwrap();
        pruned.spec.validate().unwrap();
    }

    #[test]
    fn pruning_zero_outgoing_zero_score_channels_preserves_logits() {
        let spec = NetworkSpec::fc_classifier(5, &[4, 3], 2);
        let mut net = Network::build(spec.clone(), 9).unwrap();
        // channel 2 of fc0: zero outgoing weights in fc1
        if let Some(LayerParams::Fc { w, .. }) = net.params_mut("s0.m0.fc1") {
            w.update_in_place(|d| {
                let out = 3;
                for j in 0..out {
                    d[2 * out + j] = 0.0; // row 2 = input channel 2
                }
            });
        }
        let mut mask = PruneMask::identity(&spec);
        mask.keep.get_mut("s0.m0.fc0").unwrap()[2] = false;
        let (pruned, _) = apply_prune(&net, &mask).unwrap();

        let mut seed = 13;
        let batch = crate::tensor::Tensor::from_vec(
            [6, 5],
            (0..30).map(|_| lcg(&mut seed)).collect(),
        )
        .unwrap();
        let mut t1 = Tape::new();
        let r1 = forward(&mut net, &mut t1, &batch, Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let mut pruned = pruned;
        let r2 = forward(&mut pruned, &mut t2, &batch, Mode::Eval).unwrap();
        let d = t1.value(r1.logits).max_abs_diff(t2.value(r2.logits));
        assert!(d <= 1e-6, "logits moved by {d}");
    }

    #[test]
    fn composed_masks_equal_sequential_pruning() {
        let spec = NetworkSpec::fc_classifier(6, &[6, 5], 3);
        let net = Network::build(spec.clone(), 21).unwrap();

        let mut m1 = PruneMask::identity(&spec);
        m1.keep.get_mut("s0.m0.fc0").unwrap()[1] = false;
        m1.keep.get_mut("s0.m0.fc1").unwrap()[4] = false;
        let (step1, _) = apply_prune(&net, &m1).unwrap();

        // second mask on the smaller net: drop (new) channel 3 of fc0,
        // which is original channel 4
        let mut m2 = PruneMask::identity(&step1.spec);
        m2.keep.get_mut("s0.m0.fc0").unwrap()[3] = false;
        let (sequential, _) = apply_prune(&step1, &m2).unwrap();

        // composed mask on the original net
        let mut mc = PruneMask::identity(&spec);
        mc.keep.get_mut("s0.m0.fc0").unwrap()[1] = false;
        mc.keep.get_mut("s0.m0.fc0").unwrap()[4] = false;
        mc.keep.get_mut("s0.m0.fc1").unwrap()[4] = false;
        let (composed, _) = apply_prune(&net, &mc).unwrap();

        assert_eq!(sequential.spec, composed.spec);
        assert!(params_identical(&sequential, &composed));
    }

    #[test]
    fn branched_net_prunes_with_concat_splicing() {
        let widths = BranchWidths {
            b1x1: 4,
            b3x3_reduce: 3,
            b3x3: 6,
            bdbl_reduce: 2,
            bdbl: 4,
            bpool_proj: 2,
        };
        let spec = modular_conv_classifier((1, 8, 8), 4, &[widths], &[1], 3);
        let net = Network::build(spec.clone(), 31).unwrap();
        let mut mask = PruneMask::identity(&spec);
        // drop one channel from the 1×1 branch and two from the 3×3 branch
        mask.keep.get_mut("s0.m0.b0.conv0").unwrap()[0] = false;
        mask.keep.get_mut("s0.m0.b1.conv1").unwrap()[1] = false;
        mask.keep.get_mut("s0.m0.b1.conv1").unwrap()[3] = false;
        let (pruned, report) = apply_prune(&net, &mask).unwrap();
        pruned.spec.validate().unwrap();
        assert_eq!(pruned.spec.latent_dim().unwrap(), 16 - 3);
        assert!(report.params_after < report.params_before);

        // the pruned net must forward cleanly
        let mut seed = 3;
        let batch = crate::tensor::Tensor::from_vec(
            [2, 1, 8, 8],
            (0..128).map(|_| lcg(&mut seed)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut pruned = pruned;
        let rec = forward(&mut pruned, &mut tape, &batch, Mode::Eval).unwrap();
        assert_eq!(tape.value(rec.logits).shape(), &[2, 3]);
    }

    #[test]
    fn planted_signal_channel_survives_selection() {
        // one fc channel carries all utility: it must survive any feasible
        // step fraction
        let spec = NetworkSpec::fc_classifier(4, &[5], 2);
        let net = Network::build(spec.clone(), 41).unwrap();
        let mut scores = uniform_scores(&spec, 0.0);
        if let Some(v) = scores.by_layer.get_mut("s0.m0.fc0") {
            v[3] = 10.0; // the signal channel
            v[0] = 0.001;
            v[1] = 0.002;
            v[2] = 0.003;
            v[4] = 0.004;
        }
        for frac in [0.2, 0.5, 0.8] {
            let mask = select_prune_set(&net, &scores, frac).unwrap();
            assert!(mask.keep["s0.m0.fc0"][3], "signal channel dropped at {frac}");
        }
    }

    #[test]
    fn inconsistent_mask_is_validation_error() {
        let spec = NetworkSpec::fc_classifier(4, &[3], 2);
        let net = Network::build(spec.clone(), 5).unwrap();
        let mut mask = PruneMask::identity(&spec);
        mask.keep.get_mut("s0.m0.fc0").unwrap().pop();
        assert!(matches!(apply_prune(&net, &mask), Err(Error::Validation(_))));

        let mut all_dropped = PruneMask::identity(&spec);
        for k in all_dropped.keep.get_mut("s0.m0.fc0").unwrap().iter_mut() {
            *k = false;
        }
        assert!(matches!(apply_prune(&net, &all_dropped), Err(Error::Validation(_))));
    }
}
