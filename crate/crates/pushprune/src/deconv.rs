//! Backward reconstruction of each layer's contribution to final
//! discriminability: starting from the masked final latent activations,
//! utility is traced layer by layer toward the input using transposed
//! filters, with ReLU gating by the forward activation pattern, pooling
//! switches, batchnorm rescaling, and branch summation at module
//! boundaries.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ForwardRecord, LayerKind, LayerParams, LayerSpec, ModuleSpec, Network};
use crate::tensor::gemm::{self, Layout};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Keep/drop decision over final-latent dimensions with the retained-power
/// fraction that produced it.
#[derive(Clone, Debug)]
pub struct FinalMask {
    pub keep: Vec<bool>,
    pub rho: f64,
}

impl FinalMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Greedily keep the highest-power dimensions until their cumulative power
/// reaches `rho` of the total. Always keeps at least one dimension; an
/// all-zero power vector keeps everything (with a warning).
pub fn final_mask(powers: &[f64], rho: f64) -> Result<FinalMask> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Contract(format!("rho must be in (0, 1], got {rho}")));
    }
    if powers.is_empty() {
        return Err(Error::Contract("final_mask over zero dimensions".into()));
    }
    let total: f64 = powers.iter().map(|p| p.max(0.0)).sum();
    if total <= 0.0 {
        log::warn!("all neuron powers are zero; keeping every dimension");
        return Ok(FinalMask { keep: vec![true; powers.len()], rho });
    }
    let mut order: Vec<usize> = (0..powers.len()).collect();
    order.sort_by(|&a, &b| powers[b].partial_cmp(&powers[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut keep = vec![false; powers.len()];
    let mut acc = 0.0;
    for &i in &order {
        keep[i] = true;
        acc += powers[i].max(0.0);
        if acc >= rho * total {
            break;
        }
    }
    Ok(FinalMask { keep, rho })
}

/// Reconstructed utility per layer output (batched), plus the utility mapped
/// all the way back to the network input.
#[derive(Debug)]
pub struct UtilityMap {
    pub per_layer: HashMap<String, Tensor>,
    pub input: Tensor,
}

impl UtilityMap {
    pub fn layer(&self, id: &str) -> Option<&Tensor> {
        self.per_layer.get(id)
    }
}

/// One deconvolution step through a single fc or conv layer: multiply by
/// the transposed weights.
pub fn unit_deconv(net: &Network, layer: &LayerSpec, utility: &Tensor) -> Result<Tensor> {
    match &layer.kind {
        LayerKind::Fc { in_dim, out_dim } | LayerKind::Decision { in_dim, classes: out_dim } => {
            let Some(LayerParams::Fc { w, .. }) = net.params(&layer.id) else {
                return Err(Error::Contract(format!("no parameters for {}", layer.id)));
            };
            if utility.rank() != 2 || utility.cols() != *out_dim {
                return Err(Error::Dimension(format!(
                    "utility shape {:?} does not match fc output {out_dim}",
                    utility.shape()
                )));
            }
            let n = utility.rows();
            // u_in = u · wᵀ  (w is [in, out])
            let mut out = vec![0.0; n * in_dim];
            gemm::dgemm(
                n,
                *out_dim,
                *in_dim,
                utility.data(),
                Layout::Normal,
                w.data(),
                Layout::Transposed,
                &mut out,
                false,
            );
            Tensor::from_vec([n, *in_dim], out)
        }
        LayerKind::Conv { in_ch, out_ch, kh, kw, stride, pad } => {
            let Some(LayerParams::Conv { w, .. }) = net.params(&layer.id) else {
                return Err(Error::Contract(format!("no parameters for {}", layer.id)));
            };
            if utility.rank() != 4 || utility.shape()[1] != *out_ch {
                return Err(Error::Dimension(format!(
                    "utility shape {:?} does not match conv output channels {out_ch}",
                    utility.shape()
                )));
            }
            // output spatial extents of the forward conv are utility's;
            // recover the input extents from them
            let (n, oh, ow) = (utility.shape()[0], utility.shape()[2], utility.shape()[3]);
            let h = (oh - 1) * stride + kh - 2 * pad;
            let w_in = (ow - 1) * stride + kw - 2 * pad;
            Ok(conv_transpose(utility, w, *in_ch, h, w_in, *kh, *kw, *stride, *pad, n))
        }
        other => Err(Error::Contract(format!(
            "unit_deconv applies to fc/conv layers, got {other:?}"
        ))),
    }
}

/// Transposed convolution: scatter `utility` [N,F,oh,ow] back through
/// filters [F,C,kh,kw] onto an input-shaped [N,C,h,w] tensor.
#[allow(clippy::too_many_arguments)]
fn conv_transpose(
    utility: &Tensor,
    filters: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    n: usize,
) -> Tensor {
    let f = filters.shape()[0];
    let (oh, ow) = (utility.shape()[2], utility.shape()[3]);
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![0.0; n * c * h * w];
    let mut gcols = vec![0.0; ckk * ohw];
    for ni in 0..n {
        let u_n = &utility.data()[ni * f * ohw..(ni + 1) * f * ohw];
        gemm::dgemm(
            ckk,
            f,
            ohw,
            filters.data(),
            Layout::Transposed,
            u_n,
            Layout::Normal,
            &mut gcols,
            false,
        );
        // scatter the column form back to image layout
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[base + iy as usize * w + ix as usize] +=
                                gcols[row * ohw + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, c, h, w], out).expect("conv_transpose shape")
}

struct Tracer<'a> {
    net: &'a Network,
    tape: &'a Tape,
    record: &'a ForwardRecord,
    per_layer: HashMap<String, Tensor>,
}

impl<'a> Tracer<'a> {
    fn activation(&self, id: &str) -> Result<&Tensor> {
        let var = self
            .record
            .activation(id)
            .ok_or_else(|| Error::Contract(format!("forward record is missing layer {id}")))?;
        Ok(self.tape.value(var))
    }

    /// Utility through one layer: from its output back to its input, where
    /// `target_shape` is the shape of the tensor that entered the layer.
    fn back_layer(&self, layer: &LayerSpec, u: &Tensor, target_shape: &[usize]) -> Result<Tensor> {
        let u_in = match &layer.kind {
            LayerKind::Fc { .. } | LayerKind::Decision { .. } => unit_deconv(self.net, layer, u)?,
            LayerKind::Conv { in_ch, stride, pad, kh, kw, .. } => {
                let Some(LayerParams::Conv { w, .. }) = self.net.params(&layer.id) else {
                    return Err(Error::Contract(format!("no parameters for {}", layer.id)));
                };
                if target_shape.len() != 4 || target_shape[1] != *in_ch {
                    return Err(Error::Dimension(format!(
                        "conv utility target {target_shape:?} does not match {in_ch} input channels"
                    )));
                }
                conv_transpose(
                    u,
                    w,
                    *in_ch,
                    target_shape[2],
                    target_shape[3],
                    *kh,
                    *kw,
                    *stride,
                    *pad,
                    target_shape[0],
                )
            }
            LayerKind::Relu => {
                let fired = self.activation(&layer.id)?;
                if fired.shape() != u.shape() {
                    return Err(Error::Dimension(format!(
                        "relu utility {:?} vs activation {:?}",
                        u.shape(),
                        fired.shape()
                    )));
                }
                let data: Vec<f64> = u
                    .data()
                    .iter()
                    .zip(fired.data())
                    .map(|(&uv, &av)| if av > 0.0 { uv } else { 0.0 })
                    .collect();
                Tensor::from_vec(u.shape().to_vec(), data)?
            }
            LayerKind::MaxPool { .. } => {
                let var = self
                    .record
                    .activation(&layer.id)
                    .ok_or_else(|| Error::Contract(format!("missing record for {}", layer.id)))?;
                let switches = self
                    .tape
                    .pool_switches(var)
                    .ok_or_else(|| Error::Contract(format!("{} is not a pool node", layer.id)))?;
                let numel: usize = target_shape.iter().product();
                let mut out = vec![0.0; numel];
                for (o, &src) in switches.iter().enumerate() {
                    out[src] += u.data()[o];
                }
                Tensor::from_vec(target_shape.to_vec(), out)?
            }
            LayerKind::AvgPool { k, stride, pad } => {
                avgpool_backroute(u, target_shape, *k, *stride, *pad)?
            }
            LayerKind::BatchNorm { .. } => {
                let Some(LayerParams::BatchNorm { gamma, run_var, .. }) = self.net.params(&layer.id)
                else {
                    return Err(Error::Contract(format!("no parameters for {}", layer.id)));
                };
                let channels = gamma.numel();
                let scale: Vec<f64> = gamma
                    .data()
                    .iter()
                    .zip(run_var)
                    .map(|(&g, &v)| g / (v + crate::nn::BN_EPS).sqrt())
                    .collect();
                let inner = match u.rank() {
                    2 => 1,
                    4 => u.shape()[2] * u.shape()[3],
                    _ => {
                        return Err(Error::Dimension(format!(
                            "batchnorm utility of rank {}",
                            u.rank()
                        )))
                    }
                };
                let data: Vec<f64> = u
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(pos, &v)| v * scale[(pos / inner) % channels])
                    .collect();
                Tensor::from_vec(u.shape().to_vec(), data)?
            }
            LayerKind::Concat => {
                return Err(Error::Contract(
                    "concat utilities are split at module boundaries".into(),
                ))
            }
        };
        // cross fc/flatten boundaries faithfully
        if u_in.shape() != target_shape {
            if u_in.numel() == target_shape.iter().product::<usize>() {
                return u_in.reshape(target_shape.to_vec());
            }
            return Err(Error::Dimension(format!(
                "utility shape {:?} cannot reach layer input {:?}",
                u_in.shape(),
                target_shape
            )));
        }
        Ok(u_in)
    }

    /// Walk a chain backwards; `u` is the utility at the chain's output,
    /// `input_shape` the shape entering the chain. Returns utility at the
    /// chain input.
    fn back_chain(&mut self, layers: &[LayerSpec], mut u: Tensor, input_shape: &[usize]) -> Result<Tensor> {
        for i in (0..layers.len()).rev() {
            self.per_layer.insert(layers[i].id.clone(), u.clone());
            let target = if i == 0 {
                input_shape.to_vec()
            } else {
                self.activation(&layers[i - 1].id)?.shape().to_vec()
            };
            u = self.back_layer(&layers[i], &u, &target)?;
        }
        Ok(u)
    }

    fn back_module(&mut self, module: &ModuleSpec, u: Tensor, input_shape: &[usize]) -> Result<Tensor> {
        match module {
            ModuleSpec::Chain(layers) => self.back_chain(layers, u, input_shape),
            ModuleSpec::Branched { branches, concat } => {
                self.per_layer.insert(concat.id.clone(), u.clone());
                let (n, h, w) = (u.shape()[0], u.shape()[2], u.shape()[3]);
                let hw = h * w;
                let total_c = u.shape()[1];
                let mut sum: Option<Tensor> = None;
                let mut c_off = 0;
                for branch in branches {
                    let last = branch
                        .last()
                        .ok_or_else(|| Error::Contract("empty branch".into()))?;
                    let bc = self.activation(&last.id)?.shape()[1];
                    let mut part = vec![0.0; n * bc * hw];
                    for ni in 0..n {
                        let src =
                            &u.data()[(ni * total_c + c_off) * hw..(ni * total_c + c_off + bc) * hw];
                        part[ni * bc * hw..(ni + 1) * bc * hw].copy_from_slice(src);
                    }
                    let part = Tensor::from_vec([n, bc, h, w], part)?;
                    let u_in = self.back_chain(branch, part, input_shape)?;
                    sum = Some(match sum {
                        None => u_in,
                        Some(acc) => {
                            let data: Vec<f64> = acc
                                .data()
                                .iter()
                                .zip(u_in.data())
                                .map(|(a, b)| a + b)
                                .collect();
                            Tensor::from_vec(acc.shape().to_vec(), data)?
                        }
                    });
                    c_off += bc;
                }
                sum.ok_or_else(|| Error::Contract("module with no branches".into()))
            }
        }
    }
}

/// Trace the masked final-latent utility backwards across all layers.
/// The record must come from a forward pass of the same network with the
/// same tape.
pub fn trace(
    net: &Network,
    tape: &Tape,
    record: &ForwardRecord,
    mask: &FinalMask,
) -> Result<UtilityMap> {
    let latent = tape.value(record.final_latent).clone();
    if latent.rank() < 2 {
        return Err(Error::Contract("latent must be batched".into()));
    }
    let d = latent.shape()[1];
    let inner: usize = latent.shape()[2..].iter().product::<usize>().max(1);
    if mask.keep.len() != d {
        return Err(Error::Contract(format!(
            "mask over {} dims but latent has {d}",
            mask.keep.len()
        )));
    }
    // zero the dropped dimensions of the latent activations
    let mut u = latent.data().to_vec();
    for (pos, v) in u.iter_mut().enumerate() {
        if !mask.keep[(pos / inner) % d] {
            *v = 0.0;
        }
    }
    let mut u = Tensor::from_vec(latent.shape().to_vec(), u)?;

    let spec = net.spec.clone();
    let mut tracer = Tracer { net, tape, record, per_layer: HashMap::new() };

    // input shape entering the head = output of the last stage (or stem)
    let shape_before = |idx_stage: Option<usize>, tracer: &Tracer| -> Result<Vec<usize>> {
        // helper resolving the activation shape of the element preceding a
        // walk section; falls back to the record input shape
        match idx_stage {
            Some(0) | None => {
                if let Some(last) = spec.stem.last() {
                    Ok(tracer.activation(&last.id)?.shape().to_vec())
                } else {
                    Ok(tape.value(record.input).shape().to_vec())
                }
            }
            Some(si) => {
                let prev = &spec.stages[si - 1];
                if let Some(last) = prev.transition.last() {
                    Ok(tracer.activation(&last.id)?.shape().to_vec())
                } else {
                    let last_module = prev
                        .modules
                        .last()
                        .ok_or_else(|| Error::Contract("empty stage".into()))?;
                    let last_id = match last_module {
                        ModuleSpec::Chain(layers) => &layers.last().unwrap().id,
                        ModuleSpec::Branched { concat, .. } => &concat.id,
                    };
                    Ok(tracer.activation(last_id)?.shape().to_vec())
                }
            }
        }
    };

    // head
    if !spec.head.is_empty() {
        let into_head = if spec.stages.is_empty() {
            shape_before(None, &tracer)?
        } else {
            let si = spec.stages.len();
            // shape entering head = shape after last stage
            let last = &spec.stages[si - 1];
            if let Some(l) = last.transition.last() {
                tracer.activation(&l.id)?.shape().to_vec()
            } else {
                let last_module = last.modules.last().ok_or_else(|| Error::Contract("empty stage".into()))?;
                let last_id = match last_module {
                    ModuleSpec::Chain(layers) => &layers.last().unwrap().id,
                    ModuleSpec::Branched { concat, .. } => &concat.id,
                };
                tracer.activation(last_id)?.shape().to_vec()
            }
        };
        u = tracer.back_chain(&spec.head, u, &into_head)?;
    }

    // stages in reverse
    for si in (0..spec.stages.len()).rev() {
        let stage = &spec.stages[si];
        if !stage.transition.is_empty() {
            let last_module = stage
                .modules
                .last()
                .ok_or_else(|| Error::Contract("empty stage".into()))?;
            let last_id = match last_module {
                ModuleSpec::Chain(layers) => &layers.last().unwrap().id,
                ModuleSpec::Branched { concat, .. } => &concat.id,
            };
            let into_transition = tracer.activation(last_id)?.shape().to_vec();
            u = tracer.back_chain(&stage.transition, u, &into_transition)?;
        }
        for mi in (0..stage.modules.len()).rev() {
            // input shape of this module: previous module's output, or the
            // section before the stage
            let input_shape = if mi > 0 {
                let prev = &stage.modules[mi - 1];
                let last_id = match prev {
                    ModuleSpec::Chain(layers) => &layers.last().unwrap().id,
                    ModuleSpec::Branched { concat, .. } => &concat.id,
                };
                tracer.activation(last_id)?.shape().to_vec()
            } else {
                shape_before(Some(si), &tracer)?
            };
            u = tracer.back_module(&stage.modules[mi], u, &input_shape)?;
        }
    }

    // stem
    if !spec.stem.is_empty() {
        let input_shape = tape.value(record.input).shape().to_vec();
        u = tracer.back_chain(&spec.stem, u, &input_shape)?;
    }

    Ok(UtilityMap { per_layer: tracer.per_layer, input: u })
}

fn avgpool_backroute(u: &Tensor, target_shape: &[usize], k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if u.rank() != 4 || target_shape.len() != 4 {
        return Err(Error::Dimension("avgpool utility must be rank 4".into()));
    }
    let (n, c, h, w) = (target_shape[0], target_shape[1], target_shape[2], target_shape[3]);
    let (oh, ow) = (u.shape()[2], u.shape()[3]);
    let mut out = vec![0.0; n * c * h * w];
    let mut oidx = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut cells = Vec::with_capacity(k * k);
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cells.push(base + iy as usize * w + ix as usize);
                        }
                    }
                    let share = u.data()[oidx] / cells.len() as f64;
                    for idx in cells {
                        out[idx] += share;
                    }
                    oidx += 1;
                }
            }
        }
    }
    Tensor::from_vec(target_shape.to_vec(), out)
}

// ── channel scores ───────────────────────────────────────────────────

/// Mean absolute reconstructed utility per output channel of every weight
/// layer, accumulated over a scoring set batch by batch in a fixed order.
#[derive(Default)]
pub struct UtilityAccumulator {
    sums: HashMap<String, Vec<f64>>,
    counts: HashMap<String, usize>,
}

/// Per-layer, per-channel utility scores.
#[derive(Clone, Debug)]
pub struct UtilityScores {
    pub by_layer: HashMap<String, Vec<f64>>,
}

impl UtilityAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold one traced batch into the running sums. Only fc/conv layers
    /// (the owners of prunable output channels) are scored.
    pub fn accumulate(&mut self, net: &Network, umap: &UtilityMap) -> Result<()> {
        for layer in net.spec.layers() {
            let channels = match layer.out_channels() {
                Some(c) => c,
                None => continue,
            };
            let Some(u) = umap.layer(&layer.id) else { continue };
            let (per_channel_count, chan_of) : (usize, Box<dyn Fn(usize) -> usize>) = match u.rank() {
                2 => (u.rows(), Box::new(move |pos: usize| pos % channels)),
                4 => {
                    let inner = u.shape()[2] * u.shape()[3];
                    (u.shape()[0] * inner, Box::new(move |pos: usize| (pos / inner) % channels))
                }
                _ => continue,
            };
            let sums = self.sums.entry(layer.id.clone()).or_insert_with(|| vec![0.0; channels]);
            for (pos, &v) in u.data().iter().enumerate() {
                sums[chan_of(pos)] += v.abs();
            }
            *self.counts.entry(layer.id.clone()).or_insert(0) += per_channel_count;
        }
        Ok(())
    }

    pub fn finalize(self) -> Result<UtilityScores> {
        if self.sums.is_empty() {
            return Err(Error::Contract("utility scores over an empty scoring set".into()));
        }
        let mut by_layer = HashMap::new();
        for (id, sums) in self.sums {
            let count = self.counts.get(&id).copied().unwrap_or(0).max(1);
            by_layer.insert(id, sums.into_iter().map(|s| s / count as f64).collect());
        }
        Ok(UtilityScores { by_layer })
    }
}

/// Dump scores as CSV (layer id, channel index, score).
pub fn write_scores_csv(path: &std::path::Path, net: &Network, scores: &UtilityScores) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "layer,channel,score")?;
    for layer in net.spec.layers() {
        if let Some(s) = scores.by_layer.get(&layer.id) {
            for (c, v) in s.iter().enumerate() {
                writeln!(f, "{},{c},{v}", layer.id)?;
            }
        }
    }
    Ok(())
}


#[cfg(test)]
mod monotonicity_tests {
    use super::*;
    use crate::nn::{forward, LayerKind, LayerSpec, Mode, ModuleSpec, NetworkSpec, StageSpec};

    /// On a linear net with nonnegative weights, reconstructions from
    /// different latent dimensions cannot cancel, so growing the mask can
    /// only raise per-channel scores.
    #[test]
    fn scores_grow_monotonically_with_the_mask_on_nonnegative_linear_nets() {
        let d = 5;
        let mut seed = 3u64;
        let mut lcg = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        let spec = NetworkSpec {
            input_shape: vec![d],
            stem: vec![],
            stages: vec![StageSpec {
                modules: vec![ModuleSpec::Chain(vec![
                    LayerSpec::new("s0.m0.fc0", LayerKind::Fc { in_dim: d, out_dim: d }),
                    LayerSpec::new("s0.m0.fc1", LayerKind::Fc { in_dim: d, out_dim: d }),
                ])],
                transition: vec![],
            }],
            head: vec![],
            decision: LayerSpec::new("decision", LayerKind::Decision { in_dim: d, classes: 2 }),
            aux_heads: vec![],
        };
        let mut net = Network::build(spec, 1).unwrap();
        for id in ["s0.m0.fc0", "s0.m0.fc1"] {
            if let Some(LayerParams::Fc { w, b }) = net.params_mut(id) {
                w.update_in_place(|data| {
                    for v in data.iter_mut() {
                        *v = lcg();
                    }
                });
                b.update_in_place(|v| v.fill(0.0));
            }
        }
        let x = Tensor::from_vec([6, d], (0..6 * d).map(|_| lcg()).collect()).unwrap();
        let mut tape = Tape::new();
        let rec = forward(&mut net, &mut tape, &x, Mode::Eval).unwrap();

        let score_with = |kept: usize| {
            let mask = FinalMask { keep: (0..d).map(|i| i < kept).collect(), rho: 1.0 };
            let umap = trace(&net, &tape, &rec, &mask).unwrap();
            let mut acc = UtilityAccumulator::new();
            acc.accumulate(&net, &umap).unwrap();
            acc.finalize().unwrap()
        };
        let mut prev: Option<UtilityScores> = None;
        for kept in 1..=d {
            let scores = score_with(kept);
            if let Some(p) = &prev {
                for (layer, s) in &scores.by_layer {
                    for (c, v) in s.iter().enumerate() {
                        let before = p.by_layer[layer][c];
                        assert!(
                            *v >= before - 1e-12,
                            "score of {layer}[{c}] fell from {before} to {v} as the mask grew"
                        );
                    }
                }
            }
            prev = Some(scores);
        }
    }
}
