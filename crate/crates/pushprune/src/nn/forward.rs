//! Forward evaluation on a tape, retaining all per-layer activations (the
//! utility tracer and the scatter statistics both need them).

use std::collections::HashMap;
use std::sync::Arc;

use super::{LayerKind, LayerParams, LayerSpec, ModuleSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles of one layer's weight tensors.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub w: Var,
    pub b: Var,
}

/// Everything one forward pass produced, addressed by layer id.
pub struct ForwardRecord {
    pub input: Var,
    /// Layer outputs in traversal order.
    pub activations: Vec<(String, Var)>,
    /// Trunk activation feeding the decision layer (post-ReLU latent).
    pub final_latent: Var,
    pub logits: Var,
    /// Aux classifier logits with their loss weights (train mode only).
    pub aux_logits: Vec<(Var, f64)>,
    pub weight_vars: HashMap<String, ParamVars>,
    pub bn_vars: HashMap<String, (Var, Var)>,
}

impl ForwardRecord {
    pub fn activation(&self, id: &str) -> Option<Var> {
        self.activations
            .iter()
            .rev()
            .find(|(lid, _)| lid == id)
            .map(|&(_, v)| v)
    }
}

struct Walker<'a> {
    net: &'a Network,
    tape: &'a mut Tape,
    train: bool,
    activations: Vec<(String, Var)>,
    weight_vars: HashMap<String, ParamVars>,
    bn_vars: HashMap<String, (Var, Var)>,
    bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> Walker<'a> {
    fn flatten_if_needed(&mut self, cur: Var) -> Result<Var> {
        let shape = self.tape.value(cur).shape().to_vec();
        if shape.len() == 4 {
            if shape[2] != 1 || shape[3] != 1 {
                return Err(Error::Dimension(format!(
                    "fc layer fed spatial activations {shape:?}; pool to 1×1 first"
                )));
            }
            return self.tape.reshape(cur, [shape[0], shape[1]]);
        }
        Ok(cur)
    }

    fn linear(&mut self, id: &str, cur: Var) -> Result<Var> {
        let Some(LayerParams::Fc { w, b }) = self.net.params(id) else {
            return Err(Error::Contract(format!("missing fc parameters for {id}")));
        };
        let wv = self.tape.leaf(w.clone(), self.train);
        let bv = self.tape.leaf(b.clone(), self.train);
        self.weight_vars.insert(id.to_string(), ParamVars { w: wv, b: bv });
        let flat = self.flatten_if_needed(cur)?;
        let prod = self.tape.matmul(flat, wv)?;
        self.tape.row_broadcast_add(prod, bv)
    }

    fn layer(&mut self, layer: &LayerSpec, cur: Var) -> Result<Var> {
        let out = match &layer.kind {
            LayerKind::Fc { .. } | LayerKind::Decision { .. } => self.linear(&layer.id, cur)?,
            LayerKind::Conv { stride, pad, .. } => {
                let Some(LayerParams::Conv { w, b }) = self.net.params(&layer.id) else {
                    return Err(Error::Contract(format!(
                        "missing conv parameters for {}",
                        layer.id
                    )));
                };
                let wv = self.tape.leaf(w.clone(), self.train);
                let bv = self.tape.leaf(b.clone(), self.train);
                self.weight_vars.insert(layer.id.clone(), ParamVars { w: wv, b: bv });
                let conv = self.tape.conv2d(cur, wv, *stride, *pad)?;
                self.tape.channel_bias_add(conv, bv)?
            }
            LayerKind::Relu => self.tape.relu(cur),
            LayerKind::MaxPool { k, stride, pad } => self.tape.maxpool2d(cur, *k, *stride, *pad)?,
            LayerKind::AvgPool { k, stride, pad } => self.tape.avgpool2d(cur, *k, *stride, *pad)?,
            LayerKind::BatchNorm { .. } => {
                let Some(LayerParams::BatchNorm { gamma, beta, run_mean, run_var }) =
                    self.net.params(&layer.id)
                else {
                    return Err(Error::Contract(format!(
                        "missing batchnorm parameters for {}",
                        layer.id
                    )));
                };
                let gv = self.tape.leaf(gamma.clone(), self.train);
                let bv = self.tape.leaf(beta.clone(), self.train);
                self.bn_vars.insert(layer.id.clone(), (gv, bv));
                if self.train {
                    let (out, mean, var) = self.tape.batchnorm_train(cur, gv, bv, BN_EPS)?;
                    self.bn_updates.push((layer.id.clone(), mean, var));
                    out
                } else {
                    self.tape.batchnorm_eval(cur, gv, bv, run_mean, run_var, BN_EPS)?
                }
            }
            LayerKind::Concat => {
                return Err(Error::Contract(
                    "concat layers are applied at module boundaries".into(),
                ))
            }
        };
        self.activations.push((layer.id.clone(), out));
        Ok(out)
    }

    fn chain(&mut self, layers: &[LayerSpec], mut cur: Var) -> Result<Var> {
        for layer in layers {
            cur = self.layer(layer, cur)?;
        }
        Ok(cur)
    }

    fn module(&mut self, module: &ModuleSpec, cur: Var) -> Result<Var> {
        match module {
            ModuleSpec::Chain(layers) => self.chain(layers, cur),
            ModuleSpec::Branched { branches, concat } => {
                let mut outs = Vec::with_capacity(branches.len());
                for branch in branches {
                    outs.push(self.chain(branch, cur)?);
                }
                let joined = self.tape.concat_channels(&outs)?;
                self.activations.push((concat.id.clone(), joined));
                Ok(joined)
            }
        }
    }
}

/// Run a batch through the network. Train mode records gradients for all
/// parameters, uses batch statistics in batchnorm layers (updating the
/// running estimates) and evaluates auxiliary heads; eval mode does none of
/// that and is deterministic for fixed parameters.
pub fn forward(net: &mut Network, tape: &mut Tape, batch: &Tensor, mode: Mode) -> Result<ForwardRecord> {
    let spec = net.spec.clone();
    let n = *batch
        .shape()
        .first()
        .ok_or_else(|| Error::Dimension("empty batch shape".into()))?;

    // admit [n, d] or [n, C, H, W] matching the spec input
    let input_t = match spec.input_shape.as_slice() {
        [d] => {
            let flat: usize = batch.shape()[1..].iter().product();
            if flat != *d {
                return Err(Error::Dimension(format!(
                    "batch sample size {flat} does not match input dim {d}"
                )));
            }
            batch.reshape([n, *d])?
        }
        [c, h, w] => {
            if batch.shape() != [n, *c, *h, *w] {
                return Err(Error::Dimension(format!(
                    "batch shape {:?} does not match input {:?}",
                    batch.shape(),
                    spec.input_shape
                )));
            }
            batch.clone()
        }
        other => {
            return Err(Error::Dimension(format!("unsupported input shape {other:?}")));
        }
    };

    let (record, updates) = {
        let mut walker = Walker {
            net,
            tape,
            train: mode == Mode::Train,
            activations: Vec::new(),
            weight_vars: HashMap::new(),
            bn_vars: HashMap::new(),
            bn_updates: Vec::new(),
        };
        let input = walker.tape.constant(input_t);
        let mut cur = input;
        let mut module_outputs: Vec<Vec<Var>> = Vec::new();

        cur = walker.chain(&spec.stem, cur)?;
        for stage in &spec.stages {
            let mut outs = Vec::new();
            for module in &stage.modules {
                cur = walker.module(module, cur)?;
                outs.push(cur);
            }
            module_outputs.push(outs);
            cur = walker.chain(&stage.transition, cur)?;
        }
        cur = walker.chain(&spec.head, cur)?;
        let final_latent = cur;
        let logits = walker.layer(&spec.decision, cur)?;

        let mut aux_logits = Vec::new();
        if mode == Mode::Train {
            for aux in &spec.aux_heads {
                let tap = module_outputs
                    .get(aux.stage)
                    .and_then(|o| o.get(aux.module))
                    .copied()
                    .ok_or_else(|| {
                        Error::Contract(format!(
                            "aux head attaches to missing module ({}, {})",
                            aux.stage, aux.module
                        ))
                    })?;
                let mut acur = walker.chain(&aux.layers, tap)?;
                acur = walker.layer(&aux.decision, acur)?;
                aux_logits.push((acur, aux.loss_weight));
            }
        }

        (
            ForwardRecord {
                input,
                activations: walker.activations,
                final_latent,
                logits,
                aux_logits,
                weight_vars: walker.weight_vars,
                bn_vars: walker.bn_vars,
            },
            walker.bn_updates,
        )
    };

    for (id, mean, var) in updates {
        net.update_bn_stats(&id, &mean, &var, BN_MOMENTUM);
    }
    Ok(record)
}

/// Loss component values for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub ce: f64,
    pub l2: f64,
    pub aux: f64,
}

/// Cross-entropy plus L2 on the decision-layer weights (and weighted aux
/// cross-entropies when the record carries aux heads).
pub fn classification_loss(
    tape: &mut Tape,
    record: &ForwardRecord,
    labels: &Arc<Vec<usize>>,
    decision_id: &str,
    weight_decay: f64,
) -> Result<(Var, LossParts)> {
    let ce = tape.softmax_cross_entropy(record.logits, Arc::clone(labels))?;
    let mut parts = LossParts { ce: tape.value(ce).item()?, ..Default::default() };
    let mut total = ce;

    if weight_decay != 0.0 {
        let Some(pv) = record.weight_vars.get(decision_id) else {
            return Err(Error::Contract(format!(
                "decision layer {decision_id} has no recorded weights"
            )));
        };
        let sq = tape.mul(pv.w, pv.w)?;
        let ssq = tape.sum(sq);
        let l2 = tape.scale(ssq, weight_decay);
        parts.l2 = tape.value(l2).item()?;
        total = tape.add(total, l2)?;
    }

    for &(aux_logits, weight) in &record.aux_logits {
        let aux_ce = tape.softmax_cross_entropy(aux_logits, Arc::clone(labels))?;
        let weighted = tape.scale(aux_ce, weight);
        parts.aux += tape.value(weighted).item()?;
        total = tape.add(total, weighted)?;
    }

    Ok((total, parts))
}


#[cfg(test)]
mod ce_oracle_tests {
    use super::*;
    use crate::nn::NetworkSpec;

    /// Independent log-sum-exp oracle on random logits.
    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut seed = 77u64;
        let mut lcg = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0
        };
        let (n, k) = (5, 7);
        let logits: Vec<f64> = (0..n * k).map(|_| lcg()).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 3) % k).collect();

        let mut want = 0.0;
        for i in 0..n {
            let row = &logits[i * k..(i + 1) * k];
            // direct log-sum-exp without the max trick
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[labels[i]];
        }
        want /= n as f64;

        // drive through a network whose decision layer reproduces the
        // logits exactly: identity weights on a latent equal to the logits
        let spec = NetworkSpec::fc_classifier(k, &[k], k);
        let mut net = Network::build(spec, 0).unwrap();
        if let Some(LayerParams::Fc { w, b }) = net.params_mut("s0.m0.fc0") {
            w.update_in_place(|d| {
                d.fill(0.0);
                for i in 0..k {
                    d[i * k + i] = 1.0;
                }
            });
            b.update_in_place(|d| d.fill(0.0));
        }
        if let Some(LayerParams::Fc { w, b }) = net.params_mut("decision") {
            w.update_in_place(|d| {
                d.fill(0.0);
                for i in 0..k {
                    d[i * k + i] = 1.0;
                }
            });
            b.update_in_place(|d| d.fill(0.0));
        }
        // relu would clip negatives; shift logits to be positive and adjust
        // the oracle equally (softmax is shift-invariant per row only when
        // every entry shifts, which a constant bias does)
        let shift = 5.0;
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let batch = Tensor::from_vec([n, k], shifted).unwrap();
        let mut tape = Tape::new();
        let rec = forward(&mut net, &mut tape, &batch, Mode::Eval).unwrap();
        let labels = Arc::new(labels);
        let (_, parts) = classification_loss(&mut tape, &rec, &labels, "decision", 0.0).unwrap();
        assert!(
            (parts.ce - want).abs() < 1e-10,
            "cross-entropy {} vs oracle {}",
            parts.ce,
            want
        );
    }
}
