//! Greedy base-net growing: each round tries appending a copy of every
//! stage's last module, trains each candidate under a fixed budget, and
//! keeps the strict argmax by validation accuracy.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{attach_aux_heads, LayerKind, ModuleSpec, Network, NetworkSpec};
use crate::train::{train, Phase};

/// Append a copy of `stage`'s last module (fresh parameters come from the
/// later build), rewiring the copy's input extents to the stage's current
/// output channel count.
pub fn extend(spec: &NetworkSpec, stage: usize) -> Result<NetworkSpec> {
    let st = spec
        .stages
        .get(stage)
        .ok_or_else(|| Error::Contract(format!("no stage {stage}")))?;
    let last = st
        .modules
        .last()
        .ok_or_else(|| Error::Contract(format!("stage {stage} is empty")))?;
    let out_ch = module_out_channels(last)?;
    let mut copy = last.clone();
    rewire_module_input(&mut copy, out_ch);
    let mut grown = spec.clone();
    grown.stages[stage].modules.push(copy);
    grown.reassign_module_ids();
    grown.validate()?;
    Ok(grown)
}

fn module_out_channels(module: &ModuleSpec) -> Result<usize> {
    match module {
        ModuleSpec::Chain(layers) => layers
            .iter()
            .rev()
            .find_map(|l| l.out_channels())
            .ok_or_else(|| Error::Contract("module has no weight layers".into())),
        ModuleSpec::Branched { branches, .. } => {
            let mut total = 0;
            for branch in branches {
                total += branch
                    .iter()
                    .rev()
                    .find_map(|l| l.out_channels())
                    .ok_or_else(|| Error::Contract("branch has no weight layers".into()))?;
            }
            Ok(total)
        }
    }
}

/// Point the first weight layer of each path at `in_ch` input channels
/// (passthrough layers before it are retargeted as needed).
fn rewire_module_input(module: &mut ModuleSpec, in_ch: usize) {
    let rewire_chain = |layers: &mut Vec<crate::nn::LayerSpec>| {
        for layer in layers.iter_mut() {
            match &mut layer.kind {
                LayerKind::Conv { in_ch: c, .. } => {
                    *c = in_ch;
                    break;
                }
                LayerKind::Fc { in_dim, .. } => {
                    *in_dim = in_ch;
                    break;
                }
                LayerKind::BatchNorm { ch } => {
                    *ch = in_ch;
                }
                _ => {}
            }
        }
    };
    match module {
        ModuleSpec::Chain(layers) => rewire_chain(layers),
        ModuleSpec::Branched { branches, .. } => {
            for branch in branches.iter_mut() {
                rewire_chain(branch);
            }
        }
    }
}

/// Scores one candidate architecture; the production implementation trains
/// briefly, tests can rig accuracies.
pub trait CandidateEvaluator {
    fn evaluate(&mut self, spec: &NetworkSpec, seed: u64) -> Result<f64>;
}

/// Builds the candidate with fresh seeded parameters, attaches auxiliary
/// heads when the net is deep (three stages or more), and trains for the
/// configured budget, reporting the best validation accuracy seen. A
/// diverging candidate keeps its best-seen score and is flagged in the log.
pub struct TrainingEvaluator<'a> {
    pub data: &'a Dataset,
    pub cfg: &'a Config,
}

impl CandidateEvaluator for TrainingEvaluator<'_> {
    fn evaluate(&mut self, spec: &NetworkSpec, seed: u64) -> Result<f64> {
        let mut candidate = spec.clone();
        if candidate.stages.len() >= 3 {
            attach_aux_heads(&mut candidate, 1, self.cfg.aux_loss_weight);
        }
        let mut net = Network::build(candidate, seed)?;
        let mut best = 0.0f64;
        for epoch in 0..self.cfg.grow_budget_epochs {
            match train(
                &mut net,
                self.data,
                self.cfg,
                Phase { epochs: 1, push: false },
                seed.wrapping_add(epoch as u64),
                None,
            ) {
                Ok(out) => best = best.max(out.final_val_accuracy),
                Err(Error::NumericAbort(msg)) => {
                    log::warn!("candidate diverged ({msg}); scoring at best seen {best:.4}");
                    return Ok(best);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowHistoryRow {
    pub round: usize,
    pub stage: usize,
    pub params: usize,
    pub flops: usize,
    pub val_accuracy: f64,
    pub picked: bool,
}

#[derive(Debug)]
pub struct GrowOutcome {
    pub spec: NetworkSpec,
    pub history: Vec<GrowHistoryRow>,
    pub rounds_run: usize,
}

fn candidate_seed(base: u64, round: usize, stage: usize) -> u64 {
    let mut x = base ^ ((round as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15))
        ^ ((stage as u64 + 1).wrapping_mul(0xbf58476d1ce4e5b9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x
}

/// Run up to `rounds` growth rounds. Each round builds every stage
/// extension, scores them under identical budgets, and keeps the strict
/// argmax (ties to the lowest stage index). Stops early once the best
/// accuracy has improved by less than `delta` for two consecutive rounds.
pub fn grow(
    spec: &NetworkSpec,
    rounds: usize,
    evaluator: &mut dyn CandidateEvaluator,
    seed: u64,
    delta: f64,
) -> Result<GrowOutcome> {
    if rounds == 0 {
        return Err(Error::Contract("grow needs at least one round".into()));
    }
    let mut current = spec.clone();
    let mut history = Vec::new();
    let mut best_overall = 0.0f64;
    let mut stagnant_rounds = 0usize;
    let mut rounds_run = 0usize;

    for round in 0..rounds {
        rounds_run = round + 1;
        let mut best_acc = f64::NEG_INFINITY;
        let mut best_stage = 0usize;
        let mut round_rows = Vec::new();
        for stage in 0..current.stages.len() {
            let candidate = extend(&current, stage)?;
            let acc = evaluator.evaluate(&candidate, candidate_seed(seed, round, stage))?;
            round_rows.push(GrowHistoryRow {
                round,
                stage,
                params: crate::nn::param_count(&candidate),
                flops: crate::nn::flop_count(&candidate),
                val_accuracy: acc,
                picked: false,
            });
            if acc > best_acc {
                best_acc = acc;
                best_stage = stage;
            }
        }
        round_rows[best_stage].picked = true;
        history.extend(round_rows);
        current = extend(&current, best_stage)?;

        let gain = best_acc - best_overall;
        best_overall = best_overall.max(best_acc);
        if gain < delta {
            stagnant_rounds += 1;
            if stagnant_rounds >= 2 {
                log::info!("growth stalled for two rounds (last gain {gain:.4}); stopping");
                break;
            }
        } else {
            stagnant_rounds = 0;
        }
    }
    Ok(GrowOutcome { spec: current, history, rounds_run })
}


#[cfg(test)]
mod divergence_tests {
    use super::*;
    use crate::data::gaussian_blobs;

    /// A diverging candidate keeps its best-seen score instead of failing
    /// the whole growth round.
    #[test]
    fn diverging_candidates_score_at_best_seen() {
        let data = gaussian_blobs(3, 8, 300, 2.5, 5).unwrap();
        let mut cfg = crate::config::Config::default();
        cfg.set("lr", "1e8").unwrap(); // guaranteed blow-up
        cfg.set("batch_size", "32").unwrap();
        cfg.set("classes_per_batch", "3").unwrap();
        cfg.set("grow_budget_epochs", "2").unwrap();
        let spec = NetworkSpec::fc_classifier(8, &[6], 3);
        let mut ev = TrainingEvaluator { data: &data, cfg: &cfg };
        let acc = ev.evaluate(&spec, 1).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
