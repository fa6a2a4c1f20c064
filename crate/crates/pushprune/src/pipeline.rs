//! The push-prune loop: train with the pushing objective, gate on
//! validation accuracy, score utility by deconvolution, prune, retrain —
//! emitting a checkpointed model series with a reproducible manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{save_checkpoint, Dataset, Split};
use crate::deconv::{final_mask, trace, UtilityAccumulator, UtilityScores};
use crate::error::{Error, Result};
use crate::nn::{forward, Mode, Network};
use crate::prune::{apply_prune, select_prune_set, PruneReport};
use crate::stats::{generalized_eig, neuron_power, scatter, shrink, DiscriminantSpectrum, ScatterSet};
use crate::tensor::tape::Tape;
use crate::train::{evaluate_accuracy, train, Phase, StepLog, TrainOutcome};

/// Scatter statistics and spectrum of the final latent space over the
/// seeded scoring subset, computed in eval mode over the full latent
/// dimensionality.
pub struct LatentStats {
    pub scatter: ScatterSet,
    pub spectrum: DiscriminantSpectrum,
    pub powers: Vec<f64>,
}

fn scoring_subset(data: &Dataset, cfg: &Config) -> Split {
    data.train.balanced_subset(cfg.scoring_set_size, cfg.seed ^ 0xd1b54a32d192ed03)
}

/// Collect final-latent activations over a split (eval mode, fixed batch
/// order).
pub fn collect_latent(net: &mut Network, split: &Split, batch_size: usize) -> Result<(crate::tensor::Tensor, Vec<usize>)> {
    let n = split.len();
    if n == 0 {
        return Err(Error::Contract("latent statistics over an empty split".into()));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let mut d = 0;
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (images, batch_labels) = split.batch(&idx);
        let mut tape = Tape::new();
        let rec = forward(net, &mut tape, &images, Mode::Eval)?;
        let latent = tape.value(rec.final_latent);
        let flat_d: usize = latent.shape()[1..].iter().product();
        d = flat_d;
        rows.extend_from_slice(latent.data());
        labels.extend(batch_labels);
        at = hi;
    }
    Ok((crate::tensor::Tensor::from_vec([n, d], rows)?, labels))
}

/// Latent scatter/spectrum/neuron powers on the scoring subset.
pub fn latent_stats(net: &mut Network, data: &Dataset, cfg: &Config) -> Result<LatentStats> {
    let subset = scoring_subset(data, cfg);
    let (latent, labels) = collect_latent(net, &subset, cfg.batch_size.max(256))?;
    let sc = scatter(&latent, &labels)?;
    let shrunk = shrink(&sc.sigma_w, cfg.epsilon_rel)?;
    let spectrum = generalized_eig(&sc.sigma_b, &shrunk)?;
    let powers = neuron_power(&sc.sigma_b, &shrunk)?;
    Ok(LatentStats { scatter: sc, spectrum, powers })
}

/// Algorithm step 1: train with the pushing objective added.
pub fn push(
    net: &mut Network,
    data: &Dataset,
    cfg: &Config,
    seed: u64,
    log: Option<&mut StepLog>,
) -> Result<(TrainOutcome, LatentStats)> {
    let outcome = train(net, data, cfg, Phase { epochs: cfg.push_epochs, push: true }, seed, log)?;
    let stats = latent_stats(net, data, cfg)?;
    Ok((outcome, stats))
}

/// Utility scores over the scoring subset: neuron powers → final mask →
/// per-batch deconv traces → per-channel mean |utility|.
pub fn score_utilities(net: &mut Network, data: &Dataset, cfg: &Config) -> Result<(UtilityScores, usize)> {
    let stats = latent_stats(net, data, cfg)?;
    let mask = final_mask(&stats.powers, cfg.rho)?;
    let kept = mask.kept();

    let subset = scoring_subset(data, cfg);
    let batch = cfg.batch_size.max(256);
    let mut acc = UtilityAccumulator::new();
    let n = subset.len();
    let mut at = 0;
    while at < n {
        let hi = (at + batch).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (images, _) = subset.batch(&idx);
        let mut tape = Tape::new();
        let rec = forward(net, &mut tape, &images, Mode::Eval)?;
        let umap = trace(net, &tape, &rec, &mask)?;
        acc.accumulate(net, &umap)?;
        at = hi;
    }
    Ok((acc.finalize()?, kept))
}

/// One pruning iteration outcome.
pub struct PruneIteration {
    pub report: PruneReport,
    pub retrain: TrainOutcome,
    pub latent_kept: usize,
    pub scores: UtilityScores,
}

/// Algorithm step 2: score, select, excise, retrain with the surviving
/// parameters.
pub fn prune_iteration(
    net: &Network,
    data: &Dataset,
    cfg: &Config,
    seed: u64,
) -> Result<(Network, PruneIteration)> {
    let mut scoring_net = net.clone();
    let (scores, latent_kept) = score_utilities(&mut scoring_net, data, cfg)?;
    let mask = select_prune_set(net, &scores, cfg.step_fraction)?;
    let (mut pruned, report) = apply_prune(net, &mask)?;
    let retrain = train(
        &mut pruned,
        data,
        cfg,
        Phase { epochs: cfg.retrain_epochs, push: false },
        seed,
        None,
    )?;
    Ok((pruned, PruneIteration { report, retrain, latent_kept, scores }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub pushed_val_accuracy: f64,
    pub total_discriminant_power: f64,
    pub top2_power_fraction: f64,
    pub params_before: Option<usize>,
    pub params_after: Option<usize>,
    pub flops_after: Option<usize>,
    pub latent_kept: Option<usize>,
    pub retrain_val_accuracy: Option<f64>,
    pub pushed_checkpoint: String,
    pub pruned_checkpoint: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub effective_config: String,
    pub baseline_val_accuracy: f64,
    pub baseline_params: usize,
    pub iterations: Vec<IterationRow>,
}

pub struct RunSummary {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub final_net: Network,
}

fn dump_stats(out_dir: &Path, tag: &str, stats: &LatentStats) -> Result<()> {
    crate::stats::write_matrix_csv(&out_dir.join(format!("{tag}_cov.csv")), &stats.scatter.sigma_a)?;
    crate::stats::write_spectrum_csv(&out_dir.join(format!("{tag}_spectrum.csv")), &stats.spectrum)?;
    Ok(())
}

/// The full loop: baseline training, then push → accuracy gate → prune →
/// retrain, checkpointing every model, until the gate fails, pruning goes
/// infeasible, or a configured bound is hit. A partially completed series
/// is still persisted.
pub fn run(mut net: Network, data: &Dataset, cfg: &Config, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir)?;

    let baseline_params = net.param_count();
    let baseline = if cfg.baseline_epochs > 0 {
        train(
            &mut net,
            data,
            cfg,
            Phase { epochs: cfg.baseline_epochs, push: false },
            cfg.seed,
            None,
        )?
        .final_val_accuracy
    } else {
        evaluate_accuracy(&mut net, &data.val, cfg.batch_size.max(256))?
    };
    save_checkpoint(&net, &out_dir.join("base.ckpt"))?;
    let base_stats = latent_stats(&mut net, data, cfg)?;
    dump_stats(out_dir, "base", &base_stats)?;

    let gate = if cfg.t_acc_relative { cfg.t_acc * baseline } else { cfg.t_acc };

    let mut iterations: Vec<IterationRow> = Vec::new();
    let mut iteration = 1usize;
    let loop_result: Result<()> = (|iterations: &mut Vec<IterationRow>, net: &mut Network| {
        loop {
        // Step 1: pushing
        let mut log = StepLog::create(&out_dir.join(format!("iter{iteration:03}_push_log.csv")))?;
        let push_seed = cfg.seed.wrapping_add(1000 * iteration as u64);
        let (push_out, push_stats) = push(net, data, cfg, push_seed, Some(&mut log))?;
        let pushed_ckpt = format!("iter{iteration:03}_pushed.ckpt");
        save_checkpoint(net, &out_dir.join(&pushed_ckpt))?;
        dump_stats(out_dir, &format!("iter{iteration:03}"), &push_stats)?;

        let mut row = IterationRow {
            iteration,
            pushed_val_accuracy: push_out.final_val_accuracy,
            total_discriminant_power: push_stats.spectrum.total_power(),
            top2_power_fraction: push_stats.spectrum.accumulated_fraction(2),
            params_before: None,
            params_after: None,
            flops_after: None,
            latent_kept: None,
            retrain_val_accuracy: None,
            pushed_checkpoint: pushed_ckpt,
            pruned_checkpoint: None,
        };

        // accuracy gate
        if push_out.final_val_accuracy < gate {
            log::info!(
                "gate failed at iteration {iteration}: {:.4} < {:.4}; stopping",
                push_out.final_val_accuracy,
                gate
            );
            iterations.push(row);
            break;
        }

        // Step 2: pruning
        let prune_seed = cfg.seed.wrapping_add(1000 * iteration as u64 + 500);
        let (pruned, info) = prune_iteration(net, data, cfg, prune_seed)?;
        crate::deconv::write_scores_csv(
            &out_dir.join(format!("iter{iteration:03}_scores.csv")),
            net,
            &info.scores,
        )?;
        let made_progress = info.report.params_after < info.report.params_before;
        row.params_before = Some(info.report.params_before);
        row.params_after = Some(info.report.params_after);
        row.flops_after = Some(info.report.flops_after);
        row.latent_kept = Some(info.latent_kept);
        row.retrain_val_accuracy = Some(info.retrain.final_val_accuracy);
        let pruned_ckpt = format!("iter{iteration:03}_pruned.ckpt");
        save_checkpoint(&pruned, &out_dir.join(&pruned_ckpt))?;
        serde_json::to_writer_pretty(
            std::fs::File::create(out_dir.join(format!("iter{iteration:03}_prune.json")))?,
            &info.report,
        )
        .map_err(|e| Error::Io(e.into()))?;
        row.pruned_checkpoint = Some(pruned_ckpt);
        *net = pruned;
        iterations.push(row);

        if !made_progress {
            log::warn!("pruning made no progress at iteration {iteration}; stopping");
            break;
        }
        if cfg.target_params > 0 && net.param_count() <= cfg.target_params {
            break;
        }
        if cfg.max_prune_iterations > 0 && iteration >= cfg.max_prune_iterations {
            break;
        }
        iteration += 1;
        }
        Ok(())
    })(&mut iterations, &mut net);

    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: format!("{:016x}", cfg.hash()),
        seed: cfg.seed,
        effective_config: cfg.dump_effective(),
        baseline_val_accuracy: baseline,
        baseline_params,
        iterations,
    };
    let manifest_path = out_dir.join("manifest.json");
    serde_json::to_writer_pretty(std::fs::File::create(&manifest_path)?, &manifest)
        .map_err(|e| Error::Io(e.into()))?;
    // a failed iteration still leaves the partial series and manifest behind
    loop_result?;
    Ok(RunSummary { manifest, manifest_path, final_net: net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;
    use crate::nn::NetworkSpec;

    fn toy() -> (Network, Dataset, Config) {
        let data = gaussian_blobs(3, 8, 480, 2.5, 11).unwrap();
        let spec = NetworkSpec::fc_classifier(8, &[24, 8], 3);
        let net = Network::build(spec, 3).unwrap();
        let mut cfg = Config::default();
        for (k, v) in [
            ("batch_size", "32"),
            ("lr", "0.05"),
            ("classes_per_batch", "3"),
            ("samples_per_class", "8"),
            ("baseline_epochs", "4"),
            ("push_epochs", "2"),
            ("retrain_epochs", "2"),
            ("scoring_set_size", "120"),
            ("step_fraction", "0.3"),
            ("max_prune_iterations", "2"),
            ("t_acc", "0.5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        (net, data, cfg)
    }

    #[test]
    fn gate_at_one_stops_after_first_push_with_one_model() {
        let (net, data, mut cfg) = toy();
        cfg.set("t_acc", "1.0").unwrap();
        let dir = std::env::temp_dir().join("pushprune_pipeline_gate1");
        let _ = std::fs::remove_dir_all(&dir);
        let summary = run(net, &data, &cfg, &dir).unwrap();
        assert_eq!(summary.manifest.iterations.len(), 1);
        let row = &summary.manifest.iterations[0];
        assert!(row.pruned_checkpoint.is_none());
        assert!(dir.join(&row.pushed_checkpoint).exists());
    }

    #[test]
    fn low_gate_prunes_with_strictly_decreasing_params() {
        let (net, data, mut cfg) = toy();
        cfg.set("t_acc", "0.000001").unwrap();
        cfg.set("max_prune_iterations", "3").unwrap();
        let dir = std::env::temp_dir().join("pushprune_pipeline_decreasing");
        let _ = std::fs::remove_dir_all(&dir);
        let summary = run(net, &data, &cfg, &dir).unwrap();
        let rows = &summary.manifest.iterations;
        assert!(!rows.is_empty());
        let mut prev = summary.manifest.baseline_params;
        for row in rows {
            if let Some(after) = row.params_after {
                assert!(after < prev, "params did not strictly decrease: {prev} → {after}");
                prev = after;
            }
        }
    }

    #[test]
    fn checkpoints_reload_to_recorded_validation_accuracy() {
        let (net, data, mut cfg) = toy();
        cfg.set("max_prune_iterations", "1").unwrap();
        cfg.set("t_acc", "0.2").unwrap();
        let dir = std::env::temp_dir().join("pushprune_pipeline_reload");
        let _ = std::fs::remove_dir_all(&dir);
        let summary = run(net, &data, &cfg, &dir).unwrap();
        let row = &summary.manifest.iterations[0];
        let pruned = row.pruned_checkpoint.as_ref().expect("one prune ran");
        let mut reloaded = crate::data::load_checkpoint(&dir.join(pruned)).unwrap();
        let acc = evaluate_accuracy(&mut reloaded, &data.val, 256).unwrap();
        let recorded = row.retrain_val_accuracy.unwrap();
        assert!(
            (acc - recorded).abs() < 1e-12,
            "reloaded accuracy {acc} vs recorded {recorded}"
        );

        // logit-level agreement with the in-memory final net
        let mut final_net = summary.final_net;
        let a = crate::train::evaluate_logits(&mut final_net, &data.val, 256).unwrap();
        let b = crate::train::evaluate_logits(&mut reloaded, &data.val, 256).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn two_runs_with_same_seed_produce_identical_manifests() {
        let (_, data, mut cfg) = toy();
        cfg.set("max_prune_iterations", "1").unwrap();
        cfg.set("t_acc", "0.2").unwrap();
        let run_once = |dir: &Path| {
            let spec = NetworkSpec::fc_classifier(8, &[24, 8], 3);
            let net = Network::build(spec, 3).unwrap();
            let _ = std::fs::remove_dir_all(dir);
            run(net, &data, &cfg, dir).unwrap();
            crate::report::full_report(dir, &dir.join("report")).unwrap();
            let manifest = std::fs::read(dir.join("manifest.json")).unwrap();
            let curve = std::fs::read(dir.join("report/accuracy_vs_pruning_rate.csv")).unwrap();
            let spectrum = std::fs::read(dir.join("report/discriminants_push.csv")).unwrap();
            (manifest, curve, spectrum)
        };
        let a = run_once(&std::env::temp_dir().join("pushprune_pipeline_det_a"));
        let b = run_once(&std::env::temp_dir().join("pushprune_pipeline_det_b"));
        assert_eq!(a.0, b.0, "manifests differ between identical runs");
        assert_eq!(a.1, b.1, "report curves differ between identical runs");
        assert_eq!(a.2, b.2, "report spectra differ between identical runs");
    }
}
