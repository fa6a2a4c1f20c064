//! Report generation from run artifacts: covariance matrices with and
//! without pushing, the top-k discriminant table, the accuracy-vs-pruning-
//! rate curve, and layerwise parameter / FLOP reductions. All outputs are
//! CSV data files; plotting is left to ad-hoc scripts.

use std::io::Write;
use std::path::Path;

use crate::data::load_checkpoint;
use crate::error::{Error, Result};
use crate::nn::{layer_flops_map, layer_param_count, NetworkSpec};
use crate::pipeline::Manifest;

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let f = std::fs::File::open(run_dir.join("manifest.json"))?;
    serde_json::from_reader(f).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("manifest.json: {e}"),
    })
}

// Manifest needs Deserialize for report consumption; derived in pipeline.

/// Copy the covariance dumps of the base model and the last pushed model
/// into `out_dir` as the with/without-pushing pair.
pub fn covariance_pair(run_dir: &Path, out_dir: &Path) -> Result<()> {
    let manifest = read_manifest(run_dir)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::copy(run_dir.join("base_cov.csv"), out_dir.join("cov_nopush.csv"))?;
    let last = manifest
        .iterations
        .last()
        .ok_or_else(|| Error::Contract("run has no iterations".into()))?;
    std::fs::copy(
        run_dir.join(format!("iter{:03}_cov.csv", last.iteration)),
        out_dir.join("cov_push.csv"),
    )?;
    Ok(())
}

/// Copy the spectrum dumps (rank, eigenvalue, accumulated fraction) for the
/// base and last pushed model.
pub fn discriminant_tables(run_dir: &Path, out_dir: &Path) -> Result<()> {
    let manifest = read_manifest(run_dir)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::copy(
        run_dir.join("base_spectrum.csv"),
        out_dir.join("discriminants_nopush.csv"),
    )?;
    let last = manifest
        .iterations
        .last()
        .ok_or_else(|| Error::Contract("run has no iterations".into()))?;
    std::fs::copy(
        run_dir.join(format!("iter{:03}_spectrum.csv", last.iteration)),
        out_dir.join("discriminants_push.csv"),
    )?;
    Ok(())
}

/// Accuracy against parameter pruning rate across the run's iterations.
pub fn accuracy_vs_pruning(run_dir: &Path, out_path: &Path) -> Result<()> {
    let manifest = read_manifest(run_dir)?;
    let base = manifest.baseline_params as f64;
    let mut f = std::fs::File::create(out_path)?;
    writeln!(f, "iteration,params,pruning_rate,pushed_val_accuracy,retrain_val_accuracy")?;
    writeln!(
        f,
        "0,{},0,{},",
        manifest.baseline_params, manifest.baseline_val_accuracy
    )?;
    for row in &manifest.iterations {
        let params = row.params_after.unwrap_or(manifest.baseline_params);
        let rate = 1.0 - params as f64 / base;
        writeln!(
            f,
            "{},{params},{rate},{},{}",
            row.iteration,
            row.pushed_val_accuracy,
            row.retrain_val_accuracy.map(|v| v.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}

fn layer_param_map(spec: &NetworkSpec) -> Vec<(String, usize)> {
    spec.layers()
        .into_iter()
        .map(|l| (l.id.clone(), layer_param_count(&l.kind)))
        .collect()
}

/// Per-layer parameter and FLOP counts of the base checkpoint against the
/// last pruned checkpoint (layer ids are stable across pruning).
pub fn layerwise_reduction(run_dir: &Path, out_path: &Path) -> Result<()> {
    let manifest = read_manifest(run_dir)?;
    let base = load_checkpoint(&run_dir.join("base.ckpt"))?;
    let last_pruned = manifest
        .iterations
        .iter()
        .rev()
        .find_map(|r| r.pruned_checkpoint.clone())
        .ok_or_else(|| Error::Contract("run pruned nothing".into()))?;
    let pruned = load_checkpoint(&run_dir.join(last_pruned))?;

    let params_before = layer_param_map(&base.spec);
    let params_after: std::collections::HashMap<String, usize> =
        layer_param_map(&pruned.spec).into_iter().collect();
    let flops_before = layer_flops_map(&base.spec);
    let flops_after: std::collections::HashMap<String, usize> =
        layer_flops_map(&pruned.spec).into_iter().collect();

    let mut f = std::fs::File::create(out_path)?;
    writeln!(f, "layer,params_before,params_after,flops_before,flops_after")?;
    for ((id, pb), (_, fb)) in params_before.into_iter().zip(flops_before) {
        let pa = params_after.get(&id).copied().unwrap_or(0);
        let fa = flops_after.get(&id).copied().unwrap_or(0);
        writeln!(f, "{id},{pb},{pa},{fb},{fa}")?;
    }
    Ok(())
}

/// Everything the `report` command emits for one run directory.
pub fn full_report(run_dir: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    covariance_pair(run_dir, out_dir)?;
    discriminant_tables(run_dir, out_dir)?;
    accuracy_vs_pruning(run_dir, &out_dir.join("accuracy_vs_pruning_rate.csv"))?;
    match layerwise_reduction(run_dir, &out_dir.join("layerwise.csv")) {
        Ok(()) => {}
        Err(Error::Contract(_)) => {
            log::warn!("run pruned nothing; skipping layerwise reduction table")
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::gaussian_blobs;
    use crate::nn::{Network, NetworkSpec};

    #[test]
    fn full_report_emits_expected_files() {
        let data = gaussian_blobs(3, 8, 480, 2.5, 11).unwrap();
        let spec = NetworkSpec::fc_classifier(8, &[24, 8], 3);
        let net = Network::build(spec, 3).unwrap();
        let mut cfg = Config::default();
        for (k, v) in [
            ("batch_size", "32"),
            ("classes_per_batch", "3"),
            ("baseline_epochs", "2"),
            ("push_epochs", "1"),
            ("retrain_epochs", "1"),
            ("scoring_set_size", "120"),
            ("t_acc", "0.000001"),
            ("max_prune_iterations", "1"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let run_dir = std::env::temp_dir().join("pushprune_report_run");
        let _ = std::fs::remove_dir_all(&run_dir);
        crate::pipeline::run(net, &data, &cfg, &run_dir).unwrap();

        let out_dir = std::env::temp_dir().join("pushprune_report_out");
        let _ = std::fs::remove_dir_all(&out_dir);
        full_report(&run_dir, &out_dir).unwrap();
        for name in [
            "cov_push.csv",
            "cov_nopush.csv",
            "discriminants_push.csv",
            "discriminants_nopush.csv",
            "accuracy_vs_pruning_rate.csv",
            "layerwise.csv",
        ] {
            assert!(out_dir.join(name).exists(), "missing report file {name}");
        }
        let curve = std::fs::read_to_string(out_dir.join("accuracy_vs_pruning_rate.csv")).unwrap();
        assert!(curve.lines().count() >= 3);
    }
}
