//! Interactive browser demo of pushing and pruning on a 2-D Gaussian-blob
//! task, exported over a plain C ABI (no bindgen tooling): the page's JS
//! reads result buffers straight out of wasm linear memory.
//!
//! Exports follow a fetch-pointer/fetch-length convention: buffers stay
//! owned by the demo state and remain valid until the next exported call.

use std::sync::Mutex;

use pushprune::config::Config;
use pushprune::data::{gaussian_blobs, Dataset};
use pushprune::deconv::{final_mask, trace, UtilityAccumulator};
use pushprune::nn::{forward, classification_loss, Mode, Network, NetworkSpec};
use pushprune::prune::{apply_prune, select_prune_set};
use pushprune::push::{push_loss, BalancedBatcher, PushWeights};
use pushprune::stats::{generalized_eig, neuron_power, scatter, shrink};
use pushprune::tensor::tape::Tape;
use pushprune::train::{collect_updates, evaluate_accuracy, Sgd};

const LATENT: usize = 6;
const EPSILON_REL: f64 = 1e-3;

struct Demo {
    data: Dataset,
    net: Network,
    sgd: Sgd,
    batcher: BalancedBatcher,
    // JS-visible buffers
    points: Vec<f64>,
    cov: Vec<f64>,
    powers: Vec<f64>,
    eigenvalues: Vec<f64>,
    cov_dim: usize,
    last_loss: f64,
    steps_done: u32,
}

static STATE: Mutex<Option<Demo>> = Mutex::new(None);

fn blob_spec(classes: usize) -> NetworkSpec {
    NetworkSpec::fc_classifier(2, &[16, 16, LATENT], classes)
}

fn rebuild_stats(demo: &mut Demo) {
    let subset = demo.data.train.balanced_subset(240, 7);
    let (latent, labels) =
        pushprune::pipeline::collect_latent(&mut demo.net, &subset, 256).expect("latent pass");
    let s = scatter(&latent, &labels).expect("scatter");
    let shrunk = shrink(&s.sigma_w, EPSILON_REL).expect("shrink");
    let spectrum = generalized_eig(&s.sigma_b, &shrunk).expect("eig");
    demo.cov_dim = s.d;
    demo.cov = s.sigma_a.data().to_vec();
    demo.powers = neuron_power(&s.sigma_b, &shrunk).expect("powers");
    demo.eigenvalues = spectrum.eigenvalues;
}

fn with_demo<T>(f: impl FnOnce(&mut Demo) -> T) -> T {
    let mut guard = STATE.lock().expect("demo state");
    let demo = guard.as_mut().expect("demo_init must be called first");
    f(demo)
}

/// Build the task and a fresh network. Returns the latent dimension.
#[no_mangle]
pub extern "C" fn demo_init(seed: u32, classes: u32, samples: u32) -> u32 {
    let classes = (classes.clamp(2, 4)) as usize;
    let samples = (samples.clamp(120, 4000)) as usize;
    let data = gaussian_blobs(classes, 2, samples, 2.4, seed as u64).expect("blobs");
    let net = Network::build(blob_spec(classes), seed as u64).expect("build");
    let batcher = BalancedBatcher::new(&data.train.labels, classes, 8, seed as u64 ^ 0xabcdef)
        .expect("batcher");

    let mut points = Vec::with_capacity(data.train.len() * 3);
    let sample: usize = data.train.images.shape()[1..].iter().product();
    for i in 0..data.train.len().min(600) {
        points.push(data.train.images.data()[i * sample]);
        points.push(data.train.images.data()[i * sample + 1]);
        points.push(data.train.labels[i] as f64);
    }

    let mut demo = Demo {
        data,
        net,
        sgd: Sgd::new(0.9),
        batcher,
        points,
        cov: Vec::new(),
        powers: Vec::new(),
        eigenvalues: Vec::new(),
        cov_dim: 0,
        last_loss: 0.0,
        steps_done: 0,
    };
    rebuild_stats(&mut demo);
    *STATE.lock().expect("demo state") = Some(demo);
    LATENT as u32
}

/// Run training steps with the pushing objective. Returns the last total
/// loss.
#[no_mangle]
pub extern "C" fn demo_step(steps: u32, gamma: f64, lambda: f64, beta: f64, lr: f64) -> f64 {
    with_demo(|demo| {
        let weights = PushWeights {
            gamma,
            lambda,
            beta,
            align_dim_threshold: 128,
            variance_floor: 1e-4,
        };
        let decision_id = demo.net.spec.decision.id.clone();
        for _ in 0..steps.clamp(1, 200) {
            let (indices, _) = demo.batcher.next_batch();
            let (images, labels) = demo.data.train.batch(&indices);
            let labels = std::sync::Arc::new(labels);
            let mut tape = Tape::new();
            let record = forward(&mut demo.net, &mut tape, &images, Mode::Train).expect("forward");
            let (mut total, _) =
                classification_loss(&mut tape, &record, &labels, &decision_id, 1e-4)
                    .expect("loss");
            let (pl, _) = push_loss(&mut tape, record.final_latent, &labels, &weights, EPSILON_REL)
                .expect("push loss");
            total = tape.add(total, pl).expect("add");
            demo.last_loss = tape.value(total).item().expect("scalar");
            let updates = collect_updates(&tape, &record, &demo.net, total).expect("grads");
            demo.sgd.apply(&mut demo.net, &updates, lr.clamp(1e-5, 1.0));
            demo.steps_done += 1;
        }
        rebuild_stats(demo);
        demo.last_loss
    })
}

/// Prune once at the given retained-power fraction and step fraction;
/// returns the new trunk parameter count.
#[no_mangle]
pub extern "C" fn demo_prune(rho: f64, step_fraction: f64) -> u32 {
    with_demo(|demo| {
        let subset = demo.data.train.balanced_subset(240, 7);
        let (latent, labels) =
            pushprune::pipeline::collect_latent(&mut demo.net, &subset, 256).expect("latent");
        let s = scatter(&latent, &labels).expect("scatter");
        let shrunk = shrink(&s.sigma_w, EPSILON_REL).expect("shrink");
        let powers = neuron_power(&s.sigma_b, &shrunk).expect("powers");
        let mask = final_mask(&powers, rho.clamp(0.05, 1.0)).expect("mask");

        let mut acc = UtilityAccumulator::new();
        let idx: Vec<usize> = (0..subset.len()).collect();
        let (images, _) = subset.batch(&idx);
        let mut tape = Tape::new();
        let rec = forward(&mut demo.net, &mut tape, &images, Mode::Eval).expect("forward");
        let umap = trace(&demo.net, &tape, &rec, &mask).expect("trace");
        acc.accumulate(&demo.net, &umap).expect("accumulate");
        let scores = acc.finalize().expect("scores");

        let mask = select_prune_set(&demo.net, &scores, step_fraction.clamp(0.01, 0.95))
            .expect("selection");
        let (pruned, _report) = apply_prune(&demo.net, &mask).expect("apply");
        demo.net = pruned;
        demo.sgd = Sgd::new(0.9);
        rebuild_stats(demo);
        demo.net.param_count() as u32
    })
}

/// A few epochs of plain retraining after a prune.
#[no_mangle]
pub extern "C" fn demo_retrain(epochs: u32, lr: f64) -> f64 {
    with_demo(|demo| {
        let mut cfg = Config::default();
        cfg.set("batch_size", "32").expect("config");
        cfg.set("lr", &lr.clamp(1e-5, 1.0).to_string()).expect("config");
        cfg.set("classes_per_batch", &demo.data.classes.to_string()).expect("config");
        let out = pushprune::train::train(
            &mut demo.net,
            &demo.data,
            &cfg,
            pushprune::train::Phase { epochs: epochs.clamp(1, 20) as usize, push: false },
            11,
            None,
        )
        .expect("retrain");
        rebuild_stats(demo);
        out.final_val_accuracy
    })
}

#[no_mangle]
pub extern "C" fn demo_val_accuracy() -> f64 {
    with_demo(|demo| evaluate_accuracy(&mut demo.net, &demo.data.val, 256).expect("accuracy"))
}

#[no_mangle]
pub extern "C" fn demo_params() -> u32 {
    with_demo(|demo| demo.net.param_count() as u32)
}

#[no_mangle]
pub extern "C" fn demo_steps_done() -> u32 {
    with_demo(|demo| demo.steps_done)
}

#[no_mangle]
pub extern "C" fn demo_points_len() -> u32 {
    with_demo(|demo| demo.points.len() as u32)
}

#[no_mangle]
pub extern "C" fn demo_points_ptr() -> *const f64 {
    with_demo(|demo| demo.points.as_ptr())
}

#[no_mangle]
pub extern "C" fn demo_cov_dim() -> u32 {
    with_demo(|demo| demo.cov_dim as u32)
}

#[no_mangle]
pub extern "C" fn demo_cov_ptr() -> *const f64 {
    with_demo(|demo| demo.cov.as_ptr())
}

#[no_mangle]
pub extern "C" fn demo_powers_ptr() -> *const f64 {
    with_demo(|demo| demo.powers.as_ptr())
}

#[no_mangle]
pub extern "C" fn demo_eigenvalues_ptr() -> *const f64 {
    with_demo(|demo| demo.eigenvalues.as_ptr())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_demo_cycle_through_the_c_abi() {
        let latent = demo_init(3, 3, 600);
        assert_eq!(latent, LATENT as u32);
        assert!(demo_points_len() > 0);
        let params_before = demo_params();

        let loss1 = demo_step(30, 1.0, 1e-3, 1e-3, 0.05);
        assert!(loss1.is_finite());
        let acc = demo_val_accuracy();
        assert!(acc > 0.5, "post-training accuracy {acc}");

        assert_eq!(demo_cov_dim(), LATENT as u32);
        let params_after = demo_prune(0.95, 0.2);
        assert!(params_after < params_before);
        let acc2 = demo_retrain(2, 0.05);
        assert!(acc2 > 0.5, "post-retrain accuracy {acc2}");
    }
}
