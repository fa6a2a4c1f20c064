//! Property tests over randomized inputs: structural identities of the
//! scatter triple, mask invariants, serialization round trips and the
//! permutation equivariance of the pushing objective.

use proptest::prelude::*;

use pushprune::config::Config;
use pushprune::data::{load_checkpoint, save_checkpoint};
use pushprune::deconv::final_mask;
use pushprune::nn::{parse_netspec, write_netspec, Network, NetworkSpec};
use pushprune::push::{active_dims, push_loss, PushWeights};
use pushprune::stats::{scatter, shrink};
use pushprune::tensor::tape::Tape;
use pushprune::tensor::Tensor;

fn latent_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (2usize..6, 8usize..24).prop_flat_map(|(d, n)| {
        (
            Just(d),
            Just(n),
            proptest::collection::vec(0.05f64..2.0, n * d),
            proptest::collection::vec(0usize..3, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scatter_triple_identity_is_exact((d, n, data, labels) in latent_strategy()) {
        let x = Tensor::from_vec([n, d], data).unwrap();
        let s = scatter(&x, &labels).unwrap();
        for i in 0..d * d {
            prop_assert_eq!(
                s.sigma_a.data()[i] - s.sigma_w.data()[i] - s.sigma_b.data()[i],
                0.0
            );
        }
    }

    #[test]
    fn shrink_output_is_positive_definite((d, n, data, labels) in latent_strategy()) {
        let x = Tensor::from_vec([n, d], data).unwrap();
        let s = scatter(&x, &labels).unwrap();
        let shrunk = shrink(&s.sigma_w, 1e-3).unwrap();
        // positive-definite iff Cholesky succeeds
        prop_assert!(pushprune::tensor::linalg::cholesky(shrunk.data(), d).is_ok());
    }

    #[test]
    fn push_loss_is_invariant_under_dimension_permutation(
        (d, n, data, labels) in latent_strategy(),
        rot in 0usize..5,
    ) {
        let x = Tensor::from_vec([n, d], data).unwrap();
        let weights = PushWeights::default();
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let latent = tape.leaf(x.clone(), true);
            let (loss, _) = push_loss(&mut tape, latent, &labels, &weights, 1e-3).unwrap();
            tape.value(loss).item().unwrap()
        };
        let base = eval(&x);
        // cyclic permutation by `rot`
        let mut permuted = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                permuted[i * d + (j + rot) % d] = x.at2(i, j);
            }
        }
        let p = eval(&Tensor::from_vec([n, d], permuted).unwrap());
        let scale = base.abs().max(1.0);
        prop_assert!((base - p).abs() / scale < 1e-10, "{} vs {}", base, p);
    }

    #[test]
    fn active_dims_never_exceeds_width((d, n, data, _labels) in latent_strategy()) {
        let x = Tensor::from_vec([n, d], data).unwrap();
        let dims = active_dims(&x, 1e-4).unwrap();
        prop_assert!(dims.len() <= d);
        prop_assert!(dims.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn final_mask_keeps_requested_power(powers in proptest::collection::vec(0.0f64..5.0, 1..24), rho in 0.05f64..1.0) {
        let mask = final_mask(&powers, rho).unwrap();
        prop_assert!(mask.kept() >= 1);
        let total: f64 = powers.iter().sum();
        if total > 0.0 {
            let kept_power: f64 = mask
                .kept_indices()
                .iter()
                .map(|&i| powers[i])
                .sum();
            prop_assert!(kept_power >= rho * total - 1e-12);
        } else {
            prop_assert_eq!(mask.kept(), powers.len());
        }
    }

    #[test]
    fn matmul_identity_is_exact(rows in 1usize..6, cols in 1usize..6, data in proptest::collection::vec(-3.0f64..3.0, 36)) {
        let a = Tensor::from_vec([rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let id = tape.constant(Tensor::eye(cols));
        let prod = tape.matmul(av, id).unwrap();
        prop_assert_eq!(tape.value(prod).data(), a.data());
    }
}

fn small_fc_spec() -> impl Strategy<Value = NetworkSpec> {
    (
        1usize..6,
        proptest::collection::vec(1usize..7, 1..4),
        2usize..5,
    )
        .prop_map(|(input, hidden, classes)| NetworkSpec::fc_classifier(input, &hidden, classes))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn netspec_text_round_trips(spec in small_fc_spec()) {
        let text = write_netspec(&spec);
        let parsed = parse_netspec(&text).unwrap();
        prop_assert_eq!(parsed, spec);
    }

    #[test]
    fn checkpoint_round_trips_bitwise(spec in small_fc_spec(), seed in 0u64..1000) {
        let net = Network::build(spec, seed).unwrap();
        let path = std::env::temp_dir().join(format!(
            "pushprune_prop_ckpt_{seed}_{}.ckpt",
            std::process::id()
        ));
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let _ = std::fs::remove_file(&path);
        prop_assert_eq!(&loaded.spec, &net.spec);
        let mut same = true;
        net.for_each_param(|id, slot, t| {
            loaded.for_each_param(|id2, slot2, t2| {
                if id == id2 && slot == slot2 && t.data() != t2.data() {
                    same = false;
                }
            });
        });
        prop_assert!(same);
    }

    #[test]
    fn config_dump_round_trips(seed in 0u64..5000, lr in 0.001f64..0.5) {
        let mut cfg = Config::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        let parsed = Config::from_str_overrides(&cfg.dump_effective()).unwrap();
        prop_assert_eq!(parsed, cfg);
    }
}
