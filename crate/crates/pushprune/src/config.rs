//! Flat key-value experiment configuration with a typed schema. Every
//! tunable default lives here; `dump_effective` prints the full resolved
//! configuration so a run can be reproduced from its manifest.

use std::path::Path;

use crate::error::{Error, Result};

macro_rules! config_schema {
    ($( $field:ident : $ty:ty = $default:expr, $doc:expr; )*) => {
        /// Resolved experiment configuration.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl Config {
            /// Apply one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(
                        stringify!($field) => {
                            self.$field = value.trim().parse::<$ty>().map_err(|_| {
                                Error::Config(format!(
                                    "key '{key}' expects a {}, got '{value}'",
                                    stringify!($ty)
                                ))
                            })?;
                            Ok(())
                        }
                    )*
                    _ => Err(Error::Config(format!("unknown config key '{key}'"))),
                }
            }

            /// Full resolved configuration, one `key = value` per line, in
            /// schema order, with doc comments.
            pub fn dump_effective(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(&format!("# {}\n{} = {}\n", $doc, stringify!($field), self.$field));
                )*
                out
            }
        }
    };
}

config_schema! {
    seed: u64 = 0, "master seed for parameter init, batching and synthetic data";
    epsilon_rel: f64 = 1e-3, "trace-relative shrinkage added to the within-scatter diagonal";
    gamma: f64 = 1.0, "weight of the reciprocal eigenvalue-sum separation loss";
    lambda: f64 = 1e-3, "weight of the latent covariance penalty";
    beta: f64 = 1e-3, "weight of the discriminant-alignment penalty";
    align_dim_threshold: usize = 128, "active dimension count above which the alignment loss is dropped";
    variance_floor: f64 = 1e-4, "relative variance below which a latent dimension counts as dormant";
    rho: f64 = 0.95, "retained discriminating-power fraction for the final-latent mask";
    step_fraction: f64 = 0.2, "parameter fraction removed per pruning iteration";
    weight_decay: f64 = 1e-4, "L2 coefficient on the decision-layer weights";
    lr: f64 = 0.1, "learning rate";
    push_lr: f64 = 0.02, "learning rate of the push phase (0 = use lr)";
    momentum: f64 = 0.9, "SGD momentum";
    lr_decay: f64 = 0.1, "learning-rate multiplier applied at each milestone";
    lr_milestone1: f64 = 0.6, "first decay milestone as a fraction of the epoch budget";
    lr_milestone2: f64 = 0.85, "second decay milestone as a fraction of the epoch budget";
    batch_size: usize = 128, "plain training batch size";
    baseline_epochs: usize = 6, "epochs of conventional training before pushing";
    push_epochs: usize = 4, "epochs of training with the pushing objective";
    retrain_epochs: usize = 10, "epochs of retraining after each prune";
    classes_per_batch: usize = 10, "classes per balanced batch in push training";
    samples_per_class: usize = 8, "samples per class in balanced batches (at least 8)";
    scoring_set_size: usize = 2048, "class-balanced samples used for utility scoring";
    t_acc: f64 = 0.95, "validation accuracy gate for the push-prune loop";
    t_acc_relative: bool = false, "interpret t_acc relative to the baseline accuracy";
    max_prune_iterations: usize = 0, "stop after this many prune iterations (0 = unlimited)";
    target_params: usize = 0, "stop once the model is at or below this parameter count (0 = disabled)";
    grow_rounds: usize = 3, "module additions attempted by the growing loop";
    grow_budget_epochs: usize = 3, "training epochs per growth candidate";
    grow_delta: f64 = 0.001, "minimum accuracy gain; two stagnant rounds stop the growing loop";
    aux_loss_weight: f64 = 0.3, "loss weight of auxiliary classifier heads";
}

impl Config {
    /// Parse a flat `key = value` file (blank lines and `#` comments
    /// ignored) on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_overrides(&text)
    }

    pub fn from_str_overrides(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class < 8 {
            return Err(Error::Config(
                "samples_per_class must be at least 8 for usable scatter estimates".into(),
            ));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config("rho must be in (0, 1]".into()));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(Error::Config("step_fraction must be in (0, 1)".into()));
        }
        if !(self.t_acc > 0.0 && self.t_acc <= 1.0) {
            return Err(Error::Config("t_acc must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Stable hash of the effective configuration, recorded in run
    /// manifests.
    pub fn hash(&self) -> u64 {
        let dump = self.dump_effective();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in dump.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn push_weights(&self) -> crate::push::PushWeights {
        crate::push::PushWeights {
            gamma: self.gamma,
            lambda: self.lambda,
            beta: self.beta,
            align_dim_threshold: self.align_dim_threshold,
            variance_floor: self.variance_floor,
        }
    }
}
