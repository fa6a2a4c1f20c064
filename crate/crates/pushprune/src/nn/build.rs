//! Parameter initialization and the bound network (spec + tensors).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters bound to one layer.
#[derive(Clone, Debug)]
pub enum LayerParams {
    /// `w` is [in, out] so the forward pass is a plain `x · w`.
    Fc { w: Tensor, b: Tensor },
    /// `w` is [F, C, kh, kw].
    Conv { w: Tensor, b: Tensor },
    BatchNorm { gamma: Tensor, beta: Tensor, run_mean: Vec<f64>, run_var: Vec<f64> },
}

/// A spec with parameters bound to every parameterized layer.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    params: HashMap<String, LayerParams>,
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("consistent init shape")
}

fn init_layer(rng: &mut ChaCha8Rng, layer: &LayerSpec) -> Option<LayerParams> {
    match layer.kind {
        LayerKind::Fc { in_dim, out_dim } => Some(LayerParams::Fc {
            w: fan_in_uniform(rng, vec![in_dim, out_dim], in_dim),
            b: Tensor::zeros([out_dim]),
        }),
        LayerKind::Decision { in_dim, classes } => Some(LayerParams::Fc {
            w: fan_in_uniform(rng, vec![in_dim, classes], in_dim),
            b: Tensor::zeros([classes]),
        }),
        LayerKind::Conv { in_ch, out_ch, kh, kw, .. } => Some(LayerParams::Conv {
            w: fan_in_uniform(rng, vec![out_ch, in_ch, kh, kw], in_ch * kh * kw),
            b: Tensor::zeros([out_ch]),
        }),
        LayerKind::BatchNorm { ch } => Some(LayerParams::BatchNorm {
            gamma: Tensor::filled([ch], 1.0),
            beta: Tensor::zeros([ch]),
            run_mean: vec![0.0; ch],
            run_var: vec![1.0; ch],
        }),
        _ => None,
    }
}

impl Network {
    /// Validate the spec and bind seeded parameters. The same seed yields
    /// bitwise-identical parameters.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = HashMap::new();
        for layer in spec.layers() {
            if let Some(p) = init_layer(&mut rng, layer) {
                params.insert(layer.id.clone(), p);
            }
        }
        Ok(Self { spec, params })
    }

    /// Rebind a spec with explicitly provided parameters (pruning, loading).
    pub fn from_parts(spec: NetworkSpec, params: HashMap<String, LayerParams>) -> Result<Self> {
        spec.validate()?;
        for layer in spec.layers() {
            let needs = !matches!(
                layer.kind,
                LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. } | LayerKind::Concat
            );
            if needs && !params.contains_key(&layer.id) {
                return Err(Error::Validation(vec![format!(
                    "missing parameters for layer {}",
                    layer.id
                )]));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn params(&self, id: &str) -> Option<&LayerParams> {
        self.params.get(id)
    }

    pub fn params_mut(&mut self, id: &str) -> Option<&mut LayerParams> {
        self.params.get_mut(id)
    }

    /// Update batchnorm running statistics after a train-mode forward.
    pub fn update_bn_stats(&mut self, id: &str, mean: &[f64], var: &[f64], momentum: f64) {
        if let Some(LayerParams::BatchNorm { run_mean, run_var, .. }) = self.params.get_mut(id) {
            for (r, &m) in run_mean.iter_mut().zip(mean) {
                *r = momentum * *r + (1.0 - momentum) * m;
            }
            for (r, &v) in run_var.iter_mut().zip(var) {
                *r = momentum * *r + (1.0 - momentum) * v;
            }
        }
    }

    /// Visit every trainable tensor in canonical spec order. Slots are
    /// `"w"`/`"b"` for weight layers and `"gamma"`/`"beta"` for batchnorm.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &str, &Tensor)) {
        for layer in self.spec.layers() {
            match self.params.get(&layer.id) {
                Some(LayerParams::Fc { w, b }) | Some(LayerParams::Conv { w, b }) => {
                    f(&layer.id, "w", w);
                    f(&layer.id, "b", b);
                }
                Some(LayerParams::BatchNorm { gamma, beta, .. }) => {
                    f(&layer.id, "gamma", gamma);
                    f(&layer.id, "beta", beta);
                }
                None => {}
            }
        }
    }

    /// Mutable counterpart of [`Network::for_each_param`].
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &str, &mut Tensor)) {
        for layer in self.spec.layers() {
            let id = layer.id.clone();
            match self.params.get_mut(&id) {
                Some(LayerParams::Fc { w, b }) | Some(LayerParams::Conv { w, b }) => {
                    f(&id, "w", w);
                    f(&id, "b", b);
                }
                Some(LayerParams::BatchNorm { gamma, beta, .. }) => {
                    f(&id, "gamma", gamma);
                    f(&id, "beta", beta);
                }
                None => {}
            }
        }
    }

    /// Trainable parameter count of the trunk (aux heads excluded).
    pub fn param_count(&self) -> usize {
        super::count::param_count(&self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{modular_conv_classifier, BranchWidths};

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let spec = NetworkSpec::fc_classifier(2, &[2], 2);
        let a = Network::build(spec.clone(), 7).unwrap();
        let b = Network::build(spec, 7).unwrap();
        let mut identical = true;
        a.for_each_param(|id, slot, t| {
            if let Some(other) = b.params(id) {
                let tb = match (slot, other) {
                    ("w", LayerParams::Fc { w, .. }) => w,
                    ("b", LayerParams::Fc { b, .. }) => b,
                    _ => return,
                };
                if t.data() != tb.data() {
                    identical = false;
                }
            }
        });
        assert!(identical);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = NetworkSpec::fc_classifier(8, &[8], 2);
        let a = Network::build(spec.clone(), 1).unwrap();
        let b = Network::build(spec, 2).unwrap();
        let (wa, wb) = match (a.params("s0.m0.fc0"), b.params("s0.m0.fc0")) {
            (Some(LayerParams::Fc { w: wa, .. }), Some(LayerParams::Fc { w: wb, .. })) => (wa, wb),
            _ => panic!("missing fc params"),
        };
        assert_ne!(wa.data(), wb.data());
    }

    #[test]
    fn invalid_spec_fails_build_with_violation_list() {
        let mut spec = NetworkSpec::fc_classifier(4, &[3], 2);
        spec.decision.kind = LayerKind::Decision { in_dim: 99, classes: 2 };
        match Network::build(spec, 0) {
            Err(Error::Validation(msgs)) => assert!(!msgs.is_empty()),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn conv_template_builds_with_all_params_bound() {
        let widths = BranchWidths {
            b1x1: 4,
            b3x3_reduce: 3,
            b3x3: 6,
            bdbl_reduce: 2,
            bdbl: 4,
            bpool_proj: 2,
        };
        let spec = modular_conv_classifier((1, 12, 12), 8, &[widths], &[2], 3);
        let net = Network::build(spec, 3).unwrap();
        let mut n = 0;
        net.for_each_param(|_, _, _| n += 1);
        assert!(n > 0);
    }
}
