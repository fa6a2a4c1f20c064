//! Closed-form parameter and FLOP counters for the trunk of a spec.
//!
//! Parameters: fc/decision (in+1)·out, conv F·(C·kh·kw+1), batchnorm 2·ch
//! (scale and shift; running statistics are buffers, not parameters).
//! FLOPs: per-sample forward multiply-accumulates of weight layers counted
//! as 2·MACs plus the bias adds; everything else is ignored.

use super::{layer_out_shape, DataShape, LayerKind, LayerSpec, ModuleSpec, NetworkSpec};

pub fn layer_param_count(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Fc { in_dim, out_dim } => (in_dim + 1) * out_dim,
        LayerKind::Decision { in_dim, classes } => (in_dim + 1) * classes,
        LayerKind::Conv { in_ch, out_ch, kh, kw, .. } => out_ch * (in_ch * kh * kw + 1),
        LayerKind::BatchNorm { ch } => 2 * ch,
        _ => 0,
    }
}

/// Trainable parameters of the trunk (aux heads excluded — they are a
/// training aid, stripped at evaluation).
pub fn param_count(spec: &NetworkSpec) -> usize {
    trunk_layers(spec).iter().map(|l| layer_param_count(&l.kind)).sum()
}

fn trunk_layers(spec: &NetworkSpec) -> Vec<&LayerSpec> {
    let mut v: Vec<&LayerSpec> = spec.stem.iter().collect();
    for stage in &spec.stages {
        for module in &stage.modules {
            v.extend(module.layers());
        }
        v.extend(stage.transition.iter());
    }
    v.extend(spec.head.iter());
    v.push(&spec.decision);
    v
}

fn layer_flops(kind: &LayerKind, input: &DataShape) -> usize {
    match *kind {
        LayerKind::Fc { in_dim, out_dim } => 2 * in_dim * out_dim + out_dim,
        LayerKind::Decision { in_dim, classes } => 2 * in_dim * classes + classes,
        LayerKind::Conv { in_ch, out_ch, kh, kw, .. } => {
            if let Ok(DataShape::Image { h, w, .. }) = layer_out_shape(kind, input) {
                (2 * in_ch * kh * kw + 1) * out_ch * h * w
            } else {
                0
            }
        }
        _ => 0,
    }
}

/// Per-layer FLOPs of the trunk, id-keyed, in traversal order.
pub fn layer_flops_map(spec: &NetworkSpec) -> Vec<(String, usize)> {
    let mut rows = Vec::new();
    let Ok(mut shape) = DataShape::from_input(&spec.input_shape) else {
        return rows;
    };
    let walk_chain = |layers: &[LayerSpec], shape: &mut DataShape, rows: &mut Vec<(String, usize)>| {
        for layer in layers {
            rows.push((layer.id.clone(), layer_flops(&layer.kind, shape)));
            if let Ok(next) = layer_out_shape(&layer.kind, shape) {
                *shape = next;
            }
        }
    };
    walk_chain(&spec.stem, &mut shape, &mut rows);
    for stage in &spec.stages {
        for module in &stage.modules {
            match module {
                ModuleSpec::Chain(layers) => walk_chain(layers, &mut shape, &mut rows),
                ModuleSpec::Branched { branches, .. } => {
                    let mut out_c = 0;
                    let mut out_hw = (1, 1);
                    for branch in branches {
                        let mut s = shape.clone();
                        walk_chain(branch, &mut s, &mut rows);
                        if let DataShape::Image { c, h, w } = s {
                            out_c += c;
                            out_hw = (h, w);
                        }
                    }
                    shape = DataShape::Image { c: out_c, h: out_hw.0, w: out_hw.1 };
                }
            }
        }
        walk_chain(&stage.transition, &mut shape, &mut rows);
    }
    walk_chain(&spec.head, &mut shape, &mut rows);
    rows.push((spec.decision.id.clone(), layer_flops(&spec.decision.kind, &shape)));
    rows
}

/// Per-sample forward FLOPs of the trunk.
pub fn flop_count(spec: &NetworkSpec) -> usize {
    let mut total = 0usize;
    let Ok(mut shape) = DataShape::from_input(&spec.input_shape) else {
        return 0;
    };
    let walk_chain = |layers: &[LayerSpec], shape: &mut DataShape, total: &mut usize| {
        for layer in layers {
            *total += layer_flops(&layer.kind, shape);
            if let Ok(next) = layer_out_shape(&layer.kind, shape) {
                *shape = next;
            }
        }
    };
    walk_chain(&spec.stem, &mut shape, &mut total);
    for stage in &spec.stages {
        for module in &stage.modules {
            match module {
                ModuleSpec::Chain(layers) => walk_chain(layers, &mut shape, &mut total),
                ModuleSpec::Branched { branches, .. } => {
                    let mut out_c = 0;
                    let mut out_hw = (1, 1);
                    for branch in branches {
                        let mut s = shape.clone();
                        walk_chain(branch, &mut s, &mut total);
                        if let DataShape::Image { c, h, w } = s {
                            out_c += c;
                            out_hw = (h, w);
                        }
                    }
                    shape = DataShape::Image { c: out_c, h: out_hw.0, w: out_hw.1 };
                }
            }
        }
        walk_chain(&stage.transition, &mut shape, &mut total);
    }
    walk_chain(&spec.head, &mut shape, &mut total);
    total += layer_flops(&spec.decision.kind, &shape);
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;

    #[test]
    fn mnist_fc_net_matches_hand_derived_count() {
        // Σ (fan_in + 1) · fan_out over 784-1024-1024-1024-1024-32-10:
        //   785·1024 + 3·1025·1024 + 1025·32 + 33·10 = 3_985_770
        let spec = NetworkSpec::fc_classifier(784, &[1024, 1024, 1024, 1024, 32], 10);
        let by_hand = 785 * 1024 + 3 * 1025 * 1024 + 1025 * 32 + 33 * 10;
        assert_eq!(param_count(&spec), by_hand);
        assert_eq!(by_hand, 3_985_770);
        // the published headline figure rounds this to 4.0M
        assert!((param_count(&spec) as f64 - 4.0e6).abs() / 4.0e6 < 0.01);
    }

    #[test]
    fn fc_flops_match_hand_formula() {
        let spec = NetworkSpec::fc_classifier(3, &[5, 2], 4);
        // 2·3·5+5 + 2·5·2+2 + 2·2·4+4
        assert_eq!(flop_count(&spec), 35 + 22 + 20);
    }

    #[test]
    fn conv_params_match_hand_formula() {
        use crate::nn::{LayerKind, LayerSpec, ModuleSpec, StageSpec};
        let spec = NetworkSpec {
            input_shape: vec![2, 8, 8],
            stem: vec![
                LayerSpec::new("stem.conv0", LayerKind::Conv {
                    in_ch: 2, out_ch: 3, kh: 3, kw: 3, stride: 1, pad: 1,
                }),
                LayerSpec::new("stem.relu0", LayerKind::Relu),
            ],
            stages: vec![StageSpec {
                modules: vec![ModuleSpec::Chain(vec![LayerSpec::new(
                    "s0.m0.pool",
                    LayerKind::AvgPool { k: 8, stride: 1, pad: 0 },
                )])],
                transition: vec![],
            }],
            head: vec![],
            decision: LayerSpec::new("decision", LayerKind::Decision { in_dim: 3, classes: 2 }),
            aux_heads: vec![],
        };
        spec.validate().unwrap();
        // conv: 3·(2·3·3+1) = 57, decision: 4·2 = 8
        assert_eq!(param_count(&spec), 57 + 8);
        // conv flops: (2·2·3·3+1)·3·8·8 = 37·192 = 7104; decision: 2·3·2+2 = 14
        assert_eq!(flop_count(&spec), 7104 + 14);
    }
}
