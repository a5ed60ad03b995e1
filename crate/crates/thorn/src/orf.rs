//! Object Representation Filter.
//!
//! Turns the mixed scene feature into one representation per object class:
//! each class owns a dense filter over the flattened per-frame feature, so
//! `nodes[:, i, :] = ReLU(scene_flat · W_i + b_i)`, with dropout applied once
//! across the concatenated result during training. A per-class scalar head on
//! top produces per-frame object-presence logits trained with binary
//! cross-entropy against pseudo ground truth.

use crate::autodiff::{scalar_value, Tape, Tensor, Var};
use crate::encoder::SceneFeature;
use crate::error::{Result, ThornError};
use crate::nn::fan_in_uniform;
use ndarray::{Array2, Array3, Ix2, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrfConfig {
    /// Number of object classes `C_o`.
    pub classes: usize,
    /// Flattened per-frame input width (`H'·W'·D1` or `D_g`).
    pub input_width: usize,
    /// Per-class channel size `D2`.
    pub d2: usize,
    /// Dropout rate on the concatenated node tensor.
    pub dropout: f64,
    /// Apply the literal final ReLU to classifier logits. Off by default:
    /// a ReLU in front of a BCE head would pin every probability at >= 0.5.
    pub strict_final_relu: bool,
    /// Share one scalar presence head across classes instead of per-class heads.
    pub shared_classifier: bool,
}

impl OrfConfig {
    pub fn new(classes: usize, input_width: usize, d2: usize) -> Self {
        OrfConfig {
            classes,
            input_width,
            d2,
            dropout: 0.3,
            strict_final_relu: false,
            shared_classifier: false,
        }
    }
}

/// Per-class filter weights plus the object-presence classifier.
#[derive(Clone, Debug)]
pub struct OrfParams {
    pub config: OrfConfig,
    /// `(C_o, input_width, D2)`
    pub filter_weight: Tensor,
    /// `(C_o, D2)`
    pub filter_bias: Tensor,
    /// `(C_o, D2)` or `(1, D2)` when shared.
    pub cls_weight: Tensor,
    /// `(C_o,)` or `(1,)` when shared.
    pub cls_bias: Tensor,
}

impl OrfParams {
    pub fn init(seed: u64, config: OrfConfig) -> Result<Self> {
        if config.classes == 0 {
            return Err(ThornError::InvalidInput("object class count must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(ThornError::InvalidInput(format!(
                "dropout rate {} outside [0, 1)",
                config.dropout
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = if config.shared_classifier { 1 } else { config.classes };
        Ok(OrfParams {
            config,
            filter_weight: fan_in_uniform(
                &mut rng,
                &[config.classes, config.input_width, config.d2],
                config.input_width,
            ),
            filter_bias: Tensor::zeros(IxDyn(&[config.classes, config.d2])),
            cls_weight: fan_in_uniform(&mut rng, &[heads, config.d2], config.d2),
            cls_bias: Tensor::zeros(IxDyn(&[heads])),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("orf.filter.weight".into(), &self.filter_weight),
            ("orf.filter.bias".into(), &self.filter_bias),
            ("orf.classifier.weight".into(), &self.cls_weight),
            ("orf.classifier.bias".into(), &self.cls_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("orf.filter.weight".into(), &mut self.filter_weight),
            ("orf.filter.bias".into(), &mut self.filter_bias),
            ("orf.classifier.weight".into(), &mut self.cls_weight),
            ("orf.classifier.bias".into(), &mut self.cls_bias),
        ]
    }
}

pub struct OrfVars {
    pub filter_weight: Var,
    pub filter_bias: Var,
    pub cls_weight: Var,
    pub cls_bias: Var,
}

impl OrfVars {
    pub fn leaf(tape: &mut Tape, params: &OrfParams) -> Self {
        OrfVars {
            filter_weight: tape.leaf(params.filter_weight.clone()),
            filter_bias: tape.leaf(params.filter_bias.clone()),
            cls_weight: tape.leaf(params.cls_weight.clone()),
            cls_bias: tape.leaf(params.cls_bias.clone()),
        }
    }
}

/// Flatten a scene feature to the `(T, width)` matrix the filter consumes.
pub fn flatten_scene(scene: &SceneFeature) -> Array2<f64> {
    match scene {
        SceneFeature::Grid(g) => {
            let (t, h, w, d) = g.dim();
            g.to_owned()
                .into_shape_with_order((t, h * w * d))
                .expect("scene flatten")
        }
        SceneFeature::Pooled(p) => p.clone(),
    }
}

/// Filter on an existing tape. `scene_flat` is `(T, input_width)`; the result
/// is the node tensor `(T, C_o, D2)`. Dropout draws come from the caller's RNG
/// stream so parallel evaluation stays reproducible.
pub fn filter_on(
    tape: &mut Tape,
    scene_flat: Var,
    vars: &OrfVars,
    config: &OrfConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Var {
    let lin = tape.per_class_linear(scene_flat, vars.filter_weight, vars.filter_bias);
    let act = tape.relu(lin);
    if training && config.dropout > 0.0 {
        let shape = tape.value(act).raw_dim();
        let keep = 1.0 - config.dropout;
        let mask = Tensor::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < config.dropout { 0.0 } else { 1.0 / keep }
        });
        let mask_var = tape.leaf(mask);
        tape.mul(act, mask_var)
    } else {
        act
    }
}

/// Presence logits on an existing tape: `(T, C_o, D2)` -> `(T, C_o)`.
pub fn classify_on(tape: &mut Tape, nodes: Var, vars: &OrfVars, config: &OrfConfig) -> Var {
    let logits = tape.per_class_dot(nodes, vars.cls_weight, vars.cls_bias);
    if config.strict_final_relu {
        tape.relu(logits)
    } else {
        logits
    }
}

/// Standalone filter: validates shapes and returns the node tensor.
pub fn filter(
    scene: &SceneFeature,
    params: &OrfParams,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    let flat = flatten_scene(scene);
    if flat.ncols() != params.config.input_width {
        return Err(ThornError::shape(
            "orf.filter",
            format!("scene rows of width {}", params.config.input_width),
            format!("({}, {})", flat.nrows(), flat.ncols()),
        ));
    }
    let mut tape = Tape::new();
    let vars = OrfVars::leaf(&mut tape, params);
    let scene_var = tape.leaf(flat.into_dyn());
    let nodes = filter_on(&mut tape, scene_var, &vars, &params.config, training, rng);
    Ok(tape.value(nodes).view().into_dimensionality::<Ix3>().unwrap().to_owned())
}

/// Standalone presence logits from a node tensor.
pub fn classify_objects(nodes: &Array3<f64>, params: &OrfParams) -> Result<Array2<f64>> {
    let (_, c, d) = nodes.dim();
    if c != params.config.classes || d != params.config.d2 {
        return Err(ThornError::shape(
            "orf.classify_objects",
            format!("(T, {}, {})", params.config.classes, params.config.d2),
            format!("{:?}", nodes.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = OrfVars::leaf(&mut tape, params);
    let nodes_var = tape.leaf(nodes.clone().into_dyn());
    let logits = classify_on(&mut tape, nodes_var, &vars, &params.config);
    Ok(tape.value(logits).view().into_dimensionality::<Ix2>().unwrap().to_owned())
}

/// Validate a multi-hot presence grid: every entry must be exactly 0 or 1.
pub fn validate_presence(presence: &Array2<f64>) -> Result<()> {
    if presence.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(ThornError::InvalidInput(
            "presence grid entries must be 0 or 1".into(),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy between presence logits and multi-hot targets.
pub fn object_pseudo_label_loss(logits: &Array2<f64>, presence: &Array2<f64>) -> Result<f64> {
    validate_presence(presence)?;
    if logits.dim() != presence.dim() {
        return Err(ThornError::shape(
            "orf.object_pseudo_label_loss",
            format!("{:?}", logits.shape()),
            format!("{:?}", presence.shape()),
        ));
    }
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone().into_dyn());
    let loss = tape.bce_with_logits(lv, presence.clone());
    Ok(scalar_value(tape.value(loss)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_grad_error};
    use ndarray::Array4;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_scene(seed: u64, t: usize, width: usize) -> SceneFeature {
        let mut r = rng(seed);
        SceneFeature::Pooled(Array2::from_shape_fn((t, width), |_| r.gen_range(-1.0..1.0)))
    }

    #[test]
    fn paper_scale_shapes() {
        let config = OrfConfig::new(10, 7 * 7 * 432, 128);
        let params = OrfParams::init(0, config).unwrap();
        let mut r = rng(1);
        let grid = Array4::from_shape_fn((16, 7, 7, 432), |_| r.gen_range(0.0..1.0));
        let nodes = filter(&SceneFeature::Grid(grid), &params, false, &mut rng(2)).unwrap();
        assert_eq!(nodes.dim(), (16, 10, 128));
        let logits = classify_objects(&nodes, &params).unwrap();
        assert_eq!(logits.dim(), (16, 10));
    }

    #[test]
    fn zero_scene_zero_nodes() {
        let params = OrfParams::init(0, OrfConfig::new(4, 12, 5)).unwrap();
        let scene = SceneFeature::Pooled(Array2::zeros((3, 12)));
        let nodes = filter(&scene, &params, false, &mut rng(0)).unwrap();
        assert!(nodes.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_matches_naive_loops() {
        let config = OrfConfig::new(3, 6, 4);
        let params = OrfParams::init(7, config).unwrap();
        let scene = random_scene(3, 5, 6);
        let nodes = filter(&scene, &params, false, &mut rng(0)).unwrap();
        let flat = flatten_scene(&scene);
        for t in 0..5 {
            for c in 0..3 {
                for d in 0..4 {
                    let mut acc = params.filter_bias[[c, d]];
                    for f in 0..6 {
                        acc += flat[[t, f]] * params.filter_weight[[c, f, d]];
                    }
                    let want = acc.max(0.0);
                    assert!(
                        (nodes[[t, c, d]] - want).abs() < 1e-12,
                        "mismatch at ({t},{c},{d})"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_slice_filter_reproduces_channels() {
        // One class whose weight block copies input channels 2..6; with zero
        // bias and non-negative input the filter must reproduce them exactly.
        let config = OrfConfig::new(1, 8, 4);
        let mut params = OrfParams::init(0, config).unwrap();
        params.filter_weight.fill(0.0);
        params.filter_bias.fill(0.0);
        for d in 0..4 {
            params.filter_weight[[0, 2 + d, d]] = 1.0;
        }
        let mut r = rng(9);
        let flat = Array2::from_shape_fn((6, 8), |_| r.gen_range(0.0..1.0));
        let nodes = filter(&SceneFeature::Pooled(flat.clone()), &params, false, &mut rng(0)).unwrap();
        for t in 0..6 {
            for d in 0..4 {
                assert_eq!(nodes[[t, 0, d]], flat[[t, 2 + d]]);
            }
        }
    }

    #[test]
    fn classify_matches_naive_loops() {
        let config = OrfConfig::new(4, 6, 5);
        let params = OrfParams::init(3, config).unwrap();
        let mut r = rng(4);
        let nodes = Array3::from_shape_fn((3, 4, 5), |_| r.gen_range(-1.0..1.0));
        let logits = classify_objects(&nodes, &params).unwrap();
        for t in 0..3 {
            for c in 0..4 {
                let mut acc = params.cls_bias[[c]];
                for d in 0..5 {
                    acc += nodes[[t, c, d]] * params.cls_weight[[c, d]];
                }
                assert!((logits[[t, c]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_nodes_zero_weights_give_half_probability() {
        let config = OrfConfig::new(3, 4, 2);
        let mut params = OrfParams::init(0, config).unwrap();
        params.cls_weight.fill(0.0);
        params.cls_bias.fill(0.0);
        let nodes = Array3::zeros((2, 3, 2));
        let logits = classify_objects(&nodes, &params).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        // sigmoid(0) = 0.5, so BCE against any 0/1 target is ln 2.
        let presence = Array2::from_shape_fn((2, 3), |(t, c)| ((t + c) % 2) as f64);
        let loss = object_pseudo_label_loss(&logits, &presence).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_limit_and_oracle() {
        // All-ones presence with strongly positive logits drives the loss to 0.
        let logits = Array2::from_elem((2, 3), 50.0);
        let presence = Array2::ones((2, 3));
        assert!(object_pseudo_label_loss(&logits, &presence).unwrap() < 1e-20);

        let mut r = rng(5);
        let logits = Array2::from_shape_fn((3, 4), |_| r.gen_range(-2.0..2.0));
        let presence = Array2::from_shape_fn((3, 4), |_| (r.gen::<f64>() < 0.5) as u8 as f64);
        let got = object_pseudo_label_loss(&logits, &presence).unwrap();
        let mut want = 0.0;
        for t in 0..3 {
            for c in 0..4 {
                let p = 1.0 / (1.0 + (-logits[[t, c]]).exp());
                want += if presence[[t, c]] == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
            }
        }
        want /= 12.0;
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn rejects_non_binary_presence() {
        let logits = Array2::zeros((2, 2));
        let mut presence = Array2::zeros((2, 2));
        presence[[0, 1]] = 0.5;
        assert!(object_pseudo_label_loss(&logits, &presence).is_err());
    }

    #[test]
    fn rejects_width_mismatch_naming_shapes() {
        let params = OrfParams::init(0, OrfConfig::new(2, 10, 3)).unwrap();
        let scene = random_scene(1, 4, 9);
        let err = filter(&scene, &params, false, &mut rng(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("10") && msg.contains("(4, 9)"), "unhelpful error: {msg}");
    }

    #[test]
    fn class_independence_and_permutation_equivariance() {
        let config = OrfConfig::new(3, 5, 4);
        let params = OrfParams::init(11, config).unwrap();
        let scene = random_scene(12, 4, 5);
        let base = filter(&scene, &params, false, &mut rng(0)).unwrap();

        // Perturbing W_1 must leave classes 0 and 2 bit-identical.
        let mut perturbed = params.clone();
        perturbed.filter_weight[[1, 2, 3]] += 0.25;
        let out = filter(&scene, &perturbed, false, &mut rng(0)).unwrap();
        for t in 0..4 {
            for d in 0..4 {
                assert_eq!(out[[t, 0, d]], base[[t, 0, d]]);
                assert_eq!(out[[t, 2, d]], base[[t, 2, d]]);
            }
        }

        // Swapping the (W_i, b_i) pairs of classes 0 and 2 swaps the output
        // class lanes exactly.
        let mut swapped = params.clone();
        for f in 0..5 {
            for d in 0..4 {
                swapped.filter_weight[[0, f, d]] = params.filter_weight[[2, f, d]];
                swapped.filter_weight[[2, f, d]] = params.filter_weight[[0, f, d]];
            }
        }
        for d in 0..4 {
            swapped.filter_bias[[0, d]] = params.filter_bias[[2, d]];
            swapped.filter_bias[[2, d]] = params.filter_bias[[0, d]];
        }
        let out = filter(&scene, &swapped, false, &mut rng(0)).unwrap();
        for t in 0..4 {
            for d in 0..4 {
                assert_eq!(out[[t, 0, d]], base[[t, 2, d]]);
                assert_eq!(out[[t, 2, d]], base[[t, 0, d]]);
                assert_eq!(out[[t, 1, d]], base[[t, 1, d]]);
            }
        }
    }

    #[test]
    fn frame_independence() {
        let params = OrfParams::init(2, OrfConfig::new(2, 6, 3)).unwrap();
        let SceneFeature::Pooled(flat) = random_scene(8, 5, 6) else { unreachable!() };
        let base = filter(&SceneFeature::Pooled(flat.clone()), &params, false, &mut rng(0)).unwrap();
        let mut changed = flat.clone();
        for f in 0..6 {
            changed[[2, f]] += 1.0;
        }
        let out = filter(&SceneFeature::Pooled(changed), &params, false, &mut rng(0)).unwrap();
        for t in [0usize, 1, 3, 4] {
            assert_eq!(out.index_axis(ndarray::Axis(0), t), base.index_axis(ndarray::Axis(0), t));
        }
        assert_ne!(out.index_axis(ndarray::Axis(0), 2), base.index_axis(ndarray::Axis(0), 2));
    }

    #[test]
    fn dropout_scales_and_zeroes() {
        let mut config = OrfConfig::new(2, 4, 3);
        config.dropout = 0.5;
        let params = OrfParams::init(0, config).unwrap();
        let scene = random_scene(3, 6, 4);
        let eval_nodes = filter(&scene, &params, false, &mut rng(0)).unwrap();
        let train_nodes = filter(&scene, &params, true, &mut rng(42)).unwrap();
        let mut saw_zeroed = false;
        for (a, b) in train_nodes.iter().zip(eval_nodes.iter()) {
            if *b > 0.0 {
                // Kept cells are scaled by 1/(1-p) = 2, dropped cells are 0.
                assert!(*a == 0.0 || (*a - 2.0 * *b).abs() < 1e-12);
                saw_zeroed |= *a == 0.0;
            }
        }
        assert!(saw_zeroed, "expected at least one dropped cell at p=0.5");
        // Same RNG seed, same mask.
        let again = filter(&scene, &params, true, &mut rng(42)).unwrap();
        assert_eq!(train_nodes, again);
    }

    #[test]
    fn filter_gradient_matches_finite_differences() {
        let config = OrfConfig::new(3, 5, 4);
        let mut params = OrfParams::init(21, config).unwrap();
        let SceneFeature::Pooled(flat) = random_scene(22, 3, 5) else { unreachable!() };
        let presence = Array2::from_shape_fn((3, 3), |(t, c)| ((t + c) % 2) as f64);

        let eval = |p: &OrfParams| -> f64 {
            let mut tape = Tape::new();
            let vars = OrfVars::leaf(&mut tape, p);
            let scene_var = tape.leaf(flat.clone().into_dyn());
            let nodes = filter_on(&mut tape, scene_var, &vars, &p.config, false, &mut rng(0));
            let logits = classify_on(&mut tape, nodes, &vars, &p.config);
            let loss = tape.bce_with_logits(logits, presence.clone());
            scalar_value(tape.value(loss))
        };

        let mut tape = Tape::new();
        let vars = OrfVars::leaf(&mut tape, &params);
        let scene_var = tape.leaf(flat.clone().into_dyn());
        let nodes = filter_on(&mut tape, scene_var, &vars, &params.config, false, &mut rng(0));
        let logits = classify_on(&mut tape, nodes, &vars, &params.config);
        let loss = tape.bce_with_logits(logits, presence.clone());
        let grads = tape.backward(loss);
        let analytic = grads.wrt(&tape, vars.filter_weight);

        let snapshot = params.clone();
        let numeric = finite_difference(&mut params.filter_weight, 1e-6, |t| {
            let mut probe = snapshot.clone();
            probe.filter_weight = t.clone();
            eval(&probe)
        });
        let err = max_grad_error(&analytic, &numeric);
        assert!(err < 1e-4, "filter weight gradient error {err}");
    }
}
