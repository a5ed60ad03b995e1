//! End-to-end model assembly: encoder → object filter → graph stack → heads,
//! plus the encoder-only baseline used as the ablation reference row.
//!
//! A forward pass builds every stage on one tape, so a single backward sweep
//! yields gradients for all parameter groups. Parameter tensors are always
//! created on the tape in [`Model::tensors`] order, which is also the
//! checkpoint and optimizer order.

use crate::autodiff::{scalar_value, Gradients, Tape, Tensor, Var};
use crate::encoder::{encode_on, EncoderConfig, EncoderMode, EncoderParams, EncoderVars, GRID_SIZE};
use crate::error::{Result, ThornError};
use crate::heads::{
    noun_logits_on, verb_logits_from_adjacency_on, verb_logits_from_nodes_on, HeadParams,
    HeadsConfig, HeadVars, LossBreakdown, PredictionBundle,
};
use crate::nn::LinearParams;
use crate::orf::{classify_on, filter_on, OrfConfig, OrfParams, OrfVars};
use crate::orr::{collect_adjacency, stack_forward_on, AdjacencyState, GraphBlockParams, GraphBlockVars, OrrConfig};
use ndarray::{Array2, Array4, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters shared by both model kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub verbs: usize,
    pub node_mode: EncoderMode,
    pub verb_from_nodes: bool,
    pub n_blocks: usize,
    pub heads: usize,
    pub d1: usize,
    pub d2: usize,
    pub d_e: usize,
    pub d_g: usize,
    pub tcn_kernel: usize,
    pub dropout: f64,
    pub strict_final_relu: bool,
    pub shared_classifier: bool,
    pub shared_base_adjacency: bool,
    pub encoder_channels: [usize; 4],
    /// Encoder-only baseline: global pool plus two dense heads.
    pub baseline: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for the given label spaces.
    pub fn new(classes: usize, verbs: usize) -> Self {
        let d1 = 48;
        ModelConfig {
            classes,
            verbs,
            node_mode: EncoderMode::SpatioTemporal,
            verb_from_nodes: false,
            n_blocks: 5,
            heads: 3,
            d1,
            d2: 32,
            d_e: 8,
            d_g: 256,
            tcn_kernel: 9,
            dropout: 0.3,
            strict_final_relu: false,
            shared_classifier: false,
            shared_base_adjacency: false,
            encoder_channels: EncoderConfig::with_d1(d1).channels,
            baseline: false,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { d1: self.d1, d_g: self.d_g, channels: self.encoder_channels }
    }

    /// Flattened per-frame width the object filter consumes.
    pub fn orf_input_width(&self) -> usize {
        match self.node_mode {
            EncoderMode::SpatioTemporal => GRID_SIZE * GRID_SIZE * self.d1,
            EncoderMode::Temporal => self.d_g,
        }
    }

    fn orf_config(&self) -> OrfConfig {
        OrfConfig {
            classes: self.classes,
            input_width: self.orf_input_width(),
            d2: self.d2,
            dropout: self.dropout,
            strict_final_relu: self.strict_final_relu,
            shared_classifier: self.shared_classifier,
        }
    }

    fn orr_config(&self) -> OrrConfig {
        OrrConfig {
            classes: self.classes,
            d2: self.d2,
            d_e: self.d_e,
            heads: self.heads,
            tcn_kernel: self.tcn_kernel,
            shared_base_adjacency: self.shared_base_adjacency,
        }
    }

    fn heads_config(&self) -> HeadsConfig {
        HeadsConfig {
            classes: self.classes,
            verbs: self.verbs,
            d2: self.d2,
            verb_from_nodes: self.verb_from_nodes,
        }
    }

    /// Fixed-order numeric encoding embedded in checkpoints.
    pub fn to_meta(&self) -> Vec<f64> {
        vec![
            1.0, // meta version
            self.classes as f64,
            self.verbs as f64,
            matches!(self.node_mode, EncoderMode::Temporal) as u8 as f64,
            self.verb_from_nodes as u8 as f64,
            self.n_blocks as f64,
            self.heads as f64,
            self.d1 as f64,
            self.d2 as f64,
            self.d_e as f64,
            self.d_g as f64,
            self.tcn_kernel as f64,
            self.dropout,
            self.strict_final_relu as u8 as f64,
            self.shared_classifier as u8 as f64,
            self.shared_base_adjacency as u8 as f64,
            self.encoder_channels[0] as f64,
            self.encoder_channels[1] as f64,
            self.encoder_channels[2] as f64,
            self.encoder_channels[3] as f64,
            self.baseline as u8 as f64,
        ]
    }

    pub fn from_meta(meta: &[f64]) -> Result<Self> {
        if meta.len() != 21 || meta[0] != 1.0 {
            return Err(ThornError::Checkpoint(format!(
                "unsupported model meta block (version {:?}, {} values)",
                meta.first(),
                meta.len()
            )));
        }
        Ok(ModelConfig {
            classes: meta[1] as usize,
            verbs: meta[2] as usize,
            node_mode: if meta[3] == 1.0 { EncoderMode::Temporal } else { EncoderMode::SpatioTemporal },
            verb_from_nodes: meta[4] == 1.0,
            n_blocks: meta[5] as usize,
            heads: meta[6] as usize,
            d1: meta[7] as usize,
            d2: meta[8] as usize,
            d_e: meta[9] as usize,
            d_g: meta[10] as usize,
            tcn_kernel: meta[11] as usize,
            dropout: meta[12],
            strict_final_relu: meta[13] == 1.0,
            shared_classifier: meta[14] == 1.0,
            shared_base_adjacency: meta[15] == 1.0,
            encoder_channels: [meta[16] as usize, meta[17] as usize, meta[18] as usize, meta[19] as usize],
            baseline: meta[20] == 1.0,
        })
    }
}

/// Baseline dense heads over the globally pooled encoder feature.
#[derive(Clone, Debug)]
pub struct BaselineHeads {
    pub verb: LinearParams,
    pub noun: LinearParams,
}

/// A trainable model: the full graph-reasoning pipeline or the baseline.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    /// Present on the full model only.
    pub orf: Option<OrfParams>,
    pub blocks: Vec<GraphBlockParams>,
    pub heads: Option<HeadParams>,
    pub baseline_heads: Option<BaselineHeads>,
}

impl Model {
    pub fn init(seed: u64, config: &ModelConfig) -> Result<Model> {
        if config.classes == 0 || config.verbs == 0 {
            return Err(ThornError::Config("class counts must be positive".into()));
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init_with(master.gen(), config.encoder_config())?;
        if config.baseline {
            let verb = LinearParams::init(&mut master, config.d1, config.verbs);
            let noun = LinearParams::init(&mut master, config.d1, config.classes);
            return Ok(Model {
                config: config.clone(),
                encoder,
                orf: None,
                blocks: Vec::new(),
                heads: None,
                baseline_heads: Some(BaselineHeads { verb, noun }),
            });
        }
        if config.n_blocks == 0 {
            return Err(ThornError::Config("graph stack needs at least one block".into()));
        }
        let orf = OrfParams::init(master.gen(), config.orf_config())?;
        let orr_cfg = config.orr_config();
        let blocks: Result<Vec<_>> = (0..config.n_blocks)
            .map(|_| GraphBlockParams::init(&mut master, orr_cfg))
            .collect();
        let heads = HeadParams::init(&mut master, config.heads_config())?;
        Ok(Model {
            config: config.clone(),
            encoder,
            orf: Some(orf),
            blocks: blocks?,
            heads: Some(heads),
            baseline_heads: None,
        })
    }

    /// Named parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.tensors();
        if let Some(orf) = &self.orf {
            out.extend(orf.tensors());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors(&format!("orr.block{i}")));
        }
        if let Some(heads) = &self.heads {
            out.extend(heads.tensors());
        }
        if let Some(bh) = &self.baseline_heads {
            out.push(("baseline.verb.weight".into(), &bh.verb.weight));
            out.push(("baseline.verb.bias".into(), &bh.verb.bias));
            out.push(("baseline.noun.weight".into(), &bh.noun.weight));
            out.push(("baseline.noun.bias".into(), &bh.noun.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.tensors_mut();
        if let Some(orf) = &mut self.orf {
            out.extend(orf.tensors_mut());
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut(&format!("orr.block{i}")));
        }
        if let Some(heads) = &mut self.heads {
            out.extend(heads.tensors_mut());
        }
        if let Some(bh) = &mut self.baseline_heads {
            out.push(("baseline.verb.weight".into(), &mut bh.verb.weight));
            out.push(("baseline.verb.bias".into(), &mut bh.verb.bias));
            out.push(("baseline.noun.weight".into(), &mut bh.noun.weight));
            out.push(("baseline.noun.bias".into(), &mut bh.noun.bias));
        }
        out
    }

    pub fn scalar_parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Forward one clip. `targets` adds the three-way loss to the tape.
    pub fn forward(
        &self,
        clip: &Array4<f64>,
        training: bool,
        rng: &mut ChaCha8Rng,
        targets: Option<&Targets>,
    ) -> Result<ForwardPass> {
        if let Some(t) = targets {
            if t.verb >= self.config.verbs {
                return Err(ThornError::InvalidInput(format!(
                    "verb label {} out of range (C_v = {})",
                    t.verb, self.config.verbs
                )));
            }
            if t.noun >= self.config.classes {
                return Err(ThornError::InvalidInput(format!(
                    "noun label {} out of range (C_o = {})",
                    t.noun, self.config.classes
                )));
            }
            crate::orf::validate_presence(&t.presence)?;
        }
        let mut tape = Tape::new();
        let params_start = tape.len();
        let vars = ModelVars::leaf(&mut tape, self);
        let params_count = tape.len() - params_start;
        let clip_var = tape.leaf(clip.clone().into_dyn());
        let frames = clip.dim().0;

        if self.config.baseline {
            return self.forward_baseline(tape, clip_var, vars, params_start, params_count, targets);
        }

        let enc_cfg = self.config.encoder_config();
        let scene = encode_on(&mut tape, clip_var, &vars.encoder, &enc_cfg, self.config.node_mode)?;
        let (grid_var, scene_flat) = match self.config.node_mode {
            EncoderMode::SpatioTemporal => {
                let flat = tape.reshape(scene, &[frames, self.config.orf_input_width()]);
                (Some(scene), flat)
            }
            EncoderMode::Temporal => (None, scene),
        };
        let orf_cfg = self.config.orf_config();
        let orf_vars = vars.orf.as_ref().expect("full model has orf");
        let orf_nodes = filter_on(&mut tape, scene_flat, orf_vars, &orf_cfg, training, rng);
        let object_logits = classify_on(&mut tape, orf_nodes, orf_vars, &orf_cfg);
        let orr_cfg = self.config.orr_config();
        let (refined, adjacency_vars) = stack_forward_on(&mut tape, orf_nodes, &vars.blocks, &orr_cfg)?;
        let head_vars = vars.heads.as_ref().expect("full model has heads");
        let heads_cfg = self.config.heads_config();
        let noun_var = noun_logits_on(&mut tape, refined, head_vars, &heads_cfg);
        let verb_var = if self.config.verb_from_nodes {
            verb_logits_from_nodes_on(&mut tape, refined, head_vars, &heads_cfg)
        } else {
            let last = adjacency_vars.last().expect("at least one block");
            let mut acc = last[0];
            for &head in &last[1..] {
                acc = tape.add(acc, head);
            }
            let mean = tape.scale(acc, 1.0 / last.len() as f64);
            verb_logits_from_adjacency_on(&mut tape, mean, head_vars, &heads_cfg)
        };

        let loss_vars = targets.map(|t| {
            let lv = tape.cross_entropy_logits(verb_var, t.verb);
            let ln_ = tape.cross_entropy_logits(noun_var, t.noun);
            let lo = tape.bce_with_logits(object_logits, t.presence.clone());
            let partial = tape.add(lv, ln_);
            let total = tape.add(partial, lo);
            LossVars { verbs: lv, nouns: ln_, objects: Some(lo), total }
        });

        Ok(ForwardPass {
            tape,
            clip_var,
            grid_var,
            orf_nodes_var: Some(orf_nodes),
            refined_nodes_var: Some(refined),
            object_logits_var: Some(object_logits),
            verb_var,
            noun_var,
            adjacency_vars,
            loss_vars,
            params_start,
            params_count,
            classes: self.config.classes,
        })
    }

    fn forward_baseline(
        &self,
        mut tape: Tape,
        clip_var: Var,
        vars: ModelVars,
        params_start: usize,
        params_count: usize,
        targets: Option<&Targets>,
    ) -> Result<ForwardPass> {
        let enc_cfg = self.config.encoder_config();
        let grid = encode_on(&mut tape, clip_var, &vars.encoder, &enc_cfg, EncoderMode::SpatioTemporal)?;
        let per_frame = tape.spatial_mean_pool(grid);
        let pooled = tape.mean_axis0(per_frame);
        let flat = tape.reshape(pooled, &[1, self.config.d1]);
        let bh = vars.baseline_heads.as_ref().expect("baseline heads");
        let verb = tape.linear(flat, bh.0, bh.1);
        let verb_var = tape.reshape(verb, &[self.config.verbs]);
        let noun = tape.linear(flat, bh.2, bh.3);
        let noun_var = tape.reshape(noun, &[self.config.classes]);
        let loss_vars = targets.map(|t| {
            let lv = tape.cross_entropy_logits(verb_var, t.verb);
            let ln_ = tape.cross_entropy_logits(noun_var, t.noun);
            let total = tape.add(lv, ln_);
            LossVars { verbs: lv, nouns: ln_, objects: None, total }
        });
        Ok(ForwardPass {
            tape,
            clip_var,
            grid_var: Some(grid),
            orf_nodes_var: None,
            refined_nodes_var: None,
            object_logits_var: None,
            verb_var,
            noun_var,
            adjacency_vars: Vec::new(),
            loss_vars,
            params_start,
            params_count,
            classes: self.config.classes,
        })
    }
}

/// Training targets for one clip.
#[derive(Clone, Debug)]
pub struct Targets {
    pub verb: usize,
    pub noun: usize,
    /// Per-frame multi-hot object presence `(T, C_o)`.
    pub presence: Array2<f64>,
}

struct BaselineHeadVars(Var, Var, Var, Var);

struct ModelVars {
    encoder: EncoderVars,
    orf: Option<OrfVars>,
    blocks: Vec<GraphBlockVars>,
    heads: Option<HeadVars>,
    baseline_heads: Option<BaselineHeadVars>,
}

impl ModelVars {
    /// Creates leaves in exactly [`Model::tensors`] order.
    fn leaf(tape: &mut Tape, model: &Model) -> ModelVars {
        let encoder = EncoderVars::leaf(tape, &model.encoder);
        let orf = model.orf.as_ref().map(|p| OrfVars::leaf(tape, p));
        let blocks = model.blocks.iter().map(|b| GraphBlockVars::leaf(tape, b)).collect();
        let heads = model.heads.as_ref().map(|p| HeadVars::leaf(tape, p));
        let baseline_heads = model.baseline_heads.as_ref().map(|bh| {
            BaselineHeadVars(
                tape.leaf(bh.verb.weight.clone()),
                tape.leaf(bh.verb.bias.clone()),
                tape.leaf(bh.noun.weight.clone()),
                tape.leaf(bh.noun.bias.clone()),
            )
        });
        ModelVars { encoder, orf, blocks, heads, baseline_heads }
    }
}

pub struct LossVars {
    pub verbs: Var,
    pub nouns: Var,
    pub objects: Option<Var>,
    pub total: Var,
}

/// Everything a forward pass produced, with the tape kept alive for
/// backward sweeps and value inspection.
pub struct ForwardPass {
    pub tape: Tape,
    pub clip_var: Var,
    pub grid_var: Option<Var>,
    pub orf_nodes_var: Option<Var>,
    pub refined_nodes_var: Option<Var>,
    pub object_logits_var: Option<Var>,
    pub verb_var: Var,
    pub noun_var: Var,
    pub adjacency_vars: Vec<Vec<Var>>,
    pub loss_vars: Option<LossVars>,
    params_start: usize,
    params_count: usize,
    classes: usize,
}

impl ForwardPass {
    pub fn bundle(&self) -> PredictionBundle {
        let object_logits = match self.object_logits_var {
            Some(v) => self.tape.value(v).view().into_dimensionality::<Ix2>().unwrap().to_owned(),
            None => Array2::zeros((0, self.classes)),
        };
        PredictionBundle {
            verb_logits: self.tape.value(self.verb_var).view().into_dimensionality::<Ix1>().unwrap().to_owned(),
            noun_logits: self.tape.value(self.noun_var).view().into_dimensionality::<Ix1>().unwrap().to_owned(),
            object_logits,
        }
    }

    pub fn adjacency_state(&self) -> Option<AdjacencyState> {
        if self.adjacency_vars.is_empty() {
            return None;
        }
        Some(collect_adjacency(&self.tape, &self.adjacency_vars, self.classes))
    }

    pub fn loss_breakdown(&self) -> Option<LossBreakdown> {
        self.loss_vars.as_ref().map(|l| LossBreakdown {
            verbs: scalar_value(self.tape.value(l.verbs)),
            nouns: scalar_value(self.tape.value(l.nouns)),
            objects: l.objects.map(|o| scalar_value(self.tape.value(o))).unwrap_or(0.0),
            total: scalar_value(self.tape.value(l.total)),
        })
    }

    /// Run backward from the total loss and return per-parameter gradients in
    /// [`Model::tensors`] order (zeros for unreachable parameters).
    pub fn parameter_gradients(&self) -> Result<Vec<Tensor>> {
        let loss = self
            .loss_vars
            .as_ref()
            .ok_or_else(|| ThornError::InvalidInput("forward pass has no loss".into()))?;
        let grads = self.gradients(loss.total);
        Ok(self.parameter_gradients_from(&grads))
    }

    pub fn gradients(&self, loss: Var) -> Gradients {
        self.tape.backward(loss)
    }

    pub fn parameter_gradients_from(&self, grads: &Gradients) -> Vec<Tensor> {
        (0..self.params_count)
            .map(|i| grads.wrt(&self.tape, Var(self.params_start + i)))
            .collect()
    }

    /// Parameter leaf var by index in [`Model::tensors`] order.
    pub fn param_var(&self, index: usize) -> Var {
        assert!(index < self.params_count);
        Var(self.params_start + index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(3, 3);
        cfg.n_blocks = 1;
        cfg.d1 = 8;
        cfg.d2 = 4;
        cfg.d_e = 2;
        cfg.d_g = 8;
        cfg.tcn_kernel = 3;
        cfg.dropout = 0.0;
        cfg.encoder_channels = [4, 4, 4, 4];
        cfg
    }

    fn small_clip(t: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Array4::from_shape_fn((t, 16, 16, 3), |_| rng.gen_range(0.0..1.0))
    }

    fn targets(t: usize, classes: usize) -> Targets {
        Targets {
            verb: 1,
            noun: 2,
            presence: Array2::from_shape_fn((t, classes), |(ti, c)| ((ti + c) % 2) as f64),
        }
    }

    #[test]
    fn leaf_order_matches_tensor_order() {
        for baseline in [false, true] {
            let mut cfg = small_config();
            cfg.baseline = baseline;
            let model = Model::init(0, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let fwd = model.forward(&small_clip(3), false, &mut rng, None).unwrap();
            let tensors = model.tensors();
            assert_eq!(tensors.len(), fwd.params_count);
            for (i, (name, tensor)) in tensors.iter().enumerate() {
                let leaf = fwd.tape.value(fwd.param_var(i));
                assert_eq!(&leaf, tensor, "leaf {i} ({name}) out of order");
            }
        }
    }

    #[test]
    fn forward_shapes_and_loss() {
        let cfg = small_config();
        let model = Model::init(0, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = targets(3, 3);
        let fwd = model.forward(&small_clip(3), false, &mut rng, Some(&t)).unwrap();
        let bundle = fwd.bundle();
        assert_eq!(bundle.verb_logits.len(), 3);
        assert_eq!(bundle.noun_logits.len(), 3);
        assert_eq!(bundle.object_logits.dim(), (3, 3));
        let state = fwd.adjacency_state().unwrap();
        assert_eq!(state.superimposed.dim(), (1, 3, 3, 3));
        let loss = fwd.loss_breakdown().unwrap();
        assert!(loss.total > 0.0);
        assert!((loss.total - (loss.verbs + loss.nouns + loss.objects)).abs() < 1e-12);
        let grads = fwd.parameter_gradients().unwrap();
        assert_eq!(grads.len(), model.tensors().len());
        // Every active parameter group receives some gradient signal; the
        // temporal projection head is idle in spatio-temporal mode.
        for ((name, _), g) in model.tensors().iter().zip(&grads) {
            if name.starts_with("encoder.proj_temporal") {
                continue;
            }
            assert!(g.iter().any(|&v| v != 0.0), "{name} has all-zero gradient");
        }
    }

    #[test]
    fn temporal_mode_forward() {
        let mut cfg = small_config();
        cfg.node_mode = EncoderMode::Temporal;
        let model = Model::init(0, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.forward(&small_clip(4), false, &mut rng, None).unwrap();
        assert!(fwd.grid_var.is_none());
        assert_eq!(fwd.bundle().object_logits.dim(), (4, 3));
    }

    #[test]
    fn baseline_forward() {
        let mut cfg = small_config();
        cfg.baseline = true;
        let model = Model::init(0, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = targets(3, 3);
        let fwd = model.forward(&small_clip(3), false, &mut rng, Some(&t)).unwrap();
        let loss = fwd.loss_breakdown().unwrap();
        assert_eq!(loss.objects, 0.0);
        assert!(fwd.adjacency_state().is_none());
    }

    #[test]
    fn rejects_out_of_range_targets() {
        let cfg = small_config();
        let model = Model::init(0, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = Targets { verb: 3, noun: 0, presence: Array2::zeros((3, 3)) };
        assert!(model.forward(&small_clip(3), false, &mut rng, Some(&bad)).is_err());
    }

    #[test]
    fn meta_roundtrip() {
        let mut cfg = small_config();
        cfg.node_mode = EncoderMode::Temporal;
        cfg.shared_classifier = true;
        let back = ModelConfig::from_meta(&cfg.to_meta()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn forward_deterministic_in_eval_mode() {
        let cfg = small_config();
        let model = Model::init(0, &cfg).unwrap();
        let clip = small_clip(3);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        let a = model.forward(&clip, false, &mut r1, None).unwrap().bundle();
        let b = model.forward(&clip, false, &mut r2, None).unwrap().bundle();
        assert_eq!(a.verb_logits, b.verb_logits);
        assert_eq!(a.noun_logits, b.noun_logits);
        assert_eq!(a.object_logits, b.object_logits);
    }
}
