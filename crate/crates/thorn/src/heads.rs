//! Final predictors and the joint loss.
//!
//! Nouns are read from the time-pooled refined node features (one scalar head
//! per class). Verbs are read from the learned relation structure itself: the
//! final block's superimposed adjacencies, averaged over heads, flattened,
//! and projected to verb logits. A config switch reroutes the verb head to
//! the pooled nodes instead, which is the weaker ablation variant. The joint
//! loss is the unweighted sum of verb NLL, noun NLL, and the per-frame
//! object-presence BCE.

use crate::autodiff::{scalar_value, Tape, Tensor, Var};
use crate::error::{Result, ThornError};
use crate::nn::LinearParams;
use crate::orf::validate_presence;
use crate::orr::AdjacencyState;
use ndarray::{Array1, Array2, Array3, Ix1, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadsConfig {
    /// Object class count `C_o` (also the noun label space).
    pub classes: usize,
    /// Verb class count `C_v`.
    pub verbs: usize,
    /// Node channel width `D2`.
    pub d2: usize,
    /// Predict verbs from pooled nodes instead of the adjacency matrix.
    pub verb_from_nodes: bool,
}

/// Noun head: per-class scalar on pooled nodes. Verb head: dense layer on the
/// flattened head-averaged adjacency (or on flattened pooled nodes).
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub config: HeadsConfig,
    /// `(C_o, D2)` per-class noun weights.
    pub noun_weight: Tensor,
    /// `(C_o,)`
    pub noun_bias: Tensor,
    pub verb: LinearParams,
}

impl HeadParams {
    pub fn init(rng: &mut ChaCha8Rng, config: HeadsConfig) -> Result<Self> {
        if config.classes == 0 || config.verbs == 0 {
            return Err(ThornError::InvalidInput("class counts must be positive".into()));
        }
        let verb_in = if config.verb_from_nodes {
            config.classes * config.d2
        } else {
            config.classes * config.classes
        };
        Ok(HeadParams {
            config,
            noun_weight: crate::nn::fan_in_uniform(rng, &[config.classes, config.d2], config.d2),
            noun_bias: Tensor::zeros(IxDyn(&[config.classes])),
            verb: LinearParams::init(rng, verb_in, config.verbs),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("heads.noun.weight".into(), &self.noun_weight),
            ("heads.noun.bias".into(), &self.noun_bias),
            ("heads.verb.weight".into(), &self.verb.weight),
            ("heads.verb.bias".into(), &self.verb.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("heads.noun.weight".into(), &mut self.noun_weight),
            ("heads.noun.bias".into(), &mut self.noun_bias),
            ("heads.verb.weight".into(), &mut self.verb.weight),
            ("heads.verb.bias".into(), &mut self.verb.bias),
        ]
    }
}

pub struct HeadVars {
    pub noun_weight: Var,
    pub noun_bias: Var,
    pub verb_weight: Var,
    pub verb_bias: Var,
}

impl HeadVars {
    pub fn leaf(tape: &mut Tape, params: &HeadParams) -> Self {
        HeadVars {
            noun_weight: tape.leaf(params.noun_weight.clone()),
            noun_bias: tape.leaf(params.noun_bias.clone()),
            verb_weight: tape.leaf(params.verb.weight.clone()),
            verb_bias: tape.leaf(params.verb.bias.clone()),
        }
    }
}

/// Model-side outputs for one clip.
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    pub verb_logits: Array1<f64>,
    pub noun_logits: Array1<f64>,
    /// Per-frame object presence logits `(T, C_o)`.
    pub object_logits: Array2<f64>,
}

/// Per-frame detector confidences `(T, C_o)`, each in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct DetectorScores {
    scores: Array2<f64>,
}

impl DetectorScores {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        if scores.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(ThornError::InvalidInput(
                "detector scores must lie in [0, 1]".into(),
            ));
        }
        Ok(DetectorScores { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    /// Per-class mean over all frames of the clip.
    pub fn clip_means(&self) -> Array1<f64> {
        let t = self.scores.nrows() as f64;
        self.scores.sum_axis(ndarray::Axis(0)) / t
    }
}

/// Noun logits on a tape: time-pool the nodes, then one scalar per class.
pub fn noun_logits_on(tape: &mut Tape, nodes: Var, vars: &HeadVars, config: &HeadsConfig) -> Var {
    let pooled = tape.mean_axis0(nodes);
    let batched = tape.reshape(pooled, &[1, config.classes, config.d2]);
    let logits = tape.per_class_dot(batched, vars.noun_weight, vars.noun_bias);
    tape.reshape(logits, &[config.classes])
}

/// Verb logits on a tape from the head-averaged final adjacency.
pub fn verb_logits_from_adjacency_on(
    tape: &mut Tape,
    adj_mean: Var,
    vars: &HeadVars,
    config: &HeadsConfig,
) -> Var {
    let flat = tape.reshape(adj_mean, &[1, config.classes * config.classes]);
    let logits = tape.linear(flat, vars.verb_weight, vars.verb_bias);
    tape.reshape(logits, &[config.verbs])
}

/// Ablation verb head: dense layer on the flattened pooled nodes.
pub fn verb_logits_from_nodes_on(
    tape: &mut Tape,
    nodes: Var,
    vars: &HeadVars,
    config: &HeadsConfig,
) -> Var {
    let pooled = tape.mean_axis0(nodes);
    let flat = tape.reshape(pooled, &[1, config.classes * config.d2]);
    let logits = tape.linear(flat, vars.verb_weight, vars.verb_bias);
    tape.reshape(logits, &[config.verbs])
}

/// Standalone prediction from refined nodes and the captured adjacency state.
/// `object_logits` ride along so the bundle carries all three outputs.
pub fn predict(
    nodes: &Array3<f64>,
    adjacency: &AdjacencyState,
    params: &HeadParams,
    object_logits: Array2<f64>,
) -> Result<PredictionBundle> {
    let (_, c, d2) = nodes.dim();
    if c != params.config.classes || d2 != params.config.d2 {
        return Err(ThornError::shape(
            "heads.predict nodes",
            format!("(T, {}, {})", params.config.classes, params.config.d2),
            format!("{:?}", nodes.shape()),
        ));
    }
    if adjacency.blocks() == 0 {
        return Err(ThornError::InvalidInput("adjacency state is empty".into()));
    }
    if adjacency.classes() != params.config.classes {
        return Err(ThornError::shape(
            "heads.predict adjacency",
            format!("(blocks, heads, {0}, {0})", params.config.classes),
            format!("{:?}", adjacency.superimposed.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = HeadVars::leaf(&mut tape, params);
    let nv = tape.leaf(nodes.clone().into_dyn());
    let noun = noun_logits_on(&mut tape, nv, &vars, &params.config);
    let verb = if params.config.verb_from_nodes {
        verb_logits_from_nodes_on(&mut tape, nv, &vars, &params.config)
    } else {
        let mean = adjacency.last_block_mean();
        let mv = tape.leaf(mean.into_dyn());
        verb_logits_from_adjacency_on(&mut tape, mv, &vars, &params.config)
    };
    Ok(PredictionBundle {
        verb_logits: tape.value(verb).view().into_dimensionality::<Ix1>().unwrap().to_owned(),
        noun_logits: tape.value(noun).view().into_dimensionality::<Ix1>().unwrap().to_owned(),
        object_logits,
    })
}

/// The three loss components of one clip plus their unweighted sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub verbs: f64,
    pub nouns: f64,
    pub objects: f64,
    pub total: f64,
}

/// Joint loss: verb NLL + noun NLL + object-presence BCE.
pub fn joint_loss(
    bundle: &PredictionBundle,
    verb_gt: usize,
    noun_gt: usize,
    presence: &Array2<f64>,
) -> Result<LossBreakdown> {
    if verb_gt >= bundle.verb_logits.len() {
        return Err(ThornError::InvalidInput(format!(
            "verb label {verb_gt} out of range (C_v = {})",
            bundle.verb_logits.len()
        )));
    }
    if noun_gt >= bundle.noun_logits.len() {
        return Err(ThornError::InvalidInput(format!(
            "noun label {noun_gt} out of range (C_o = {})",
            bundle.noun_logits.len()
        )));
    }
    validate_presence(presence)?;
    let mut tape = Tape::new();
    let v = tape.leaf(bundle.verb_logits.clone().into_dyn());
    let n = tape.leaf(bundle.noun_logits.clone().into_dyn());
    let o = tape.leaf(bundle.object_logits.clone().into_dyn());
    let lv = tape.cross_entropy_logits(v, verb_gt);
    let ln_ = tape.cross_entropy_logits(n, noun_gt);
    let lo = tape.bce_with_logits(o, presence.clone());
    let verbs = scalar_value(tape.value(lv));
    let nouns = scalar_value(tape.value(ln_));
    let objects = scalar_value(tape.value(lo));
    Ok(LossBreakdown { verbs, nouns, objects, total: verbs + nouns + objects })
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let mx = logits.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
    let exps = logits.mapv(|a| (a - mx).exp());
    let sum = exps.sum();
    exps / sum
}

/// Score-level fusion: equal-weight average of the model's softmax noun
/// probabilities and the thresholded per-class detector clip means. Clip
/// means below `threshold` are zeroed; means equal to the threshold are kept.
pub fn fuse_noun_scores(
    noun_logits: &Array1<f64>,
    detector: &DetectorScores,
    threshold: f64,
) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ThornError::InvalidInput(format!(
            "fusion threshold {threshold} outside [0, 1]"
        )));
    }
    if detector.scores().ncols() != noun_logits.len() {
        return Err(ThornError::shape(
            "heads.fuse_noun_scores",
            format!("(T, {})", noun_logits.len()),
            format!("{:?}", detector.scores().shape()),
        ));
    }
    let model = softmax(noun_logits);
    let clip = detector.clip_means().mapv(|m| if m >= threshold { m } else { 0.0 });
    Ok(model.mapv(|p| 0.5 * p) + clip.mapv(|m| 0.5 * m))
}

/// Index of the maximum score; ties resolve to the lowest index.
pub fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Composite action prediction: `(argmax verb, argmax noun)`. An action is
/// correct only when both components are.
pub fn action_prediction(verb_scores: &Array1<f64>, noun_scores: &Array1<f64>) -> (usize, usize) {
    (argmax(verb_scores), argmax(noun_scores))
}

/// Indices of the top `k` scores, best first; ties resolve to lower indices.
pub fn top_k(scores: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
