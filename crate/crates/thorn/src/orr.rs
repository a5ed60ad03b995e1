//! Object Relation Reasoning: stacked graph blocks over the class nodes.
//!
//! Each block runs several attention heads. A head embeds the node tensor
//! twice, contracts the embeddings over time and embedding channels into a
//! `C_o × C_o` score matrix, row-softmaxes it, and superimposes the result on
//! a learnable base adjacency:
//!
//! `A' = A + softmax(scores)`
//!
//! The superimposed adjacency drives a per-frame graph convolution
//! `out[t] = A' · nodes[t] · W3`; head outputs are summed, aggregated across
//! time by a same-length temporal convolution, and added back to the block
//! input through a residual connection. The adjacency is shared across
//! time-steps within a block but varies per video, per block, and per head.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, ThornError};
use crate::nn::fan_in_uniform;
use ndarray::{Array2, Array3, Array4, Ix2, Ix3, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrrConfig {
    /// Object class count `C_o`.
    pub classes: usize,
    /// Node channel width `D2`.
    pub d2: usize,
    /// Attention embedding width `D_e` (bottleneck, `D2 / 4` by default).
    pub d_e: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Temporal conv kernel length (odd).
    pub tcn_kernel: usize,
    /// One learnable base adjacency per head, or a single one per block.
    pub shared_base_adjacency: bool,
}

impl OrrConfig {
    pub fn new(classes: usize, d2: usize) -> Self {
        OrrConfig {
            classes,
            d2,
            d_e: (d2 / 4).max(1),
            heads: 3,
            tcn_kernel: 9,
            shared_base_adjacency: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.d2 == 0 || self.d_e == 0 || self.heads == 0 {
            return Err(ThornError::InvalidInput("graph block dimensions must be positive".into()));
        }
        if self.tcn_kernel % 2 == 0 {
            return Err(ThornError::InvalidInput(format!(
                "temporal kernel size {} must be odd",
                self.tcn_kernel
            )));
        }
        Ok(())
    }
}

/// One graph block: base adjacency `(heads | 1, C_o, C_o)`, attention
/// embeddings `w1`/`w2` `(heads, D2, D_e)`, node transform `w3`
/// `(heads, D2, D2)`, and the temporal kernel `(k, D2, D2)` (tap, in, out).
#[derive(Clone, Debug)]
pub struct GraphBlockParams {
    pub config: OrrConfig,
    pub base_adjacency: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub tcn_kernel: Tensor,
}

impl GraphBlockParams {
    /// Fully connected base adjacency (`1/C_o` in every cell), fan-in-scaled
    /// attention and transform weights.
    pub fn init(rng: &mut ChaCha8Rng, config: OrrConfig) -> Result<Self> {
        config.validate()?;
        let c = config.classes;
        let adj_planes = if config.shared_base_adjacency { 1 } else { config.heads };
        Ok(GraphBlockParams {
            config,
            base_adjacency: Tensor::from_elem(IxDyn(&[adj_planes, c, c]), 1.0 / c as f64),
            w1: fan_in_uniform(rng, &[config.heads, config.d2, config.d_e], config.d2),
            w2: fan_in_uniform(rng, &[config.heads, config.d2, config.d_e], config.d2),
            w3: fan_in_uniform(rng, &[config.heads, config.d2, config.d2], config.d2),
            tcn_kernel: fan_in_uniform(
                rng,
                &[config.tcn_kernel, config.d2, config.d2],
                config.tcn_kernel * config.d2,
            ),
        })
    }

    /// All-zero weights and base adjacency; the block becomes the identity.
    pub fn zeroed(config: OrrConfig) -> Result<Self> {
        config.validate()?;
        let c = config.classes;
        let adj_planes = if config.shared_base_adjacency { 1 } else { config.heads };
        Ok(GraphBlockParams {
            config,
            base_adjacency: Tensor::zeros(IxDyn(&[adj_planes, c, c])),
            w1: Tensor::zeros(IxDyn(&[config.heads, config.d2, config.d_e])),
            w2: Tensor::zeros(IxDyn(&[config.heads, config.d2, config.d_e])),
            w3: Tensor::zeros(IxDyn(&[config.heads, config.d2, config.d2])),
            tcn_kernel: Tensor::zeros(IxDyn(&[config.tcn_kernel, config.d2, config.d2])),
        })
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.adjacency"), &self.base_adjacency),
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.w3"), &self.w3),
            (format!("{prefix}.tcn"), &self.tcn_kernel),
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.adjacency"), &mut self.base_adjacency),
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.w3"), &mut self.w3),
            (format!("{prefix}.tcn"), &mut self.tcn_kernel),
        ]
    }
}

pub struct GraphBlockVars {
    pub base_adjacency: Var,
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub tcn_kernel: Var,
}

impl GraphBlockVars {
    pub fn leaf(tape: &mut Tape, params: &GraphBlockParams) -> Self {
        GraphBlockVars {
            base_adjacency: tape.leaf(params.base_adjacency.clone()),
            w1: tape.leaf(params.w1.clone()),
            w2: tape.leaf(params.w2.clone()),
            w3: tape.leaf(params.w3.clone()),
            tcn_kernel: tape.leaf(params.tcn_kernel.clone()),
        }
    }
}

/// Per-video superimposed adjacencies captured from a forward pass:
/// `(blocks, heads, C_o, C_o)`.
#[derive(Clone, Debug)]
pub struct AdjacencyState {
    pub superimposed: Array4<f64>,
}

impl AdjacencyState {
    pub fn blocks(&self) -> usize {
        self.superimposed.dim().0
    }

    pub fn heads(&self) -> usize {
        self.superimposed.dim().1
    }

    pub fn classes(&self) -> usize {
        self.superimposed.dim().2
    }

    /// Head-averaged adjacency of the final block — the verb head's input.
    pub fn last_block_mean(&self) -> Array2<f64> {
        let last = self.superimposed.index_axis(ndarray::Axis(0), self.blocks() - 1);
        let mut out = Array2::<f64>::zeros((self.classes(), self.classes()));
        for h in 0..self.heads() {
            out += &last.index_axis(ndarray::Axis(0), h);
        }
        out / self.heads() as f64
    }
}

/// Attention-superimposed adjacency for one head: embeds the nodes with the
/// head's `w1`/`w2`, contracts over time and embedding channels, softmaxes
/// row-wise, and adds the base adjacency plane.
pub fn attention_adjacency_on(
    tape: &mut Tape,
    nodes: Var,
    block: &GraphBlockVars,
    config: &OrrConfig,
    head: usize,
) -> Var {
    let shape = tape.value(nodes).shape().to_vec();
    let (t, c, d2) = (shape[0], shape[1], shape[2]);
    let w1 = tape.index_axis0(block.w1, head);
    let w2 = tape.index_axis0(block.w2, head);
    let flat = tape.reshape(nodes, &[t * c, d2]);
    let e1 = tape.matmul(flat, w1);
    let e1 = tape.reshape(e1, &[t, c, config.d_e]);
    let e2 = tape.matmul(flat, w2);
    let e2 = tape.reshape(e2, &[t, c, config.d_e]);
    let scores = tape.attn_scores(e1, e2);
    let soft = tape.softmax_rows(scores);
    let adj_plane = if config.shared_base_adjacency { 0 } else { head };
    let base = tape.index_axis0(block.base_adjacency, adj_plane);
    tape.add(soft, base)
}

/// Graph convolution for one head: `out[t] = adjacency · nodes[t] · W3[head]`.
/// Message passing mixes classes, never frames.
pub fn graph_convolve_on(
    tape: &mut Tape,
    nodes: Var,
    adjacency: Var,
    block: &GraphBlockVars,
    config: &OrrConfig,
    head: usize,
) -> Var {
    let shape = tape.value(nodes).shape().to_vec();
    let (t, c, d2) = (shape[0], shape[1], shape[2]);
    let mixed = tape.graph_mix(adjacency, nodes);
    let w3 = tape.index_axis0(block.w3, head);
    let flat = tape.reshape(mixed, &[t * c, d2]);
    let out = tape.matmul(flat, w3);
    tape.reshape(out, &[t, c, config.d2])
}

/// One graph block: summed multi-head graph convolutions, a same-length
/// temporal convolution, and a residual connection. Returns the output nodes
/// and the per-head superimposed adjacency vars.
pub fn block_forward_on(
    tape: &mut Tape,
    nodes: Var,
    block: &GraphBlockVars,
    config: &OrrConfig,
) -> Result<(Var, Vec<Var>)> {
    let shape = tape.value(nodes).shape().to_vec();
    if shape.len() != 3 || shape[0] < 1 {
        return Err(ThornError::shape("orr.block_forward", "(T >= 1, C_o, D2)", format!("{shape:?}")));
    }
    let mut adjacencies = Vec::with_capacity(config.heads);
    let mut summed: Option<Var> = None;
    for head in 0..config.heads {
        let adj = attention_adjacency_on(tape, nodes, block, config, head);
        adjacencies.push(adj);
        let conv = graph_convolve_on(tape, nodes, adj, block, config, head);
        summed = Some(match summed {
            Some(acc) => tape.add(acc, conv),
            None => conv,
        });
    }
    let aggregated = tape.temporal_conv_same(summed.expect("at least one head"), block.tcn_kernel);
    let out = tape.add(aggregated, nodes);
    Ok((out, adjacencies))
}

/// Sequential block stack; each block consumes the previous block's output.
/// Returns the final nodes and all superimposed adjacency vars.
pub fn stack_forward_on(
    tape: &mut Tape,
    nodes: Var,
    blocks: &[GraphBlockVars],
    config: &OrrConfig,
) -> Result<(Var, Vec<Vec<Var>>)> {
    if blocks.is_empty() {
        return Err(ThornError::InvalidInput("graph stack needs at least one block".into()));
    }
    let mut x = nodes;
    let mut all = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (out, adjacencies) = block_forward_on(tape, x, block, config)?;
        x = out;
        all.push(adjacencies);
    }
    Ok((x, all))
}

/// Collect adjacency var values into an [`AdjacencyState`].
pub fn collect_adjacency(tape: &Tape, vars: &[Vec<Var>], classes: usize) -> AdjacencyState {
    let blocks = vars.len();
    let heads = vars.first().map(|v| v.len()).unwrap_or(0);
    let mut out = Array4::<f64>::zeros((blocks, heads, classes, classes));
    for (b, row) in vars.iter().enumerate() {
        for (h, &v) in row.iter().enumerate() {
            let plane = tape.value(v).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            out.index_axis_mut(ndarray::Axis(0), b)
                .index_axis_mut(ndarray::Axis(0), h)
                .assign(&plane);
        }
    }
    AdjacencyState { superimposed: out }
}

fn nodes_leaf(tape: &mut Tape, nodes: &Array3<f64>) -> Var {
    tape.leaf(nodes.clone().into_dyn())
}

/// Standalone attention adjacency for one head.
pub fn attention_adjacency(
    nodes: &Array3<f64>,
    block: &GraphBlockParams,
    head: usize,
) -> Result<Array2<f64>> {
    check_nodes(nodes, &block.config)?;
    let mut tape = Tape::new();
    let vars = GraphBlockVars::leaf(&mut tape, block);
    let nv = nodes_leaf(&mut tape, nodes);
    let adj = attention_adjacency_on(&mut tape, nv, &vars, &block.config, head);
    Ok(tape.value(adj).view().into_dimensionality::<Ix2>().unwrap().to_owned())
}

/// Standalone graph convolution with an explicit adjacency.
pub fn graph_convolve(
    nodes: &Array3<f64>,
    adjacency: &Array2<f64>,
    block: &GraphBlockParams,
    head: usize,
) -> Result<Array3<f64>> {
    check_nodes(nodes, &block.config)?;
    if adjacency.dim() != (block.config.classes, block.config.classes) {
        return Err(ThornError::shape(
            "orr.graph_convolve",
            format!("({0}, {0})", block.config.classes),
            format!("{:?}", adjacency.shape()),
        ));
    }
    let mut tape = Tape::new();
    let vars = GraphBlockVars::leaf(&mut tape, block);
    let nv = nodes_leaf(&mut tape, nodes);
    let av = tape.leaf(adjacency.clone().into_dyn());
    let out = graph_convolve_on(&mut tape, nv, av, &vars, &block.config, head);
    Ok(tape.value(out).view().into_dimensionality::<Ix3>().unwrap().to_owned())
}

/// Standalone single-block forward.
pub fn block_forward(
    nodes: &Array3<f64>,
    block: &GraphBlockParams,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_nodes(nodes, &block.config)?;
    let mut tape = Tape::new();
    let vars = GraphBlockVars::leaf(&mut tape, block);
    let nv = nodes_leaf(&mut tape, nodes);
    let (out, adjacencies) = block_forward_on(&mut tape, nv, &vars, &block.config)?;
    let state = collect_adjacency(&tape, &[adjacencies], block.config.classes);
    let out = tape.value(out).view().into_dimensionality::<Ix3>().unwrap().to_owned();
    let adj = state.superimposed.index_axis(ndarray::Axis(0), 0).to_owned();
    Ok((out, adj))
}

/// Standalone stack forward.
pub fn stack_forward(
    nodes: &Array3<f64>,
    blocks: &[GraphBlockParams],
) -> Result<(Array3<f64>, AdjacencyState)> {
    if blocks.is_empty() {
        return Err(ThornError::InvalidInput("graph stack needs at least one block".into()));
    }
    let config = blocks[0].config;
    check_nodes(nodes, &config)?;
    let mut tape = Tape::new();
    let vars: Vec<GraphBlockVars> =
        blocks.iter().map(|b| GraphBlockVars::leaf(&mut tape, b)).collect();
    let nv = nodes_leaf(&mut tape, nodes);
    let (out, adjacencies) = stack_forward_on(&mut tape, nv, &vars, &config)?;
    let state = collect_adjacency(&tape, &adjacencies, config.classes);
    let out = tape.value(out).view().into_dimensionality::<Ix3>().unwrap().to_owned();
    Ok((out, state))
}

fn check_nodes(nodes: &Array3<f64>, config: &OrrConfig) -> Result<()> {
    let (t, c, d) = nodes.dim();
    if t < 1 || c != config.classes || d != config.d2 {
        return Err(ThornError::shape(
            "orr nodes",
            format!("(T >= 1, {}, {})", config.classes, config.d2),
            format!("{:?}", nodes.shape()),
        ));
    }
    Ok(())
}

/// Write each `(block, head)` adjacency plane as a CSV grid with a class-name
/// header row. Returns the written paths.
pub fn export_adjacency(
    state: &AdjacencyState,
    class_names: &[String],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if class_names.len() != state.classes() {
        return Err(ThornError::InvalidInput(format!(
            "expected {} class names, got {}",
            state.classes(),
            class_names.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for b in 0..state.blocks() {
        for h in 0..state.heads() {
            let path = dir.join(format!("adjacency_block{b}_head{h}.csv"));
            let mut file = std::fs::File::create(&path)?;
            writeln!(file, "{}", class_names.join(","))?;
            for i in 0..state.classes() {
                let row: Vec<String> = (0..state.classes())
                    .map(|j| format!("{:.12}", state.superimposed[[b, h, i, j]]))
                    .collect();
                writeln!(file, "{}", row.join(","))?;
            }
            paths.push(path);
        }
    }
    Ok(paths)
}
