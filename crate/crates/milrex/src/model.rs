//! The decoder-only transformer language model.
//!
//! Embedding sum in, `layers` blocks of masked multi-head self-attention
//! plus a position-wise feedforward (each wrapped in residual-then-
//! layernorm), and a tied-weight language modeling head on top: the
//! output logits are the final states times the transpose of the token
//! embedding, so the head shares storage with the embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Train mode applies dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Model dimensions and dropout rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks.
    pub layers: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Model width.
    pub dim: usize,
    /// Feedforward inner width.
    pub ff_dim: usize,
    /// Maximum context length.
    pub context: usize,
    /// Token vocabulary size.
    pub vocab_size: usize,
    /// Relation label count, including NA.
    pub relations: usize,
    pub dropout_residual: f64,
    pub dropout_attention: f64,
    pub dropout_classifier: f64,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn desk(vocab_size: usize, relations: usize) -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            dim: 128,
            ff_dim: 512,
            context: 128,
            vocab_size,
            relations,
            dropout_residual: 0.1,
            dropout_attention: 0.1,
            dropout_classifier: 0.2,
        }
    }

    /// Full-size preset (12 blocks, 12 heads, 768 wide). Named for
    /// completeness; far too slow for the test suite.
    pub fn full_scale(vocab_size: usize, relations: usize) -> Self {
        ModelConfig {
            layers: 12,
            heads: 12,
            dim: 768,
            ff_dim: 3072,
            context: 512,
            vocab_size,
            relations,
            dropout_residual: 0.1,
            dropout_attention: 0.1,
            dropout_classifier: 0.2,
        }
    }

    /// Tiny configuration used throughout the test suite.
    pub fn tiny(vocab_size: usize, relations: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            ff_dim: 32,
            context: 32,
            vocab_size,
            relations,
            dropout_residual: 0.1,
            dropout_attention: 0.1,
            dropout_classifier: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("dim", self.dim),
            ("ff_dim", self.ff_dim),
            ("context", self.context),
            ("vocab_size", self.vocab_size),
            ("relations", self.relations),
        ] {
            if v == 0 {
                return Err(Error::Config(format!(
                    "model config: {name} must be positive"
                )));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model config: dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        for (name, r) in [
            ("dropout_residual", self.dropout_residual),
            ("dropout_attention", self.dropout_attention),
            ("dropout_classifier", self.dropout_classifier),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "model config: {name} {r} not in [0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Closed-form number of learned scalars for this configuration.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let per_block = 4 * d * d                      // attention projections
            + d * self.ff_dim + self.ff_dim            // ffn in + bias
            + self.ff_dim * d + d                      // ffn out + bias
            + 4 * d; // two layernorm gain/bias pairs
        self.vocab_size * d
            + self.context * d
            + self.layers * per_block
            + self.relations * d
            + self.relations
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub attn_query: Tensor<T>,
    pub attn_key: Tensor<T>,
    pub attn_value: Tensor<T>,
    pub attn_out: Tensor<T>,
    pub ffn_in: Tensor<T>,
    pub ffn_in_bias: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub ffn_out_bias: Tensor<T>,
    pub norm_attn_gain: Tensor<T>,
    pub norm_attn_bias: Tensor<T>,
    pub norm_ffn_gain: Tensor<T>,
    pub norm_ffn_bias: Tensor<T>,
}

/// All learned tensors: embeddings, per-block weights, and the relation
/// classifier matrix and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub relation_weight: Tensor<T>,
    pub relation_bias: Tensor<T>,
}

impl<T: Scalar> Parameters<T> {
    /// Fresh initialization: normal(0, 0.02) for weight matrices, zeros
    /// for biases, ones for layernorm gains. Draws happen in visit
    /// order, so identical seeds give identical parameters.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.dim;
        let token_embedding = Tensor::randn(config.vocab_size, d, INIT_STD, rng);
        let position_embedding = Tensor::randn(config.context, d, INIT_STD, rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn_query = Tensor::randn(d, d, INIT_STD, rng);
            let attn_key = Tensor::randn(d, d, INIT_STD, rng);
            let attn_value = Tensor::randn(d, d, INIT_STD, rng);
            let attn_out = Tensor::randn(d, d, INIT_STD, rng);
            let ffn_in = Tensor::randn(d, config.ff_dim, INIT_STD, rng);
            let ffn_out = Tensor::randn(config.ff_dim, d, INIT_STD, rng);
            blocks.push(BlockParams {
                attn_query,
                attn_key,
                attn_value,
                attn_out,
                ffn_in,
                ffn_in_bias: Tensor::zeros(1, config.ff_dim),
                ffn_out,
                ffn_out_bias: Tensor::zeros(1, d),
                norm_attn_gain: Tensor::filled(1, d, T::ONE),
                norm_attn_bias: Tensor::zeros(1, d),
                norm_ffn_gain: Tensor::filled(1, d, T::ONE),
                norm_ffn_bias: Tensor::zeros(1, d),
            });
        }
        let relation_weight = Tensor::randn(config.relations, d, INIT_STD, rng);
        Parameters {
            token_embedding,
            position_embedding,
            blocks,
            relation_weight,
            relation_bias: Tensor::zeros(1, config.relations),
        }
    }

    /// All-zero parameters of the right shapes (checkpoint loading).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.dim;
        Parameters {
            token_embedding: Tensor::zeros(config.vocab_size, d),
            position_embedding: Tensor::zeros(config.context, d),
            blocks: (0..config.layers)
                .map(|_| BlockParams {
                    attn_query: Tensor::zeros(d, d),
                    attn_key: Tensor::zeros(d, d),
                    attn_value: Tensor::zeros(d, d),
                    attn_out: Tensor::zeros(d, d),
                    ffn_in: Tensor::zeros(d, config.ff_dim),
                    ffn_in_bias: Tensor::zeros(1, config.ff_dim),
                    ffn_out: Tensor::zeros(config.ff_dim, d),
                    ffn_out_bias: Tensor::zeros(1, d),
                    norm_attn_gain: Tensor::zeros(1, d),
                    norm_attn_bias: Tensor::zeros(1, d),
                    norm_ffn_gain: Tensor::zeros(1, d),
                    norm_ffn_bias: Tensor::zeros(1, d),
                })
                .collect(),
            relation_weight: Tensor::zeros(config.relations, d),
            relation_bias: Tensor::zeros(1, config.relations),
        }
    }

    pub fn count(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.len()).sum()
    }

    /// All tensors with stable names, in checkpoint order.
    pub fn visit(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in b.fields() {
                out.push((format!("block{i}.{field}"), t));
            }
        }
        out.push(("relation_weight".into(), &self.relation_weight));
        out.push(("relation_bias".into(), &self.relation_bias));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, t) in b.fields_mut() {
                out.push((format!("block{i}.{field}"), t));
            }
        }
        out.push(("relation_weight".into(), &mut self.relation_weight));
        out.push(("relation_bias".into(), &mut self.relation_bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.visit().iter().all(|(_, t)| t.all_finite())
    }
}

impl<T: Scalar> BlockParams<T> {
    fn fields(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("attn_query", &self.attn_query),
            ("attn_key", &self.attn_key),
            ("attn_value", &self.attn_value),
            ("attn_out", &self.attn_out),
            ("ffn_in", &self.ffn_in),
            ("ffn_in_bias", &self.ffn_in_bias),
            ("ffn_out", &self.ffn_out),
            ("ffn_out_bias", &self.ffn_out_bias),
            ("norm_attn_gain", &self.norm_attn_gain),
            ("norm_attn_bias", &self.norm_attn_bias),
            ("norm_ffn_gain", &self.norm_ffn_gain),
            ("norm_ffn_bias", &self.norm_ffn_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("attn_query", &mut self.attn_query),
            ("attn_key", &mut self.attn_key),
            ("attn_value", &mut self.attn_value),
            ("attn_out", &mut self.attn_out),
            ("ffn_in", &mut self.ffn_in),
            ("ffn_in_bias", &mut self.ffn_in_bias),
            ("ffn_out", &mut self.ffn_out),
            ("ffn_out_bias", &mut self.ffn_out_bias),
            ("norm_attn_gain", &mut self.norm_attn_gain),
            ("norm_attn_bias", &mut self.norm_attn_bias),
            ("norm_ffn_gain", &mut self.norm_ffn_gain),
            ("norm_ffn_bias", &mut self.norm_ffn_bias),
        ]
    }
}

/// Graph-bound handles to every parameter tensor.
pub struct ParamNodes {
    pub token_embedding: NodeId,
    pub position_embedding: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub relation_weight: NodeId,
    pub relation_bias: NodeId,
}

pub struct BlockNodes {
    pub attn_query: NodeId,
    pub attn_key: NodeId,
    pub attn_value: NodeId,
    pub attn_out: NodeId,
    pub ffn_in: NodeId,
    pub ffn_in_bias: NodeId,
    pub ffn_out: NodeId,
    pub ffn_out_bias: NodeId,
    pub norm_attn_gain: NodeId,
    pub norm_attn_bias: NodeId,
    pub norm_ffn_gain: NodeId,
    pub norm_ffn_bias: NodeId,
}

impl ParamNodes {
    /// Insert every parameter as a leaf of the graph.
    pub fn bind<T: Scalar>(graph: &mut Graph<T>, params: &Parameters<T>) -> Self {
        ParamNodes {
            token_embedding: graph.leaf(&params.token_embedding),
            position_embedding: graph.leaf(&params.position_embedding),
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockNodes {
                    attn_query: graph.leaf(&b.attn_query),
                    attn_key: graph.leaf(&b.attn_key),
                    attn_value: graph.leaf(&b.attn_value),
                    attn_out: graph.leaf(&b.attn_out),
                    ffn_in: graph.leaf(&b.ffn_in),
                    ffn_in_bias: graph.leaf(&b.ffn_in_bias),
                    ffn_out: graph.leaf(&b.ffn_out),
                    ffn_out_bias: graph.leaf(&b.ffn_out_bias),
                    norm_attn_gain: graph.leaf(&b.norm_attn_gain),
                    norm_attn_bias: graph.leaf(&b.norm_attn_bias),
                    norm_ffn_gain: graph.leaf(&b.norm_ffn_gain),
                    norm_ffn_bias: graph.leaf(&b.norm_ffn_bias),
                })
                .collect(),
            relation_weight: graph.leaf(&params.relation_weight),
            relation_bias: graph.leaf(&params.relation_bias),
        }
    }

    /// Node ids in the same order as [`Parameters::visit`].
    pub fn visit(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend([
                b.attn_query,
                b.attn_key,
                b.attn_value,
                b.attn_out,
                b.ffn_in,
                b.ffn_in_bias,
                b.ffn_out,
                b.ffn_out_bias,
                b.norm_attn_gain,
                b.norm_attn_bias,
                b.norm_ffn_gain,
                b.norm_ffn_bias,
            ]);
        }
        out.push(self.relation_weight);
        out.push(self.relation_bias);
        out
    }

    /// Add the graph's leaf gradients into the parameters' grad buffers.
    /// Parameters the loss never touched contribute zero.
    pub fn collect_grads<T: Scalar>(&self, graph: &Graph<T>, params: &mut Parameters<T>) {
        let ids = self.visit();
        for ((_, tensor), id) in params.visit_mut().into_iter().zip(ids) {
            let buf = tensor.grad_mut();
            if let Some(g) = graph.grad(id) {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += *gi;
                }
            }
        }
    }
}

/// States from a single forward pass: `states[l]` is h_l (`len` x dim),
/// and `attention[l][head]` holds the pre-dropout attention weights when
/// recording was requested.
pub struct ForwardTrace {
    pub states: Vec<NodeId>,
    pub attention: Vec<Vec<NodeId>>,
    pub len: usize,
}

impl ForwardTrace {
    pub fn last_state(&self) -> NodeId {
        *self.states.last().expect("trace has h_0")
    }
}

/// Run the transformer over a token sequence, leaving all intermediate
/// states on the graph.
pub fn forward<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    ids: &[usize],
    mode: Mode,
    rng: &mut Rng,
    record_attention: bool,
) -> Result<ForwardTrace> {
    if ids.is_empty() {
        return Err(Error::Input("forward: empty token sequence".into()));
    }
    if ids.len() > config.context {
        return Err(Error::Input(format!(
            "forward: sequence length {} exceeds context {}",
            ids.len(),
            config.context
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(Error::Input(format!(
            "forward: token id {bad} out of range for vocab size {}",
            config.vocab_size
        )));
    }
    let len = ids.len();
    let train = mode == Mode::Train;
    let head_dim = config.head_dim();
    let attn_scale = T::from_f64(1.0 / (head_dim as f64).sqrt());

    let tok = graph.gather_rows(params.token_embedding, ids)?;
    let pos = graph.slice_rows(params.position_embedding, 0, len)?;
    let mut h = graph.add(tok, pos)?;
    if train {
        h = graph.dropout(h, config.dropout_residual, rng)?;
    }

    let mut states = vec![h];
    let mut attention = Vec::new();
    for block in &params.blocks {
        let q = graph.matmul(h, block.attn_query)?;
        let k = graph.matmul(h, block.attn_key)?;
        let v = graph.matmul(h, block.attn_value)?;
        let mut head_outs = Vec::with_capacity(config.heads);
        let mut head_attn = Vec::new();
        for a in 0..config.heads {
            let qa = graph.slice_cols(q, a * head_dim, head_dim)?;
            let ka = graph.slice_cols(k, a * head_dim, head_dim)?;
            let va = graph.slice_cols(v, a * head_dim, head_dim)?;
            let ka_t = graph.transpose(ka);
            let scores = graph.matmul(qa, ka_t)?;
            let scaled = graph.scale(scores, attn_scale);
            let weights = graph.causal_softmax_rows(scaled)?;
            if record_attention {
                head_attn.push(weights);
            }
            let dropped = if train {
                graph.dropout(weights, config.dropout_attention, rng)?
            } else {
                weights
            };
            head_outs.push(graph.matmul(dropped, va)?);
        }
        let merged = graph.concat_cols(&head_outs)?;
        let mut proj = graph.matmul(merged, block.attn_out)?;
        if train {
            proj = graph.dropout(proj, config.dropout_residual, rng)?;
        }
        let res = graph.add(h, proj)?;
        h = graph.layer_norm(res, block.norm_attn_gain, block.norm_attn_bias)?;

        let ff_pre = graph.matmul(h, block.ffn_in)?;
        let ff_pre = graph.add_row(ff_pre, block.ffn_in_bias)?;
        let ff_act = graph.gelu(ff_pre);
        let ff_out = graph.matmul(ff_act, block.ffn_out)?;
        let mut ff_out = graph.add_row(ff_out, block.ffn_out_bias)?;
        if train {
            ff_out = graph.dropout(ff_out, config.dropout_residual, rng)?;
        }
        let res2 = graph.add(h, ff_out)?;
        h = graph.layer_norm(res2, block.norm_ffn_gain, block.norm_ffn_bias)?;

        states.push(h);
        attention.push(head_attn);
    }

    Ok(ForwardTrace {
        states,
        attention,
        len,
    })
}

/// Per-position vocabulary logits: h_L times the transposed token
/// embedding (tied weights).
pub fn lm_logits<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    trace: &ForwardTrace,
) -> Result<NodeId> {
    let tied = graph.transpose(params.token_embedding);
    graph.matmul(trace.last_state(), tied)
}

/// Mean negative log-likelihood of the next token over the positions the
/// mask marks as counting.
pub fn lm_loss_on_trace<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    trace: &ForwardTrace,
    ids: &[usize],
    loss_mask: &[bool],
) -> Result<NodeId> {
    let len = ids.len();
    if len != trace.len {
        return Err(Error::Usage(format!(
            "lm_loss: {} ids for a trace of length {}",
            len, trace.len
        )));
    }
    if loss_mask.len() != len {
        return Err(Error::Usage(format!(
            "lm_loss: mask length {} does not match sequence length {len}",
            loss_mask.len()
        )));
    }
    if len < 2 {
        return Err(Error::Usage(
            "lm_loss: need at least two tokens to predict a next token".into(),
        ));
    }
    let counted: Vec<usize> = (0..len - 1).filter(|&i| loss_mask[i]).collect();
    if counted.is_empty() {
        return Err(Error::Usage("lm_loss: loss mask counts no position".into()));
    }
    let weight = T::from_f64(1.0 / counted.len() as f64);
    let mut targets = vec![0usize; len];
    let mut weights = vec![T::ZERO; len];
    for &i in &counted {
        targets[i] = ids[i + 1];
        weights[i] = weight;
    }
    let logits = lm_logits(graph, params, trace)?;
    graph.cross_entropy_rows(logits, &targets, &weights)
}

/// Forward plus next-token loss in one call.
pub fn lm_loss<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    ids: &[usize],
    loss_mask: &[bool],
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    let trace = forward(graph, params, config, ids, mode, rng, false)?;
    lm_loss_on_trace(graph, params, &trace, ids, loss_mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny(11, 3)
    }

    fn setup(
        config: &ModelConfig,
        seed: u64,
    ) -> (Parameters<f64>, Graph<f64>, ParamNodes) {
        let mut rng = Rng::new(seed);
        let params = Parameters::init(config, &mut rng);
        let mut graph = Graph::new();
        let nodes = ParamNodes::bind(&mut graph, &params);
        (params, graph, nodes)
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = tiny();
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.dropout_classifier = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [tiny(), ModelConfig::desk(100, 7)] {
            let mut rng = Rng::new(1);
            let params = Parameters::<f32>::init(&cfg, &mut rng);
            assert_eq!(params.count(), cfg.param_count());
        }
    }

    #[test]
    fn single_token_state_is_embedding_plus_position() {
        let cfg = tiny();
        let (params, mut graph, nodes) = setup(&cfg, 2);
        let mut rng = Rng::new(0);
        let trace = forward(&mut graph, &nodes, &cfg, &[5], Mode::Eval, &mut rng, false).unwrap();
        let h0 = graph.values(trace.states[0]);
        for (j, &got) in h0.iter().enumerate() {
            let expect = params.token_embedding.at(5, j) + params.position_embedding.at(0, j);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_despite_dropout_rates() {
        let cfg = tiny();
        let (_, mut graph, nodes) = setup(&cfg, 3);
        let ids = [1, 2, 3, 4];
        let mut rng_a = Rng::new(10);
        let mut rng_b = Rng::new(99);
        let a = forward(&mut graph, &nodes, &cfg, &ids, Mode::Eval, &mut rng_a, false).unwrap();
        let b = forward(&mut graph, &nodes, &cfg, &ids, Mode::Eval, &mut rng_b, false).unwrap();
        assert_eq!(graph.values(a.last_state()), graph.values(b.last_state()));
    }

    #[test]
    fn train_mode_dropout_changes_activations() {
        let cfg = tiny();
        let (_, mut graph, nodes) = setup(&cfg, 3);
        let ids = [1, 2, 3, 4];
        let mut rng = Rng::new(10);
        let a = forward(&mut graph, &nodes, &cfg, &ids, Mode::Train, &mut rng, false).unwrap();
        let b = forward(&mut graph, &nodes, &cfg, &ids, Mode::Eval, &mut rng, false).unwrap();
        assert_ne!(graph.values(a.last_state()), graph.values(b.last_state()));
    }

    #[test]
    fn causality_under_suffix_perturbation() {
        let cfg = tiny();
        let (_, mut graph, nodes) = setup(&cfg, 4);
        let ids = [1, 2, 3, 4, 5, 6];
        let mut rng = Rng::new(0);
        let base = forward(&mut graph, &nodes, &cfg, &ids, Mode::Eval, &mut rng, false).unwrap();
        let base_vals = graph.values(base.last_state()).to_vec();
        for p in 1..ids.len() {
            let mut changed = ids;
            changed[p] = (changed[p] + 3) % cfg.vocab_size;
            let t = forward(&mut graph, &nodes, &cfg, &changed, Mode::Eval, &mut rng, false)
                .unwrap();
            let vals = graph.values(t.last_state());
            for pos in 0..p {
                for j in 0..cfg.dim {
                    let diff = (vals[pos * cfg.dim + j] - base_vals[pos * cfg.dim + j]).abs();
                    assert!(diff <= 1e-6, "pos {pos} dim {j} changed by {diff}");
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_lower_triangular_stochastic() {
        let cfg = tiny();
        for seed in 0..5 {
            let (_, mut graph, nodes) = setup(&cfg, seed);
            let mut rng = Rng::new(0);
            let ids = [3, 1, 4, 1, 5];
            let trace =
                forward(&mut graph, &nodes, &cfg, &ids, Mode::Eval, &mut rng, true).unwrap();
            assert_eq!(trace.attention.len(), cfg.layers);
            for heads in &trace.attention {
                assert_eq!(heads.len(), cfg.heads);
                for &w in heads {
                    let vals = graph.values(w);
                    let n = ids.len();
                    for i in 0..n {
                        let sum: f64 = vals[i * n..i * n + i + 1].iter().sum();
                        assert!((sum - 1.0).abs() <= 1e-6);
                        for j in i + 1..n {
                            assert_eq!(vals[i * n + j], 0.0);
                        }
                        assert!(vals[i * n..i * n + i + 1].iter().all(|&a| a >= 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn lm_probs_sum_to_one_per_position() {
        let cfg = tiny();
        let (_, mut graph, nodes) = setup(&cfg, 5);
        let mut rng = Rng::new(0);
        let ids = [0, 1, 2];
        let trace = forward(&mut graph, &nodes, &cfg, &ids, Mode::Eval, &mut rng, false).unwrap();
        let logits = lm_logits(&mut graph, &nodes, &trace).unwrap();
        let probs = graph.softmax_rows(logits);
        let v = graph.values(probs);
        for i in 0..ids.len() {
            let sum: f64 = v[i * cfg.vocab_size..(i + 1) * cfg.vocab_size].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forced_one_hot_state_points_at_hot_index() {
        let cfg = tiny();
        let (_, mut graph, nodes) = setup(&cfg, 6);
        // Identity-padded embedding: W_e[i][j] = 1 if i == j.
        let mut we = vec![0.0f64; cfg.vocab_size * cfg.dim];
        for i in 0..cfg.vocab_size.min(cfg.dim) {
            we[i * cfg.dim + i] = 1.0;
        }
        let we_node = graph.leaf_from(cfg.vocab_size, cfg.dim, we).unwrap();
        let hot = 7usize;
        let mut state = vec![0.0f64; cfg.dim];
        state[hot] = 1.0;
        let state_node = graph.leaf_from(1, cfg.dim, state).unwrap();
        let fake = ForwardTrace {
            states: vec![state_node],
            attention: vec![],
            len: 1,
        };
        let fake_params = ParamNodes {
            token_embedding: we_node,
            ..nodes
        };
        let logits = lm_logits(&mut graph, &fake_params, &fake).unwrap();
        let vals = graph.values(logits);
        let argmax = (0..cfg.vocab_size)
            .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
            .unwrap();
        assert_eq!(argmax, hot);
    }

    #[test]
    fn updating_token_embedding_moves_both_ends() {
        let cfg = tiny();
        let mut rng = Rng::new(7);
        let params = Parameters::<f64>::init(&cfg, &mut rng);
        let mut bumped = params.clone();
        bumped.token_embedding.set(2, 0, bumped.token_embedding.at(2, 0) + 0.5);

        let run = |p: &Parameters<f64>| {
            let mut graph = Graph::new();
            let nodes = ParamNodes::bind(&mut graph, p);
            let mut r = Rng::new(0);
            let trace = forward(&mut graph, &nodes, &cfg, &[2, 3], Mode::Eval, &mut r, false)
                .unwrap();
            let h0 = graph.values(trace.states[0]).to_vec();
            let logits = lm_logits(&mut graph, &nodes, &trace).unwrap();
            (h0, graph.values(logits).to_vec())
        };
        let (h0_a, logits_a) = run(&params);
        let (h0_b, logits_b) = run(&bumped);
        assert_ne!(h0_a, h0_b, "embedding side must see the update");
        assert_ne!(logits_a, logits_b, "logit side must see the update");
    }

    #[test]
    fn vocabulary_of_one_token_has_zero_loss() {
        let cfg = ModelConfig {
            vocab_size: 1,
            ..tiny()
        };
        let (_, mut graph, nodes) = setup(&cfg, 8);
        let mut rng = Rng::new(0);
        let loss = lm_loss(
            &mut graph,
            &nodes,
            &cfg,
            &[0, 0, 0],
            &[true, true, false],
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        assert_eq!(graph.scalar(loss), 0.0);
    }

    #[test]
    fn zeroed_model_loss_is_exactly_log_vocab() {
        let cfg = tiny();
        let mut rng = Rng::new(9);
        let mut params = Parameters::<f64>::init(&cfg, &mut rng);
        for (name, t) in params.visit_mut() {
            if name != "token_embedding" && name != "position_embedding" {
                t.data_mut().fill(0.0);
            }
        }
        let mut graph = Graph::new();
        let nodes = ParamNodes::bind(&mut graph, &params);
        let loss = lm_loss(
            &mut graph,
            &nodes,
            &cfg,
            &[1, 2, 3, 4],
            &[true; 4],
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        let expect = (cfg.vocab_size as f64).ln();
        assert!((graph.scalar(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn random_init_loss_is_near_log_vocab() {
        let cfg = ModelConfig::tiny(50, 3);
        let (_, mut graph, nodes) = setup(&cfg, 10);
        let mut rng = Rng::new(0);
        let loss = lm_loss(
            &mut graph,
            &nodes,
            &cfg,
            &[1, 12, 23, 34, 45, 5, 16],
            &[true; 7],
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        let expect = (cfg.vocab_size as f64).ln();
        let got = graph.scalar(loss);
        assert!(
            (got - expect).abs() / expect < 0.10,
            "loss {got} vs ln V {expect}"
        );
    }

    #[test]
    fn input_contract_errors() {
        let cfg = tiny();
        let (_, mut graph, nodes) = setup(&cfg, 11);
        let mut rng = Rng::new(0);
        let long: Vec<usize> = vec![0; cfg.context + 1];
        assert!(matches!(
            forward(&mut graph, &nodes, &cfg, &long, Mode::Eval, &mut rng, false),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            forward(&mut graph, &nodes, &cfg, &[], Mode::Eval, &mut rng, false),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            forward(
                &mut graph,
                &nodes,
                &cfg,
                &[cfg.vocab_size],
                Mode::Eval,
                &mut rng,
                false
            ),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            lm_loss(
                &mut graph,
                &nodes,
                &cfg,
                &[1, 2, 3],
                &[false, false, false],
                Mode::Eval,
                &mut rng
            ),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            lm_loss(&mut graph, &nodes, &cfg, &[1], &[true], Mode::Eval, &mut rng),
            Err(Error::Usage(_))
        ));
    }
}
