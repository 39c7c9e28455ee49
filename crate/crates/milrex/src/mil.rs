//! Bag-level multi-instance learning on top of the transformer.
//!
//! Each sentence of a bag is encoded independently; its representation is
//! the final-layer state at the trailing classification token. Selective
//! attention compares every sentence representation against a relation
//! query vector (a row of the relation classifier matrix) and aggregates
//! the bag as the attention-weighted sum, which the linear-plus-softmax
//! classifier turns into a distribution over relations.
//!
//! During training the attention query is the gold relation's row; at
//! prediction time the gold label is unknown, so every candidate relation
//! queries the bag with its own row and is scored on the resulting
//! aggregate.

use crate::bpe::SpecialTokens;
use crate::error::{Error, Result};
use crate::model::{forward, lm_loss_on_trace, Mode, ModelConfig, ParamNodes};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Scalar};

/// A bag whose sentences are already formatted and tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBag {
    /// Formatted token id sequences, each ending with the CLF token.
    pub sequences: Vec<Vec<usize>>,
    /// Gold relation id (training bags).
    pub label: usize,
}

/// Outcome of aggregating one bag under one relation query.
pub struct BagForward {
    /// Attention weights, one per sentence (1 x n node).
    pub attention: NodeId,
    /// Aggregated bag representation (1 x dim node).
    pub aggregate: NodeId,
}

/// Encode one formatted sentence and return its representation: the last
/// state at the final (classification token) position.
pub fn sentence_repr<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    formatted_ids: &[usize],
    mode: Mode,
    rng: &mut Rng,
    specials: SpecialTokens,
) -> Result<NodeId> {
    if formatted_ids.last() != Some(&specials.clf) {
        return Err(Error::Input(
            "sentence_repr: formatted input does not end with the classification token".into(),
        ));
    }
    let trace = forward(graph, params, config, formatted_ids, mode, rng, false)?;
    graph.slice_rows(trace.last_state(), trace.len - 1, 1)
}

/// Selective attention: stack the sentence representations (n x d),
/// weight each by softmax of its dot product with the query (1 x d), and
/// return the weights together with the weighted sum.
pub fn selective_attention<T: Scalar>(
    graph: &mut Graph<T>,
    reprs: &[NodeId],
    query: NodeId,
) -> Result<(NodeId, NodeId)> {
    if reprs.is_empty() {
        return Err(Error::Input("selective_attention: empty bag".into()));
    }
    let stacked = graph.concat_rows(reprs)?;
    let query_t = graph.transpose(query);
    let scores = graph.matmul(stacked, query_t)?; // n x 1
    let scores_row = graph.transpose(scores); // 1 x n
    let attention = graph.softmax_rows(scores_row);
    let aggregate = graph.matmul(attention, stacked)?;
    Ok((attention, aggregate))
}

/// Relation distribution for an aggregated bag representation:
/// softmax of the linear classifier output.
pub fn classify_bag<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    aggregate: NodeId,
) -> Result<NodeId> {
    let logits = bag_logits(graph, params, aggregate)?;
    Ok(graph.softmax_rows(logits))
}

fn bag_logits<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    aggregate: NodeId,
) -> Result<NodeId> {
    let w_t = graph.transpose(params.relation_weight);
    let scores = graph.matmul(aggregate, w_t)?;
    graph.add_row(scores, params.relation_bias)
}

/// Aggregate a bag with the gold relation's query and return the
/// attention node, the cross-entropy of the gold label, and the raw
/// classifier logits.
fn bag_loss_from_reprs<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    reprs: &[NodeId],
    label: usize,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(NodeId, NodeId, NodeId)> {
    if label >= config.relations {
        return Err(Error::Data(format!(
            "bag label {label} out of range for {} relations",
            config.relations
        )));
    }
    let query = graph.slice_rows(params.relation_weight, label, 1)?;
    let (attention, aggregate) = selective_attention(graph, reprs, query)?;
    let classified = if mode == Mode::Train {
        graph.dropout(aggregate, config.dropout_classifier, rng)?
    } else {
        aggregate
    };
    let logits = bag_logits(graph, params, classified)?;
    let loss = graph.cross_entropy_rows(logits, &[label], &[T::ONE])?;
    Ok((attention, loss, logits))
}

fn bag_reprs<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    bag: &EncodedBag,
    mode: Mode,
    rng: &mut Rng,
    specials: SpecialTokens,
) -> Result<Vec<NodeId>> {
    if bag.sequences.is_empty() {
        return Err(Error::Input("bag has no sentences".into()));
    }
    bag.sequences
        .iter()
        .map(|ids| sentence_repr(graph, params, config, ids, mode, rng, specials))
        .collect()
}

/// Negative log probability of the bag's gold relation under
/// gold-query selective attention.
pub fn bag_loss<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    bag: &EncodedBag,
    mode: Mode,
    rng: &mut Rng,
    specials: SpecialTokens,
) -> Result<NodeId> {
    let reprs = bag_reprs(graph, params, config, bag, mode, rng, specials)?;
    let (_, loss, _) = bag_loss_from_reprs(graph, params, config, &reprs, bag.label, mode, rng)?;
    Ok(loss)
}

/// Everything the trainer wants from one bag: the combined objective
/// plus the (gold-query) classification distribution for metrics.
pub struct BagObjective {
    pub loss: NodeId,
    pub class_probs: NodeId,
}

/// Combined fine-tuning objective: bag classification loss plus
/// `lm_weight` times the mean language-modeling loss over the bag's
/// sequences. Every forward pass is shared between the two terms.
#[allow(clippy::too_many_arguments)]
pub fn bag_objective<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    bag: &EncodedBag,
    lm_weight: f64,
    mode: Mode,
    rng: &mut Rng,
    specials: SpecialTokens,
) -> Result<BagObjective> {
    if lm_weight < 0.0 {
        return Err(Error::Usage(format!(
            "combined_loss: negative language-model weight {lm_weight}"
        )));
    }
    if bag.sequences.is_empty() {
        return Err(Error::Input("bag has no sentences".into()));
    }
    let mut reprs = Vec::with_capacity(bag.sequences.len());
    let mut lm_losses = Vec::with_capacity(bag.sequences.len());
    for ids in &bag.sequences {
        if ids.last() != Some(&specials.clf) {
            return Err(Error::Input(
                "combined_loss: formatted input does not end with the classification token"
                    .into(),
            ));
        }
        let trace = forward(graph, params, config, ids, mode, rng, false)?;
        reprs.push(graph.slice_rows(trace.last_state(), trace.len - 1, 1)?);
        if lm_weight > 0.0 {
            let mask = vec![true; ids.len()];
            lm_losses.push(lm_loss_on_trace(graph, params, &trace, ids, &mask)?);
        }
    }
    let (_, class_loss, logits) =
        bag_loss_from_reprs(graph, params, config, &reprs, bag.label, mode, rng)?;
    let class_probs = graph.softmax_rows(logits);
    let loss = if lm_weight == 0.0 {
        class_loss
    } else {
        let mut lm_sum = lm_losses[0];
        for &l in &lm_losses[1..] {
            lm_sum = graph.add(lm_sum, l)?;
        }
        let lm_mean = graph.scale(lm_sum, T::from_f64(1.0 / lm_losses.len() as f64));
        graph.add_scaled(class_loss, lm_mean, T::from_f64(lm_weight))?
    };
    Ok(BagObjective { loss, class_probs })
}

/// The combined objective alone. With `lm_weight` = 0 this is exactly
/// [`bag_loss`].
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    bag: &EncodedBag,
    lm_weight: f64,
    mode: Mode,
    rng: &mut Rng,
    specials: SpecialTokens,
) -> Result<NodeId> {
    Ok(bag_objective(graph, params, config, bag, lm_weight, mode, rng, specials)?.loss)
}

/// One relation's score for a bag, with its attention weights.
#[derive(Debug, Clone)]
pub struct RelationScore {
    pub relation: usize,
    pub score: f64,
    pub alphas: Vec<f64>,
}

/// Score every non-NA relation against the bag: each relation queries
/// the bag with its own row of the relation matrix, and its score is its
/// probability under the classifier applied to that aggregate.
/// Deterministic in eval mode.
pub fn predict_bag<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    config: &ModelConfig,
    sequences: &[Vec<usize>],
    specials: SpecialTokens,
) -> Result<Vec<RelationScore>> {
    if sequences.is_empty() {
        return Err(Error::Input("predict_bag: empty bag".into()));
    }
    let mut rng = Rng::new(0); // eval mode draws nothing
    let bag = EncodedBag {
        sequences: sequences.to_vec(),
        label: 0,
    };
    let reprs = bag_reprs(graph, params, config, &bag, Mode::Eval, &mut rng, specials)?;
    let mut out = Vec::with_capacity(config.relations.saturating_sub(1));
    for relation in 1..config.relations {
        let query = graph.slice_rows(params.relation_weight, relation, 1)?;
        let (attention, aggregate) = selective_attention(graph, &reprs, query)?;
        let probs = classify_bag(graph, params, aggregate)?;
        out.push(RelationScore {
            relation,
            score: graph.values(probs)[relation].to_f64(),
            alphas: graph.values(attention).iter().map(|a| a.to_f64()).collect(),
        });
    }
    Ok(out)
}
