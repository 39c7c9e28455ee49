//! Optimization loops: Adam with a warmup/decay schedule, language model
//! pretraining, and bag-level fine-tuning with the combined objective.
//!
//! Fine-tuning defaults: Adam with beta1 0.9 and beta2 0.999, batch
//! size 8, peak learning rate 6.25e-5 with linear warmup over 0.2% of
//! updates then linear decay, 3 epochs, dropout 0.1 (residual,
//! attention) and 0.2 (classifier). Every run is a pure function of
//! (data, configs, seed).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::{SpecialTokens, Vocab};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{batch_bags, Batch};
use crate::error::{Error, Result};
use crate::mil::{bag_objective, EncodedBag};
use crate::model::{lm_loss, Mode, ModelConfig, ParamNodes, Parameters};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Graph, Scalar};

const SEED_INIT: u64 = 1;
const SEED_DROPOUT: u64 = 2;
const SEED_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate of the warmup/decay triangle.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of total updates spent warming up.
    pub warmup_fraction: f64,
    /// Weight of the auxiliary language-model objective.
    pub lm_weight: f64,
    pub seed: u64,
    /// Optional global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 6.25e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            epochs: 3,
            warmup_fraction: 0.002,
            lm_weight: 0.5,
            seed: 42,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} is negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} not in [0, 1)",
                self.warmup_fraction
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.lm_weight < 0.0 {
            return Err(Error::Config(format!(
                "language model weight {} is negative",
                self.lm_weight
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps`: linear rise from 0 to the
/// peak over the warmup span, then linear decay to 0.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Usage("lr_at: total_steps is zero".into()));
    }
    if step > total_steps {
        return Err(Error::Usage(format!(
            "lr_at: step {step} beyond total {total_steps}"
        )));
    }
    let warmup = ((self_warmup_steps(config, total_steps)).min(total_steps - 1)) as f64;
    let step = step as f64;
    let total = total_steps as f64;
    if warmup > 0.0 && step <= warmup {
        Ok(config.learning_rate * step / warmup)
    } else {
        Ok(config.learning_rate * (total - step) / (total - warmup))
    }
}

fn self_warmup_steps(config: &TrainConfig, total_steps: usize) -> usize {
    (config.warmup_fraction * total_steps as f64).ceil() as usize
}

/// Adam moment accumulators, aligned with the parameter visit order.
pub struct OptimizerState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let shapes: Vec<usize> = params.visit().iter().map(|(_, t)| t.len()).collect();
        OptimizerState {
            first: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            second: shapes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// One Adam update with bias correction. Consumes (zeroes) the gradients.
pub fn adam_step<T: Scalar>(
    params: &mut Parameters<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, tensor) in params.visit() {
        if tensor.grad().is_none() {
            return Err(Error::Usage(format!(
                "adam_step: no gradient populated for {name}"
            )));
        }
    }
    if let Some(clip) = config.grad_clip {
        let mut sq = 0.0f64;
        for (_, tensor) in params.visit() {
            for &g in tensor.grad().unwrap() {
                sq += g.to_f64() * g.to_f64();
            }
        }
        let norm = sq.sqrt();
        if norm > clip {
            let scale = T::from_f64(clip / norm);
            for (_, tensor) in params.visit_mut() {
                for g in tensor.grad_mut() {
                    *g = *g * scale;
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let beta1 = T::from_f64(config.beta1);
    let beta2 = T::from_f64(config.beta2);
    let one_minus_beta1 = T::from_f64(1.0 - config.beta1);
    let one_minus_beta2 = T::from_f64(1.0 - config.beta2);
    let correction1 = T::from_f64(1.0 - config.beta1.powi(t));
    let correction2 = T::from_f64(1.0 - config.beta2.powi(t));
    let eps = T::from_f64(config.adam_epsilon);
    let lr_t = T::from_f64(lr);

    for (i, (_, tensor)) in params.visit_mut().into_iter().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let n = tensor.len();
        {
            let grad = tensor.grad_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = beta1 * m[j] + one_minus_beta1 * g;
                v[j] = beta2 * v[j] + one_minus_beta2 * g * g;
            }
        }
        let data = tensor.data_mut();
        for j in 0..n {
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            data[j] = data[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.zero_grad();
    }
    Ok(())
}

/// One metrics-log row; `aux` is perplexity for pretraining and batch
/// bag accuracy for fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub aux: f64,
}

fn write_metrics(path: &Path, aux_name: &str, rows: &[MetricsRow]) -> Result<()> {
    let mut out = format!("step,lr,loss,{aux_name}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.loss, r.aux));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome<T> {
    pub params: Parameters<T>,
    pub config: ModelConfig,
    pub metrics: Vec<MetricsRow>,
    pub final_loss: f64,
}

/// Pack corpus lines into context-sized token windows, one document per
/// line (windows never cross lines). Windows shorter than two tokens
/// carry no next-token signal and are dropped.
pub fn pack_corpus(corpus: &[String], vocab: &Vocab, context: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for line in corpus {
        let ids = vocab.encode(line);
        for chunk in ids.chunks(context) {
            if chunk.len() >= 2 {
                out.push(chunk.to_vec());
            }
        }
    }
    out
}

/// Mean language-model loss over token windows (eval mode).
pub fn lm_eval_loss<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    windows: &[Vec<usize>],
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Usage("lm_eval_loss: no windows".into()));
    }
    let mut rng = Rng::new(0);
    let mut total = 0.0;
    for ids in windows {
        let mut graph = Graph::<T>::new();
        let nodes = ParamNodes::bind(&mut graph, params);
        let mask = vec![true; ids.len()];
        let loss = lm_loss(&mut graph, &nodes, config, ids, &mask, Mode::Eval, &mut rng)?;
        total += graph.scalar(loss).to_f64();
    }
    Ok(total / windows.len() as f64)
}

/// Optimize the language-modeling objective over a plain-text corpus.
/// Writes `checkpoint/` (without the relation head) and `metrics.csv`
/// under `out_dir` at every epoch boundary when a directory is given.
pub fn pretrain_lm<T: Scalar>(
    corpus: &[String],
    vocab: &Vocab,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    model_config.validate()?;
    train_config.validate()?;
    let windows = pack_corpus(corpus, vocab, model_config.context);
    if windows.is_empty() {
        return Err(Error::Config(
            "pretraining corpus yields no windows of two or more tokens".into(),
        ));
    }

    let mut init_rng = Rng::new(derive_seed(train_config.seed, SEED_INIT));
    let mut params = Parameters::<T>::init(model_config, &mut init_rng);
    let mut state = OptimizerState::new(&params);
    let mut dropout_rng = Rng::new(derive_seed(train_config.seed, SEED_DROPOUT));

    let steps_per_epoch = windows.len().div_ceil(train_config.batch_size);
    let total_steps = steps_per_epoch * train_config.epochs;
    let mut metrics = Vec::with_capacity(total_steps);
    let mut final_loss = f64::NAN;

    for epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        Rng::new(derive_seed(train_config.seed, SEED_SHUFFLE + epoch as u64)).shuffle(&mut order);
        for chunk in order.chunks(train_config.batch_size) {
            let mut graph = Graph::<T>::new();
            let nodes = ParamNodes::bind(&mut graph, &params);
            let mut batch_loss = None;
            for &w in chunk {
                let ids = &windows[w];
                let mask = vec![true; ids.len()];
                let loss = lm_loss(
                    &mut graph,
                    &nodes,
                    model_config,
                    ids,
                    &mask,
                    Mode::Train,
                    &mut dropout_rng,
                )?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => graph.add(acc, loss)?,
                });
            }
            let mean = graph.scale(
                batch_loss.expect("non-empty batch"),
                T::from_f64(1.0 / chunk.len() as f64),
            );
            graph.backward(mean)?;
            nodes.collect_grads(&graph, &mut params);
            let loss_value = graph.scalar(mean).to_f64();
            let lr = lr_at(state.step() + 1, total_steps, train_config)?;
            adam_step(&mut params, &mut state, train_config, lr)?;
            final_loss = loss_value;
            metrics.push(MetricsRow {
                step: state.step(),
                lr,
                loss: loss_value,
                aux: loss_value.exp(),
            });
        }
        let epoch_rows = &metrics[epoch * steps_per_epoch..];
        let epoch_loss: f64 =
            epoch_rows.iter().map(|r| r.loss).sum::<f64>() / epoch_rows.len() as f64;
        println!(
            "pretrain epoch {}/{}: mean loss {epoch_loss:.4}, perplexity {:.2}",
            epoch + 1,
            train_config.epochs,
            epoch_loss.exp()
        );
        if let Some(dir) = out_dir {
            checkpoint::save(&dir.join("checkpoint"), model_config, &params, false)?;
            write_metrics(&dir.join("metrics.csv"), "perplexity", &metrics)?;
        }
    }

    Ok(TrainOutcome {
        params,
        config: model_config.clone(),
        metrics,
        final_loss,
    })
}

/// Where fine-tuning starts from.
pub enum Start<T> {
    Fresh,
    FromCheckpoint(Box<Checkpoint<T>>),
}

/// Gold-query bag classification accuracy in eval mode.
pub fn bag_eval_accuracy<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    bags: &[EncodedBag],
    specials: SpecialTokens,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::Usage("bag_eval_accuracy: no bags".into()));
    }
    let mut rng = Rng::new(0);
    let mut correct = 0usize;
    for bag in bags {
        let mut graph = Graph::<T>::new();
        let nodes = ParamNodes::bind(&mut graph, params);
        let obj = bag_objective(
            &mut graph, &nodes, config, bag, 0.0, Mode::Eval, &mut rng, specials,
        )?;
        let probs = graph.values(obj.class_probs);
        let argmax = (0..config.relations)
            .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite probs"))
            .unwrap();
        if argmax == bag.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / bags.len() as f64)
}

/// Fine-tune on training bags with the combined objective. Starting from
/// a language-model-only checkpoint initializes a fresh relation head;
/// starting from a full checkpoint requires the relation count to match.
pub fn finetune<T: Scalar>(
    bags: &[EncodedBag],
    start: Start<T>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    specials: SpecialTokens,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    model_config.validate()?;
    train_config.validate()?;
    if bags.is_empty() {
        return Err(Error::Config("finetune: no training bags".into()));
    }
    if let Some(bad) = bags.iter().map(|b| b.label).find(|&l| l >= model_config.relations) {
        return Err(Error::Config(format!(
            "finetune: bag label {bad} outside the configured {} relations",
            model_config.relations
        )));
    }

    let mut init_rng = Rng::new(derive_seed(train_config.seed, SEED_INIT));
    let mut params = match start {
        Start::Fresh => Parameters::<T>::init(model_config, &mut init_rng),
        Start::FromCheckpoint(ckpt) => {
            let ckpt = *ckpt;
            let mut expected = ckpt.config.clone();
            expected.relations = model_config.relations;
            if &expected != model_config {
                return Err(Error::Config(format!(
                    "finetune: checkpoint config {:?} does not match requested config {:?}",
                    ckpt.config, model_config
                )));
            }
            if ckpt.has_relation_head {
                if ckpt.config.relations != model_config.relations {
                    return Err(Error::Config(format!(
                        "finetune: checkpoint has a {}-relation head, label table has {}",
                        ckpt.config.relations, model_config.relations
                    )));
                }
                ckpt.params
            } else {
                // fresh relation head over the pretrained trunk
                let mut params = ckpt.params;
                params.relation_weight = crate::tensor::Tensor::randn(
                    model_config.relations,
                    model_config.dim,
                    crate::model::INIT_STD,
                    &mut init_rng,
                );
                params.relation_bias =
                    crate::tensor::Tensor::zeros(1, model_config.relations);
                params
            }
        }
    };

    let mut state = OptimizerState::new(&params);
    let mut dropout_rng = Rng::new(derive_seed(train_config.seed, SEED_DROPOUT));
    let steps_per_epoch = bags.len().div_ceil(train_config.batch_size);
    let total_steps = steps_per_epoch * train_config.epochs;
    let mut metrics = Vec::with_capacity(total_steps);
    let mut final_loss = f64::NAN;

    for epoch in 0..train_config.epochs {
        let batches: Vec<Batch> = batch_bags(
            bags,
            train_config.batch_size,
            specials.pad,
            derive_seed(train_config.seed, SEED_SHUFFLE + epoch as u64),
        )?;
        for batch in &batches {
            let mut graph = Graph::<T>::new();
            let nodes = ParamNodes::bind(&mut graph, &params);
            let mut batch_loss = None;
            let mut correct = 0usize;
            for item in &batch.items {
                // strip batch padding; causality makes the result identical
                let bag = EncodedBag {
                    sequences: item
                        .sequences
                        .iter()
                        .zip(&item.lengths)
                        .map(|(s, &len)| s[..len].to_vec())
                        .collect(),
                    label: item.label,
                };
                let obj = bag_objective(
                    &mut graph,
                    &nodes,
                    model_config,
                    &bag,
                    train_config.lm_weight,
                    Mode::Train,
                    &mut dropout_rng,
                    specials,
                )?;
                let probs = graph.values(obj.class_probs);
                let argmax = (0..model_config.relations)
                    .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite probs"))
                    .unwrap();
                if argmax == item.label {
                    correct += 1;
                }
                batch_loss = Some(match batch_loss {
                    None => obj.loss,
                    Some(acc) => graph.add(acc, obj.loss)?,
                });
            }
            let mean = graph.scale(
                batch_loss.expect("non-empty batch"),
                T::from_f64(1.0 / batch.items.len() as f64),
            );
            graph.backward(mean)?;
            nodes.collect_grads(&graph, &mut params);
            let loss_value = graph.scalar(mean).to_f64();
            let lr = lr_at(state.step() + 1, total_steps, train_config)?;
            adam_step(&mut params, &mut state, train_config, lr)?;
            final_loss = loss_value;
            metrics.push(MetricsRow {
                step: state.step(),
                lr,
                loss: loss_value,
                aux: correct as f64 / batch.items.len() as f64,
            });
        }
        let epoch_rows = &metrics[epoch * steps_per_epoch..];
        let epoch_loss: f64 =
            epoch_rows.iter().map(|r| r.loss).sum::<f64>() / epoch_rows.len() as f64;
        let epoch_acc: f64 =
            epoch_rows.iter().map(|r| r.aux).sum::<f64>() / epoch_rows.len() as f64;
        println!(
            "finetune epoch {}/{}: mean loss {epoch_loss:.4}, batch accuracy {epoch_acc:.3}",
            epoch + 1,
            train_config.epochs,
        );
        if let Some(dir) = out_dir {
            checkpoint::save(&dir.join("checkpoint"), model_config, &params, true)?;
            write_metrics(&dir.join("metrics.csv"), "bag_accuracy", &metrics)?;
        }
    }

    Ok(TrainOutcome {
        params,
        config: model_config.clone(),
        metrics,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::{learn_bpe, SPECIAL_NAMES};
    use crate::data::{build_bags, encode_bag, load_jsonl, GroupMode};
    use crate::data::synthetic::{generate, SyntheticSpec};

    #[test]
    fn default_hyperparameters_are_pinned() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate, 6.25e-5);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.999);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.warmup_fraction, 0.002);
        assert_eq!(cfg.adam_epsilon, 1e-8);
        assert_eq!(cfg.grad_clip, None);
    }

    #[test]
    fn schedule_hits_zero_peak_and_half() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg).unwrap(), 0.0);
        // warmup = ceil(0.002 * 1000) = 2 steps
        assert_eq!(lr_at(2, 1000, &cfg).unwrap(), 6.25e-5);
        assert_eq!(lr_at(1000, 1000, &cfg).unwrap(), 0.0);
        // halfway between warmup end (2) and total (1000): step 501
        let half = lr_at(501, 1000, &cfg).unwrap();
        assert!((half - 6.25e-5 / 2.0).abs() < 1e-12);
        assert!(matches!(lr_at(1, 0, &cfg), Err(Error::Usage(_))));
        assert!(matches!(lr_at(11, 10, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn schedule_peaks_exactly_once() {
        let cfg = TrainConfig {
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        let total = 50;
        let rates: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &cfg).unwrap()).collect();
        let peak_count = rates.iter().filter(|&&r| r == cfg.learning_rate).count();
        assert_eq!(peak_count, 1);
        let max = rates.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, cfg.learning_rate);
    }

    fn tiny_params(seed: u64) -> (ModelConfig, Parameters<f64>) {
        let cfg = ModelConfig::tiny(11, 3);
        let mut rng = Rng::new(seed);
        let params = Parameters::init(&cfg, &mut rng);
        (cfg, params)
    }

    #[test]
    fn adam_with_zero_grads_changes_nothing() {
        let (_, mut params) = tiny_params(1);
        for (_, t) in params.visit_mut() {
            t.grad_mut(); // populate with zeros
        }
        let before = params.clone();
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &mut state, &TrainConfig::default(), 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // Scalar parameter with constant gradient 1: the bias-corrected
        // first step moves by almost exactly lr.
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            dim: 1,
            ff_dim: 1,
            context: 1,
            vocab_size: 1,
            relations: 1,
            dropout_residual: 0.0,
            dropout_attention: 0.0,
            dropout_classifier: 0.0,
        };
        let mut params = Parameters::<f64>::zeros(&cfg);
        for (_, t) in params.visit_mut() {
            t.grad_mut().fill(1.0);
        }
        let mut state = OptimizerState::new(&params);
        adam_step(&mut params, &mut state, &TrainConfig::default(), 0.1).unwrap();
        let moved = params.token_embedding.at(0, 0);
        assert!((moved - (-0.1)).abs() < 1e-6, "moved {moved}");
        // grads are consumed
        assert!(params.token_embedding.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_missing_grad_names_the_tensor() {
        let (_, mut params) = tiny_params(2);
        let mut state = OptimizerState::new(&params);
        match adam_step(&mut params, &mut state, &TrainConfig::default(), 0.1) {
            Err(Error::Usage(msg)) => assert!(msg.contains("token_embedding"), "{msg}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    fn word_corpus() -> Vec<String> {
        vec![
            "the sun rises in the east".to_string(),
            "the moon sets in the west".to_string(),
            "stars shine bright at night".to_string(),
            "rain falls soft on the roof".to_string(),
            "wind moves through tall trees".to_string(),
            "rivers run down to the sea".to_string(),
            "fires glow warm in the dark".to_string(),
            "snow rests white on the hill".to_string(),
            "clouds drift slow over town".to_string(),
            "waves break loud on the shore".to_string(),
        ]
    }

    fn word_vocab(corpus: &[String]) -> Vocab {
        learn_bpe(
            corpus,
            crate::bpe::Vocab::base_symbol_count() + SPECIAL_NAMES.len() + 80,
        )
        .unwrap()
    }

    #[test]
    fn pretraining_reduces_perplexity() {
        let corpus = word_corpus();
        let vocab = word_vocab(&corpus);
        let model_cfg = ModelConfig {
            context: 48,
            ..ModelConfig::tiny(vocab.size(), 2)
        };
        let train_cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 4,
            warmup_fraction: 0.1,
            seed: 11,
            ..TrainConfig::default()
        };
        let windows = pack_corpus(&corpus, &vocab, model_cfg.context);
        let mut init_rng = Rng::new(derive_seed(train_cfg.seed, SEED_INIT));
        let fresh = Parameters::<f64>::init(&model_cfg, &mut init_rng);
        let before = lm_eval_loss(&fresh, &model_cfg, &windows).unwrap();
        let outcome =
            pretrain_lm::<f64>(&corpus, &vocab, &model_cfg, &train_cfg, None).unwrap();
        let after = lm_eval_loss(&outcome.params, &model_cfg, &windows).unwrap();
        assert!(
            after < before,
            "eval loss did not improve: {after} !< {before}"
        );
        assert!(outcome.params.all_finite());
    }

    #[test]
    fn full_batch_loss_decreases_monotonically() {
        let corpus = word_corpus();
        let vocab = word_vocab(&corpus);
        let model_cfg = ModelConfig {
            context: 48,
            dropout_residual: 0.0,
            dropout_attention: 0.0,
            dropout_classifier: 0.0,
            ..ModelConfig::tiny(vocab.size(), 2)
        };
        let train_cfg = TrainConfig {
            learning_rate: 3e-4,
            epochs: 50,
            batch_size: corpus.len(), // full batch
            warmup_fraction: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome =
            pretrain_lm::<f64>(&corpus, &vocab, &model_cfg, &train_cfg, None).unwrap();
        assert_eq!(outcome.metrics.len(), 50);
        for pair in outcome.metrics.windows(2) {
            assert!(
                pair[1].loss < pair[0].loss,
                "loss rose from {} to {} at step {}",
                pair[0].loss,
                pair[1].loss,
                pair[1].step
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let corpus = word_corpus();
        let vocab = word_vocab(&corpus);
        let model_cfg = ModelConfig {
            context: 48,
            ..ModelConfig::tiny(vocab.size(), 2)
        };
        let train_cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let outcome = pretrain_lm::<f64>(&corpus, &vocab, &model_cfg, &train_cfg, None).unwrap();
        let mut init_rng = Rng::new(derive_seed(train_cfg.seed, SEED_INIT));
        let fresh = Parameters::<f64>::init(&model_cfg, &mut init_rng);
        assert_eq!(outcome.params, fresh);
    }

    #[test]
    fn checkpoint_reload_reproduces_eval_loss() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = word_corpus();
        let vocab = word_vocab(&corpus);
        let model_cfg = ModelConfig {
            context: 48,
            ..ModelConfig::tiny(vocab.size(), 2)
        };
        let train_cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 4,
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome =
            pretrain_lm::<f32>(&corpus, &vocab, &model_cfg, &train_cfg, Some(dir.path()))
                .unwrap();
        let windows = pack_corpus(&corpus, &vocab, model_cfg.context);
        let direct = lm_eval_loss(&outcome.params, &model_cfg, &windows).unwrap();
        let loaded = checkpoint::load::<f32>(&dir.path().join("checkpoint")).unwrap();
        assert!(!loaded.has_relation_head);
        let reloaded = lm_eval_loss(&loaded.params, &model_cfg, &windows).unwrap();
        assert!((direct - reloaded).abs() < 1e-6);
        assert!(dir.path().join("metrics.csv").exists());
    }

    fn noiseless_bags() -> (Vocab, SpecialTokens, ModelConfig, Vec<EncodedBag>) {
        let spec = SyntheticSpec {
            seed: 13,
            train_bags: 8,
            test_bags: 2,
            noise_rate: 0.0,
            na_fraction: 0.0,
            min_sentences: 1,
            max_sentences: 3,
            ..SyntheticSpec::bundled()
        };
        let data = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let train_path = dir.path().join("train.jsonl");
        std::fs::write(&train_path, &data.train).unwrap();
        let mut labels = spec.label_table();
        let examples = load_jsonl(&train_path, &mut labels, false).unwrap();
        let corpus: Vec<String> = examples.iter().map(|e| e.text.clone()).collect();
        let vocab = learn_bpe(
            &corpus,
            crate::bpe::Vocab::base_symbol_count() + SPECIAL_NAMES.len() + 120,
        )
        .unwrap();
        let model_cfg = ModelConfig {
            context: 64,
            dim: 32,
            ff_dim: 64,
            ..ModelConfig::tiny(vocab.size(), labels.len())
        };
        let bags: Vec<EncodedBag> = build_bags(examples, GroupMode::Train)
            .iter()
            .map(|b| encode_bag(&vocab, b, model_cfg.context).unwrap())
            .collect();
        let specials = vocab.specials();
        (vocab, specials, model_cfg, bags)
    }

    #[test]
    fn finetune_overfits_a_noiseless_toy_set() {
        let (_vocab, specials, model_cfg, bags) = noiseless_bags();
        let train_cfg = TrainConfig {
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 2,
            warmup_fraction: 0.05,
            lm_weight: 0.5,
            seed: 9,
            ..TrainConfig::default()
        };
        let outcome = finetune::<f32>(
            &bags,
            Start::Fresh,
            &model_cfg,
            &train_cfg,
            specials,
            None,
        )
        .unwrap();
        let accuracy =
            bag_eval_accuracy(&outcome.params, &model_cfg, &bags, specials).unwrap();
        assert!(accuracy >= 0.95, "train accuracy {accuracy}");
        assert!(outcome.params.all_finite());
    }

    #[test]
    fn finetune_is_bitwise_deterministic() {
        let (_vocab, specials, model_cfg, bags) = noiseless_bags();
        let train_cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 4,
            seed: 21,
            ..TrainConfig::default()
        };
        let a = finetune::<f32>(&bags, Start::Fresh, &model_cfg, &train_cfg, specials, None)
            .unwrap();
        let b = finetune::<f32>(&bags, Start::Fresh, &model_cfg, &train_cfg, specials, None)
            .unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn finetune_rejects_out_of_range_labels() {
        let (_vocab, specials, model_cfg, bags) = noiseless_bags();
        let mut shrunk = model_cfg.clone();
        shrunk.relations = 2;
        assert!(matches!(
            finetune::<f32>(
                &bags,
                Start::Fresh,
                &shrunk,
                &TrainConfig::default(),
                specials,
                None
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finetune_from_lm_checkpoint_installs_fresh_head() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = word_corpus();
        let vocab = word_vocab(&corpus);
        let mut model_cfg = ModelConfig {
            context: 64,
            ..ModelConfig::tiny(vocab.size(), 2)
        };
        let train_cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 4,
            seed: 17,
            ..TrainConfig::default()
        };
        pretrain_lm::<f32>(&corpus, &vocab, &model_cfg, &train_cfg, Some(dir.path())).unwrap();
        let ckpt = checkpoint::load::<f32>(&dir.path().join("checkpoint")).unwrap();
        assert!(!ckpt.has_relation_head);

        // the fine-tuning task has 4 relations, unlike the pretrain config
        model_cfg.relations = 4;
        let specials = vocab.specials();
        let ids = |text: &str| -> Vec<usize> {
            let mut v = vec![specials.start];
            v.extend(vocab.encode(text));
            v.push(specials.clf);
            v
        };
        let bags: Vec<EncodedBag> = (0..8)
            .map(|i| EncodedBag {
                sequences: vec![ids("the sun rises"), ids("the moon sets")],
                label: i % 4,
            })
            .collect();
        let outcome = finetune::<f32>(
            &bags,
            Start::FromCheckpoint(Box::new(ckpt)),
            &model_cfg,
            &train_cfg,
            specials,
            None,
        )
        .unwrap();
        assert_eq!(outcome.params.relation_weight.rows(), 4);
        assert!(outcome.params.all_finite());
    }
}
