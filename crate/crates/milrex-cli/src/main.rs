//! Single executable exposing the whole pipeline as subcommands.
//!
//! Every subcommand resolves its configuration up front (command line
//! flags override an optional `--config` JSON file, which overrides the
//! defaults) and writes the resolved configuration next to whatever
//! artifact it produces, so any artifact can be reproduced bit for bit
//! by re-running with `--config <that file>`.
//!
//! Exit codes: 0 success, 1 data error, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use milrex::bpe::{learn_bpe, Vocab};
use milrex::checkpoint;
use milrex::data::synthetic::{gen_synthetic, SyntheticSpec};
use milrex::data::{
    build_bags, encode_bag, encode_sequences, load_jsonl, GroupMode, LabelTable,
    BAG_SENTENCE_CAP,
};
use milrex::error::{Error, Result};
use milrex::eval::{
    collect_gold_facts, evaluate, export_topn, rank_predictions, read_predictions,
    write_predictions, write_report, BagPrediction, DEFAULT_P_AT,
};
use milrex::mil::predict_bag;
use milrex::model::{ModelConfig, ParamNodes};
use milrex::tensor::Graph;
use milrex::train::{finetune, pretrain_lm, Start, TrainConfig};

#[derive(Parser)]
#[command(
    name = "milrex",
    version,
    about = "Bag-level relation extraction with a small decoder-only language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-pair vocabulary from a text corpus.
    #[command(name = "bpe-train")]
    BpeTrain(BpeTrainArgs),
    /// Generate a synthetic distantly supervised dataset.
    #[command(name = "gen-synthetic")]
    GenSynthetic(GenSyntheticArgs),
    /// Pretrain the language model on a plain-text corpus.
    #[command(name = "pretrain-lm")]
    PretrainLm(PretrainArgs),
    /// Fine-tune on training bags with the combined objective.
    Finetune(FinetuneArgs),
    /// Score every test bag against every non-NA relation.
    Predict(PredictArgs),
    /// Evaluate a prediction file against gold facts.
    Evaluate(EvaluateArgs),
    /// Export the top-N predictions for manual rating.
    #[command(name = "export-topn")]
    ExportTopn(ExportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::BpeTrain(args) => run_bpe_train(args),
        Command::GenSynthetic(args) => run_gen_synthetic(args),
        Command::PretrainLm(args) => run_pretrain(args),
        Command::Finetune(args) => run_finetune(args),
        Command::Predict(args) => run_predict(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::ExportTopn(args) => run_export(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Read a stored resolved config, verifying its command tag.
fn read_config_file<C: DeserializeOwned>(path: &Path, command: &str) -> Result<C> {
    #[derive(Deserialize)]
    struct Tagged<C> {
        command: String,
        #[serde(flatten)]
        rest: C,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tagged: Tagged<C> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if tagged.command != command {
        return Err(Error::Config(format!(
            "{}: config is for `{}`, not `{command}`",
            path.display(),
            tagged.command
        )));
    }
    Ok(tagged.rest)
}

/// Write the resolved config next to an artifact (inside a directory
/// artifact, or as `<file>.run.json` beside a file artifact).
fn write_run_config<C: Serialize>(artifact: &Path, artifact_is_dir: bool, command: &str, resolved: &C) -> Result<()> {
    let mut value = serde_json::to_value(resolved).expect("config serializes");
    value
        .as_object_mut()
        .expect("config is an object")
        .insert("command".into(), command.into());
    let path = if artifact_is_dir {
        std::fs::create_dir_all(artifact).map_err(|e| Error::io(artifact, e))?;
        artifact.join("run_config.json")
    } else {
        artifact.with_extension(format!(
            "{}run.json",
            artifact
                .extension()
                .map(|e| format!("{}.", e.to_string_lossy()))
                .unwrap_or_default()
        ))
    };
    let text = serde_json::to_string_pretty(&value).expect("config serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

macro_rules! resolve {
    ($flag:expr, $file:expr, $default:expr) => {
        $flag.or($file).unwrap_or($default)
    };
}

// ---------------------------------------------------------------- bpe-train

#[derive(Args)]
struct BpeTrainArgs {
    /// Plain text training corpus, one line per document.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Total vocabulary size including base symbols and specials.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Output vocabulary file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resolved config JSON from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
struct BpeTrainConfig {
    corpus: PathBuf,
    vocab_size: usize,
    out: PathBuf,
}

fn run_bpe_train(args: BpeTrainArgs) -> Result<()> {
    let file: Option<BpeTrainConfig> = args
        .config
        .as_deref()
        .map(|p| read_config_file(p, "bpe-train"))
        .transpose()?;
    let file = file.unwrap_or_default();
    let resolved = BpeTrainConfig {
        corpus: args
            .corpus
            .or(if file.corpus.as_os_str().is_empty() { None } else { Some(file.corpus) })
            .ok_or_else(|| Error::Usage("bpe-train: --corpus is required".into()))?,
        vocab_size: resolve!(args.vocab_size, none_if_zero(file.vocab_size), 8192),
        out: args
            .out
            .or(if file.out.as_os_str().is_empty() { None } else { Some(file.out) })
            .ok_or_else(|| Error::Usage("bpe-train: --out is required".into()))?,
    };
    let corpus = read_corpus(&resolved.corpus)?;
    let vocab = learn_bpe(&corpus, resolved.vocab_size)?;
    vocab.save(&resolved.out)?;
    write_run_config(&resolved.out, false, "bpe-train", &resolved)?;
    println!(
        "learned {} merges; vocab of {} tokens written to {}",
        vocab.merges().len(),
        vocab.size(),
        resolved.out.display()
    );
    Ok(())
}

fn none_if_zero(v: usize) -> Option<usize> {
    if v == 0 {
        None
    } else {
        Some(v)
    }
}

fn req_path(flag: Option<PathBuf>, file: PathBuf, name: &str) -> Result<PathBuf> {
    flag.or(if file.as_os_str().is_empty() {
        None
    } else {
        Some(file)
    })
    .ok_or_else(|| Error::Usage(format!("{name} is required")))
}

// ------------------------------------------------------------ gen-synthetic

#[derive(Args)]
struct GenSyntheticArgs {
    /// Generation spec (JSON). Omit to use the bundled spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for train.jsonl, test.jsonl, labels.txt, corpus.txt.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
struct GenSyntheticConfig {
    spec: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: PathBuf,
    /// The fully resolved generation spec, for bit-exact replay.
    resolved_spec: Option<SyntheticSpec>,
}

fn run_gen_synthetic(args: GenSyntheticArgs) -> Result<()> {
    let file: Option<GenSyntheticConfig> = args
        .config
        .as_deref()
        .map(|p| read_config_file(p, "gen-synthetic"))
        .transpose()?;
    let file = file.unwrap_or_default();
    let out_dir = req_path(args.out_dir, file.out_dir, "gen-synthetic: --out-dir")?;
    let spec_path = args.spec.or(file.spec);
    let mut spec = if let Some(stored) = file.resolved_spec {
        stored
    } else if let Some(p) = &spec_path {
        SyntheticSpec::load(p)?
    } else {
        SyntheticSpec::bundled()
    };
    if let Some(seed) = args.seed.or(file.seed) {
        spec.seed = seed;
    }
    let (train, test, labels) = gen_synthetic(&spec, &out_dir)?;
    let resolved = GenSyntheticConfig {
        spec: spec_path,
        seed: Some(spec.seed),
        out_dir: out_dir.clone(),
        resolved_spec: Some(spec),
    };
    write_run_config(&out_dir, true, "gen-synthetic", &resolved)?;
    println!(
        "wrote {}, {}, {}",
        train.display(),
        test.display(),
        labels.display()
    );
    Ok(())
}

// -------------------------------------------------------- model/train flags

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    dropout_residual: Option<f64>,
    #[arg(long)]
    dropout_attention: Option<f64>,
    #[arg(long)]
    dropout_classifier: Option<f64>,
}

impl ModelFlags {
    /// Desk-scale defaults, overridden by a stored config, overridden by
    /// explicit flags.
    fn resolve(&self, stored: Option<&ModelConfig>, vocab_size: usize, relations: usize) -> ModelConfig {
        let base = stored
            .cloned()
            .unwrap_or_else(|| ModelConfig::desk(vocab_size, relations));
        ModelConfig {
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads.unwrap_or(base.heads),
            dim: self.dim.unwrap_or(base.dim),
            ff_dim: self.ff_dim.unwrap_or(base.ff_dim),
            context: self.context.unwrap_or(base.context),
            vocab_size,
            relations,
            dropout_residual: self.dropout_residual.unwrap_or(base.dropout_residual),
            dropout_attention: self.dropout_attention.unwrap_or(base.dropout_attention),
            dropout_classifier: self.dropout_classifier.unwrap_or(base.dropout_classifier),
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Warmup fraction of total updates.
    #[arg(long)]
    warmup: Option<f64>,
    /// Weight of the auxiliary language-model objective.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional global-norm gradient clip.
    #[arg(long)]
    grad_clip: Option<f64>,
}

impl TrainFlags {
    fn resolve(&self, stored: Option<&TrainConfig>) -> TrainConfig {
        let base = stored.cloned().unwrap_or_default();
        TrainConfig {
            learning_rate: self.lr.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            warmup_fraction: self.warmup.unwrap_or(base.warmup_fraction),
            lm_weight: self.lambda.unwrap_or(base.lm_weight),
            seed: self.seed.unwrap_or(base.seed),
            grad_clip: self.grad_clip.or(base.grad_clip),
            ..base
        }
    }
}

// -------------------------------------------------------------- pretrain-lm

#[derive(Args)]
struct PretrainArgs {
    /// Plain text corpus, one document per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Trained vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output directory (checkpoint/, metrics.csv, run_config.json).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct PretrainConfig {
    corpus: PathBuf,
    vocab: PathBuf,
    out_dir: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let file: Option<PretrainConfig> = args
        .config
        .as_deref()
        .map(|p| read_config_file(p, "pretrain-lm"))
        .transpose()?;
    let corpus_path = req_path(
        args.corpus,
        file.as_ref().map(|f| f.corpus.clone()).unwrap_or_default(),
        "pretrain-lm: --corpus",
    )?;
    let vocab_path = req_path(
        args.vocab,
        file.as_ref().map(|f| f.vocab.clone()).unwrap_or_default(),
        "pretrain-lm: --vocab",
    )?;
    let out_dir = req_path(
        args.out_dir,
        file.as_ref().map(|f| f.out_dir.clone()).unwrap_or_default(),
        "pretrain-lm: --out-dir",
    )?;
    let vocab = Vocab::load(&vocab_path)?;
    // pretraining never touches the relation head; a single NA row keeps
    // the parameter set well formed
    let model = args
        .model
        .resolve(file.as_ref().map(|f| &f.model), vocab.size(), 1);
    let train = args.train.resolve(file.as_ref().map(|f| &f.train));
    let resolved = PretrainConfig {
        corpus: corpus_path.clone(),
        vocab: vocab_path,
        out_dir: out_dir.clone(),
        model: model.clone(),
        train: train.clone(),
    };
    write_run_config(&out_dir, true, "pretrain-lm", &resolved)?;
    let corpus = read_corpus(&corpus_path)?;
    let outcome = pretrain_lm::<f32>(&corpus, &vocab, &model, &train, Some(&out_dir))?;
    println!(
        "pretraining done: final loss {:.4}; checkpoint in {}",
        outcome.final_loss,
        out_dir.join("checkpoint").display()
    );
    Ok(())
}

// ----------------------------------------------------------------- finetune

#[derive(Args)]
struct FinetuneArgs {
    /// Training split (JSON lines).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Label table file.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained checkpoint directory to start from (omit for scratch).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Accept relation names missing from the label table.
    #[arg(long)]
    allow_new_labels: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train_flags: TrainFlags,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct FinetuneConfig {
    train: PathBuf,
    labels: PathBuf,
    vocab: PathBuf,
    init: Option<PathBuf>,
    allow_new_labels: bool,
    out_dir: PathBuf,
    model: ModelConfig,
    train_config: TrainConfig,
}

fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let file: Option<FinetuneConfig> = args
        .config
        .as_deref()
        .map(|p| read_config_file(p, "finetune"))
        .transpose()?;
    let train_path = req_path(
        args.train,
        file.as_ref().map(|f| f.train.clone()).unwrap_or_default(),
        "finetune: --train",
    )?;
    let labels_path = req_path(
        args.labels,
        file.as_ref().map(|f| f.labels.clone()).unwrap_or_default(),
        "finetune: --labels",
    )?;
    let vocab_path = req_path(
        args.vocab,
        file.as_ref().map(|f| f.vocab.clone()).unwrap_or_default(),
        "finetune: --vocab",
    )?;
    let out_dir = req_path(
        args.out_dir,
        file.as_ref().map(|f| f.out_dir.clone()).unwrap_or_default(),
        "finetune: --out-dir",
    )?;
    let init_path = args.init.or(file.as_ref().and_then(|f| f.init.clone()));
    let allow_new = args.allow_new_labels
        || file.as_ref().map(|f| f.allow_new_labels).unwrap_or(false);

    let vocab = Vocab::load(&vocab_path)?;
    let mut labels = LabelTable::load(&labels_path)?;
    let examples = load_jsonl(&train_path, &mut labels, allow_new)?;
    let bags = build_bags(examples, GroupMode::Train);

    let checkpoint = init_path
        .as_deref()
        .map(checkpoint::load::<f32>)
        .transpose()?;
    let model = match &checkpoint {
        Some(ckpt) => {
            if ckpt.config.vocab_size != vocab.size() {
                return Err(Error::Config(format!(
                    "finetune: checkpoint vocab size {} does not match vocabulary {}",
                    ckpt.config.vocab_size,
                    vocab.size()
                )));
            }
            let mut cfg = ckpt.config.clone();
            cfg.relations = labels.len();
            cfg.dropout_residual = args.model.dropout_residual.unwrap_or(cfg.dropout_residual);
            cfg.dropout_attention = args.model.dropout_attention.unwrap_or(cfg.dropout_attention);
            cfg.dropout_classifier = args
                .model
                .dropout_classifier
                .unwrap_or(cfg.dropout_classifier);
            cfg
        }
        None => args
            .model
            .resolve(file.as_ref().map(|f| &f.model), vocab.size(), labels.len()),
    };
    let train_config = args
        .train_flags
        .resolve(file.as_ref().map(|f| &f.train_config));

    let encoded: Vec<_> = bags
        .iter()
        .map(|b| encode_bag(&vocab, b, model.context))
        .collect::<Result<_>>()?;

    let resolved = FinetuneConfig {
        train: train_path,
        labels: labels_path,
        vocab: vocab_path,
        init: init_path,
        allow_new_labels: allow_new,
        out_dir: out_dir.clone(),
        model: model.clone(),
        train_config: train_config.clone(),
    };
    write_run_config(&out_dir, true, "finetune", &resolved)?;

    let start = match checkpoint {
        Some(ckpt) => {
            let mut expected = ckpt.config.clone();
            expected.relations = model.relations;
            if ckpt.has_relation_head && ckpt.config.relations != labels.len() {
                return Err(Error::Config(format!(
                    "finetune: checkpoint carries a {}-relation head but the label table has {}",
                    ckpt.config.relations,
                    labels.len()
                )));
            }
            Start::FromCheckpoint(Box::new(checkpoint::Checkpoint {
                config: expected,
                params: reshape_for(&ckpt, &model),
                has_relation_head: ckpt.has_relation_head,
            }))
        }
        None => Start::Fresh,
    };
    let outcome = finetune::<f32>(
        &encoded,
        start,
        &model,
        &train_config,
        vocab.specials(),
        Some(&out_dir),
    )?;
    println!(
        "fine-tuning done: final loss {:.4}; checkpoint in {}",
        outcome.final_loss,
        out_dir.join("checkpoint").display()
    );
    Ok(())
}

/// Carry a loaded checkpoint's tensors over to the fine-tuning relation
/// count (the trunk is untouched; the head is handled by `finetune`).
fn reshape_for(
    ckpt: &checkpoint::Checkpoint<f32>,
    model: &ModelConfig,
) -> milrex::model::Parameters<f32> {
    let mut params = ckpt.params.clone();
    if !ckpt.has_relation_head {
        params.relation_weight = milrex::tensor::Tensor::zeros(model.relations, model.dim);
        params.relation_bias = milrex::tensor::Tensor::zeros(1, model.relations);
    }
    params
}

// ------------------------------------------------------------------ predict

#[derive(Args)]
struct PredictArgs {
    /// Fine-tuned checkpoint directory.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Test split (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output predictions file (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct PredictConfig {
    model: PathBuf,
    vocab: PathBuf,
    labels: PathBuf,
    data: PathBuf,
    out: PathBuf,
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let file: Option<PredictConfig> = args
        .config
        .as_deref()
        .map(|p| read_config_file(p, "predict"))
        .transpose()?;
    let model_dir = req_path(
        args.model,
        file.as_ref().map(|f| f.model.clone()).unwrap_or_default(),
        "predict: --model",
    )?;
    let vocab_path = req_path(
        args.vocab,
        file.as_ref().map(|f| f.vocab.clone()).unwrap_or_default(),
        "predict: --vocab",
    )?;
    let labels_path = req_path(
        args.labels,
        file.as_ref().map(|f| f.labels.clone()).unwrap_or_default(),
        "predict: --labels",
    )?;
    let data_path = req_path(
        args.data,
        file.as_ref().map(|f| f.data.clone()).unwrap_or_default(),
        "predict: --data",
    )?;
    let out_path = req_path(
        args.out,
        file.as_ref().map(|f| f.out.clone()).unwrap_or_default(),
        "predict: --out",
    )?;

    let vocab = Vocab::load(&vocab_path)?;
    let mut labels = LabelTable::load(&labels_path)?;
    let ckpt = checkpoint::load::<f32>(&model_dir)?;
    if !ckpt.has_relation_head {
        return Err(Error::Config(format!(
            "predict: {} is a language-model-only checkpoint; fine-tune first",
            model_dir.display()
        )));
    }
    if ckpt.config.relations != labels.len() {
        return Err(Error::Config(format!(
            "predict: checkpoint has {} relations, label table has {}",
            ckpt.config.relations,
            labels.len()
        )));
    }
    if ckpt.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "predict: checkpoint vocab size {} does not match vocabulary {}",
            ckpt.config.vocab_size,
            vocab.size()
        )));
    }

    let examples = load_jsonl(&data_path, &mut labels, true)?;
    let bags = build_bags(examples, GroupMode::Test);
    let mut predictions = Vec::new();
    for bag in &bags {
        let mut sequences = encode_sequences(&vocab, bag, ckpt.config.context)?;
        sequences.truncate(BAG_SENTENCE_CAP);
        let mut graph = Graph::<f32>::new();
        let nodes = ParamNodes::bind(&mut graph, &ckpt.params);
        let scores = predict_bag(&mut graph, &nodes, &ckpt.config, &sequences, vocab.specials())?;
        for s in scores {
            predictions.push(BagPrediction {
                head: bag.head.clone(),
                tail: bag.tail.clone(),
                relation: labels
                    .name(s.relation)
                    .expect("relation id within table")
                    .to_string(),
                score: s.score,
                alphas: Some(s.alphas),
            });
        }
    }
    write_predictions(&out_path, &predictions)?;
    let resolved = PredictConfig {
        model: model_dir,
        vocab: vocab_path,
        labels: labels_path,
        data: data_path,
        out: out_path.clone(),
    };
    write_run_config(&out_path, false, "predict", &resolved)?;
    println!(
        "{} predictions over {} bags written to {}",
        predictions.len(),
        bags.len(),
        out_path.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions file (JSON lines: head, tail, relation, score).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Gold test split (JSON lines).
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Report directory (pr_curve.csv, summary.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ns for Precision@N.
    #[arg(long, value_delimiter = ',')]
    p_at: Option<Vec<usize>>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct EvaluateConfig {
    pred: PathBuf,
    gold: PathBuf,
    out: PathBuf,
    p_at: Vec<usize>,
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let file: Option<EvaluateConfig> = args
        .config
        .as_deref()
        .map(|p| read_config_file(p, "evaluate"))
        .transpose()?;
    let pred_path = req_path(
        args.pred,
        file.as_ref().map(|f| f.pred.clone()).unwrap_or_default(),
        "evaluate: --pred",
    )?;
    let gold_path = req_path(
        args.gold,
        file.as_ref().map(|f| f.gold.clone()).unwrap_or_default(),
        "evaluate: --gold",
    )?;
    let out_dir = req_path(
        args.out,
        file.as_ref().map(|f| f.out.clone()).unwrap_or_default(),
        "evaluate: --out",
    )?;
    let p_at = args
        .p_at
        .or(file.as_ref().map(|f| f.p_at.clone()))
        .unwrap_or_else(|| DEFAULT_P_AT.to_vec());

    let mut labels = LabelTable::new();
    let gold_examples = load_jsonl(&gold_path, &mut labels, true)?;
    let gold = collect_gold_facts(&gold_examples, &labels);
    let predictions = read_predictions(&pred_path)?;
    let report = evaluate(predictions, &gold, &p_at)?;
    write_report(&out_dir, &report)?;
    let resolved = EvaluateConfig {
        pred: pred_path,
        gold: gold_path,
        out: out_dir.clone(),
        p_at,
    };
    write_run_config(&out_dir, true, "evaluate", &resolved)?;
    print!("auc {:.4} over {} gold facts;", report.auc, report.total_facts);
    for (n, p) in &report.p_at {
        print!(" P@{n} {:.1}%", p * 100.0);
    }
    println!();
    Ok(())
}

// -------------------------------------------------------------- export-topn

#[derive(Args)]
struct ExportArgs {
    /// Predictions file (JSON lines).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Test split with the supporting sentences.
    #[arg(long)]
    data: Option<PathBuf>,
    /// How many top predictions to export.
    #[arg(long)]
    n: Option<usize>,
    /// Output directory (topn.csv, distribution.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ExportConfig {
    pred: PathBuf,
    data: PathBuf,
    n: usize,
    out: PathBuf,
}

fn run_export(args: ExportArgs) -> Result<()> {
    let file: Option<ExportConfig> = args
        .config
        .as_deref()
        .map(|p| read_config_file(p, "export-topn"))
        .transpose()?;
    let pred_path = req_path(
        args.pred,
        file.as_ref().map(|f| f.pred.clone()).unwrap_or_default(),
        "export-topn: --pred",
    )?;
    let data_path = req_path(
        args.data,
        file.as_ref().map(|f| f.data.clone()).unwrap_or_default(),
        "export-topn: --data",
    )?;
    let out_dir = req_path(
        args.out,
        file.as_ref().map(|f| f.out.clone()).unwrap_or_default(),
        "export-topn: --out",
    )?;
    let n = resolve!(args.n, file.as_ref().and_then(|f| none_if_zero(f.n)), 300);

    let mut labels = LabelTable::new();
    let examples = load_jsonl(&data_path, &mut labels, true)?;
    let bags = build_bags(examples, GroupMode::Test);
    let predictions = read_predictions(&pred_path)?;
    let ranked = rank_predictions(milrex::eval::drop_na_predictions(predictions))?;
    export_topn(&ranked, &bags, n, &out_dir)?;
    let resolved = ExportConfig {
        pred: pred_path,
        data: data_path,
        n,
        out: out_dir.clone(),
    };
    write_run_config(&out_dir, true, "export-topn", &resolved)?;
    println!("top-{n} export written to {}", out_dir.display());
    Ok(())
}
