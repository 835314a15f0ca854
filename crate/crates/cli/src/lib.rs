//! Command-line driver: argument parsing, run configuration, manifests and
//! the subcommand implementations behind the `htp` binary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use htp_core::eval::{
    echo_embed, evaluate_retrieval, long_concat_probe, read_jsonl, Corpus, Document, EchoArea,
    EmbeddingMatrix, ProbeConfig,
};
use htp_core::model::{init_weights, LayerRange, ModelConfig, ModelWeights};
use htp_core::partition::{
    augment, build_partition, build_partition_every_n, matched_interval, segment_sentences,
    LayoutSummary,
};
use htp_core::rewire::{embed_documents, DocumentConfig, Grouping, Method, Readout};
use htp_core::sensitivity::{bound_sweep, left_drift_limit, SweepConfig, MAX_FD_ENTRIES};
use htp_core::{exec, seed, tokens, Error, ErrorKind, Execution, Result};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

/// Retrieval cutoff used by `eval`.
pub const NDCG_K: usize = 10;

#[derive(Debug, Parser)]
#[command(
    name = "htp",
    version,
    about = "Hierarchical token prepending embeddings and sensitivity checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded random weights to a file.
    InitWeights(InitArgs),
    /// Embed every document of a JSONL file.
    Embed(EmbedArgs),
    /// Retrieval metrics on a corpus directory.
    Eval(EvalArgs),
    /// Jacobian bound checks on random models, plus the drift curve.
    Sensitivity(SensitivityArgs),
    /// Show the augmented layout of one text.
    PartitionInspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// JSON model config; defaults to the built-in configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Binary weights written by `init-weights`; overrides `--config`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Run seed. Weights, placeholders and experiment draws derive from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    VanillaMean,
    VanillaLast,
    Tp,
    Htp,
    EchoMean,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedOptions {
    #[arg(long, value_enum, default_value_t = MethodArg::Htp)]
    pub method: MethodArg,
    /// Sentences per block (htp only, default 1).
    #[arg(long)]
    pub k: Option<usize>,
    /// Fixed-size token blocks instead of sentence blocks (htp only).
    #[arg(long)]
    pub every_n: Option<usize>,
    /// Token blocks sized so the block count matches the sentence count (htp only).
    #[arg(long)]
    pub matched_tokens: bool,
    /// Readout layer; defaults to the model's exit layer.
    #[arg(long)]
    pub exit_layer: Option<usize>,
    /// Rewiring layers `start:end`; defaults to the model's range.
    #[arg(long)]
    pub tp_layers: Option<LayerRange>,
    /// Raw text inserted after BOS.
    #[arg(long)]
    pub instruction: Option<String>,
    #[arg(long)]
    pub mean_exclude_placeholders: bool,
    #[arg(long)]
    pub apply_final_norm_at_exit: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub embed: EmbedOptions,
    /// JSONL file of `{"id", "text"}` objects.
    #[arg(long)]
    pub input: PathBuf,
    /// Embedding matrix file; a manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub embed: EmbedOptions,
    /// Directory with docs.jsonl, queries.jsonl and qrels.jsonl.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Precomputed document embeddings; requires `--query-emb`.
    #[arg(long, requires = "query_emb")]
    pub doc_emb: Option<PathBuf>,
    #[arg(long, requires = "doc_emb")]
    pub query_emb: Option<PathBuf>,
    /// JSON array of sentence groups for the long-input probe.
    #[arg(long)]
    pub probe_pools: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub probe_lengths: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub probe_per_group: usize,
    /// Metrics JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SensitivityArgs {
    /// Number of random models.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub mlp_hidden: usize,
    /// Tokens per input.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub weight_scale: f64,
    /// Relative slack allowed before a measurement counts as a violation.
    #[arg(long, default_value_t = 1e-6)]
    pub slack: f64,
    /// Write the uniform-attention drift curve here as CSV.
    #[arg(long)]
    pub emit_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub l_max: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta1: f64,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "input")]
    pub text: Option<String>,
    /// Read the text from this file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub every_n: Option<usize>,
    #[arg(long)]
    pub matched_tokens: bool,
    #[arg(long)]
    pub instruction: Option<String>,
}

/// Fully resolved settings for an embedding run. Everything that can change
/// the output is here, so its hash identifies the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Hex SHA-256 of the weights file, when weights were loaded.
    pub weights_sha256: Option<String>,
    pub method: MethodArg,
    pub grouping: Option<Grouping>,
    pub exit_layer: usize,
    pub tp_layers: Option<LayerRange>,
    pub seed: u64,
    pub placeholder_seed: u64,
    pub instruction: Option<String>,
    pub mean_exclude_placeholders: bool,
    pub apply_final_norm_at_exit: bool,
    pub input: Option<String>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Loads or initialises weights. Returns them with the file hash, if any.
pub fn load_model(args: &ModelArgs) -> Result<(ModelWeights, Option<String>)> {
    if let Some(path) = &args.weights {
        let bytes = fs::read(path)?;
        let hash = hex::encode(Sha256::digest(&bytes));
        return Ok((ModelWeights::read_from(bytes.as_slice())?, Some(hash)));
    }
    let mut config = match &args.config {
        Some(path) => serde_json::from_reader(BufReader::new(File::open(path)?))?,
        None => ModelConfig::default(),
    };
    config.seed = args.seed;
    Ok((init_weights(&config)?, None))
}

impl RunConfig {
    /// Checks flag combinations against the method and model before any work.
    pub fn resolve(
        weights: &ModelWeights,
        weights_sha256: Option<String>,
        opts: &EmbedOptions,
        seed: u64,
        input: Option<&Path>,
    ) -> Result<Self> {
        let model = weights.config().clone();
        let uses_placeholders = matches!(opts.method, MethodArg::Tp | MethodArg::Htp);
        let grouping_flags = usize::from(opts.k.is_some())
            + usize::from(opts.every_n.is_some())
            + usize::from(opts.matched_tokens);
        if opts.method != MethodArg::Htp && grouping_flags > 0 {
            return Err(invalid(format!(
                "--k/--every-n/--matched-tokens only apply to htp, not {:?}",
                opts.method
            )));
        }
        if grouping_flags > 1 {
            return Err(invalid("choose one of --k, --every-n, --matched-tokens"));
        }
        if !uses_placeholders && opts.tp_layers.is_some() {
            return Err(invalid("--tp-layers needs method tp or htp"));
        }
        if !uses_placeholders && opts.mean_exclude_placeholders {
            return Err(invalid(
                "--mean-exclude-placeholders needs method tp or htp",
            ));
        }
        if opts.k == Some(0) || opts.every_n == Some(0) {
            return Err(invalid("block sizes must be positive"));
        }
        let exit_layer = opts.exit_layer.unwrap_or(model.exit_layer);
        if exit_layer > model.num_layers || (exit_layer == 0 && model.num_layers > 0) {
            return Err(invalid(format!(
                "--exit-layer {exit_layer} must lie in [1, {}]",
                model.num_layers
            )));
        }
        let tp_layers = if uses_placeholders {
            let r = opts.tp_layers.or(model.tp_layer_range).ok_or_else(|| {
                invalid("tp and htp need a rewiring range (--tp-layers or the model config)")
            })?;
            if r.start < 1 || r.start > r.end || r.end > model.num_layers {
                return Err(invalid(format!(
                    "--tp-layers {r} must satisfy 1 <= start <= end <= {}",
                    model.num_layers
                )));
            }
            Some(r)
        } else {
            None
        };
        let grouping = match opts.method {
            MethodArg::Htp => Some(match (opts.k, opts.every_n, opts.matched_tokens) {
                (_, Some(n), _) => Grouping::Tokens(n),
                (_, _, true) => Grouping::MatchedTokens,
                (k, _, _) => Grouping::Sentences(k.unwrap_or(1)),
            }),
            _ => None,
        };
        Ok(Self {
            model,
            weights_sha256,
            method: opts.method,
            grouping,
            exit_layer,
            tp_layers,
            seed,
            placeholder_seed: seed::derive(seed, seed::PLACEHOLDERS),
            instruction: opts.instruction.clone(),
            mean_exclude_placeholders: opts.mean_exclude_placeholders,
            apply_final_norm_at_exit: opts.apply_final_norm_at_exit,
            input: input.map(|p| p.display().to_string()),
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn document_config(&self) -> Option<DocumentConfig> {
        let (method, readout) = match self.method {
            MethodArg::VanillaMean => (Method::Vanilla, Readout::Mean),
            MethodArg::VanillaLast => (Method::Vanilla, Readout::Last),
            MethodArg::Tp => (Method::TpSingle, Readout::Mean),
            MethodArg::Htp => (Method::Htp, Readout::Mean),
            MethodArg::EchoMean => return None,
        };
        Some(DocumentConfig {
            method,
            grouping: self.grouping.unwrap_or(Grouping::Sentences(1)),
            readout,
            exit_layer: self.exit_layer,
            layers: self.tp_layers,
            instruction: self.instruction.clone(),
            placeholder_seed: self.placeholder_seed,
            mean_exclude_placeholders: self.mean_exclude_placeholders,
            apply_final_norm_at_exit: self.apply_final_norm_at_exit,
        })
    }

    pub fn embed_texts(
        &self,
        weights: &ModelWeights,
        texts: &[String],
        exec: Execution,
    ) -> Result<Vec<DVector<f64>>> {
        match self.document_config() {
            Some(cfg) => embed_documents(weights, texts, &cfg, exec),
            None => exec::try_map_slice(texts, exec, |t| {
                let text = match &self.instruction {
                    Some(i) => format!("{i}{t}"),
                    None => t.clone(),
                };
                echo_embed(
                    weights,
                    &text,
                    EchoArea::None,
                    self.exit_layer,
                    self.apply_final_norm_at_exit,
                )
            }),
        }
    }
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn cmd_init_weights(args: &InitArgs) -> Result<()> {
    let (weights, _) = load_model(&args.model)?;
    weights.write_to(BufWriter::new(File::create(&args.out)?))
}

pub fn cmd_embed(args: &EmbedArgs, exec: Execution) -> Result<()> {
    let (weights, hash) = load_model(&args.model)?;
    let run = RunConfig::resolve(
        &weights,
        hash,
        &args.embed,
        args.model.seed,
        Some(&args.input),
    )?;
    let docs: Vec<Document> = read_jsonl(&args.input)?;
    let ids: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
    let texts: Vec<String> = docs.into_iter().map(|d| d.text).collect();
    let rows = run.embed_texts(&weights, &texts, exec)?;
    let matrix = EmbeddingMatrix::new(ids, rows)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    matrix.write_to(&mut w)?;
    w.flush()?;
    let manifest = json!({
        "config_hash": run.hash(),
        "seed": run.seed,
        "method": run.method,
        "documents": matrix.ids.len(),
        "dim": matrix.dim,
        "config": run,
    });
    write_json(Some(&manifest_path(&args.out)), &manifest)
}

fn load_embeddings(path: &Path, expected: &[String], what: &str) -> Result<Vec<DVector<f64>>> {
    let m = EmbeddingMatrix::read_from(BufReader::new(File::open(path)?))?;
    let index: std::collections::HashMap<&str, usize> = m
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    expected
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| m.rows[i].clone())
                .ok_or_else(|| Error::Corpus(format!("{what} embedding for {id:?} missing")))
        })
        .collect()
}

pub fn cmd_eval(args: &EvalArgs, exec: Execution) -> Result<()> {
    let corpus = Corpus::load_dir(&args.corpus)?;
    let doc_ids: Vec<String> = corpus.docs.iter().map(|d| d.id.clone()).collect();
    let query_ids: Vec<String> = corpus.queries.iter().map(|q| q.id.clone()).collect();
    let (weights, hash) = load_model(&args.model)?;
    let run = RunConfig::resolve(
        &weights,
        hash,
        &args.embed,
        args.model.seed,
        Some(&args.corpus),
    )?;
    let (doc_vecs, query_vecs) = match (&args.doc_emb, &args.query_emb) {
        (Some(d), Some(q)) => (
            load_embeddings(d, &doc_ids, "document")?,
            load_embeddings(q, &query_ids, "query")?,
        ),
        _ => {
            let docs: Vec<String> = corpus.docs.iter().map(|d| d.text.clone()).collect();
            let queries: Vec<String> = corpus.queries.iter().map(|q| q.text.clone()).collect();
            (
                run.embed_texts(&weights, &docs, exec)?,
                run.embed_texts(&weights, &queries, exec)?,
            )
        }
    };
    let metrics = evaluate_retrieval(&corpus, &doc_vecs, &query_vecs, NDCG_K, exec)?;
    let per_query: Vec<_> = metrics
        .per_query
        .iter()
        .map(|m| json!({"query_id": m.query_id, "ndcg": m.ndcg}))
        .collect();
    let mut report = json!({
        "config_hash": run.hash(),
        "method": run.method,
        "k": metrics.k,
        "mean_ndcg": metrics.mean_ndcg,
        "scored": metrics.per_query.len() - metrics.skipped,
        "skipped": metrics.skipped,
        "per_query": per_query,
    });
    if let Some(path) = &args.probe_pools {
        let groups: Vec<Vec<String>> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let cfg = ProbeConfig {
            lengths: args.probe_lengths.clone(),
            per_group: args.probe_per_group,
            seed: seed::derive(run.seed, seed::EXPERIMENT),
            exit_layer: run.exit_layer,
        };
        let probe = long_concat_probe(&weights, &groups, &cfg, exec)?;
        report["probe"] = probe
            .iter()
            .map(|p| json!({"length": p.length, "mean": p.mean, "last": p.last}))
            .collect();
    }
    write_json(args.out.as_deref(), &report)
}

pub fn cmd_sensitivity(args: &SensitivityArgs, exec: Execution) -> Result<()> {
    if args.n == 0 {
        return Err(invalid("--n must be positive"));
    }
    if args.n * args.dim > MAX_FD_ENTRIES {
        return Err(Error::GuardExceeded(format!(
            "n*d = {} exceeds {MAX_FD_ENTRIES}",
            args.n * args.dim
        )));
    }
    let cfg = SweepConfig {
        num_layers: args.layers,
        hidden_dim: args.dim,
        mlp_hidden: args.mlp_hidden,
        seq_len: args.n,
        seeds: (0..args.seeds as u64)
            .map(|i| seed::derive_indexed(args.seed, seed::EXPERIMENT, i))
            .collect(),
        weight_scale: args.weight_scale,
        ..SweepConfig::default()
    };
    cfg.model_config(0).validate()?;
    if let Some(path) = &args.emit_csv {
        fs::write(
            path,
            left_drift_limit(args.n, args.l_max, args.beta1)?.to_csv(),
        )?;
    }
    let reports = bound_sweep(&cfg, exec)?;
    let violations: usize = reports
        .iter()
        .map(|r| r.report.violations(args.slack))
        .sum();
    let max_slack = reports
        .iter()
        .map(|r| r.report.max_slack())
        .fold(0.0, f64::max);
    let seeds: Vec<_> = reports
        .iter()
        .map(|s| {
            let r = &s.report;
            json!({
                "seed": s.seed,
                "n": r.n,
                "d": r.d,
                "L": r.layers,
                "K_L": r.k_l,
                "per_i": r.positions.iter()
                    .map(|p| [p.measured_last, p.bound_last, p.measured_mean, p.bound_mean])
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    let report = json!({
        "frozen": true,
        "slack": args.slack,
        "violations": violations,
        "max_measured_over_bound": max_slack,
        "seeds": seeds,
    });
    write_json(args.out.as_deref(), &report)
}

/// Layout description printed by `partition-inspect`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub sentences: usize,
    pub text_tokens: usize,
    pub sequence_len: usize,
    #[serde(flatten)]
    pub layout: LayoutSummary,
}

pub fn inspect_text(args: &InspectArgs, text: &str) -> Result<InspectReport> {
    let flags = usize::from(args.k.is_some())
        + usize::from(args.every_n.is_some())
        + usize::from(args.matched_tokens);
    if flags > 1 {
        return Err(invalid("choose one of --k, --every-n, --matched-tokens"));
    }
    let text = text.trim();
    let spans = segment_sentences(text)?;
    let ids = tokens::encode(text);
    let plan = match (args.every_n, args.matched_tokens) {
        (Some(n), _) => build_partition_every_n(ids.len(), n)?,
        (_, true) => build_partition_every_n(ids.len(), matched_interval(ids.len(), spans.len()))?,
        _ => build_partition(&spans, args.k.unwrap_or(1))?,
    };
    let mut prefix = vec![tokens::BOS];
    if let Some(i) = &args.instruction {
        prefix.extend(tokens::encode(i));
    }
    let seq = augment(&plan, &ids, &prefix, usize::MAX)?;
    Ok(InspectReport {
        sentences: spans.len(),
        text_tokens: ids.len(),
        sequence_len: seq.len(),
        layout: LayoutSummary::new(&plan, &seq),
    })
}

pub fn cmd_partition_inspect(args: &InspectArgs) -> Result<()> {
    let text = match (&args.text, &args.input) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => fs::read_to_string(p)?,
        (None, None) => return Err(invalid("pass --text or --input")),
    };
    write_json(None, &inspect_text(args, &text)?)
}

/// Exit status for an error: 1 config, 2 I/O, 3 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => 1,
        ErrorKind::Io => 2,
        ErrorKind::Numeric => 3,
    }
}

/// One machine-parseable line: `error kind=<kind> reason=<json string>`.
pub fn error_line(err: &Error) -> String {
    let kind = match err.kind() {
        ErrorKind::Config => "config",
        ErrorKind::Io => "io",
        ErrorKind::Numeric => "numeric",
    };
    format!(
        "error kind={kind} reason={}",
        serde_json::Value::String(err.to_string())
    )
}

pub fn run(cli: &Cli, exec: Execution) -> Result<()> {
    match &cli.command {
        Command::InitWeights(a) => cmd_init_weights(a),
        Command::Embed(a) => cmd_embed(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Sensitivity(a) => cmd_sensitivity(a, exec),
        Command::PartitionInspect(a) => cmd_partition_inspect(a),
    }
}
