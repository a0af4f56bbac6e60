//! The `docnmt` command-line tool.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ObjectiveKind, RunConfig};
use crate::corpus::{
    encode_parallel, load_binarized, load_documents, load_parallel, parse_documents, save_binarized, Document,
    EncodedDocument, Vocab,
};
use crate::error::{Error, Result};
use crate::metrics::corpus_bleu;
use crate::model::{Model, ModelConfig};
use crate::numerics::DType;
use crate::pretrain_io::{init_encoder, Checkpoint};
use crate::search::{translate_document, SearchConfig, DEFAULT_ALPHA, DEFAULT_BEAM};
use crate::synthetic::{self, SyntheticConfig};
use crate::trainer::{build_examples, Trainer};

/// Environment variable read for log verbosity (`error` … `trace`).
pub const LOG_ENV: &str = "DOCNMT_LOG";
pub const CONFIG_KEY: &str = "config";

#[derive(Debug, Parser)]
#[command(name = "docnmt", version, about = "Document-level Transformer translation with source context")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build vocabularies and a binarized corpus from tokenized text.
    Prepare(PrepareArgs),
    /// Train a model from a key=value config.
    Train(TrainArgs),
    /// Translate documents with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of hypotheses against references.
    Score(ScoreArgs),
    /// Inspect or repack a checkpoint.
    #[command(subcommand)]
    Convert(ConvertCommand),
    /// Write the synthetic context-disambiguation corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Source text: one tokenized sentence per line, blank line between documents.
    #[arg(long)]
    pub src: PathBuf,
    /// Target text aligned with the source; omit for monolingual data.
    #[arg(long)]
    pub tgt: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 32000)]
    pub max_vocab: usize,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    /// Reuse this source vocabulary instead of building one.
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    /// Reuse this target vocabulary instead of building one.
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file; keys not given keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` assignments applied after the file.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    /// Documents to translate, in the same layout as training text.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub beam: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Overwrite context encoder states with noise before decoding.
    #[arg(long)]
    pub noise_context: bool,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ConvertCommand {
    /// List tensor names, precisions, shapes and metadata.
    Inspect { path: PathBuf },
    /// Rewrite a checkpoint with renamed, filtered or recast tensors.
    Repack(RepackArgs),
}

#[derive(Debug, Args)]
pub struct RepackArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// `f32` or `f64`.
    #[arg(long)]
    pub dtype: Option<String>,
    /// `old=new` name-prefix replacement, applied in order.
    #[arg(long = "rename")]
    pub renames: Vec<String>,
    /// Keep only tensors whose (renamed) name starts with this prefix.
    #[arg(long)]
    pub keep_prefix: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub documents: usize,
    #[arg(long, default_value_t = 3)]
    pub sentences: usize,
    /// Documents held out into dev.src / dev.tgt.
    #[arg(long, default_value_t = 100)]
    pub dev: usize,
    /// Probability of spelling a source filler word `vK` instead of `wK`.
    #[arg(long, default_value_t = 0.0)]
    pub variant_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train(&a),
        Command::Translate(a) => translate(&a),
        Command::Score(a) => score(&a),
        Command::Convert(c) => convert(c),
        Command::Synth(a) => synth(&a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare(a: &PrepareArgs) -> Result<()> {
    let docs = match &a.tgt {
        Some(tgt) => load_parallel(&a.src, tgt)?,
        None => load_documents(&a.src)?,
    };
    let src_vocab = match &a.src_vocab {
        Some(p) => Vocab::load(p)?,
        None => Vocab::build_source(&docs, a.max_vocab, a.min_count),
    };
    let tgt_vocab = match &a.tgt_vocab {
        Some(p) => Vocab::load(p)?,
        None => Vocab::build_target(&docs, a.max_vocab, a.min_count),
    };
    create_dir(&a.out_dir)?;
    src_vocab.save(a.out_dir.join("src.vocab"))?;
    tgt_vocab.save(a.out_dir.join("tgt.vocab"))?;
    save_binarized(a.out_dir.join("corpus.bin"), &encode_parallel(&docs, &src_vocab, &tgt_vocab))?;
    info!(
        "prepared {} documents, source vocabulary {}, target vocabulary {}",
        docs.len(),
        src_vocab.len(),
        tgt_vocab.len()
    );
    Ok(())
}

fn check_ids(docs: &[EncodedDocument], src: usize, tgt: usize) -> Result<()> {
    for (s, t) in docs.iter().flatten() {
        if let Some(&id) = s.iter().find(|&&id| id >= src) {
            return Err(Error::CheckpointMismatch(format!("corpus id {id} outside source vocabulary of {src}")));
        }
        if let Some(&id) = t.iter().find(|&&id| id >= tgt) {
            return Err(Error::CheckpointMismatch(format!("corpus id {id} outside target vocabulary of {tgt}")));
        }
    }
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{key} must be set")))
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &a.overrides {
        cfg.apply(o)?;
    }
    let src_vocab = Vocab::load(required(&cfg.src_vocab, "src_vocab")?)?;
    let tgt_vocab = Vocab::load(required(&cfg.tgt_vocab, "tgt_vocab")?)?;
    let model_cfg = cfg.model_config(src_vocab.len(), tgt_vocab.len())?;
    let train_cfg = cfg.train_config()?;
    let objective = cfg.objective_config()?;
    let docs = load_binarized(required(&cfg.train_data, "train_data")?)?;
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_ids(&docs, src_vocab.len(), tgt_vocab.len())?;
    if cfg.objective == ObjectiveKind::Translation && docs.iter().flatten().any(|(_, t)| t.is_empty()) {
        return Err(Error::InvalidData("translation training needs a target for every sentence".into()));
    }
    let examples = build_examples(&docs, cfg.context, model_cfg.max_positions, model_cfg.position_mode)?;

    create_dir(&cfg.run_dir)?;
    let effective = cfg.to_text();
    write_file(&cfg.run_dir.join("config.txt"), &effective)?;

    let mut model = Model::<f32>::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if let Some(path) = &cfg.init_checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let report = init_encoder(&mut model.params, &ckpt, cfg.init_strict).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::CheckpointMismatch(m),
            other => other,
        })?;
        info!(
            "encoder init: {} initialized, {} skipped, {} shape-mismatched, {} unused",
            report.initialized.len(),
            report.skipped.len(),
            report.shape_mismatched.len(),
            report.unused.len()
        );
        let mut text = String::new();
        for (label, names) in [
            ("initialized", &report.initialized),
            ("skipped", &report.skipped),
            ("shape_mismatched", &report.shape_mismatched),
            ("unused", &report.unused),
        ] {
            for n in names {
                text.push_str(&format!("{label} {n}\n"));
            }
        }
        write_file(&cfg.run_dir.join("init_report.txt"), text)?;
    }

    let log_path = cfg.run_dir.join("metrics.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let save = |model: &Model<f32>, path: &Path| -> Result<()> {
        let mut ckpt = Checkpoint::from_params(&model.params);
        ckpt.metadata.insert(CONFIG_KEY.into(), effective.clone());
        ckpt.save(path)
    };
    let mut trainer = Trainer::new(model, examples, train_cfg, objective)?;
    let stdout = io::stdout();
    let outcome = trainer.run(|t, m| {
        if m.step % cfg.log_every.max(1) == 0 || m.step == cfg.max_steps {
            let line = m.to_string();
            writeln!(stdout.lock(), "{line}").map_err(|e| Error::io("<stdout>", e))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            save(&t.model, &cfg.run_dir.join(format!("checkpoint_{}.ntc", m.step)))?;
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    outcome?;
    save(&trainer.model, &cfg.run_dir.join("model.ntc"))
}

/// Rebuilds a model from a checkpoint written by `train`.
pub fn load_model(path: &Path, src_vocab: usize, tgt_vocab: usize) -> Result<(Model<f32>, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let text = ckpt
        .metadata
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::CheckpointMismatch("checkpoint carries no run config".into()))?;
    let cfg = RunConfig::parse_text(text)?;
    let model_cfg: ModelConfig = cfg.model_config(src_vocab, tgt_vocab)?;
    let params = ckpt.to_params(&model_cfg)?;
    Ok((Model::from_params(model_cfg, params)?, cfg))
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn translate(a: &TranslateArgs) -> Result<()> {
    let src_vocab = Vocab::load(&a.src_vocab)?;
    let tgt_vocab = Vocab::load(&a.tgt_vocab)?;
    let (model, cfg) = load_model(&a.checkpoint, src_vocab.len(), tgt_vocab.len())?;
    let docs = load_documents(&a.input)?;
    let search = SearchConfig { beam: a.beam, max_len: a.max_len, alpha: a.alpha };
    let mut noise = a.noise_context.then(|| ChaCha8Rng::seed_from_u64(a.noise_seed));
    let out_name = a.output.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut out = open_output(&a.output)?;
    for (d, doc) in docs.iter().enumerate() {
        let sources: Vec<Vec<usize>> = doc.sentences.iter().map(|s| src_vocab.encode(s)).collect();
        let hyps = translate_document(&model, &sources, cfg.context, &search, noise.as_mut())?;
        if d > 0 {
            writeln!(out).map_err(|e| Error::io(&out_name, e))?;
        }
        for h in hyps {
            let words = tgt_vocab.decode(h.output())?;
            writeln!(out, "{}", words.join(" ")).map_err(|e| Error::io(&out_name, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&out_name, e))
}

fn sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_documents(&text).into_iter().flat_map(|d| d.sentences).collect())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let report = corpus_bleu(&sentences(&a.hyp)?, &sentences(&a.reference)?)?;
    println!("{report}");
    Ok(())
}

fn convert(c: ConvertCommand) -> Result<()> {
    match c {
        ConvertCommand::Inspect { path } => {
            let ckpt = Checkpoint::load(&path)?;
            let mut total = 0;
            for (name, t) in ckpt.iter() {
                let dtype = match t.dtype() {
                    DType::F32 => "f32",
                    DType::F64 => "f64",
                };
                println!("{name}\t{dtype}\t{:?}", t.shape());
                total += t.numel();
            }
            println!("tensors={} elements={total}", ckpt.len());
            for (k, v) in &ckpt.metadata {
                println!("meta {k}: {} bytes", v.len());
            }
            Ok(())
        }
        ConvertCommand::Repack(a) => repack(&a),
    }
}

fn repack(a: &RepackArgs) -> Result<()> {
    let dtype = match a.dtype.as_deref() {
        None => None,
        Some("f32") => Some(DType::F32),
        Some("f64") => Some(DType::F64),
        Some(other) => return Err(Error::Config(format!("unknown dtype {other:?}"))),
    };
    let renames: Vec<(&str, &str)> = a
        .renames
        .iter()
        .map(|r| r.split_once('=').ok_or_else(|| Error::Config(format!("rename {r:?} is not old=new"))))
        .collect::<Result<_>>()?;
    let input = Checkpoint::load(&a.input)?;
    let mut out = Checkpoint::new();
    out.metadata = input.metadata.clone();
    for (name, t) in input.iter() {
        let mut name = name.to_string();
        for (old, new) in &renames {
            if let Some(rest) = name.strip_prefix(old) {
                name = format!("{new}{rest}");
            }
        }
        if a.keep_prefix.as_deref().is_some_and(|p| !name.starts_with(p)) {
            continue;
        }
        let t = match dtype {
            Some(d) if d != t.dtype() => t.cast(d),
            _ => t.clone(),
        };
        out.insert(name, t)?;
    }
    out.save(&a.output)
}

fn write_side(path: &Path, docs: &[Document], target: bool) -> Result<()> {
    let mut text = String::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let side = if target { d.targets.as_ref().expect("synthetic documents are parallel") } else { &d.sentences };
        for s in side {
            text.push_str(&s.join(" "));
            text.push('\n');
        }
    }
    write_file(path, text)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let docs = synthetic::generate(&SyntheticConfig {
        documents: a.documents,
        sentences: a.sentences,
        variant_rate: a.variant_rate,
        seed: a.seed,
        ..SyntheticConfig::default()
    })?;
    let (train, dev) = synthetic::split(docs, a.dev, a.seed);
    create_dir(&a.out_dir)?;
    write_side(&a.out_dir.join("train.src"), &train, false)?;
    write_side(&a.out_dir.join("train.tgt"), &train, true)?;
    if !dev.is_empty() {
        write_side(&a.out_dir.join("dev.src"), &dev, false)?;
        write_side(&a.out_dir.join("dev.tgt"), &dev, true)?;
    }
    info!("wrote {} training and {} dev documents", train.len(), dev.len());
    Ok(())
}
