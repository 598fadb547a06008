use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use loraudio::config::CliConfig;
use loraudio::corpus::{synth_corpus, Corpus};
use loraudio::io::{fingerprint, read_bytes};
use loraudio::lora::{encode_adapters, load_adapters, matrix_dims, ADAPTER_MAGIC};
use loraudio::metrics::write_scores;
use loraudio::model::{build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use loraudio::tensor::Precision;
use loraudio::trainer::{self, Dataset};
use loraudio::{lora, Error};

#[derive(Parser)]
#[command(name = "loraudio", version, about = "Low-rank adapter incremental learning for fake-audio detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Corpus directory with `protocol.txt` and the audio files.
    #[arg(long)]
    data: PathBuf,
    /// Protocol file, if not `<data>/protocol.txt`.
    #[arg(long)]
    protocol: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic corpus (WAV files plus protocol.txt).
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Trains a source model with every parameter trainable.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains adapters on a frozen base.
    TrainAdapter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tag: String,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        paper_literal_init: bool,
        /// Adapter file; defaults to `<tag>.fadlora` next to the base.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continues full-model training of a base on new data.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a corpus and prints the EER.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Score file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Runs the whole base → adapters (or finetune) sequence.
    Sequence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        paper_literal_init: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Prints the tensors of a checkpoint or adapter file.
    Inspect {
        #[command(flatten)]
        common: Common,
        file: PathBuf,
        /// Base checkpoint (required for adapter files).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Finite-difference check of every operator and the adapted loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn config(common: &Common, extra: &[(&str, String)]) -> anyhow::Result<CliConfig> {
    let mut overrides = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s:?} is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    Ok(CliConfig::load(common.config.as_deref(), &overrides)?)
}

fn load_corpus(cfg: &CliConfig, data: &DataArgs, tag: &str) -> anyhow::Result<Corpus> {
    Ok(cfg.load_corpus(&data.data, data.protocol.as_deref(), tag)?)
}

fn dataset(cfg: &CliConfig, data: &DataArgs, tag: &str) -> anyhow::Result<Dataset> {
    Ok(Dataset::from_corpus(&load_corpus(cfg, data, tag)?, &cfg.lfcc)?)
}

fn dir_tag(data: &DataArgs) -> String {
    data.data
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("data")
        .to_string()
}

fn print_losses(o: &trainer::TrainOutcome) {
    println!("steps: {}", o.steps);
    println!("initial loss: {:.6}", o.initial_loss);
    println!("final epoch loss: {:.6}", o.final_loss());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData { common, out, tag } => {
            let cfg = config(&common, &[])?;
            let tag = tag.unwrap_or_else(|| cfg.corpus_tag.clone());
            let corpus = synth_corpus(&cfg.corpus, &tag)?;
            corpus.save(&out)?;
            println!("wrote {} utterances to {}", corpus.len(), out.display());
        }
        Command::TrainBase { common, data, out } => {
            let cfg = config(&common, &[])?;
            let ds = dataset(&cfg, &data, &dir_tag(&data))?;
            let init = build_model(&cfg.model, cfg.seed)?;
            let (model, outcome) = trainer::train_base(&init, &ds, &cfg.train)?;
            let bytes = save_checkpoint(&model, &out)?;
            print_losses(&outcome);
            println!("checkpoint: {} ({} bytes, fingerprint {:016x})", out.display(), bytes.len(), fingerprint(&bytes));
        }
        Command::TrainAdapter {
            common,
            data,
            base,
            tag,
            rank,
            paper_literal_init,
            out,
        } => {
            let mut extra = vec![("train.rank", rank.to_string()), ("train.mode", "lora".to_string())];
            if paper_literal_init {
                extra.push(("train.paper_literal_init", "true".into()));
            }
            let cfg = config(&common, &extra)?;
            let (model, _) = load_checkpoint(&base, &cfg.model).with_context(|| format!("--base {}", base.display()))?;
            let mut ds = dataset(&cfg, &data, &tag)?;
            ds.tag = tag.clone();
            let (set, outcome) = trainer::train_adapter(&model, &ds, &cfg.train)?;
            let out = out.unwrap_or_else(|| base.with_file_name(format!("{tag}.fadlora")));
            if out.file_stem().and_then(|s| s.to_str()) != Some(tag.as_str()) {
                return Err(Error::invalid("--out", format!("adapter file name must be {tag}.fadlora")).into());
            }
            let bytes = lora::save_adapters(&set, &out)?;
            print_losses(&outcome);
            println!("adapters: {} ({} bytes, {} parameters)", out.display(), bytes.len(), set.param_count());
        }
        Command::Finetune { common, data, base, out } => {
            let cfg = config(&common, &[("train.mode", "finetune".to_string())])?;
            let (model, _) = load_checkpoint(&base, &cfg.model).with_context(|| format!("--base {}", base.display()))?;
            let ds = dataset(&cfg, &data, &dir_tag(&data))?;
            let (tuned, outcome) = trainer::finetune(&model, &ds, &cfg.train)?;
            let bytes = save_checkpoint(&tuned, &out)?;
            print_losses(&outcome);
            println!("checkpoint: {} ({} bytes)", out.display(), bytes.len());
        }
        Command::Eval {
            common,
            data,
            base,
            adapters,
            out,
            jobs,
        } => {
            let cfg = config(&common, &[])?;
            let (model, base_bytes) =
                load_checkpoint(&base, &cfg.model).with_context(|| format!("--base {}", base.display()))?;
            let set = match &adapters {
                Some(p) => Some(load_adapters(p, &model, &base_bytes).with_context(|| format!("--adapters {}", p.display()))?),
                None => None,
            };
            let ds = dataset(&cfg, &data, &dir_tag(&data))?;
            let (eer, records) = trainer::evaluate(&model, set.as_ref(), &ds, jobs.max(1))?;
            write_scores(&records, &out)?;
            println!("EER: {:.4}%", 100.0 * eer);
        }
        Command::Sequence {
            common,
            out,
            mode,
            paper_literal_init,
            jobs,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(("train.mode", m));
            }
            if paper_literal_init {
                extra.push(("train.paper_literal_init", "true".to_string()));
            }
            let cfg = config(&common, &extra)?;
            let plan = cfg.sequence_plan()?;
            let outcome = trainer::run_sequence(&plan, &cfg.model, &cfg.lfcc, &cfg.train, &out, jobs.max(1))?;
            print!("{}", outcome.matrix.to_table());
            println!("report: {}", outcome.report_path.display());
        }
        Command::Inspect { common, file, base } => {
            let cfg = config(&common, &[])?;
            inspect(&cfg, &file, base.as_deref())?;
        }
        Command::Gradcheck { common, instances } => {
            let cfg = config(&common, &[])?;
            let precision = Precision::from_env()?;
            let reports = match precision {
                Precision::F64 => loraudio::gradcheck_suite::<f64>(cfg.seed, instances)?,
                Precision::F32 => loraudio::gradcheck_suite::<f32>(cfg.seed, instances)?,
            };
            let tol = match precision {
                Precision::F64 => 1e-5,
                Precision::F32 => 5e-2,
            };
            let mut worst: f64 = 0.0;
            for (name, r) in &reports {
                println!("{name:<24} max_rel_error {:.3e}", r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            }
            println!("precision {precision:?}, worst {worst:.3e}, tolerance {tol:.0e}");
            if worst > tol {
                return Err(anyhow!("gradient check exceeded tolerance"));
            }
        }
    }
    Ok(())
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn inspect(cfg: &CliConfig, file: &Path, base: Option<&Path>) -> anyhow::Result<()> {
    let bytes = read_bytes(file)?;
    if bytes.starts_with(ADAPTER_MAGIC) {
        let base = base.ok_or_else(|| Error::invalid("--base", "inspecting an adapter file needs --base"))?;
        let (model, base_bytes) = load_checkpoint(base, &cfg.model).with_context(|| format!("--base {}", base.display()))?;
        let set = load_adapters(file, &model, &base_bytes)?;
        println!("adapter set {} (base fingerprint {:016x})", set.tag, set.base_fingerprint);
        println!("{:<28} {:>12} {:>5} {:>10} {:>10}", "target", "matrix", "rank", "params", "bytes");
        for (name, pair) in set.pairs() {
            let (d_out, d_in) = matrix_dims(model.get(name).map(|t| t.shape()).unwrap_or(&[]))?;
            println!(
                "{name:<28} {:>12} {:>5} {:>10} {:>10}",
                format!("{d_out}x{d_in}"),
                pair.rank(),
                pair.param_count(),
                4 * pair.param_count()
            );
        }
        debug_assert_eq!(encode_adapters(&set), bytes);
        println!("adapter parameters: {}", set.param_count());
        println!("base parameters: {}", model.param_count());
        println!("adapter bytes: {}", bytes.len());
        println!("base bytes: {}", base_bytes.len());
        println!("storage ratio: {:.6}", bytes.len() as f64 / base_bytes.len() as f64);
    } else {
        let model = decode_checkpoint(&bytes, &cfg.model)?;
        println!("checkpoint (fingerprint {:016x})", fingerprint(&bytes));
        println!("{:<28} {:>14} {:>10} {:>10}", "tensor", "shape", "params", "bytes");
        for (name, t) in model.tensors() {
            println!("{name:<28} {:>14} {:>10} {:>10}", shape_str(t.shape()), t.len(), 4 * t.len());
        }
        debug_assert_eq!(encode_checkpoint(&model), bytes);
        println!("parameters: {}", model.param_count());
        println!("bytes: {}", bytes.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
