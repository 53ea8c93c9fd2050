use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tempcon::config::ExperimentConfig;
use tempcon::pipeline::{
    adapt_target, evaluate, export_embeddings, hyperparams_for, run_ablation, train_source, Level, Variant,
};
use tempcon::synthdata::{generate_domain_pair, read_dataset, write_dataset};
use tempcon::trn::ModelParams;
use tempcon::{Error, Result};

#[derive(Parser)]
#[command(name = "tempcon", version, about = "Source-free video domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline `key=value` override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for item in &self.overrides {
            cfg.apply_override(item)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a source/target dataset pair.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on labeled source videos.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Adapt a source model to unlabeled target videos.
    Adapt {
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        target_data: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print top-1 accuracy of a model on a labeled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run variants over seeds and write the accuracy table.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write eval-mode features as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        level: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Output directory for `out`, with the effective config echoed into it.
fn prepare(out: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = parent(out);
    create_dir(&dir)?;
    write(&dir.join("effective_config.txt"), &cfg.emit())?;
    Ok(dir)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    parent(out).join(format!("{stem}.{suffix}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, cfg } => {
            let cfg = cfg.resolve()?;
            create_dir(&out)?;
            write(&out.join("effective_config.txt"), &cfg.emit())?;
            let (source, target) = generate_domain_pair(&cfg.domain)?;
            write_dataset(&source, out.join("source.jsonl"))?;
            write_dataset(&target, out.join("target.jsonl"))?;
            println!("wrote {} source and {} target videos to {}", source.len(), target.len(), out.display());
        }
        Command::TrainSource { data, out, cfg } => {
            let cfg = cfg.resolve()?;
            let source = read_dataset(&data)?;
            prepare(&out, &cfg)?;
            let hp = hyperparams_for(&source, cfg.hyperparams());
            let run = train_source(&source, hp, &cfg.run)?;
            run.model.save(&out)?;
            run.log.write(sibling(&out, "metrics.csv"), sibling(&out, "timings.csv"))?;
            let acc = run.log.rows[run.best_epoch - 1].accuracy.unwrap_or(f64::NAN);
            println!("best epoch {} source accuracy {acc}", run.best_epoch);
        }
        Command::Adapt {
            source_model,
            target_data,
            variant,
            out,
            cfg,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(v) = variant {
                cfg.run.variant = v.parse()?;
            }
            let model = ModelParams::load(&source_model)?;
            let target = read_dataset(&target_data)?;
            prepare(&out, &cfg)?;
            let run = adapt_target(&model, &target, &cfg.run)?;
            run.model.save(&out)?;
            run.log.write(sibling(&out, "metrics.csv"), sibling(&out, "timings.csv"))?;
            println!("adapted with variant {} for {} epochs", cfg.run.variant, run.log.rows.len());
        }
        Command::Eval { model, data, cfg } => {
            let cfg = cfg.resolve()?;
            let model = ModelParams::load(&model)?;
            let ds = read_dataset(&data)?;
            let report = evaluate(&model, &ds, cfg.run.inference)?;
            println!("accuracy {}", report.accuracy);
            for (c, (correct, total)) in report.per_class.iter().enumerate() {
                println!("class {c} {correct}/{total}");
            }
        }
        Command::Ablate {
            variants,
            seeds,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?
            };
            let seeds = if seeds.is_empty() { cfg.run.seeds.clone() } else { seeds };
            prepare(&out, &cfg)?;
            let table = run_ablation(&cfg.domain, cfg.hyperparams(), &cfg.run, &variants, &seeds)?;
            write(&out, &table.to_csv())?;
            print!("{}", table.to_csv());
        }
        Command::ExportEmbeddings { model, data, level, out } => {
            let level: Level = level.parse()?;
            let model = ModelParams::load(&model)?;
            let ds = read_dataset(&data)?;
            create_dir(&parent(&out))?;
            export_embeddings(&model, &ds, level, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
