use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use eventclip::checkpoint::load_checkpoint;
use eventclip::encoders::{load_backend, EncoderBackend};
use eventclip::evaluation::{
    ablation_harness, emit_report, evaluate, k_sweep, load_eval_split, superset_eval,
    zero_shot_eval, AblationRow, ExperimentData, RunReport,
};
use eventclip::events_io::Split;
use eventclip::pipeline::{reconstruct_file, train, TrainConfig};
use eventclip::prototypes::{build_prototypes, load_image_dir, Linkage};
use eventclip::synthetic::{write_dataset, SyntheticConfig};

#[derive(Parser)]
#[command(
    name = "eventclip",
    version,
    about = "Label-free event-camera recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON training config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override any config key by dotted path, e.g. `loss.lambda_rep=0` or
    /// `network.base_width=8`. Values are parsed as JSON, falling back to a
    /// plain string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        let mut sets = self.set.clone();
        let quoted = |p: &Path| Value::String(p.display().to_string()).to_string();
        if let Some(m) = &self.manifest {
            sets.push(format!("manifest={}", quoted(m)));
        }
        if let Some(b) = &self.backend {
            sets.push(format!("backend={}", Value::String(b.clone())));
        }
        if let Some(s) = self.steps {
            sets.push(format!("steps={s}"));
        }
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(o) = &self.output_dir {
            sets.push(format!("output_dir={}", quoted(o)));
        }
        for s in &sets {
            apply_override(&mut value, s)?;
        }
        let cfg: TrainConfig = serde_json::from_value(value).context("invalid config override")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not KEY=VALUE"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("{key}: {part} is not inside an object"))?;
        if !obj.contains_key(*part) {
            bail!("unknown config key {key}");
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to read test data from; defaults to the checkpoint's.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Backend identifier; defaults to the checkpoint's.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reconstruction network.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one event file to an 8-bit grayscale PNG.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standard accuracy over the checkpoint's categories.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        /// File with one category per line; defaults to the training list.
        #[arg(long)]
        categories: Option<PathBuf>,
    },
    /// Accuracy on categories never used in training.
    ZeroShot {
        #[command(flatten)]
        eval: EvalArgs,
        /// Unseen categories, one per line.
        #[arg(long)]
        test_categories: PathBuf,
    },
    /// Accuracy with extra distractor prompts.
    Superset {
        #[command(flatten)]
        eval: EvalArgs,
        /// Extra category names, one per line.
        #[arg(long)]
        extras: PathBuf,
    },
    /// Train and evaluate once per K value.
    SweepK {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,16,32")]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the component ablation rows.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        rows: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster unpaired images into per-category prototypes.
    BuildPrototypes {
        /// Directory with one sub-directory of PNG images per category.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value = "stub:seed=7")]
        backend: String,
        #[arg(long, value_enum, default_value = "average")]
        linkage: LinkageArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic event dataset.
    Synth {
        /// JSON generator config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum LinkageArg {
    Average,
    Single,
    Complete,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => bail!("split must be train or test, got {s}"),
    }
}

fn write_report(report: RunReport, out: &Path) -> Result<()> {
    for r in &report.reports {
        println!(
            "{}: accuracy {:.4} ({}/{})",
            r.protocol, r.overall_accuracy, r.correct, r.total
        );
    }
    for t in &report.tables {
        for row in &t.rows {
            println!("{} {}: accuracy {:.4}", t.name, row.label, row.accuracy);
        }
    }
    for p in emit_report(&report, out)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = config.resolve()?;
            let path = train(&cfg, resume.as_deref())?;
            println!("{}", path.display());
        }
        Command::Reconstruct {
            checkpoint,
            events,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            reconstruct_file(&ckpt, &events)?.save_png(&out)?;
        }
        Command::Eval { eval, categories } => {
            let (ckpt, backend, tensors, labels) = eval_inputs(&eval)?;
            let cats = match categories {
                Some(p) => read_lines(&p)?,
                None => ckpt.categories.clone(),
            };
            let (tensors, labels) = restrict(tensors, labels, &cats);
            let report = evaluate(&ckpt, &tensors, &labels, &cats, backend.as_ref())?;
            write_report(
                RunReport {
                    reports: vec![report],
                    tables: vec![],
                },
                &eval.out,
            )?;
        }
        Command::ZeroShot {
            eval,
            test_categories,
        } => {
            let (ckpt, backend, tensors, labels) = eval_inputs(&eval)?;
            let test = read_lines(&test_categories)?;
            let (tensors, labels) = restrict(tensors, labels, &test);
            let report = zero_shot_eval(
                &ckpt,
                &ckpt.categories,
                &test,
                &tensors,
                &labels,
                backend.as_ref(),
            )?;
            write_report(
                RunReport {
                    reports: vec![report],
                    tables: vec![],
                },
                &eval.out,
            )?;
        }
        Command::Superset { eval, extras } => {
            let (ckpt, backend, tensors, labels) = eval_inputs(&eval)?;
            let extras = read_lines(&extras)?;
            let (tensors, labels) = restrict(tensors, labels, &ckpt.categories);
            let base = evaluate(&ckpt, &tensors, &labels, &ckpt.categories, backend.as_ref())?;
            let with = superset_eval(
                &ckpt,
                &ckpt.categories,
                &extras,
                &tensors,
                &labels,
                backend.as_ref(),
            )?;
            write_report(
                RunReport {
                    reports: vec![base, with],
                    tables: vec![],
                },
                &eval.out,
            )?;
        }
        Command::SweepK {
            config,
            values,
            seeds,
            out,
        } => {
            let cfg = config.resolve()?;
            let backend: Arc<dyn EncoderBackend> = Arc::from(load_backend(&cfg.backend)?);
            let data = ExperimentData::load(&cfg)?;
            let table = k_sweep(&cfg, &values, &seeds, backend, &data)?;
            write_report(
                RunReport {
                    reports: vec![],
                    tables: vec![table],
                },
                &out,
            )?;
        }
        Command::Ablate {
            config,
            rows,
            seeds,
            out,
        } => {
            let cfg = config.resolve()?;
            let all = AblationRow::standard();
            let selected = rows
                .iter()
                .map(|&r| {
                    all.iter()
                        .find(|a| a.id == r)
                        .copied()
                        .with_context(|| format!("no ablation row {r}"))
                })
                .collect::<Result<Vec<_>>>()?;
            let backend: Arc<dyn EncoderBackend> = Arc::from(load_backend(&cfg.backend)?);
            let data = ExperimentData::load(&cfg)?;
            let table = ablation_harness(&cfg, &selected, &seeds, backend, &data)?;
            write_report(
                RunReport {
                    reports: vec![],
                    tables: vec![table],
                },
                &out,
            )?;
        }
        Command::BuildPrototypes {
            images,
            clusters,
            backend,
            linkage,
            out,
        } => {
            let backend = load_backend(&backend)?;
            let groups = load_image_dir(&images)?;
            let linkage = match linkage {
                LinkageArg::Average => Linkage::Average,
                LinkageArg::Single => Linkage::Single,
                LinkageArg::Complete => Linkage::Complete,
            };
            let bank = build_prototypes(backend.as_ref(), &groups, clusters, linkage)?;
            bank.save(&out)?;
            println!(
                "{} categories x {} prototypes -> {}",
                bank.categories().len(),
                bank.clusters(),
                out.display()
            );
        }
        Command::Synth { config, out } => {
            let cfg: SyntheticConfig = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
                None => SyntheticConfig::default(),
            };
            let manifest = write_dataset(&cfg, &out)?;
            println!("{} recordings -> {}", manifest.entries.len(), out.display());
        }
    }
    Ok(())
}

type EvalInputs = (
    eventclip::checkpoint::Checkpoint,
    Box<dyn EncoderBackend>,
    Vec<eventclip::representation::EventTensor>,
    Vec<String>,
);

fn eval_inputs(args: &EvalArgs) -> Result<EvalInputs> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let backend = load_backend(args.backend.as_deref().unwrap_or(&ckpt.backend))?;
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| ckpt.config.manifest.clone());
    let (tensors, labels) = load_eval_split(&ckpt.config, &manifest, parse_split(&args.split)?)?;
    Ok((ckpt, backend, tensors, labels))
}

fn restrict<T>(items: Vec<T>, labels: Vec<String>, keep: &[String]) -> (Vec<T>, Vec<String>) {
    items
        .into_iter()
        .zip(labels)
        .filter(|(_, l)| keep.contains(l))
        .unzip()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
