//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataio::{scan_custom, scan_gopro, scan_kohler, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imgcore::{read_png, write_png};
use crate::metrics::{evaluate, IdentityRestorer, MetricReport, Restorer};
use crate::nets::FeatureExtractor;
use crate::pipeline::Pipeline;
use crate::trainer::{self, Checkpoint, ConfigSources, Preset, Stage, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "edgeblur", version, about = "Edge-guided multi-scale GAN deblurring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the edge-restoration network (first stage).
    TrainEdge(TrainArgs),
    /// Train the multi-scale deblurring network (second stage).
    TrainDeblur(TrainArgs),
    /// Deblur PNG files with a deblur-stage checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint (or the blurred baseline) on a dataset.
    Evaluate(EvalArgs),
    /// Scan a dataset tree and write its manifest.
    Scan(ScanArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    /// GoPro tree, Köhler tree, manifest file, or flat pair directories,
    /// decided from what the path contains.
    Auto,
    Gopro,
    Kohler,
    Custom,
    Manifest,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation preset: B, BE, BC or proposed.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Layout::Auto)]
    pub layout: Layout,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PNG files or directories of PNG files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the conditioning edge map of each input.
    #[arg(long)]
    pub dump_edges: bool,
    /// Expected architecture; the checkpoint must match it.
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Deblur-stage checkpoint; omit to score the blurred inputs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Layout::Auto)]
    pub layout: Layout,
    /// Split to score; ignored for Köhler and custom layouts.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    pub root: PathBuf,
    #[arg(long, value_enum, default_value_t = Layout::Auto)]
    pub layout: Layout,
    /// Manifest output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}"))),
    }
}

/// Loads a dataset in the given layout. Custom trees are tagged `split`.
pub fn load_manifest(path: &Path, layout: Layout, split: Split) -> Result<DatasetManifest> {
    let layout = match layout {
        Layout::Auto if path.is_file() => Layout::Manifest,
        Layout::Auto if path.join("train").is_dir() || path.join("test").is_dir() => Layout::Gopro,
        Layout::Auto if path.join("blur").is_dir() => Layout::Custom,
        Layout::Auto => Layout::Kohler,
        other => other,
    };
    match layout {
        Layout::Gopro => scan_gopro(path),
        Layout::Kohler => scan_kohler(path),
        Layout::Custom => scan_custom(path, split),
        Layout::Manifest => DatasetManifest::read(path),
        Layout::Auto => unreachable!("resolved above"),
    }
}

pub fn resolve_config(args: &ConfigArgs, stage: Option<Stage>) -> Result<TrainConfig> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let preset = args.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    TrainConfig::resolve(&ConfigSources {
        file_text: text.as_deref(),
        overrides: &args.overrides,
        seed: args.seed,
        preset,
        stage,
    })
}

fn has_config(args: &ConfigArgs) -> bool {
    args.config.is_some() || !args.overrides.is_empty() || args.seed.is_some() || args.preset.is_some()
}

pub fn run_train(stage: Stage, args: &TrainArgs) -> Result<trainer::TrainSummary> {
    let mut trainer = match &args.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.stage() != stage {
                return Err(Error::Config(format!(
                    "{} is a {} checkpoint",
                    dir.display(),
                    ck.stage().name()
                )));
            }
            let requested = if has_config(&args.config) {
                let cfg = resolve_config(&args.config, Some(stage))?;
                let mut same = cfg.clone();
                same.extend_from(&ck.config);
                if same != ck.config {
                    return Err(Error::Config(
                        "a resumed run keeps its saved configuration apart from epochs, max_steps and checkpoint_every"
                            .into(),
                    ));
                }
                Some(cfg)
            } else {
                None
            };
            let fe = FeatureExtractor::from_env(ck.config.feature_layer()?)?;
            let mut t = Trainer::from_checkpoint(ck, fe)?;
            if let Some(cfg) = requested {
                t.extend_run(cfg.epochs, cfg.max_steps, cfg.checkpoint_every);
            }
            t
        }
        None => Trainer::new(resolve_config(&args.config, Some(stage))?)?,
    };
    eprintln!("effective configuration:\n{}", trainer.config().to_toml());
    let manifest = load_manifest(&args.data, args.layout, Split::Train)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let train_set = if manifest.count(Split::Train) > 0 {
        manifest.filter(Split::Train)
    } else {
        manifest
    };
    crate::dataio::preflight(&train_set)?;
    let summary = trainer::train(&mut trainer, &train_set, &args.out)?;
    eprintln!(
        "finished: {} generator steps, {} critic steps; checkpoint {}",
        summary.counters.generator_steps,
        summary.counters.critic_steps,
        summary.final_checkpoint().display()
    );
    Ok(summary)
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Returns the written restoration paths.
pub fn run_infer(args: &InferArgs) -> Result<Vec<PathBuf>> {
    let expected = if has_config(&args.config) {
        Some(resolve_config(&args.config, Some(Stage::Deblur))?)
    } else {
        None
    };
    let pipeline = Pipeline::from_checkpoint_with(&args.checkpoint, expected.as_ref())?;
    let inputs = collect_inputs(&args.inputs)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut written = Vec::new();
    for input in inputs {
        let img = read_png(&input)?;
        let r = pipeline.restore_full(&img)?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let out = args.out.join(format!("{stem}.png"));
        write_png(&r.image, &out)?;
        if args.dump_edges {
            write_png(&r.edges.image, args.out.join(format!("{stem}_edges.png")))?;
        }
        written.push(out);
    }
    Ok(written)
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_ROWS: &str = "rows.ndjson";
pub const REPORT_TABLE: &str = "report.txt";

pub fn run_evaluate(args: &EvalArgs) -> Result<MetricReport> {
    let restorer: Box<dyn Restorer> = match &args.checkpoint {
        Some(dir) => Box::new(Pipeline::from_checkpoint(dir)?),
        None => Box::new(IdentityRestorer),
    };
    let split = parse_split(&args.split)?;
    let manifest = load_manifest(&args.data, args.layout, split)?;
    let manifest = manifest.filter(split);
    if manifest.is_empty() {
        return Err(Error::Data(format!("no {} pairs in {}", split.name(), args.data.display())));
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let rows_path = args.out.join(REPORT_ROWS);
    let mut rows = fs::File::create(&rows_path).map_err(|e| Error::io(&rows_path, e))?;
    let dataset = args.data.display().to_string();
    let report = evaluate(&manifest, &dataset, restorer.as_ref(), Some(&mut rows as &mut dyn Write))?;
    let write = |name: &str, text: String| {
        let p = args.out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(REPORT_JSON, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write(REPORT_TABLE, report.table())?;
    println!("{:<24} {:>8} {:>8} {:>8}", "", "PSNR", "SSIM", "MSSIM");
    println!("{}", report.aggregate_row());
    Ok(report)
}

pub fn run_scan(args: &ScanArgs) -> Result<DatasetManifest> {
    let m = load_manifest(&args.root, args.layout, Split::Test)?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} pairs ({} train, {} test), {} warnings, content hash {}",
        m.len(),
        m.count(Split::Train),
        m.count(Split::Test),
        m.warnings.len(),
        m.content_hash()
    );
    if let Some(out) = &args.out {
        m.write(out)?;
    }
    Ok(m)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainEdge(a) => run_train(Stage::Edge, a).map(drop),
        Command::TrainDeblur(a) => run_train(Stage::Deblur, a).map(drop),
        Command::Infer(a) => run_infer(a).map(drop),
        Command::Evaluate(a) => run_evaluate(a).map(drop),
        Command::Scan(a) => run_scan(a).map(drop),
    }
}
