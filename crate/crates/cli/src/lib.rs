//! The `das` command line.
//!
//! Every failure ends the process with one line on stderr of the form
//! `das: <kind>: <reason>` where kind is `usage` (exit 1), `validation`
//! (exit 2) or `runtime` (exit 3).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use das_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use das_core::dataset::Dataset;
use das_core::embio::read_embeddings;
use das_core::experiment::{evaluate, run_grid, EvalOptions, GridConfig, Variant};
use das_core::features::{featurize, write_examples, FeatureToggles, SidTables};
use das_core::synth::{generate, write_dataset, SynthConfig};
use das_core::trainer::{fit, DasModel, TrainConfig};
use das_core::{DasError, SemanticId, Side};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const GIT_DESCRIBE: &str = env!("DAS_GIT_DESCRIBE");

#[derive(Debug, Parser)]
#[command(name = "das", version, about = "Dual-aligned semantic IDs")]
struct Cli {
    /// Overrides the seed of any config this command reads.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint, its loss trace and corpus sids.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign semantic IDs to the rows of a DASE embedding file.
    InferSid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        side: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write featurized impressions as JSONL.
    Featurize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of ids,prefix,listwise,cross,dense.
        #[arg(long, default_value = "ids,prefix,listwise,cross,dense")]
        features: String,
        /// Clicked ads kept per user history.
        #[arg(long, default_value_t = 20)]
        history: usize,
    },
    /// Retrieval, codebook and CTR-probe report for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// JSON evaluation options.
        #[arg(long)]
        options: Option<PathBuf>,
    },
    /// Run the variant grid and print the comparison table.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Directory for the JSON report, the table and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Das(DasError),
}

impl From<DasError> for CliError {
    fn from(e: DasError) -> Self {
        CliError::Das(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Das(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Das(_) => EXIT_RUNTIME,
        }
    }

    /// `<kind>: <reason>` on a single line.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Das(e) if e.is_validation() => ("validation", e.to_string()),
            CliError::Das(e) => ("runtime", e.to_string()),
        };
        let flat: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("{kind}: {}", flat.join("; "))
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Runs the command line and returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let reason = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("das: {}", CliError::Usage(reason.to_string()).line());
            return EXIT_USAGE;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("das: {}", e.line());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out, seed),
        Command::Train { config, data, out } => train(&config, &data, &out, seed),
        Command::InferSid { ckpt, side, input, out } => {
            let side: Side =
                side.parse().map_err(|_| CliError::Usage(format!("--side must be `user` or `ad`, got `{side}`")))?;
            infer_sid(&ckpt, side, &input, &out)
        }
        Command::Featurize { ckpt, data, out, features, history } => {
            featurize_cmd(&ckpt, &data, &out, &features, history)
        }
        Command::Eval { ckpt, data, report, options } => eval_cmd(&ckpt, &data, &report, options.as_deref(), seed),
        Command::Ablate { grid, out } => ablate(&grid, out.as_deref(), seed),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DasError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| DasError::json(path.display().to_string(), e))?)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| DasError::json("output", e))?;
    s.push('\n');
    Ok(s)
}

/// What a command consumed and produced.
#[derive(Debug, Serialize)]
pub struct ExperimentManifest {
    pub stage: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
}

fn write_manifest(path: &Path, m: &ExperimentManifest) -> Result<()> {
    Ok(write_atomic(path, to_json(m)?.as_bytes())?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn json_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let world = generate(&cfg)?;
    write_dataset(&world, out)?;
    log::info!(
        "wrote {} interactions, click rate {:.4}, top-20% click share {:.3}",
        world.interactions.len(),
        world.achieved_click_rate,
        world.click_share_of_top(0.2)
    );
    let outputs = ["users.dase", "users.ids", "ads.dase", "ads.ids", "interactions.jsonl", "ground_truth.json"]
        .iter()
        .map(|f| (f.to_string(), out.join(f).display().to_string()))
        .collect();
    write_manifest(
        &out.join("manifest.json"),
        &ExperimentManifest {
            stage: "gen-data".into(),
            config: json_value(&cfg),
            seed: Some(cfg.seed),
            git_describe: GIT_DESCRIBE.into(),
            outputs,
            metrics: serde_json::json!({
                "achieved_click_rate": world.achieved_click_rate,
                "click_bias": world.click_bias,
                "top20_click_share": world.click_share_of_top(0.2),
            }),
        },
    )
}

/// One line per entity: `entity_id<TAB>c1,c2,...,cL`, no header.
pub fn sid_tsv(ids: &[String], sids: &[SemanticId]) -> String {
    let mut out = String::new();
    for (id, sid) in ids.iter().zip(sids) {
        let _ = writeln!(out, "{id}\t{sid}");
    }
    out
}

fn sids_of(rows: Vec<(SemanticId, Vec<f64>)>) -> Vec<SemanticId> {
    rows.into_iter().map(|(s, _)| s).collect()
}

fn train(config: &Path, data_dir: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = Dataset::load(data_dir)?;
    let result = fit(&data, &cfg)?;
    let model = result.model;
    save_checkpoint(&model, out)?;

    let mut trace = String::new();
    for b in &result.trace {
        trace.push_str(&serde_json::to_string(b).map_err(|e| DasError::json("trace", e))?);
        trace.push('\n');
    }
    let trace_path = with_suffix(out, ".trace.jsonl");
    write_atomic(&trace_path, trace.as_bytes())?;

    let mut outputs = BTreeMap::new();
    outputs.insert("checkpoint".to_string(), out.display().to_string());
    outputs.insert("trace".to_string(), trace_path.display().to_string());
    for (side, table) in [(Side::User, &data.users), (Side::Ad, &data.ads)] {
        let rows = sids_of(model.infer(side, &table.vectors)?);
        let p = with_suffix(out, &format!(".{side}.sids.tsv"));
        write_atomic(&p, sid_tsv(table.index.ids(), &rows).as_bytes())?;
        outputs.insert(format!("{side}_sids"), p.display().to_string());
    }
    write_manifest(
        &with_suffix(out, ".manifest.json"),
        &ExperimentManifest {
            stage: "train".into(),
            config: json_value(&cfg),
            seed: Some(cfg.seed),
            git_describe: GIT_DESCRIBE.into(),
            outputs,
            metrics: serde_json::json!({
                "steps": model.step,
                "epochs": result.epochs,
            }),
        },
    )
}

fn load_model(ckpt: &Path) -> Result<DasModel> {
    Ok(load_checkpoint(ckpt)?)
}

fn infer_sid(ckpt: &Path, side: Side, input: &Path, out: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let table = read_embeddings(input)?;
    let expected = match side {
        Side::User => model.shapes.d_sem_user,
        Side::Ad => model.shapes.d_sem_ad,
    };
    if table.dim() != expected {
        return Err(DasError::Invalid(format!(
            "{} has dimension {}, the {side} quantizer expects {expected}",
            input.display(),
            table.dim()
        ))
        .into());
    }
    let rows = sids_of(model.infer(side, &table.vectors)?);
    Ok(write_atomic(out, sid_tsv(table.index.ids(), &rows).as_bytes())?)
}

pub fn parse_toggles(spec: &str) -> std::result::Result<FeatureToggles, String> {
    let mut t = FeatureToggles { ids: false, prefix_ngram: false, listwise: false, cross_count: false, dense: false };
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "ids" => t.ids = true,
            "prefix" => t.prefix_ngram = true,
            "listwise" => t.listwise = true,
            "cross" => t.cross_count = true,
            "dense" => t.dense = true,
            other => return Err(format!("unknown feature family `{other}`")),
        }
    }
    Ok(t)
}

fn featurize_cmd(ckpt: &Path, data_dir: &Path, out: &Path, features: &str, history: usize) -> Result<()> {
    let toggles = parse_toggles(features).map_err(CliError::Usage)?;
    let model = load_model(ckpt)?;
    let data = Dataset::load(data_dir)?;
    check_entities(&model, &data)?;
    let sids = SidTables::infer(&model, &data)?;
    let examples = featurize(&data, Some(&sids), toggles, history)?;
    write_examples(out, &examples)?;
    Ok(())
}

/// The dataset must describe exactly the entities the model was trained on.
fn check_entities(model: &DasModel, data: &Dataset) -> Result<()> {
    if model.user_index.ids() != data.users.index.ids() || model.ad_index.ids() != data.ads.index.ids() {
        return Err(DasError::Invalid("dataset entities differ from the checkpoint's".into()).into());
    }
    if data.users.dim() != model.shapes.d_sem_user || data.ads.dim() != model.shapes.d_sem_ad {
        return Err(DasError::Invalid("dataset embedding dimensions differ from the checkpoint's".into()).into());
    }
    Ok(())
}

fn eval_cmd(ckpt: &Path, data_dir: &Path, report: &Path, options: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut opts: EvalOptions = match options {
        Some(p) => read_json(p)?,
        None => EvalOptions::default(),
    };
    let model = load_model(ckpt)?;
    if let Some(s) = seed {
        opts.seed = Some(s);
        opts.probe.seed = s;
    }
    let data = Dataset::load(data_dir)?;
    check_entities(&model, &data)?;
    let r = evaluate(&model, &data, &opts)?;
    write_atomic(report, to_json(&r)?.as_bytes())?;
    let text = r.to_text();
    write_atomic(&report.with_extension("txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn ablate(grid_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut grid: GridConfig = read_json(grid_path)?;
    if let Some(s) = seed {
        grid.seeds = vec![s];
    }
    grid.synth.validate()?;
    grid.train.validate()?;
    if grid.variants.is_empty() {
        grid.variants = Variant::GRID.to_vec();
    }
    let report = run_grid(&grid, |line| log::info!("{line}"))?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| DasError::io(dir, e))?;
        let json_path = dir.join("ablation.json");
        let text_path = dir.join("ablation.txt");
        write_atomic(&json_path, to_json(&report)?.as_bytes())?;
        write_atomic(&text_path, text.as_bytes())?;
        let outputs = [
            ("report".to_string(), json_path.display().to_string()),
            ("table".to_string(), text_path.display().to_string()),
        ]
        .into_iter()
        .collect();
        write_manifest(
            &dir.join("manifest.json"),
            &ExperimentManifest {
                stage: "ablate".into(),
                config: json_value(&grid),
                seed: grid.seeds.first().copied(),
                git_describe: GIT_DESCRIBE.into(),
                outputs,
                metrics: json_value(&report.summary),
            },
        )?;
    }
    Ok(())
}
