//! `plsurrogate`: scene generation, ray-oracle datasets, surrogate training,
//! baselines, evaluation and radio-map rendering.

mod config;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use plsurrogate::baselines::{gpp_predict, DistanceMlp, GppConfig, MlpConfig};
use plsurrogate::model::{ModelConfig, SurrogateModel, CHECKPOINT_FORMAT_VERSION};
use plsurrogate::oracle::{generate_dataset, generate_scene, DatasetParams, GenParams};
use plsurrogate::scene::{
    load_records, load_scene, load_scene_dir, save_records, save_scene, LinkRecord, Point3,
    SplitName, DATASET_FORMAT_VERSION, SCENE_FORMAT_VERSION,
};
use plsurrogate::train_eval::{
    cdf_csv, evaluate, extract_inputs, load_predictions, load_splits, make_splits, render_radiomap,
    save_predictions, save_splits, train, EvalReport, GppPredictor, LinkPredictor, OraclePredictor,
    Prediction, RenderParams, SceneSet, SplitPlan, SurrogatePredictor, TrainConfig,
};
use plsurrogate::{selftest, OracleConfig};

use config::FlatConfig;

#[derive(Parser, Debug)]
#[command(
    name = "plsurrogate",
    about = "Link-level mmWave path-loss surrogate toolkit",
    disable_version_flag = true
)]
struct Cli {
    /// Worker threads; 1 selects the sequential reference path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Omit wall-clock timestamps from metadata sidecars.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Print the tool and file format versions.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic city scenes.
    GenScenes(GenScenesArgs),
    /// Label random pole/UE links of a scene directory with the ray oracle.
    GenDataset(GenDatasetArgs),
    /// Split a dataset into train / val / test sets over known and novel areas.
    Split(SplitArgs),
    /// Train the surrogate on a split directory.
    Train(TrainArgs),
    /// Predict path loss for every link of a dataset with a checkpoint.
    Predict(PredictArgs),
    /// 3GPP UMi street-canyon predictions using the oracle LOS flag.
    #[command(name = "baseline-3gpp")]
    Baseline3gpp(GppArgs),
    /// Distance-only MLP baseline.
    BaselineMlp(MlpArgs),
    /// Compare prediction files against ground truth.
    Eval(EvalArgs),
    /// Dense radio map around a transmitter.
    Render(RenderArgs),
    /// Run the built-in gradient, geometry and spot-value checks.
    Selftest,
}

#[derive(Args, Debug)]
struct GenScenesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Scene size in pixels (1 m each), e.g. 512x512.
    #[arg(long, default_value = "512x512", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Building and foliage density, e.g. 0.7,1.5.
    #[arg(long, value_parser = parse_pair)]
    density: Option<(f64, f64)>,
}

#[derive(Args, Debug)]
struct GenDatasetArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    poles: usize,
    #[arg(long, default_value_t = 500)]
    ues: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum pole-UE ground distance in metres.
    #[arg(long, default_value_t = 500.0)]
    radius: f64,
    #[arg(long)]
    carrier_ghz: Option<f64>,
    #[arg(long)]
    tx_height: Option<f64>,
    #[arg(long)]
    rx_height: Option<f64>,
    #[arg(long)]
    reflection_db: Option<f64>,
    #[arg(long)]
    foliage_db_per_m: Option<f64>,
    #[arg(long)]
    canopy_fraction: Option<f64>,
    #[arg(long)]
    max_pathloss_db: Option<f64>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Known-area fractions for train, test and validation.
    #[arg(long, default_value = "0.16,0.80,0.04", value_parser = parse_triple)]
    fractions: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ValSet {
    Known,
    Novel,
    Both,
}

impl std::str::FromStr for ValSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <ValSet as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Flat `key = value` file; keys mirror the flag names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    val_max: Option<usize>,
    #[arg(long)]
    pad_patches: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Also train on mirrored extracts (`--flip-augment` or `--flip-augment false`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    flip_augment: Option<bool>,
    /// Validation links used for checkpoint selection.
    #[arg(long, value_enum)]
    val: Option<ValSet>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GppArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 28.0)]
    carrier_ghz: f64,
    #[arg(long, default_value_t = 9.0)]
    tx_height: f64,
    #[arg(long, default_value_t = 1.5)]
    rx_height: f64,
}

#[derive(Args, Debug)]
struct MlpArgs {
    /// Links the MLP is fitted on.
    #[arg(long)]
    train: PathBuf,
    /// Links to predict.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the fitted weights as JSON.
    #[arg(long)]
    save_model: Option<PathBuf>,
    #[arg(long, default_value_t = MlpConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = MlpConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = MlpConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = MlpConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction files, comma separated; `name=path` sets the predictor name
    /// (default: file stem).
    #[arg(long, required = true, value_delimiter = ',')]
    pred: Vec<String>,
    #[arg(long)]
    truth: PathBuf,
    /// Split label in the report (default: truth file stem).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Error CDF table (default: report path with extension `cdf.csv`).
    #[arg(long)]
    cdf: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("predictor").required(true).args(["ckpt", "oracle", "gpp"]))]
struct RenderArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    oracle: bool,
    /// 3GPP UMi with LOS decided by the scene geometry.
    #[arg(long)]
    gpp: bool,
    #[arg(long)]
    scene: PathBuf,
    /// Transmitter ground position, e.g. 250.5,260.
    #[arg(long, value_parser = parse_pair)]
    tx: (f64, f64),
    #[arg(long, default_value_t = 9.0)]
    tx_height: f64,
    #[arg(long, default_value_t = 1.5)]
    rx_height: f64,
    #[arg(long)]
    extent: f64,
    #[arg(long, default_value_t = 1.0)]
    resolution: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(w)?, p(h)?))
}

fn parse_floats(s: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got `{s}`"));
    }
    Ok(v)
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let v = parse_floats(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let v = parse_floats(s, 3)?;
    Ok([v[0], v[1], v[2]])
}

fn unix_now() -> Option<u64> {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_scenes(a: &GenScenesArgs) -> Result<()> {
    let params = match a.density {
        Some((b, f)) => GenParams::with_densities(b, f),
        None => GenParams::default(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (w, h) = a.size;
    (0..a.count)
        .into_par_iter()
        .try_for_each(|i| -> Result<()> {
            let id = format!("scene_{i:03}");
            let seed = a.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let scene = generate_scene(id.clone(), w, h, &params, seed)?;
            save_scene(&scene, a.out.join(format!("{id}.scene")))?;
            Ok(())
        })?;
    println!("wrote {} scenes ({w}x{h}) to {}", a.count, a.out.display());
    Ok(())
}

fn gen_dataset(a: &GenDatasetArgs, timestamp: bool) -> Result<()> {
    let scenes = load_scene_dir(&a.scenes)?;
    if scenes.is_empty() {
        bail!("no .scene files in {}", a.scenes.display());
    }
    let mut oracle = OracleConfig {
        seed: a.seed,
        ..OracleConfig::default()
    };
    if let Some(v) = a.carrier_ghz {
        oracle.carrier_hz = v * 1e9;
    }
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut oracle.tx_height_m, a.tx_height);
    set(&mut oracle.rx_height_m, a.rx_height);
    set(&mut oracle.reflection_loss_db, a.reflection_db);
    set(&mut oracle.foliage_rate_db_per_m, a.foliage_db_per_m);
    set(&mut oracle.canopy_fraction, a.canopy_fraction);
    set(&mut oracle.max_pathloss_db, a.max_pathloss_db);
    let params = DatasetParams {
        poles_per_scene: a.poles,
        ues_per_scene: a.ues,
        radius_m: a.radius,
        seed: a.seed,
    };
    let (records, mut meta) = generate_dataset(&scenes, &params, &oracle)?;
    meta.created_unix_s = if timestamp { unix_now() } else { None };
    save_records(&records, &a.out)?;
    let meta_path = with_suffix(&a.out, ".meta.json");
    write_text(&meta_path, &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    println!(
        "wrote {} links from {} scenes to {} ({} outages dropped)",
        records.len(),
        scenes.len(),
        a.out.display(),
        meta.dropped_outages
    );
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let records = load_records(&a.dataset)?;
    let plan = SplitPlan {
        known_fractions: a.fractions,
        ..SplitPlan::default()
    };
    let splits = make_splits(&records, &plan, a.seed)?;
    save_splits(&splits, &plan, a.seed, &a.out)?;
    for name in SplitName::ALL {
        println!("{:<11} {}", name.as_str(), splits.get(name).len());
    }
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "splits",
    "scenes",
    "out",
    "lr",
    "batch",
    "steps",
    "seed",
    "clip_norm",
    "eval_every",
    "log_every",
    "val_max",
    "pad_patches",
    "patch_size",
    "dim",
    "layers",
    "heads",
    "mlp_dim",
    "flip_augment",
    "weight_decay",
    "val",
    "threads",
];

struct TrainPlan {
    splits: PathBuf,
    scenes: PathBuf,
    out: PathBuf,
    val: ValSet,
    cfg: TrainConfig,
}

/// Merge config-file values with flags; flags win.
fn resolve_train(a: &TrainArgs, file: &FlatConfig) -> Result<TrainPlan> {
    file.reject_unknown(TRAIN_KEYS)?;
    macro_rules! pick {
        ($field:ident, $key:literal) => {
            match a.$field.clone() {
                Some(v) => Some(v),
                None => file.get($key)?,
            }
        };
    }
    let need = |v: Option<PathBuf>, key: &str| {
        v.with_context(|| format!("missing `--{key}` (flag or config key)"))
    };
    let d = TrainConfig::default();
    let m = ModelConfig::default();
    let model = ModelConfig {
        patch_size: pick!(patch_size, "patch_size").unwrap_or(m.patch_size),
        dim: pick!(dim, "dim").unwrap_or(m.dim),
        layers: pick!(layers, "layers").unwrap_or(m.layers),
        heads: pick!(heads, "heads").unwrap_or(m.heads),
        mlp_dim: pick!(mlp_dim, "mlp_dim").unwrap_or(m.mlp_dim),
        ..m
    };
    let cfg = TrainConfig {
        model,
        pad_patches: pick!(pad_patches, "pad_patches").unwrap_or(d.pad_patches),
        lr: pick!(lr, "lr").unwrap_or(d.lr),
        batch: pick!(batch, "batch").unwrap_or(d.batch),
        steps: pick!(steps, "steps").unwrap_or(d.steps),
        seed: pick!(seed, "seed").unwrap_or(d.seed),
        clip_norm: pick!(clip_norm, "clip_norm").unwrap_or(d.clip_norm),
        eval_every: pick!(eval_every, "eval_every").unwrap_or(d.eval_every),
        log_every: pick!(log_every, "log_every").unwrap_or(d.log_every),
        val_max: pick!(val_max, "val_max").unwrap_or(d.val_max),
        flip_augment: pick!(flip_augment, "flip_augment").unwrap_or(d.flip_augment),
        weight_decay: pick!(weight_decay, "weight_decay").unwrap_or(d.weight_decay),
    };
    Ok(TrainPlan {
        splits: need(pick!(splits, "splits"), "splits")?,
        scenes: need(pick!(scenes, "scenes"), "scenes")?,
        out: need(pick!(out, "out"), "out")?,
        val: pick!(val, "val").unwrap_or(ValSet::Both),
        cfg,
    })
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => FlatConfig::load(p)?,
        None => FlatConfig::default(),
    };
    let plan = resolve_train(a, &file)?;
    let splits = load_splits(&plan.splits)?;
    let scenes = SceneSet::new(load_scene_dir(&plan.scenes)?);
    let train_set = splits.get(SplitName::Train);
    let mut val: Vec<LinkRecord> = Vec::new();
    if plan.val != ValSet::Novel {
        val.extend_from_slice(splits.get(SplitName::ValKnown));
    }
    if plan.val != ValSet::Known {
        val.extend_from_slice(splits.get(SplitName::ValNovel));
    }
    eprintln!(
        "training on {} links, validating on {} ({} parameters)",
        train_set.len(),
        val.len(),
        plan.cfg.model.parameter_count()
    );
    let mut history = String::new();
    let out = train::<f32>(&scenes, train_set, &val, &plan.cfg, |h| {
        let v = h
            .val_rmse_db
            .map_or(String::new(), |v| format!("  val rmse {v:.3} dB"));
        eprintln!(
            "step {:>6}  lr {:.2e}  loss {:.4}{v}",
            h.step, h.lr, h.train_loss
        );
        history.push_str(&serde_json::to_string(h).expect("history serializes"));
        history.push('\n');
    })?;
    out.model.save(&plan.out)?;
    write_text(&with_suffix(&plan.out, ".history.jsonl"), &history)?;
    println!(
        "best val rmse {:.3} dB at step {}; checkpoint {}",
        out.best_val_rmse_db,
        out.best_step,
        plan.out.display()
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = SurrogateModel::<f32>::load(&a.ckpt)?;
    let records = load_records(&a.dataset)?;
    let scenes = SceneSet::new(load_scene_dir(&a.scenes)?);
    let inputs = extract_inputs(
        &scenes,
        &records,
        model.config.patch_size,
        model.pad_patches,
    )?;
    let values = model.predict(&inputs, 64)?;
    let preds = to_predictions(&records, &values);
    save_predictions(&preds, &a.out)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn to_predictions(records: &[LinkRecord], values: &[f64]) -> Vec<Prediction> {
    records
        .iter()
        .zip(values)
        .enumerate()
        .map(|(link, (r, &predicted_db))| Prediction {
            link,
            scene_id: r.scene_id.clone(),
            predicted_db,
        })
        .collect()
}

fn baseline_3gpp(a: &GppArgs) -> Result<()> {
    let records = load_records(&a.dataset)?;
    let cfg = GppConfig {
        fc_ghz: a.carrier_ghz,
        h_bs_m: a.tx_height,
        h_ut_m: a.rx_height,
        ..GppConfig::default()
    };
    let values = gpp_predict(&records, &cfg)?;
    save_predictions(&to_predictions(&records, &values), &a.out)?;
    println!("wrote {} predictions to {}", values.len(), a.out.display());
    Ok(())
}

fn baseline_mlp(a: &MlpArgs) -> Result<()> {
    let fit = load_records(&a.train)?;
    let records = load_records(&a.dataset)?;
    let cfg = MlpConfig {
        hidden: a.hidden,
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
    };
    let mlp = DistanceMlp::train(&fit, cfg)?;
    if let Some(p) = &a.save_model {
        write_text(p, &(serde_json::to_string(&mlp)? + "\n"))?;
    }
    let values = mlp.predict(&records);
    save_predictions(&to_predictions(&records, &values), &a.out)?;
    println!("wrote {} predictions to {}", values.len(), a.out.display());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(
        || p.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn eval(a: &EvalArgs) -> Result<()> {
    let truth = load_records(&a.truth)?;
    let split = a.split.clone().unwrap_or_else(|| stem(&a.truth));
    let mut report = EvalReport::default();
    for item in &a.pred {
        let (name, path) = match item.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => (stem(Path::new(item)), PathBuf::from(item)),
        };
        let preds = load_predictions(&path)?;
        let entry = evaluate(&name, &split, &preds, &truth)
            .with_context(|| format!("evaluating {}", path.display()))?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<12} {:<12} rmse {:>7}  mae {:>7}  (n = {})",
            name,
            split,
            fmt(entry.all.rmse_db),
            fmt(entry.all.mae_db),
            entry.all.count
        );
        report.entries.push(entry);
    }
    write_text(&a.out, &report.to_json())?;
    let cdf = a
        .cdf
        .clone()
        .unwrap_or_else(|| a.out.with_extension("cdf.csv"));
    write_text(&cdf, &cdf_csv(&report))?;
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let params = RenderParams {
        tx: Point3::new(a.tx.0, a.tx.1, a.tx_height),
        resolution_m: a.resolution,
        extent_m: a.extent,
        rx_height_m: a.rx_height,
    };
    let oracle_cfg = OracleConfig {
        tx_height_m: a.tx_height,
        rx_height_m: a.rx_height,
        ..OracleConfig::default()
    };
    let model;
    let predictor: Box<dyn LinkPredictor + '_> = if let Some(ckpt) = &a.ckpt {
        model = SurrogateModel::<f32>::load(ckpt)?;
        Box::new(SurrogatePredictor {
            model: &model,
            pad_patches: model.pad_patches,
        })
    } else if a.oracle {
        Box::new(OraclePredictor { cfg: oracle_cfg })
    } else {
        Box::new(GppPredictor {
            cfg: GppConfig {
                h_bs_m: a.tx_height,
                h_ut_m: a.rx_height,
                ..GppConfig::default()
            },
        })
    };
    let map = render_radiomap(&scene, predictor.as_ref(), params)?;
    for p in map.write(&a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_selftest() -> Result<bool> {
    let mut all = true;
    for suite in selftest::run_all() {
        for c in &suite.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            let detail = if c.detail.is_empty() {
                String::new()
            } else {
                format!("  ({})", c.detail)
            };
            println!("{tag}  {}/{}{detail}", suite.name, c.name);
        }
        all &= suite.passed();
    }
    println!(
        "{}",
        if all {
            "all suites passed"
        } else {
            "selftest FAILED"
        }
    );
    Ok(all)
}

fn print_versions() {
    println!("plsurrogate {}", env!("CARGO_PKG_VERSION"));
    println!("scene format {SCENE_FORMAT_VERSION}");
    println!("dataset format {DATASET_FORMAT_VERSION}");
    println!("checkpoint format {CHECKPOINT_FORMAT_VERSION}");
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let Some(cmd) = cli.command else {
        if cli.version {
            print_versions();
            return Ok(true);
        }
        bail!("no subcommand given; see --help");
    };
    match cmd {
        Command::GenScenes(a) => gen_scenes(&a)?,
        Command::GenDataset(a) => gen_dataset(&a, !cli.no_timestamp)?,
        Command::Split(a) => split(&a)?,
        Command::Train(a) => run_train(&a)?,
        Command::Predict(a) => predict(&a)?,
        Command::Baseline3gpp(a) => baseline_3gpp(&a)?,
        Command::BaselineMlp(a) => baseline_mlp(&a)?,
        Command::Eval(a) => eval(&a)?,
        Command::Render(a) => render(&a)?,
        Command::Selftest => return run_selftest(),
    }
    Ok(true)
}

/// 2 for I/O failures, 1 for everything else (bad input, invalid values).
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|c| {
        c.downcast_ref::<io::Error>()
            .is_some_and(|e| e.kind() != io::ErrorKind::InvalidData)
    });
    if io {
        2
    } else {
        1
    }
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
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsers() {
        assert_eq!(parse_size("512x256").unwrap(), (512, 256));
        assert!(parse_size("512").is_err());
        assert_eq!(parse_pair("1.5, 2").unwrap(), (1.5, 2.0));
        assert!(parse_triple("0.1,0.9").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let cli =
            Cli::try_parse_from(["plsurrogate", "train", "--steps", "7", "--splits", "s"]).unwrap();
        let Some(Command::Train(a)) = cli.command else {
            panic!("expected train")
        };
        let file = FlatConfig::parse(
            "steps = 100\nlr = 0.01\nscenes = sc\nout = m.bin\nval = known\n",
            "c",
        )
        .unwrap();
        let p = resolve_train(&a, &file).unwrap();
        assert_eq!(p.cfg.steps, 7);
        assert_eq!(p.cfg.lr, 0.01);
        assert_eq!(p.scenes, PathBuf::from("sc"));
        assert_eq!(p.val, ValSet::Known);
        assert_eq!(p.cfg.batch, TrainConfig::default().batch);
        assert!(!p.cfg.flip_augment);

        let cli = Cli::try_parse_from([
            "plsurrogate",
            "train",
            "--flip-augment",
            "--weight-decay",
            "0.3",
        ])
        .unwrap();
        let Some(Command::Train(a)) = cli.command else {
            panic!("expected train")
        };
        let file = FlatConfig::parse(
            "splits = s\nscenes = sc\nout = m.bin\nflip_augment = false\n",
            "c",
        )
        .unwrap();
        let p = resolve_train(&a, &file).unwrap();
        assert!(p.cfg.flip_augment);
        assert_eq!(p.cfg.weight_decay, 0.3);
    }

    #[test]
    fn io_errors_map_to_exit_two() {
        let e = anyhow::Error::new(io::Error::new(io::ErrorKind::NotFound, "x")).context("loading");
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("bad value")), 1);
    }
}
