//! Command-line entry point.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{write_array2, Dataset};
use crate::diffusion::{extract_representation, DiffusionModelPair, NoiseSchedule, NoiseUNet};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{evaluate, render_overlay, EvalResult};
use crate::synthetic::{export_dataset, generate_dataset, PhantomSpec};
use crate::training::checkpoint::{pair_exists, DEFORM};
use crate::training::{
    infer_volume, load_deform_net, load_pair, pretrain_diffusion, slice_noise_seed, split_holdout, train_deformation,
    PredictionRecord, TrainConfig, VolumePrediction,
};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "MLSHIFT_CONFIG";

/// Everything a run can be configured with. Training keys sit at the top
/// level (`deformation.epochs`, `repr_t_inference`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    /// Share of cases (the last ones by id) held out for inference and
    /// evaluation.
    pub test_fraction: f64,
    /// Dataset directory; relative paths resolve against the output dir.
    pub data_dir: String,
    pub models_dir: String,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            phantom: PhantomSpec::default(),
            test_fraction: 0.25,
            data_dir: "data".into(),
            models_dir: "models".into(),
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.phantom.validate()?;
        ensure!(
            (0.0..1.0).contains(&self.test_fraction),
            "test_fraction must lie in [0, 1)"
        );
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "mlshift", version, about = "Midline-shift quantification by semi-supervised deformation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML or JSON config file (default: $MLSHIFT_CONFIG)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory all outputs are written under
    #[arg(long, default_value = "mlshift-out")]
    output_dir: PathBuf,
    /// Seed for data generation, training and inference noise
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `deformation.epochs=5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Sweep {
    /// Inference noise level of the representation
    NoiseLevel,
    /// Fraction of positive volumes contributing unlabeled slices
    Unlabeled,
    /// Negative cases kept per positive case when training the noise models
    Negative,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the unconditional and negative-only noise models
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
    },
    /// Train the deformation network with frozen noise models
    TrainDeform {
        #[command(flatten)]
        common: Common,
    },
    /// Predict per-slice and per-volume shifts
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also write each slice's score-difference map
        #[arg(long)]
        dump_repr: bool,
    },
    /// Score predictions against the dataset labels
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Render deformation overlays
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Only this case
        #[arg(long)]
        case: Option<String>,
        /// At most this many cases
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
    /// Run an ablation sweep and write one summary CSV
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Comma-separated grid replacing the default one
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::TrainDiffusion { common }
            | Command::TrainDeform { common }
            | Command::Infer { common, .. }
            | Command::Eval { common, .. }
            | Command::Plot { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::TrainDeform { .. } => "train-deform",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Plot { .. } => "plot",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Sets `key` (dotted path) in `root`; the path must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let mut node = root;
    for part in key.trim().split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *node = parse_scalar(value.trim());
    Ok(())
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        let v: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(serde_json::to_value(v)?)
    }
}

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
pub fn resolve_config(config: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<AppConfig> {
    let mut value = serde_json::to_value(AppConfig::default())?;
    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    if let Some(path) = config.map(Path::to_path_buf).or(env_path) {
        merge(&mut value, read_config_file(&path)?);
    }
    if let Some(s) = seed {
        value["seed"] = Value::from(s);
        value["phantom"]["seed"] = Value::from(s);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: AppConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: AppConfig,
    out: PathBuf,
}

impl Ctx {
    fn resolve(&self, p: &str) -> PathBuf {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            self.out.join(p)
        }
    }

    fn data_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.data_dir)
    }

    fn models_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.models_dir)
    }

    fn dataset(&self, split: Split) -> Result<Dataset> {
        let dir = self.data_dir();
        let all = Dataset::load(&dir)?;
        ensure!(!all.cases.is_empty(), "no cases found in {}", dir.display());
        let (train, test) = split_holdout(&all, self.cfg.test_fraction)?;
        Ok(match split {
            Split::Train => train,
            Split::Test => test,
            Split::All => all,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn predictions_path(out: &Path) -> PathBuf {
    out.join("predictions").join("predictions.json")
}

fn gen_data(ctx: &Ctx) -> Result<Value> {
    let cases = generate_dataset(&ctx.cfg.phantom)?;
    let dir = ctx.data_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let ds = export_dataset(&cases, &dir)?;
    println!("wrote {} cases ({} positive) to {}", ds.cases.len(), ds.positives().count(), dir.display());
    Ok(serde_json::json!({ "cases": ds.cases.len(), "data_dir": dir }))
}

fn train_diffusion_models(ctx: &Ctx, models: &Path) -> Result<Value> {
    let train = ctx.dataset(Split::Train)?;
    let out = pretrain_diffusion(&train, &ctx.cfg.train, Some(models))?;
    let last = |h: &[f64]| h.last().copied().unwrap_or(f64::NAN);
    println!(
        "noise models trained: final loss U {:.4}, C {:.4}",
        last(&out.history_u),
        last(&out.history_c)
    );
    Ok(serde_json::json!({ "final_loss_u": last(&out.history_u), "final_loss_c": last(&out.history_c) }))
}

fn train_deform_model(ctx: &Ctx, models: &Path, cfg: &TrainConfig) -> Result<Value> {
    let train = ctx.dataset(Split::Train)?;
    let pair = load_pair(models, &Device::Cpu)?;
    let out = train_deformation(&train, &pair, cfg, Some(models))?;
    let last = out.history.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("deformation network trained: {} steps, final loss {last:.4}", out.history.len());
    Ok(serde_json::json!({ "steps": out.history.len(), "final_loss": last }))
}

fn predict(
    dataset: &Dataset,
    models: &Path,
    cfg: &TrainConfig,
    pair: Option<&DiffusionModelPair<NoiseUNet>>,
) -> Result<Vec<VolumePrediction>> {
    let (net, _) = load_deform_net(&models.join(DEFORM), &Device::Cpu)?;
    let loaded;
    let pair = match pair {
        Some(p) => p,
        None => {
            loaded = load_pair(models, &Device::Cpu)?;
            &loaded
        }
    };
    dataset
        .cases
        .iter()
        .map(|v| {
            let mut p = infer_volume(v, &net, pair, cfg)?;
            p.fields.clear();
            Ok(p)
        })
        .collect()
}

fn infer(ctx: &Ctx, split: Split, dump_repr: bool) -> Result<Value> {
    let ds = ctx.dataset(split)?;
    let models = ctx.models_dir();
    let pair = load_pair(&models, &Device::Cpu)?;
    let preds = predict(&ds, &models, &ctx.cfg.train, Some(&pair))?;
    let records: Vec<PredictionRecord> = preds.iter().map(VolumePrediction::record).collect();
    write_json(&predictions_path(&ctx.out), &records)?;
    if dump_repr {
        let sched = NoiseSchedule::new(&ctx.cfg.train.diffusion.schedule)?;
        let dir = ctx.out.join("predictions").join("repr");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for v in &ds.cases {
            for s in &v.slices {
                let mut rng = ChaCha8Rng::seed_from_u64(slice_noise_seed(ctx.cfg.train.seed, &v.case_id, s.slice_index));
                let (h, w) = s.pixels.dim();
                let eps = Array2::from_shape_simple_fn((h, w), || rng.sample::<f64, _>(StandardNormal));
                let r = extract_representation(&pair, s, ctx.cfg.train.repr_t_inference, &eps, &sched)?;
                write_array2(&dir.join(format!("{}_{}.arr", v.case_id, s.slice_index)), &r, s.pixel_size_mm)?;
            }
        }
    }
    for p in &preds {
        println!("{}: {:.2} mm", p.case_id, p.volume_mls_mm);
    }
    Ok(serde_json::json!({ "cases": preds.len(), "predictions": predictions_path(&ctx.out) }))
}

fn report(result: &EvalResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    result.write_results_csv(&dir.join("results.csv"))?;
    result.write_slice_csv(&dir.join("slices.csv"))?;
    result.write_summary_json(&dir.join("summary.json"))
}

fn eval(ctx: &Ctx, split: Split) -> Result<Value> {
    let ds = ctx.dataset(split)?;
    let path = predictions_path(&ctx.out);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<PredictionRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let preds: Vec<VolumePrediction> = records.into_iter().map(Into::into).collect();
    let result = evaluate(&preds, &ds)?;
    report(&result, &ctx.out.join("eval"))?;
    println!("| method | volume MAE | volume RMSE | slice MAE | slice RMSE |");
    println!("|---|---|---|---|---|");
    println!("{}", result.table_row("ours"));
    Ok(serde_json::json!({
        "volume_mae_mm": result.volume_mae_mm,
        "volume_rmse_mm": result.volume_rmse_mm,
        "slice_mae_mm": result.slice_mae_mm,
        "slice_rmse_mm": result.slice_rmse_mm,
    }))
}

fn plot(ctx: &Ctx, split: Split, case: Option<&str>, limit: usize) -> Result<Value> {
    let ds = ctx.dataset(split)?;
    let models = ctx.models_dir();
    let (net, _) = load_deform_net(&models.join(DEFORM), &Device::Cpu)?;
    let pair = load_pair(&models, &Device::Cpu)?;
    let chosen: Vec<_> = match case {
        Some(id) => vec![ds
            .case(id)
            .ok_or_else(|| Error::Validation(format!("unknown case {id}")))?],
        None => ds.cases.iter().take(limit).collect(),
    };
    let dir = ctx.out.join("plots");
    let mut written = Vec::new();
    for v in chosen {
        let p = infer_volume(v, &net, &pair, &ctx.cfg.train)?;
        let (k, best) = p
            .slices
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.mls_mm.total_cmp(&b.1.mls_mm))
            .expect("non-empty volume");
        let slice = &v.slices[k];
        let truth = v
            .annotations
            .get(&slice.slice_index)
            .and_then(|a| a.iter().map(|x| x.magnitude() * slice.pixel_size_mm).reduce(f64::max))
            .or(Some(v.case_mls_mm));
        let path = dir.join(format!("{}_{}.png", v.case_id, slice.slice_index));
        render_overlay(slice, &p.fields[k], best.mls_mm, truth, &path)?;
        written.push(path);
    }
    println!("wrote {} overlays to {}", written.len(), dir.display());
    Ok(serde_json::json!({ "plots": written }))
}

fn sweep_name(s: Sweep) -> &'static str {
    match s {
        Sweep::NoiseLevel => "noise-level",
        Sweep::Unlabeled => "unlabeled",
        Sweep::Negative => "negative",
    }
}

fn default_grid(s: Sweep) -> Vec<f64> {
    match s {
        Sweep::NoiseLevel => vec![200.0, 400.0, 600.0, 800.0],
        Sweep::Unlabeled => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        Sweep::Negative => vec![1.0, 5.0, 10.0],
    }
}

fn ensure_models(ctx: &Ctx, models: &Path) -> Result<()> {
    if !pair_exists(models) {
        log::info!("no noise models in {}; training them", models.display());
        train_diffusion_models(ctx, models)?;
    }
    if !models.join(DEFORM).with_extension("safetensors").is_file() {
        log::info!("no deformation network in {}; training it", models.display());
        train_deform_model(ctx, models, &ctx.cfg.train)?;
    }
    Ok(())
}

fn ablate(ctx: &Ctx, sweep: Sweep, values: Option<&[f64]>) -> Result<Value> {
    let grid = values.map(<[f64]>::to_vec).unwrap_or_else(|| default_grid(sweep));
    ensure!(!grid.is_empty(), "empty sweep grid");
    let name = sweep_name(sweep);
    let root = ctx.out.join("ablate").join(name);
    let test = ctx.dataset(Split::Test)?;
    ensure!(!test.cases.is_empty(), "the held-out split is empty; raise test_fraction");
    let column = match sweep {
        Sweep::NoiseLevel => "t",
        Sweep::Unlabeled => "unlabeled_fraction",
        Sweep::Negative => "negative_multiple",
    };
    let mut rows = vec![format!(
        "{column},volume_mae_mm,volume_rmse_mm,slice_mae_mm,slice_rmse_mm"
    )];
    let base_models = ctx.models_dir();
    if sweep == Sweep::NoiseLevel {
        ensure_models(ctx, &base_models)?;
    } else if sweep == Sweep::Unlabeled && !pair_exists(&base_models) {
        train_diffusion_models(ctx, &base_models)?;
    }
    for &v in &grid {
        let mut cfg = ctx.cfg.train.clone();
        let label = format!("{v}");
        let models = match sweep {
            Sweep::NoiseLevel => {
                ensure!(v >= 0.0 && v.fract() == 0.0, "noise level {v} is not a timestep");
                cfg.repr_t_inference = v as usize;
                cfg.validate()?;
                base_models.clone()
            }
            Sweep::Unlabeled => {
                cfg.deformation.unlabeled_fraction = v;
                cfg.validate()?;
                let dir = root.join(&label);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for m in ["diffusion_u", "diffusion_c"] {
                    for ext in ["safetensors", "json"] {
                        let src = base_models.join(m).with_extension(ext);
                        let dst = dir.join(m).with_extension(ext);
                        fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
                    }
                }
                train_deform_model(ctx, &dir, &cfg)?;
                dir
            }
            Sweep::Negative => {
                cfg.diffusion.negative_multiple = Some(v);
                cfg.validate()?;
                let dir = root.join(&label);
                let sub = Ctx {
                    cfg: AppConfig {
                        train: cfg.clone(),
                        ..ctx.cfg.clone()
                    },
                    out: ctx.out.clone(),
                };
                train_diffusion_models(&sub, &dir)?;
                train_deform_model(&sub, &dir, &cfg)?;
                dir
            }
        };
        let preds = predict(&test, &models, &cfg, None)?;
        let result = evaluate(&preds, &test)?;
        report(&result, &root.join(&label))?;
        rows.push(format!(
            "{v},{},{},{},{}",
            result.volume_mae_mm, result.volume_rmse_mm, result.slice_mae_mm, result.slice_rmse_mm
        ));
        println!("{column}={v}: volume MAE {:.3} mm", result.volume_mae_mm);
    }
    let csv = ctx.out.join("ablate").join(format!("{name}.csv"));
    fs::create_dir_all(csv.parent().expect("parent")).map_err(|e| Error::io(&csv, e))?;
    fs::write(&csv, rows.join("\n") + "\n").map_err(|e| Error::io(&csv, e))?;
    println!("wrote {}", csv.display());
    Ok(serde_json::json!({ "sweep": name, "csv": csv, "points": grid.len() }))
}

fn dispatch(cmd: &Command, ctx: &Ctx) -> Result<Value> {
    match cmd {
        Command::GenData { .. } => gen_data(ctx),
        Command::TrainDiffusion { .. } => train_diffusion_models(ctx, &ctx.models_dir()),
        Command::TrainDeform { .. } => train_deform_model(ctx, &ctx.models_dir(), &ctx.cfg.train),
        Command::Infer { split, dump_repr, .. } => infer(ctx, *split, *dump_repr),
        Command::Eval { split, .. } => eval(ctx, *split),
        Command::Plot { split, case, limit, .. } => plot(ctx, *split, case.as_deref(), *limit),
        Command::Ablate { sweep, values, .. } => ablate(ctx, *sweep, values.as_deref()),
    }
}

/// Parses `args` (without the program name), runs the subcommand and returns
/// the process exit code: 0 on success or help, 2 on usage or validation
/// errors, 1 on runtime failures.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = std::iter::once("mlshift".to_string())
        .chain(args.into_iter().map(Into::into))
        .collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let common = cli.command.common().clone();
    let cfg = match resolve_config(common.config.as_deref(), common.seed, &common.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let out = common.output_dir.clone();
    if let Err(e) = fs::create_dir_all(&out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return 2;
    }
    let ctx = Ctx { cfg, out };
    let outcome = dispatch(&cli.command, &ctx);
    let record = serde_json::json!({
        "subcommand": cli.command.name(),
        "args": &argv[1..],
        "config": &ctx.cfg,
        "seed": ctx.cfg.train.seed,
        "versions": BTreeMap::from([
            ("mlshift", env!("CARGO_PKG_VERSION")),
        ]),
        "started_unix_s": SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64() - started.elapsed().as_secs_f64())
            .unwrap_or(0.0),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "status": if outcome.is_ok() { "ok" } else { "failed" },
        "result": outcome.as_ref().ok(),
        "error": outcome.as_ref().err().map(|e| e.to_string()),
    });
    if let Err(e) = write_json(&ctx.out.join("run.json"), &record) {
        eprintln!("warning: could not write run.json: {e}");
    }
    match outcome {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}
