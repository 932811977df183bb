//! `emcad`: preprocess, synth, train, eval, gradcheck and count.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emcad_core::checkpoint;
use emcad_core::data::{
    self, assign_splits, preprocess_dir, synth_volume, synthetic_slices, write_dataset, write_volume, DatasetMeta,
    Manifest, PreprocessOptions, Split, SyntheticConfig, VolumeDirOptions, DEFAULT_TRAIN_FRACTION,
};
use emcad_core::metrics::{evaluate, CostReport, DEFAULT_THRESHOLD};
use emcad_core::model::{decoder_cost_report, Model, ModelConfig};
use emcad_core::nn::GradCheckOptions;
use emcad_core::train::{self, RunState, TrainConfig, TrainOutcome};
use emcad_core::verify::{format_table, run_scope, Scope};
use emcad_core::{Error, Prng};

const THREADS_VAR: &str = "EMCAD_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "emcad",
    version,
    about = "Multi-scale convolutional attention decoder toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn a directory of `<patient>/{image,label}.npy` volumes into a slice dataset.
    Preprocess(PreprocessArgs),
    /// Write synthetic data: a phantom slice dataset, or raw volumes with `--volumes`.
    Synth(SynthArgs),
    /// Train a model; prints the run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks in double precision.
    Gradcheck(GradcheckArgs),
    /// Parameter and FLOP accounting.
    Count(CountArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    volume_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop slices without tumor pixels.
    #[arg(long)]
    drop_empty: bool,
    /// Modality index of rank-4 `(h, w, slices, modalities)` images.
    #[arg(long, default_value_t = 0)]
    modality: usize,
    /// Center-crop slices to N x N.
    #[arg(long, value_name = "N")]
    crop: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.5)]
    difficulty: f64,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    /// Write N raw volumes instead of a slice dataset.
    #[arg(long, value_name = "N")]
    volumes: Option<usize>,
    /// Volume dimensions `h,w,slices`.
    #[arg(long, value_delimiter = ',', default_values_t = data::volume::BRATS_DIMS)]
    dims: Vec<usize>,
    /// How many of the volumes carry no tumor.
    #[arg(long, default_value_t = 0)]
    blank: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use synthetic phantoms; without `--config` this is the desk-scale run.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parent directory for the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name (default `run-<utc time>-seed<N>`).
    #[arg(long, conflicts_with = "resume")]
    run_name: Option<String>,
    /// Continue the run in this directory from its last checkpoint.
    #[arg(long, value_name = "RUN_DIR", conflicts_with_all = ["config", "synthetic", "seed", "out"])]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Dataset root with a manifest; defaults to the data the checkpoint was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// ops, blocks, full or all.
    #[arg(long, default_value = "all")]
    scope: String,
}

#[derive(Args, Debug)]
struct CountArgs {
    /// Train config whose model section is counted.
    #[arg(long, conflicts_with = "channels")]
    config: Option<PathBuf>,
    /// Encoder/decoder stage widths, e.g. `8,16,24,32`.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    /// Write the reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit classification.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn configure_threads() -> CmdResult {
    let n = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Failure::Validation(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn preprocess(a: PreprocessArgs) -> CmdResult {
    let opts = VolumeDirOptions {
        slices: PreprocessOptions {
            drop_empty: a.drop_empty,
            crop: a.crop,
            ..Default::default()
        },
        modality: a.modality,
        seed: a.seed,
        train_fraction: a.train_fraction,
    };
    let (_, s) = preprocess_dir(&a.volume_dir, &a.out, &opts)?;
    println!("volumes: {} found, {} processed", s.volumes_found, s.volumes_ok);
    println!("slices: {} kept, {} dropped", s.slices_kept, s.slices_dropped);
    println!(
        "split: train {} patients / {} slices, test {} patients / {} slices",
        s.train_patients, s.train_slices, s.test_patients, s.test_slices
    );
    println!("manifest: {}", a.out.join(data::manifest::MANIFEST_FILE).display());
    if s.slices_kept == 0 {
        log::warn!("no slices were kept");
    }
    if !s.problems.is_empty() {
        for p in &s.problems {
            eprintln!("bad volume: {p}");
        }
        return Err(Failure::Validation(format!(
            "{} of {} volumes are missing or corrupt",
            s.problems.len(),
            s.volumes_found
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CmdResult {
    if let Some(n) = a.volumes {
        if n == 0 || a.blank > n {
            return Err(Failure::Validation(format!(
                "need --volumes >= 1 and --blank <= volumes, got {n} and {}",
                a.blank
            )));
        }
        let dims: [usize; 3] = a
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| Failure::Validation(format!("--dims takes h,w,slices, got {:?}", a.dims)))?;
        let mut rng = Prng::new(a.seed);
        for i in 0..n {
            let id = format!("synth_{:03}", i + 1);
            let v = synth_volume(&id, dims, i >= a.blank, &mut rng)?;
            write_volume(&a.out, &v)?;
        }
        println!(
            "wrote {n} volumes of {}x{}x{} to {}",
            dims[0],
            dims[1],
            dims[2],
            a.out.display()
        );
        return Ok(());
    }
    let cfg = SyntheticConfig {
        count: a.count,
        size: a.size,
        difficulty: a.difficulty,
    };
    let slices = assign_splits(synthetic_slices(&cfg, a.seed)?, a.train_fraction, a.seed)?;
    let meta = DatasetMeta {
        format_version: data::manifest::FORMAT_VERSION,
        seed: a.seed,
        train_fraction: a.train_fraction,
        source: "synthetic".into(),
        params: serde_json::to_value(&cfg).map_err(|e| Failure::Runtime(e.to_string()))?,
        train_patients: 0,
        test_patients: 0,
        train_slices: 0,
        test_slices: 0,
    };
    let m = write_dataset(&a.out, &slices, meta)?;
    println!(
        "wrote {} phantoms ({} train / {} test) to {}",
        m.records.len(),
        m.meta.train_slices,
        m.meta.test_slices,
        a.out.display()
    );
    Ok(())
}

fn fresh_run_dir(parent: &Path, seed: u64) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("run-{stamp}-seed{seed}");
    let mut dir = parent.join(&base);
    let mut k = 2;
    while dir.exists() {
        dir = parent.join(format!("{base}-{k}"));
        k += 1;
    }
    dir
}

fn print_outcome(o: &TrainOutcome) {
    let s = &o.summary;
    println!(
        "epochs {} iterations {} (stopped by {})",
        s.epochs_run, s.iterations, s.stopped_by
    );
    println!("first iteration loss {:.4}", s.first_iteration_loss);
    println!("epoch mean loss {:.4} -> {:.4}", s.first_epoch_loss, s.final_epoch_loss);
    println!(
        "test mean dice final {:.4} best {:.4}",
        s.final_mean_dice, s.best_mean_dice
    );
    println!("run directory: {}", o.run_dir.display());
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    if let Some(dir) = &a.resume {
        let outcome = train::resume(dir, a.epochs)?;
        print_outcome(&outcome);
        return Ok(());
    }
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
        }
        None if a.synthetic => TrainConfig::desk(0),
        None => return Err(Failure::Validation("train needs --config or --synthetic".into())),
    };
    if a.synthetic && a.config.is_some() {
        cfg.data_root = None;
        cfg.synthetic.get_or_insert_with(SyntheticConfig::default);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let parent = a
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| "runs".into());
    let run_dir = match &a.run_name {
        Some(name) => parent.join(name),
        None => fresh_run_dir(&parent, cfg.seed),
    };
    if run_dir.join(train::LAST_CKPT).exists() {
        return Err(Failure::Validation(format!(
            "{} already holds a run; use --resume",
            run_dir.display()
        )));
    }
    log::info!("run directory {}", run_dir.display());
    let outcome = train::train(&cfg, &run_dir)?;
    print_outcome(&outcome);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let ck = checkpoint::load::<f32>(&a.checkpoint)?;
    let split = if a.split == "train" { Split::Train } else { Split::Test };
    let slices = match &a.data {
        Some(root) => Manifest::load(root)?.load_split(split)?,
        None => {
            let state: RunState = serde_json::from_value(ck.header.meta.clone()).map_err(|_| {
                Failure::Validation(format!(
                    "{} carries no training config; pass --data",
                    a.checkpoint.display()
                ))
            })?;
            let (train_set, test_set) = train::load_data(&state.config)?;
            if split == Split::Train {
                train_set
            } else {
                test_set
            }
        }
    };
    let mut model: Model<f32> = ck.model;
    let report = evaluate(&mut model, &slices, a.threshold)?;
    let out = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let summary = serde_json::json!({
        "checkpoint": a.checkpoint,
        "split": a.split,
        "threshold": report.threshold,
        "cases": report.cases.len(),
        "mean_dice": report.mean_dice,
    });
    write_json(&out.join("eval.json"), &summary)?;
    let csv = out.join("eval_cases.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| io_err(&csv, e))?;
    println!("mean dice {:.4} over {} cases", report.mean_dice, report.cases.len());
    println!("wrote {} and {}", out.join("eval.json").display(), csv.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let scopes = match a.scope.as_str() {
        "all" => vec![Scope::Ops, Scope::Blocks, Scope::Full],
        s => vec![s.parse::<Scope>()?],
    };
    let opts = GradCheckOptions::default();
    let mut failed = 0;
    for scope in scopes {
        let reports = run_scope(scope, &opts)?;
        println!("scope {scope}");
        print!("{}", format_table(&reports));
        failed += reports.iter().filter(|r| !r.passed).count();
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    println!("all gradient checks passed");
    Ok(())
}

fn print_cost_table(r: &CostReport) {
    let width = r.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>10}  {:>14}  {:>14}", "block", "params", "MACs", "FLOPs");
    for e in &r.entries {
        println!("{:<width$}  {:>10}  {:>14}  {:>14}", e.name, e.params, e.macs, e.flops);
    }
}

fn count_cmd(a: CountArgs) -> CmdResult {
    let model_cfg = match (&a.config, &a.channels) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
                .model
        }
        (None, Some(c)) => ModelConfig::tiny(
            c.as_slice()
                .try_into()
                .map_err(|_| Failure::Validation(format!("--channels takes four widths, got {c:?}")))?,
        ),
        (None, None) => ModelConfig::default(),
    };
    let r = a.resolution;
    if r == 0 || r % 32 != 0 {
        return Err(Failure::Validation(format!(
            "resolution must be a positive multiple of 32, got {r}"
        )));
    }
    let mut model = Model::<f32>::new(&model_cfg, &mut Prng::new(0))?;
    let full = model.cost_report(r, r)?;
    let dec = decoder_cost_report(&mut model.decoder, r, r)?;
    print_cost_table(&full);
    println!();
    for (name, e) in [
        ("encoder", full.subtotal("encoder")),
        ("decoder", full.subtotal("decoder")),
    ] {
        println!("{name:<8} params {:>10}  GFLOPs {:.4}", e.params, e.flops as f64 / 1e9);
    }
    println!(
        "{:<8} params {:>10}  GFLOPs {:.4}",
        "model",
        full.total_params,
        full.total_flops as f64 / 1e9
    );
    println!("resolution {r}x{r}; {}", full.convention);
    if let Some(path) = &a.out {
        write_json(
            path,
            &serde_json::json!({ "resolution": r, "decoder": dec, "model": full }),
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.cmd {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Count(a) => count_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Validation(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
