use clap::{Args, Parser, Subcommand};
use pvckit::dataset::{case_dirs, generate_dataset, load_sample, read_case_info, read_manifest};
use pvckit::io::{read_labels, read_volume, write_volume};
use pvckit::metrics::{cohort_table, read_metrics_csv, summarize, write_metrics_csv};
use pvckit::phantom::{dataset_split, generate, PhantomSpec};
use pvckit::pvc::{iy_correct, iy_mismatch_demo, IyOptions, PsfModel};
use pvckit::train::{evaluate, train, Checkpoint, Sample, TrainConfig, REF_IY};
use pvckit::{PvcError, Result};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "pvckit", version, about = "Partial volume correction toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// RNG seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file stem or directory, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic phantom cohorts.
    Phantom {
        #[command(subcommand)]
        command: PhantomCmd,
    },
    /// Iterative Yang correction.
    Iy {
        #[command(subcommand)]
        command: IyCmd,
    },
    /// Train a network on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-case metrics.
    Eval(EvalArgs),
    /// Summarize a metrics CSV.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
enum PhantomCmd {
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Preset (default, noiseless, compact, full) or a JSON spec file.
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long, default_value_t = 28)]
    n: usize,
}

#[derive(Subcommand, Debug)]
enum IyCmd {
    Run(IyRunArgs),
    MismatchDemo(MismatchArgs),
}

#[derive(Args, Debug, Clone)]
struct PsfArgs {
    /// Isotropic PSF FWHM in mm; read from the case metadata when omitted.
    #[arg(long)]
    fwhm: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
struct IyRunArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    #[command(flatten)]
    psf: PsfArgs,
}

#[derive(Args, Debug)]
struct MismatchArgs {
    /// Dataset root; a fresh noiseless cohort is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cohort size when generating.
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Template shift in voxels as z,y,x.
    #[arg(long, default_value = "0,0,2", value_parser = parse_shift)]
    shift: [isize; 3],
    #[command(flatten)]
    psf: PsfArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    filters: Option<usize>,
    /// Train on the whole cohort instead of the configured split.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate every case instead of the test split.
    #[arg(long)]
    all: bool,
    /// Use the whole volume rather than the heart slices.
    #[arg(long)]
    full_volume: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    metrics: PathBuf,
    /// Reference method for agreement statistics.
    #[arg(long, default_value = REF_IY)]
    versus: String,
}

fn parse_shift(s: &str) -> std::result::Result<[isize; 3], String> {
    let parts: Vec<isize> = s
        .split(',')
        .map(|p| p.trim().parse::<isize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected three comma-separated integers".to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| PvcError::MissingData(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| PvcError::Config(format!("{}: {e}", path.display())))
}

fn require_out(common: &Common) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| PvcError::Config("--out is required for this command".into()))
}

fn preset(name: &str) -> Result<PhantomSpec> {
    Ok(match name {
        "default" => PhantomSpec::default(),
        "noiseless" => PhantomSpec::noiseless(),
        "compact" => PhantomSpec::compact(),
        "full" => PhantomSpec::full_size(),
        path => read_json(Path::new(path))?,
    })
}

fn phantom_gen(common: &Common, a: &GenArgs) -> Result<serde_json::Value> {
    let mut spec = match &common.config {
        Some(p) => read_json(p)?,
        None => preset(&a.spec)?,
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = require_out(common)?;
    let m = generate_dataset(&out, &spec, a.n)?;
    Ok(json!({ "out": out, "cases": m.cases.len() }))
}

fn iy_options(common: &Common, psf: &PsfArgs) -> Result<IyOptions> {
    let mut o: IyOptions = match &common.config {
        Some(p) => read_json(p)?,
        None => IyOptions::default(),
    };
    if let Some(n) = psf.iters {
        o.iterations = n;
    }
    Ok(o)
}

/// PSF from `--fwhm`, else from the `case.json` next to `stem`, else the default.
fn psf_for(psf: &PsfArgs, stem: &Path) -> Result<PsfModel> {
    let p = match psf.fwhm {
        Some(f) => PsfModel::isotropic(f),
        None => match stem.parent().filter(|d| d.join("case.json").exists()) {
            Some(dir) => read_case_info(dir)?.spec.psf,
            None => PsfModel::default(),
        },
    };
    p.validate()?;
    Ok(p)
}

fn iy_run(common: &Common, a: &IyRunArgs) -> Result<serde_json::Value> {
    let opts = iy_options(common, &a.psf)?;
    let observed = read_volume(&a.input)?;
    let templates = read_labels(&a.templates)?;
    let psf = psf_for(&a.psf, &a.input)?;
    let r = iy_correct(&observed, &templates, &psf, &opts)?;
    let out = require_out(common)?;
    write_volume(&out, &r.corrected)?;
    Ok(json!({
        "out": out,
        "iterations": opts.iterations,
        "imbv": pvckit::losses::imbv(&r.corrected, &templates)?,
        "clamped_voxels": r.clamped_voxels,
    }))
}

fn mismatch_demo(common: &Common, a: &MismatchArgs) -> Result<serde_json::Value> {
    let opts = iy_options(common, &a.psf)?;
    let mut reports = Vec::new();
    match &a.data {
        Some(root) => {
            let m = read_manifest(root)?;
            for dir in case_dirs(root, &m) {
                let info = read_case_info(&dir)?;
                let observed = read_volume(&dir.join("observed"))?;
                let templates = read_labels(&dir.join("labels"))?;
                let psf = psf_for(&a.psf, &dir.join("observed"))?;
                let (_, r) = iy_mismatch_demo(&observed, &templates, a.shift, &psf, &opts, Some(info.true_imbv))?;
                reports.push(json!({ "case": info.id, "report": r }));
            }
        }
        None => {
            let base = PhantomSpec {
                seed: common.seed.unwrap_or(0),
                ..PhantomSpec::noiseless()
            };
            for i in 0..a.n {
                let spec = PhantomSpec {
                    seed: base.seed.wrapping_add(i as u64),
                    jitter: 0.1,
                    ..base.clone()
                };
                let case = generate(&spec)?;
                let psf = match a.psf.fwhm {
                    Some(f) => PsfModel::isotropic(f),
                    None => case.spec.psf,
                };
                let (_, r) = iy_mismatch_demo(&case.observed, &case.templates, a.shift, &psf, &opts, Some(case.true_imbv))?;
                reports.push(json!({ "case": i, "report": r }));
            }
        }
    }
    let all_worse = reports.iter().all(|r| {
        let e = &r["report"];
        e["shifted_abs_error"].as_f64() > e["aligned_abs_error"].as_f64()
    });
    let value = json!({ "shift": a.shift, "cases": reports, "shift_increases_error_everywhere": all_worse });
    if let Some(out) = &common.out {
        std::fs::write(out, serde_json::to_vec_pretty(&value)?)?;
    }
    Ok(value)
}

fn load_samples(root: &Path, ids: &[usize], cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let m = read_manifest(root)?;
    let dirs = case_dirs(root, &m);
    ids.iter()
        .map(|&i| load_sample(&dirs[i], cfg.use_ct, &cfg.iy_options()))
        .collect()
}

fn split_ids(n: usize, cfg: &TrainConfig) -> Result<[Vec<usize>; 3]> {
    dataset_split(n, cfg.split, cfg.seed)
}

fn run_train(common: &Common, a: &TrainArgs) -> Result<serde_json::Value> {
    let mut cfg: TrainConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(f) = a.filters {
        cfg.network.filters = f;
    }
    cfg.validate()?;
    let out = require_out(common)?;
    std::fs::create_dir_all(&out)?;
    let n = read_manifest(&a.data)?.cases.len();
    let (tr, va) = if a.all {
        ((0..n).collect(), Vec::new())
    } else {
        let [tr, va, _] = split_ids(n, &cfg)?;
        (tr, va)
    };
    let train_set = load_samples(&a.data, &tr, &cfg)?;
    let val_set = load_samples(&a.data, &va, &cfg)?;
    let ckpt = out.join("checkpoint.pvck");
    let outcome = train(&cfg, &train_set, &val_set, Some(&ckpt))?;
    outcome.checkpoint.save(&ckpt)?;
    std::fs::write(out.join("train_log.json"), serde_json::to_vec_pretty(&outcome.log)?)?;
    Ok(json!({
        "checkpoint": ckpt,
        "epochs": outcome.log.len(),
        "best_loss": outcome.checkpoint.progress.best_loss,
        "parameter_sha256": outcome.checkpoint.parameter_digest(),
    }))
}

fn run_eval(common: &Common, a: &EvalArgs) -> Result<serde_json::Value> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let n = read_manifest(&a.data)?.cases.len();
    let ids: Vec<usize> = if a.all {
        (0..n).collect()
    } else {
        split_ids(n, &ck.config)?[2].clone()
    };
    let samples = load_samples(&a.data, &ids, &ck.config)?;
    let rows = evaluate(&model, &samples, !a.full_volume)?;
    let out = require_out(common)?;
    std::fs::create_dir_all(&out)?;
    let csv = out.join("metrics.csv");
    write_metrics_csv(&csv, &rows)?;
    let summary = summarize(&rows, REF_IY)?;
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(json!({ "metrics": csv, "cases": samples.len(), "rows": rows.len() }))
}

fn run_report(common: &Common, a: &ReportArgs) -> Result<serde_json::Value> {
    let rows = read_metrics_csv(&a.metrics)?;
    let summary = summarize(&rows, &a.versus)?;
    if let Some(out) = &common.out {
        std::fs::write(out, serde_json::to_vec_pretty(&summary)?)?;
    }
    for r in cohort_table(&rows)? {
        let [imbv, ssim, psnr, rmse] = r.cells();
        println!("{:<10} {:<6} n={:<3} IMBV {imbv}  SSIM {ssim}  PSNR {psnr}  RMSE {rmse}", r.method, r.reference, r.n);
    }
    Ok(serde_json::to_value(&summary)?)
}

fn dispatch(cli: &Cli) -> Result<serde_json::Value> {
    let c = &cli.common;
    match &cli.command {
        Command::Phantom { command: PhantomCmd::Gen(a) } => phantom_gen(c, a),
        Command::Iy { command: IyCmd::Run(a) } => iy_run(c, a),
        Command::Iy { command: IyCmd::MismatchDemo(a) } => mismatch_demo(c, a),
        Command::Train(a) => run_train(c, a),
        Command::Eval(a) => run_eval(c, a),
        Command::Report(a) => run_report(c, a),
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim().to_string(), 2);
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return fail("usage", "--threads must be >= 1".into(), 2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("config", e.to_string(), 1);
        }
    }
    match dispatch(&cli) {
        Ok(v) => {
            if !matches!(cli.command, Command::Report(_)) {
                println!("{v}");
            }
            log::info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = if matches!(e, PvcError::Config(_)) { 2 } else { 1 };
            fail(e.kind(), e.to_string(), code)
        }
    }
}
