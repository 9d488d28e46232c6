//! Parameter sweeps: one training run plus evaluation per (value, seed).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use noisy_lstm::data::Dataset;
use noisy_lstm::metrics::{evaluate, fmt4, EvalConfig, EvalReport};
use noisy_lstm::noise::NoiseKind;
use noisy_lstm::trainer::{load_model, train, Precision, TrainConfig, TrainOptions};
use noisy_lstm::Error;

use crate::args::{Command, SweepArgs, SweepParam};
use crate::commands::{load_data, resolve_train_config};
use crate::error::{CliError, CliResult, EXIT_DATA, EXIT_NUMERIC};
use crate::manifest::RunManifest;

pub const SWEEP_FILE: &str = "sweep.csv";
pub const RUNS_FILE: &str = "sweep_runs.csv";
pub const RUNS_DIR: &str = "runs";

#[derive(Clone, Debug, PartialEq)]
pub enum SweepValue {
    Int(usize),
    Float(f64),
    Kind(NoiseKind),
}

impl SweepValue {
    fn label(&self) -> String {
        match self {
            SweepValue::Int(v) => v.to_string(),
            SweepValue::Float(v) => v.to_string(),
            SweepValue::Kind(k) => k.name().to_string(),
        }
    }
}

pub fn parse_values(param: SweepParam, values: &str) -> CliResult<Vec<SweepValue>> {
    let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::Usage("--values must list at least one value".into()));
    }
    items
        .into_iter()
        .map(|s| {
            let bad = |why: &str| CliError::Usage(format!("invalid {} value {s:?}: {why}", param.name()));
            match param {
                SweepParam::Interval | SweepParam::BatchN => match s.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(SweepValue::Int(v)),
                    _ => Err(bad("expected a positive integer")),
                },
                SweepParam::NoiseP => match s.parse::<f64>() {
                    Ok(v) if (0.0..=1.0).contains(&v) => Ok(SweepValue::Float(v)),
                    _ => Err(bad("expected a probability in [0, 1]")),
                },
                SweepParam::NoiseKind => s.parse::<NoiseKind>().map(SweepValue::Kind).map_err(|e| bad(&e.to_string())),
            }
        })
        .collect()
}

fn configure(base: &TrainConfig, param: SweepParam, value: &SweepValue, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match (param, value) {
        (SweepParam::Interval, SweepValue::Int(v)) => cfg.interval = *v,
        (SweepParam::BatchN, SweepValue::Int(v)) => cfg.batch_size = *v,
        (SweepParam::NoiseP, SweepValue::Float(v)) => cfg.noise.p = *v,
        (SweepParam::NoiseKind, SweepValue::Kind(k)) => cfg.noise.kind = *k,
        _ => unreachable!("values are parsed for their parameter"),
    }
    cfg
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub value: String,
    pub seed: u64,
    pub report: Result<EvalReport, String>,
    pub numeric: bool,
}

struct Job {
    value: String,
    seed: u64,
    cfg: TrainConfig,
    dir: PathBuf,
}

fn run_job(ds: &Dataset, job: &Job, eval: &EvalConfig) -> noisy_lstm::Result<EvalReport> {
    let outcome = match job.cfg.precision {
        Precision::F32 => train::<f32>(ds, &job.cfg, &job.dir, &TrainOptions::default())?,
        Precision::F64 => train::<f64>(ds, &job.cfg, &job.dir, &TrainOptions::default())?,
    };
    let eval = EvalConfig { seq_len: job.cfg.seq_len, interval: job.cfg.interval, ..eval.clone() };
    match job.cfg.precision {
        Precision::F32 => evaluate(&mut load_model::<f32>(&outcome.checkpoint)?, &ds.val, &eval),
        Precision::F64 => evaluate(&mut load_model::<f64>(&outcome.checkpoint)?, &ds.val, &eval),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn runs_csv(param: SweepParam, results: &[RunResult]) -> String {
    let mut out = String::from("param,value,seed,val_miou,clean_miou,corrupted_miou,degradation,status\n");
    for r in results {
        let (clean, corrupted, degradation, status) = match &r.report {
            Ok(rep) => (Some(rep.clean.mean), rep.corrupted.as_ref().map(|c| c.mean), rep.degradation, "ok".to_string()),
            Err(e) => (None, None, None, format!("failed: {}", e.replace([',', '\n'], ";"))),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            param.name(),
            r.value,
            r.seed,
            fmt4(clean),
            fmt4(clean),
            fmt4(corrupted),
            fmt4(degradation),
            status
        ));
    }
    out
}

pub fn summary_csv(param: SweepParam, values: &[String], results: &[RunResult], corrupted: bool) -> String {
    let mut out = format!("{},val_miou", param.name());
    if corrupted {
        out.push_str(",clean_miou,corrupted_miou,degradation");
    }
    out.push_str(",runs,failed\n");
    for v in values {
        let rows: Vec<&RunResult> = results.iter().filter(|r| &r.value == v).collect();
        let ok: Vec<&EvalReport> = rows.iter().filter_map(|r| r.report.as_ref().ok()).collect();
        let clean = mean(ok.iter().map(|r| r.clean.mean));
        out.push_str(&format!("{v},{}", fmt4(clean)));
        if corrupted {
            let corr = mean(ok.iter().filter_map(|r| r.corrupted.as_ref().map(|c| c.mean)));
            let deg = mean(ok.iter().filter_map(|r| r.degradation));
            out.push_str(&format!(",{},{},{}", fmt4(clean), fmt4(corr), fmt4(deg)));
        }
        out.push_str(&format!(",{},{}\n", rows.len(), rows.len() - ok.len()));
    }
    out
}

pub fn sweep_cmd(args: &SweepArgs) -> CliResult<()> {
    let base = resolve_train_config(args.config.as_deref(), &args.overrides, args.resolved.as_ref())?;
    let values = parse_values(args.param, &args.values)?;
    let seeds = if args.seeds.is_empty() { vec![base.seed] } else { args.seeds.clone() };
    let mut jobs = Vec::new();
    for v in &values {
        for &seed in &seeds {
            let cfg = configure(&base, args.param, v, seed);
            cfg.validate().map_err(|e| CliError::Usage(format!("{} = {}: {e}", args.param.name(), v.label())))?;
            let dir = args.out.join(RUNS_DIR).join(format!("{}={}", args.param.name(), v.label())).join(format!("seed{seed}"));
            jobs.push(Job { value: v.label(), seed, cfg, dir });
        }
    }
    let ds = load_data(&args.data)?;
    let classes = base.resolve_model(&ds)?.classes;
    let eval = EvalConfig {
        classes,
        corruption: args.corrupt,
        corrupt_frames: args.frames.clone(),
        noise_params: base.noise.params.clone(),
        ..EvalConfig::default()
    };
    let recorded = SweepArgs { resolved: Some(base.clone()), ..args.clone() };
    let mut manifest = RunManifest::start(Command::Sweep(recorded), base.seed);
    manifest.write(&args.out)?;

    let results: Mutex<Vec<Option<RunResult>>> = Mutex::new(vec![None; jobs.len()]);
    let next = Mutex::new(0usize);
    let workers = args.parallel.clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(job) = jobs.get(i) else { break };
                let outcome = run_job(&ds, job, &eval);
                let numeric = matches!(&outcome, Err(e) if is_numeric(e));
                if let Err(e) = &outcome {
                    eprintln!("sweep run {}={} seed {} failed: {e}", args.param.name(), job.value, job.seed);
                }
                results.lock().unwrap()[i] =
                    Some(RunResult { value: job.value.clone(), seed: job.seed, report: outcome.map_err(|e| e.to_string()), numeric });
            });
        }
    });
    let results: Vec<RunResult> = results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect();

    let labels: Vec<String> = values.iter().map(SweepValue::label).collect();
    let summary = summary_csv(args.param, &labels, &results, args.corrupt.is_some());
    write(&args.out.join(RUNS_FILE), &runs_csv(args.param, &results))?;
    write(&args.out.join(SWEEP_FILE), &summary)?;
    print!("{summary}");

    let failed: Vec<&RunResult> = results.iter().filter(|r| r.report.is_err()).collect();
    let status = if failed.is_empty() { "ok".to_string() } else { format!("{} of {} runs failed", failed.len(), results.len()) };
    manifest.finish(&args.out, vec![args.out.join(SWEEP_FILE), args.out.join(RUNS_FILE)], &status)?;
    if failed.is_empty() {
        Ok(())
    } else {
        let code = if failed.iter().any(|r| r.numeric) { EXIT_NUMERIC } else { EXIT_DATA };
        Err(CliError::Failed { code, message: format!("sweep: {status}") })
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(
        e,
        Error::NumericAbort(_) | Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteParamGradient(_)
    )
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}
