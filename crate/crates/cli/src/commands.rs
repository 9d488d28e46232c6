use std::fs;
use std::path::{Path, PathBuf};

use noisy_lstm::data::{generate_dataset, load_dataset, write_pgm, Dataset, GenConfig};
use noisy_lstm::grad_suites::{run_scope, suite_passed, Scope};
use noisy_lstm::gradcheck::GradCheckConfig;
use noisy_lstm::metrics::{evaluate, report_csv, EvalConfig, EvalReport, Segmenter};
use noisy_lstm::trainer::{
    load_model, read_json, train, Precision, SavedModel, TrainConfig, TrainOptions, CONFIG_FILE, MODEL_FILE,
};
use noisy_lstm::{Error, Fault};

use crate::args::{Command, EvalArgs, FaultArg, GenDataArgs, GradcheckArgs, ScopeArg, TrainArgs, TrainOverrides};
use crate::error::{CliError, CliResult, EXIT_NUMERIC};
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const REPORT_FILE: &str = "report.csv";
pub const PREDICTIONS_DIR: &str = "predictions";

fn load_config<D: for<'de> serde::Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<D> {
    match path {
        Some(p) => Ok(read_json(p)?),
        None => Ok(D::default()),
    }
}

const DATASET_ENTRIES: [&str; 5] = ["train", "val", "noise_pool", "meta.json", MANIFEST_FILE];

fn prepare_dataset_dir(out: &Path, force: bool) -> CliResult<()> {
    let non_empty = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Data(format!("{} exists and is not empty; pass --force to replace it", out.display())).into());
        }
        for name in DATASET_ENTRIES {
            let p = out.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.is_file() {
                fs::remove_file(&p)?;
            }
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn resolve_gen_config(args: &GenDataArgs) -> CliResult<GenConfig> {
    if let Some(r) = &args.resolved {
        return Ok(r.clone());
    }
    let mut cfg: GenConfig = load_config(args.config.as_deref())?;
    if let Some(n) = args.clips {
        cfg.train_clips = n;
        cfg.val_clips = n / 5;
    }
    if let Some(n) = args.val_clips {
        cfg.val_clips = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let cfg = resolve_gen_config(args)?;
    cfg.validate()?;
    prepare_dataset_dir(&args.out, args.force)?;
    let recorded = GenDataArgs { resolved: Some(cfg.clone()), ..args.clone() };
    let mut manifest = RunManifest::start(Command::GenData(recorded), cfg.seed);
    manifest.write(&args.out)?;
    let ds = generate_dataset(&cfg)?;
    noisy_lstm::data::save_dataset(&ds, &args.out)?;
    let artifacts = ["meta.json", "train", "val", "noise_pool"].iter().map(|n| args.out.join(n)).collect();
    manifest.finish(&args.out, artifacts, "ok")?;
    println!(
        "wrote {} train + {} val clips and {} noise images to {}",
        ds.train.len(),
        ds.val.len(),
        ds.noise_pool.len(),
        args.out.display()
    );
    Ok(())
}

pub fn resolve_train_config(config: Option<&Path>, overrides: &TrainOverrides, resolved: Option<&TrainConfig>) -> CliResult<TrainConfig> {
    if let Some(r) = resolved {
        return Ok(r.clone());
    }
    let mut cfg: TrainConfig = load_config(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_data(dir: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(dir)?)
}

fn run_training(ds: &Dataset, cfg: &TrainConfig, out: &Path, opts: &TrainOptions) -> CliResult<noisy_lstm::trainer::TrainOutcome> {
    Ok(match cfg.precision {
        Precision::F32 => train::<f32>(ds, cfg, out, opts)?,
        Precision::F64 => train::<f64>(ds, cfg, out, opts)?,
    })
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_train_config(args.config.as_deref(), &args.overrides, args.resolved.as_ref())?;
    let ds = load_data(&args.data)?;
    let recorded = TrainArgs { resolved: Some(cfg.clone()), ..args.clone() };
    let mut manifest = RunManifest::start(Command::Train(recorded), cfg.seed);
    manifest.write(&args.out)?;
    let opts = TrainOptions { resume: args.resume.clone(), stop_after: args.stop_after };
    match run_training(&ds, &cfg, &args.out, &opts) {
        Ok(outcome) => {
            let artifacts = [noisy_lstm::trainer::CHECKPOINT_FILE, noisy_lstm::trainer::LOG_FILE]
                .iter()
                .map(|n| args.out.join(n))
                .collect();
            manifest.finish(&args.out, artifacts, if outcome.finished { "ok" } else { "stopped" })?;
            if let (Some(first), Some(last)) = (outcome.rows.first(), outcome.rows.last()) {
                println!(
                    "trained {} epochs: mean loss {:.4} -> {:.4}; checkpoint {}",
                    outcome.rows.len(),
                    first.mean_loss,
                    last.mean_loss,
                    outcome.checkpoint.display()
                );
            }
            Ok(())
        }
        Err(e) => {
            manifest.finish(&args.out, Vec::new(), &format!("failed: {e}"))?;
            Err(e)
        }
    }
}

/// Class names for the legend file.
fn class_name(id: usize, classes: usize) -> String {
    const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
    if id == 0 {
        return "background".into();
    }
    let kinds: Vec<&str> = (0..3).filter(|k| 1 + k % (classes - 1) == id).map(|k| SHAPES[k]).collect();
    kinds.join("+")
}

/// Report CSV plus optional per-target label dumps.
pub fn write_eval_outputs(report: &EvalReport, cfg: &EvalConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let report_path = out.join(REPORT_FILE);
    fs::write(&report_path, report_csv(report, cfg))?;
    let mut artifacts = vec![report_path];
    if cfg.keep_predictions {
        let dir = out.join(PREDICTIONS_DIR);
        if dir.is_dir() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        for p in &report.predictions {
            let stem = format!("clip_{:04}_t{:03}", p.clip_id, p.target_index);
            write_pgm(&dir.join(format!("{stem}_pred.pgm")), &p.predicted)?;
            write_pgm(&dir.join(format!("{stem}_truth.pgm")), &p.truth)?;
        }
        let mut legend = String::from("# PGM pixel values are class ids; 255 marks ignored pixels.\n# id name suggested_rgb\n");
        const COLORS: [&str; 4] = ["0 0 0", "220 60 50", "60 200 80", "60 90 230"];
        for id in 0..cfg.classes {
            legend.push_str(&format!("{id} {} {}\n", class_name(id, cfg.classes), COLORS.get(id).unwrap_or(&"255 255 255")));
        }
        fs::write(dir.join("legend.txt"), legend)?;
        artifacts.push(dir);
    }
    Ok(artifacts)
}

pub fn eval_with<S: Segmenter + ?Sized>(seg: &mut S, ds: &Dataset, cfg: &EvalConfig, out: &Path) -> CliResult<(EvalReport, Vec<PathBuf>)> {
    let report = evaluate(seg, &ds.val, cfg)?;
    let artifacts = write_eval_outputs(&report, cfg, out)?;
    Ok((report, artifacts))
}

pub fn eval_cmd(args: &EvalArgs) -> CliResult<()> {
    let run_dir = args.ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
    let saved: SavedModel = read_json(&run_dir.join(MODEL_FILE))?;
    let trained: Option<TrainConfig> =
        if run_dir.join(CONFIG_FILE).is_file() { Some(read_json(&run_dir.join(CONFIG_FILE))?) } else { None };
    let ds = load_data(&args.data)?;
    let [h, w] = saved.model.crop;
    if (ds.config.height, ds.config.width) != (h, w) {
        return Err(Error::Data(format!(
            "checkpoint network was constructed for {h}x{w} frames but the dataset provides {}x{} frames",
            ds.config.height, ds.config.width
        ))
        .into());
    }
    if ds.config.classes != saved.model.classes {
        return Err(Error::Data(format!(
            "checkpoint network predicts {} classes but the dataset has {}",
            saved.model.classes, ds.config.classes
        ))
        .into());
    }
    let cfg = EvalConfig {
        seq_len: args.seq_len.or(trained.as_ref().map(|t| t.seq_len)).unwrap_or(4),
        interval: args.interval.or(trained.as_ref().map(|t| t.interval)).unwrap_or(1),
        batch_size: args.batch_size.max(1),
        classes: saved.model.classes,
        corruption: args.corrupt,
        corrupt_frames: args.frames.clone(),
        noise_params: trained.map(|t| t.noise.params).unwrap_or_default(),
        seed: args.seed,
        keep_predictions: args.dump_predictions,
    };
    let out = args.out.clone().unwrap_or_else(|| run_dir.join("eval"));
    let mut manifest = RunManifest::start(Command::Eval(args.clone()), args.seed);
    manifest.write(&out)?;
    let (report, artifacts) = match saved.precision {
        Precision::F32 => eval_with(&mut load_model::<f32>(&args.ckpt)?, &ds, &cfg, &out)?,
        Precision::F64 => eval_with(&mut load_model::<f64>(&args.ckpt)?, &ds, &cfg, &out)?,
    };
    manifest.finish(&out, artifacts, "ok")?;
    print!("{}", report_csv(&report, &cfg));
    println!("{} targets; mIoU {:.2}%", report.targets, 100.0 * report.clean.mean);
    Ok(())
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> CliResult<()> {
    let scope = match args.scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Cell => Scope::Cell,
        ScopeArg::Full => Scope::Full,
    };
    let cfg = GradCheckConfig {
        epsilon: args.epsilon,
        tolerance: args.tolerance,
        max_elements: args.max_elements,
        floor: args.floor,
        seed: args.seed,
        fault: args.inject_fault.map(|f| match f {
            FaultArg::NegateTanh => Fault::NegateTanhBackward,
        }),
    };
    let reports = run_scope(scope, &cfg)?;
    let mut worst: f64 = 0.0;
    for (instance, report) in &reports {
        for p in &report.params {
            worst = worst.max(p.max_rel_error);
            println!(
                "{} {instance} {} checked={} max_rel_error={:.3e}",
                if p.max_rel_error < report.tolerance { "PASS" } else { "FAIL" },
                p.name,
                p.checked,
                p.max_rel_error
            );
        }
    }
    let groups: usize = reports.iter().map(|(_, r)| r.params.len()).sum();
    println!("max_rel_error={worst:.3e} tolerance={:e} groups={groups}", args.tolerance);
    if suite_passed(&reports) {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Failed { code: EXIT_NUMERIC, message: format!("gradcheck failed: max relative error {worst:.3e}") })
    }
}
