//! The five verbs.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use era_core::checkpoint::{write_atomic, Checkpoint};
use era_core::config::RunConfig;
use era_core::data::{export_dataset, generate, import_dataset, Dataset};
use era_core::eval::evaluate;
use era_core::tensor::FdOptions;
use era_core::train::Trainer;
use era_core::verify::{self, SuiteReport};

use crate::ablate::{self, AblationReport, EVAL_CHUNK};
use crate::args::{AblateArgs, EvalArgs, ExportArgs, GradcheckArgs, SplitArg, TrainArgs};
use crate::log::{self, LogLine};
use crate::report::{summary_table, EvalReport, RunMetadata};
use crate::resolve_config;

pub const CHECKPOINT_FILE: &str = "checkpoint.erac";
pub const LOG_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.json";
pub const DATASET_FILE: &str = "dataset.era1";

#[derive(Debug)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub resumed_from: Option<u64>,
    pub iterations: u64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut cfg = resolve_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let data = generate(&cfg.task)?;

    let (mut trainer, resumed_from) = if ckpt_path.exists() || args.checkpoint.is_some() {
        let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
        let t = Trainer::resume(&cfg, data, &ckpt, args.force)
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        let at = t.iteration;
        (t, Some(at))
    } else {
        (Trainer::new(&cfg, data)?, None)
    };

    let resolved = toml::to_string(&cfg).context("serialising the resolved config")?;
    write_atomic(&dir.join(CONFIG_FILE), resolved.as_bytes())?;
    let log_path = dir.join(LOG_FILE);
    match resumed_from {
        Some(at) => log::truncate(&log_path, at)?,
        None => write_atomic(&log_path, b"")?,
    }
    let mut log_file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;

    let every = cfg.train.checkpoint_every;
    let total = cfg.train.iterations;
    let save_path = dir.join(CHECKPOINT_FILE);
    if let Some(at) = resumed_from {
        eprintln!("resuming at iteration {at} of {total}");
    }
    trainer.run(|t, r| {
        log::append(&mut log_file, &LogLine::from_report(r))?;
        if every > 0 && t.iteration % every == 0 {
            t.checkpoint().save(&save_path)?;
        }
        if t.iteration % 100 == 0 || t.iteration == total {
            eprintln!("iteration {}/{total} loss {:.4}", t.iteration, r.train.total);
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&save_path)?;
    println!("trained {} iterations, checkpoint {}", trainer.iteration, save_path.display());
    Ok(TrainOutcome {
        output_dir: dir,
        resumed_from,
        iterations: trainer.iteration,
    })
}

/// Shape fields of an imported dataset must match the task config.
fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let pairs = [
        ("task.classes", cfg.task.classes, data.classes),
        ("task.frames", cfg.task.frames, data.frames),
        ("task.segments", cfg.task.segments, data.segments),
        ("task.features", cfg.task.features, data.features),
    ];
    for (field, want, got) in pairs {
        if want != got {
            bail!("dataset does not match the config: `{field}` is {want}, dataset has {got}");
        }
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let cfg = resolve_config(&args.config)?;
    cfg.validate()?;
    let data = match &args.data {
        Some(p) => {
            let mut f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let d = import_dataset(&mut f).with_context(|| format!("reading {}", p.display()))?;
            check_dataset(&cfg, &d)?;
            d
        }
        None => generate(&cfg.task)?,
    };
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let trainer = Trainer::resume(&cfg, data, &ckpt, args.force)
        .with_context(|| format!("restoring {}", ckpt_path.display()))?;
    let e = evaluate(&trainer.net, &trainer.data, args.split.into(), EVAL_CHUNK)?;
    let split = match args.split {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
    };
    let report = EvalReport::new(RunMetadata::new(&cfg, ckpt.iteration, split), &e);
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    write_atomic(&dir.join(EVAL_FILE), report.to_json().as_bytes())?;
    println!("{}", summary_table(&report));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub seeds: Vec<u64>,
    pub reports: Vec<(u64, SuiteReport)>,
}

impl GradcheckOutcome {
    pub fn failed_modules(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, r) in &self.reports {
            if !r.passed && !out.contains(&r.module) {
                out.push(r.module.clone());
            }
        }
        out
    }
}

/// Runs the suites and returns them even when some fail; the failure is
/// turned into an error by [`gradcheck`].
pub fn gradcheck_reports(args: &GradcheckArgs) -> Result<GradcheckOutcome> {
    let cfg = resolve_config(&args.config)?;
    if args.seeds == 0 {
        bail!("`--seeds` must be positive");
    }
    let opts = FdOptions {
        analytic_scale: args.sabotage.unwrap_or(1.0),
        ..FdOptions::default()
    };
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let mut reports = Vec::new();
    for &s in &seeds {
        for r in verify::run_all(s, &opts)? {
            reports.push((s, r));
        }
    }
    Ok(GradcheckOutcome { seeds, reports })
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<GradcheckOutcome> {
    let out = gradcheck_reports(args)?;
    println!("| seed | module | coordinates | max rel error | result |");
    println!("|---|---|---|---|---|");
    for (s, r) in &out.reports {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        println!("| {s} | {} | {} | {:.3e} | {verdict} |", r.module, r.coordinates, r.max_rel_error);
    }
    let failed = out.failed_modules();
    if !failed.is_empty() {
        bail!(
            "gradient check failed in {} (tolerance {:e})",
            failed.join(", "),
            verify::FD_TOLERANCE
        );
    }
    Ok(out)
}

pub fn ablate(args: &AblateArgs) -> Result<AblationReport> {
    let mut cfg = resolve_config(&args.config)?;
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let cells = ablate::cells(&cfg, args.axis);
    for (label, c) in &cells {
        c.validate().with_context(|| format!("row {label}"))?;
    }
    let report = ablate::sweep(&cfg, args.axis, |r| eprintln!("{}: AUC {:.2}", r.label, r.auc))?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serialises");
    json.push('\n');
    write_atomic(&dir.join(format!("ablate_{}.json", args.axis.name())), json.as_bytes())?;
    println!("{}", report.table());
    Ok(report)
}

pub fn export_data(args: &ExportArgs) -> Result<PathBuf> {
    let cfg = resolve_config(&args.config)?;
    cfg.task.validate()?;
    let data = generate(&cfg.task)?;
    let mut bytes = Vec::new();
    export_dataset(&data, &mut bytes)?;
    create_dir(&args.out)?;
    let path = args.out.join(DATASET_FILE);
    write_atomic(&path, &bytes)?;
    println!(
        "wrote {} ({} train, {} val, {} test)",
        path.display(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(path)
}
