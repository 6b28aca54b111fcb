use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use prefdiff::conformance::{self, Mutation};
use prefdiff::data::{DatasetKind, GaussianMixture};
use prefdiff::diffusion::{sample_many, DiffusionSchedule};
use prefdiff::metrics::mode_coverage;
use prefdiff::numerics::{Denoiser, RngState};
use prefdiff::trainer::{
    detect_reward_hacking, pretrain_reference, run_bandit_toy, sweep, time_to_mass, FinalMetrics, Trainer,
    TrainerState, DESK_WINDOW,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ScheduleSection};
use crate::error::CliError;

pub const OUTPUT_ROOT_ENV: &str = "PREFDIFF_OUTPUT_ROOT";
pub const REFERENCE_SCHEMA: &str = "prefdiff.reference/1";
pub const PRETRAIN_REPORT_SCHEMA: &str = "prefdiff.pretrain-report/1";
pub const TOY_SCHEMA: &str = "prefdiff.toy/1";

const COVERAGE_SAMPLES: usize = 1000;
const COVERAGE_STREAM: u64 = 0xC0;

pub struct Context {
    pub config: ExperimentConfig,
    pub force: bool,
}

impl Context {
    pub fn root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.config.output_dir.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReferenceCheckpoint {
    schema: String,
    dataset: DatasetKind,
    schedule: ScheduleSection,
    seed: u64,
    model: Denoiser,
}

#[derive(Serialize)]
struct PretrainSummary {
    schema: &'static str,
    dataset: DatasetKind,
    seed: u64,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    mode_coverage: Option<Vec<f64>>,
}

/// Empties `dir` (only with `force`) and recreates it.
fn prepare(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(CliError::Config(format!(
                "{} already exists; pass --force to overwrite it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn cell_name(gamma: f64, beta: f64, seed: u64) -> String {
    format!("gamma_{gamma}_beta_{beta}_seed_{seed}")
}

pub fn init(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite it",
            path.display()
        )));
    }
    ExperimentConfig::default().save(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn pretrain(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let sched = cfg.schedule()?;
    let dir = ctx.root().join("reference");
    prepare(&dir, ctx.force)?;

    let (model, report) = pretrain_reference(cfg.dataset, &sched, cfg.model, &cfg.pretrain, cfg.seed)?;
    let coverage = match cfg.dataset {
        DatasetKind::Mixture4 => {
            let rng = RngState::with_stream(cfg.seed, COVERAGE_STREAM);
            let trajs = sample_many(&sched, &model, &[Vec::new()], COVERAGE_SAMPLES, &rng)?;
            let samples: Vec<Vec<f64>> = trajs.iter().map(|t| t.sample().to_vec()).collect();
            Some(mode_coverage(&samples, &GaussianMixture::four_modes().centers)?)
        }
        DatasetKind::Blobs8x8 => None,
    };

    let checkpoint = ReferenceCheckpoint {
        schema: REFERENCE_SCHEMA.into(),
        dataset: cfg.dataset,
        schedule: cfg.schedule.clone(),
        seed: cfg.seed,
        model,
    };
    write(&dir.join("denoiser.json"), serde_json::to_string(&checkpoint)?)?;
    let summary = PretrainSummary {
        schema: PRETRAIN_REPORT_SCHEMA,
        dataset: cfg.dataset,
        seed: cfg.seed,
        steps: cfg.pretrain.steps,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        mode_coverage: coverage.clone(),
    };
    write(&dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut csv = format!("# {PRETRAIN_REPORT_SCHEMA}\nstep,loss\n");
    for (i, loss) in report.losses.iter().enumerate() {
        writeln!(csv, "{i},{loss}").unwrap();
    }
    write(&dir.join("loss.csv"), csv)?;

    println!(
        "pretrained {} steps: loss {:.4} -> {:.4}",
        cfg.pretrain.steps, report.initial_loss, report.final_loss
    );
    if let Some(cov) = coverage {
        let shares: Vec<String> = cov.iter().map(|c| format!("{c:.3}")).collect();
        println!("mode coverage: {}", shares.join(" "));
    }
    println!("reference written to {}", dir.display());
    Ok(())
}

fn load_reference(ctx: &Context) -> Result<(DiffusionSchedule, Denoiser), CliError> {
    let path = ctx.root().join("reference").join("denoiser.json");
    let text = match std::fs::read_to_string(&path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::Missing(format!(
                "reference checkpoint {} not found; run `prefdiff pretrain` first",
                path.display()
            )))
        }
        Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
    };
    let checkpoint: ReferenceCheckpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("{}: malformed checkpoint: {e}", path.display())))?;
    if checkpoint.schema != REFERENCE_SCHEMA {
        return Err(CliError::Io(format!(
            "{}: unsupported schema {}",
            path.display(),
            checkpoint.schema
        )));
    }
    let cfg = &ctx.config;
    if checkpoint.dataset != cfg.dataset || checkpoint.schedule != cfg.schedule {
        return Err(CliError::Config(format!(
            "{} was pretrained on {:?} with {} {} steps; the config asks for {:?} with {} {} steps",
            path.display(),
            checkpoint.dataset,
            checkpoint.schedule.kind,
            checkpoint.schedule.steps,
            cfg.dataset,
            cfg.schedule.kind,
            cfg.schedule.steps
        )));
    }
    Ok((cfg.schedule()?, checkpoint.model))
}

pub fn train(ctx: &Context, resume: bool, max_iterations: Option<usize>) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let run = cfg.run_config(cfg.run.gamma, cfg.run.beta, cfg.seed)?;
    let (sched, reference) = load_reference(ctx)?;
    let dir = ctx
        .root()
        .join("train")
        .join(cell_name(cfg.run.gamma, cfg.run.beta, cfg.seed));
    let checkpoints = dir.join("checkpoints");

    let mut trainer = if resume {
        let state = TrainerState::load(&checkpoints.join("latest.json"))?;
        Trainer::resume(run, sched, reference, state)?
    } else {
        prepare(&dir, ctx.force)?;
        Trainer::new(run, sched, reference)?
    };
    cfg.save(&dir.join("config.toml"))?;

    let outcome = trainer.run(max_iterations, Some(&checkpoints)).map(|_| ());
    trainer.log().write(&dir)?;
    if let Err(e) = outcome {
        if matches!(e, prefdiff::Error::Numerical(_)) {
            eprintln!(
                "last good state kept in {}",
                checkpoints.join("last_good.json").display()
            );
        }
        return Err(e.into());
    }

    let log = trainer.log();
    if log.len() >= 2 * DESK_WINDOW {
        let hacking = detect_reward_hacking(log, DESK_WINDOW)?;
        write(&dir.join("hacking.json"), serde_json::to_string_pretty(&hacking)?)?;
    }
    if let Some(m) = FinalMetrics::from_log(log) {
        write(&dir.join("summary.json"), serde_json::to_string_pretty(&m)?)?;
        let status = if trainer.is_finished() { "finished" } else { "paused" };
        println!(
            "{status} at step {}: proxy {:.4}, true {:.4}, KL {:.4}, E1 {:.4}",
            log.last().map_or(0, |r| r.step),
            m.proxy_reward,
            m.true_reward,
            m.kl,
            m.e1
        );
    }
    println!("run written to {}", dir.display());
    Ok(())
}

pub fn sweep_grid(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let grid = &cfg.sweep;
    for (name, empty) in [
        ("gammas", grid.gammas.is_empty()),
        ("betas", grid.betas.is_empty()),
        ("seeds", grid.seeds.is_empty()),
    ] {
        if empty {
            return Err(CliError::Config(format!("sweep.{name} must not be empty")));
        }
    }
    for &gamma in &grid.gammas {
        for &beta in &grid.betas {
            cfg.run_config(gamma, beta, cfg.seed)?;
        }
    }
    let base = cfg.run_config(cfg.run.gamma, cfg.run.beta, cfg.seed)?;
    let (sched, reference) = load_reference(ctx)?;
    let dir = ctx.root().join("sweep");
    prepare(&dir, ctx.force)?;

    let result = sweep(&base, &sched, &reference, &grid.gammas, &grid.betas, &grid.seeds)?;
    for cell in &result.cells {
        let cell_dir = dir.join("cells").join(cell_name(cell.gamma, cell.beta, cell.seed));
        std::fs::create_dir_all(&cell_dir)?;
        match &cell.outcome {
            Ok((log, metrics)) => {
                log.write(&cell_dir)?;
                write(&cell_dir.join("summary.json"), serde_json::to_string_pretty(metrics)?)?;
            }
            Err(e) => write(&cell_dir.join("error.txt"), format!("{e}\n"))?,
        }
    }
    write(&dir.join("matrix.csv"), result.to_csv())?;

    let failed = result.failures();
    println!(
        "{} cells, {failed} failed; matrix written to {}",
        result.cells.len(),
        dir.join("matrix.csv").display()
    );
    if failed == result.cells.len() {
        let first = result
            .cells
            .iter()
            .find_map(|c| c.outcome.as_ref().err())
            .cloned()
            .unwrap_or_default();
        return Err(CliError::Numerical(format!(
            "every sweep cell failed; first error: {first}"
        )));
    }
    Ok(())
}

pub fn verify(mutation: Option<Mutation>, only: Option<&str>, report: Option<&Path>) -> Result<(), CliError> {
    let start = Instant::now();
    let outcome = conformance::run(mutation, only);
    if outcome.outcomes.is_empty() {
        return Err(CliError::Config(format!(
            "no property id starts with `{}`",
            only.unwrap_or("")
        )));
    }
    for o in &outcome.outcomes {
        let mark = if o.passed { "PASS" } else { "FAIL" };
        eprintln!("{mark} {} ({:.1}s): {}", o.id, o.seconds, o.detail);
    }
    let json = serde_json::to_string_pretty(&outcome)?;
    match report {
        Some(path) => write(path, json + "\n")?,
        None => println!("{json}"),
    }
    let failed = outcome.failures().len();
    eprintln!(
        "{} of {} properties passed in {:.1}s",
        outcome.outcomes.len() - failed,
        outcome.outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} properties failed")));
    }
    Ok(())
}

pub fn toy(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let gammas = &cfg.toy.gammas;
    let seeds = &cfg.toy.seeds;
    if gammas.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("toy.gammas and toy.seeds must not be empty".into()));
    }
    let runs = seeds
        .iter()
        .map(|&seed| run_bandit_toy(&cfg.toy_config(seed)?, gammas).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = ctx.root().join("toy");
    prepare(&dir, ctx.force)?;

    let header: Vec<String> = seeds.iter().map(|s| format!("seed_{s}")).collect();
    let mut summary = format!("# {TOY_SCHEMA}\ngamma,seed,steps_to_half\n");
    for (g, &gamma) in gammas.iter().enumerate() {
        let mut csv = format!("# {TOY_SCHEMA}\nstep,{}\n", header.join(","));
        for step in 0..=cfg.toy.steps {
            csv += &step.to_string();
            for run in &runs {
                write!(csv, ",{}", run[g].high_mass[step]).unwrap();
            }
            csv.push('\n');
        }
        write(&dir.join(format!("gamma_{gamma}.csv")), csv)?;

        let times: Vec<Option<usize>> = runs.iter().map(|run| time_to_mass(&run[g], 0.5)).collect();
        for (seed, t) in seeds.iter().zip(&times) {
            let t = t.map_or("never".to_string(), |t| t.to_string());
            writeln!(summary, "{gamma},{seed},{t}").unwrap();
        }
        let shown: Vec<String> = times.iter().map(|t| t.map_or("-".into(), |t| t.to_string())).collect();
        println!("gamma {gamma:>9}: steps to 0.5 mass {}", shown.join(" "));
    }
    write(&dir.join("summary.csv"), summary)?;
    println!("curves written to {}", dir.display());
    Ok(())
}
