use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lae_core::sca::{run_sca, write_trace_csv, AccessScheme};
use lae_core::{rate_report, sdma_rate_report, Association, ChannelRealization};
use lae_gdm::baselines::{direct_pg_policy, random_policy_with, sdma, RandomLinks};
use lae_gdm::config::RunConfig;
use lae_gdm::denoiser::{load_checkpoint, Denoiser, GraphTransformer};
use lae_gdm::diffusion::NoiseSchedule;
use lae_gdm::graph::Environment;
use lae_gdm::orchestrator::{alternate, evaluate_seeded, write_artifacts, SolutionFile, SolveOutcome, Solved};
use lae_gdm::seeds::{self, Stream};
use lae_gdm::trainer::{Policy, StepMetrics, Trainer};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::sweep::{run_sweep, write_sweep};
use crate::{BaselineKind, Cli, CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

/// Reads `--config` and applies command-line overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("missing --config PATH".into()))?;
    if !path.exists() {
        return Err(CliError::Config(format!("config file {} does not exist", path.display())));
    }
    let mut cfg = RunConfig::load(path).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(mode) = cli.reward_mode {
        cfg.train.reward_mode = mode;
    }
    Ok(cfg)
}

/// Channel realization used at test time for run seed `seed`; disjoint
/// from the per-step training channels.
pub fn solve_channel_seed(seed: u64) -> u64 {
    seeds::derive(seed, Stream::Solve, u64::MAX, 0)
}

/// A configuration with its environment and noise schedule built.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub env: Environment,
    pub schedule: NoiseSchedule,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> std::result::Result<Self, lae_gdm::Error> {
        cfg.validate()?;
        let env = cfg.environment()?;
        let schedule = cfg.schedule()?;
        Ok(Pipeline { cfg, env, schedule })
    }

    pub fn model(&self, seed: u64) -> std::result::Result<GraphTransformer, lae_gdm::Error> {
        GraphTransformer::new(
            self.cfg.denoiser.clone(),
            self.env.grid.cells(),
            seeds::derive(seed, Stream::Init, 0, 0),
        )
    }

    /// Trains a fresh model (or resumes from `<out>/checkpoint`), writing
    /// `metrics.jsonl` and the checkpoint when `out` is given.
    pub fn train(
        &self,
        seed: u64,
        out: Option<&Path>,
        resume: bool,
    ) -> std::result::Result<(GraphTransformer, Vec<StepMetrics>), lae_gdm::Error> {
        let model = self.model(seed)?;
        let curve = {
            let mut trainer = Trainer::new(
                &self.env,
                &model,
                Policy::Diffusion(&self.schedule),
                self.cfg.train.clone(),
                seed,
                self.cfg.snapshot(),
            )?;
            let ckpt = out.map(|d| d.join("checkpoint"));
            if resume {
                let dir = ckpt.as_deref().expect("resume needs an output directory");
                trainer = trainer.resume(dir)?;
            }
            match out {
                Some(dir) => {
                    let path = dir.join("metrics.jsonl");
                    fs::create_dir_all(dir).map_err(|e| lae_gdm::Error::Io {
                        path: dir.to_path_buf(),
                        source: e,
                    })?;
                    let file = OpenOptions::new()
                        .create(true)
                        .write(true)
                        .append(resume)
                        .truncate(!resume)
                        .open(&path)
                        .map_err(|e| lae_gdm::Error::Io { path: path.clone(), source: e })?;
                    let mut w = BufWriter::new(file);
                    trainer.run(Some(&mut w), ckpt.as_deref())?
                }
                None => trainer.run(None, None)?,
            }
        };
        Ok((model, curve))
    }

    /// A model restored from a checkpoint written for the same scenario.
    pub fn load_model(&self, dir: &Path) -> std::result::Result<GraphTransformer, lae_gdm::Error> {
        let ckpt = load_checkpoint(dir)?;
        let stored: RunConfig = serde_json::from_value(ckpt.meta.config.clone()).map_err(|e| lae_gdm::Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("unreadable configuration: {e}"),
        })?;
        if stored.network != self.cfg.network
            || stored.scenario != self.cfg.scenario
            || stored.layout != self.cfg.layout
            || stored.denoiser != self.cfg.denoiser
        {
            return Err(lae_gdm::Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: "trained for a different scenario or architecture".into(),
            });
        }
        let model = GraphTransformer::new(self.cfg.denoiser.clone(), self.env.grid.cells(), 0)?;
        model.params().assign(&ckpt.params)?;
        Ok(model)
    }

    pub fn solve<D: Denoiser + ?Sized>(&self, den: &D, seed: u64) -> std::result::Result<SolveOutcome, lae_gdm::Error> {
        alternate(
            den,
            &self.schedule,
            &self.env,
            solve_channel_seed(seed),
            &self.cfg.solve,
            seed,
        )
    }

    /// `runs` independent random deployments.
    pub fn random(&self, seed: u64, runs: usize) -> std::result::Result<Vec<Solved>, lae_gdm::Error> {
        self.random_with(seed, runs, RandomLinks::default())
    }

    pub fn random_with(
        &self,
        seed: u64,
        runs: usize,
        links: RandomLinks,
    ) -> std::result::Result<Vec<Solved>, lae_gdm::Error> {
        (0..runs as u64)
            .map(|i| {
                random_policy_with(
                    &self.env,
                    links,
                    seeds::derive(seed, Stream::Channel, i, 1),
                    seeds::derive(seed, Stream::Baseline, i, 0),
                )
            })
            .collect()
    }

    pub fn direct_pg(
        &self,
        seed: u64,
        out: Option<&Path>,
    ) -> std::result::Result<Vec<StepMetrics>, lae_gdm::Error> {
        let snapshot = self.cfg.snapshot();
        match out {
            Some(dir) => {
                let path = dir.join("metrics.jsonl");
                fs::create_dir_all(dir).map_err(|e| lae_gdm::Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
                let mut w = BufWriter::new(File::create(&path).map_err(|e| lae_gdm::Error::Io { path, source: e })?);
                let ckpt = dir.join("checkpoint");
                Ok(direct_pg_policy(&self.env, &self.cfg.train, seed, snapshot, Some(&mut w), Some(&ckpt))?.1)
            }
            None => Ok(direct_pg_policy(&self.env, &self.cfg.train, seed, snapshot, None, None)?.1),
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Train { resume } => train(cfg, cli.seed, out, *resume),
        Command::Solve { checkpoint } => solve(cfg, cli.seed, out, checkpoint.as_deref()),
        Command::Sca { instance } => sca(cfg, out, instance),
        Command::Baseline { kind, runs, links } => baseline(cfg, cli.seed, out, *kind, *runs, (*links).into()),
        Command::Sweep { kind, seeds, values } => {
            let rows = run_sweep(&cfg, *kind, values.as_deref(), *seeds, cli.seed)?;
            write_sweep(out, *kind, &rows)?;
            println!("sweep {kind:?}: {} cells written to {}", rows.len(), out.display());
            Ok(())
        }
        Command::Check { solution } => check(cfg, solution),
    }
}

fn pipeline(cfg: RunConfig) -> Result<Pipeline> {
    Pipeline::new(cfg).map_err(|e| CliError::Config(e.to_string()))
}

fn write_run_header(p: &Pipeline, seed: u64, out: &Path) -> Result<()> {
    write_text(&out.join("config.toml"), &p.cfg.to_toml())?;
    write_text(&out.join("seed"), &format!("{seed}\n"))?;
    let path = out.join("schedule.csv");
    let mut w = create(&path)?;
    p.schedule
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&path, e))
}

fn report_curve(label: &str, curve: &[StepMetrics]) {
    let tail = &curve[curve.len().saturating_sub(10)..];
    if !tail.is_empty() {
        let mean = tail.iter().map(|m| m.mean_reward).sum::<f64>() / tail.len() as f64;
        println!("{label}: {} steps, final-10 mean reward {mean:.4}", curve.len());
    }
}

fn train(cfg: RunConfig, seed: u64, out: &Path, resume: bool) -> Result<()> {
    let p = pipeline(cfg)?;
    if resume && !out.join("checkpoint").join("meta.json").exists() {
        return Err(CliError::Run(format!("no checkpoint under {}", out.display())));
    }
    write_run_header(&p, seed, out)?;
    let (_, curve) = p.train(seed, Some(out), resume)?;
    report_curve("train", &curve);
    Ok(())
}

fn solve_with(p: &Pipeline, seed: u64, out: &Path, checkpoint: Option<&Path>) -> Result<SolveOutcome> {
    write_run_header(p, seed, out)?;
    let outcome = match checkpoint {
        Some(dir) => {
            let model = p.load_model(dir)?;
            p.solve(&model, seed)?
        }
        None => {
            let (model, curve) = p.train(seed, Some(&out.join("train")), false)?;
            report_curve("train", &curve);
            p.solve(&model, seed)?
        }
    };
    write_artifacts(out, &p.cfg.to_toml(), seed, &outcome)?;
    let e = &outcome.best.evaluation;
    println!(
        "solve: utility {:.6} coverage {:.4} sum rate {:.4} feasible {} after {} iterates",
        e.report.utility,
        e.report.coverage,
        e.report.sum_rate,
        e.feasible,
        outcome.trace.len()
    );
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
    }
    Ok(outcome)
}

fn solve(cfg: RunConfig, seed: u64, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let p = pipeline(cfg)?;
    solve_with(&p, seed, out, checkpoint).map(|_| ())
}

/// A fixed beamforming instance: association rows and channel vectors
/// `[k][n][antenna]` as `[re, im]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaInstance {
    pub association: Vec<Vec<u8>>,
    pub channels: Vec<Vec<Vec<Complex64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaResult {
    pub rho: f64,
    pub converged: bool,
    pub iterations: usize,
    pub r_min_used: Option<f64>,
    pub utility: f64,
    pub sum_rate: f64,
    pub resources_ok: bool,
    pub resources: lae_core::ResourceSolution,
}

fn sca(cfg: RunConfig, out: &Path, instance: &Path) -> Result<()> {
    let text = fs::read_to_string(instance).map_err(|e| CliError::Config(format!("{}: {e}", instance.display())))?;
    let inst: ScaInstance =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", instance.display())))?;
    let assoc = Association::from_rows(&inst.association)?;
    let channels = ChannelRealization::from_vectors(inst.channels)?;
    let outcome = run_sca(&assoc, &channels, &cfg.network, &cfg.sca)?;
    let report = match cfg.sca.scheme {
        AccessScheme::Rsma => rate_report(&assoc, &channels, &outcome.solution, &cfg.network)?,
        AccessScheme::Sdma => sdma_rate_report(&assoc, &channels, &outcome.solution, &cfg.network)?,
    };
    let result = ScaResult {
        rho: outcome.rho,
        converged: outcome.converged,
        iterations: outcome.trace.len(),
        r_min_used: outcome.r_min_used,
        utility: report.utility,
        sum_rate: report.sum_rate,
        resources_ok: report.resources_ok(),
        resources: outcome.solution,
    };
    let json = serde_json::to_string_pretty(&result).map_err(|e| CliError::Run(e.to_string()))?;
    write_text(&out.join("sca.json"), &json)?;
    let trace_path = out.join("sca_trace.csv");
    let mut w = create(&trace_path)?;
    write_trace_csv(&outcome.trace, &mut w)?;
    let rates_path = out.join("rates.csv");
    report.write_csv(create(&rates_path)?)?;
    println!("sca: rho {:.6} sum rate {:.6} converged {}", result.rho, result.sum_rate, result.converged);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomRow {
    pub run: usize,
    pub channel_seed: u64,
    pub reward: f64,
    pub utility: f64,
    pub coverage: f64,
    pub sum_rate: f64,
    pub feasible: bool,
    pub xi_a: u8,
    pub xi_m: u8,
    pub xi_c: u8,
    pub xi_r: u8,
}

pub fn random_rows(solved: &[Solved]) -> Vec<RandomRow> {
    solved
        .iter()
        .enumerate()
        .map(|(run, s)| {
            let e = &s.evaluation;
            let [xi_a, xi_m, xi_c, xi_r] = e.audit.indicators();
            RandomRow {
                run,
                channel_seed: s.bundle.channel_seed,
                reward: e.reward,
                utility: e.report.utility,
                coverage: e.report.coverage,
                sum_rate: e.report.sum_rate,
                feasible: e.feasible,
                xi_a,
                xi_m,
                xi_c,
                xi_r,
            }
        })
        .collect()
}

fn baseline(cfg: RunConfig, seed: u64, out: &Path, kind: BaselineKind, runs: usize, links: RandomLinks) -> Result<()> {
    match kind {
        BaselineKind::Random => {
            let p = pipeline(cfg)?;
            write_run_header(&p, seed, out)?;
            let rows = random_rows(&p.random_with(seed, runs, links)?);
            let path = out.join("random.csv");
            let mut w = csv::Writer::from_writer(create(&path)?);
            for row in &rows {
                w.serialize(row).map_err(|e| CliError::Run(e.to_string()))?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
            let n = rows.len().max(1) as f64;
            let mean = rows.iter().map(|r| r.reward).sum::<f64>() / n;
            let feasible = rows.iter().filter(|r| r.feasible).count() as f64 / n;
            println!("random: {} runs, mean reward {mean:.4}, feasible {feasible:.3}", rows.len());
            Ok(())
        }
        BaselineKind::Pg => {
            let p = pipeline(cfg)?;
            write_run_header(&p, seed, out)?;
            let curve = p.direct_pg(seed, Some(out))?;
            report_curve("direct policy gradient", &curve);
            Ok(())
        }
        BaselineKind::Sdma => {
            let mut p = pipeline(cfg)?;
            p.cfg.sca.scheme = AccessScheme::Sdma;
            p.env = sdma(&p.env);
            solve_with(&p, seed, out, None).map(|_| ())
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub path: PathBuf,
    pub labeled_feasible: bool,
    pub feasible: bool,
    pub indicators: [u8; 4],
    pub resources_ok: bool,
    pub utility: f64,
    /// |recomputed - recorded| utility.
    pub utility_gap: f64,
}

/// Re-evaluates a solution file from scratch.
pub fn check_solution(cfg: &RunConfig, path: &Path) -> Result<CheckReport> {
    let env = cfg.environment().map_err(|e| CliError::Config(e.to_string()))?;
    let file = SolutionFile::read(path).map_err(|e| CliError::Config(e.to_string()))?;
    let env = if file.bundle.scheme == AccessScheme::Sdma { sdma(&env) } else { env };
    let e = evaluate_seeded(&file.bundle, &env)?;
    Ok(CheckReport {
        path: path.to_path_buf(),
        labeled_feasible: file.feasible,
        feasible: e.feasible,
        indicators: e.audit.indicators(),
        resources_ok: e.report.resources_ok(),
        utility: e.report.utility,
        utility_gap: (e.report.utility - file.utility).abs(),
    })
}

fn check(cfg: RunConfig, path: &Path) -> Result<()> {
    let report = check_solution(&cfg, path)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?);
    if report.labeled_feasible && !report.feasible {
        return Err(CliError::Run("solution is labeled feasible but fails the audit".into()));
    }
    if !report.feasible {
        return Err(CliError::Run(format!("constraint violations: indicators {:?}", report.indicators)));
    }
    Ok(())
}
