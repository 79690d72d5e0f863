//! Subcommand drivers. Each loads its JSON config, runs on the rayon pool
//! and writes every artifact from the calling thread afterwards.

use std::fs;
use std::path::{Path, PathBuf};

use kdlab::dynamics::{
    correlations, ema_equivalence, low_rank_gap, rank_bound_holds, run_dynamics, whiten, DynamicsConfig,
    LowRankConfig, TrajectoryRecord, RANK_TOL,
};
use kdlab::equivariance::{
    mu_t_suite, unit_shifts, ConvMixer, IdentityMap, PositionalAttention, TokenBatch, TokenMap, TokenMlp,
    Translation,
};
use kdlab::error::LabError;
use kdlab::gradcheck::{run_suite, GradcheckConfig};
use kdlab::kdcore::{DistanceSpec, DistillConfig, NormScheme, ProjectorSpec};
use kdlab::linalg::{numerical_rank, Matrix, Rng};
use kdlab::trainlab::{
    experiment_batch_size, experiment_equivariance, experiment_fig2, experiment_fig3, experiment_logsum,
    BatchSizeConfig, EquivarianceConfig, ExperimentId, ExperimentReport, Fig2Config, Fig3Config, LogsumConfig,
};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::plot::{line_chart, Series};

/// Why a command did not succeed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation, unreadable or invalid config, unwritable output.
    Usage(String),
    /// The command ran and a check it performs did not hold.
    Check(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Numeric(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

pub type Outcome = Result<(), Failure>;

pub struct Globals {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub plot: bool,
}

/// Reads a JSON config, or the defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("malformed config {}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
    write(path, text + "\n")
}

/// Seeds `n, n+1, …` with the same count as `seeds`.
fn reseed(seeds: &mut Vec<u64>, start: Option<u64>) {
    if let Some(n) = start {
        *seeds = (0..seeds.len() as u64).map(|i| n + i).collect();
    }
}

fn trajectory_plots(dir: &Path, name: &str, runs: &[(&str, &TrajectoryRecord)]) -> Result<(), Failure> {
    let loss: Vec<Series> = runs.iter().map(|(l, r)| Series::new(*l, &r.steps, &r.loss)).collect();
    write(&dir.join("loss.svg"), line_chart(&format!("{name}: loss"), "step", "loss", &loss))?;
    let corr: Vec<Series> = runs
        .iter()
        .map(|(l, r)| Series::new(*l, &r.steps, &r.decorrelation))
        .collect();
    write(
        &dir.join("decorrelation.svg"),
        line_chart(&format!("{name}: input-output correlation"), "step", "decorrelation", &corr),
    )?;
    for (label, r) in runs {
        let k = r.singular_values.first().map_or(0, Vec::len);
        if k == 0 {
            continue;
        }
        let fan: Vec<Series> = (0..k)
            .map(|i| {
                let ys: Vec<f64> = r.singular_values.iter().map(|s| s[i]).collect();
                Series::new(format!("sigma_{i}"), &r.steps, &ys)
            })
            .collect();
        let file = if runs.len() == 1 {
            "spectrum.svg".to_string()
        } else {
            format!("spectrum_{label}.svg")
        };
        write(
            &dir.join(file),
            line_chart(&format!("{name}: normalized singular values ({label})"), "step", "sigma / sigma_max", &fan),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

pub fn gradcheck(g: &Globals) -> Outcome {
    let mut cfg: GradcheckConfig = load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if !(cfg.step > 0.0) || cfg.instances == 0 {
        return Err(Failure::Usage(format!("invalid gradcheck config {cfg:?}")));
    }
    let reports = run_suite(&cfg)?;
    for r in &reports {
        println!(
            "{:<4} {:<64} {:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            r.component,
            r.max_rel_error
        );
    }
    write_json(&g.out.join("gradcheck").join("report.json"), &json!({"config": cfg, "components": reports}))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.component.as_str()).collect();
    if failed.is_empty() {
        println!("{} components within {:e}", reports.len(), cfg.tolerance);
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check exceeded tolerance {:e} in: {}",
            cfg.tolerance,
            failed.join(", ")
        )))
    }
}

// ---------------------------------------------------------------- dynamics

/// Projector-only training on synthetic aligned feature streams.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsCommand {
    pub samples: usize,
    pub student_dim: usize,
    pub teacher_dim: usize,
    /// Distinct batches, cycled through during training.
    pub batches: usize,
    /// Whiten each student batch so its self-correlation is the identity.
    pub whiten: bool,
    /// Teacher features are `zs·A + noise·N` for a random `A`.
    pub noise: f64,
    pub projector: ProjectorSpec,
    pub distill: DistillConfig,
    pub dynamics: DynamicsConfig,
    pub seed: u64,
    /// Largest allowed gap between the simulated whitened update and the
    /// moving-average recurrence.
    pub ema_tolerance: f64,
}

impl Default for DynamicsCommand {
    fn default() -> Self {
        DynamicsCommand {
            samples: 64,
            student_dim: 8,
            teacher_dim: 12,
            batches: 4,
            whiten: true,
            noise: 0.1,
            projector: ProjectorSpec::Linear,
            distill: DistillConfig::new(NormScheme::none(), DistanceSpec::frobenius()),
            dynamics: DynamicsConfig::new(0.1, 0.0, 200),
            seed: 0,
            ema_tolerance: 1e-12,
        }
    }
}

pub fn dynamics(g: &Globals) -> Outcome {
    let mut cfg: DynamicsCommand = load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.samples < 2 || cfg.student_dim == 0 || cfg.teacher_dim == 0 || cfg.batches == 0 {
        return Err(Failure::Usage(format!(
            "samples must be >= 2 and dims and batches positive: {cfg:?}"
        )));
    }
    cfg.dynamics.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mix = rng.normal_matrix_scaled(cfg.student_dim, cfg.teacher_dim, 1.0 / (cfg.student_dim as f64).sqrt());
    let mut zs_stream = Vec::new();
    let mut zt_stream = Vec::new();
    for _ in 0..cfg.batches {
        let raw = rng.normal_matrix(cfg.samples, cfg.student_dim);
        let zs = if cfg.whiten { whiten(&raw)? } else { raw };
        let mut zt = zs.matmul(&mix)?;
        zt.axpy(cfg.noise, &rng.normal_matrix(cfg.samples, cfg.teacher_dim))?;
        zs_stream.push(zs);
        zt_stream.push(zt);
    }
    let projector = cfg.projector.init(cfg.student_dim, cfg.teacher_dim, &mut rng)?;
    let run = run_dynamics(&zs_stream, &zt_stream, &projector, &cfg.distill, &cfg.dynamics)?;

    let ema = if cfg.whiten {
        let pairs = zs_stream
            .iter()
            .zip(&zt_stream)
            .map(|(zs, zt)| correlations(zs, zt))
            .collect::<kdlab::error::Result<Vec<_>>>()?;
        let stream: Vec<_> = (0..cfg.dynamics.steps).map(|t| pairs[t % pairs.len()].clone()).collect();
        Some(ema_equivalence(&stream, &cfg.dynamics)?.max_abs_diff)
    } else {
        None
    };
    let rec = &run.trajectory;
    let dir = g.out.join("dynamics");
    write(&dir.join("trajectory.csv"), rec.to_csv())?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "config": cfg,
            "checkpoints": rec.len(),
            "final_loss": rec.loss.last(),
            "final_decorrelation": rec.decorrelation.last(),
            "final_spectrum": rec.singular_values.last(),
            "rank_bound_violations": rec.rank_bound_violations,
            "ema_max_abs_diff": ema,
        }),
    )?;
    if g.plot {
        trajectory_plots(&dir, "dynamics", &[("projector", rec)])?;
    }
    println!(
        "{} checkpoints, final loss {:.6e}, rank-bound violations {}",
        rec.len(),
        rec.loss.last().copied().unwrap_or(f64::NAN),
        rec.rank_bound_violations
    );
    if rec.rank_bound_violations > 0 {
        return Err(Failure::Check(format!(
            "rank bound failed at {} checkpoints",
            rec.rank_bound_violations
        )));
    }
    if let Some(d) = ema {
        println!("moving-average gap {d:.3e}");
        if !(d <= cfg.ema_tolerance) {
            return Err(Failure::Check(format!(
                "whitened update departs from the moving average by {d:e} (tolerance {:e})",
                cfg.ema_tolerance
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- experiment

pub fn experiment(g: &Globals, id: &str) -> Outcome {
    let id: ExperimentId = id.parse()?;
    let path = g.config.as_deref();
    let report = match id {
        ExperimentId::Fig2 => {
            let mut c: Fig2Config = load(path)?;
            reseed(&mut c.spec.seeds, g.seed);
            experiment_fig2(&c)?
        }
        ExperimentId::Fig3 => {
            let mut c: Fig3Config = load(path)?;
            reseed(&mut c.spec.seeds, g.seed);
            experiment_fig3(&c)?
        }
        ExperimentId::Logsum => {
            let mut c: LogsumConfig = load(path)?;
            reseed(&mut c.spec.seeds, g.seed);
            experiment_logsum(&c)?
        }
        ExperimentId::BatchSize => {
            let mut c: BatchSizeConfig = load(path)?;
            reseed(&mut c.spec.seeds, g.seed);
            experiment_batch_size(&c)?
        }
        ExperimentId::Equivariance => {
            let mut c: EquivarianceConfig = load(path)?;
            reseed(&mut c.spec.seeds, g.seed);
            experiment_equivariance(&c)?
        }
    };
    report.write(&g.out).map_err(Failure::from)?;
    if g.plot {
        experiment_plots(&g.out, &report)?;
    }
    let stats = &report.summary["statistics"];
    println!("{}", serde_json::to_string_pretty(stats).unwrap_or_default());
    match report.passed() {
        Some(false) => Err(Failure::Check(format!(
            "experiment {} did not reproduce its qualitative claim",
            id.name()
        ))),
        _ => Ok(()),
    }
}

fn experiment_plots(out: &Path, report: &ExperimentReport) -> Outcome {
    let Some(first) = report.runs.first() else {
        return Ok(());
    };
    let dir = out.join("runs").join(report.id.name()).join("plots");
    let runs: Vec<(&str, &TrajectoryRecord)> = first
        .arms
        .iter()
        .map(|a| (a.arm.as_str(), &a.result.trajectory))
        .collect();
    trajectory_plots(&dir, &format!("{} seed {}", report.id.name(), first.seed), &runs)
}

// ---------------------------------------------------------------- equivariance

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapConfig {
    Identity,
    TokenMlp { hidden: usize },
    Attention { bias_std: f64, residual: bool },
    ConvMixer,
}

/// Shape of generated inputs when no token files are given.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomTokens {
    pub batches: usize,
    pub batch: usize,
    pub channels: usize,
    pub prefix: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for RandomTokens {
    fn default() -> Self {
        RandomTokens {
            batches: 4,
            batch: 4,
            channels: 8,
            prefix: kdlab::equivariance::DEFAULT_PREFIX,
            grid_h: kdlab::equivariance::DEFAULT_GRID,
            grid_w: kdlab::equivariance::DEFAULT_GRID,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivarianceCommand {
    /// Token checkpoints; relative paths resolve against the config file.
    pub inputs: Vec<PathBuf>,
    pub random: RandomTokens,
    pub map: MapConfig,
    /// Defaults to the eight circular unit shifts.
    pub translations: Option<Vec<Translation>>,
    pub seed: u64,
    /// Fail when the mean score exceeds this.
    pub max_mu: Option<f64>,
}

impl Default for EquivarianceCommand {
    fn default() -> Self {
        EquivarianceCommand {
            inputs: Vec::new(),
            random: RandomTokens::default(),
            map: MapConfig::Attention {
                bias_std: 1.0,
                residual: true,
            },
            translations: None,
            seed: 0,
            max_mu: None,
        }
    }
}

fn read_tokens(path: &Path) -> Result<TokenBatch, Failure> {
    let mut f = fs::File::open(path)
        .map_err(|e| Failure::Usage(format!("cannot read tokens {}: {e}", path.display())))?;
    TokenBatch::read_binary(&mut std::io::BufReader::new(&mut f))
        .map_err(|e| Failure::Usage(format!("malformed tokens {}: {e}", path.display())))
}

pub fn equivariance(g: &Globals) -> Outcome {
    let mut cfg: EquivarianceCommand = load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let base = g.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(""));
    let xs: Vec<TokenBatch> = if cfg.inputs.is_empty() {
        let r = &cfg.random;
        let mut rng = Rng::with_stream(cfg.seed, 1);
        let n = r.prefix + r.grid_h * r.grid_w;
        (0..r.batches)
            .map(|_| {
                let data = rng.normal_matrix(r.batch, n * r.channels).as_slice().to_vec();
                TokenBatch::new(r.batch, r.channels, r.prefix, r.grid_h, r.grid_w, data)
            })
            .collect::<kdlab::error::Result<_>>()?
    } else {
        cfg.inputs.iter().map(|p| read_tokens(&base.join(p))).collect::<Result<_, _>>()?
    };
    let first = xs.first().ok_or_else(|| Failure::Usage("no token batches to score".into()))?;
    let (c, n) = (first.channels(), first.tokens());
    let mut rng = Rng::with_stream(cfg.seed, 0);
    let phi: Box<dyn TokenMap> = match cfg.map {
        MapConfig::Identity => Box::new(IdentityMap),
        MapConfig::TokenMlp { hidden } => Box::new(TokenMlp::random(c, hidden, &mut rng)),
        MapConfig::Attention { bias_std, residual } => {
            Box::new(PositionalAttention::random(c, n, bias_std, residual, &mut rng))
        }
        MapConfig::ConvMixer => Box::new(ConvMixer::random(c, &mut rng)),
    };
    let translations = cfg.translations.clone().unwrap_or_else(unit_shifts);
    let report = mu_t_suite(phi.as_ref(), &xs, &translations)?;
    write_json(&g.out.join("equivariance").join("report.json"), &report)?;
    println!("{}: mean {:.6e} std {:.6e} over {} pairs", report.phi_id, report.mean, report.std, report.n);
    match cfg.max_mu {
        Some(m) if !(report.mean <= m) => Err(Failure::Check(format!(
            "mean equivariance error {:e} exceeds {m:e}",
            report.mean
        ))),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------- lowrank

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowRankCommand {
    pub samples: usize,
    pub student_dim: usize,
    pub teacher_dim: usize,
    pub ranks: Vec<usize>,
    pub instances: usize,
    pub seed: u64,
    /// Largest allowed relative gap to the truncation optimum.
    pub tolerance: f64,
    pub solver: LowRankConfig,
}

impl Default for LowRankCommand {
    fn default() -> Self {
        LowRankCommand {
            samples: 32,
            student_dim: 8,
            teacher_dim: 12,
            ranks: vec![1, 2, 3],
            instances: 10,
            seed: 0,
            tolerance: 0.01,
            solver: LowRankConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct LowRankRow {
    instance: usize,
    rank: usize,
    constrained_loss: f64,
    oracle_loss: f64,
    relative_gap: f64,
    weight_rank: usize,
    rank_bound_holds: bool,
}

pub fn lowrank(g: &Globals) -> Outcome {
    let mut cfg: LowRankCommand = load(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if cfg.instances == 0 || cfg.ranks.is_empty() {
        return Err(Failure::Usage("need at least one instance and one rank".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.instances)
        .flat_map(|i| cfg.ranks.iter().map(move |&r| (i, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, r)| -> kdlab::error::Result<LowRankRow> {
            let mut rng = Rng::with_stream(cfg.seed, i as u64);
            let zs: Matrix = whiten(&rng.normal_matrix(cfg.samples, cfg.student_dim))?;
            let zt = rng.normal_matrix(cfg.samples, cfg.teacher_dim);
            let gap = low_rank_gap(&zs, &zt, r, &cfg.solver)?;
            Ok(LowRankRow {
                instance: i,
                rank: r,
                constrained_loss: gap.constrained_loss,
                oracle_loss: gap.oracle_loss,
                relative_gap: gap.relative_gap(),
                weight_rank: numerical_rank(&gap.weights, RANK_TOL)?,
                rank_bound_holds: rank_bound_holds(&zs, &gap.weights)?,
            })
        })
        .collect::<kdlab::error::Result<Vec<_>>>()?;
    let worst = rows.iter().map(|r| r.relative_gap).fold(0.0, f64::max);
    let bound_ok = rows.iter().all(|r| r.rank_bound_holds && r.weight_rank <= r.rank);
    write_json(
        &g.out.join("lowrank").join("report.json"),
        &json!({"config": cfg, "max_relative_gap": worst, "rank_bound_holds": bound_ok, "instances": rows}),
    )?;
    println!("{} problems, max relative gap {worst:.3e}, rank bound holds: {bound_ok}", rows.len());
    if !(worst <= cfg.tolerance) {
        return Err(Failure::Check(format!(
            "low-rank optimum misses the truncation oracle by {worst:e} (tolerance {:e})",
            cfg.tolerance
        )));
    }
    if !bound_ok {
        return Err(Failure::Check("rank bound failed".into()));
    }
    Ok(())
}
