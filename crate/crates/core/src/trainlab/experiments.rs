//! Seeded experiment drivers. Each one fans `(seed, arm)` runs out to the
//! rayon pool, collects them back in seed order and summarizes the
//! qualitative statistics.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{LabError, Result};
use crate::kdcore::{DistanceSpec, DistillConfig, NormScheme, ProjectorSpec};

use super::equivariant::{teacher_equivariance, train_tokens, TokenSpec};
use super::train::{train, ExperimentSpec, RunResult};

/// Normalized singular values below this count as collapsed.
pub const SHRINK_THRESHOLD: f64 = 0.1;
/// Fraction of seeds a qualitative claim must hold in.
pub const MAJORITY: usize = 8;

const DIMENSIONS_NOTE: &str =
    "all synthetic task dimensions, step counts and rates are choices of this lab, not taken from any benchmark setup";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Fig2,
    Fig3,
    Logsum,
    BatchSize,
    Equivariance,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::Fig2,
        ExperimentId::Fig3,
        ExperimentId::Logsum,
        ExperimentId::BatchSize,
        ExperimentId::Equivariance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentId::Fig2 => "fig2",
            ExperimentId::Fig3 => "fig3",
            ExperimentId::Logsum => "logsum",
            ExperimentId::BatchSize => "batch_size",
            ExperimentId::Equivariance => "equivariance",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = ExperimentId::ALL.iter().map(|i| i.name()).collect();
                LabError::Input(format!("unknown experiment {s:?}; expected one of {known:?}"))
            })
    }
}

#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: String,
    pub result: RunResult,
}

#[derive(Clone, Debug)]
pub struct SeedRuns {
    pub seed: u64,
    pub arms: Vec<ArmRun>,
}

impl SeedRuns {
    pub fn arm(&self, name: &str) -> &RunResult {
        &self
            .arms
            .iter()
            .find(|a| a.arm == name)
            .unwrap_or_else(|| panic!("arm {name} missing"))
            .result
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub id: ExperimentId,
    pub runs: Vec<SeedRuns>,
    /// Contents of `summary.json`.
    pub summary: Value,
}

impl ExperimentReport {
    /// `pass` entry of the summary; `None` for exploratory experiments.
    pub fn passed(&self) -> Option<bool> {
        self.summary.get("pass").and_then(Value::as_bool)
    }

    /// Writes `runs/<experiment>/<seed>/<arm>.csv` and
    /// `runs/<experiment>/summary.json` under `out`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let root = out.join("runs").join(self.id.name());
        let mut written = Vec::new();
        for s in &self.runs {
            let dir = root.join(s.seed.to_string());
            fs::create_dir_all(&dir)?;
            for a in &s.arms {
                let path = dir.join(format!("{}.csv", a.arm));
                fs::write(&path, a.result.trajectory.to_csv())?;
                written.push(path);
            }
        }
        let path = root.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary)
            .map_err(|e| LabError::Parse(format!("summary serialization: {e}")))?;
        fs::write(&path, text + "\n")?;
        written.push(path);
        Ok(written)
    }
}

/// Runs every `(seed, arm)` pair on the current rayon pool and regroups the
/// results by seed, arms in the given order.
fn run_grid<F>(seeds: &[u64], arms: &[String], run: F) -> Result<Vec<SeedRuns>>
where
    F: Fn(u64, usize) -> Result<RunResult> + Sync,
{
    let pairs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..arms.len()).map(move |a| (s, a)))
        .collect();
    let results = pairs
        .par_iter()
        .map(|&(s, a)| run(seeds[s], a))
        .collect::<Result<Vec<_>>>()?;
    let mut it = results.into_iter();
    Ok(seeds
        .iter()
        .map(|&seed| SeedRuns {
            seed,
            arms: arms
                .iter()
                .map(|arm| ArmRun {
                    arm: arm.clone(),
                    result: it.next().expect("one result per pair"),
                })
                .collect(),
        })
        .collect())
}

fn require_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(LabError::Precondition(format!(
            "experiment needs at least {min} seeds, got {}",
            seeds.len()
        )));
    }
    Ok(())
}

fn echo<T: Serialize>(cfg: &T) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn shrink_count(spectrum: &[f64]) -> usize {
    spectrum.iter().filter(|&&s| s < SHRINK_THRESHOLD).count()
}

fn total_rank_violations(runs: &[SeedRuns]) -> usize {
    runs.iter()
        .flat_map(|s| &s.arms)
        .map(|a| a.result.trajectory.rank_bound_violations)
        .sum()
}

// ---------------------------------------------------------------- fig2

/// Projector spectra under three normalizations, everything else fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Config {
    pub spec: ExperimentSpec,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Fig2Config {
            spec: ExperimentSpec {
                weight_decay: 0.005,
                distill_weight: 1.0 / 128.0,
                ..Default::default()
            },
        }
    }
}

pub const FIG2_ARMS: [&str; 3] = ["none", "l2_row", "batch"];

pub fn experiment_fig2(cfg: &Fig2Config) -> Result<ExperimentReport> {
    let base = &cfg.spec;
    require_seeds(&base.seeds, 10)?;
    if base.projector != ProjectorSpec::Linear {
        return Err(LabError::Input("fig2 tracks spectra and needs a linear projector".into()));
    }
    let norms = [NormScheme::none(), NormScheme::l2_row(), NormScheme::batch()];
    let arms: Vec<String> = FIG2_ARMS.iter().map(|s| s.to_string()).collect();
    let runs = run_grid(&base.seeds, &arms, |seed, a| {
        let spec = ExperimentSpec {
            distill: DistillConfig {
                norm: norms[a],
                ..base.distill
            },
            ..base.clone()
        };
        train(&spec, seed)
    })?;

    let mut per_seed = Vec::new();
    let (mut ge, mut gt, mut positive) = (0, 0, 0);
    for s in &runs {
        let counts: Vec<usize> = FIG2_ARMS.iter().map(|a| shrink_count(s.arm(a).final_spectrum())).collect();
        let batch_min = s.arm("batch").final_spectrum().last().copied().unwrap_or(0.0);
        ge += usize::from(counts[0] >= counts[2]);
        gt += usize::from(counts[0] > counts[2]);
        positive += usize::from(batch_min > 0.0);
        per_seed.push(json!({
            "seed": s.seed,
            "shrinkage": {"none": counts[0], "l2_row": counts[1], "batch": counts[2]},
            "batch_sigma_min": batch_min,
            "final_accuracy": {
                "none": s.arm("none").final_accuracy,
                "l2_row": s.arm("l2_row").final_accuracy,
                "batch": s.arm("batch").final_accuracy,
            },
        }));
    }
    let pass = ge >= MAJORITY && gt >= 5;
    let summary = json!({
        "experiment": "fig2",
        "config": echo(cfg),
        "note": DIMENSIONS_NOTE,
        "shrink_threshold": SHRINK_THRESHOLD,
        "per_seed": per_seed,
        "statistics": {
            "seeds": runs.len(),
            "none_ge_batch": ge,
            "none_gt_batch": gt,
            "batch_sigma_min_positive": positive,
            "rank_bound_violations": total_rank_violations(&runs),
        },
        "pass": pass,
    });
    Ok(ExperimentReport {
        id: ExperimentId::Fig2,
        runs,
        summary,
    })
}

// ---------------------------------------------------------------- fig3

/// Input/output decorrelation for linear, 2-layer and 3-layer projectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig3Config {
    pub spec: ExperimentSpec,
    pub hidden_width: usize,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Fig3Config {
            spec: Fig2Config::default().spec,
            hidden_width: 128,
        }
    }
}

pub const FIG3_ARMS: [&str; 3] = ["linear", "mlp2", "mlp3"];

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

pub fn experiment_fig3(cfg: &Fig3Config) -> Result<ExperimentReport> {
    let base = &cfg.spec;
    require_seeds(&base.seeds, 10)?;
    let projectors = [
        ProjectorSpec::Linear,
        ProjectorSpec::Mlp {
            depth: 2,
            hidden_width: cfg.hidden_width,
        },
        ProjectorSpec::Mlp {
            depth: 3,
            hidden_width: cfg.hidden_width,
        },
    ];
    let arms: Vec<String> = FIG3_ARMS.iter().map(|s| s.to_string()).collect();
    let runs = run_grid(&base.seeds, &arms, |seed, a| {
        let spec = ExperimentSpec {
            projector: projectors[a],
            ..base.clone()
        };
        train(&spec, seed)
    })?;

    let mut per_seed = Vec::new();
    let mut wins = 0;
    let mut linear_step0_positive = 0;
    for s in &runs {
        let finals: Vec<f64> = FIG3_ARMS.iter().map(|a| s.arm(a).final_decorrelation()).collect();
        wins += usize::from(finals[0] > finals[2]);
        linear_step0_positive += usize::from(s.arm("linear").trajectory.decorrelation[0] > 0.0);
        per_seed.push(json!({
            "seed": s.seed,
            "final_decorrelation": {"linear": finals[0], "mlp2": finals[1], "mlp3": finals[2]},
        }));
    }
    // median seed by final MLP-3 decorrelation
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| {
        runs[a]
            .arm("mlp3")
            .final_decorrelation()
            .total_cmp(&runs[b].arm("mlp3").final_decorrelation())
    });
    let median_seed = &runs[order[(order.len() - 1) / 2]];
    let median_curve = &median_seed.arm("mlp3").trajectory.decorrelation;
    let summary = json!({
        "experiment": "fig3",
        "config": echo(cfg),
        "note": DIMENSIONS_NOTE,
        "per_seed": per_seed,
        "statistics": {
            "seeds": runs.len(),
            "linear_gt_mlp3": wins,
            "linear_step0_positive": linear_step0_positive,
            "median_seed": median_seed.seed,
            "median_mlp3_non_increasing": non_increasing(median_curve),
            "median_mlp3_first_to_last": [median_curve.first(), median_curve.last()],
            "rank_bound_violations": total_rank_violations(&runs),
        },
        "pass": wins >= MAJORITY,
    });
    Ok(ExperimentReport {
        id: ExperimentId::Fig3,
        runs,
        summary,
    })
}

// ---------------------------------------------------------------- logsum

/// Frobenius against LogSum(α) on a large and a small capacity gap.
/// Exploratory: the summary records the direction without a verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogsumConfig {
    pub spec: ExperimentSpec,
    /// `(ds, dt)` of the large-gap task.
    pub large_gap: (usize, usize),
    /// `(ds, dt)` of the small-gap task.
    pub small_gap: (usize, usize),
    pub alphas: Vec<f64>,
    /// Distillation weight per sample for the Frobenius arm (divided by B).
    pub frobenius_weight: f64,
    /// Distillation weight for the LogSum arms.
    pub logsum_weight: f64,
}

impl Default for LogsumConfig {
    fn default() -> Self {
        LogsumConfig {
            spec: ExperimentSpec {
                steps: 300,
                record_every: 50,
                train_size: Some(4096),
                ..Default::default()
            },
            large_gap: (8, 128),
            small_gap: (64, 128),
            alphas: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            frobenius_weight: 1.0,
            logsum_weight: 1.0,
        }
    }
}

fn alpha_label(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{}", a as i64)
    } else {
        format!("{a}").replace('.', "p")
    }
}

pub fn experiment_logsum(cfg: &LogsumConfig) -> Result<ExperimentReport> {
    let base = &cfg.spec;
    require_seeds(&base.seeds, 10)?;
    let mut distances = vec![("frobenius".to_string(), DistanceSpec::frobenius())];
    for &a in &cfg.alphas {
        distances.push((format!("logsum{}", alpha_label(a)), DistanceSpec::logsum(a)));
    }
    let tasks = [("large_gap", cfg.large_gap), ("small_gap", cfg.small_gap)];
    let mut arms = Vec::new();
    let mut specs = Vec::new();
    for (task, (ds, dt)) in tasks {
        for (name, d) in &distances {
            arms.push(format!("{task}_{name}"));
            let weight = if name == "frobenius" {
                cfg.frobenius_weight / base.batch_size as f64
            } else {
                cfg.logsum_weight
            };
            specs.push(ExperimentSpec {
                student_dim: ds,
                teacher_dim: dt,
                distill: DistillConfig {
                    distance: *d,
                    ..base.distill
                },
                distill_weight: weight,
                ..base.clone()
            });
        }
    }
    let runs = run_grid(&base.seeds, &arms, |seed, a| train(&specs[a], seed))?;

    let mut per_arm = serde_json::Map::new();
    for arm in &arms {
        let acc: Vec<f64> = runs.iter().map(|s| s.arm(arm).final_accuracy).collect();
        let dl: Vec<f64> = runs.iter().map(|s| s.arm(arm).final_distill_loss).collect();
        per_arm.insert(
            arm.clone(),
            json!({
                "mean_accuracy": acc.iter().sum::<f64>() / acc.len() as f64,
                "accuracy": acc,
                "final_distill_loss": dl,
            }),
        );
    }
    let mean_acc = |arm: &str| -> Option<f64> { per_arm.get(arm)?.get("mean_accuracy")?.as_f64() };
    let frob = mean_acc("large_gap_frobenius").unwrap_or(f64::NAN);
    let best_45 = cfg
        .alphas
        .iter()
        .filter(|a| (4.0..=5.0).contains(*a))
        .filter_map(|&a| mean_acc(&format!("large_gap_logsum{}", alpha_label(a))))
        .fold(f64::NEG_INFINITY, f64::max);
    let seeds_beating = runs
        .iter()
        .filter(|s| {
            let f = s.arm("large_gap_frobenius").final_accuracy;
            cfg.alphas
                .iter()
                .filter(|a| (4.0..=5.0).contains(*a))
                .any(|&a| s.arm(&format!("large_gap_logsum{}", alpha_label(a))).final_accuracy > f)
        })
        .count();
    let summary = json!({
        "experiment": "logsum",
        "config": echo(cfg),
        "note": DIMENSIONS_NOTE,
        "exploratory": true,
        "arms": per_arm,
        "statistics": {
            "seeds": runs.len(),
            "large_gap_frobenius_mean_accuracy": frob,
            "large_gap_best_logsum_4_5_mean_accuracy": best_45,
            "logsum_4_5_beats_frobenius_large_gap": best_45 > frob,
            "seeds_where_logsum_4_5_beats_frobenius": seeds_beating,
            "rank_bound_violations": total_rank_violations(&runs),
        },
    });
    Ok(ExperimentReport {
        id: ExperimentId::Logsum,
        runs,
        summary,
    })
}

// ---------------------------------------------------------------- batch size

/// Accuracy of the batch-norm recipe across batch sizes, next to a
/// task-only baseline at the reference batch size.
///
/// The distillation term sums over the batch, so its weight is
/// `per_sample_weight / B` to keep the per-sample balance with the
/// (batch-averaged) task loss fixed across arms. All arms take the same
/// number of steps over the same sample sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSizeConfig {
    pub spec: ExperimentSpec,
    pub batch_sizes: Vec<usize>,
    pub reference_batch: usize,
    pub per_sample_weight: f64,
}

impl Default for BatchSizeConfig {
    fn default() -> Self {
        BatchSizeConfig {
            spec: ExperimentSpec {
                input_dim: 16,
                student_dim: 64,
                teacher_dim: 64,
                teacher_hidden: vec![],
                train_size: Some(256),
                test_size: 2048,
                record_every: 100,
                ..Default::default()
            },
            batch_sizes: vec![16, 32, 64, 128, 256],
            reference_batch: 128,
            per_sample_weight: 1.0,
        }
    }
}

pub fn experiment_batch_size(cfg: &BatchSizeConfig) -> Result<ExperimentReport> {
    let base = &cfg.spec;
    require_seeds(&base.seeds, 10)?;
    if cfg.batch_sizes.is_empty() {
        return Err(LabError::Input("no batch sizes given".into()));
    }
    if let Some(&b) = cfg.batch_sizes.iter().chain([&cfg.reference_batch]).find(|&&b| b < 2) {
        return Err(LabError::Precondition(format!("batch size must be at least 2, got {b}")));
    }
    let mut arms = vec![format!("task_only_b{}", cfg.reference_batch)];
    let mut specs = vec![ExperimentSpec {
        batch_size: cfg.reference_batch,
        distill_weight: 0.0,
        ..base.clone()
    }];
    for &b in &cfg.batch_sizes {
        arms.push(format!("distill_b{b}"));
        specs.push(ExperimentSpec {
            batch_size: b,
            distill_weight: cfg.per_sample_weight / b as f64,
            ..base.clone()
        });
    }
    let runs = run_grid(&base.seeds, &arms, |seed, a| train(&specs[a], seed))?;

    let reference = format!("distill_b{}", cfg.reference_batch);
    let has_reference = cfg.batch_sizes.contains(&cfg.reference_batch);
    let mut per_seed = Vec::new();
    let mut robust = 0;
    for s in &runs {
        let acc: Vec<f64> = arms[1..].iter().map(|a| s.arm(a).final_accuracy).collect();
        let spread = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - acc.iter().copied().fold(f64::INFINITY, f64::min);
        let distilled = if has_reference {
            s.arm(&reference).final_accuracy
        } else {
            acc.iter().sum::<f64>() / acc.len() as f64
        };
        let gap = distilled - s.arm(&arms[0]).final_accuracy;
        robust += usize::from(spread < gap);
        per_seed.push(json!({
            "seed": s.seed,
            "accuracy": arms.iter().map(|a| (a.clone(), json!(s.arm(a).final_accuracy))).collect::<serde_json::Map<_, _>>(),
            "spread": spread,
            "gap": gap,
        }));
    }
    let summary = json!({
        "experiment": "batch_size",
        "config": echo(cfg),
        "note": DIMENSIONS_NOTE,
        "per_seed": per_seed,
        "statistics": {
            "seeds": runs.len(),
            "spread_below_gap": robust,
            "rank_bound_violations": total_rank_violations(&runs),
        },
        "pass": robust >= MAJORITY,
    });
    Ok(ExperimentReport {
        id: ExperimentId::BatchSize,
        runs,
        summary,
    })
}

// ---------------------------------------------------------------- equivariance

/// Task-only against distilled attention students on a conv-mixer teacher.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivarianceConfig {
    pub spec: TokenSpec,
}

pub const EQUIVARIANCE_ARMS: [&str; 2] = ["task_only", "distilled"];

pub fn experiment_equivariance(cfg: &EquivarianceConfig) -> Result<ExperimentReport> {
    let spec = &cfg.spec;
    require_seeds(&spec.seeds, 10)?;
    let arms: Vec<String> = EQUIVARIANCE_ARMS.iter().map(|s| s.to_string()).collect();
    let runs = run_grid(&spec.seeds, &arms, |seed, a| {
        train_tokens(spec, seed, if a == 0 { 0.0 } else { spec.distill_weight })
    })?;

    let mut per_seed = Vec::new();
    let mut lower = 0;
    let mut teacher_max = 0.0_f64;
    let (mut sum_task, mut sum_dist) = (0.0, 0.0);
    for s in &runs {
        let teacher = teacher_equivariance(spec, s.seed)?;
        teacher_max = teacher_max.max(teacher.mean);
        let mu = |arm: &str| s.arm(arm).equivariance.clone().expect("token runs carry a report");
        let (t, d) = (mu("task_only"), mu("distilled"));
        lower += usize::from(d.mean < t.mean);
        sum_task += t.mean;
        sum_dist += d.mean;
        per_seed.push(json!({
            "seed": s.seed,
            "teacher": teacher,
            "task_only": t,
            "distilled": d,
            "final_accuracy": {
                "task_only": s.arm("task_only").final_accuracy,
                "distilled": s.arm("distilled").final_accuracy,
            },
        }));
    }
    let n = runs.len() as f64;
    let summary = json!({
        "experiment": "equivariance",
        "config": echo(cfg),
        "note": DIMENSIONS_NOTE,
        "per_seed": per_seed,
        "statistics": {
            "seeds": runs.len(),
            "distilled_lower": lower,
            "teacher_max_mu": teacher_max,
            "mean_mu_task_only": sum_task / n,
            "mean_mu_distilled": sum_dist / n,
            "ratio_task_only_over_distilled": sum_task / sum_dist,
            "rank_bound_violations": total_rank_violations(&runs),
        },
        "pass": lower >= MAJORITY && teacher_max <= 1e-12,
    });
    Ok(ExperimentReport {
        id: ExperimentId::Equivariance,
        runs,
        summary,
    })
}

/// Median helper exposed for reports.
pub fn median_of(values: &[f64]) -> f64 {
    median(values.to_vec())
}
