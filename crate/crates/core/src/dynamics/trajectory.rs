use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::kdcore::{distill_loss_with, project, DistillConfig, ProjectorState};
use crate::linalg::{format_g17, Matrix};

use super::probes::{decorrelation, rank_bound_holds, record_spectrum};
use super::update::DynamicsConfig;

/// Per-checkpoint log of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub steps: Vec<usize>,
    pub singular_values: Vec<Vec<f64>>,
    pub loss: Vec<f64>,
    pub decorrelation: Vec<f64>,
    /// Checkpoints at which `rank(zs·Wp) ≤ min(rank zs, rank Wp)` failed.
    #[serde(default)]
    pub rank_bound_violations: usize,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends one checkpoint, keeping steps increasing and spectra aligned.
    pub fn push(&mut self, step: usize, loss: f64, decorrelation: f64, sigma: Vec<f64>) -> Result<()> {
        if self.steps.last().is_some_and(|&s| s >= step) {
            return Err(LabError::Input(format!("trajectory step {step} is not increasing")));
        }
        if self.singular_values.first().is_some_and(|s| s.len() != sigma.len()) {
            return Err(LabError::shape(
                "trajectory spectrum",
                &[self.singular_values[0].len()],
                &[sigma.len()],
            ));
        }
        self.steps.push(step);
        self.loss.push(loss);
        self.decorrelation.push(decorrelation);
        self.singular_values.push(sigma);
        Ok(())
    }

    pub fn csv_header(&self) -> String {
        let k = self.singular_values.first().map_or(0, Vec::len);
        let mut cols = vec!["step".to_string(), "loss".into(), "decorrelation".into()];
        cols.extend((0..k).map(|i| format!("sigma_{i}")));
        cols.join(",")
    }

    /// `step,loss,decorrelation,sigma_0,…,sigma_{k−1}`, values as `%.17g`.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for (i, &step) in self.steps.iter().enumerate() {
            let mut fields = vec![
                step.to_string(),
                format_g17(self.loss[i]),
                format_g17(self.decorrelation[i]),
            ];
            fields.extend(self.singular_values[i].iter().map(|&s| format_g17(s)));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| LabError::Parse("empty trajectory csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["step", "loss", "decorrelation"] {
            return Err(LabError::Parse(format!("unexpected trajectory header {header:?}")));
        }
        let mut rec = TrajectoryRecord::default();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(LabError::Parse(format!("row has {} fields, header {}", f.len(), cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| LabError::Parse(format!("{s:?}: {e}")));
            let step = f[0].parse::<usize>().map_err(|e| LabError::Parse(format!("{:?}: {e}", f[0])))?;
            let sigma = f[3..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            rec.push(step, num(f[1])?, num(f[2])?, sigma)?;
        }
        Ok(rec)
    }
}

#[derive(Clone, Debug)]
pub struct DynamicsRun {
    pub trajectory: TrajectoryRecord,
    pub projector: ProjectorState,
}

/// Trains the projector alone on aligned feature streams (student frozen)
/// with plain weight-decayed gradient steps, logging every `record_every`
/// steps and once more after the last update.
///
/// Spectra are recorded for linear projectors; for MLP projectors the
/// spectrum columns are empty.
pub fn run_dynamics(
    zs_stream: &[Matrix],
    zt_stream: &[Matrix],
    projector: &ProjectorState,
    distill: &DistillConfig,
    cfg: &DynamicsConfig,
) -> Result<DynamicsRun> {
    if zs_stream.is_empty() || zs_stream.len() != zt_stream.len() {
        return Err(LabError::Input(format!(
            "feature streams must be non-empty and aligned ({} vs {})",
            zs_stream.len(),
            zt_stream.len()
        )));
    }
    if !(cfg.learning_rate >= 0.0) || !(cfg.weight_decay >= 0.0) || cfg.steps == 0 || cfg.record_every == 0 {
        return Err(LabError::Input(format!("invalid dynamics config {cfg:?}")));
    }
    let mut p = projector.clone();
    let mut rec = TrajectoryRecord::default();
    let record = |p: &ProjectorState, t: usize, loss: f64, rec: &mut TrajectoryRecord| -> Result<()> {
        let zs = &zs_stream[t % zs_stream.len()];
        let out = project(zs, p)?;
        let corr = decorrelation(zs, &out)?;
        let sigma = if p.is_linear() {
            if !rank_bound_holds(zs, &p.layers()[0])? {
                rec.rank_bound_violations += 1;
            }
            record_spectrum(p)?
        } else {
            Vec::new()
        };
        rec.push(t, loss, corr, sigma)
    };
    for t in 0..=cfg.steps {
        let idx = t % zs_stream.len();
        let out = distill_loss_with(&zs_stream[idx], &zt_stream[idx], &p, distill)?;
        if !out.loss.is_finite() {
            return Err(LabError::Numeric(format!("projector loss is not finite at step {t}")));
        }
        if t % cfg.record_every == 0 || t == cfg.steps {
            record(&p, t, out.loss, &mut rec)?;
        }
        if t == cfg.steps {
            break;
        }
        for (w, g) in p.layers_mut().iter_mut().zip(&out.grad_layers) {
            let mut next = w.scale(1.0 - cfg.weight_decay);
            next.axpy(-cfg.learning_rate, g)?;
            *w = next;
        }
    }
    Ok(DynamicsRun {
        trajectory: rec,
        projector: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{correlations, step};
    use crate::kdcore::{DistanceSpec, NormScheme};
    use crate::linalg::Rng;

    fn frob_none() -> DistillConfig {
        DistillConfig::new(NormScheme::none(), DistanceSpec::frobenius())
    }

    #[test]
    fn push_rejects_disorder() {
        let mut r = TrajectoryRecord::default();
        r.push(0, 1.0, 0.5, vec![1.0, 0.5]).unwrap();
        assert!(r.push(0, 1.0, 0.5, vec![1.0, 0.5]).is_err());
        assert!(r.push(1, 1.0, 0.5, vec![1.0]).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut r = TrajectoryRecord::default();
        r.push(0, 2.5, 0.25, vec![1.0, 0.1]).unwrap();
        r.push(10, 1.0 / 3.0, 0.125, vec![1.0, 0.05]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("step,loss,decorrelation,sigma_0,sigma_1\n"));
        assert_eq!(TrajectoryRecord::from_csv(&csv).unwrap(), r);
    }

    #[test]
    fn frozen_projector_gives_constant_trajectory() {
        let mut rng = Rng::new(1);
        let zs = vec![rng.normal_matrix(16, 3)];
        let zt = vec![rng.normal_matrix(16, 5)];
        let p = ProjectorState::init_linear(3, 5, &mut rng).unwrap();
        let cfg = DynamicsConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            steps: 20,
            record_every: 5,
        };
        let run = run_dynamics(&zs, &zt, &p, &frob_none(), &cfg).unwrap();
        assert_eq!(run.trajectory.steps, vec![0, 5, 10, 15, 20]);
        assert!(run.trajectory.loss.windows(2).all(|w| w[0] == w[1]));
        assert!(run.trajectory.singular_values.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(run.projector, p);
    }

    #[test]
    fn projector_training_follows_the_update_rule() {
        let mut rng = Rng::new(2);
        let zs = rng.normal_matrix(12, 3);
        let zt = rng.normal_matrix(12, 4);
        let p = ProjectorState::linear(rng.normal_matrix(3, 4));
        let cfg = DynamicsConfig {
            learning_rate: 0.01,
            weight_decay: 0.001,
            steps: 3,
            record_every: 1,
        };
        let run = run_dynamics(std::slice::from_ref(&zs), std::slice::from_ref(&zt), &p, &frob_none(), &cfg).unwrap();
        let c = correlations(&zs, &zt).unwrap();
        let mut w = p.layers()[0].clone();
        for _ in 0..3 {
            w = step(&w, &c, &cfg).unwrap();
        }
        assert!(run.projector.layers()[0].sub(&w).unwrap().max_abs() < 1e-12);
    }
}
