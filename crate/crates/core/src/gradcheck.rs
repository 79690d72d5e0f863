//! Central finite-difference checks for every analytic gradient in the lab.
//!
//! Errors are measured norm-wise: `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{projector_velocity, CorrelationPair};
use crate::error::Result;
use crate::kdcore::{
    distance, distance_grad, distill_loss_with, normalize, normalize_vjp, task_loss, DistanceSpec,
    DistillConfig, NormPlacement, NormScheme, ProjectorState,
};
use crate::linalg::{Matrix, Rng};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 20;

/// `∂f/∂x` by central differences with step `h`.
pub fn central_difference(
    x: &Matrix,
    h: f64,
    mut f: impl FnMut(&Matrix) -> Result<f64>,
) -> Result<Matrix> {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = x.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[k] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        grad.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub instances: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tolerance: DEFAULT_TOLERANCE,
            instances: DEFAULT_INSTANCES,
            step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Alphas exercised for the logsum distance.
pub const LOGSUM_ALPHAS: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 4.7, 5.0];

type Check = Box<dyn Fn(&mut Rng, f64) -> Result<f64>>;

fn components() -> Vec<(String, Check)> {
    let mut out: Vec<(String, Check)> = Vec::new();

    for scheme in [NormScheme::none(), NormScheme::l2_row(), NormScheme::batch(), NormScheme::group(4)] {
        out.push((
            format!("normalize_vjp/{}", scheme.name()),
            Box::new(move |rng, h| {
                let z = rng.normal_matrix(8, 8).map(|x| 1.5 * x + 0.3);
                let up = rng.normal_matrix(8, 8);
                let analytic = normalize_vjp(&z, &scheme, &up)?;
                let numeric = central_difference(&z, h, |zz| Ok(inner(&normalize(zz, &scheme)?, &up)))?;
                Ok(relative_error(&analytic, &numeric))
            }),
        ));
    }

    let mut distances = vec![DistanceSpec::frobenius()];
    distances.extend(LOGSUM_ALPHAS.iter().map(|&a| DistanceSpec::logsum(a)));
    distances.push(DistanceSpec::logsumexp(1.0));
    for spec in distances {
        out.push((
            format!("distance_grad/{}", spec.name()),
            Box::new(move |rng, h| {
                let a = rng.normal_matrix(6, 6);
                let b = rng.normal_matrix(6, 6);
                let analytic = distance_grad(&a, &b, &spec)?;
                let numeric = central_difference(&a, h, |aa| distance(aa, &b, &spec))?;
                Ok(relative_error(&analytic, &numeric))
            }),
        ));
    }

    for depth in [1usize, 3] {
        let name = if depth == 1 { "linear".to_string() } else { format!("mlp{depth}") };
        out.push((
            format!("project/{name}"),
            Box::new(move |rng, h| {
                let p = random_projector(rng, depth, 4, 6, 5)?;
                let zs = rng.normal_matrix(5, 4);
                let up = rng.normal_matrix(5, 5);
                let trace = p.forward(&zs)?;
                let (g_in, g_layers) = p.backward(&trace, &up)?;
                let mut worst = relative_error(
                    &g_in,
                    &central_difference(&zs, h, |z| Ok(inner(&p.forward(z)?.output, &up)))?,
                );
                for (k, g) in g_layers.iter().enumerate() {
                    let numeric = central_difference(&p.layers()[k], h, |w| {
                        let mut q = p.clone();
                        q.layers_mut()[k] = w.clone();
                        Ok(inner(&q.forward(&zs)?.output, &up))
                    })?;
                    worst = worst.max(relative_error(g, &numeric));
                }
                Ok(worst)
            }),
        ));
    }

    out.push((
        "task_loss".into(),
        Box::new(|rng, h| {
            let logits = rng.normal_matrix(4, 3).scale(2.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
            let analytic = task_loss(&logits, &labels)?.grad;
            let numeric = central_difference(&logits, h, |l| Ok(task_loss(l, &labels)?.loss))?;
            Ok(relative_error(&analytic, &numeric))
        }),
    ));

    let configs: Vec<(usize, NormScheme, DistanceSpec, NormPlacement)> = vec![
        (1, NormScheme::none(), DistanceSpec::frobenius(), NormPlacement::Joint),
        (1, NormScheme::batch(), DistanceSpec::logsum(4.0), NormPlacement::Joint),
        (1, NormScheme::l2_row(), DistanceSpec::logsumexp(0.5), NormPlacement::Joint),
        (1, NormScheme::group(2), DistanceSpec::logsum(4.7), NormPlacement::Joint),
        (3, NormScheme::batch(), DistanceSpec::logsum(2.0), NormPlacement::Joint),
        (1, NormScheme::batch(), DistanceSpec::frobenius(), NormPlacement::TeacherOnly),
        (2, NormScheme::l2_row(), DistanceSpec::logsum(5.0), NormPlacement::PreProjection),
    ];
    for (depth, norm, spec, placement) in configs {
        let cfg = DistillConfig {
            norm,
            distance: spec,
            placement,
        };
        let arch = if depth == 1 { "linear".to_string() } else { format!("mlp{depth}") };
        let placement_name = match placement {
            NormPlacement::Joint => "joint",
            NormPlacement::TeacherOnly => "teacher_only",
            NormPlacement::PreProjection => "pre_projection",
        };
        out.push((
            format!("distill_loss/{arch}+{}+{}+{placement_name}", norm.name(), spec.name()),
            Box::new(move |rng, h| {
                let p = random_projector(rng, depth, 4, 6, 6)?;
                let zs = rng.normal_matrix(8, 4);
                let zt = rng.normal_matrix(8, 6);
                let out = distill_loss_with(&zs, &zt, &p, &cfg)?;
                let mut worst = relative_error(
                    &out.grad_zs,
                    &central_difference(&zs, h, |z| Ok(distill_loss_with(z, &zt, &p, &cfg)?.loss))?,
                );
                for (k, g) in out.grad_layers.iter().enumerate() {
                    let numeric = central_difference(&p.layers()[k], h, |w| {
                        let mut q = p.clone();
                        q.layers_mut()[k] = w.clone();
                        Ok(distill_loss_with(&zs, &zt, &q, &cfg)?.loss)
                    })?;
                    worst = worst.max(relative_error(g, &numeric));
                }
                Ok(worst)
            }),
        ));
    }

    out.push((
        "projector_velocity".into(),
        Box::new(|rng, h| {
            let zs = rng.normal_matrix(10, 4);
            let zt = rng.normal_matrix(10, 6);
            let w = rng.normal_matrix(4, 6);
            let velocity = projector_velocity(&CorrelationPair::from_features(&zs, &zt)?, &w)?;
            let numeric = central_difference(&w, h, |ww| {
                Ok(0.5 * zs.matmul(ww)?.sub(&zt)?.frobenius_norm_sq())
            })?;
            Ok(relative_error(&velocity, &numeric.scale(-1.0)))
        }),
    ));

    out
}

fn random_projector(rng: &mut Rng, depth: usize, input: usize, hidden: usize, output: usize) -> Result<ProjectorState> {
    if depth == 1 {
        Ok(ProjectorState::linear(rng.normal_matrix(input, output)))
    } else {
        ProjectorState::init_mlp(input, hidden, depth, output, rng)
    }
}

/// Runs every component on `cfg.instances` seeded instances.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<ComponentReport>> {
    let mut reports = Vec::new();
    for (idx, (name, check)) in components().into_iter().enumerate() {
        let mut rng = Rng::with_stream(cfg.seed, idx as u64);
        let mut worst = 0.0_f64;
        for _ in 0..cfg.instances {
            let e = check(&mut rng, cfg.step)?;
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        reports.push(ComponentReport {
            component: name,
            instances: cfg.instances,
            max_rel_error: worst,
            passed: worst <= cfg.tolerance,
        });
    }
    Ok(reports)
}
