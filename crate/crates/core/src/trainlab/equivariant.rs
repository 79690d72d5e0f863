//! Equivariance transfer: a self-attention student with a learnable
//! positional bias, trained against a circular-convolution teacher that is
//! exactly translation equivariant.

use serde::{Deserialize, Serialize};

use crate::dynamics::{decorrelation, rank_bound_holds, record_spectrum, TrajectoryRecord};
use crate::equivariance::{
    mu_t_suite, softmax_rows, unit_shifts, ConvMixer, PositionalAttention, SuiteReport, TokenBatch,
    TokenMap,
};
use crate::error::{LabError, Result};
use crate::kdcore::{
    accuracy, argmax, distill_loss_with, project, task_loss, DistanceSpec, DistillConfig, LossBreakdown,
    NormScheme, ProjectorState,
};
use crate::linalg::{Matrix, Rng};

use super::task::{STREAM_PROJECTOR, STREAM_STUDENT, STREAM_TEACHER, STREAM_TEST, STREAM_TRAIN};
use super::train::{sgd_step, RunResult};

const STREAM_EVAL: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenSpec {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub prefix: usize,
    pub classes: usize,
    /// Scale of the random initial positional bias.
    pub bias_init_std: f64,
    pub distill: DistillConfig,
    pub distill_weight: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub test_size: usize,
    pub record_every: usize,
    /// Held-out token batches used for the equivariance suite.
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for TokenSpec {
    fn default() -> Self {
        TokenSpec {
            channels: 8,
            grid_h: 4,
            grid_w: 4,
            prefix: 2,
            classes: 4,
            bias_init_std: 1.0,
            distill: DistillConfig::new(NormScheme::batch(), DistanceSpec::frobenius()),
            distill_weight: 0.01,
            learning_rate: 0.05,
            steps: 400,
            batch_size: 32,
            test_size: 128,
            record_every: 50,
            eval_batches: 4,
            eval_batch_size: 8,
            seeds: (0..10).collect(),
        }
    }
}

impl TokenSpec {
    pub fn tokens(&self) -> usize {
        self.prefix + self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid_h == 0 || self.grid_w == 0 || self.classes < 2 {
            return Err(LabError::Input("token task needs positive widths and two classes".into()));
        }
        if self.batch_size < 2 || self.test_size < 2 {
            return Err(LabError::Precondition(format!(
                "batch size must be at least 2, got {}",
                self.batch_size.min(self.test_size)
            )));
        }
        if !(self.learning_rate >= 0.0) || !(self.distill_weight >= 0.0) || !(self.bias_init_std >= 0.0) {
            return Err(LabError::Input("rates and scales must be non-negative".into()));
        }
        if self.steps == 0 || self.record_every == 0 || self.eval_batches == 0 || self.eval_batch_size == 0 {
            return Err(LabError::Input("step and evaluation counts must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Input("at least one seed is required".into()));
        }
        self.distill.norm.validate(self.batch_size * self.grid_h * self.grid_w, self.channels)?;
        self.distill.distance.validate()
    }

    fn random_tokens(&self, rng: &mut Rng, batch: usize) -> TokenBatch {
        let n = batch * self.tokens() * self.channels;
        TokenBatch::new(
            batch,
            self.channels,
            self.prefix,
            self.grid_h,
            self.grid_w,
            (0..n).map(|_| rng.normal()).collect(),
        )
        .expect("layout matches spec")
    }
}

/// Token inputs, teacher patch-token features (`B·H·W × C`) and labels.
#[derive(Clone, Debug)]
pub struct TokenSample {
    pub x: TokenBatch,
    pub zt: Matrix,
    pub labels: Vec<usize>,
}

/// Frozen teacher: conv mixer, mean over patch tokens, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTeacher {
    pub mixer: ConvMixer,
    pub head: Matrix,
}

fn pool_patches(y: &TokenBatch) -> Matrix {
    let hw = y.spatial_tokens();
    let rows = y.spatial_rows();
    Matrix::from_fn(y.batch(), y.channels(), |b, c| {
        (0..hw).map(|t| rows[(b * hw + t, c)]).sum::<f64>() / hw as f64
    })
}

impl TokenTeacher {
    pub fn init(spec: &TokenSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::with_stream(seed, STREAM_TEACHER);
        let mixer = ConvMixer::random(spec.channels, &mut rng);
        let mut head = rng.normal_matrix(spec.channels, spec.classes);
        // Drop the mean pooled feature direction so no class dominates.
        let calib = spec.random_tokens(&mut rng, 256);
        let pooled = pool_patches(&mixer.apply(&calib)?);
        let mu: Vec<f64> = (0..spec.channels)
            .map(|c| pooled.column(c).iter().sum::<f64>() / pooled.rows() as f64)
            .collect();
        let nsq: f64 = mu.iter().map(|m| m * m).sum();
        if nsq > 0.0 {
            for k in 0..spec.classes {
                let dot: f64 = (0..spec.channels).map(|c| mu[c] * head[(c, k)]).sum();
                for (c, m) in mu.iter().enumerate() {
                    head[(c, k)] -= dot * m / nsq;
                }
            }
        }
        Ok(TokenTeacher { mixer, head })
    }

    pub fn label(&self, x: TokenBatch) -> Result<TokenSample> {
        let y = self.mixer.apply(&x)?;
        let logits = pool_patches(&y).matmul(&self.head)?;
        Ok(TokenSample {
            zt: y.spatial_rows(),
            labels: (0..x.batch()).map(|b| argmax(logits.row(b))).collect(),
            x,
        })
    }
}

/// Attention block, pooled linear head and a projector on patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStudent {
    pub attention: PositionalAttention,
    pub head: Matrix,
    pub projector: ProjectorState,
}

impl TokenStudent {
    pub fn init(spec: &TokenSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::with_stream(seed, STREAM_STUDENT);
        let attention = PositionalAttention::random(spec.channels, spec.tokens(), spec.bias_init_std, true, &mut rng);
        let head = rng.normal_matrix_scaled(spec.channels, spec.classes, (1.0 / spec.channels as f64).sqrt());
        let projector =
            ProjectorState::init_linear(spec.channels, spec.channels, &mut Rng::with_stream(seed, STREAM_PROJECTOR))?;
        Ok(TokenStudent {
            attention,
            head,
            projector,
        })
    }

    /// `[wq, wk, wv, bias, head, projector…]`
    pub fn params(&self) -> Vec<&Matrix> {
        let a = &self.attention;
        [&a.wq, &a.wk, &a.wv, &a.bias, &self.head]
            .into_iter()
            .chain(self.projector.layers())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let TokenStudent {
            attention,
            head,
            projector,
        } = self;
        let PositionalAttention { wq, wk, wv, bias, .. } = attention;
        [wq, wk, wv, bias, head]
            .into_iter()
            .chain(projector.layers_mut().iter_mut())
            .collect()
    }
}

/// Weight gradients of one attention sample given the output gradient.
/// Returns `[dWq, dWk, dWv, dBias]`.
pub fn attention_backward(att: &PositionalAttention, x: &Matrix, g_out: &Matrix) -> Result<[Matrix; 4]> {
    let c = att.channels();
    let scale = 1.0 / (c as f64).sqrt();
    let q = x.matmul(&att.wq)?;
    let k = x.matmul(&att.wk)?;
    let v = x.matmul(&att.wv)?;
    let a = softmax_rows(&q.matmul_t(&k)?.scale(scale).add(&att.bias)?);
    let gv = a.t_matmul(g_out)?;
    let ga = g_out.matmul_t(&v)?;
    let mut gs = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let dot: f64 = a.row(i).iter().zip(ga.row(i)).map(|(p, g)| p * g).sum();
        for j in 0..a.cols() {
            gs[(i, j)] = a[(i, j)] * (ga[(i, j)] - dot);
        }
    }
    let gq = gs.matmul(&k)?.scale(scale);
    let gk = gs.t_matmul(&q)?.scale(scale);
    Ok([x.t_matmul(&gq)?, x.t_matmul(&gk)?, x.t_matmul(&gv)?, gs])
}

#[derive(Clone, Debug)]
pub struct TokenObjective {
    pub breakdown: LossBreakdown,
    pub distill_raw: f64,
    /// Same order as [`TokenStudent::params`].
    pub grads: Vec<Matrix>,
    pub logits: Matrix,
    /// Student patch-token features, `B·H·W × C`.
    pub zs: Matrix,
}

pub fn token_objective(
    student: &TokenStudent,
    sample: &TokenSample,
    distill: &DistillConfig,
    weight: f64,
) -> Result<TokenObjective> {
    let x = &sample.x;
    let y = student.attention.apply(x)?;
    let pooled = pool_patches(&y);
    let logits = pooled.matmul(&student.head)?;
    let task = task_loss(&logits, &sample.labels)?;
    let zs = y.spatial_rows();
    let d = distill_loss_with(&zs, &sample.zt, &student.projector, distill)?;

    let g_head = pooled.t_matmul(&task.grad)?;
    let g_pooled = task.grad.matmul_t(&student.head)?;
    let (n, c, p) = (x.tokens(), x.channels(), x.prefix());
    let hw = x.spatial_tokens();
    let mut grads = [
        Matrix::zeros(c, c),
        Matrix::zeros(c, c),
        Matrix::zeros(c, c),
        Matrix::zeros(n, n),
    ];
    for b in 0..x.batch() {
        let mut g_out = Matrix::zeros(n, c);
        for t in 0..hw {
            for ch in 0..c {
                g_out[(p + t, ch)] = g_pooled[(b, ch)] / hw as f64 + weight * d.grad_zs[(b * hw + t, ch)];
            }
        }
        let gb = attention_backward(&student.attention, &x.sample(b), &g_out)?;
        for (acc, g) in grads.iter_mut().zip(&gb) {
            acc.axpy(1.0, g)?;
        }
    }
    let mut all: Vec<Matrix> = grads.into_iter().collect();
    all.push(g_head);
    all.extend(d.grad_layers.iter().map(|g| g.scale(weight)));
    Ok(TokenObjective {
        breakdown: LossBreakdown::new(task.loss, weight * d.loss),
        distill_raw: d.loss,
        grads: all,
        logits,
        zs,
    })
}

fn record(
    student: &TokenStudent,
    test: &TokenSample,
    spec: &TokenSpec,
    weight: f64,
    t: usize,
    rec: &mut TrajectoryRecord,
) -> Result<TokenObjective> {
    let obj = token_objective(student, test, &spec.distill, weight)?;
    let out = project(&obj.zs, &student.projector)?;
    let corr = decorrelation(&obj.zs, &out)?;
    if !rank_bound_holds(&obj.zs, &student.projector.layers()[0])? {
        rec.rank_bound_violations += 1;
    }
    rec.push(t, obj.breakdown.total, corr, record_spectrum(&student.projector)?)?;
    Ok(obj)
}

/// Held-out inputs for the equivariance suite.
pub fn eval_tokens(spec: &TokenSpec, seed: u64) -> Vec<TokenBatch> {
    let mut rng = Rng::with_stream(seed, STREAM_EVAL);
    (0..spec.eval_batches)
        .map(|_| spec.random_tokens(&mut rng, spec.eval_batch_size))
        .collect()
}

/// Trains the attention student with distillation weight `weight` (0 for
/// task only) and scores its attention block with the equivariance suite.
pub fn train_tokens(spec: &TokenSpec, seed: u64, weight: f64) -> Result<RunResult> {
    spec.validate()?;
    let teacher = TokenTeacher::init(spec, seed)?;
    let test = teacher.label(spec.random_tokens(&mut Rng::with_stream(seed, STREAM_TEST), spec.test_size))?;
    let mut student = TokenStudent::init(spec, seed)?;
    let mut rng = Rng::with_stream(seed, STREAM_TRAIN);
    let mut rec = TrajectoryRecord::default();
    let initial = record(&student, &test, spec, weight, 0, &mut rec)?;
    let initial_accuracy = accuracy(&initial.logits, &test.labels);
    let mut last = initial;
    for t in 1..=spec.steps {
        let batch = teacher.label(spec.random_tokens(&mut rng, spec.batch_size))?;
        let obj = token_objective(&student, &batch, &spec.distill, weight)?;
        if !obj.breakdown.total.is_finite() {
            return Err(LabError::Numeric(format!("training loss is not finite at step {t}")));
        }
        sgd_step(student.params_mut(), &obj.grads, spec.learning_rate, 0.0)?;
        if t % spec.record_every == 0 || t == spec.steps {
            last = record(&student, &test, spec, weight, t, &mut rec)?;
        }
    }
    let report = mu_t_suite(&student.attention, &eval_tokens(spec, seed), &unit_shifts())?;
    Ok(RunResult {
        trajectory: rec,
        initial_accuracy,
        final_accuracy: accuracy(&last.logits, &test.labels),
        final_task_loss: last.breakdown.task_loss,
        final_distill_loss: last.distill_raw,
        equivariance: Some(report),
        final_params: student.params().into_iter().cloned().collect(),
    })
}

/// Equivariance score of the seed's constructed teacher.
pub fn teacher_equivariance(spec: &TokenSpec, seed: u64) -> Result<SuiteReport> {
    let teacher = TokenTeacher::init(spec, seed)?;
    mu_t_suite(&teacher.mixer, &eval_tokens(spec, seed), &unit_shifts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    fn tiny() -> TokenSpec {
        TokenSpec {
            channels: 3,
            grid_h: 2,
            grid_w: 3,
            classes: 3,
            batch_size: 4,
            test_size: 6,
            steps: 4,
            record_every: 2,
            eval_batches: 1,
            eval_batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let spec = tiny();
        let teacher = TokenTeacher::init(&spec, 1).unwrap();
        let sample = teacher.label(spec.random_tokens(&mut Rng::new(9), 4)).unwrap();
        let student = TokenStudent::init(&spec, 1).unwrap();
        let obj = token_objective(&student, &sample, &spec.distill, 0.5).unwrap();
        for k in 0..obj.grads.len() {
            let numeric = central_difference(student.params()[k], 1e-6, |w| {
                let mut s = student.clone();
                *s.params_mut()[k] = w.clone();
                Ok(token_objective(&s, &sample, &spec.distill, 0.5)?.breakdown.total)
            })
            .unwrap();
            let err = relative_error(&obj.grads[k], &numeric);
            assert!(err < 1e-6, "param {k}: {err}");
        }
    }

    #[test]
    fn teacher_is_equivariant() {
        let r = teacher_equivariance(&tiny(), 3).unwrap();
        assert!(r.mean <= 1e-12);
    }

    #[test]
    fn frozen_run_keeps_parameters() {
        let spec = TokenSpec {
            learning_rate: 0.0,
            ..tiny()
        };
        let r = train_tokens(&spec, 2, 1.0).unwrap();
        let init = TokenStudent::init(&spec, 2).unwrap();
        assert!(r.final_params.iter().eq(init.params()));
        assert_eq!(r.initial_accuracy, r.final_accuracy);
    }
}
