use serde::{Deserialize, Serialize};

use crate::dynamics::{decorrelation, rank_bound_holds, record_spectrum, TrajectoryRecord};
use crate::equivariance::SuiteReport;
use crate::error::{LabError, Result};
use crate::kdcore::{
    accuracy, distill_loss_with, project, task_loss, DistillConfig, LossBreakdown, ProjectorSpec,
    ProjectorState,
};
use crate::linalg::{Matrix, Rng};

use super::task::{Batch, SyntheticTask, STREAM_PROJECTOR, STREAM_STUDENT};
use super::toynet::ToyNet;

/// One teacher/student distillation run. Every synthetic dimension here is
/// a lab choice; none comes from a benchmark setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub input_dim: usize,
    /// Student representation width `ds`.
    pub student_dim: usize,
    /// Teacher representation width `dt`.
    pub teacher_dim: usize,
    /// Hidden widths of the teacher before its representation layer.
    pub teacher_hidden: Vec<usize>,
    pub classes: usize,
    pub projector: ProjectorSpec,
    pub distill: DistillConfig,
    /// Multiplier on the distillation term; 0 trains on the task alone.
    pub distill_weight: f64,
    pub learning_rate: f64,
    /// Per-step decay `η` in `w ← (1 − η)·w − lr·g`.
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Fixed training pool size; fresh samples every step when absent.
    pub train_size: Option<usize>,
    pub test_size: usize,
    pub record_every: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            input_dim: 32,
            student_dim: 32,
            teacher_dim: 64,
            teacher_hidden: vec![128],
            classes: 10,
            projector: ProjectorSpec::Linear,
            distill: DistillConfig::new(Default::default(), crate::kdcore::DistanceSpec::frobenius()),
            distill_weight: 1.0,
            learning_rate: 0.05,
            weight_decay: 0.0,
            steps: 1000,
            batch_size: 128,
            train_size: None,
            test_size: 512,
            record_every: 50,
            seeds: (0..10).collect(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.student_dim, self.teacher_dim, self.classes];
        if dims.contains(&0) || self.teacher_hidden.contains(&0) {
            return Err(LabError::Input(format!("all widths must be positive: {dims:?}")));
        }
        if self.classes < 2 {
            return Err(LabError::Input("need at least two classes".into()));
        }
        if self.batch_size < 2 {
            return Err(LabError::Precondition(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.weight_decay) || !(self.distill_weight >= 0.0) {
            return Err(LabError::Input(format!(
                "invalid optimizer settings: lr {}, weight decay {}, distill weight {}",
                self.learning_rate, self.weight_decay, self.distill_weight
            )));
        }
        if self.steps == 0 || self.record_every == 0 {
            return Err(LabError::Input("steps and record_every must be >= 1".into()));
        }
        if self.test_size < 2 {
            return Err(LabError::Input("test set needs at least two samples".into()));
        }
        if let ProjectorSpec::Mlp { depth, hidden_width } = self.projector {
            if depth < 2 || hidden_width == 0 {
                return Err(LabError::Input(format!("invalid MLP projector {:?}", self.projector)));
            }
        }
        self.distill.norm.validate(self.batch_size, self.teacher_dim)?;
        self.distill.distance.validate()?;
        if self.seeds.is_empty() {
            return Err(LabError::Input("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn teacher_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.teacher_hidden);
        w.push(self.teacher_dim);
        w.push(self.classes);
        w
    }

    pub fn task(&self, seed: u64) -> Result<SyntheticTask> {
        SyntheticTask::new(seed, &self.teacher_widths(), self.batch_size, self.train_size, self.test_size)
    }
}

/// Trainable pieces: a one-hidden-layer student (`input → ds → classes`)
/// and the projector from its representation to the teacher's.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub net: ToyNet,
    pub projector: ProjectorState,
}

impl Student {
    pub fn init(spec: &ExperimentSpec, seed: u64) -> Result<Self> {
        let net = ToyNet::init(
            &[spec.input_dim, spec.student_dim, spec.classes],
            &mut Rng::with_stream(seed, STREAM_STUDENT),
        )?;
        let projector = spec.projector.init(
            spec.student_dim,
            spec.teacher_dim,
            &mut Rng::with_stream(seed, STREAM_PROJECTOR),
        )?;
        Ok(Student { net, projector })
    }

    /// All weight matrices, network layers first.
    pub fn params(&self) -> Vec<&Matrix> {
        self.net.layers().iter().chain(self.projector.layers()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let Student { net, projector } = self;
        net.layers_mut().iter_mut().chain(projector.layers_mut()).collect()
    }
}

/// Joint objective `task + weight·D` with gradients for every parameter.
#[derive(Clone, Debug)]
pub struct Objective {
    /// Distillation term already multiplied by the weight.
    pub breakdown: LossBreakdown,
    /// Unweighted distillation loss.
    pub distill_raw: f64,
    pub grads: Vec<Matrix>,
    pub logits: Matrix,
    pub zs: Matrix,
}

pub fn objective(student: &Student, batch: &Batch, distill: &DistillConfig, weight: f64) -> Result<Objective> {
    let trace = student.net.forward(&batch.x)?;
    let task = task_loss(&trace.logits, &batch.labels)?;
    let zs = trace.features().clone();
    let d = distill_loss_with(&zs, &batch.zt, &student.projector, distill)?;
    let g_features = d.grad_zs.scale(weight);
    let mut grads = student.net.backward(&trace, &task.grad, Some(&g_features))?;
    grads.extend(d.grad_layers.iter().map(|g| g.scale(weight)));
    Ok(Objective {
        breakdown: LossBreakdown::new(task.loss, weight * d.loss),
        distill_raw: d.loss,
        grads,
        logits: trace.logits,
        zs,
    })
}

/// Outcome of one run; the trajectory is measured on the held-out set.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub trajectory: TrajectoryRecord,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_task_loss: f64,
    /// Unweighted distillation loss of the final model.
    pub final_distill_loss: f64,
    pub equivariance: Option<SuiteReport>,
    /// Trained weights in the model's parameter order.
    pub final_params: Vec<Matrix>,
}

impl RunResult {
    /// Last recorded spectrum.
    pub fn final_spectrum(&self) -> &[f64] {
        self.trajectory.singular_values.last().map_or(&[], Vec::as_slice)
    }

    pub fn final_decorrelation(&self) -> f64 {
        self.trajectory.decorrelation.last().copied().unwrap_or(f64::NAN)
    }
}

/// Weight update `w ← (1 − η)·w − lr·g`.
pub fn sgd_step(params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64, decay: f64) -> Result<()> {
    for (w, g) in params.into_iter().zip(grads) {
        if decay != 0.0 {
            *w = w.scale(1.0 - decay);
        }
        w.axpy(-lr, g)?;
    }
    Ok(())
}

fn record(
    student: &Student,
    task: &SyntheticTask,
    spec: &ExperimentSpec,
    t: usize,
    rec: &mut TrajectoryRecord,
) -> Result<Objective> {
    let obj = objective(student, &task.test, &spec.distill, spec.distill_weight)?;
    let out = project(&obj.zs, &student.projector)?;
    let corr = decorrelation(&obj.zs, &out)?;
    let sigma = if student.projector.is_linear() {
        if !rank_bound_holds(&obj.zs, &student.projector.layers()[0])? {
            rec.rank_bound_violations += 1;
        }
        record_spectrum(&student.projector)?
    } else {
        Vec::new()
    };
    rec.push(t, obj.breakdown.total, corr, sigma)?;
    Ok(obj)
}

/// Plain SGD on the student network and projector with the teacher frozen.
pub fn train(spec: &ExperimentSpec, seed: u64) -> Result<RunResult> {
    spec.validate()?;
    let task = spec.task(seed)?;
    train_on(spec, &task, Student::init(spec, seed)?)
}

/// [`train`] on a prepared task from a given starting point.
pub fn train_on(spec: &ExperimentSpec, task: &SyntheticTask, mut student: Student) -> Result<RunResult> {
    let mut rec = TrajectoryRecord::default();
    let mut stream = task.stream();
    let initial = record(&student, task, spec, 0, &mut rec)?;
    let initial_accuracy = accuracy(&initial.logits, &task.test.labels);
    let mut last = initial;
    for t in 1..=spec.steps {
        let batch = stream.next_batch()?;
        let obj = objective(&student, &batch, &spec.distill, spec.distill_weight)?;
        if !obj.breakdown.total.is_finite() {
            return Err(LabError::Numeric(format!("training loss is not finite at step {t}")));
        }
        sgd_step(student.params_mut(), &obj.grads, spec.learning_rate, spec.weight_decay)?;
        if t % spec.record_every == 0 || t == spec.steps {
            last = record(&student, task, spec, t, &mut rec)?;
            if !last.breakdown.total.is_finite() {
                return Err(LabError::Numeric(format!("held-out loss is not finite at step {t}")));
            }
        }
    }
    Ok(RunResult {
        trajectory: rec,
        initial_accuracy,
        final_accuracy: accuracy(&last.logits, &task.test.labels),
        final_task_loss: last.breakdown.task_loss,
        final_distill_loss: last.distill_raw,
        equivariance: None,
        final_params: student.params().into_iter().cloned().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentSpec {
        ExperimentSpec {
            input_dim: 6,
            student_dim: 4,
            teacher_dim: 8,
            teacher_hidden: vec![10],
            classes: 3,
            steps: 20,
            batch_size: 16,
            test_size: 32,
            record_every: 5,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_run_keeps_parameters() {
        let spec = ExperimentSpec {
            learning_rate: 0.0,
            ..small()
        };
        let r = train(&spec, 1).unwrap();
        let init = Student::init(&spec, 1).unwrap();
        assert!(r.final_params.iter().eq(init.params()));
        assert_eq!(r.initial_accuracy, r.final_accuracy);
        assert_eq!(r.trajectory.steps, vec![0, 5, 10, 15, 20]);
    }

    #[test]
    fn divergence_names_the_step() {
        let spec = ExperimentSpec {
            learning_rate: 1e6,
            steps: 200,
            ..small()
        };
        match train(&spec, 2) {
            Err(LabError::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let spec = ExperimentSpec {
            batch_size: 1,
            ..small()
        };
        assert!(matches!(spec.validate(), Err(LabError::Precondition(_))));
        let spec = ExperimentSpec {
            seeds: vec![],
            ..small()
        };
        assert!(spec.validate().is_err());
    }
}
