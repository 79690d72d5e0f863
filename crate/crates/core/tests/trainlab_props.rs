use std::fs;

use kdlab::gradcheck::relative_error;
use kdlab::kdcore::{DistanceSpec, DistillConfig, NormScheme, ProjectorSpec};
use kdlab::linalg::{Matrix, Rng};
use kdlab::trainlab::*;

fn small() -> ExperimentSpec {
    ExperimentSpec {
        input_dim: 8,
        student_dim: 6,
        teacher_dim: 12,
        teacher_hidden: vec![16],
        classes: 4,
        steps: 60,
        batch_size: 32,
        test_size: 64,
        record_every: 20,
        distill_weight: 1.0 / 32.0,
        ..Default::default()
    }
}

/// Central differences on a seeded subset of coordinates of every parameter,
/// compared norm-wise against the analytic gradient on the same subset.
fn sampled_gradient_error(
    params: Vec<Matrix>,
    analytic: &[Matrix],
    per_param: usize,
    rng: &mut Rng,
    loss: impl Fn(&[Matrix]) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut probe = params;
    for p in 0..probe.len() {
        let len = probe[p].len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| rng.below(len)).collect()
        };
        for k in picks {
            let orig = probe[p].as_slice()[k];
            probe[p].as_mut_slice()[k] = orig + h;
            let plus = loss(&probe);
            probe[p].as_mut_slice()[k] = orig - h;
            let minus = loss(&probe);
            probe[p].as_mut_slice()[k] = orig;
            a.push(analytic[p].as_slice()[k]);
            n.push((plus - minus) / (2.0 * h));
        }
    }
    relative_error(&Matrix::column_vector(&a), &Matrix::column_vector(&n))
}

fn with_params(template: &Student, params: &[Matrix]) -> Student {
    let mut s = template.clone();
    for (dst, src) in s.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    s
}

/// Trains `spec` for a while and checks the total-loss gradient at five
/// seeded checkpoints.
fn check_recipe(name: &str, spec: &ExperimentSpec) {
    let task = spec.task(3).unwrap();
    let mut student = Student::init(spec, 3).unwrap();
    let mut stream = task.stream();
    let mut rng = Rng::new(17);
    let mut checkpoints: Vec<usize> = (0..5).map(|i| 12 * i + rng.below(12)).collect();
    checkpoints.sort();
    let last = *checkpoints.last().unwrap();
    for t in 0..=last {
        let batch = stream.next_batch().unwrap();
        let obj = objective(&student, &batch, &spec.distill, spec.distill_weight).unwrap();
        if checkpoints.contains(&t) {
            let params: Vec<Matrix> = student.params().into_iter().cloned().collect();
            let err = sampled_gradient_error(params, &obj.grads, 24, &mut rng, |p| {
                objective(&with_params(&student, p), &batch, &spec.distill, spec.distill_weight)
                    .unwrap()
                    .breakdown
                    .total
            });
            assert!(err <= 1e-5, "{name} step {t}: relative error {err:e}");
        }
        sgd_step(student.params_mut(), &obj.grads, spec.learning_rate, spec.weight_decay).unwrap();
    }
}

#[test]
fn total_gradient_holds_along_every_recipe() {
    let fig2 = Fig2Config::default().spec;
    for norm in [NormScheme::none(), NormScheme::l2_row(), NormScheme::batch()] {
        let spec = ExperimentSpec {
            distill: DistillConfig { norm, ..fig2.distill },
            ..fig2.clone()
        };
        check_recipe(&format!("fig2 {norm:?}"), &spec);
    }
    let fig3 = Fig3Config::default();
    for depth in [2, 3] {
        let spec = ExperimentSpec {
            projector: ProjectorSpec::Mlp {
                depth,
                hidden_width: fig3.hidden_width,
            },
            ..fig3.spec.clone()
        };
        check_recipe(&format!("fig3 mlp{depth}"), &spec);
    }
    let logsum = LogsumConfig::default();
    for alpha in [1.0, 4.0] {
        let spec = ExperimentSpec {
            student_dim: logsum.large_gap.0,
            teacher_dim: logsum.large_gap.1,
            distill: DistillConfig {
                distance: DistanceSpec::logsum(alpha),
                ..logsum.spec.distill
            },
            distill_weight: logsum.logsum_weight,
            ..logsum.spec.clone()
        };
        check_recipe(&format!("logsum {alpha}"), &spec);
    }
    let bs = BatchSizeConfig::default();
    let spec = ExperimentSpec {
        batch_size: 16,
        distill_weight: bs.per_sample_weight / 16.0,
        ..bs.spec.clone()
    };
    check_recipe("batch size 16", &spec);
}

#[test]
fn token_gradient_holds_along_training() {
    let spec = EquivarianceConfig::default().spec;
    let teacher = TokenTeacher::init(&spec, 2).unwrap();
    let mut student = TokenStudent::init(&spec, 2).unwrap();
    let mut data = Rng::new(4);
    let mut rng = Rng::new(5);
    for t in 0..40 {
        let x = kdlab::equivariance::TokenBatch::new(
            4,
            spec.channels,
            spec.prefix,
            spec.grid_h,
            spec.grid_w,
            data.normal_matrix(1, 4 * spec.tokens() * spec.channels).as_slice().to_vec(),
        )
        .unwrap();
        let sample = teacher.label(x).unwrap();
        let obj = token_objective(&student, &sample, &spec.distill, spec.distill_weight).unwrap();
        if t % 10 == 3 {
            let params: Vec<Matrix> = student.params().into_iter().cloned().collect();
            let err = sampled_gradient_error(params, &obj.grads, 24, &mut rng, |p| {
                let mut s = student.clone();
                for (dst, src) in s.params_mut().into_iter().zip(p) {
                    *dst = src.clone();
                }
                token_objective(&s, &sample, &spec.distill, spec.distill_weight)
                    .unwrap()
                    .breakdown
                    .total
            });
            assert!(err <= 1e-5, "step {t}: relative error {err:e}");
        }
        sgd_step(student.params_mut(), &obj.grads, spec.learning_rate, 0.0).unwrap();
    }
}

#[test]
fn same_seed_same_run() {
    let spec = small();
    let a = train(&spec, 4).unwrap();
    let b = train(&spec, 4).unwrap();
    assert_eq!(a.trajectory.to_csv(), b.trajectory.to_csv());
    assert_eq!(a.final_params, b.final_params);
    let c = train(&spec, 5).unwrap();
    assert_ne!(a.trajectory.to_csv(), c.trajectory.to_csv());
}

#[test]
fn teacher_is_untouched_by_training() {
    let spec = small();
    let task = spec.task(6).unwrap();
    let before = task.teacher.clone();
    let test_before = task.test.clone();
    train_on(&spec, &task, Student::init(&spec, 6).unwrap()).unwrap();
    assert_eq!(task.teacher, before);
    assert_eq!(task.test, test_before);
    let regenerated = spec.task(6).unwrap();
    assert_eq!(regenerated.teacher, before);
}

#[test]
fn distillation_lowers_the_distillation_loss() {
    let spec = ExperimentSpec {
        steps: 200,
        distill_weight: 1.0 / 32.0,
        ..small()
    };
    let task_only = ExperimentSpec {
        distill_weight: 0.0,
        ..spec.clone()
    };
    for seed in 0..3 {
        let d = train(&spec, seed).unwrap();
        let t = train(&task_only, seed).unwrap();
        assert!(
            d.final_distill_loss < t.final_distill_loss,
            "seed {seed}: {} vs {}",
            d.final_distill_loss,
            t.final_distill_loss
        );
    }
}

#[test]
fn logsum_one_is_log_of_absolute_residuals() {
    let spec = ExperimentSpec {
        distill: DistillConfig::new(NormScheme::none(), DistanceSpec::logsum(1.0)),
        distill_weight: 0.5,
        ..small()
    };
    let task = spec.task(1).unwrap();
    let student = Student::init(&spec, 1).unwrap();
    let batch = task.stream().next_batch().unwrap();
    let obj = objective(&student, &batch, &spec.distill, spec.distill_weight).unwrap();
    let residual = obj.zs.matmul(&student.projector.layers()[0]).unwrap().sub(&batch.zt).unwrap();
    let expected = residual.as_slice().iter().map(|r| r.abs()).sum::<f64>().ln();
    assert!((obj.distill_raw - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    assert!((obj.breakdown.distill_loss - 0.5 * expected).abs() <= 1e-12 * expected.abs().max(1.0));
}

#[test]
fn linear_runs_respect_the_rank_bound() {
    for norm in [NormScheme::none(), NormScheme::batch()] {
        let spec = ExperimentSpec {
            distill: DistillConfig::new(norm, DistanceSpec::frobenius()),
            ..small()
        };
        for seed in 0..3 {
            let r = train(&spec, seed).unwrap();
            assert_eq!(r.trajectory.rank_bound_violations, 0);
            assert_eq!(r.trajectory.steps, vec![0, 20, 40, 60]);
            assert!(r.final_spectrum().iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }
}

#[test]
fn reports_write_identical_artifacts() {
    let cfg = Fig2Config {
        spec: ExperimentSpec {
            steps: 10,
            record_every: 5,
            distill_weight: 1.0 / 32.0,
            ..small()
        },
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut contents = Vec::new();
    for dir in &dirs {
        let report = experiment_fig2(&cfg).unwrap();
        let files = report.write(dir.path()).unwrap();
        assert_eq!(files.len(), 10 * 3 + 1);
        contents.push(
            files
                .iter()
                .map(|f| (f.strip_prefix(dir.path()).unwrap().to_owned(), fs::read(f).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(contents[0], contents[1]);
    let summary = dirs[0].path().join("runs/fig2/summary.json");
    let json: serde_json::Value = serde_json::from_slice(&fs::read(summary).unwrap()).unwrap();
    assert_eq!(json["statistics"]["seeds"], 10);
    assert!(json["note"].as_str().unwrap().contains("choices of this lab"));
    assert!(dirs[0].path().join("runs/fig2/9/batch.csv").exists());
}
