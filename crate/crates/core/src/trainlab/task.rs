use crate::error::{LabError, Result};
use crate::kdcore::argmax;
use crate::linalg::{Matrix, Rng};

use super::toynet::ToyNet;

// Stream ids carved out of a run seed.
pub(crate) const STREAM_TEACHER: u64 = 0;
pub(crate) const STREAM_TRAIN: u64 = 1;
pub(crate) const STREAM_TEST: u64 = 2;
pub(crate) const STREAM_STUDENT: u64 = 3;
pub(crate) const STREAM_PROJECTOR: u64 = 4;
pub(crate) const STREAM_POOL: u64 = 5;

const CALIBRATION_SIZE: usize = 1024;

/// Removes the mean-representation direction from the teacher's head.
///
/// Post-ReLU representations share a large positive mean; without this one
/// class tends to win most argmaxes.
fn balance_head(teacher: &mut ToyNet, calibration: &Matrix) -> Result<()> {
    let z = teacher.forward(calibration)?.features().clone();
    let n = z.rows() as f64;
    let mu: Vec<f64> = (0..z.cols()).map(|j| z.column(j).iter().sum::<f64>() / n).collect();
    let norm_sq: f64 = mu.iter().map(|m| m * m).sum();
    if norm_sq == 0.0 {
        return Ok(());
    }
    let last = teacher.layers().len() - 1;
    let head = &mut teacher.layers_mut()[last];
    for c in 0..head.cols() {
        let dot: f64 = (0..head.rows()).map(|i| mu[i] * head[(i, c)]).sum();
        for (i, m) in mu.iter().enumerate() {
            head[(i, c)] -= dot * m / norm_sq;
        }
    }
    Ok(())
}

/// Inputs with the frozen teacher's representation and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub zt: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            zt: self.zt.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Gaussian inputs labelled by the argmax of a frozen random teacher.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub seed: u64,
    pub teacher: ToyNet,
    pub batch_size: usize,
    pool: Option<Batch>,
    pub test: Batch,
}

impl SyntheticTask {
    /// Teacher widths are `[input_dim, hidden…, teacher_dim, classes]`.
    /// With `train_size` set, training batches are drawn from a fixed pool
    /// of that many samples; otherwise every batch is fresh.
    pub fn new(
        seed: u64,
        teacher_widths: &[usize],
        batch_size: usize,
        train_size: Option<usize>,
        test_size: usize,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(LabError::Precondition(format!(
                "batch size must be at least 2, got {batch_size}"
            )));
        }
        if teacher_widths.len() < 3 {
            return Err(LabError::Input("teacher needs a representation layer and a head".into()));
        }
        let mut rng = Rng::with_stream(seed, STREAM_TEACHER);
        let mut teacher = ToyNet::init(teacher_widths, &mut rng)?;
        balance_head(&mut teacher, &rng.normal_matrix(CALIBRATION_SIZE, teacher_widths[0]))?;
        let mut task = SyntheticTask {
            seed,
            teacher,
            batch_size,
            pool: None,
            test: Batch {
                x: Matrix::zeros(0, teacher_widths[0]),
                zt: Matrix::zeros(0, 0),
                labels: Vec::new(),
            },
        };
        task.test = task.label(Rng::with_stream(seed, STREAM_TEST).normal_matrix(test_size, task.input_dim()))?;
        if let Some(n) = train_size {
            if n < batch_size {
                return Err(LabError::Input(format!(
                    "training pool of {n} is smaller than a batch of {batch_size}"
                )));
            }
            let x = Rng::with_stream(seed, STREAM_POOL).normal_matrix(n, task.input_dim());
            task.pool = Some(task.label(x)?);
        }
        Ok(task)
    }

    pub fn input_dim(&self) -> usize {
        self.teacher.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.teacher.output_dim()
    }

    pub fn teacher_dim(&self) -> usize {
        self.teacher.feature_dim()
    }

    pub fn label(&self, x: Matrix) -> Result<Batch> {
        let t = self.teacher.forward(&x)?;
        let labels = (0..x.rows()).map(|i| argmax(t.logits.row(i))).collect();
        Ok(Batch {
            zt: t.features().clone(),
            x,
            labels,
        })
    }

    pub fn stream(&self) -> DataStream<'_> {
        DataStream {
            task: self,
            rng: Rng::with_stream(self.seed, STREAM_TRAIN),
            order: Vec::new(),
            cursor: 0,
        }
    }
}

/// Training batches in a fixed order per seed. In pool mode the sample
/// sequence is a concatenation of seeded epoch permutations, so runs that
/// differ only in batch size see the same samples in the same order.
pub struct DataStream<'a> {
    task: &'a SyntheticTask,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl DataStream<'_> {
    pub fn next_batch(&mut self) -> Result<Batch> {
        let b = self.task.batch_size;
        match &self.task.pool {
            None => self.task.label(self.rng.normal_matrix(b, self.task.input_dim())),
            Some(pool) => {
                let mut idx = Vec::with_capacity(b);
                while idx.len() < b {
                    if self.cursor == self.order.len() {
                        self.order = self.rng.permutation(pool.len());
                        self.cursor = 0;
                    }
                    let take = (b - idx.len()).min(self.order.len() - self.cursor);
                    idx.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
                    self.cursor += take;
                }
                Ok(pool.select(&idx))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerating_gives_identical_batches() {
        let a = SyntheticTask::new(7, &[6, 12, 8, 4], 16, None, 32).unwrap();
        let b = SyntheticTask::new(7, &[6, 12, 8, 4], 16, None, 32).unwrap();
        let (mut sa, mut sb) = (a.stream(), b.stream());
        for _ in 0..3 {
            assert_eq!(sa.next_batch().unwrap(), sb.next_batch().unwrap());
        }
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn pool_order_is_independent_of_batch_size() {
        let small = SyntheticTask::new(3, &[4, 8, 6, 3], 4, Some(20), 8).unwrap();
        let large = SyntheticTask::new(3, &[4, 8, 6, 3], 8, Some(20), 8).unwrap();
        let (mut s, mut l) = (small.stream(), large.stream());
        let mut xs = Vec::new();
        for _ in 0..10 {
            xs.extend_from_slice(s.next_batch().unwrap().x.as_slice());
        }
        let mut xl = Vec::new();
        for _ in 0..5 {
            xl.extend_from_slice(l.next_batch().unwrap().x.as_slice());
        }
        assert_eq!(xs, xl);
    }

    #[test]
    fn labels_use_every_class() {
        let task = SyntheticTask::new(1, &[8, 16, 12, 4], 16, None, 400).unwrap();
        let mut counts = [0usize; 4];
        for &y in &task.test.labels {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c > 20), "{counts:?}");
    }

    #[test]
    fn tiny_batch_rejected() {
        assert!(matches!(
            SyntheticTask::new(0, &[4, 8, 6, 3], 1, None, 8),
            Err(LabError::Precondition(_))
        ));
    }
}
