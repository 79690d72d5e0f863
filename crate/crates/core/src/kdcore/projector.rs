use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{svd, Matrix, Rng};

/// Hidden width used for MLP projectors when none is given.
pub const DEFAULT_HIDDEN_WIDTH: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Bias-free projector: a single weight matrix, or a ReLU MLP stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorState {
    layers: Vec<Matrix>,
    activation: Option<Activation>,
}

/// Serializable description of a projector architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectorSpec {
    Linear,
    Mlp {
        /// Number of weight matrices (2 = one hidden layer).
        depth: usize,
        #[serde(default = "default_hidden")]
        hidden_width: usize,
    },
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN_WIDTH
}

impl ProjectorSpec {
    pub fn name(&self) -> String {
        match self {
            ProjectorSpec::Linear => "linear".into(),
            ProjectorSpec::Mlp { depth, .. } => format!("mlp{depth}"),
        }
    }

    pub fn init(&self, input_dim: usize, output_dim: usize, rng: &mut Rng) -> Result<ProjectorState> {
        match *self {
            ProjectorSpec::Linear => ProjectorState::init_linear(input_dim, output_dim, rng),
            ProjectorSpec::Mlp { depth, hidden_width } => {
                ProjectorState::init_mlp(input_dim, hidden_width, depth, output_dim, rng)
            }
        }
    }
}

impl ProjectorState {
    pub fn linear(weights: Matrix) -> Self {
        ProjectorState {
            layers: vec![weights],
            activation: None,
        }
    }

    /// ReLU MLP from explicit layers; at least two, with chaining dimensions.
    pub fn mlp(layers: Vec<Matrix>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(LabError::Input("an MLP projector needs at least two layers".into()));
        }
        let hidden = layers[0].cols();
        for w in layers.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(LabError::shape(
                    "projector chain",
                    &[w[0].rows(), w[0].cols()],
                    &[w[1].rows(), w[1].cols()],
                ));
            }
        }
        for w in &layers[1..layers.len() - 1] {
            if w.rows() != hidden || w.cols() != hidden {
                return Err(LabError::Input("MLP hidden layers must share one width".into()));
            }
        }
        Ok(ProjectorState {
            layers,
            activation: Some(Activation::Relu),
        })
    }

    /// Linear projector with orthonormal rows (or columns when `input_dim > output_dim`).
    pub fn init_linear(input_dim: usize, output_dim: usize, rng: &mut Rng) -> Result<Self> {
        let g = rng.normal_matrix(input_dim, output_dim);
        let s = svd(&g)?;
        Ok(ProjectorState::linear(s.left_vectors.matmul_t(&s.right_vectors)?))
    }

    /// He-initialized ReLU MLP with `depth` weight matrices.
    pub fn init_mlp(
        input_dim: usize,
        hidden_width: usize,
        depth: usize,
        output_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if depth < 2 {
            return Err(LabError::Input(format!("MLP depth must be >= 2, got {depth}")));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(hidden_width, depth - 1));
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|d| rng.normal_matrix_scaled(d[0], d[1], (2.0 / d[0] as f64).sqrt()))
            .collect();
        ProjectorState::mlp(layers)
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn activation(&self) -> Option<Activation> {
        self.activation
    }

    pub fn is_linear(&self) -> bool {
        self.layers.len() == 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].cols()
    }

    pub fn hidden_width(&self) -> Option<usize> {
        (!self.is_linear()).then(|| self.layers[0].cols())
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward(&self, zs: &Matrix) -> Result<ProjectorTrace> {
        if zs.cols() != self.input_dim() {
            return Err(LabError::shape(
                "project",
                &[zs.rows(), zs.cols()],
                &[self.input_dim(), self.output_dim()],
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = zs.clone();
        for (k, w) in self.layers.iter().enumerate() {
            let a = h.matmul(w)?;
            inputs.push(h);
            h = if k + 1 < self.layers.len() {
                a.map(|x| x.max(0.0))
            } else {
                a.clone()
            };
            pre.push(a);
        }
        Ok(ProjectorTrace {
            inputs,
            pre_activations: pre,
            output: h,
        })
    }

    /// Gradients with respect to the projector input and every layer.
    pub fn backward(&self, trace: &ProjectorTrace, upstream: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let n = self.layers.len();
        let mut grads = vec![Matrix::zeros(0, 0); n];
        let mut g = upstream.clone();
        for k in (0..n).rev() {
            if k + 1 < n {
                g = g.hadamard(&trace.pre_activations[k].map(|x| if x > 0.0 { 1.0 } else { 0.0 }))?;
            }
            grads[k] = trace.inputs[k].t_matmul(&g)?;
            g = g.matmul_t(&self.layers[k])?;
        }
        Ok((g, grads))
    }
}

#[derive(Clone, Debug)]
pub struct ProjectorTrace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    pub output: Matrix,
}

pub fn project(zs: &Matrix, p: &ProjectorState) -> Result<Matrix> {
    Ok(p.forward(zs)?.output)
}
