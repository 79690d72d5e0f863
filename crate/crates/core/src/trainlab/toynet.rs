use crate::error::{LabError, Result};
use crate::linalg::{Matrix, Rng};

/// Bias-free fully connected network with ReLU between layers and a linear
/// output. The input to the last layer (post-ReLU) is the representation
/// that gets distilled.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    layers: Vec<Matrix>,
}

/// Activations kept for the backward pass. `hidden[k]` is the input of
/// layer `k`; `pre[k]` its output before the ReLU.
#[derive(Clone, Debug)]
pub struct ToyTrace {
    hidden: Vec<Matrix>,
    pre: Vec<Matrix>,
    pub logits: Matrix,
}

impl ToyTrace {
    /// Penultimate representation.
    pub fn features(&self) -> &Matrix {
        &self.hidden[self.hidden.len() - 1]
    }
}

impl ToyNet {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LabError::Input("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(LabError::shape(
                    "network layers",
                    &[w[0].rows(), w[0].cols()],
                    &[w[1].rows(), w[1].cols()],
                ));
            }
        }
        Ok(ToyNet { layers })
    }

    /// He-initialized network with layer widths `dims`.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(LabError::Input(format!("need at least two widths, got {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|d| rng.normal_matrix_scaled(d[0], d[1], (2.0 / d[0] as f64).sqrt()))
            .collect();
        ToyNet::new(layers)
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ToyTrace> {
        if x.cols() != self.input_dim() {
            return Err(LabError::shape("network input", &[self.input_dim()], &[x.cols()]));
        }
        let n = self.layers.len();
        let mut hidden = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.clone();
        for (k, w) in self.layers.iter().enumerate() {
            let a = h.matmul(w)?;
            hidden.push(h);
            h = if k + 1 < n { a.map(|v| v.max(0.0)) } else { a.clone() };
            pre.push(a);
        }
        Ok(ToyTrace {
            hidden,
            pre,
            logits: h,
        })
    }

    /// Layer gradients given the gradient at the logits and, optionally, an
    /// extra gradient arriving directly at the penultimate representation.
    pub fn backward(&self, trace: &ToyTrace, g_logits: &Matrix, g_features: Option<&Matrix>) -> Result<Vec<Matrix>> {
        let n = self.layers.len();
        let mut grads = vec![Matrix::zeros(0, 0); n];
        let mut g = g_logits.clone();
        for k in (0..n).rev() {
            grads[k] = trace.hidden[k].t_matmul(&g)?;
            if k == 0 {
                break;
            }
            g = g.matmul_t(&self.layers[k])?;
            if k + 1 == n {
                if let Some(extra) = g_features {
                    g.axpy(1.0, extra)?;
                }
            }
            g = g.hadamard(&trace.pre[k - 1].map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
        }
        Ok(grads)
    }
}
