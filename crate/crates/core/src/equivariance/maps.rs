//! Shape-preserving token maps.

use crate::error::{LabError, Result};
use crate::linalg::{Matrix, Rng};

use super::tokens::TokenBatch;

/// A feature map `φ` on token sequences that keeps `B`, `N` and `C`.
pub trait TokenMap: Sync {
    fn id(&self) -> String;
    fn apply(&self, x: &TokenBatch) -> Result<TokenBatch>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMap;

impl TokenMap for IdentityMap {
    fn id(&self) -> String {
        "identity".into()
    }

    fn apply(&self, x: &TokenBatch) -> Result<TokenBatch> {
        Ok(x.clone())
    }
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// Two-layer ReLU MLP applied to every token with shared weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMlp {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl TokenMlp {
    pub fn new(w1: Matrix, w2: Matrix) -> Result<Self> {
        if w1.cols() != w2.rows() || w1.rows() != w2.cols() {
            return Err(LabError::shape(
                "token mlp",
                &[w1.rows(), w1.cols()],
                &[w2.rows(), w2.cols()],
            ));
        }
        Ok(TokenMlp { w1, w2 })
    }

    pub fn random(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        TokenMlp {
            w1: rng.normal_matrix_scaled(channels, hidden, (2.0 / channels as f64).sqrt()),
            w2: rng.normal_matrix_scaled(hidden, channels, (1.0 / hidden as f64).sqrt()),
        }
    }
}

impl TokenMap for TokenMlp {
    fn id(&self) -> String {
        format!("token_mlp_{}", self.w1.cols())
    }

    fn apply(&self, x: &TokenBatch) -> Result<TokenBatch> {
        if x.channels() != self.w1.rows() {
            return Err(LabError::shape("token mlp", &[self.w1.rows()], &[x.channels()]));
        }
        let samples = (0..x.batch())
            .map(|b| relu(&x.sample(b).matmul(&self.w1)?).matmul(&self.w2))
            .collect::<Result<Vec<_>>>()?;
        TokenBatch::from_samples(x, &samples)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Single-head self-attention with an additive `N × N` positional bias on
/// the attention scores: `softmax(XWq(XWk)ᵀ/√C + P)·XWv`, plus `X` when
/// `residual` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalAttention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub bias: Matrix,
    pub residual: bool,
}

impl PositionalAttention {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, bias: Matrix, residual: bool) -> Result<Self> {
        let c = wq.rows();
        for w in [&wq, &wk, &wv] {
            if w.shape() != (c, c) {
                return Err(LabError::shape("attention weights", &[c, c], &[w.rows(), w.cols()]));
            }
        }
        if bias.rows() != bias.cols() {
            return Err(LabError::shape("attention bias", &[bias.rows()], &[bias.cols()]));
        }
        Ok(PositionalAttention {
            wq,
            wk,
            wv,
            bias,
            residual,
        })
    }

    /// Random weights with variance `1/C` and bias entries of scale `bias_std`.
    pub fn random(channels: usize, tokens: usize, bias_std: f64, residual: bool, rng: &mut Rng) -> Self {
        let s = (1.0 / channels as f64).sqrt();
        PositionalAttention {
            wq: rng.normal_matrix_scaled(channels, channels, s),
            wk: rng.normal_matrix_scaled(channels, channels, s),
            wv: rng.normal_matrix_scaled(channels, channels, s),
            bias: rng.normal_matrix_scaled(tokens, tokens, bias_std),
            residual,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn tokens(&self) -> usize {
        self.bias.rows()
    }

    pub(crate) fn check(&self, x: &TokenBatch) -> Result<()> {
        if x.channels() != self.channels() || x.tokens() != self.tokens() {
            return Err(LabError::shape(
                "attention input",
                &[self.tokens(), self.channels()],
                &[x.tokens(), x.channels()],
            ));
        }
        Ok(())
    }

    /// Attention probabilities for one `N × C` sample.
    pub fn attention(&self, x: &Matrix) -> Result<Matrix> {
        let q = x.matmul(&self.wq)?;
        let k = x.matmul(&self.wk)?;
        let scores = q.matmul_t(&k)?.scale(1.0 / (self.channels() as f64).sqrt()).add(&self.bias)?;
        Ok(softmax_rows(&scores))
    }

    pub fn forward_sample(&self, x: &Matrix) -> Result<Matrix> {
        let a = self.attention(x)?;
        let out = a.matmul(&x.matmul(&self.wv)?)?;
        if self.residual {
            out.add(x)
        } else {
            Ok(out)
        }
    }
}

impl TokenMap for PositionalAttention {
    fn id(&self) -> String {
        "positional_attention".into()
    }

    fn apply(&self, x: &TokenBatch) -> Result<TokenBatch> {
        self.check(x)?;
        let samples = (0..x.batch())
            .map(|b| self.forward_sample(&x.sample(b)))
            .collect::<Result<Vec<_>>>()?;
        TokenBatch::from_samples(x, &samples)
    }
}

/// Circular convolution over the patch grid with one `C × C` mixing matrix
/// per offset, followed by ReLU and a residual: `x + relu(Σ_o x(p + o)·K_o)`.
/// Prefix tokens pass through unchanged. Exactly equivariant to circular
/// shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMixer {
    pub offsets: Vec<(i64, i64)>,
    pub kernels: Vec<Matrix>,
}

impl ConvMixer {
    pub fn new(offsets: Vec<(i64, i64)>, kernels: Vec<Matrix>) -> Result<Self> {
        if offsets.len() != kernels.len() || kernels.is_empty() {
            return Err(LabError::Input(format!(
                "conv mixer needs one kernel per offset ({} vs {})",
                offsets.len(),
                kernels.len()
            )));
        }
        let c = kernels[0].rows();
        for k in &kernels {
            if k.shape() != (c, c) {
                return Err(LabError::shape("conv kernel", &[c, c], &[k.rows(), k.cols()]));
            }
        }
        Ok(ConvMixer { offsets, kernels })
    }

    /// 3×3 neighbourhood with random kernels of standard deviation `3/√(9C)`.
    pub fn random(channels: usize, rng: &mut Rng) -> Self {
        let mut offsets = Vec::new();
        let mut kernels = Vec::new();
        let s = (1.0 / (9.0 * channels as f64)).sqrt();
        for dy in -1..=1 {
            for dx in -1..=1 {
                offsets.push((dy, dx));
                kernels.push(rng.normal_matrix_scaled(channels, channels, 3.0 * s));
            }
        }
        ConvMixer { offsets, kernels }
    }

    pub fn channels(&self) -> usize {
        self.kernels[0].rows()
    }
}

impl TokenMap for ConvMixer {
    fn id(&self) -> String {
        format!("conv_mixer_{}", self.offsets.len())
    }

    fn apply(&self, x: &TokenBatch) -> Result<TokenBatch> {
        let c = self.channels();
        if x.channels() != c {
            return Err(LabError::shape("conv mixer", &[c], &[x.channels()]));
        }
        let (h, w) = x.grid();
        let p = x.prefix();
        let mut out = x.clone();
        let mut acc = vec![0.0; c];
        for b in 0..x.batch() {
            for y in 0..h as i64 {
                for xx in 0..w as i64 {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    for (&(oy, ox), k) in self.offsets.iter().zip(&self.kernels) {
                        let sy = (y + oy).rem_euclid(h as i64) as usize;
                        let sx = (xx + ox).rem_euclid(w as i64) as usize;
                        let src = p + sy * w + sx;
                        for i in 0..c {
                            let v = x.get(b, src, i);
                            if v != 0.0 {
                                for (j, a) in acc.iter_mut().enumerate() {
                                    *a += v * k[(i, j)];
                                }
                            }
                        }
                    }
                    let n = p + y as usize * w + xx as usize;
                    for (j, a) in acc.iter().enumerate() {
                        out.set(b, n, j, x.get(b, n, j) + a.max(0.0));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut Rng, b: usize, c: usize, p: usize, h: usize, w: usize) -> TokenBatch {
        let n = b * (p + h * w) * c;
        TokenBatch::new(b, c, p, h, w, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = Rng::new(1).normal_matrix(4, 5).scale(30.0);
        let a = softmax_rows(&s);
        for i in 0..4 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn maps_preserve_shape() {
        let mut rng = Rng::new(2);
        let x = random_batch(&mut rng, 2, 3, 2, 2, 3);
        let maps: Vec<Box<dyn TokenMap>> = vec![
            Box::new(IdentityMap),
            Box::new(TokenMlp::random(3, 5, &mut rng)),
            Box::new(PositionalAttention::random(3, 8, 1.0, true, &mut rng)),
            Box::new(ConvMixer::random(3, &mut rng)),
        ];
        for m in &maps {
            let y = m.apply(&x).unwrap();
            assert_eq!(
                (y.batch(), y.tokens(), y.channels()),
                (x.batch(), x.tokens(), x.channels())
            );
        }
    }

    #[test]
    fn attention_rejects_wrong_token_count() {
        let mut rng = Rng::new(3);
        let x = random_batch(&mut rng, 1, 3, 2, 2, 2);
        let att = PositionalAttention::random(3, 7, 1.0, false, &mut rng);
        assert!(att.apply(&x).is_err());
    }

    #[test]
    fn conv_mixer_keeps_prefix() {
        let mut rng = Rng::new(4);
        let x = random_batch(&mut rng, 1, 2, 2, 3, 3);
        let y = ConvMixer::random(2, &mut rng).apply(&x).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                assert_eq!(y.get(0, n, c), x.get(0, n, c));
            }
        }
    }
}
