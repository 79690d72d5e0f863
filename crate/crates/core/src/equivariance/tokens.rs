//! Token sequences, patch grids and spatial translations.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{read_u64, Matrix};

pub const DEFAULT_PREFIX: usize = 2;
pub const DEFAULT_GRID: usize = 14;

/// `B × N × C` token tensor: `prefix` leading tokens (class/distillation)
/// followed by `grid_h · grid_w` patch tokens in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    batch: usize,
    tokens: usize,
    channels: usize,
    prefix: usize,
    grid_h: usize,
    grid_w: usize,
    data: Vec<f64>,
}

impl TokenBatch {
    pub fn new(
        batch: usize,
        channels: usize,
        prefix: usize,
        grid_h: usize,
        grid_w: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let tokens = prefix + grid_h * grid_w;
        if data.len() != batch * tokens * channels {
            return Err(LabError::shape(
                "token batch",
                &[batch, tokens, channels],
                &[data.len()],
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LabError::Input("token batch has non-finite entries".into()));
        }
        Ok(TokenBatch {
            batch,
            tokens,
            channels,
            prefix,
            grid_h,
            grid_w,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, prefix: usize, grid_h: usize, grid_w: usize) -> Self {
        let tokens = prefix + grid_h * grid_w;
        TokenBatch {
            batch,
            tokens,
            channels,
            prefix,
            grid_h,
            grid_w,
            data: vec![0.0; batch * tokens * channels],
        }
    }

    /// Same layout as `self` with new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        TokenBatch::new(self.batch, self.channels, self.prefix, self.grid_h, self.grid_w, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn prefix(&self) -> usize {
        self.prefix
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn spatial_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, n: usize, c: usize) -> f64 {
        self.data[(b * self.tokens + n) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, b: usize, n: usize, c: usize, v: f64) {
        self.data[(b * self.tokens + n) * self.channels + c] = v;
    }

    /// Tokens of sample `b` as an `N × C` matrix.
    pub fn sample(&self, b: usize) -> Matrix {
        let n = self.tokens * self.channels;
        Matrix::from_vec(self.tokens, self.channels, self.data[b * n..(b + 1) * n].to_vec())
            .expect("sample slice has N·C entries")
    }

    /// Rebuilds a batch from per-sample `N × C` matrices.
    pub fn from_samples(like: &TokenBatch, samples: &[Matrix]) -> Result<Self> {
        let mut data = Vec::with_capacity(like.data.len());
        for s in samples {
            if s.shape() != (like.tokens, like.channels) {
                return Err(LabError::shape(
                    "from_samples",
                    &[like.tokens, like.channels],
                    &[s.rows(), s.cols()],
                ));
            }
            data.extend_from_slice(s.as_slice());
        }
        like.with_data(data)
    }

    /// Spatial tokens of every sample stacked into a `(B·H·W) × C` matrix.
    pub fn spatial_rows(&self) -> Matrix {
        let hw = self.spatial_tokens();
        let mut data = Vec::with_capacity(self.batch * hw * self.channels);
        for b in 0..self.batch {
            let start = (b * self.tokens + self.prefix) * self.channels;
            data.extend_from_slice(&self.data[start..start + hw * self.channels]);
        }
        Matrix::from_vec(self.batch * hw, self.channels, data).expect("spatial rows")
    }

    pub fn scale(&self, s: f64) -> TokenBatch {
        let mut out = self.clone();
        for x in &mut out.data {
            *x *= s;
        }
        out
    }

    /// Six little-endian `u64` header fields `(B, N, C, prefix, H, W)`
    /// followed by the data as a binary matrix frame of shape `B × (N·C)`.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in [self.batch, self.tokens, self.channels, self.prefix, self.grid_h, self.grid_w] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        Matrix::from_vec(self.batch, self.tokens * self.channels, self.data.clone())?.write_binary(w)
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<TokenBatch> {
        let mut h = [0usize; 6];
        for v in &mut h {
            *v = read_u64(r)? as usize;
        }
        let [batch, tokens, channels, prefix, grid_h, grid_w] = h;
        if tokens != prefix + grid_h * grid_w {
            return Err(LabError::shape(
                "token batch header",
                &[tokens],
                &[prefix, grid_h, grid_w],
            ));
        }
        let m = Matrix::read_binary(r)?;
        if m.shape() != (batch, tokens * channels) {
            return Err(LabError::shape(
                "token batch frame",
                &[batch, tokens * channels],
                &[m.rows(), m.cols()],
            ));
        }
        TokenBatch::new(batch, channels, prefix, grid_h, grid_w, m.into_vec())
    }
}

/// `B × C × H × W` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.channels + c) * self.h + y) * self.w + x]
    }

    #[inline]
    fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.h + y) * self.w + x
    }
}

/// Prefix tokens carried alongside a grid, `B × prefix × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixSlab {
    pub prefix: usize,
    pub data: Vec<f64>,
}

/// Moves the patch tokens onto their `H × W` grid (token `i·W + j` lands at
/// row `i`, column `j`) and sets the prefix tokens aside.
pub fn roll_to_grid(x: &TokenBatch) -> Result<(Grid, PrefixSlab)> {
    let (h, w) = x.grid();
    if x.tokens != x.prefix + h * w {
        return Err(LabError::shape("roll_to_grid", &[x.tokens], &[x.prefix, h, w]));
    }
    let c = x.channels;
    let mut grid = Grid {
        batch: x.batch,
        channels: c,
        h,
        w,
        data: vec![0.0; x.batch * c * h * w],
    };
    let mut prefix = Vec::with_capacity(x.batch * x.prefix * c);
    for b in 0..x.batch {
        for n in 0..x.prefix {
            for ch in 0..c {
                prefix.push(x.get(b, n, ch));
            }
        }
        for t in 0..h * w {
            for ch in 0..c {
                let idx = grid.index(b, ch, t / w, t % w);
                grid.data[idx] = x.get(b, x.prefix + t, ch);
            }
        }
    }
    Ok((
        grid,
        PrefixSlab {
            prefix: x.prefix,
            data: prefix,
        },
    ))
}

/// Inverse of [`roll_to_grid`].
pub fn unroll(grid: &Grid, prefix: &PrefixSlab) -> Result<TokenBatch> {
    let c = grid.channels;
    if prefix.data.len() != grid.batch * prefix.prefix * c {
        return Err(LabError::shape(
            "unroll",
            &[grid.batch, prefix.prefix, c],
            &[prefix.data.len()],
        ));
    }
    let mut out = TokenBatch::zeros(grid.batch, c, prefix.prefix, grid.h, grid.w);
    for b in 0..grid.batch {
        for n in 0..prefix.prefix {
            for ch in 0..c {
                out.set(b, n, ch, prefix.data[(b * prefix.prefix + n) * c + ch]);
            }
        }
        for t in 0..grid.h * grid.w {
            for ch in 0..c {
                out.set(b, prefix.prefix + t, ch, grid.get(b, ch, t / grid.w, t % grid.w));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationMode {
    /// Wrap-around shift.
    #[default]
    Circular,
    /// Vacated cells become zero.
    ZeroPad,
}

/// Shift by `dy` rows and `dx` columns of patches: the value at `(y, x)`
/// moves to `(y + dy, x + dx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub dy: i64,
    pub dx: i64,
    #[serde(default)]
    pub mode: TranslationMode,
}

impl Translation {
    pub fn circular(dy: i64, dx: i64) -> Self {
        Translation {
            dy,
            dx,
            mode: TranslationMode::Circular,
        }
    }

    pub fn zero_pad(dy: i64, dx: i64) -> Self {
        Translation {
            dy,
            dx,
            mode: TranslationMode::ZeroPad,
        }
    }

    pub fn inverse(&self) -> Self {
        Translation {
            dy: -self.dy,
            dx: -self.dx,
            mode: self.mode,
        }
    }
}

/// The eight circular unit shifts.
pub fn unit_shifts() -> Vec<Translation> {
    let mut out = Vec::with_capacity(8);
    for dy in -1..=1 {
        for dx in -1..=1 {
            if dy != 0 || dx != 0 {
                out.push(Translation::circular(dy, dx));
            }
        }
    }
    out
}

pub fn translate(grid: &Grid, t: &Translation) -> Result<Grid> {
    let (h, w) = (grid.h as i64, grid.w as i64);
    if t.dy.abs() >= h.max(1) || t.dx.abs() >= w.max(1) {
        return Err(LabError::Input(format!(
            "shift ({}, {}) out of range for a {h}x{w} grid",
            t.dy, t.dx
        )));
    }
    let mut out = grid.clone();
    for b in 0..grid.batch {
        for c in 0..grid.channels {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y - t.dy, x - t.dx);
                    let v = match t.mode {
                        TranslationMode::Circular => {
                            grid.get(b, c, sy.rem_euclid(h) as usize, sx.rem_euclid(w) as usize)
                        }
                        TranslationMode::ZeroPad => {
                            if (0..h).contains(&sy) && (0..w).contains(&sx) {
                                grid.get(b, c, sy as usize, sx as usize)
                            } else {
                                0.0
                            }
                        }
                    };
                    let idx = out.index(b, c, y as usize, x as usize);
                    out.data[idx] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Translates only the patch tokens of a batch, leaving prefix tokens in place.
pub fn translate_tokens(x: &TokenBatch, t: &Translation) -> Result<TokenBatch> {
    let (grid, prefix) = roll_to_grid(x)?;
    unroll(&translate(&grid, t)?, &prefix)
}
