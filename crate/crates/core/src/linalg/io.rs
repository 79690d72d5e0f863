//! Matrix serialization.
//!
//! * CSV: one row per line, comma separated, each value formatted like C's
//!   `%.17g` so every `f64` round-trips exactly.
//! * Binary frame: `u64 rows`, `u64 cols`, then `rows·cols` `f64` values in
//!   row-major order, all little-endian.

use std::io::{Read, Write};

use crate::error::{LabError, Result};

use super::Matrix;

/// Formats `x` the way C's `printf("%.17g", x)` does.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    const P: i32 = 17;
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..P).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        strip_zeros(&fixed).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl Matrix {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows() {
            let line: Vec<String> = self.row(i).iter().map(|&x| format_g17(x)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Matrix> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|e| {
                        LabError::Parse(format!("line {}: {tok:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Matrix::from_rows(&rows)
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.cols() as u64).to_le_bytes())?;
        for &x in self.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Matrix> {
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| LabError::Parse(format!("frame too large: {rows}x{cols}")))?;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Matrix::from_vec(rows, cols, data)
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
