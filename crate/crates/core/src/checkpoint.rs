//! Versioned plain-text checkpoint format.
//!
//! ```text
//! induction-lab checkpoint v1
//! N 16
//! N_trg 2
//! L 40
//! D 72
//! W_KQ 72 72
//! <72 rows of 72 space-separated values>
//! W_V 16 72
//! <16 rows of 72 space-separated values>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! a save/load cycle is bitwise exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::SamplerConfig;
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::model::ModelParams;

pub const MAGIC: &str = "induction-lab checkpoint v1";

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "{name} {} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

/// Serializes parameters to the checkpoint text format.
pub fn to_string(params: &ModelParams) -> String {
    let c = params.cfg;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "N {}", c.n);
    let _ = writeln!(out, "N_trg {}", c.n_trg);
    let _ = writeln!(out, "L {}", c.l);
    let _ = writeln!(out, "D {}", c.d());
    write_matrix(&mut out, "W_KQ", &params.w_kq);
    write_matrix(&mut out, "W_V", &params.w_v);
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim_end()))
            .ok_or_else(|| LabError::parse(self.path, format!("unexpected end of file, expected {what}")))
    }

    fn header(&mut self, key: &str) -> Result<usize> {
        let (no, line) = self.next(key)?;
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(k), Some(v), None) if k == key => v
                .parse()
                .map_err(|_| LabError::parse(self.path, format!("line {no}: bad value for {key}"))),
            _ => Err(LabError::parse(self.path, format!("line {no}: expected `{key} <int>`"))),
        }
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let (no, line) = self.next(name)?;
        let expected = format!("{name} {rows} {cols}");
        if line != expected {
            return Err(LabError::parse(
                self.path,
                format!("line {no}: expected `{expected}`, found `{line}`"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (no, line) = self.next(name)?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| LabError::parse(self.path, format!("line {no}: bad number `{tok}`")))?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(LabError::parse(self.path, format!("line {no}: expected {cols} values")));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// Parses the checkpoint text format. `path` is only used in error messages.
pub fn from_str(text: &str, path: &Path) -> Result<ModelParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        path,
    };
    let (_, magic) = lines.next("header")?;
    if magic != MAGIC {
        return Err(LabError::parse(
            path,
            format!("unsupported checkpoint header `{magic}`"),
        ));
    }
    let n = lines.header("N")?;
    let n_trg = lines.header("N_trg")?;
    let l = lines.header("L")?;
    let d = lines.header("D")?;
    let cfg = SamplerConfig::new(n, n_trg, l)?;
    if d != cfg.d() {
        return Err(LabError::parse(path, format!("D = {d} but L + 2N = {}", cfg.d())));
    }
    let w_kq = lines.matrix("W_KQ", d, d)?;
    let w_v = lines.matrix("W_V", n, d)?;
    ModelParams::new(cfg, w_kq, w_v)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_string(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LabError::parse(path, "file not found"),
        _ => LabError::Io(e),
    })?;
    from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams {
        let cfg = SamplerConfig::new(4, 1, 6).unwrap();
        let d = cfg.d();
        let w_kq = Matrix::from_fn(d, d, |i, j| (i as f64 * 0.1 + 1.0 / (j as f64 + 3.0)).sin() * 1e7);
        let w_v = Matrix::from_fn(4, d, |i, j| -(i as f64 + 1.0) / (j as f64 + 7.0));
        ModelParams::new(cfg, w_kq, w_v).unwrap()
    }

    #[test]
    fn text_round_trip_is_bitwise() {
        let p = sample();
        let back = from_str(&to_string(&p), Path::new("mem")).unwrap();
        assert_eq!(back, p);
        for (a, b) in p.w_kq.as_slice().iter().zip(back.w_kq.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&sample(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), sample());
    }

    #[test]
    fn rejects_bad_header_and_dims() {
        let text = to_string(&sample());
        assert!(from_str(&text.replace(MAGIC, "other v9"), Path::new("x")).is_err());
        assert!(from_str(&text.replace("D 14", "D 15"), Path::new("x")).is_err());
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(from_str(&truncated, Path::new("x")).is_err());
        assert!(load(Path::new("/nonexistent/ckpt")).is_err());
    }
}
