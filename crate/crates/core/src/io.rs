//! File formats: the tensor text format, CSV matrices, sparse observation
//! lists (the real-data ingestion path), JSON plan/config files, and PGM
//! heatmaps.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! export→ingest cycle is lossless. All indices in text formats are 0-based.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{FiberGroupPlan, FiberMask, SlabPlan};
use crate::tensor::Tensor3;

/// Tensor text format: header line `I J K`, then K frontal slabs, each I
/// rows of J whitespace-separated values.
pub fn tensor_to_string(t: &Tensor3) -> String {
    let (ni, nj, nk) = t.dims();
    let mut out = String::new();
    let _ = writeln!(out, "{ni} {nj} {nk}");
    for k in 0..nk {
        for i in 0..ni {
            for j in 0..nj {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}", t.get(i, j, k));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn tensor_from_str(text: &str) -> Result<Tensor3> {
    let mut tokens = text.split_whitespace();
    let mut dim = |name: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: format!("missing dimension {name}") })?
            .parse::<usize>()
            .map_err(|e| Error::Parse { line: 1, msg: format!("bad dimension {name}: {e}") })
    };
    let (ni, nj, nk) = (dim("I")?, dim("J")?, dim("K")?);
    let expected = ni * nj * nk;
    let mut t = Tensor3::zeros((ni, nj, nk));
    let mut count = 0usize;
    for tok in tokens {
        if count >= expected {
            return Err(Error::Parse { line: 0, msg: "trailing values after tensor body".into() });
        }
        let v: f64 = tok
            .parse()
            .map_err(|e| Error::Parse { line: 0, msg: format!("bad value '{tok}': {e}") })?;
        // Body order: slab-major, then row i, then column j.
        let k = count / (ni * nj);
        let rem = count % (ni * nj);
        let i = rem / nj;
        let j = rem % nj;
        t.set(i, j, k, v);
        count += 1;
    }
    if count != expected {
        return Err(Error::Parse {
            line: 0,
            msg: format!("tensor body has {count} values, expected {expected}"),
        });
    }
    t.check_finite()?;
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    fs::write(path, tensor_to_string(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor3> {
    tensor_from_str(&fs::read_to_string(path)?)
}

/// Row-major CSV without a header.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str, header: bool) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if header && lineno == 0 {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad value '{tok}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("row has {} values, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, msg: "empty matrix".into() });
    }
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_csv(m))?;
    Ok(())
}

pub fn read_matrix_csv(path: impl AsRef<Path>, header: bool) -> Result<DMatrix<f64>> {
    matrix_from_csv(&fs::read_to_string(path)?, header)
}

/// Raw observations with their sampling weights.
#[derive(Debug, Clone)]
pub struct Observations {
    pub y: Tensor3,
    pub mask: FiberMask,
}

/// Observation text format: header `I J K`, then lines `i j k value [weight]`
/// (weight defaults to 1). This doubles as the generic real-data ingestion
/// path. Duplicate cells have their values averaged; the weight of the
/// last-seen line wins.
pub fn observations_from_str(text: &str) -> Result<Observations> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty observation file".into() })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>().map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad header dimension '{tok}': {e}"),
            })
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Parse { line: 1, msg: "header must be `I J K`".into() });
    }
    let (ni, nj, nk) = (dims[0], dims[1], dims[2]);

    let mut sums = Tensor3::zeros((ni, nj, nk));
    let mut counts = vec![0u32; ni * nj * nk];
    let mut weights = Tensor3::zeros((ni, nj, nk));
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 && toks.len() != 5 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `i j k value [weight]`, got {} fields", toks.len()),
            });
        }
        let idx = |t: &str, bound: usize, name: &str| -> Result<usize> {
            let v: usize = t.parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad index '{t}': {e}"),
            })?;
            if v >= bound {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("{name} index {v} out of range (size {bound})"),
                });
            }
            Ok(v)
        };
        let (i, j, k) = (idx(toks[0], ni, "i")?, idx(toks[1], nj, "j")?, idx(toks[2], nk, "k")?);
        let value: f64 = toks[3].parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad value '{}': {e}", toks[3]),
        })?;
        let weight: f64 = match toks.get(4) {
            Some(t) => t.parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad weight '{t}': {e}"),
            })?,
            None => 1.0,
        };
        if weight <= 0.0 {
            return Err(Error::Parse { line: lineno, msg: "weight must be positive".into() });
        }
        let flat = sums.index(i, j, k);
        sums.data_mut()[flat] += value;
        counts[flat] += 1;
        weights.set(i, j, k, weight);
    }
    let mut y = Tensor3::zeros((ni, nj, nk));
    for (flat, &n) in counts.iter().enumerate() {
        if n > 0 {
            y.data_mut()[flat] = sums.data()[flat] / n as f64;
        }
    }
    Ok(Observations { y, mask: FiberMask::new(weights)? })
}

pub fn observations_to_string(obs: &Observations) -> String {
    let (ni, nj, nk) = obs.y.dims();
    let mut out = String::new();
    let _ = writeln!(out, "{ni} {nj} {nk}");
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                let w = obs.mask.weight(i, j, k);
                if w > 0.0 {
                    let _ = writeln!(out, "{i} {j} {k} {} {w}", obs.y.get(i, j, k));
                }
            }
        }
    }
    out
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<Observations> {
    observations_from_str(&fs::read_to_string(path)?)
}

pub fn write_observations(path: impl AsRef<Path>, obs: &Observations) -> Result<()> {
    fs::write(path, observations_to_string(obs))?;
    Ok(())
}

/// A sampling plan file: either a slab plan `{s1, s2, s3, s4}` or a fiber
/// group plan `{groups: [{I, J, K}, …]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanFile {
    Slab(SlabPlan),
    Groups(FiberGroupPlan),
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// 8-bit grayscale binary PGM, min-max scaled.
pub fn matrix_to_pgm(m: &DMatrix<f64>) -> Vec<u8> {
    let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", m.ncols(), m.nrows()).into_bytes();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push((255.0 * (m[(i, j)] - lo) / span).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_pgm(m))?;
    Ok(())
}
