//! Dense row-major 2-D grids and their on-disk form.
//!
//! Grids are written as a flat little-endian `f32` file (or CSV) plus a JSON
//! sidecar describing the shape.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("grid data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("malformed grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != rows * cols {
            return Err(GridError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Value at column `gx`, row `gy`.
    pub fn get(&self, gx: usize, gy: usize) -> f64 {
        self.data[gy * self.cols + gx]
    }

    pub fn set(&mut self, gx: usize, gy: usize, v: f64) {
        self.data[gy * self.cols + gx] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_shape(&self, other: &Grid) -> Result<(), GridError> {
        if self.shape() != other.shape() {
            return Err(GridError::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    /// Raw little-endian `f32` values, row-major.
    pub fn write_f32_le(&self, path: &Path) -> Result<(), GridError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_f32_le(path: &Path, rows: usize, cols: usize) -> Result<Self, GridError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() != rows * cols * 4 {
            return Err(GridError::BadLength {
                rows,
                cols,
                len: bytes.len() / 4,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_vec(rows, cols, data)
    }

    /// One row per line, comma separated.
    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for row in self.data.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| GridError::Format(e.to_string()))?;
            match cols {
                None => cols = Some(vals.len()),
                Some(c) if c != vals.len() => {
                    return Err(GridError::Format(format!(
                        "row {rows} has {} values, expected {c}",
                        vals.len()
                    )))
                }
                _ => {}
            }
            data.extend(vals);
            rows += 1;
        }
        Self::from_vec(rows, cols.unwrap_or(0), data)
    }
}

/// JSON sidecar written next to a serialized grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    #[serde(rename = "H")]
    pub rows: usize,
    #[serde(rename = "W")]
    pub cols: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub h: Option<f64>,
    pub scene: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub components: Vec<String>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

/// Writes `<stem>.f32` and `<stem>.json`.
pub fn save_grid(stem: &Path, grid: &Grid, sidecar: &GridSidecar) -> Result<(), GridError> {
    grid.write_f32_le(&with_ext(stem, "f32"))?;
    std::fs::write(with_ext(stem, "json"), serde_json::to_string_pretty(sidecar)? + "\n")?;
    Ok(())
}

pub fn load_grid(stem: &Path) -> Result<(Grid, GridSidecar), GridError> {
    let sidecar: GridSidecar = serde_json::from_str(&std::fs::read_to_string(with_ext(stem, "json"))?)?;
    let grid = Grid::read_f32_le(&with_ext(stem, "f32"), sidecar.rows, sidecar.cols)?;
    Ok((grid, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_file_and_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_vec(2, 3, vec![0.0, 1.5, -2.25, 3.0, 4.0, 1e-3]).unwrap();
        let side = GridSidecar {
            rows: 2,
            cols: 3,
            h: Some(0.7),
            scene: "eth".into(),
            components: vec![],
        };
        save_grid(&dir.path().join("labels"), &g, &side).unwrap();
        let (back, side_back) = load_grid(&dir.path().join("labels")).unwrap();
        assert_eq!(side_back, side);
        for (a, b) in back.data().iter().zip(g.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let json = std::fs::read_to_string(dir.path().join("labels.json")).unwrap();
        assert!(json.contains("\"H\": 2") && json.contains("\"W\": 3"));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_vec(2, 2, vec![0.1, 0.2, 1.0 / 3.0, -7.0]).unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p).unwrap();
        assert_eq!(Grid::read_csv(&p).unwrap(), g);
    }

    #[test]
    fn bad_length_rejected() {
        assert!(Grid::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
