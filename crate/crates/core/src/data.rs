//! Trajectories, window extraction and the CSV/manifest file formats.
//!
//! Row `k` of a trajectory holds the input `u[k]` applied after the sample and the
//! output `y[k]`. A window starting at offset `t` with horizon `m` uses the inputs
//! `u[t..t+m]`, the in-window outputs `y[t+1..t+m]` and the prediction target `y[t+m]`.
//! A trajectory with `T` rows therefore yields `T - m` windows at stride one.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Index of the first sample.
    pub t0: usize,
    /// Inputs, one per row; empty for autonomous systems.
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    /// Sampling period; metadata only.
    pub dt: f64,
}

impl Trajectory {
    pub fn new(u: Vec<DVector<f64>>, y: Vec<DVector<f64>>, dt: f64) -> Result<Self> {
        let traj = Trajectory { t0: 0, u, y, dt };
        traj.validate()?;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.u.first().map_or(0, |u| u.len())
    }

    pub fn output_dim(&self) -> usize {
        self.y.first().map_or(0, |y| y.len())
    }

    fn input(&self, k: usize) -> DVector<f64> {
        self.u.get(k).cloned().unwrap_or_else(|| DVector::zeros(0))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.u.is_empty() && self.u.len() != self.y.len() {
            return Err(Error::Data(format!(
                "trajectory has {} inputs but {} outputs",
                self.u.len(),
                self.y.len()
            )));
        }
        let (q, p) = (self.input_dim(), self.output_dim());
        for (k, y) in self.y.iter().enumerate() {
            if y.len() != p {
                return Err(Error::dimension(format!("output row {k}"), p, y.len()));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite output in row {k}")));
            }
        }
        for (k, u) in self.u.iter().enumerate() {
            if u.len() != q {
                return Err(Error::dimension(format!("input row {k}"), q, u.len()));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite input in row {k}")));
            }
        }
        Ok(())
    }
}

/// Where a window came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub trajectory: usize,
    pub offset: usize,
}

/// One data subsequence of horizon `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `m` inputs; input `k` drives the transition from state `k` to `k + 1`.
    pub u_win: Vec<DVector<f64>>,
    /// `m - 1` outputs measured at states `1..m`.
    pub z: Vec<DVector<f64>>,
    /// Output at state `m`, the prediction target.
    pub y_target: DVector<f64>,
    pub origin: WindowOrigin,
}

impl Window {
    /// Horizon `m`.
    pub fn horizon(&self) -> usize {
        self.u_win.len()
    }
}

/// Number of windows a trajectory of `len` rows yields.
pub fn window_count(len: usize, m: usize, stride: usize) -> usize {
    if len > m {
        (len - m - 1) / stride + 1
    } else {
        0
    }
}

/// Extracts windows at offsets `0, stride, 2 stride, ...` from each trajectory, in
/// trajectory order then offset order.
pub fn extract_windows(trajs: &[Trajectory], m: usize, stride: usize) -> Result<Vec<Window>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "window horizon must be at least 2, got {m}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("window stride must be at least 1".into()));
    }
    let mut windows = Vec::new();
    for (id, traj) in trajs.iter().enumerate() {
        traj.validate()?;
        for w in 0..window_count(traj.len(), m, stride) {
            let t = w * stride;
            windows.push(Window {
                u_win: (t..t + m).map(|k| traj.input(k)).collect(),
                z: traj.y[t + 1..t + m].to_vec(),
                y_target: traj.y[t + m].clone(),
                origin: WindowOrigin {
                    trajectory: id,
                    offset: t,
                },
            });
        }
    }
    Ok(windows)
}

fn header(q: usize, p: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((0..q).map(|i| format!("u_{i}")))
        .chain((0..p).map(|i| format!("y_{i}")))
        .collect()
}

/// Writes a trajectory as `t,u_0..u_{q-1},y_0..y_{p-1}`. Values use the shortest
/// representation that parses back to the same double.
pub fn save_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    traj.validate()?;
    let (q, p) = (traj.input_dim(), traj.output_dim());
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header(q, p).join(","))?;
    let mut line = String::new();
    for k in 0..traj.len() {
        use std::fmt::Write as _;
        line.clear();
        let t = (traj.t0 + k) as f64 * traj.dt;
        let _ = write!(line, "{t:?}");
        for v in traj.u.get(k).into_iter().flat_map(|u| u.iter()).chain(traj.y[k].iter()) {
            let _ = write!(line, ",{v:?}");
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trajectory written by [`save_trajectory_csv`].
pub fn load_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let head = reader.headers()?.clone();
    let names: Vec<&str> = head.iter().collect();
    if names.first() != Some(&"t") {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `t`".into(),
        });
    }
    let q = names.iter().filter(|c| c.starts_with("u_")).count();
    let p = names.len() - 1 - q;
    if names != header(q, p).iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", header(q, p).join(",")),
        });
    }
    if p == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no output columns".into(),
        });
    }

    let mut times = Vec::new();
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != names.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        let mut values = Vec::with_capacity(record.len());
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse `{field}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value on line {line}")));
            }
            values.push(v);
        }
        times.push(values[0]);
        if q > 0 {
            u.push(DVector::from_column_slice(&values[1..1 + q]));
        }
        y.push(DVector::from_column_slice(&values[1 + q..]));
    }
    let dt = if times.len() >= 2 {
        (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
    } else {
        1.0
    };
    let t0 = match times.first() {
        Some(&t) if dt > 0.0 => (t / dt).round().max(0.0) as usize,
        _ => 0,
    };
    let traj = Trajectory { t0, u, y, dt };
    traj.validate()?;
    Ok(traj)
}

/// Dataset manifest: member CSV files (relative to the manifest) and windowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub trajectories: Vec<PathBuf>,
    pub m: usize,
    pub stride: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(Self, Vec<Trajectory>)> {
        let manifest: DatasetManifest = serde_json::from_reader(File::open(path)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let trajs = manifest
            .trajectories
            .iter()
            .map(|p| load_trajectory_csv(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        Ok((manifest, trajs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }
}
