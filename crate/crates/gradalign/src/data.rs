//! Synthetic dataset generators and CSV persistence.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{modified_target, LossKind};
use crate::rng::{self, Stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// A supervised dataset with its loss kind and the target matrix the
/// alignment certificate uses.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub kind: LossKind,
    pub y_ell: Matrix,
    pub name: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        y: Matrix,
        kind: LossKind,
        name: impl Into<String>,
        seed: u64,
    ) -> Result<Dataset> {
        if x.rows() != y.rows() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                expected: format!("{} target rows", x.rows()),
                got: format!("{}", y.rows()),
            });
        }
        if x.rows() == 0 {
            return Err(Error::Contract {
                op: "Dataset::new",
                msg: "empty dataset".into(),
            });
        }
        let y_ell = modified_target(kind, &y)?.y_ell;
        Ok(Dataset {
            x,
            y,
            kind,
            y_ell,
            name: name.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same samples under a different loss kind (recomputes the modified
    /// target).
    pub fn with_kind(&self, kind: LossKind) -> Result<Dataset> {
        Dataset::new(self.x.clone(), self.y.clone(), kind, self.name.clone(), self.seed)
    }

    /// `vec(Y_ell)` in the column-stacking convention.
    pub fn y_ell_vec(&self) -> Vec<f64> {
        stack_columns(&self.y_ell)
    }
}

/// Column-stacking vectorization: entry `(i, j)` goes to position `j*n + i`.
pub fn stack_columns(m: &Matrix) -> Vec<f64> {
    let mut v = vec![0.0; m.rows() * m.cols()];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            v[j * m.rows() + i] = m.at(i, j);
        }
    }
    v
}

/// Two interleaved half-circles, `n/2` points each at evenly spaced angles:
/// `(cos t, sin t)` labeled 0 and `(1 - cos t, 0.5 - sin t)` labeled 1,
/// plus optional per-coordinate Gaussian noise.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Contract {
            op: "gen_two_moons",
            msg: format!("n must be positive and even, got {n}"),
        });
    }
    if noise_std < 0.0 {
        return Err(Error::Contract {
            op: "gen_two_moons",
            msg: "noise_std must be nonnegative".into(),
        });
    }
    let half = n / 2;
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    let angle = |k: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (half - 1) as f64
        }
    };
    for k in 0..half {
        let t = angle(k);
        x.push(t.cos());
        x.push(t.sin());
        y.push(0.0);
    }
    for k in 0..half {
        let t = angle(k);
        x.push(1.0 - t.cos());
        x.push(0.5 - t.sin());
        y.push(1.0);
    }
    if noise_std > 0.0 {
        let mut rng = rng::stream(seed, Stream::Data);
        for v in x.iter_mut() {
            *v += noise_std * rng::normal(&mut rng);
        }
    }
    Dataset::new(
        Matrix::new(n, 2, x)?,
        Matrix::new(n, 1, y)?,
        LossKind::BinaryCe,
        "two_moons",
        seed,
    )
}

/// Scalar inputs uniform on `[-1, 1]` labeled by the sign of a sine wave:
/// `y = 1{sin(freq * x) < 0}`.
pub fn gen_sine(n: usize, freq: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !(freq > 0.0) {
        return Err(Error::Contract {
            op: "gen_sine",
            msg: format!("need n >= 1 and freq > 0, got n={n}, freq={freq}"),
        });
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.gen_range(-1.0..1.0);
        x.push(xi);
        y.push(if (freq * xi).sin() < 0.0 { 1.0 } else { 0.0 });
    }
    Dataset::new(
        Matrix::new(n, 1, x)?,
        Matrix::new(n, 1, y)?,
        LossKind::BinaryCe,
        "sine",
        seed,
    )
}

/// Standard-normal inputs with uniformly random binary labels; the
/// hard-to-fit control case.
pub fn gen_random(n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(Error::Contract {
            op: "gen_random",
            msg: "need n, dim >= 1".into(),
        });
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let x = rng::normal_vec(&mut rng, n * dim);
    let y: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
        .collect();
    Dataset::new(
        Matrix::new(n, dim, x)?,
        Matrix::new(n, 1, y)?,
        LossKind::BinaryCe,
        "random",
        seed,
    )
}

/// Sidecar metadata written next to dataset CSVs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    pub generator: String,
    pub args: serde_json::Value,
}

/// Writes `x0..x{mx-1},y0..y{my-1}` rows; floats in shortest round-trip
/// decimal (lossless for f64, never more than 17 significant digits).
pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.x.cols() {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&format!("x{j}"));
    }
    for j in 0..ds.y.cols() {
        out.push(',');
        out.push_str(&format!("y{j}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        for (j, v) in ds.x.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        for v in ds.y.row(i) {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a dataset CSV written by [`save_csv`] (dot decimal separator only).
pub fn load_csv(path: &Path, kind: LossKind, seed: u64) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let mx = cols.iter().take_while(|c| c.starts_with('x')).count();
    let my = cols.len() - mx;
    if mx == 0 || my == 0 {
        return Err(Error::Schema(format!(
            "header must be x0..x{{m-1}},y0..y{{k-1}}, got {header:?}"
        )));
    }
    for (j, c) in cols.iter().enumerate() {
        let want = if j < mx {
            format!("x{j}")
        } else {
            format!("y{}", j - mx)
        };
        if *c != want {
            return Err(Error::Schema(format!(
                "column {j} should be {want}, got {c:?}"
            )));
        }
    }
    let mut xdata = Vec::new();
    let mut ydata = Vec::new();
    let mut n = 0usize;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("field {j}: {e}"),
            })?;
            if j < mx {
                xdata.push(v);
            } else {
                ydata.push(v);
            }
        }
        n += 1;
    }
    Dataset::new(
        Matrix::new(n, mx, xdata)?,
        Matrix::new(n, my, ydata)?,
        kind,
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        seed,
    )
}
