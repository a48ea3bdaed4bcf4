//! Datasets: IDX image files, dequantization and the logit transform, CSV
//! import/export, and small 2D toy densities with known entropies.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::ByteReader;
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Default padding of the logit transform.
pub const LOGIT_LAMBDA: f64 = 1e-6;

/// Which space the rows of a [`Dataset`] live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// Integer pixel intensities 0..=255.
    Raw,
    /// Dequantized values in `[0, 1)`.
    UnitInterval,
    /// `logit(λ + (1 − 2λ)x)`.
    Logit,
    /// Unconstrained real vectors (toy densities, samples).
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub space: Space,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, space: Space) -> Self {
        Self {
            x,
            space,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            x: self.x.slice(ndarray::s![..n, ..]).to_owned(),
            space: self.space,
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Array2<f64> {
        self.x.select(Axis(0), rows)
    }
}

/// Parses an IDX image file (magic `0x00000803`, big-endian dimensions).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let dim = rows * cols;
    let pixels = r.take(count * dim)?;
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes after image data", r.remaining()));
    }
    Ok(Array2::from_shape_fn((count, dim), |(i, j)| {
        pixels[i * dim + j] as f64
    }))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    let labels = r.take(count)?.to_vec();
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes after label data", r.remaining()));
    }
    Ok(labels)
}

/// Loads IDX images (and optionally labels) as a raw dataset.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let x = parse_idx_images(&std::fs::read(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&std::fs::read(p)?)?;
            if l.len() != x.nrows() {
                return Err(Error::Format {
                    offset: 4,
                    msg: format!("{} labels for {} images", l.len(), x.nrows()),
                });
            }
            Some(l)
        }
        None => None,
    };
    Ok(Dataset {
        x,
        space: Space::Raw,
        labels,
    })
}

/// Encodes images as IDX bytes.
pub fn encode_idx_images(pixels: &[u8], count: usize, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Shape(format!(
            "{} pixels for {count} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// `x ← (byte + u) / 256` with fresh `u ~ U[0, 1)` per pixel.
pub fn dequantize<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R) -> Result<Dataset> {
    if ds.space != Space::Raw {
        return Err(Error::Config(
            "dequantization expects raw pixel data".into(),
        ));
    }
    let x = ds.x.mapv(|v| {
        let u: f64 = rng.random();
        (v + u) / 256.0
    });
    Ok(Dataset {
        x,
        space: Space::UnitInterval,
        labels: ds.labels.clone(),
    })
}

/// Elementwise `logit(λ + (1−2λ)x)` with the per-row log-Jacobian
/// `Σᵢ [ln(1−2λ) − ln yᵢ − ln(1−yᵢ)]`.
pub fn logit_transform(ds: &Dataset, lambda: f64) -> Result<(Dataset, Array1<f64>)> {
    if ds.space != Space::UnitInterval {
        return Err(Error::Config(
            "logit transform expects unit-interval data".into(),
        ));
    }
    if !(0.0..0.5).contains(&lambda) {
        return Err(Error::Config(format!(
            "logit padding {lambda} outside [0, 0.5)"
        )));
    }
    let scale = 1.0 - 2.0 * lambda;
    let ln_scale = scale.ln();
    let mut logdet = Array1::zeros(ds.len());
    let mut x = ds.x.clone();
    for (mut row, ld) in x.outer_iter_mut().zip(logdet.iter_mut()) {
        let mut acc = 0.0;
        for v in row.iter_mut() {
            let y = lambda + scale * *v;
            acc += ln_scale - y.ln() - (1.0 - y).ln();
            *v = (y / (1.0 - y)).ln();
        }
        *ld = acc;
    }
    Ok((
        Dataset {
            x,
            space: Space::Logit,
            labels: ds.labels.clone(),
        },
        logdet,
    ))
}

/// Inverse of [`logit_transform`].
pub fn inverse_logit(ds: &Dataset, lambda: f64) -> Result<Dataset> {
    if ds.space != Space::Logit {
        return Err(Error::Config(
            "inverse logit expects logit-space data".into(),
        ));
    }
    let scale = 1.0 - 2.0 * lambda;
    let x =
        ds.x.mapv(|v| (crate::potential::logistic(v) - lambda) / scale);
    Ok(Dataset {
        x,
        space: Space::UnitInterval,
        labels: ds.labels.clone(),
    })
}

/// Row indices of one epoch: a seeded shuffle cut into batches (last may be short).
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Two-dimensional synthetic densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyDensity {
    TwoMoons,
    Ring,
    MixtureOf8,
}

pub const MIXTURE_RADIUS: f64 = 2.0;
pub const MIXTURE_SIGMA: f64 = 0.1;
pub const RING_RADIUS: f64 = 2.0;
pub const RING_SIGMA: f64 = 0.1;
pub const MOONS_SIGMA: f64 = 0.1;

const MOON_NODES: usize = 512;

fn log_normal_2d(dx: f64, dy: f64, sigma: f64) -> f64 {
    -(2.0 * PI * sigma * sigma).ln() - (dx * dx + dy * dy) / (2.0 * sigma * sigma)
}

fn log_mean_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + (v.iter().map(|x| (x - max).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn moon_point(upper: bool, t: f64) -> (f64, f64) {
    if upper {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    }
}

impl ToyDensity {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "two-moons" => Ok(Self::TwoMoons),
            "ring" => Ok(Self::Ring),
            "mixture-of-8" => Ok(Self::MixtureOf8),
            other => Err(Error::Config(format!(
                "unknown toy density `{other}` (expected two-moons, ring or mixture-of-8)"
            ))),
        }
    }

    /// Draws `n` points.
    ///
    /// * mixture-of-8: equal-weight isotropic Gaussians (σ = 0.1) centred on a
    ///   circle of radius 2 at angles `2πk/8`.
    /// * ring: angle uniform, radius `2 + 0.1·ε`.
    /// * two-moons: half the mass on each arc `(cos t, sin t)` and
    ///   `(1 − cos t, ½ − sin t)`, `t ~ U[0, π]`, plus Gaussian noise σ = 0.1.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dataset {
        let mut x = Array2::zeros((n, 2));
        for mut row in x.outer_iter_mut() {
            let e1: f64 = StandardNormal.sample(rng);
            let e2: f64 = StandardNormal.sample(rng);
            let (px, py) = match self {
                Self::MixtureOf8 => {
                    let k = rng.random_range(0..8) as f64;
                    let th = 2.0 * PI * k / 8.0;
                    (
                        MIXTURE_RADIUS * th.cos() + MIXTURE_SIGMA * e1,
                        MIXTURE_RADIUS * th.sin() + MIXTURE_SIGMA * e2,
                    )
                }
                Self::Ring => {
                    let th = rng.random_range(0.0..2.0 * PI);
                    let r = RING_RADIUS + RING_SIGMA * e1;
                    (r * th.cos(), r * th.sin())
                }
                Self::TwoMoons => {
                    let upper = rng.random_bool(0.5);
                    let t = rng.random_range(0.0..PI);
                    let (cx, cy) = moon_point(upper, t);
                    (cx + MOONS_SIGMA * e1, cy + MOONS_SIGMA * e2)
                }
            };
            row[0] = px;
            row[1] = py;
        }
        Dataset::new(x, Space::Real)
    }

    /// Log-density of the generating distribution at `x`.
    ///
    /// Exact for the mixture and ring; for two-moons the arc integral uses
    /// a 512-node midpoint rule.
    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let (px, py) = (x[0], x[1]);
        match self {
            Self::MixtureOf8 => log_mean_exp((0..8).map(|k| {
                let th = 2.0 * PI * k as f64 / 8.0;
                log_normal_2d(
                    px - MIXTURE_RADIUS * th.cos(),
                    py - MIXTURE_RADIUS * th.sin(),
                    MIXTURE_SIGMA,
                )
            })),
            Self::Ring => {
                let r = (px * px + py * py).sqrt();
                if r == 0.0 {
                    // integrable singularity of weight ~e^{-200}; treat the point as empty
                    return f64::NEG_INFINITY;
                }
                // radial normal folded through the origin, spread over the circle
                let norm = |d: f64| {
                    (-(d * d) / (2.0 * RING_SIGMA * RING_SIGMA)).exp()
                        / (RING_SIGMA * (2.0 * PI).sqrt())
                };
                ((norm(r - RING_RADIUS) + norm(r + RING_RADIUS)) / (2.0 * PI * r)).ln()
            }
            Self::TwoMoons => log_mean_exp((0..2 * MOON_NODES).map(|i| {
                let upper = i < MOON_NODES;
                let t = PI * ((i % MOON_NODES) as f64 + 0.5) / MOON_NODES as f64;
                let (cx, cy) = moon_point(upper, t);
                log_normal_2d(px - cx, py - cy, MOONS_SIGMA)
            })),
        }
    }

    pub fn log_density_rows(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.map_axis(Axis(1), |r| self.log_density(r))
    }

    /// Differential entropy `−∫ p ln p` by the trapezoid rule on a square grid.
    ///
    /// The integrand decays like a Gaussian of width 0.1 away from the
    /// support, so a spacing of ~0.01 is already far below one part in 10⁸.
    pub fn entropy_by_quadrature(&self, spacing: f64) -> f64 {
        let (lo_x, hi_x, lo_y, hi_y) = match self {
            Self::MixtureOf8 => (-3.0, 3.0, -3.0, 3.0),
            Self::Ring => (-3.0, 3.0, -3.0, 3.0),
            Self::TwoMoons => (-1.8, 2.8, -1.3, 1.8),
        };
        let nx = ((hi_x - lo_x) / spacing).round() as usize;
        let ny = ((hi_y - lo_y) / spacing).round() as usize;
        let hx = (hi_x - lo_x) / nx as f64;
        let hy = (hi_y - lo_y) / ny as f64;
        let mut total = 0.0;
        let mut pt = Array1::zeros(2);
        for i in 0..=nx {
            let wx = if i == 0 || i == nx { 0.5 } else { 1.0 };
            pt[0] = lo_x + i as f64 * hx;
            for j in 0..=ny {
                let wy = if j == 0 || j == ny { 0.5 } else { 1.0 };
                pt[1] = lo_y + j as f64 * hy;
                let lp = self.log_density(pt.view());
                if lp > -700.0 {
                    total -= wx * wy * lp.exp() * lp;
                }
            }
        }
        total * hx * hy
    }
}

/// Writes rows as CSV with a `x0,x1,…` header, shortest round-trip formatting.
pub fn write_csv(path: &Path, x: ArrayView2<f64>) -> Result<()> {
    std::fs::write(path, to_csv(x, "x"))?;
    Ok(())
}

pub fn to_csv(x: ArrayView2<f64>, prefix: &str) -> String {
    let mut s = String::new();
    let header: Vec<String> = (0..x.ncols()).map(|j| format!("{prefix}{j}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in x.outer_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
    s
}

/// Parses numeric CSV; a non-numeric first line is treated as a header.
/// Errors name the 1-based line number.
pub fn parse_csv(text: &str) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    row: i + 1,
                    msg: e.to_string(),
                })
            }
        };
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    row: i + 1,
                    msg: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let width = width.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, width), data).expect("row widths checked"))
}

pub fn read_csv(path: &Path) -> Result<Array2<f64>> {
    parse_csv(&std::fs::read_to_string(path)?)
}
