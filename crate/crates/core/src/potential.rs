//! Scalar potential `φ(x) = aᵀ·softplus(Wx + b) + c` with one hidden layer.
//!
//! The velocity field of the flow is `∇φ` and the log-density rate is `−∇²φ`,
//! so everything downstream needs the value, gradient and Laplacian of the
//! network, plus their parameter derivatives. All of these have closed forms
//! for a single softplus layer with `z = Wx + b`, `σ = logistic`:
//!
//! ```text
//! ∇φ   = Wᵀ (a ⊙ σ(z))
//! ∇²φ  = Σₖ aₖ σ′(zₖ) ‖Wₖ‖²        σ′ = σ(1 − σ)
//! ```
//!
//! Costs are O(h·N) per point, with no Hessian ever formed.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::binio::{put_f64s, put_u32, put_u64, ByteReader};
use crate::error::{Error, Result};

const SECTION_VERSION: u32 = 1;

/// Numerically stable `ln(1 + eᶻ)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Numerically stable logistic function `1 / (1 + e⁻ᶻ)`.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weights of the potential network.
///
/// Also used as the container for parameter gradients and optimizer moments,
/// since those share the exact same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialParams {
    /// Hidden-by-input weight matrix (h × N).
    pub w: Array2<f64>,
    /// Hidden biases (h).
    pub b: Array1<f64>,
    /// Output weights (h).
    pub a: Array1<f64>,
    /// Output offset.
    pub c: f64,
}

/// Value, gradient and Laplacian of the potential at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialEval {
    pub value: f64,
    pub grad: Array1<f64>,
    pub laplacian: f64,
}

/// Row-wise evaluation of a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub value: Array1<f64>,
    pub grad: Array2<f64>,
    pub laplacian: Array1<f64>,
}

impl BatchEval {
    pub fn row(&self, i: usize) -> PotentialEval {
        PotentialEval {
            value: self.value[i],
            grad: self.grad.row(i).to_owned(),
            laplacian: self.laplacian[i],
        }
    }
}

impl PotentialParams {
    pub fn new(w: Array2<f64>, b: Array1<f64>, a: Array1<f64>, c: f64) -> Result<Self> {
        let (h, n) = w.dim();
        if h == 0 || n == 0 {
            return Err(Error::Shape(format!("empty weight matrix {h}x{n}")));
        }
        if b.len() != h || a.len() != h {
            return Err(Error::Shape(format!(
                "hidden width {h} but b has {} and a has {} entries",
                b.len(),
                a.len()
            )));
        }
        let p = Self { w, b, a, c };
        p.check_finite()?;
        Ok(p)
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w: Array2::zeros((hidden, dim)),
            b: Array1::zeros(hidden),
            a: Array1::zeros(hidden),
            c: 0.0,
        }
    }

    /// Uniform fan-in initialization: `W ~ U(±1/√N)`, `a ~ U(±1/√h)`, `b = 0`, `c = 0`.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let sw = 1.0 / (dim as f64).sqrt();
        let sa = 1.0 / (hidden as f64).sqrt();
        let w = Array2::from_shape_fn((hidden, dim), |_| rng.random_range(-sw..sw));
        let a = Array1::from_shape_fn(hidden, |_| rng.random_range(-sa..sa));
        Self {
            w,
            b: Array1::zeros(hidden),
            a,
            c: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.hidden() * (self.dim() + 2) + 1
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.hidden())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.w.dim() == other.w.dim()
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "potential parameters",
                step: None,
                row: None,
                index: Some(i),
            });
        }
        Ok(())
    }

    /// Iterates over all parameters in flat order: `W` (row-major), `b`, `a`, `c`.
    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.w
            .iter()
            .chain(self.b.iter())
            .chain(self.a.iter())
            .chain(std::iter::once(&self.c))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.w
            .iter_mut()
            .chain(self.b.iter_mut())
            .chain(self.a.iter_mut())
            .chain(std::iter::once(&mut self.c))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(dim: usize, hidden: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden);
        if flat.len() != p.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                p.num_params(),
                flat.len()
            )));
        }
        for (dst, src) in p.iter_mut().zip(flat) {
            *dst = *src;
        }
        p.check_finite()?;
        Ok(p)
    }

    /// Flat-index accessor, same order as [`PotentialParams::iter`].
    pub fn get(&self, i: usize) -> f64 {
        *self.iter().nth(i).expect("parameter index out of range")
    }

    pub fn set(&mut self, i: usize, v: f64) {
        *self
            .iter_mut()
            .nth(i)
            .expect("parameter index out of range") = v;
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        self.w.scaled_add(alpha, &other.w);
        self.b.scaled_add(alpha, &other.b);
        self.a.scaled_add(alpha, &other.a);
        self.c += alpha * other.c;
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other.iter()).map(|(x, y)| x * y).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// FNV-1a hash over the parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv_start();
        h = fnv_mix(h, self.dim() as u64);
        h = fnv_mix(h, self.hidden() as u64);
        for v in self.iter() {
            h = fnv_mix(h, v.to_bits());
        }
        h
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::Shape(format!(
                "input has dimension {n}, potential expects {}",
                self.dim()
            )));
        }
        Ok(())
    }

    fn preactivation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w.t());
        z += &self.b;
        z
    }

    fn row_norms(&self) -> Array1<f64> {
        self.w.map_axis(Axis(1), |r| r.dot(&r))
    }

    pub fn eval(&self, x: ArrayView1<f64>) -> Result<PotentialEval> {
        let x2 = x.insert_axis(Axis(0));
        Ok(self.eval_batch(x2)?.row(0))
    }

    pub fn eval_batch(&self, x: ArrayView2<f64>) -> Result<BatchEval> {
        self.check_dim(x.ncols())?;
        let z = self.preactivation(x);
        let an = &self.row_norms() * &self.a;
        let rows = x.nrows();
        let mut value = Array1::from_elem(rows, self.c);
        let mut laplacian = Array1::zeros(rows);
        let mut m = Array2::zeros(z.raw_dim());
        for r in 0..rows {
            let mut v = 0.0;
            let mut lap = 0.0;
            for k in 0..self.hidden() {
                let zk = z[[r, k]];
                let s = logistic(zk);
                v += self.a[k] * softplus(zk);
                lap += an[k] * s * (1.0 - s);
                m[[r, k]] = self.a[k] * s;
            }
            value[r] += v;
            laplacian[r] = lap;
        }
        let grad = m.dot(&self.w);
        let out = BatchEval {
            value,
            grad,
            laplacian,
        };
        check_rows("potential value", out.value.view())?;
        check_matrix("potential gradient", out.grad.view())?;
        check_rows("potential laplacian", out.laplacian.view())?;
        Ok(out)
    }

    /// Gradient and Laplacian only; the value is not needed to drive the flow.
    pub fn grad_lap_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_dim(x.ncols())?;
        let mut z = self.preactivation(x);
        let an = &self.row_norms() * &self.a;
        let mut laplacian = Array1::zeros(x.nrows());
        for (mut zr, lap) in z.outer_iter_mut().zip(laplacian.iter_mut()) {
            let mut acc = 0.0;
            for ((zk, ak), ank) in zr.iter_mut().zip(&self.a).zip(&an) {
                let s = logistic(*zk);
                acc += ank * s * (1.0 - s);
                *zk = ak * s;
            }
            *lap = acc;
        }
        let grad = z.dot(&self.w);
        check_matrix("potential gradient", grad.view())?;
        check_rows("potential laplacian", laplacian.view())?;
        Ok((grad, laplacian))
    }

    /// Vector-Jacobian product of `S = w_gradᵀ ∇φ(x) + w_lap ∇²φ(x)`.
    ///
    /// Returns `∂S/∂θ` shaped like the parameters and `∂S/∂x`.
    pub fn param_vjp(
        &self,
        x: ArrayView1<f64>,
        w_grad: ArrayView1<f64>,
        w_lap: f64,
    ) -> Result<(PotentialParams, Array1<f64>)> {
        if w_grad.len() != self.dim() {
            return Err(Error::Shape(format!(
                "gradient weight has length {}, expected {}",
                w_grad.len(),
                self.dim()
            )));
        }
        let mut acc = self.zeros_like();
        let xbar = self.vjp_batch(
            x.insert_axis(Axis(0)),
            w_grad.insert_axis(Axis(0)),
            ndarray::aview1(&[w_lap]),
            &mut acc,
        )?;
        Ok((acc, xbar.row(0).to_owned()))
    }

    /// Batched [`PotentialParams::param_vjp`] summed over rows.
    ///
    /// The parameter gradient is accumulated into `acc`; the per-row input
    /// cotangents are returned.
    pub fn vjp_batch(
        &self,
        x: ArrayView2<f64>,
        w_grad: ArrayView2<f64>,
        w_lap: ArrayView1<f64>,
        acc: &mut PotentialParams,
    ) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        if w_grad.dim() != x.dim() || w_lap.len() != x.nrows() {
            return Err(Error::Shape(
                "cotangent shapes do not match the batch".into(),
            ));
        }
        if !acc.same_shape(self) {
            return Err(Error::Shape(
                "gradient accumulator has the wrong shape".into(),
            ));
        }
        let h = self.hidden();
        let z = self.preactivation(x);
        let u = w_grad.dot(&self.w.t());
        let norms = self.row_norms();
        let mut dz = Array2::<f64>::zeros(z.raw_dim());
        let mut m = Array2::<f64>::zeros(z.raw_dim());
        let mut diag = Array1::<f64>::zeros(h);
        for r in 0..x.nrows() {
            let wl = w_lap[r];
            for k in 0..h {
                let s = logistic(z[[r, k]]);
                let s1 = s * (1.0 - s);
                let s2 = s1 * (1.0 - 2.0 * s);
                let urk = u[[r, k]];
                let ak = self.a[k];
                acc.a[k] += s * urk + wl * s1 * norms[k];
                let d = ak * (s1 * urk + wl * s2 * norms[k]);
                dz[[r, k]] = d;
                acc.b[k] += d;
                m[[r, k]] = ak * s;
                diag[k] += wl * s1;
            }
        }
        general_mat_mul(1.0, &dz.t(), &x, 1.0, &mut acc.w);
        general_mat_mul(1.0, &m.t(), &w_grad, 1.0, &mut acc.w);
        for k in 0..h {
            let coef = 2.0 * self.a[k] * diag[k];
            if coef != 0.0 {
                acc.w.row_mut(k).scaled_add(coef, &self.w.row(k));
            }
        }
        let xbar = dz.dot(&self.w);
        check_matrix("input cotangent", xbar.view())?;
        Ok(xbar)
    }

    /// Serializes the parameter section: version, N, h, then little-endian `f64`s.
    pub fn write_section(&self, out: &mut Vec<u8>) {
        put_u32(out, SECTION_VERSION);
        put_u64(out, self.dim() as u64);
        put_u64(out, self.hidden() as u64);
        put_f64s(out, self.iter());
    }

    pub(crate) fn read_section(r: &mut ByteReader<'_>) -> Result<Self> {
        let version = r.u32_le()?;
        if version != SECTION_VERSION {
            return r.fail(format!("unsupported parameter section version {version}"));
        }
        let dim = r.u64_le()? as usize;
        let hidden = r.u64_le()? as usize;
        if dim == 0 || hidden == 0 {
            return r.fail("parameter section declares an empty network");
        }
        let count = hidden
            .checked_mul(dim + 2)
            .and_then(|v| v.checked_add(1))
            .filter(|&n| n.saturating_mul(8) <= r.remaining());
        let Some(count) = count else {
            return r.fail("parameter section is truncated");
        };
        let flat = r.f64s_le(count)?;
        Self::from_flat(dim, hidden, &flat)
    }
}

pub(crate) fn fnv_start() -> u64 {
    0xcbf2_9ce4_8422_2325
}

pub(crate) fn fnv_mix(mut h: u64, word: u64) -> u64 {
    for byte in word.to_le_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn check_rows(what: &'static str, v: ArrayView1<f64>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(row) => Err(Error::NonFinite {
            what,
            step: None,
            row: Some(row),
            index: None,
        }),
        None => Ok(()),
    }
}

pub(crate) fn check_matrix(what: &'static str, m: ArrayView2<f64>) -> Result<()> {
    for (row, r) in m.outer_iter().enumerate() {
        if let Some(index) = r.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what,
                step: None,
                row: Some(row),
                index: Some(index),
            });
        }
    }
    Ok(())
}
