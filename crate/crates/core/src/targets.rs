//! Objectives, target energies and exact reference values.
//!
//! * [`nll_loss`] — maximum likelihood on data, pulled back to the base.
//! * [`variational_loss`] — `E_{x∼p}[ln p(x) + E(x)]`, an upper bound on `−ln Z`.
//! * [`IsingSpec`] — the continuous (Hubbard–Stratonovich) Ising energy
//!   `½ xᵀ(K+αI)⁻¹x − Σᵢ ln cosh xᵢ` and its exact free energy by enumeration.
//! * [`GaussianFlowSolution`] — closed-form flow of a standard Gaussian under
//!   `φ = λx²/2`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};

use crate::difftape::backprop;
use crate::error::{Error, Result};
use crate::flow::{infer, sample_recorded, Field, IntegratorConfig, ParamField};
use crate::potential::{logistic, PotentialParams};

/// `−½ ln 2π`.
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal log-density `−(N/2) ln 2π − ‖x‖²/2`.
pub fn base_log_density(x: ArrayView1<f64>) -> f64 {
    -(x.len() as f64) * HALF_LN_TWO_PI - 0.5 * x.dot(&x)
}

pub fn base_log_density_rows(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), base_log_density)
}

/// An unnormalized target density `e^{−E(x)}`.
pub trait Energy {
    fn dim(&self) -> usize;

    fn energy(&self, x: ArrayView1<f64>) -> f64;

    /// `∇E(x)`.
    fn energy_grad(&self, x: ArrayView1<f64>) -> Array1<f64>;

    fn energies(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.map_axis(Axis(1), |r| self.energy(r))
    }

    fn energy_grads(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (r, mut o) in x.outer_iter().zip(out.outer_iter_mut()) {
            o.assign(&self.energy_grad(r));
        }
        out
    }
}

/// `E(x) = ‖x‖²/2`, normalizer `(2π)^{N/2}`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianEnergy {
    pub dim: usize,
}

impl Energy for GaussianEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: ArrayView1<f64>) -> f64 {
        0.5 * x.dot(&x)
    }

    fn energy_grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.to_owned()
    }
}

/// `E(x) = −ln N(x)`, which is already normalized.
#[derive(Debug, Clone, Copy)]
pub struct NegBaseLogDensity {
    pub dim: usize,
}

impl Energy for NegBaseLogDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: ArrayView1<f64>) -> f64 {
        -base_log_density(x)
    }

    fn energy_grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.to_owned()
    }
}

/// Stable `ln cosh x`.
fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Periodic square-lattice Ising model in its continuous representation.
#[derive(Debug, Clone)]
pub struct IsingSpec {
    side: usize,
    beta: f64,
    alpha: f64,
    kplus: Array2<f64>,
    kplus_inv: Array2<f64>,
    ln_det: f64,
}

/// Smallest eigenvalue of the nearest-neighbour coupling matrix, from its
/// lattice Fourier spectrum `2β(cos 2πk₁/L + cos 2πk₂/L)`.
fn coupling_min_eigenvalue(side: usize, beta: f64) -> f64 {
    let mut min = f64::INFINITY;
    for k1 in 0..side {
        for k2 in 0..side {
            let c1 = (2.0 * PI * k1 as f64 / side as f64).cos();
            let c2 = (2.0 * PI * k2 as f64 / side as f64).cos();
            min = min.min(2.0 * beta * (c1 + c2));
        }
    }
    min
}

impl IsingSpec {
    /// Minimum eigenvalue of `K + αI` fixed by the choice of `α`.
    pub const MIN_EIGENVALUE: f64 = 0.1;

    /// Standard critical coupling `ln(1+√2)/2`.
    pub const CRITICAL_COUPLING: f64 = 0.440_686_793_509_771_5;

    pub fn new(side: usize, beta: f64) -> Result<Self> {
        if side < 2 {
            return Err(Error::Config(format!(
                "lattice side {side} must be at least 2"
            )));
        }
        if !side.is_multiple_of(2) {
            return Err(Error::Unsupported(format!(
                "odd lattice side {side}: the offset assumes the staggered (π,π) mode"
            )));
        }
        if !beta.is_finite() {
            return Err(Error::Config("coupling must be finite".into()));
        }
        let n = side * side;
        let alpha = Self::MIN_EIGENVALUE - coupling_min_eigenvalue(side, beta);
        let mut kplus = Array2::<f64>::zeros((n, n));
        for r in 0..side {
            for c in 0..side {
                let i = r * side + c;
                kplus[[i, i]] += alpha;
                for (dr, dc) in [(0, 1), (0, side - 1), (1, 0), (side - 1, 0)] {
                    let j = ((r + dr) % side) * side + (c + dc) % side;
                    kplus[[i, j]] += beta;
                }
            }
        }
        let dense = DMatrix::from_fn(n, n, |i, j| kplus[[i, j]]);
        let chol = dense.cholesky().ok_or_else(|| {
            Error::Config("coupling matrix with offset is not positive definite".into())
        })?;
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv = chol.inverse();
        let kplus_inv = Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (inv[(i, j)] + inv[(j, i)]));
        Ok(Self {
            side,
            beta,
            alpha,
            kplus,
            kplus_inv,
            ln_det,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn sites(&self) -> usize {
        self.side * self.side
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `K + αI`.
    pub fn kplus(&self) -> &Array2<f64> {
        &self.kplus
    }

    pub fn kplus_inv(&self) -> &Array2<f64> {
        &self.kplus_inv
    }

    /// `ln det(K + αI)` from the Cholesky factor.
    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    fn check(&self, n: usize) {
        assert_eq!(
            n,
            self.sites(),
            "configuration size does not match the lattice"
        );
    }
}

impl Energy for IsingSpec {
    fn dim(&self) -> usize {
        self.sites()
    }

    fn energy(&self, x: ArrayView1<f64>) -> f64 {
        self.check(x.len());
        let y = self.kplus_inv.dot(&x);
        0.5 * x.dot(&y) - x.iter().map(|&v| ln_cosh(v)).sum::<f64>()
    }

    fn energy_grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.check(x.len());
        let mut y = self.kplus_inv.dot(&x);
        y.zip_mut_with(&x, |yi, &xi| *yi -= xi.tanh());
        y
    }

    fn energies(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.check(x.ncols());
        let y = x.dot(&self.kplus_inv);
        let mut out = Array1::zeros(x.nrows());
        for ((xr, yr), o) in x.outer_iter().zip(y.outer_iter()).zip(out.iter_mut()) {
            *o = 0.5 * xr.dot(&yr) - xr.iter().map(|&v| ln_cosh(v)).sum::<f64>();
        }
        out
    }

    fn energy_grads(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.check(x.ncols());
        let mut y = x.dot(&self.kplus_inv);
        y.zip_mut_with(&x, |yi, &xi| *yi -= xi.tanh());
        y
    }
}

/// Exact free energy of the continuous Ising representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsingPartition {
    pub alpha: f64,
    pub ln_det: f64,
    /// `ln Σ_s exp(½ sᵀ(K+αI)s)` by enumeration.
    pub ln_z_offset: f64,
    /// `ln Σ_s exp(½ sᵀKs) = ln_z_offset − Nα/2`.
    pub ln_z_ising: f64,
    /// `−ln Z` of the continuous model, the lower bound of the variational loss.
    pub neg_ln_z: f64,
}

/// Largest lattice the enumeration oracle accepts (`2¹⁶` states).
pub const MAX_ENUMERATION_SIDE: usize = 4;

/// Exhaustive `ln Σ_s exp(½ sᵀ A s)` over `s ∈ {±1}^N`.
pub fn log_sum_spin_weights(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    assert!(n < 31, "enumeration over {n} spins is not feasible");
    let mut s = vec![0.0f64; n];
    let exponents: Vec<f64> = (0u32..1 << n)
        .map(|mask| {
            for (i, si) in s.iter_mut().enumerate() {
                *si = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
            }
            let mut q = 0.0;
            for i in 0..n {
                let row = a.row(i);
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * s[j];
                }
                q += s[i] * acc;
            }
            0.5 * q
        })
        .collect();
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + exponents.iter().map(|e| (e - max).exp()).sum::<f64>().ln()
}

/// `−ln Z = −ln Z_offset − ½ ln det(K+αI) + (N/2) ln(2/π)` with `Z_offset` by
/// enumeration. Equivalent to the form with the un-offset sum
/// `−ln Z_Ising − ½ ln det(K+αI) + (N/2)[ln(2/π) − α]`.
pub fn exact_neg_log_z(spec: &IsingSpec) -> Result<IsingPartition> {
    if spec.side() > MAX_ENUMERATION_SIDE {
        return Err(Error::Unsupported(format!(
            "exact enumeration is limited to L ≤ {MAX_ENUMERATION_SIDE} (got L = {}); larger \
             lattices need Kaufman's finite-lattice closed form, which is not implemented",
            spec.side()
        )));
    }
    let n = spec.sites() as f64;
    let ln_z_offset = log_sum_spin_weights(spec.kplus());
    let ln_z_ising = ln_z_offset - 0.5 * n * spec.alpha();
    let neg_ln_z = -ln_z_offset - 0.5 * spec.ln_det() + 0.5 * n * (2.0 / PI).ln();
    Ok(IsingPartition {
        alpha: spec.alpha(),
        ln_det: spec.ln_det(),
        ln_z_offset,
        ln_z_ising,
        neg_ln_z,
    })
}

/// Draws Ising spins from `p(s|x) = Πᵢ σ(2 sᵢ xᵢ)`.
pub fn spin_sampler<R: Rng + ?Sized>(x: ArrayView1<f64>, rng: &mut R) -> Vec<i8> {
    x.iter()
        .map(|&xi| {
            let u: f64 = rng.random();
            if u < logistic(2.0 * xi) {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// A standard Gaussian flowing under `φ(x) = λx²/2`: it stays Gaussian with
/// inverse width `α(t) = e^{−λt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFlowSolution {
    pub lambda: f64,
}

impl GaussianFlowSolution {
    pub fn alpha(&self, t: f64) -> f64 {
        (-self.lambda * t).exp()
    }

    /// `x(t) = map_scale(t) · x(0)`.
    pub fn map_scale(&self, t: f64) -> f64 {
        (self.lambda * t).exp()
    }

    /// `ln p(x, t) = ln α − ½ ln 2π − α²x²/2` for one coordinate.
    pub fn log_density(&self, x: f64, t: f64) -> f64 {
        let a = self.alpha(t);
        a.ln() - HALF_LN_TWO_PI - 0.5 * (a * a * (x * x))
    }

    /// Isotropic `N`-dimensional version (sum over coordinates).
    pub fn log_density_nd(&self, x: ArrayView1<f64>, t: f64) -> f64 {
        x.iter().map(|&v| self.log_density(v, t)).sum()
    }

    /// Differential entropy of the 1D density at time `t`: `½ ln(2πe) − ln α(t)`.
    pub fn entropy(&self, t: f64) -> f64 {
        HALF_LN_TWO_PI + 0.5 - self.alpha(t).ln()
    }
}

/// A Monte Carlo loss with its gradient.
#[derive(Debug, Clone)]
pub struct LossEstimate {
    pub loss: f64,
    /// Standard error of the batch mean.
    pub std_err: f64,
    /// Per-row contributions whose mean is `loss`.
    pub per_sample: Array1<f64>,
    pub grad: Option<PotentialParams>,
}

fn mean_and_stderr(v: &Array1<f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn ensure_finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::non_finite("loss"))
    }
}

/// Negative log-likelihood `−mean ln p(x, T)` of data rows, with its gradient.
pub fn nll_loss<F: ParamField + ?Sized>(
    field: &F,
    data: ArrayView2<f64>,
    config: &IntegratorConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<LossEstimate> {
    nll_impl(field, data, config, rng, true)
}

/// [`nll_loss`] without the reverse pass.
pub fn nll_value<F: Field + ?Sized>(
    field: &F,
    data: ArrayView2<f64>,
    config: &IntegratorConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<LossEstimate> {
    let inf = infer(field, data, config.epsilon, config.steps, rng, false)?;
    let per_sample = -&inf.log_prob;
    let (loss, std_err) = mean_and_stderr(&per_sample);
    Ok(LossEstimate {
        loss: ensure_finite(loss)?,
        std_err,
        per_sample,
        grad: None,
    })
}

fn nll_impl<F: ParamField + ?Sized>(
    field: &F,
    data: ArrayView2<f64>,
    config: &IntegratorConfig,
    rng: Option<&mut dyn RngCore>,
    with_grad: bool,
) -> Result<LossEstimate> {
    let inf = infer(field, data, config.epsilon, config.steps, rng, with_grad)?;
    let per_sample = -&inf.log_prob;
    let (loss, std_err) = mean_and_stderr(&per_sample);
    let loss = ensure_finite(loss)?;
    let grad = match inf.tape {
        Some(tape) => {
            // loss = mean(−ln N(z) + divergence)
            let b = data.nrows() as f64;
            let x_bar = &inf.z / b;
            let l_bar = Array1::from_elem(data.nrows(), 1.0 / b);
            Some(backprop(field, &tape, x_bar.view(), l_bar.view())?.params)
        }
        None => None,
    };
    Ok(LossEstimate {
        loss,
        std_err,
        per_sample,
        grad,
    })
}

/// Reparametrized estimate of `E_{x∼p(·,T)}[ln p(x,T) + E(x)]` on `batch`
/// fresh samples, with its pathwise gradient.
pub fn variational_loss<F: ParamField + ?Sized, E: Energy + ?Sized>(
    field: &F,
    energy: &E,
    batch: usize,
    config: &IntegratorConfig,
    rng: &mut dyn RngCore,
) -> Result<LossEstimate> {
    variational_impl(field, energy, batch, config, rng, true)
}

/// [`variational_loss`] without the reverse pass; works for any field.
pub fn variational_value<F: Field + ?Sized, E: Energy + ?Sized>(
    field: &F,
    energy: &E,
    batch: usize,
    config: &IntegratorConfig,
    rng: &mut dyn RngCore,
) -> Result<LossEstimate> {
    check_energy_dim(field.dim(), energy)?;
    let (state, _) = sample_recorded(field, batch, config, rng, false)?;
    let per_sample = &state.logp + &energy.energies(state.x.view());
    let (loss, std_err) = mean_and_stderr(&per_sample);
    Ok(LossEstimate {
        loss: ensure_finite(loss)?,
        std_err,
        per_sample,
        grad: None,
    })
}

fn check_energy_dim<E: Energy + ?Sized>(dim: usize, energy: &E) -> Result<()> {
    if energy.dim() != dim {
        return Err(Error::Shape(format!(
            "energy is defined on {} coordinates, model on {dim}",
            energy.dim()
        )));
    }
    Ok(())
}

fn variational_impl<F: ParamField + ?Sized, E: Energy + ?Sized>(
    field: &F,
    energy: &E,
    batch: usize,
    config: &IntegratorConfig,
    rng: &mut dyn RngCore,
    with_grad: bool,
) -> Result<LossEstimate> {
    check_energy_dim(field.dim(), energy)?;
    let (state, tape) = sample_recorded(field, batch, config, rng, with_grad)?;
    let per_sample = &state.logp + &energy.energies(state.x.view());
    let (loss, std_err) = mean_and_stderr(&per_sample);
    let loss = ensure_finite(loss)?;
    let grad = match tape {
        Some(tape) => {
            let b = batch as f64;
            let x_bar = energy.energy_grads(state.x.view()) / b;
            let l_bar = Array1::from_elem(batch, 1.0 / b);
            Some(backprop(field, &tape, x_bar.view(), l_bar.view())?.params)
        }
        None => None,
    };
    Ok(LossEstimate {
        loss,
        std_err,
        per_sample,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_density_values() {
        assert!((base_log_density(array![0.0].view()) + 0.9189385332).abs() < 1e-10);
        assert!((base_log_density(array![0.0, 0.0].view()) + 1.8378770664).abs() < 1e-10);
        let x = array![0.3, -1.2, 2.0];
        assert_eq!(base_log_density(x.view()), base_log_density((-&x).view()));
    }

    #[test]
    fn ising_alpha_for_critical_coupling() {
        let spec = IsingSpec::new(2, 0.44068679).unwrap();
        assert!((spec.alpha() - 1.86274716).abs() < 1e-8);
        assert!(IsingSpec::new(3, 0.4).is_err());
    }

    #[test]
    fn coupling_rows_have_four_neighbour_bonds() {
        let beta = 0.3;
        let spec = IsingSpec::new(4, beta).unwrap();
        let k = spec.kplus();
        for i in 0..16 {
            let off: Vec<f64> = (0..16)
                .filter(|&j| j != i && k[[i, j]] != 0.0)
                .map(|j| k[[i, j]])
                .collect();
            assert_eq!(off.len(), 4);
            assert!(off.iter().all(|&v| v == beta));
            assert_eq!(k[[i, i]], spec.alpha());
        }
        // L = 2: each neighbour is reached twice
        let spec = IsingSpec::new(2, beta).unwrap();
        let row: f64 = spec.kplus().row(0).iter().sum();
        assert!((row - spec.alpha() - 4.0 * beta).abs() < 1e-15);
    }

    #[test]
    fn ising_energy_at_origin_is_zero() {
        let spec = IsingSpec::new(4, 0.44).unwrap();
        assert_eq!(spec.energy(Array1::zeros(16).view()), 0.0);
    }

    #[test]
    fn ising_gradient_matches_finite_differences() {
        let spec = IsingSpec::new(4, 0.44).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array1::from_shape_fn(16, |_| rng.random_range(-2.0..2.0));
        let g = spec.energy_grad(x.view());
        let h = 1e-5;
        for j in 0..16 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (spec.energy(xp.view()) - spec.energy(xm.view())) / (2.0 * h);
            assert!(
                (fd - g[j]).abs() / g[j].abs().max(1e-6) < 1e-6,
                "{j}: {fd} vs {}",
                g[j]
            );
        }
        let xs = Array2::from_shape_fn((3, 16), |_| rng.random_range(-2.0..2.0));
        let e = spec.energies(xs.view());
        let gs = spec.energy_grads(xs.view());
        for (i, r) in xs.outer_iter().enumerate() {
            assert!((e[i] - spec.energy(r)).abs() < 1e-12);
            for (a, b) in gs.row(i).iter().zip(spec.energy_grad(r).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uncoupled_partition_function() {
        // beta = 0: Z_offset = 2^4 e^{2α}
        let spec = IsingSpec::new(2, 0.0).unwrap();
        let part = exact_neg_log_z(&spec).unwrap();
        let a = spec.alpha();
        assert!((part.ln_z_offset - (16f64.ln() + 2.0 * a)).abs() < 1e-12);
        assert!((part.ln_z_ising - 16f64.ln()).abs() < 1e-12);
        // separable: Z = Π ∫ exp(−x²/2α) cosh x dx = (√(2πα) e^{α/2})^N
        let expect = 4.0 * (0.5 * (2.0 * PI * a).ln() + 0.5 * a);
        assert!(
            (part.neg_ln_z + expect).abs() < 1e-12,
            "{} vs {}",
            part.neg_ln_z,
            -expect
        );
    }

    #[test]
    fn enumeration_refuses_large_lattices() {
        let spec = IsingSpec::new(6, 0.44).unwrap();
        let err = exact_neg_log_z(&spec).unwrap_err();
        assert!(err.to_string().contains("Kaufman"));
    }

    #[test]
    fn spin_sampler_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = spin_sampler(Array1::from_elem(1000, 10.0).view(), &mut rng);
        assert!(s.iter().all(|&v| v == 1));
        let s = spin_sampler(Array1::from_elem(1000, -10.0).view(), &mut rng);
        assert!(s.iter().all(|&v| v == -1));
        let s = spin_sampler(Array1::zeros(10000).view(), &mut rng);
        let mean = s.iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        assert!(mean.abs() < 4.0 / 100.0);
    }

    #[test]
    fn gaussian_solution_basics() {
        let sol = GaussianFlowSolution { lambda: 0.5 };
        assert_eq!(sol.alpha(0.0), 1.0);
        assert_eq!(sol.map_scale(0.0), 1.0);
        assert!((sol.map_scale(1.0) - 1.6487213).abs() < 1e-7);
        assert_eq!(
            sol.log_density(0.7, 0.0),
            base_log_density(array![0.7].view())
        );
    }

    #[test]
    fn variational_loss_vanishes_for_matching_target() {
        let p = PotentialParams::zeros(3, 4);
        let cfg = IntegratorConfig::forward(0.1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = variational_loss(&p, &NegBaseLogDensity { dim: 3 }, 16, &cfg, &mut rng).unwrap();
        assert!(est.loss.abs() < 1e-12);
        let est = variational_loss(&p, &GaussianEnergy { dim: 3 }, 16, &cfg, &mut rng).unwrap();
        // ln Z = (N/2) ln 2π, and the loss sits exactly at −ln Z
        assert!((est.loss + 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_of_zero_potential_and_row_permutation() {
        let p = PotentialParams::zeros(2, 3);
        let cfg = IntegratorConfig::forward(0.1, 2).unwrap();
        let x = array![[0.1, 0.2], [1.0, -1.0], [0.5, 0.0]];
        let est = nll_loss(&p, x.view(), &cfg, None).unwrap();
        let expect = -base_log_density_rows(x.view()).mean().unwrap();
        assert!((est.loss - expect).abs() < 1e-12);
        let swapped = array![[0.5, 0.0], [0.1, 0.2], [1.0, -1.0]];
        let other = nll_loss(&p, swapped.view(), &cfg, None).unwrap();
        assert!((other.loss - est.loss).abs() < 1e-12);
    }
}
