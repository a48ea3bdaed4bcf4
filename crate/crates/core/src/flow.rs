//! Fixed-step RK4 integration of the coupled sample / log-density system
//!
//! ```text
//! dx/dt     =  ∇φ(x)
//! d ln p/dt = −∇²φ(x)
//! ```
//!
//! for a batch of parcels. Backward integration runs the same stepper with a
//! negated increment.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::difftape::{StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::potential::{check_matrix, check_rows, fnv_mix, PotentialParams};
use crate::targets::base_log_density_rows;

/// Randomness consumed by a field for one integration step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepDraw {
    /// The field is deterministic.
    None,
    /// One group-element index per batch row.
    Elements(Vec<u32>),
}

/// A velocity field `∇φ` together with its divergence `∇²φ`.
pub trait Field {
    fn dim(&self) -> usize;

    /// Draws whatever per-step randomness the field needs for `rows` parcels.
    fn draw(&self, _rows: usize, _rng: Option<&mut dyn RngCore>) -> Result<StepDraw> {
        Ok(StepDraw::None)
    }

    /// Whether [`Field::draw`] is called at every step or once per trajectory.
    fn redraw_each_step(&self) -> bool {
        true
    }

    /// Row-wise gradient and Laplacian of the potential.
    fn grad_lap(&self, draw: &StepDraw, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)>;

    /// Identifies the exact field a trajectory was recorded under.
    fn fingerprint(&self) -> u64;
}

/// A field driven by trainable potential parameters.
pub trait ParamField: Field {
    fn params(&self) -> &PotentialParams;

    /// Accumulates `∂/∂θ Σ_r [w_grad_r · ∇φ(x_r) + w_lap_r ∇²φ(x_r)]` into
    /// `acc` and returns the per-row derivative with respect to `x`.
    fn vjp(
        &self,
        draw: &StepDraw,
        x: ArrayView2<f64>,
        w_grad: ArrayView2<f64>,
        w_lap: ArrayView1<f64>,
        acc: &mut PotentialParams,
    ) -> Result<Array2<f64>>;
}

impl Field for PotentialParams {
    fn dim(&self) -> usize {
        PotentialParams::dim(self)
    }

    fn grad_lap(&self, _draw: &StepDraw, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.grad_lap_batch(x)
    }

    fn fingerprint(&self) -> u64 {
        PotentialParams::fingerprint(self)
    }
}

impl ParamField for PotentialParams {
    fn params(&self) -> &PotentialParams {
        self
    }

    fn vjp(
        &self,
        _draw: &StepDraw,
        x: ArrayView2<f64>,
        w_grad: ArrayView2<f64>,
        w_lap: ArrayView1<f64>,
        acc: &mut PotentialParams,
    ) -> Result<Array2<f64>> {
        self.vjp_batch(x, w_grad, w_lap, acc)
    }
}

/// Isotropic quadratic potential `φ(x) = λ‖x‖²/2` in `dim` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadratic {
    pub lambda: f64,
    pub dim: usize,
}

impl Field for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn grad_lap(&self, _draw: &StepDraw, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        if x.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "input has dimension {}, field expects {}",
                x.ncols(),
                self.dim
            )));
        }
        let grad = x.mapv(|v| self.lambda * v);
        let lap = Array1::from_elem(x.nrows(), self.lambda * self.dim as f64);
        Ok((grad, lap))
    }

    fn fingerprint(&self) -> u64 {
        fnv_mix(fnv_mix(0, self.lambda.to_bits()), self.dim as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// Step size, step count and time direction; total time is `epsilon · steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub direction: Direction,
}

impl IntegratorConfig {
    pub fn new(epsilon: f64, steps: usize, direction: Direction) -> Result<Self> {
        let c = Self {
            epsilon,
            steps,
            direction,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn forward(epsilon: f64, steps: usize) -> Result<Self> {
        Self::new(epsilon, steps, Direction::Forward)
    }

    pub fn backward(epsilon: f64, steps: usize) -> Result<Self> {
        Self::new(epsilon, steps, Direction::Backward)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("step count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total_time(&self) -> f64 {
        self.epsilon * self.steps as f64
    }

    pub fn reversed(&self) -> Self {
        let direction = match self.direction {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        };
        Self { direction, ..*self }
    }

    fn signed_step(&self) -> f64 {
        self.direction.sign() * self.epsilon
    }
}

/// Positions and log-densities of a batch of parcels at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Array2<f64>,
    pub logp: Array1<f64>,
    pub t: f64,
}

impl FlowState {
    pub fn new(x: Array2<f64>, logp: Array1<f64>, t: f64) -> Result<Self> {
        if x.nrows() != logp.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} log-densities",
                x.nrows(),
                logp.len()
            )));
        }
        check_matrix("flow positions", x.view())?;
        check_rows("flow log-densities", logp.view())?;
        Ok(Self { x, logp, t })
    }

    /// Parcels at `t = 0` starting from base points `z` with `ℓ = ln N(z)`.
    pub fn from_base(z: Array2<f64>) -> Result<Self> {
        let logp = base_log_density_rows(z.view());
        Self::new(z, logp, 0.0)
    }

    pub fn batch(&self) -> usize {
        self.x.nrows()
    }
}

pub(crate) struct StepOutput {
    pub(crate) x: Array2<f64>,
    pub(crate) logp: Array1<f64>,
    pub(crate) stages: [Array2<f64>; 3],
    pub(crate) grads: [Array2<f64>; 4],
    pub(crate) laps: [Array1<f64>; 4],
}

/// `x + c·g` as a new array.
fn offset(x: ArrayView2<f64>, c: f64, g: &Array2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    out.scaled_add(c, g);
    out
}

/// Final RK4 combination; shared by the stepper and tape replay so both are
/// bitwise identical.
pub(crate) fn rk4_combine(
    x: ArrayView2<f64>,
    logp: ArrayView1<f64>,
    grads: &[Array2<f64>; 4],
    laps: &[Array1<f64>; 4],
    h: f64,
) -> (Array2<f64>, Array1<f64>) {
    let w = h / 6.0;
    let mut xn = x.to_owned();
    Zip::from(&mut xn)
        .and(&grads[0])
        .and(&grads[1])
        .and(&grads[2])
        .and(&grads[3])
        .for_each(|xi, &g1, &g2, &g3, &g4| *xi += w * (g1 + 2.0 * g2 + 2.0 * g3 + g4));
    let mut ln = logp.to_owned();
    Zip::from(&mut ln)
        .and(&laps[0])
        .and(&laps[1])
        .and(&laps[2])
        .and(&laps[3])
        .for_each(|li, &l1, &l2, &l3, &l4| *li -= w * (l1 + 2.0 * l2 + 2.0 * l3 + l4));
    (xn, ln)
}

pub(crate) fn rk4_stages<F: Field + ?Sized>(
    field: &F,
    draw: &StepDraw,
    x: ArrayView2<f64>,
    logp: ArrayView1<f64>,
    h: f64,
) -> Result<StepOutput> {
    let (g1, l1) = field.grad_lap(draw, x)?;
    let x2 = offset(x, 0.5 * h, &g1);
    let (g2, l2) = field.grad_lap(draw, x2.view())?;
    let x3 = offset(x, 0.5 * h, &g2);
    let (g3, l3) = field.grad_lap(draw, x3.view())?;
    let x4 = offset(x, h, &g3);
    let (g4, l4) = field.grad_lap(draw, x4.view())?;
    let grads = [g1, g2, g3, g4];
    let laps = [l1, l2, l3, l4];
    let (xn, ln) = rk4_combine(x, logp, &grads, &laps, h);
    check_matrix("flow positions", xn.view())?;
    check_rows("flow log-densities", ln.view())?;
    Ok(StepOutput {
        x: xn,
        logp: ln,
        stages: [x2, x3, x4],
        grads,
        laps,
    })
}

fn check_field_dim<F: Field + ?Sized>(field: &F, state: &FlowState) -> Result<()> {
    if state.x.ncols() != field.dim() {
        return Err(Error::Shape(format!(
            "state has dimension {}, field expects {}",
            state.x.ncols(),
            field.dim()
        )));
    }
    Ok(())
}

/// One classical RK4 step of size `epsilon` in the given direction.
pub fn rk4_step<F: Field + ?Sized>(
    field: &F,
    state: &FlowState,
    epsilon: f64,
    direction: Direction,
    rng: Option<&mut dyn RngCore>,
) -> Result<FlowState> {
    IntegratorConfig::new(epsilon, 1, direction)?;
    check_field_dim(field, state)?;
    let h = direction.sign() * epsilon;
    let draw = field.draw(state.batch(), rng)?;
    let out =
        rk4_stages(field, &draw, state.x.view(), state.logp.view(), h).map_err(|e| e.at_step(0))?;
    Ok(FlowState {
        x: out.x,
        logp: out.logp,
        t: state.t + h,
    })
}

/// Runs `config.steps` RK4 steps, optionally recording a tape for
/// [`crate::difftape::backprop`].
pub fn integrate<F: Field + ?Sized>(
    field: &F,
    state: &FlowState,
    config: &IntegratorConfig,
    rng: Option<&mut dyn RngCore>,
    record: bool,
) -> Result<(FlowState, Option<Trajectory>)> {
    integrate_observed(field, state, config, rng, record, &mut |_, _| Ok(()))
}

/// Like [`integrate`], calling `observer(step, state)` after every step
/// (`step` counts from 1).
pub fn integrate_observed<F: Field + ?Sized>(
    field: &F,
    state: &FlowState,
    config: &IntegratorConfig,
    mut rng: Option<&mut dyn RngCore>,
    record: bool,
    observer: &mut dyn FnMut(usize, &FlowState) -> Result<()>,
) -> Result<(FlowState, Option<Trajectory>)> {
    config.validate()?;
    check_field_dim(field, state)?;
    let h = config.signed_step();
    let mut tape = record.then(|| Trajectory::new(h, state.t, field.fingerprint()));
    let mut cur = state.clone();
    let mut draw = StepDraw::None;
    for step in 0..config.steps {
        if step == 0 || field.redraw_each_step() {
            draw = field.draw(
                cur.batch(),
                rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
            )?;
        }
        let out = rk4_stages(field, &draw, cur.x.view(), cur.logp.view(), h)
            .map_err(|e| e.at_step(step))?;
        let next = FlowState {
            x: out.x,
            logp: out.logp,
            t: state.t + (step + 1) as f64 * h,
        };
        if let Some(tape) = tape.as_mut() {
            tape.push(StepRecord {
                x: std::mem::take(&mut cur.x),
                logp: std::mem::take(&mut cur.logp),
                stages: out.stages,
                grads: out.grads,
                laps: out.laps,
                draw: draw.clone(),
            });
        }
        cur = next;
        observer(step + 1, &cur)?;
    }
    Ok((cur, tape))
}

/// Draws `batch` standard-normal base points of dimension `dim`.
pub fn base_noise(batch: usize, dim: usize, rng: &mut dyn RngCore) -> Array2<f64> {
    Array2::from_shape_simple_fn((batch, dim), || StandardNormal.sample(&mut *rng))
}

/// Samples the model: base Gaussian at `t = 0`, integrated forward to `T`.
///
/// The returned `logp` is the model log-density at the returned points.
pub fn sample<F: Field + ?Sized>(
    field: &F,
    batch: usize,
    config: &IntegratorConfig,
    rng: &mut dyn RngCore,
) -> Result<FlowState> {
    Ok(sample_recorded(field, batch, config, rng, false)?.0)
}

pub fn sample_recorded<F: Field + ?Sized>(
    field: &F,
    batch: usize,
    config: &IntegratorConfig,
    rng: &mut dyn RngCore,
    record: bool,
) -> Result<(FlowState, Option<Trajectory>)> {
    if config.direction != Direction::Forward {
        return Err(Error::Config("sampling integrates forward in time".into()));
    }
    let z = base_noise(batch, field.dim(), rng);
    let start = FlowState::from_base(z)?;
    integrate(field, &start, config, Some(rng), record)
}

/// Result of pulling data back to the base distribution.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Base points reached at `t = 0`.
    pub z: Array2<f64>,
    /// `∫₀ᵀ ∇²φ dt` along each path.
    pub divergence: Array1<f64>,
    /// `ln p(x, T) = ln N(z) − ∫₀ᵀ ∇²φ dt`.
    pub log_prob: Array1<f64>,
    pub tape: Option<Trajectory>,
}

/// Integrates data backward from `T` to `0` accumulating the log-density change.
pub fn infer<F: Field + ?Sized>(
    field: &F,
    x: ArrayView2<f64>,
    epsilon: f64,
    steps: usize,
    rng: Option<&mut dyn RngCore>,
    record: bool,
) -> Result<Inference> {
    let config = IntegratorConfig::backward(epsilon, steps)?;
    let start = FlowState::new(x.to_owned(), Array1::zeros(x.nrows()), config.total_time())?;
    let (end, tape) = integrate(field, &start, &config, rng, record)?;
    let log_prob = base_log_density_rows(end.x.view()) - &end.logp;
    Ok(Inference {
        z: end.x,
        divergence: end.logp,
        log_prob,
        tape,
    })
}

/// Model log-density `ln p(x, T)` of each row.
pub fn log_prob<F: Field + ?Sized>(
    field: &F,
    x: ArrayView2<f64>,
    config: &IntegratorConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<Array1<f64>> {
    Ok(infer(field, x, config.epsilon, config.steps, rng, false)?.log_prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_params(dim: usize, hidden: usize, seed: u64) -> PotentialParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PotentialParams::init(dim, hidden, &mut rng);
        p.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        p
    }

    #[test]
    fn zero_potential_is_identity() {
        let p = PotentialParams::zeros(2, 3);
        let x = array![[0.5, -1.0], [2.0, 0.1]];
        let s = FlowState::new(x.clone(), array![-1.0, -2.0], 0.0).unwrap();
        let out = rk4_step(&p, &s, 0.1, Direction::Forward, None).unwrap();
        assert_eq!(out.x, x);
        assert_eq!(out.logp, s.logp);
        assert!((out.t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_single_step_tracks_exponential() {
        let q = Quadratic {
            lambda: 0.5,
            dim: 1,
        };
        let s = FlowState::new(array![[1.0]], array![0.0], 0.0).unwrap();
        let out = rk4_step(&q, &s, 0.1, Direction::Forward, None).unwrap();
        assert!((out.x[[0, 0]] - 0.05f64.exp()).abs() < 1e-7);
        assert!((out.x[[0, 0]] - 1.0512711).abs() < 1e-7);
    }

    #[test]
    fn one_step_round_trip() {
        let p = smooth_params(3, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = base_noise(5, 3, &mut rng);
        let s = FlowState::from_base(x.clone()).unwrap();
        let f = rk4_step(&p, &s, 0.01, Direction::Forward, None).unwrap();
        let b = rk4_step(&p, &f, 0.01, Direction::Backward, None).unwrap();
        let err = (&b.x - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "{err}");
        assert!(b.t.abs() < 1e-15);
    }

    #[test]
    fn round_trip_error_is_fifth_order() {
        // Φ₋ε∘Φε cancels the odd ε⁵ local terms of RK4, leaving O(ε⁶) per
        // step and O(ε⁵) over a fixed time: halving ε divides by ≈ 32
        let mut p = smooth_params(2, 8, 3);
        p.w.mapv_inplace(|v| 3.0 * v);
        p.a.mapv_inplace(|v| 3.0 * v);
        let x = base_noise(16, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let round_trip = |eps: f64, steps: usize| {
            let cfg = IntegratorConfig::forward(eps, steps).unwrap();
            let s = FlowState::from_base(x.clone()).unwrap();
            let (f, _) = integrate(&p, &s, &cfg, None, false).unwrap();
            let (b, _) = integrate(&p, &f, &cfg.reversed(), None, false).unwrap();
            (&b.x - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let e = [round_trip(0.4, 5), round_trip(0.2, 10), round_trip(0.1, 20)];
        for w in e.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((4.5..5.6).contains(&order), "errors {e:?}");
        }
    }

    #[test]
    fn single_step_integration_equals_rk4_step() {
        let p = smooth_params(2, 4, 3);
        let s = FlowState::from_base(array![[0.3, -0.2]]).unwrap();
        let cfg = IntegratorConfig::forward(0.1, 1).unwrap();
        let (a, _) = integrate(&p, &s, &cfg, None, false).unwrap();
        let b = rk4_step(&p, &s, 0.1, Direction::Forward, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadratic_integration_matches_exact_map() {
        let q = Quadratic {
            lambda: 0.5,
            dim: 1,
        };
        let s = FlowState::new(array![[1.0], [-2.5]], array![0.0, 0.0], 0.0).unwrap();
        let cfg = IntegratorConfig::forward(0.1, 10).unwrap();
        let (out, _) = integrate(&q, &s, &cfg, None, false).unwrap();
        // RK4 on a linear field multiplies by the quartic Taylor polynomial of e^{λh}
        let z: f64 = 0.05;
        let amp = (1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0).powi(10);
        for (x0, x1) in s.x.iter().zip(out.x.iter()) {
            assert!(((x1 - x0 * amp) / x1).abs() < 1e-14);
            let exact = x0 * 0.5f64.exp();
            assert!(((x1 - exact) / exact).abs() < 5e-8);
        }
        assert!((out.t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(IntegratorConfig::forward(0.1, 0).is_err());
        assert!(IntegratorConfig::forward(0.0, 3).is_err());
        assert!(IntegratorConfig::forward(f64::NAN, 3).is_err());
    }

    #[test]
    fn sample_with_zero_potential_is_base_draw() {
        let p = PotentialParams::zeros(3, 2);
        let cfg = IntegratorConfig::forward(0.1, 4).unwrap();
        let s = sample(&p, 6, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let z = base_noise(6, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(s.x, z);
        for (row, l) in z.outer_iter().zip(s.logp.iter()) {
            let expected = -1.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * row.dot(&row);
            assert!((l - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_is_reproducible() {
        let p = smooth_params(2, 5, 4);
        let cfg = IntegratorConfig::forward(0.1, 5).unwrap();
        let a = sample(&p, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample(&p, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_rejects_backward_direction() {
        let p = PotentialParams::zeros(1, 1);
        let cfg = IntegratorConfig::backward(0.1, 1).unwrap();
        assert!(sample(&p, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn log_prob_of_zero_potential_is_base_density() {
        let p = PotentialParams::zeros(2, 2);
        let x = array![[0.0, 0.0], [1.0, -1.0]];
        let cfg = IntegratorConfig::forward(0.1, 3).unwrap();
        let lp = log_prob(&p, x.view(), &cfg, None).unwrap();
        assert_eq!(lp, base_log_density_rows(x.view()));
    }

    #[test]
    fn log_prob_inverts_sample() {
        let p = smooth_params(3, 16, 5);
        let cfg = IntegratorConfig::forward(0.1, 20).unwrap();
        let s = sample(&p, 8, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let lp = log_prob(&p, s.x.view(), &cfg, None).unwrap();
        for (a, b) in lp.iter().zip(s.logp.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_state_reports_step_and_row() {
        let q = Quadratic {
            lambda: 1e200,
            dim: 1,
        };
        let s = FlowState::new(array![[0.0], [1e200]], array![0.0, 0.0], 0.0).unwrap();
        let cfg = IntegratorConfig::forward(1.0, 3).unwrap();
        match integrate(&q, &s, &cfg, None, false) {
            Err(Error::NonFinite { step, row, .. }) => {
                assert_eq!(step, Some(0));
                assert_eq!(row, Some(1));
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = PotentialParams::zeros(3, 2);
        let s = FlowState::from_base(array![[0.0, 0.0]]).unwrap();
        assert!(matches!(
            rk4_step(&p, &s, 0.1, Direction::Forward, None),
            Err(Error::Shape(_))
        ));
    }
}
