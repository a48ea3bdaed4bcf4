//! Exact reverse-mode differentiation through recorded RK4 trajectories.
//!
//! The tape stores, for every step, the entry state, the three intermediate
//! stage inputs and the four stage evaluations. The reverse pass walks steps
//! backwards and, inside a step, stages 4→1, so the result is the derivative
//! of the discrete map actually computed, whatever the step size.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::flow::{rk4_combine, FlowState, ParamField, StepDraw};
use crate::potential::PotentialParams;

#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    pub(crate) x: Array2<f64>,
    pub(crate) logp: Array1<f64>,
    /// Stage inputs 2..4 (stage 1 input is `x`).
    pub(crate) stages: [Array2<f64>; 3],
    pub(crate) grads: [Array2<f64>; 4],
    pub(crate) laps: [Array1<f64>; 4],
    pub(crate) draw: StepDraw,
}

/// Everything the reverse pass needs from a forward integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    step: f64,
    t0: f64,
    fingerprint: u64,
    records: Vec<StepRecord>,
}

/// Output of [`backprop`].
#[derive(Debug, Clone)]
pub struct TapeGradient {
    /// `∂loss/∂θ`.
    pub params: PotentialParams,
    /// `∂loss/∂X₀` for the initial positions.
    pub x0: Array2<f64>,
    /// `∂loss/∂ℓ₀` for the initial log-densities (equal to the terminal one).
    pub logp0: Array1<f64>,
}

impl Trajectory {
    pub(crate) fn new(step: f64, t0: f64, fingerprint: u64) -> Self {
        Self {
            step,
            t0,
            fingerprint,
            records: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, rec: StepRecord) {
        self.records.push(rec);
    }

    pub fn steps(&self) -> usize {
        self.records.len()
    }

    /// Signed step size the trajectory was integrated with.
    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn batch(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.nrows())
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Element draws recorded at each step.
    pub fn draws(&self) -> impl Iterator<Item = &StepDraw> + '_ {
        self.records.iter().map(|r| &r.draw)
    }

    pub fn initial_state(&self) -> Option<FlowState> {
        self.records.first().map(|r| FlowState {
            x: r.x.clone(),
            logp: r.logp.clone(),
            t: self.t0,
        })
    }

    /// Rebuilds the terminal state from the recorded stage evaluations alone.
    pub fn replay(&self) -> Option<FlowState> {
        let last = self.records.last()?;
        let (x, logp) = rk4_combine(
            last.x.view(),
            last.logp.view(),
            &last.grads,
            &last.laps,
            self.step,
        );
        Some(FlowState {
            x,
            logp,
            t: self.t0 + self.records.len() as f64 * self.step,
        })
    }

    /// Approximate memory held by the tape, in bytes.
    pub fn memory_bytes(&self) -> usize {
        self.records
            .iter()
            .map(|r| {
                8 * (r.x.len()
                    + r.logp.len()
                    + r.stages.iter().map(Array2::len).sum::<usize>()
                    + r.grads.iter().map(Array2::len).sum::<usize>()
                    + r.laps.iter().map(Array1::len).sum::<usize>())
            })
            .sum()
    }
}

/// Pulls terminal cotangents `(∂loss/∂X_T, ∂loss/∂ℓ_T)` back through the tape.
pub fn backprop<F: ParamField + ?Sized>(
    field: &F,
    tape: &Trajectory,
    x_bar: ArrayView2<f64>,
    logp_bar: ArrayView1<f64>,
) -> Result<TapeGradient> {
    if field.fingerprint() != tape.fingerprint {
        return Err(Error::StaleTape);
    }
    let rows = tape.batch();
    if x_bar.nrows() != rows || logp_bar.len() != rows || x_bar.ncols() != field.dim() {
        return Err(Error::Shape(format!(
            "cotangents are {}x{} / {}, tape batch is {rows}x{}",
            x_bar.nrows(),
            x_bar.ncols(),
            logp_bar.len(),
            field.dim()
        )));
    }
    let h = tape.step;
    let w = h / 6.0;
    let coef = [w, 2.0 * w, 2.0 * w, w];
    let mut acc = field.params().zeros_like();
    let mut xbar = x_bar.to_owned();
    let lbar = logp_bar.to_owned();
    for (step, rec) in tape.records.iter().enumerate().rev() {
        let lap_bar: [Array1<f64>; 4] = std::array::from_fn(|i| lbar.mapv(|v| -coef[i] * v));
        let mut gbar: [Array2<f64>; 4] = std::array::from_fn(|i| xbar.mapv(|v| coef[i] * v));
        let inputs = [
            rec.x.view(),
            rec.stages[0].view(),
            rec.stages[1].view(),
            rec.stages[2].view(),
        ];
        // stage i input is x + c_i * h * g_{i-1}
        let feed = [0.0, 0.5 * h, 0.5 * h, h];
        let mut next = xbar.clone();
        for i in (0..4).rev() {
            let xb = field
                .vjp(
                    &rec.draw,
                    inputs[i],
                    gbar[i].view(),
                    lap_bar[i].view(),
                    &mut acc,
                )
                .map_err(|e| e.at_step(step))?;
            next += &xb;
            if i > 0 {
                gbar[i - 1].scaled_add(feed[i], &xb);
            }
        }
        xbar = next;
    }
    Ok(TapeGradient {
        params: acc,
        x0: xbar,
        logp0: lbar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{base_noise, integrate, IntegratorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> PotentialParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PotentialParams::init(3, 6, &mut rng);
        p.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        p
    }

    fn run(
        p: &PotentialParams,
        seed: u64,
        cfg: &IntegratorConfig,
    ) -> (FlowState, FlowState, Trajectory) {
        let z = base_noise(4, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let s0 = FlowState::from_base(z).unwrap();
        let (s1, tape) = integrate(p, &s0, cfg, None, true).unwrap();
        (s0, s1, tape.unwrap())
    }

    #[test]
    fn replay_reproduces_terminal_state_bitwise() {
        let p = params(1);
        let cfg = IntegratorConfig::forward(0.1, 7).unwrap();
        let (s0, s1, tape) = run(&p, 2, &cfg);
        assert_eq!(tape.replay().unwrap(), s1);
        assert_eq!(tape.initial_state().unwrap(), s0);
        assert_eq!(tape.steps(), 7);
    }

    #[test]
    fn zero_cotangents_give_zero_gradient() {
        let p = params(3);
        let cfg = IntegratorConfig::forward(0.1, 3).unwrap();
        let (_, _, tape) = run(&p, 4, &cfg);
        let g = backprop(
            &p,
            &tape,
            Array2::zeros((4, 3)).view(),
            Array1::zeros(4).view(),
        )
        .unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.x0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_rejected() {
        let p = params(5);
        let cfg = IntegratorConfig::forward(0.1, 2).unwrap();
        let (_, _, tape) = run(&p, 6, &cfg);
        let mut q = p.clone();
        q.c += 1.0;
        let err = backprop(
            &q,
            &tape,
            Array2::zeros((4, 3)).view(),
            Array1::zeros(4).view(),
        );
        assert!(matches!(err, Err(Error::StaleTape)));
    }

    fn objective(
        p: &PotentialParams,
        z: &Array2<f64>,
        cfg: &IntegratorConfig,
        wx: &Array2<f64>,
    ) -> f64 {
        // initial log-density held fixed so that only the positions carry x0
        let s0 = FlowState::new(z.clone(), Array1::from_elem(z.nrows(), -1.0), 0.0).unwrap();
        let (s1, _) = integrate(p, &s0, cfg, None, false).unwrap();
        (&s1.x * wx).sum() + 0.3 * s1.logp.sum()
    }

    #[test]
    fn gradient_matches_finite_differences_in_both_directions() {
        for cfg in [
            IntegratorConfig::forward(0.25, 4).unwrap(),
            IntegratorConfig::backward(0.25, 4).unwrap(),
        ] {
            let p = params(7);
            let z = base_noise(4, 3, &mut ChaCha8Rng::seed_from_u64(8));
            let wx = base_noise(4, 3, &mut ChaCha8Rng::seed_from_u64(9));
            let s0 = FlowState::new(z.clone(), Array1::from_elem(4, -1.0), 0.0).unwrap();
            let (_, tape) = integrate(&p, &s0, &cfg, None, true).unwrap();
            let g = backprop(
                &p,
                &tape.unwrap(),
                wx.view(),
                Array1::from_elem(4, 0.3).view(),
            )
            .unwrap();
            let step = 1e-6;
            for i in (0..p.num_params()).step_by(3) {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.set(i, p.get(i) + step);
                pm.set(i, p.get(i) - step);
                let fd =
                    (objective(&pp, &z, &cfg, &wx) - objective(&pm, &z, &cfg, &wx)) / (2.0 * step);
                let rel = (fd - g.params.get(i)).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "param {i}: {fd} vs {}", g.params.get(i));
            }
            // input cotangent
            for (r, j) in [(0, 0), (2, 1), (3, 2)] {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[[r, j]] += step;
                zm[[r, j]] -= step;
                let fd =
                    (objective(&p, &zp, &cfg, &wx) - objective(&p, &zm, &cfg, &wx)) / (2.0 * step);
                let rel = (fd - g.x0[[r, j]]).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-4, "input ({r},{j}): {fd} vs {}", g.x0[[r, j]]);
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_cotangents() {
        let p = params(10);
        let cfg = IntegratorConfig::forward(0.1, 5).unwrap();
        let (_, _, tape) = run(&p, 11, &cfg);
        let a = base_noise(4, 3, &mut ChaCha8Rng::seed_from_u64(12));
        let b = base_noise(4, 3, &mut ChaCha8Rng::seed_from_u64(13));
        let la = Array1::from_elem(4, 0.7);
        let lb = Array1::from_elem(4, -1.1);
        let ga = backprop(&p, &tape, a.view(), la.view()).unwrap();
        let gb = backprop(&p, &tape, b.view(), lb.view()).unwrap();
        let combo = &a * 2.0 - &b * 3.0;
        let lcombo = &la * 2.0 - &lb * 3.0;
        let gc = backprop(&p, &tape, combo.view(), lcombo.view()).unwrap();
        let mut expect = ga.params.clone();
        expect.scale(2.0);
        expect.axpy(-3.0, &gb.params);
        for (x, y) in gc.params.iter().zip(expect.iter()) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }
}
