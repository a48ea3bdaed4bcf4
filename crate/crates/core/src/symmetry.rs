//! Signed-permutation symmetry groups and symmetrized potentials.
//!
//! A group element acts as `(g·x)ᵢ = sign · x[perm[i]]`. A symmetrized potential
//! averages the shared network over the orbit, `φ(x) = 1/|G| Σ_g φ̃(g·x)`,
//! which is exactly invariant. During integration it is cheaper to draw one
//! element per step (and per batch row) instead; since the flow equations are
//! linear in the potential, that single-term drift is unbiased for the
//! averaged one at fixed state.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Field, ParamField, StepDraw};
use crate::potential::{fnv_mix, PotentialEval, PotentialParams};

/// One signed permutation of `N` coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupElement {
    perm: Vec<u32>,
    negate: bool,
}

impl GroupElement {
    pub fn new(perm: Vec<u32>, negate: bool) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            let p = p as usize;
            if p >= n {
                return Err(Error::Config(format!(
                    "permutation index {p} out of range for {n} coordinates"
                )));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("permutation repeats index {p}")));
            }
        }
        Ok(Self { perm, negate })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n as u32).collect(),
            negate: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[u32] {
        &self.perm
    }

    pub fn sign(&self) -> f64 {
        if self.negate {
            -1.0
        } else {
            1.0
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.negate && self.perm.iter().enumerate().all(|(i, &p)| i == p as usize)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0u32; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p as usize] = i as u32;
        }
        Self {
            perm: inv,
            negate: self.negate,
        }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        // (self(other x))_i = s1 * (other x)[p1[i]] = s1 * s2 * x[p2[p1[i]]]
        Self {
            perm: self.perm.iter().map(|&p| other.perm[p as usize]).collect(),
            negate: self.negate ^ other.negate,
        }
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "group element acts on {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        let mut out = Array1::zeros(x.len());
        self.apply_into(x, out.view_mut());
        Ok(out)
    }

    fn apply_into(&self, x: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
        let s = self.sign();
        for (o, &p) in out.iter_mut().zip(&self.perm) {
            *o = s * x[p as usize];
        }
    }

    /// Pulls a cotangent at `g·x` back to `x`: `out += gᵀ v`.
    fn pullback_add(&self, v: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
        let s = self.sign();
        for (&vi, &p) in v.iter().zip(&self.perm) {
            out[p as usize] += s * vi;
        }
    }
}

/// A finite set of signed permutations, identity first.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryGroup {
    elements: Vec<GroupElement>,
}

/// Named group choices for run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "z2")]
    Z2,
    #[serde(rename = "ising-full")]
    IsingFull,
}

impl SymmetryGroup {
    /// Builds a group from explicit elements, removing duplicates and moving
    /// the identity to the front.
    pub fn from_elements(elements: Vec<GroupElement>) -> Result<Self> {
        let Some(first) = elements.first() else {
            return Err(Error::Config("symmetry group has no elements".into()));
        };
        let n = first.dim();
        if elements.iter().any(|g| g.dim() != n) {
            return Err(Error::Config(
                "group elements act on different dimensions".into(),
            ));
        }
        let mut seen = HashSet::new();
        let mut out = vec![GroupElement::identity(n)];
        seen.insert(out[0].clone());
        for g in elements {
            if seen.insert(g.clone()) {
                out.push(g);
            }
        }
        Ok(Self { elements: out })
    }

    pub fn trivial(n: usize) -> Self {
        Self {
            elements: vec![GroupElement::identity(n)],
        }
    }

    /// Global spin inversion `{x, −x}`.
    pub fn z2(n: usize) -> Self {
        let mut flip = GroupElement::identity(n);
        flip.negate = true;
        Self {
            elements: vec![GroupElement::identity(n), flip],
        }
    }

    /// Spin inversion × periodic translations × square-lattice point group D₄
    /// on an `side × side` torus with row-major site indexing.
    ///
    /// Nominally `2·L²·8` elements; on small lattices some combinations
    /// coincide and are removed (`L = 2` leaves 16).
    pub fn ising(side: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::Config(format!(
                "lattice side {side} must be at least 2"
            )));
        }
        let l = side as i64;
        type PointOp = fn(i64, i64, i64) -> (i64, i64);
        let point_ops: [PointOp; 8] = [
            |r, c, _| (r, c),
            |r, c, l| (c, l - 1 - r),
            |r, c, l| (l - 1 - r, l - 1 - c),
            |r, c, l| (l - 1 - c, r),
            |r, c, l| (r, l - 1 - c),
            |r, c, l| (l - 1 - r, c),
            |r, c, _| (c, r),
            |r, c, l| (l - 1 - c, l - 1 - r),
        ];
        let mut elements = Vec::with_capacity(2 * side * side * 8);
        for negate in [false, true] {
            for dy in 0..l {
                for dx in 0..l {
                    for op in &point_ops {
                        let perm = (0..l * l)
                            .map(|i| {
                                let (r, c) = op(i / l, i % l, l);
                                let (r, c) = ((r + dy).rem_euclid(l), (c + dx).rem_euclid(l));
                                (r * l + c) as u32
                            })
                            .collect();
                        elements.push(GroupElement { perm, negate });
                    }
                }
            }
        }
        Self::from_elements(elements)
    }

    /// Resolves a named group for a configuration of dimension `n`.
    pub fn named(kind: GroupKind, n: usize) -> Result<Self> {
        match kind {
            GroupKind::None => Ok(Self::trivial(n)),
            GroupKind::Z2 => Ok(Self::z2(n)),
            GroupKind::IsingFull => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(Error::Config(format!(
                        "ising-full symmetry needs a square lattice, got dimension {n}"
                    )));
                }
                Self::ising(side)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.elements.first().map_or(0, GroupElement::dim)
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &GroupElement {
        &self.elements[i]
    }

    fn fingerprint(&self) -> u64 {
        let mut h = fnv_mix(0, self.len() as u64);
        for g in &self.elements {
            h = fnv_mix(h, g.negate as u64);
            for &p in &g.perm {
                h = fnv_mix(h, p as u64);
            }
        }
        h
    }
}

/// How the symmetric average is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymmetryMode {
    /// Exact average over every group element.
    FullAverage,
    /// One uniformly drawn element per row, redrawn at every integration step.
    SampledPerStep,
    /// One uniformly drawn element per row, held for the whole trajectory.
    SampledPerTrajectory,
}

/// Potential symmetrized over a group; implements the flow field traits.
#[derive(Debug, Clone, Copy)]
pub struct Symmetrized<'a> {
    pub params: &'a PotentialParams,
    pub group: &'a SymmetryGroup,
    pub mode: SymmetryMode,
}

impl<'a> Symmetrized<'a> {
    pub fn new(
        params: &'a PotentialParams,
        group: &'a SymmetryGroup,
        mode: SymmetryMode,
    ) -> Result<Self> {
        if group.is_empty() {
            return Err(Error::Config("symmetry group has no elements".into()));
        }
        if group.dim() != params.dim() {
            return Err(Error::Shape(format!(
                "group acts on {} coordinates, potential on {}",
                group.dim(),
                params.dim()
            )));
        }
        Ok(Self {
            params,
            group,
            mode,
        })
    }

    /// Value, gradient and Laplacian of the symmetrized potential at one point.
    ///
    /// In sampled modes one element is drawn from `rng`; in full-average mode
    /// `rng` is not touched.
    pub fn eval(&self, x: ArrayView1<f64>, rng: &mut dyn RngCore) -> Result<PotentialEval> {
        let elements: Vec<usize> = match self.mode {
            SymmetryMode::FullAverage => (0..self.group.len()).collect(),
            _ => vec![rng.random_range(0..self.group.len())],
        };
        self.eval_over(x, &elements)
    }

    /// Average of single-term evaluations over the listed element indices.
    pub fn eval_over(&self, x: ArrayView1<f64>, elements: &[usize]) -> Result<PotentialEval> {
        if x.len() != self.params.dim() {
            return Err(Error::Shape(format!(
                "input has dimension {}, potential expects {}",
                x.len(),
                self.params.dim()
            )));
        }
        let n = x.len();
        let mut gx = Array2::zeros((elements.len(), n));
        for (row, &e) in gx.outer_iter_mut().zip(elements) {
            self.group.element(e).apply_into(x, row);
        }
        let ev = self.params.eval_batch(gx.view())?;
        let mut grad = Array1::zeros(n);
        for (gr, &e) in ev.grad.outer_iter().zip(elements) {
            self.group.element(e).pullback_add(gr, grad.view_mut());
        }
        let scale = 1.0 / elements.len() as f64;
        grad *= scale;
        Ok(PotentialEval {
            value: ev.value.sum() * scale,
            grad,
            laplacian: ev.laplacian.sum() * scale,
        })
    }

    fn per_row(&self, draw: &StepDraw, rows: usize) -> Result<Option<Vec<u32>>> {
        match self.mode {
            SymmetryMode::FullAverage => Ok(None),
            _ => match draw {
                StepDraw::Elements(idx) if idx.len() == rows => Ok(Some(idx.clone())),
                _ => Err(Error::Config(
                    "sampled symmetrization requires one drawn element per row".into(),
                )),
            },
        }
    }

    fn permute_rows(&self, x: ArrayView2<f64>, elements: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for ((xr, or), &e) in x.outer_iter().zip(out.outer_iter_mut()).zip(elements) {
            self.group.element(e as usize).apply_into(xr, or);
        }
        out
    }

    fn pull_rows(&self, v: ArrayView2<f64>, elements: &[u32], out: &mut Array2<f64>) {
        for ((vr, or), &e) in v.outer_iter().zip(out.outer_iter_mut()).zip(elements) {
            self.group.element(e as usize).pullback_add(vr, or);
        }
    }
}

impl Field for Symmetrized<'_> {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn draw(&self, rows: usize, rng: Option<&mut dyn RngCore>) -> Result<StepDraw> {
        if self.mode == SymmetryMode::FullAverage {
            return Ok(StepDraw::None);
        }
        if self.group.len() == 1 {
            return Ok(StepDraw::Elements(vec![0; rows]));
        }
        let rng = rng
            .ok_or_else(|| Error::Config("sampled symmetrization needs a random stream".into()))?;
        let n = self.group.len();
        Ok(StepDraw::Elements(
            (0..rows).map(|_| rng.random_range(0..n) as u32).collect(),
        ))
    }

    fn redraw_each_step(&self) -> bool {
        self.mode != SymmetryMode::SampledPerTrajectory
    }

    fn grad_lap(&self, draw: &StepDraw, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        match self.per_row(draw, x.nrows())? {
            Some(elements) => {
                let gx = self.permute_rows(x, &elements);
                let (g, lap) = self.params.grad_lap_batch(gx.view())?;
                let mut grad = Array2::zeros(x.raw_dim());
                self.pull_rows(g.view(), &elements, &mut grad);
                Ok((grad, lap))
            }
            None => {
                let mut grad = Array2::zeros(x.raw_dim());
                let mut lap = Array1::zeros(x.nrows());
                for e in 0..self.group.len() as u32 {
                    let elements = vec![e; x.nrows()];
                    let gx = self.permute_rows(x, &elements);
                    let (g, l) = self.params.grad_lap_batch(gx.view())?;
                    self.pull_rows(g.view(), &elements, &mut grad);
                    lap += &l;
                }
                let scale = 1.0 / self.group.len() as f64;
                grad *= scale;
                lap *= scale;
                Ok((grad, lap))
            }
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = fnv_mix(self.params.fingerprint(), self.group.fingerprint());
        h = fnv_mix(h, self.mode as u64);
        h
    }
}

impl ParamField for Symmetrized<'_> {
    fn params(&self) -> &PotentialParams {
        self.params
    }

    fn vjp(
        &self,
        draw: &StepDraw,
        x: ArrayView2<f64>,
        w_grad: ArrayView2<f64>,
        w_lap: ArrayView1<f64>,
        acc: &mut PotentialParams,
    ) -> Result<Array2<f64>> {
        let mut xbar = Array2::zeros(x.raw_dim());
        match self.per_row(draw, x.nrows())? {
            Some(elements) => {
                let gx = self.permute_rows(x, &elements);
                let gw = self.permute_rows(w_grad, &elements);
                let yb = self.params.vjp_batch(gx.view(), gw.view(), w_lap, acc)?;
                self.pull_rows(yb.view(), &elements, &mut xbar);
            }
            None => {
                let scale = 1.0 / self.group.len() as f64;
                let wl = w_lap.mapv(|v| v * scale);
                for e in 0..self.group.len() as u32 {
                    let elements = vec![e; x.nrows()];
                    let gx = self.permute_rows(x, &elements);
                    let mut gw = self.permute_rows(w_grad, &elements);
                    gw *= scale;
                    let yb = self
                        .params
                        .vjp_batch(gx.view(), gw.view(), wl.view(), acc)?;
                    self.pull_rows(yb.view(), &elements, &mut xbar);
                }
            }
        }
        Ok(xbar)
    }
}

/// Applies `g` to every row of a batch.
pub fn apply_rows(g: &GroupElement, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != g.dim() {
        return Err(Error::Shape(format!(
            "group element acts on {} coordinates, batch has {}",
            g.dim(),
            x.ncols()
        )));
    }
    let mut out = Array2::zeros(x.raw_dim());
    for (xr, or) in x.axis_iter(Axis(0)).zip(out.outer_iter_mut()) {
        g.apply_into(xr, or);
    }
    Ok(out)
}
