//! Equiamplitude expansions `ψ = ξ_1 + … + ξ_n` with mutually orthogonal,
//! equal-norm microstates.
//!
//! Construction is inductive. [`split_two`] gives the two-element base case,
//! and [`extend`] turns an `m`-element expansion into an `(m+1)`-element one
//! by rotating the microstates together with a fresh orthogonal vector in the
//! real plane spanned by `ψ̂` and that vector. The rotation angle is located
//! by bisection on the gap between the overlaps `|⟨ψ, Rφ⟩|` and `|⟨ψ, Rξ⟩|`.

use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hilbert::{
    fresh_unit_vector, inner_unchecked, seeded_rng, Operator, OrthonormalSet, Projection, SeededRng, StateVector,
    Tolerance, UnitaryOp, C64, RANK_CUTOFF,
};

/// An ordered list of microstates summing to `psi`.
///
/// Instances built by this module satisfy the invariants checked by
/// [`validate`]; [`Expansion::from_parts`] accepts arbitrary input so that
/// hand-built or faulty expansions can be inspected too.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    psi: StateVector,
    microstates: Vec<StateVector>,
    theta_log: Vec<f64>,
}

impl Expansion {
    pub fn from_parts(psi: StateVector, microstates: Vec<StateVector>, theta_log: Vec<f64>) -> Result<Self> {
        if microstates.is_empty() {
            return Err(Error::InvalidInput("expansion needs at least one microstate".into()));
        }
        for xi in &microstates {
            if xi.dim() != psi.dim() {
                return Err(Error::DimensionMismatch { left: psi.dim(), right: xi.dim() });
            }
        }
        Ok(Expansion { psi, microstates, theta_log })
    }

    /// The one-element expansion `{ψ}`.
    pub fn singleton(psi: StateVector) -> Self {
        Expansion { microstates: vec![psi.clone()], psi, theta_log: Vec::new() }
    }

    pub fn psi(&self) -> &StateVector {
        &self.psi
    }

    pub fn microstates(&self) -> &[StateVector] {
        &self.microstates
    }

    pub fn n(&self) -> usize {
        self.microstates.len()
    }

    pub fn dim(&self) -> usize {
        self.psi.dim()
    }

    /// Rotation angles recorded at each induction step; entry `k` belongs
    /// to the step from `k + 1` to `k + 2` microstates.
    pub fn theta_log(&self) -> &[f64] {
        &self.theta_log
    }

    /// Common microstate norm `‖ψ‖/√n`.
    pub fn amplitude(&self) -> f64 {
        self.psi.norm() / (self.n() as f64).sqrt()
    }

    pub fn into_microstates(self) -> Vec<StateVector> {
        self.microstates
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Check {
    pub passed: bool,
    /// Worst normalised violation observed.
    pub worst: f64,
}

impl Check {
    fn new(worst: f64, limit: f64) -> Self {
        Check { passed: worst <= limit, worst }
    }
}

/// Outcome of [`validate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpansionReport {
    /// `max_{j≠k} |⟨ξ_j, ξ_k⟩| / (‖ξ_j‖‖ξ_k‖)`.
    pub orthogonality: Check,
    /// `max_k |‖ξ_k‖² − ‖ψ‖²/n| / (‖ψ‖²/n)`.
    pub equiamplitude: Check,
    /// `‖Σ ξ_k − ψ‖ / ‖ψ‖`.
    pub completeness: Check,
    /// `n ≤ dim`.
    pub fits_dimension: bool,
}

impl ExpansionReport {
    pub fn all_passed(&self) -> bool {
        self.orthogonality.passed && self.equiamplitude.passed && self.completeness.passed && self.fits_dimension
    }

    pub fn max_violation(&self) -> f64 {
        self.orthogonality.worst.max(self.equiamplitude.worst).max(self.completeness.worst)
    }
}

/// Checks orthogonality, equal norms and reconstruction of `ψ`.
pub fn validate(lam: &Expansion, tol: &Tolerance) -> ExpansionReport {
    let n = lam.n();
    let norms: Vec<f64> = lam.microstates.iter().map(StateVector::norm).collect();

    let mut ortho: f64 = 0.0;
    for j in 0..n {
        for k in (j + 1)..n {
            let denom = (norms[j] * norms[k]).max(f64::MIN_POSITIVE);
            let overlap = inner_unchecked(&lam.microstates[j], &lam.microstates[k]).norm() / denom;
            ortho = ortho.max(overlap);
        }
    }

    let psi_sq = lam.psi.norm_sqr();
    let target = psi_sq / n as f64;
    let spread = if target > 0.0 {
        norms.iter().map(|x| (x * x - target).abs() / target).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };

    let total = StateVector::sum(lam.dim(), &lam.microstates);
    let residual = total.distance(&lam.psi) / lam.psi.norm().max(f64::MIN_POSITIVE);

    ExpansionReport {
        orthogonality: Check::new(ortho, tol.rel),
        equiamplitude: Check::new(spread, tol.rel),
        completeness: Check::new(residual, tol.rel),
        fits_dimension: n <= lam.dim(),
    }
}

fn require_nonzero(psi: &StateVector, tol: &Tolerance) -> Result<()> {
    if psi.norm() <= tol.abs {
        return Err(Error::ZeroState);
    }
    Ok(())
}

/// Bisection for a sign change of `f` on `[lo, hi]`, run until the bracket
/// stops shrinking in double precision.
pub(crate) fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::InvariantViolation("bisection bracket has no sign change".into()));
    }
    let rising = flo < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Two-element expansion `ξ_{1,2} = (ψ ± ‖ψ‖φ̂)/2` with `φ̂ ⊥ ψ`.
pub fn split_two(psi: &StateVector, seed: u64) -> Result<Expansion> {
    let mut rng = seeded_rng(seed);
    let mut span = OrthonormalSet::new(psi.dim());
    split_two_with(psi, &mut span, &mut rng)
}

fn split_two_with(psi: &StateVector, span: &mut OrthonormalSet, rng: &mut SeededRng) -> Result<Expansion> {
    require_nonzero(psi, &Tolerance::default())?;
    if psi.dim() < 2 {
        return Err(Error::NoFreeDirection { dim: psi.dim() });
    }
    span.push(psi);
    let phi = fresh_unit_vector(span, rng)?;
    span.push(&phi);
    let offset = phi.scale_real(psi.norm());
    let xi1 = (psi + &offset).scale_real(0.5);
    let xi2 = (psi - &offset).scale_real(0.5);
    Ok(Expansion {
        psi: psi.clone(),
        microstates: vec![xi1, xi2],
        // The base case is the m = 1 rotation step at θ = π/4.
        theta_log: vec![std::f64::consts::FRAC_PI_4],
    })
}

/// Grows an `m`-element expansion to `m + 1` elements.
pub fn extend(lam: &Expansion, seed: u64) -> Result<Expansion> {
    let mut rng = seeded_rng(seed);
    let mut span = OrthonormalSet::new(lam.dim());
    span.push(&lam.psi);
    for xi in &lam.microstates {
        span.push(xi);
    }
    extend_with(lam, &mut span, &mut rng)
}

/// Coefficients `(⟨e1, v⟩, ⟨e2, v⟩)` of `v` in the rotation plane.
fn plane_coefficients(v: &StateVector, e1: &StateVector, e2: &StateVector) -> (C64, C64) {
    (inner_unchecked(e1, v), inner_unchecked(e2, v))
}

/// Real rotation by `theta` in the plane `{e1, e2}`:
/// `R e1 = cos θ e1 − sin θ e2`, `R e2 = sin θ e1 + cos θ e2`, identity on
/// the orthogonal complement.
fn rotate_in_plane(v: &StateVector, e1: &StateVector, e2: &StateVector, theta: f64) -> StateVector {
    let (a, b) = plane_coefficients(v, e1, e2);
    let (s, c) = theta.sin_cos();
    let mut out = v.clone();
    out.axpy(a * c + b * s - a, e1);
    out.axpy(b * c - a * s - b, e2);
    out
}

/// `span` must contain an orthonormal basis of the span of `lam`'s
/// microstates (and hence of `ψ`); on success it is extended by the new
/// direction, which keeps it a basis of the grown expansion's span.
fn extend_with(lam: &Expansion, span: &mut OrthonormalSet, rng: &mut SeededRng) -> Result<Expansion> {
    let tol = Tolerance::default();
    require_nonzero(&lam.psi, &tol)?;
    let m = lam.n();
    if lam.dim() <= m {
        return Err(Error::NoFreeDirection { dim: lam.dim() });
    }
    let psi_norm = lam.psi.norm();
    let e1 = lam.psi.scale_real(1.0 / psi_norm);
    let e2 = fresh_unit_vector(span, rng)?;
    span.push(&e2);
    let phi = e2.scale_real(psi_norm / (m as f64).sqrt());

    // Overlap with ψ after rotation is ‖ψ‖ (a cos θ + b sin θ).
    let (a_phi, b_phi) = plane_coefficients(&phi, &e1, &e2);
    let mut a_xi = C64::new(0.0, 0.0);
    let mut b_xi = C64::new(0.0, 0.0);
    for xi in &lam.microstates {
        let (a, b) = plane_coefficients(xi, &e1, &e2);
        a_xi += a;
        b_xi += b;
    }
    a_xi /= m as f64;
    b_xi /= m as f64;
    let gap = |theta: f64| {
        let (s, c) = theta.sin_cos();
        psi_norm * (a_phi * c + b_phi * s).norm() - psi_norm * (a_xi * c + b_xi * s).norm()
    };
    let theta = bisect(gap, 0.0, FRAC_PI_2)?;

    let mut rotated: Vec<StateVector> = lam.microstates.iter().map(|xi| rotate_in_plane(xi, &e1, &e2, theta)).collect();
    rotated.push(rotate_in_plane(&phi, &e1, &e2, theta));

    let total = StateVector::sum(lam.dim(), &rotated);
    let along = inner_unchecked(&lam.psi, &total).re;
    if along <= 0.0 {
        return Err(Error::InvariantViolation("rotated sum lost its component along psi".into()));
    }
    let scale = lam.psi.norm_sqr() / along;
    let microstates = rotated.iter().map(|v| v.scale_real(scale)).collect();

    let mut theta_log = lam.theta_log.clone();
    theta_log.push(theta);
    Ok(Expansion { psi: lam.psi.clone(), microstates, theta_log })
}

/// Builds `Λ_ψⁿ`: the singleton for `n = 1`, otherwise a split followed by
/// `n − 2` extensions.
pub fn construct(psi: &StateVector, n: usize, seed: u64) -> Result<Expansion> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    if n > psi.dim() {
        return Err(Error::DimensionTooSmall { needed: n, available: psi.dim() });
    }
    require_nonzero(psi, &Tolerance::default())?;
    if n == 1 {
        return Ok(Expansion::singleton(psi.clone()));
    }
    let mut rng = seeded_rng(seed);
    let mut span = OrthonormalSet::new(psi.dim());
    let mut lam = split_two_with(psi, &mut span, &mut rng)?;
    while lam.n() < n {
        lam = extend_with(&lam, &mut span, &mut rng)?;
    }
    Ok(lam)
}

/// Haar-random unitary `W` with `Wψ = ψ`, acting as a Haar unitary on the
/// orthogonal complement of `ψ`.
pub fn psi_fixing_unitary<R: Rng + ?Sized>(psi: &StateVector, rng: &mut R) -> Result<UnitaryOp> {
    let dim = psi.dim();
    let x = psi.normalized()?;
    if dim == 1 {
        return Ok(UnitaryOp::identity(1));
    }
    // Householder reflection H with H x = −α e_0, |α| = 1.
    let x0 = x.components()[0];
    let alpha = if x0.norm() > 0.0 { x0 / x0.norm() } else { C64::new(1.0, 0.0) };
    let mut u = x.clone();
    u.components_mut()[0] += alpha;
    let un = u.norm_sqr();
    let h = Operator::identity(dim).minus(&Operator::outer(&u, &u)?.scale(C64::new(2.0 / un, 0.0)))?;
    let v = UnitaryOp::random(dim - 1, rng);
    let block = Operator::identity(1).direct_sum(v.operator());
    let w = h.compose(&block)?.compose(&h)?;
    Ok(UnitaryOp::new_unchecked(w))
}

/// Applies a unitary that fixes `ψ` to every microstate.
pub fn apply_fixing_unitary(lam: &Expansion, w: &UnitaryOp, tol: &Tolerance) -> Result<Expansion> {
    let moved = w.apply(&lam.psi)?;
    let drift = moved.distance(&lam.psi);
    if drift > tol.rel * lam.psi.norm() {
        return Err(Error::InvariantViolation(format!("unitary moves psi by {drift:.3e}")));
    }
    let microstates = lam.microstates.iter().map(|xi| w.apply(xi)).collect::<Result<Vec<_>>>()?;
    Ok(Expansion { psi: lam.psi.clone(), microstates, theta_log: lam.theta_log.clone() })
}

/// A new expansion of the same `ψ`: the old one rotated about `ψ` by a
/// random unitary.
pub fn randomize(lam: &Expansion, seed: u64) -> Result<Expansion> {
    let mut rng = seeded_rng(seed);
    let w = psi_fixing_unitary(&lam.psi, &mut rng)?;
    // Loose gate: W fixes ψ up to accumulated rounding in the dense products.
    let gate = Tolerance::new(1e-9, 1e-12)?;
    apply_fixing_unitary(lam, &w, &gate)
}

/// Source of fresh unit directions, orthogonal to everything excluded or
/// handed out so far and optionally confined to the range of a projector.
///
/// When the range comes with an orthonormal basis and at most one
/// direction (lying in the range) has been excluded, fresh directions are
/// images of shuffled basis vectors under a reflection carrying the first
/// of them onto the excluded direction, at `O(dim)` each. Otherwise each
/// candidate is orthogonalised against the used set.
pub struct DirectionBudget<'a> {
    within: Option<&'a dyn Projection>,
    used: OrthonormalSet,
    rng: SeededRng,
    reflected: Reflected,
}

enum Reflected {
    Untried,
    Off,
    On { order: Vec<usize>, next: usize, householder: Option<StateVector> },
}

impl<'a> DirectionBudget<'a> {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_rng(dim, None, seeded_rng(seed))
    }

    pub fn within(range: &'a dyn Projection, seed: u64) -> Self {
        Self::with_rng(range.dim(), Some(range), seeded_rng(seed))
    }

    pub(crate) fn with_rng(dim: usize, within: Option<&'a dyn Projection>, rng: SeededRng) -> Self {
        DirectionBudget { within, used: OrthonormalSet::new(dim), rng, reflected: Reflected::Untried }
    }

    pub fn dim(&self) -> usize {
        self.used.dim()
    }

    pub(crate) fn into_used(self) -> OrthonormalSet {
        self.used
    }

    pub(crate) fn with_used(used: OrthonormalSet, rng: SeededRng) -> Self {
        DirectionBudget { within: None, used, rng, reflected: Reflected::Off }
    }

    /// Number of directions excluded or handed out.
    pub fn used(&self) -> usize {
        self.used.len()
    }

    /// Marks the direction of `v` as used.
    pub fn exclude(&mut self, v: &StateVector) {
        if self.used.push(v).is_some() && matches!(self.reflected, Reflected::On { .. }) {
            self.reflected = Reflected::Off;
        }
    }

    pub fn fresh(&mut self) -> Result<StateVector> {
        let dim = self.used.dim();
        let Some(range) = self.within else {
            let v = fresh_unit_vector(&self.used, &mut self.rng)?;
            self.used.push(&v);
            return Ok(v);
        };
        if self.used.len() >= range.rank() {
            return Err(Error::NoFreeDirection { dim });
        }
        if matches!(self.reflected, Reflected::Untried) {
            self.reflected = self.start_reflection(range);
        }
        if let Reflected::On { order, next, householder } = &mut self.reflected {
            let Some(&k) = order.get(*next) else {
                return Err(Error::NoFreeDirection { dim });
            };
            *next += 1;
            let b = range.range_vector(k).expect("basis checked when starting");
            let unit = match householder {
                Some(w) => {
                    let mut v = b.clone();
                    v.axpy(-2.0 * inner_unchecked(w, &b), w);
                    v
                }
                None => b,
            };
            let phase = C64::from_polar(1.0, self.rng.random_range(0.0..std::f64::consts::TAU));
            let unit = unit.scale(phase);
            self.used.push_orthonormal(unit.clone());
            return Ok(unit);
        }
        // Cheap candidates first: random combinations of a few columns of
        // the projector. A projected Gaussian vector is the fallback.
        for attempt in 0..40 {
            let candidate = if attempt < 32 {
                let mut c = StateVector::zeros(dim);
                for _ in 0..4.min(dim) {
                    let j = self.rng.random_range(0..dim);
                    let w = C64::new(
                        self.rng.sample(rand_distr::StandardNormal),
                        self.rng.sample(rand_distr::StandardNormal),
                    );
                    c.axpy(w, &range.column(j));
                }
                c
            } else {
                range.project(&StateVector::random(dim, &mut self.rng))
            };
            let scale = candidate.norm();
            if scale == 0.0 {
                continue;
            }
            let r = self.used.residual(&candidate);
            let rn = r.norm();
            if rn > RANK_CUTOFF * scale {
                let unit = r.scale_real(1.0 / rn);
                self.used.push(&unit);
                return Ok(unit);
            }
        }
        Err(Error::NoFreeDirection { dim })
    }

    fn start_reflection(&mut self, range: &dyn Projection) -> Reflected {
        let rank = range.rank();
        if self.used.len() > 1 || rank == 0 || range.range_vector(0).is_none() {
            return Reflected::Off;
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.shuffle(&mut self.rng);
        let Some(u) = self.used.vectors().first() else {
            return Reflected::On { order, next: 0, householder: None };
        };
        if range.project(u).distance(u) > RANK_CUTOFF {
            return Reflected::Off;
        }
        // Reflection swapping b_0 with the phase-aligned excluded direction;
        // the remaining basis vectors map to its orthogonal complement.
        let b0 = range.range_vector(order[0]).expect("checked above");
        let overlap = inner_unchecked(&b0, u);
        let align = if overlap.norm() > 0.0 { overlap.conj() / overlap.norm() } else { C64::new(1.0, 0.0) };
        let w = &b0 - &u.scale(align);
        let wn = w.norm();
        let householder = (wn > RANK_CUTOFF).then(|| w.scale_real(1.0 / wn));
        Reflected::On { order, next: 1, householder }
    }
}

/// Splits off a piece of norm `amplitude` from `chi`.
///
/// Returns `(ξ, χ′)` with `ξ + χ′ = χ`, `⟨ξ, χ′⟩ = 0` and `‖ξ‖ = amplitude`,
/// where `ξ = cχ + dφ`, `c = a²/‖χ‖²`, `d = √(a²(1 − c))` and `φ` is a fresh
/// direction from `dirs`. When `‖χ‖ = a` the whole of `χ` is returned.
pub fn peel(
    chi: &StateVector,
    amplitude: f64,
    dirs: &mut DirectionBudget<'_>,
    tol: &Tolerance,
) -> Result<(StateVector, StateVector)> {
    peel_inner(chi, amplitude, dirs, tol, true)
}

/// `peel` for callers that know `chi` already lies in the span of `dirs`'
/// used directions (as every remainder of a peel sequence does).
pub(crate) fn peel_inner(
    chi: &StateVector,
    amplitude: f64,
    dirs: &mut DirectionBudget<'_>,
    tol: &Tolerance,
    exclude_chi: bool,
) -> Result<(StateVector, StateVector)> {
    if amplitude.is_nan() || amplitude <= 0.0 {
        return Err(Error::InvalidInput(format!("peel amplitude must be positive, got {amplitude}")));
    }
    let chi_sq = chi.norm_sqr();
    let a_sq = amplitude * amplitude;
    if chi_sq == 0.0 || a_sq > chi_sq * (1.0 + tol.rel) {
        return Err(Error::PeelUnderflow { norm: chi_sq.sqrt(), amplitude });
    }
    let ratio = a_sq / chi_sq;
    if ratio >= 1.0 - tol.rel {
        return Ok((chi.clone(), StateVector::zeros(chi.dim())));
    }
    if exclude_chi {
        dirs.exclude(chi);
    }
    let phi = dirs.fresh()?;
    let d = (a_sq * (1.0 - ratio)).sqrt();
    let mut xi = chi.scale_real(ratio);
    xi.axpy(C64::new(d, 0.0), &phi);
    let rest = chi - &xi;
    Ok((xi, rest))
}

/// Dense matrix of the plane rotation, for tests that want an independent
/// route to `R`.
#[cfg(test)]
pub(crate) fn rotation_matrix(e1: &StateVector, e2: &StateVector, theta: f64) -> Operator {
    let dim = e1.dim();
    let (s, c) = theta.sin_cos();
    let o = |u: &StateVector, v: &StateVector| Operator::outer(u, v).unwrap();
    let mut m: nalgebra::DMatrix<C64> = nalgebra::DMatrix::identity(dim, dim);
    m += o(e1, e1).matrix() * C64::new(c - 1.0, 0.0);
    m += o(e2, e2).matrix() * C64::new(c - 1.0, 0.0);
    m += o(e1, e2).matrix() * C64::new(s, 0.0);
    m -= o(e2, e1).matrix() * C64::new(s, 0.0);
    Operator::from_matrix(m).unwrap()
}
