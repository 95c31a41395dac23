//! Boolean event spaces over an expansion, probability assignments on
//! them, and the swap construction forcing equal-amplitude microstates to
//! be equiprobable.
//!
//! Microstate indices are 0-based throughout.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expansion::Expansion;
use crate::hilbert::{
    apply, orthonormal_complement_vector, seeded_rng, Operator, StateVector, Tolerance, UnitaryOp, C64,
};

/// Relative tolerance under which two microstate norms count as equal.
pub const EQUAL_NORM_TOL: f64 = 1e-9;

/// Singular values below this (relative to the largest) count as zero.
pub const SVD_CUTOFF: f64 = 1e-8;

/// A subset of microstate indices `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    n: usize,
    words: Vec<u64>,
}

impl Event {
    pub fn empty(n: usize) -> Self {
        Event { n, words: vec![0; n.div_ceil(64)] }
    }

    pub fn full(n: usize) -> Self {
        let mut e = Event::empty(n);
        for k in 0..n {
            e.insert(k);
        }
        e
    }

    pub fn singleton(n: usize, k: usize) -> Self {
        let mut e = Event::empty(n);
        e.insert(k);
        e
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(n: usize, indices: I) -> Self {
        let mut e = Event::empty(n);
        for k in indices {
            e.insert(k);
        }
        e
    }

    /// Size of the underlying index set.
    pub fn universe(&self) -> usize {
        self.n
    }

    pub fn insert(&mut self, k: usize) {
        assert!(k < self.n, "index {k} outside 0..{}", self.n);
        self.words[k / 64] |= 1 << (k % 64);
    }

    pub fn contains(&self, k: usize) -> bool {
        k < self.n && self.words[k / 64] & (1 << (k % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&k| self.contains(k))
    }

    pub fn union(&self, other: &Event) -> Event {
        self.zip(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Event) -> Event {
        self.zip(other, |a, b| a & b)
    }

    pub fn complement(&self) -> Event {
        let mut c = Event::full(self.n);
        for (w, s) in c.words.iter_mut().zip(&self.words) {
            *w &= !s;
        }
        c
    }

    pub fn is_disjoint(&self, other: &Event) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & b == 0)
    }

    fn zip(&self, other: &Event, f: impl Fn(u64, u64) -> u64) -> Event {
        assert_eq!(self.n, other.n, "events over different index sets");
        Event { n: self.n, words: self.words.iter().zip(&other.words).map(|(a, b)| f(*a, *b)).collect() }
    }

    /// Next subset in binary counting order, or `None` after the full set.
    fn successor(&self) -> Option<Event> {
        let mut next = self.clone();
        for k in 0..self.n {
            let (w, b) = (k / 64, 1u64 << (k % 64));
            if next.words[w] & b == 0 {
                next.words[w] |= b;
                return Some(next);
            }
            next.words[w] &= !b;
        }
        None
    }
}

impl Serialize for Event {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.indices())
    }
}

/// Events over one expansion: every subset of its microstates, with the
/// vector of a subset being the sum of its members.
#[derive(Clone, Debug)]
pub struct EventSpace {
    base: Expansion,
}

pub fn build_event_space(lam: Expansion) -> EventSpace {
    EventSpace { base: lam }
}

impl EventSpace {
    pub fn base(&self) -> &Expansion {
        &self.base
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn vector(&self, event: &Event) -> StateVector {
        let ms = self.base.microstates();
        StateVector::sum(self.base.dim(), event.indices().map(|k| &ms[k]))
    }

    /// All `2^n` events, generated lazily in binary counting order.
    pub fn events(&self) -> impl Iterator<Item = Event> {
        std::iter::successors(Some(Event::empty(self.n())), Event::successor)
    }

    /// Event space of `Uψ` generated by the images `Uξ_k`.
    pub fn transformed(&self, u: &UnitaryOp) -> Result<EventSpace> {
        let psi = u.apply(self.base.psi())?;
        let ms = self.base.microstates().iter().map(|x| u.apply(x)).collect::<Result<Vec<_>>>()?;
        Ok(EventSpace { base: Expansion::from_parts(psi, ms, Vec::new())? })
    }
}

/// A candidate measure: explicit values on some events, extended
/// additively from singletons elsewhere.
#[derive(Clone, Debug)]
pub struct ProbAssignment {
    space: EventSpace,
    singletons: Vec<f64>,
    explicit: BTreeMap<Event, f64>,
}

impl ProbAssignment {
    pub fn from_singletons(space: EventSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.n() {
            return Err(Error::DimensionMismatch { left: values.len(), right: space.n() });
        }
        Ok(ProbAssignment { space, singletons: values, explicit: BTreeMap::new() })
    }

    /// `μ[{k}] = 1/n`.
    pub fn uniform(space: EventSpace) -> Self {
        let n = space.n();
        ProbAssignment { space, singletons: vec![1.0 / n as f64; n], explicit: BTreeMap::new() }
    }

    /// `μ[S] = ‖vector(S)‖²/‖ψ‖²`, tabulated on every event when `n ≤ 16`.
    pub fn born(space: EventSpace) -> Self {
        let psi_sq = space.base.psi().norm_sqr();
        let singletons = space.base.microstates().iter().map(|x| x.norm_sqr() / psi_sq).collect();
        let mut explicit = BTreeMap::new();
        if space.n() <= 16 {
            for e in space.events() {
                explicit.insert(e.clone(), space.vector(&e).norm_sqr() / psi_sq);
            }
        }
        ProbAssignment { space, singletons, explicit }
    }

    /// Overrides the value on one event.
    pub fn with(mut self, event: Event, value: f64) -> Self {
        self.explicit.insert(event, value);
        self
    }

    pub fn space(&self) -> &EventSpace {
        &self.space
    }

    pub fn mu(&self, event: &Event) -> f64 {
        match self.explicit.get(event) {
            Some(v) => *v,
            None => event.indices().map(|k| self.singletons[k]).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Bounds,
    Normalization,
    EmptyEvent,
    Additivity,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssignmentViolation {
    pub kind: ViolationKind,
    /// The event(s) involved: one for bounds/normalization, two for
    /// additivity.
    pub events: Vec<Event>,
    pub defect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssignmentReport {
    pub passed: bool,
    pub pairs_tested: usize,
    pub exhaustive: bool,
    pub max_defect: f64,
    pub violations: Vec<AssignmentViolation>,
}

/// At most this many witnesses are kept.
const MAX_WITNESSES: usize = 32;
/// Exhaustive disjoint-pair enumeration is used while `3^n` stays below this.
const EXHAUSTIVE_PAIRS: usize = 100_000;
const SAMPLED_PAIRS: usize = 4096;

/// Checks bounds, `μ[full] = 1`, `μ[∅] = 0` and additivity on disjoint
/// pairs: all of them when feasible, otherwise a fixed-seed sample plus
/// every pair built from explicitly set events.
pub fn check_assignment(pa: &ProbAssignment, tol: &Tolerance) -> AssignmentReport {
    let n = pa.space.n();
    let mut violations = Vec::new();
    let mut max_defect: f64 = 0.0;
    let mut record =
        |kind: ViolationKind, events: Vec<Event>, defect: f64, violations: &mut Vec<AssignmentViolation>| {
            max_defect = max_defect.max(defect);
            if defect > tol.rel && violations.len() < MAX_WITNESSES {
                violations.push(AssignmentViolation { kind, events, defect });
            }
        };

    let full = Event::full(n);
    record(ViolationKind::Normalization, vec![full.clone()], (pa.mu(&full) - 1.0).abs(), &mut violations);
    let empty = Event::empty(n);
    record(ViolationKind::EmptyEvent, vec![empty.clone()], pa.mu(&empty).abs(), &mut violations);

    let bound_defect = |v: f64| (-v).max(v - 1.0).max(0.0);
    let exhaustive = n < 32 && 3usize.pow(n as u32) <= EXHAUSTIVE_PAIRS;
    let mut pairs: Vec<(Event, Event)> = Vec::new();
    if exhaustive {
        for a in pa.space.events() {
            record(ViolationKind::Bounds, vec![a.clone()], bound_defect(pa.mu(&a)), &mut violations);
            // Subsets of the complement of `a`.
            let rest: Vec<usize> = a.complement().indices().collect();
            for mask in 0u64..(1 << rest.len()) {
                let b = Event::from_indices(
                    n,
                    rest.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, k)| *k),
                );
                pairs.push((a.clone(), b));
            }
        }
    } else {
        let mut rng = seeded_rng(0x5EED);
        for _ in 0..SAMPLED_PAIRS {
            let mut a = Event::empty(n);
            let mut b = Event::empty(n);
            for k in 0..n {
                match rng.random_range(0..3) {
                    0 => a.insert(k),
                    1 => b.insert(k),
                    _ => {}
                }
            }
            pairs.push((a, b));
        }
        let explicit: Vec<&Event> = pa.explicit.keys().collect();
        for (x, a) in explicit.iter().enumerate() {
            record(ViolationKind::Bounds, vec![(*a).clone()], bound_defect(pa.mu(a)), &mut violations);
            pairs.push(((*a).clone(), a.complement()));
            for b in &explicit[x + 1..] {
                if a.is_disjoint(b) {
                    pairs.push(((*a).clone(), (*b).clone()));
                }
            }
        }
        for k in 0..n {
            let s = Event::singleton(n, k);
            record(ViolationKind::Bounds, vec![s.clone()], bound_defect(pa.mu(&s)), &mut violations);
        }
    }

    for (a, b) in &pairs {
        let defect = (pa.mu(&a.union(b)) - pa.mu(a) - pa.mu(b)).abs();
        record(ViolationKind::Additivity, vec![a.clone(), b.clone()], defect, &mut violations);
    }

    AssignmentReport { passed: max_defect <= tol.rel, pairs_tested: pairs.len(), exhaustive, max_defect, violations }
}

/// The three unitaries exchanging microstates `i` and `j` via a fresh
/// direction: `U_a: ξ_i → φ_c`, `U_b: ξ_j → z_b ξ_i`, `U_c: φ_c → z_a ξ_j`,
/// each the identity off a two-dimensional block.
///
/// The stored unitaries have the phases of `z_a`, `z_b` absorbed into
/// their blocks; `z_a`, `z_b` are the values before absorption.
#[derive(Clone, Debug)]
pub struct SwapTriple {
    pub i: usize,
    pub j: usize,
    pub u_a: UnitaryOp,
    pub u_b: UnitaryOp,
    pub u_c: UnitaryOp,
    pub z_a: C64,
    pub z_b: C64,
    /// Unit vector along `φ_c`.
    pub aux_dir: StateVector,
    /// `‖U_c U_b U_a ψ − ψ‖ / ‖ψ‖` with phases absorbed.
    pub composite_residual: f64,
}

/// Unitary that is the identity off `span{e1, e2}` (orthonormal) and maps
/// `e1 → e^{iγ} e2`, `e2 → −e^{−iγ} e1`.
fn block_swap(e1: &StateVector, e2: &StateVector, gamma: f64) -> UnitaryOp {
    let dim = e1.dim();
    let phase = C64::from_polar(1.0, gamma);
    let (u, v) = (e1.as_dvector(), e2.as_dvector());
    let mut m: DMatrix<C64> = DMatrix::identity(dim, dim);
    m -= u * u.adjoint();
    m -= v * v.adjoint();
    m += v * u.adjoint() * phase;
    m -= u * v.adjoint() * phase.conj();
    UnitaryOp::new_unchecked(Operator::from_matrix(m).expect("square by construction"))
}

fn phase_of(z: C64) -> f64 {
    if z.norm() == 0.0 {
        0.0
    } else {
        z.arg()
    }
}

pub fn build_swap_triple(lam: &Expansion, i: usize, j: usize, seed: u64) -> Result<SwapTriple> {
    let n = lam.n();
    if i == j || i >= n || j >= n {
        return Err(Error::InvalidPair { i, j, n });
    }
    let dim = lam.dim();
    if dim <= n {
        return Err(Error::NoFreeDirection { dim });
    }
    let ms = lam.microstates();
    let (xi_i, xi_j) = (&ms[i], &ms[j]);
    let (norm_i, norm_j) = (xi_i.norm(), xi_j.norm());
    if norm_i == 0.0 || norm_j == 0.0 {
        return Err(Error::InvalidInput("swap needs nonzero microstates".into()));
    }
    let aux = orthonormal_complement_vector(ms, dim, seed)?;
    let mut rng = seeded_rng(seed ^ 0xA5A5_5A5A);
    let gamma_b: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let gamma_c: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (hat_i, hat_j) = (xi_i.scale_real(1.0 / norm_i), xi_j.scale_real(1.0 / norm_j));

    // Raw maps: φ_c = ‖ξ_i‖·aux, so U_a sends ξ_i to φ_c exactly.
    let z_b = C64::from_polar(norm_j / norm_i, gamma_b);
    let z_a = C64::from_polar(norm_i / norm_j, gamma_c);

    let u_a = block_swap(&hat_i, &aux, -phase_of(z_a));
    let u_b = block_swap(&hat_j, &hat_i, 0.0);
    let u_c = block_swap(&aux, &hat_j, gamma_c);

    let psi = lam.psi();
    let image = u_c.apply(&u_b.apply(&u_a.apply(psi)?)?)?;
    let composite_residual = image.distance(psi) / psi.norm();
    Ok(SwapTriple { i, j, u_a, u_b, u_c, z_a, z_b, aux_dir: aux, composite_residual })
}

/// Linear equality system over unknown probabilities.
struct Constraints {
    unknowns: usize,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
}

struct Solution {
    particular: DVector<f64>,
    /// Columns span the null space.
    null: DMatrix<f64>,
    residual: f64,
}

impl Constraints {
    fn new() -> Self {
        Constraints { unknowns: 0, rows: Vec::new() }
    }

    fn allocate(&mut self, count: usize) -> std::ops::Range<usize> {
        let start = self.unknowns;
        self.unknowns += count;
        start..self.unknowns
    }

    fn equal(&mut self, a: usize, b: usize) {
        self.rows.push((vec![(a, 1.0), (b, -1.0)], 0.0));
    }

    fn sums_to_one(&mut self, vars: std::ops::Range<usize>) {
        self.rows.push((vars.map(|v| (v, 1.0)).collect(), 1.0));
    }

    fn solve(&self) -> Solution {
        let cols = self.unknowns;
        // Zero rows pad the system so the SVD yields a full right basis.
        let height = self.rows.len().max(cols);
        let mut a = DMatrix::<f64>::zeros(height, cols);
        let mut b = DVector::<f64>::zeros(height);
        for (r, (coeffs, rhs)) in self.rows.iter().enumerate() {
            for (c, v) in coeffs {
                a[(r, *c)] += v;
            }
            b[r] = *rhs;
        }
        let svd = a.clone().svd(true, true);
        let largest = svd.singular_values.max();
        let cutoff = SVD_CUTOFF * largest.max(1.0);
        let particular = svd.solve(&b, cutoff).expect("u and v were computed");
        let v_t = svd.v_t.as_ref().expect("v was computed");
        let null_rows: Vec<usize> = (0..cols).filter(|&k| svd.singular_values[k] <= cutoff).collect();
        let mut null = DMatrix::<f64>::zeros(cols, null_rows.len());
        for (c, &k) in null_rows.iter().enumerate() {
            null.set_column(c, &v_t.row(k).transpose());
        }
        let residual = (&a * &particular - &b).amax();
        Solution { particular, null, residual }
    }
}

/// Outcome of [`forced_equalities`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForcedEqualities {
    /// Partition of microstate indices whose probabilities are forced equal.
    pub classes: Vec<Vec<usize>>,
    /// Dimension of the solution set restricted to the initial
    /// singleton probabilities.
    pub solution_dim: usize,
    /// Forced value of each initial singleton probability, where unique.
    pub values: Vec<Option<f64>>,
    /// Largest equation residual of the least-squares solution.
    pub residual: f64,
    /// Equal-norm pairs whose swap triples entered the system.
    pub pairs: Vec<(usize, usize)>,
}

impl ForcedEqualities {
    pub fn single_class(&self) -> bool {
        self.classes.len() == 1
    }
}

/// Atom vectors of the four states `ψ, U_aψ, U_bU_aψ, U_cU_bU_aψ`, with
/// atom `k` the image of `ξ_k`.
fn atom_chain(lam: &Expansion, t: &SwapTriple) -> Result<[Vec<StateVector>; 4]> {
    let s0: Vec<StateVector> = lam.microstates().to_vec();
    let step = |atoms: &[StateVector], u: &UnitaryOp| atoms.iter().map(|v| u.apply(v)).collect::<Result<Vec<_>>>();
    let s1 = step(&s0, &t.u_a)?;
    let s2 = step(&s1, &t.u_b)?;
    let s3 = step(&s2, &t.u_c)?;
    Ok([s0, s1, s2, s3])
}

fn close(u: &StateVector, v: &StateVector, scale: f64) -> bool {
    u.distance(v) <= EQUAL_NORM_TOL * scale
}

/// Adds the rows one swap triple imposes. Returns the unknown ranges of
/// the three later states.
fn add_triple(
    sys: &mut Constraints,
    initial: std::ops::Range<usize>,
    lam: &Expansion,
    t: &SwapTriple,
    closing: bool,
) -> Result<[std::ops::Range<usize>; 3]> {
    let n = lam.n();
    let chain = atom_chain(lam, t)?;
    let later = [sys.allocate(n), sys.allocate(n), sys.allocate(n)];
    let mut vars = vec![initial.clone()];
    vars.extend(later.iter().cloned());
    for r in &later {
        sys.sums_to_one(r.clone());
    }
    // Locality: an atom left in place keeps its probability.
    for (s, u) in [&t.u_a, &t.u_b, &t.u_c].into_iter().enumerate() {
        for (k, v) in chain[s].iter().enumerate() {
            let moved = apply(u.operator(), v)?;
            if close(&moved, v, v.norm()) {
                sys.equal(vars[s + 1].start + k, vars[s].start + k);
            }
        }
    }
    // Back at ψ with the same atoms: the same state, so the same measure.
    let psi = lam.psi();
    let final_state = StateVector::sum(lam.dim(), &chain[3]);
    if closing && close(&final_state, psi, psi.norm()) {
        for (k, v) in chain[3].iter().enumerate() {
            if let Some(m) = chain[0].iter().position(|x| close(v, x, x.norm())) {
                sys.equal(vars[3].start + k, initial.start + m);
            }
        }
    }
    Ok(later)
}

fn rows_equal(sol: &Solution, a: usize, b: usize) -> bool {
    let scale = 1.0 + sol.particular[a].abs().max(sol.particular[b].abs());
    if (sol.particular[a] - sol.particular[b]).abs() > SVD_CUTOFF * scale {
        return false;
    }
    (0..sol.null.ncols()).all(|c| (sol.null[(a, c)] - sol.null[(b, c)]).abs() <= SVD_CUTOFF)
}

fn restricted_rank(null: &DMatrix<f64>, vars: std::ops::Range<usize>) -> usize {
    if null.ncols() == 0 || vars.is_empty() {
        return 0;
    }
    let block = null.rows(vars.start, vars.len()).into_owned();
    block.rank(SVD_CUTOFF)
}

/// Swap triples for every equal-norm pair, the equalities they impose on
/// the probabilities across the four states, and the resulting partition
/// of initial microstates into classes of forced-equal probability.
pub fn forced_equalities(lam: &Expansion, seed: u64) -> Result<ForcedEqualities> {
    let n = lam.n();
    if n == 1 {
        return Ok(ForcedEqualities {
            classes: vec![vec![0]],
            solution_dim: 0,
            values: vec![Some(1.0)],
            residual: 0.0,
            pairs: Vec::new(),
        });
    }
    if lam.dim() <= n {
        return Err(Error::NoFreeDirection { dim: lam.dim() });
    }
    let norms: Vec<f64> = lam.microstates().iter().map(StateVector::norm).collect();
    let mut sys = Constraints::new();
    let initial = sys.allocate(n);
    sys.sums_to_one(initial.clone());
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if (norms[i] - norms[j]).abs() > EQUAL_NORM_TOL * norms[i].max(norms[j]) {
                continue;
            }
            let pair_seed = seed.wrapping_add((i * n + j) as u64);
            let triple = build_swap_triple(lam, i, j, pair_seed)?;
            add_triple(&mut sys, initial.clone(), lam, &triple, true)?;
            pairs.push((i, j));
        }
    }
    let sol = sys.solve();

    let mut classes: Vec<Vec<usize>> = Vec::new();
    for k in 0..n {
        match classes.iter_mut().find(|c| rows_equal(&sol, initial.start + c[0], initial.start + k)) {
            Some(c) => c.push(k),
            None => classes.push(vec![k]),
        }
    }
    let values = (0..n)
        .map(|k| {
            let v = initial.start + k;
            let free = (0..sol.null.ncols()).any(|c| sol.null[(v, c)].abs() > SVD_CUTOFF);
            (!free).then_some(sol.particular[v])
        })
        .collect();
    Ok(ForcedEqualities {
        classes,
        solution_dim: restricted_rank(&sol.null, initial),
        values,
        residual: sol.residual,
        pairs,
    })
}

/// For a single swap triple and no closing step, the initial singleton
/// whose probability each final atom inherits, or `None` where the
/// constraints leave it undetermined. Pairs `(final atom, vector)` let
/// callers see which initial microstate each final atom now equals.
pub fn swap_transfer(lam: &Expansion, triple: &SwapTriple) -> Result<Vec<Option<usize>>> {
    let n = lam.n();
    let mut sys = Constraints::new();
    let initial = sys.allocate(n);
    sys.sums_to_one(initial.clone());
    let [_, _, last] = add_triple(&mut sys, initial.clone(), lam, triple, false)?;
    let sol = sys.solve();
    Ok((0..n).map(|k| (0..n).find(|&m| rows_equal(&sol, last.start + k, initial.start + m))).collect())
}

/// Final atom vectors `U_c U_b U_a ξ_k`.
pub fn swap_images(lam: &Expansion, triple: &SwapTriple) -> Result<Vec<StateVector>> {
    let [_, _, _, last] = atom_chain(lam, triple)?;
    Ok(last)
}
