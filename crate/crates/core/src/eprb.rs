//! Two spin-½ parties measuring along directions in a common plane.
//!
//! Each party's local space is `C² ⊕ C^pad`. Physical spin states live in
//! the `C²` block; the pad directions give adapted expansions room to
//! peel. The pad is split between the two outcomes so that `P₊ + P₋ = I`
//! locally: the first `⌈pad/2⌉` pad directions belong to `+`, the rest to
//! `−`. A direction at angle `a` is the unit vector `(sin a, 0, cos a)`.
//!
//! Local index `k` of Alice and `l` of Bob combine to global index
//! `k·(2 + pad) + l`.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expansion::{validate, Expansion, ExpansionReport};
use crate::hilbert::{
    apply_kron, seeded_rng, tensor, KronProjector, Operator, Projection, ProjectorOp, StateVector, Tolerance,
    UnitaryOp, C64,
};
use crate::microprob::{adapt_family, born_weight, count_pair, range_needed, BranchCount, Label};

/// Measurement direction, as an angle in radians within the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Setting {
    angle: f64,
}

impl Setting {
    /// Any finite angle; stored reduced to `[0, 2π)`.
    pub fn new(angle: f64) -> Result<Self> {
        if !angle.is_finite() {
            return Err(Error::InvalidInput(format!("setting angle must be finite, got {angle}")));
        }
        Ok(Setting { angle: angle.rem_euclid(TAU) })
    }

    pub fn from_degrees(degrees: f64) -> Result<Self> {
        Setting::new(degrees.to_radians())
    }

    pub fn radians(&self) -> f64 {
        self.angle
    }

    pub fn degrees(&self) -> f64 {
        self.angle.to_degrees()
    }

    /// `n̂·σ = sin a σ_x + cos a σ_z`.
    pub fn spin_operator(&self) -> Operator {
        let (s, c) = self.angle.sin_cos();
        let r = |x: f64| C64::new(x, 0.0);
        Operator::from_rows(2, &[r(c), r(s), r(s), r(-c)]).expect("2x2")
    }

    /// Unit eigenvector of `n̂·σ` for `outcome`.
    pub fn eigenvector(&self, outcome: Spin) -> StateVector {
        let (s, c) = (self.angle / 2.0).sin_cos();
        match outcome {
            Spin::Up => StateVector::from_real(&[c, s]).expect("nonempty"),
            Spin::Down => StateVector::from_real(&[-s, c]).expect("nonempty"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    pub const BOTH: [Spin; 2] = [Spin::Up, Spin::Down];

    pub fn sign(self) -> i8 {
        match self {
            Spin::Up => 1,
            Spin::Down => -1,
        }
    }

    pub fn flip(self) -> Spin {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }
}

impl Serialize for Spin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.sign())
    }
}

/// `(I ± n̂·σ)/2` on `C²`.
pub fn spin_projector(setting: Setting, outcome: Spin) -> ProjectorOp {
    ProjectorOp::onto(2, &[setting.eigenvector(outcome)]).expect("dimension 2")
}

/// Pad directions (as local indices) owned by an outcome.
fn pad_share(pad: usize, outcome: Spin) -> std::ops::Range<usize> {
    let up = pad.div_ceil(2);
    match outcome {
        Spin::Up => 2..2 + up,
        Spin::Down => 2 + up..2 + pad,
    }
}

fn pad_rank(pad: usize, outcome: Spin) -> usize {
    pad_share(pad, outcome).len()
}

/// Spin projector on one party's padded space `C² ⊕ C^pad`.
pub fn local_projector(setting: Setting, outcome: Spin, pad: usize) -> ProjectorOp {
    let d = 2 + pad;
    let mut basis = vec![setting.eigenvector(outcome).embed(d).expect("larger dimension")];
    basis.extend(pad_share(pad, outcome).map(|k| StateVector::basis(d, k)));
    ProjectorOp::onto(d, &basis).expect("matching dimension")
}

/// Places a state of `C² ⊗ C²` (index `2i + j`) into the padded space.
pub fn embed_spin_state(spin: &StateVector, pad: usize) -> Result<StateVector> {
    if spin.dim() != 4 {
        return Err(Error::DimensionMismatch { left: spin.dim(), right: 4 });
    }
    let d = 2 + pad;
    let mut out = vec![C64::new(0.0, 0.0); d * d];
    for i in 0..2 {
        for j in 0..2 {
            out[i * d + j] = spin.components()[2 * i + j];
        }
    }
    StateVector::new(out)
}

/// `(|01⟩ − |10⟩)/√2` in `C² ⊗ C²`.
pub fn singlet_spin() -> StateVector {
    StateVector::from_real(&[0.0, FRAC_1_SQRT_2, -FRAC_1_SQRT_2, 0.0]).expect("nonempty")
}

/// The singlet in the padded bipartite space.
pub fn singlet(pad: usize) -> StateVector {
    embed_spin_state(&singlet_spin(), pad).expect("four components")
}

/// `φ ⊗ χ` for single-qubit states, in the padded bipartite space.
pub fn product_state(phi: &StateVector, chi: &StateVector, pad: usize) -> Result<StateVector> {
    for v in [phi, chi] {
        if v.dim() != 2 {
            return Err(Error::DimensionMismatch { left: v.dim(), right: 2 });
        }
    }
    embed_spin_state(&tensor(phi, chi), pad)
}

/// Joint spin-table weights `w[s][t]` of a `C² ⊗ C²` state at settings
/// `(a, b)`, ordered `Up, Down`.
fn spin_weights(spin: &StateVector, a: Setting, b: Setting) -> Result<[[f64; 2]; 2]> {
    let mut w = [[0.0; 2]; 2];
    for (si, s) in Spin::BOTH.into_iter().enumerate() {
        for (ti, t) in Spin::BOTH.into_iter().enumerate() {
            let k = KronProjector::new(spin_projector(a, s), spin_projector(b, t));
            w[si][ti] = born_weight(&k, spin)?;
        }
    }
    Ok(w)
}

fn pad_fits(w: &[[f64; 2]; 2], n: usize, pad: usize) -> bool {
    let d = 2 + pad;
    if d * d < n {
        return false;
    }
    let local_rank = |s: Spin| 1 + pad_rank(pad, s);
    for (si, s) in Spin::BOTH.into_iter().enumerate() {
        for (ti, t) in Spin::BOTH.into_iter().enumerate() {
            if range_needed(w[si][ti], n) > local_rank(s) * local_rank(t) {
                return false;
            }
        }
        let alice = w[si][0] + w[si][1];
        let bob = w[0][si] + w[1][si];
        if range_needed(alice, n) > local_rank(s) * d || range_needed(bob, n) > local_rank(s) * d {
            return false;
        }
    }
    true
}

/// Smallest pad letting joint tables and binary marginals at every given
/// setting pair host an `n`-element adapted expansion of `spin`.
pub fn required_pad(spin: &StateVector, pairs: &[(Setting, Setting)], n: usize) -> Result<usize> {
    let weights = pairs.iter().map(|(a, b)| spin_weights(spin, *a, *b)).collect::<Result<Vec<_>>>()?;
    let mut pad = 0;
    while !weights.iter().all(|w| pad_fits(w, n, pad)) {
        pad += 1;
    }
    Ok(pad)
}

/// Smallest pad (at least 2, leaving room for Bob's measurement record)
/// letting Alice's binary counts at each of her settings host an
/// `n`-element adapted expansion of `spin`.
pub fn marginal_pad(spin: &StateVector, alice: &[Setting], n: usize) -> Result<usize> {
    let b = Setting::new(0.0)?;
    let weights = alice.iter().map(|a| spin_weights(spin, *a, b)).collect::<Result<Vec<_>>>()?;
    let fits = |pad: usize| {
        let d = 2 + pad;
        d * d >= n
            && weights.iter().all(|w| {
                Spin::BOTH
                    .into_iter()
                    .enumerate()
                    .all(|(si, s)| range_needed(w[si][0] + w[si][1], n) <= (1 + pad_rank(pad, s)) * d)
            })
    };
    let mut pad = 2;
    while !fits(pad) {
        pad += 1;
    }
    Ok(pad)
}

/// Smallest pad letting a single-qubit state `phi` host an `n`-element
/// expansion adapted to the spin projectors at `setting`.
pub fn local_pad(phi: &StateVector, setting: Setting, n: usize) -> Result<usize> {
    if phi.dim() != 2 {
        return Err(Error::DimensionMismatch { left: phi.dim(), right: 2 });
    }
    let w = born_weight(&spin_projector(setting, Spin::Up), phi)?;
    let mut pad = 0;
    while 2 + pad < n
        || range_needed(w, n) > 1 + pad_rank(pad, Spin::Up)
        || range_needed(1.0 - w, n) > 1 + pad_rank(pad, Spin::Down)
    {
        pad += 1;
    }
    Ok(pad)
}

/// A bipartite state with two settings per party and an ensemble size.
#[derive(Clone, Debug)]
pub struct EprbScenario {
    state: StateVector,
    pad: usize,
    pub alice: [Setting; 2],
    pub bob: [Setting; 2],
    pub n: usize,
    pub seed: u64,
}

impl EprbScenario {
    pub fn new(
        state: StateVector,
        pad: usize,
        alice: [Setting; 2],
        bob: [Setting; 2],
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = 2 + pad;
        if state.dim() != d * d {
            return Err(Error::DimensionMismatch { left: state.dim(), right: d * d });
        }
        if state.norm() <= Tolerance::default().abs {
            return Err(Error::ZeroState);
        }
        if n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        if n > d * d {
            return Err(Error::DimensionTooSmall { needed: n, available: d * d });
        }
        Ok(EprbScenario { state, pad, alice, bob, n, seed })
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn local_dim(&self) -> usize {
        2 + self.pad
    }

    fn joint_projector(&self, a: Setting, s: Spin, b: Setting, t: Spin) -> KronProjector {
        KronProjector::new(local_projector(a, s, self.pad), local_projector(b, t, self.pad))
    }

    fn alice_projector(&self, a: Setting, s: Spin) -> KronProjector {
        KronProjector::new(local_projector(a, s, self.pad), ProjectorOp::identity(self.local_dim()))
    }

    fn bob_projector(&self, b: Setting, t: Spin) -> KronProjector {
        KronProjector::new(ProjectorOp::identity(self.local_dim()), local_projector(b, t, self.pad))
    }

    /// `p(s, t)` at settings `(a, b)`.
    pub fn born_joint(&self, a: Setting, s: Spin, b: Setting, t: Spin) -> f64 {
        born_weight(&self.joint_projector(a, s, b, t), &self.state).expect("scenario state is valid")
    }

    /// Alice's count for `P_+^a ⊗ I` in `state` (`m_complement` counts `P_−`).
    fn alice_count(&self, a: Setting, state: &StateVector, seed: u64) -> Result<BranchCount> {
        count_pair(&self.alice_projector(a, Spin::Up), &self.alice_projector(a, Spin::Down), state, self.n, seed)
    }

    fn bob_count(&self, b: Setting, seed: u64) -> Result<BranchCount> {
        count_pair(&self.bob_projector(b, Spin::Up), &self.bob_projector(b, Spin::Down), &self.state, self.n, seed)
    }

    /// Bob's measurement at setting `b` as a local unitary: his `−`
    /// eigenvector is exchanged with the first pad direction owned by `−`,
    /// which then records the outcome.
    pub fn bob_measurement(&self, b: Setting) -> Result<UnitaryOp> {
        let d = self.local_dim();
        let Some(record) = pad_share(self.pad, Spin::Down).next() else {
            return Err(Error::InvalidInput("a measurement record needs pad >= 2".into()));
        };
        let u = b.eigenvector(Spin::Down).embed(d)?;
        let e = StateVector::basis(d, record);
        let swap = Operator::outer(&u, &e)?.plus(&Operator::outer(&e, &u)?)?;
        let drop = Operator::outer(&u, &u)?.plus(&Operator::outer(&e, &e)?)?;
        UnitaryOp::new(Operator::identity(d).minus(&drop)?.plus(&swap)?, &Tolerance::default())
    }

    /// `(I ⊗ U) ψ`.
    pub fn apply_bob(&self, u: &UnitaryOp) -> Result<StateVector> {
        apply_kron(&Operator::identity(self.local_dim()), u.operator(), &self.state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JointCell {
    pub s: Spin,
    pub t: Spin,
    pub m: usize,
    /// `m/n`.
    pub fraction: f64,
    /// `[m/n, (m + cats)/n]`.
    pub interval: (f64, f64),
    pub born: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Marginal {
    pub outcome: Spin,
    /// `Σ_t p(s, t)`.
    pub born_summed: f64,
    /// Born weight of the local binary projector.
    pub born_binary: f64,
    /// `Σ_t m_st`.
    pub m_summed: usize,
    /// Count from a binary adapted expansion of the local projector.
    pub m_binary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JointTable {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub cats: usize,
    pub cells: Vec<JointCell>,
    pub alice: Vec<Marginal>,
    pub bob: Vec<Marginal>,
}

impl JointTable {
    pub fn cell(&self, s: Spin, t: Spin) -> &JointCell {
        self.cells.iter().find(|c| c.s == s && c.t == t).expect("all four cells present")
    }

    pub fn born_total(&self) -> f64 {
        self.cells.iter().map(|c| c.born).sum()
    }

    pub fn count_total(&self) -> usize {
        self.cells.iter().map(|c| c.m).sum()
    }

    /// `Σ s·t·p(s, t)` from Born weights.
    pub fn born_correlator(&self) -> f64 {
        self.cells.iter().map(|c| f64::from(c.s.sign() * c.t.sign()) * c.born).sum()
    }

    /// `Σ s·t·m_st/n`.
    pub fn count_correlator(&self) -> f64 {
        self.cells.iter().map(|c| f64::from(c.s.sign() * c.t.sign()) * c.fraction).sum()
    }
}

fn table_seed(seed: u64, a: Setting, b: Setting) -> u64 {
    seed ^ a.radians().to_bits().rotate_left(17) ^ b.radians().to_bits().rotate_left(41)
}

/// Four-cell joint counts from one adapted expansion.
fn joint_cells(sc: &EprbScenario, a: Setting, b: Setting) -> Result<(Vec<JointCell>, usize)> {
    let mut projectors = Vec::with_capacity(4);
    let mut outcomes = Vec::with_capacity(4);
    for s in Spin::BOTH {
        for t in Spin::BOTH {
            projectors.push(sc.joint_projector(a, s, b, t));
            outcomes.push((s, t));
        }
    }
    let family: Vec<&dyn Projection> = projectors.iter().map(|p| p as &dyn Projection).collect();
    let adapted = adapt_family(&family, &sc.state, sc.n, table_seed(sc.seed, a, b))?;
    let report = adapted.verify(&family, &Tolerance::default());
    if !report.passed {
        return Err(Error::InvariantViolation(format!(
            "joint expansion labels do not hold (eigen defect {:.3e})",
            report.eigen_defect
        )));
    }
    let counts = adapted.counts();
    let cats = adapted.cats();
    let nf = sc.n as f64;
    let cells = outcomes
        .into_iter()
        .enumerate()
        .map(|(o, (s, t))| JointCell {
            s,
            t,
            m: counts[o],
            fraction: counts[o] as f64 / nf,
            interval: (counts[o] as f64 / nf, (counts[o] + cats) as f64 / nf),
            born: adapted.weights()[o],
        })
        .collect();
    Ok((cells, cats))
}

/// Born and counted joint probabilities at `(a, b)`, with marginals both
/// by summing the table and from local binary counts.
pub fn joint_table(sc: &EprbScenario, a: Setting, b: Setting) -> Result<JointTable> {
    let (cells, cats) = joint_cells(sc, a, b)?;
    let seed = table_seed(sc.seed, a, b);
    let alice_count = sc.alice_count(a, &sc.state, seed.wrapping_add(1))?;
    let bob_count = sc.bob_count(b, seed.wrapping_add(2))?;
    let pick = |c: &BranchCount, s: Spin| if s == Spin::Up { c.m } else { c.m_complement };
    let marginal = |side: fn(&JointCell) -> Spin, s: Spin, binary: &BranchCount, born_binary: f64| Marginal {
        outcome: s,
        born_summed: cells.iter().filter(|c| side(c) == s).map(|c| c.born).sum(),
        born_binary,
        m_summed: cells.iter().filter(|c| side(c) == s).map(|c| c.m).sum(),
        m_binary: pick(binary, s),
    };
    let alice = Spin::BOTH
        .into_iter()
        .map(|s| {
            let born = born_weight(&sc.alice_projector(a, s), &sc.state)?;
            Ok(marginal(|c| c.s, s, &alice_count, born))
        })
        .collect::<Result<Vec<_>>>()?;
    let bob = Spin::BOTH
        .into_iter()
        .map(|t| {
            let born = born_weight(&sc.bob_projector(b, t), &sc.state)?;
            Ok(marginal(|c| c.t, t, &bob_count, born))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JointTable { a: a.radians(), b: b.radians(), n: sc.n, cats, cells, alice, bob })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IndependenceRow {
    pub alice_setting: f64,
    pub outcome: Spin,
    /// Alice's marginal summed over Bob's outcomes at `b`.
    pub born_given_b: f64,
    /// The same at `b′`.
    pub born_given_bprime: f64,
    pub born_binary: f64,
    pub m_initial: usize,
    pub m_after_b: usize,
    pub m_after_bprime: usize,
    pub m_after_random: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndependenceReport {
    pub n: usize,
    pub rows: Vec<IndependenceRow>,
    pub max_born_gap: f64,
    pub counts_identical: bool,
    pub passed: bool,
}

/// Alice's marginals under Bob's choice of setting and after Bob acts
/// locally: Born marginals must agree within tolerance and counts exactly.
///
/// Bob's local actions are his measurement interaction at `b` and at `b′`
/// and a Haar-random `I ⊗ U`.
pub fn parameter_independence(sc: &EprbScenario, tol: &Tolerance) -> Result<IndependenceReport> {
    let mut rng = seeded_rng(sc.seed ^ 0xB0B);
    let random = UnitaryOp::random(sc.local_dim(), &mut rng);
    let after_b = sc.apply_bob(&sc.bob_measurement(sc.bob[0])?)?;
    let after_bprime = sc.apply_bob(&sc.bob_measurement(sc.bob[1])?)?;
    let after_random = sc.apply_bob(&random)?;

    let mut rows = Vec::new();
    let mut max_born_gap: f64 = 0.0;
    let mut counts_identical = true;
    for (k, &a) in sc.alice.iter().enumerate() {
        let seed = sc.seed.wrapping_add(k as u64);
        let counts = [&sc.state, &after_b, &after_bprime, &after_random]
            .into_iter()
            .map(|state| sc.alice_count(a, state, seed))
            .collect::<Result<Vec<_>>>()?;
        counts_identical &= counts.iter().all(|c| c.same_counts(&counts[0]));
        for s in Spin::BOTH {
            let given = |b: Setting| Spin::BOTH.into_iter().map(|t| sc.born_joint(a, s, b, t)).sum::<f64>();
            let born_binary = born_weight(&sc.alice_projector(a, s), &sc.state)?;
            let row = IndependenceRow {
                alice_setting: a.radians(),
                outcome: s,
                born_given_b: given(sc.bob[0]),
                born_given_bprime: given(sc.bob[1]),
                born_binary,
                m_initial: pick(&counts[0], s),
                m_after_b: pick(&counts[1], s),
                m_after_bprime: pick(&counts[2], s),
                m_after_random: pick(&counts[3], s),
            };
            let gap = (row.born_given_b - row.born_given_bprime).abs().max((row.born_given_b - born_binary).abs());
            max_born_gap = max_born_gap.max(gap);
            rows.push(row);
        }
    }
    Ok(IndependenceReport {
        n: sc.n,
        rows,
        max_born_gap,
        counts_identical,
        passed: counts_identical && max_born_gap <= tol.rel,
    })
}

fn pick(c: &BranchCount, s: Spin) -> usize {
    match s {
        Spin::Up => c.m,
        Spin::Down => c.m_complement,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FactorRow {
    pub s: Spin,
    pub t: Spin,
    pub joint: f64,
    /// `p(s)·p(t)`.
    pub product: f64,
    pub deviation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConditionalRow {
    pub s: Spin,
    pub t: Spin,
    pub p_t: f64,
    /// `p(s, t)/p(t)`, absent when `p(t)` is negligible.
    pub conditional: Option<f64>,
    pub marginal: f64,
    pub deviation: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    Factorizing,
    Violating,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutcomeIndependenceReport {
    pub a: f64,
    pub b: f64,
    pub rows: Vec<FactorRow>,
    pub max_deviation: f64,
    pub classification: Factorization,
    pub conditional: Vec<ConditionalRow>,
    pub max_conditional_deviation: f64,
}

/// Compares `p(s, t)` with `p(s)·p(t)` from Born weights, and `p(s | t)`
/// with `p(s)` wherever `p(t)` exceeds `tol.abs`.
pub fn outcome_independence(sc: &EprbScenario, a: Setting, b: Setting, tol: &Tolerance) -> OutcomeIndependenceReport {
    let joint = |s: Spin, t: Spin| sc.born_joint(a, s, b, t);
    let alice = |s: Spin| Spin::BOTH.into_iter().map(|t| joint(s, t)).sum::<f64>();
    let bob = |t: Spin| Spin::BOTH.into_iter().map(|s| joint(s, t)).sum::<f64>();
    let mut rows = Vec::new();
    let mut conditional = Vec::new();
    for s in Spin::BOTH {
        for t in Spin::BOTH {
            let (pj, ps, pt) = (joint(s, t), alice(s), bob(t));
            rows.push(FactorRow { s, t, joint: pj, product: ps * pt, deviation: (pj - ps * pt).abs() });
            let cond = (pt > tol.abs).then(|| pj / pt);
            conditional.push(ConditionalRow {
                s,
                t,
                p_t: pt,
                conditional: cond,
                marginal: ps,
                deviation: cond.map(|c| (c - ps).abs()),
            });
        }
    }
    let max_deviation = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let max_conditional_deviation = conditional.iter().filter_map(|r| r.deviation).fold(0.0, f64::max);
    OutcomeIndependenceReport {
        a: a.radians(),
        b: b.radians(),
        rows,
        max_deviation,
        classification: if max_deviation <= tol.rel { Factorization::Factorizing } else { Factorization::Violating },
        conditional,
        max_conditional_deviation,
    }
}

/// Microstates of `φ ⊗ χ` sorted by whether each factor lies in its `+`
/// projector (cats count as not lying in it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProductFamilies {
    pub both: usize,
    pub alice_only: usize,
    pub bob_only: usize,
    pub neither: usize,
}

impl ProductFamilies {
    pub fn total(&self) -> usize {
        self.both + self.alice_only + self.bob_only + self.neither
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProductCountReport {
    pub m_a: usize,
    pub n_a: usize,
    pub m_b: usize,
    pub n_b: usize,
    /// Product microstates found numerically in `P_+^a ⊗ P_+^b`.
    pub joint_count: usize,
    pub joint_denominator: usize,
    pub joint_probability: f64,
    pub marginal_product: f64,
    /// `joint_count == m_a·m_b`, so the fractions agree exactly.
    pub exact: bool,
    pub families: ProductFamilies,
    pub validation: ExpansionReport,
    pub passed: bool,
}

/// Local `{P_+, P_−}` expansion of one party; returns the microstates and
/// how many lie in `P_+`.
fn local_expansion(v: &StateVector, setting: Setting, n: usize, seed: u64) -> Result<(Vec<StateVector>, Vec<bool>)> {
    if v.dim() < 2 {
        return Err(Error::DimensionTooSmall { needed: 2, available: v.dim() });
    }
    let pad = v.dim() - 2;
    let up = local_projector(setting, Spin::Up, pad);
    let down = local_projector(setting, Spin::Down, pad);
    let adapted = adapt_family(&[&up, &down], v, n, seed)?;
    let in_up = adapted.labels().iter().map(|l| *l == Label::Outcome(0)).collect();
    Ok((adapted.expansion().microstates().to_vec(), in_up))
}

/// Counting for a product state: local adapted expansions of `φ` (size
/// `n_a`) and `χ` (size `n_b`), their `n_a·n_b` pairwise tensor products
/// as an expansion of `φ ⊗ χ`, and the number of those lying in
/// `P_+^a ⊗ P_+^b`, found by applying the projector.
///
/// `φ`, `χ` are local states of dimension `2 + pad`.
#[allow(clippy::too_many_arguments)]
pub fn product_counting(
    phi: &StateVector,
    chi: &StateVector,
    a: Setting,
    b: Setting,
    n_a: usize,
    n_b: usize,
    seed: u64,
    tol: &Tolerance,
) -> Result<ProductCountReport> {
    let (xs, xs_up) = local_expansion(phi, a, n_a, seed)?;
    let (ys, ys_up) = local_expansion(chi, b, n_b, seed.wrapping_add(1))?;
    let m_a = xs_up.iter().filter(|u| **u).count();
    let m_b = ys_up.iter().filter(|u| **u).count();

    let joint =
        KronProjector::new(local_projector(a, Spin::Up, phi.dim() - 2), local_projector(b, Spin::Up, chi.dim() - 2));
    let mut microstates = Vec::with_capacity(n_a * n_b);
    let mut joint_count = 0;
    let mut families = ProductFamilies { both: 0, alice_only: 0, bob_only: 0, neither: 0 };
    for (x, &x_up) in xs.iter().zip(&xs_up) {
        for (y, &y_up) in ys.iter().zip(&ys_up) {
            let v = tensor(x, y);
            if joint.project(&v).distance(&v) <= tol.rel * v.norm() {
                joint_count += 1;
            }
            match (x_up, y_up) {
                (true, true) => families.both += 1,
                (true, false) => families.alice_only += 1,
                (false, true) => families.bob_only += 1,
                (false, false) => families.neither += 1,
            }
            microstates.push(v);
        }
    }
    let expansion = Expansion::from_parts(tensor(phi, chi), microstates, Vec::new())?;
    let validation = validate(&expansion, tol);
    let denominator = n_a * n_b;
    let exact = joint_count == m_a * m_b;
    let passed = exact && validation.all_passed() && families.total() == denominator && families.both == joint_count;
    Ok(ProductCountReport {
        m_a,
        n_a,
        m_b,
        n_b,
        joint_count,
        joint_denominator: denominator,
        joint_probability: joint_count as f64 / denominator as f64,
        marginal_product: (m_a as f64 / n_a as f64) * (m_b as f64 / n_b as f64),
        exact,
        families,
        validation,
        passed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlator {
    pub a: f64,
    pub b: f64,
    pub born: f64,
    pub count: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChshReport {
    pub correlators: Vec<Correlator>,
    pub born_s: f64,
    pub count_s: Option<f64>,
    /// `16/n`.
    pub count_bound: Option<f64>,
    pub classical_bound: f64,
    pub within_bound: Option<bool>,
}

fn chsh_pairs(sc: &EprbScenario) -> [(Setting, Setting, f64); 4] {
    let ([a, ap], [b, bp]) = (sc.alice, sc.bob);
    [(a, b, 1.0), (a, bp, -1.0), (ap, b, 1.0), (ap, bp, 1.0)]
}

/// `S = |E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)|` from Born weights only.
pub fn chsh_born(sc: &EprbScenario) -> ChshReport {
    let mut correlators = Vec::new();
    let mut s = 0.0;
    for (a, b, sign) in chsh_pairs(sc) {
        let e: f64 = Spin::BOTH
            .into_iter()
            .flat_map(|x| Spin::BOTH.into_iter().map(move |y| (x, y)))
            .map(|(x, y)| f64::from(x.sign() * y.sign()) * sc.born_joint(a, x, b, y))
            .sum();
        s += sign * e;
        correlators.push(Correlator { a: a.radians(), b: b.radians(), born: e, count: None });
    }
    ChshReport {
        correlators,
        born_s: s.abs(),
        count_s: None,
        count_bound: None,
        classical_bound: 2.0,
        within_bound: None,
    }
}

/// [`chsh_born`] plus the same combination from counted joint tables.
pub fn chsh(sc: &EprbScenario) -> Result<ChshReport> {
    let mut report = chsh_born(sc);
    let mut s = 0.0;
    for ((a, b, sign), corr) in chsh_pairs(sc).into_iter().zip(report.correlators.iter_mut()) {
        let (cells, _) = joint_cells(sc, a, b)?;
        let e: f64 = cells.iter().map(|c| f64::from(c.s.sign() * c.t.sign()) * c.fraction).sum();
        corr.count = Some(e);
        s += sign * e;
    }
    let bound = 16.0 / sc.n as f64;
    report.count_s = Some(s.abs());
    report.count_bound = Some(bound);
    report.within_bound = Some((s.abs() - report.born_s).abs() <= bound);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::inner;
    use rand::Rng;

    fn deg(x: f64) -> Setting {
        Setting::from_degrees(x).unwrap()
    }

    fn tol() -> Tolerance {
        Tolerance::default()
    }

    fn scenario(state: StateVector, pad: usize, n: usize) -> EprbScenario {
        EprbScenario::new(state, pad, [deg(0.0), deg(90.0)], [deg(45.0), deg(135.0)], n, 7).unwrap()
    }

    fn z_up() -> StateVector {
        StateVector::basis(2, 0)
    }

    #[test]
    fn spin_projector_examples() {
        let p = spin_projector(deg(0.0), Spin::Up);
        let expected =
            Operator::from_rows(2, &[C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)])
                .unwrap();
        assert!(p.operator().minus(&expected).unwrap().max_abs() < 1e-15);

        let mut rng = seeded_rng(0);
        for _ in 0..20 {
            let a = Setting::new(rng.random_range(0.0..TAU)).unwrap();
            let up = spin_projector(a, Spin::Up);
            let down = spin_projector(a, Spin::Down);
            let sum = up.operator().plus(down.operator()).unwrap();
            assert!(sum.minus(&Operator::identity(2)).unwrap().max_abs() < 1e-14);
            assert!(up.operator().hermiticity_defect() < 1e-15);
            assert!(up.operator().idempotence_defect() < 1e-14);
            // (I + n·σ)/2 from the spin operator directly.
            let direct = Operator::identity(2).plus(&a.spin_operator()).unwrap().scale(C64::new(0.5, 0.0));
            assert!(direct.minus(up.operator()).unwrap().max_abs() < 1e-14);
            for pad in [0, 1, 4, 5] {
                let lu = local_projector(a, Spin::Up, pad);
                let ld = local_projector(a, Spin::Down, pad);
                let total = lu.operator().plus(ld.operator()).unwrap();
                assert!(total.minus(&Operator::identity(2 + pad)).unwrap().max_abs() < 1e-14);
                assert_eq!(lu.rank() + ld.rank(), 2 + pad);
            }
        }
    }

    #[test]
    fn setting_validation() {
        assert!(Setting::new(f64::NAN).is_err());
        assert!((deg(-90.0).degrees() - 270.0).abs() < 1e-12);
    }

    #[test]
    fn singlet_examples() {
        let s = singlet(3);
        assert!((s.norm() - 1.0).abs() < 1e-15);
        let mut rng = seeded_rng(1);
        for _ in 0..5 {
            let a = Setting::new(rng.random_range(0.0..TAU)).unwrap();
            let k = KronProjector::new(local_projector(a, Spin::Up, 3), local_projector(a, Spin::Up, 3));
            let v = k.project(&s);
            assert!(inner(&s, &v).unwrap().norm() < 1e-15);
        }
    }

    /// `(1 − st cos(a − b))/4` against direct matrix elements.
    #[test]
    fn singlet_born_oracle() {
        let sc = scenario(singlet(2), 2, 4);
        let mut rng = seeded_rng(2);
        for _ in 0..10 {
            let a = Setting::new(rng.random_range(0.0..TAU)).unwrap();
            let b = Setting::new(rng.random_range(0.0..TAU)).unwrap();
            for s in Spin::BOTH {
                for t in Spin::BOTH {
                    let oracle = (1.0 - f64::from(s.sign() * t.sign()) * (a.radians() - b.radians()).cos()) / 4.0;
                    assert!((sc.born_joint(a, s, b, t) - oracle).abs() < 1e-14);
                }
            }
            // Common rotation leaves the table unchanged.
            let offset = rng.random_range(0.0..TAU);
            let (a2, b2) = (Setting::new(a.radians() + offset).unwrap(), Setting::new(b.radians() + offset).unwrap());
            for s in Spin::BOTH {
                for t in Spin::BOTH {
                    assert!((sc.born_joint(a, s, b, t) - sc.born_joint(a2, s, b2, t)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn joint_table_singlet_equal_settings() {
        let sc = scenario(singlet(4), 4, 16);
        let t = joint_table(&sc, deg(0.0), deg(0.0)).unwrap();
        assert!(t.cell(Spin::Up, Spin::Up).born.abs() < 1e-15);
        assert!(t.cell(Spin::Down, Spin::Down).born.abs() < 1e-15);
        assert!((t.cell(Spin::Up, Spin::Down).born - 0.5).abs() < 1e-15);
        assert_eq!(t.cell(Spin::Up, Spin::Up).m, 0);
        assert_eq!(t.cell(Spin::Up, Spin::Down).m, 8);
        assert_eq!(t.cats, 0);
        assert!((t.born_total() - 1.0).abs() < 1e-12);
        for m in t.alice.iter().chain(&t.bob) {
            assert!((m.born_summed - 0.5).abs() < 1e-12);
            assert!((m.born_binary - m.born_summed).abs() < 1e-12);
            assert_eq!(m.m_summed, 8);
            assert_eq!(m.m_binary, 8);
        }
    }

    #[test]
    fn joint_table_sixty_degrees() {
        let pad = required_pad(&singlet_spin(), &[(deg(0.0), deg(60.0))], 40).unwrap();
        let sc = scenario(singlet(pad), pad, 40);
        let t = joint_table(&sc, deg(0.0), deg(60.0)).unwrap();
        for c in &t.cells {
            let oracle = if c.s == c.t { 0.125 } else { 0.375 };
            assert!((c.born - oracle).abs() < 1e-14);
            assert_eq!(c.m, (oracle * 40.0) as usize);
        }
        assert_eq!(t.count_total() + t.cats, 40);
    }

    #[test]
    fn joint_table_product_eigenstate() {
        let spin = tensor(&z_up(), &z_up());
        let pad = required_pad(&spin, &[(deg(0.0), deg(0.0))], 10).unwrap();
        assert_eq!(pad, 5);
        let sc = scenario(embed_spin_state(&spin, pad).unwrap(), pad, 10);
        let t = joint_table(&sc, deg(0.0), deg(0.0)).unwrap();
        assert_eq!(t.cell(Spin::Up, Spin::Up).m, 10);
        assert_eq!(t.cats, 0);
        assert!((t.cell(Spin::Up, Spin::Up).born - 1.0).abs() < 1e-15);
    }

    #[test]
    fn counting_intervals_contain_born() {
        let a = deg(0.0);
        let b = deg(37.0);
        let pad = required_pad(&singlet_spin(), &[(a, b)], 100).unwrap();
        let sc = scenario(singlet(pad), pad, 100);
        let t = joint_table(&sc, a, b).unwrap();
        assert!(t.cats <= 3);
        for c in &t.cells {
            assert!(c.interval.0 <= c.born + 1e-12 && c.born <= c.interval.1 + 1e-12);
        }
        assert_eq!(t.count_total(), 100 - t.cats);
    }

    #[test]
    fn too_small_pad_is_reported() {
        let sc = scenario(singlet(1), 1, 9);
        assert!(matches!(joint_table(&sc, deg(0.0), deg(60.0)), Err(Error::DimensionTooSmall { .. })));
        assert!(matches!(
            EprbScenario::new(singlet(1), 1, [deg(0.0); 2], [deg(0.0); 2], 10, 0),
            Err(Error::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn parameter_independence_singlet_and_product() {
        let sc = scenario(singlet(8), 8, 32);
        let r = parameter_independence(&sc, &tol()).unwrap();
        assert!(r.passed, "{r:?}");
        for row in &r.rows {
            assert!((row.born_given_b - 0.5).abs() < 1e-12);
            assert_eq!(row.m_initial, 16);
        }

        let phi = StateVector::from_real(&[0.6, 0.8]).unwrap();
        let chi = StateVector::from_real(&[1.0, 0.0]).unwrap();
        let sc = scenario(product_state(&phi, &chi, 8).unwrap(), 8, 32);
        let r = parameter_independence(&sc, &tol()).unwrap();
        assert!(r.passed, "{r:?}");
        for row in &r.rows {
            let local = sc.alice[if row.alice_setting == 0.0 { 0 } else { 1 }];
            let oracle = inner(&local.eigenvector(row.outcome), &phi).unwrap().norm_sqr();
            assert!((row.born_given_b - oracle).abs() < 1e-12);
            assert!((row.born_given_bprime - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn bob_measurement_moves_amplitude_into_pad() {
        let sc = scenario(singlet(4), 4, 4);
        let u = sc.bob_measurement(deg(45.0)).unwrap();
        let after = sc.apply_bob(&u).unwrap();
        assert!((after.norm() - 1.0).abs() < 1e-14);
        // Bob's − amplitude now sits in his record direction.
        let record =
            KronProjector::new(ProjectorOp::identity(6), ProjectorOp::onto(6, &[StateVector::basis(6, 4)]).unwrap());
        assert!((born_weight(&record, &after).unwrap() - 0.5).abs() < 1e-14);
        assert!(scenario(singlet(1), 1, 4).bob_measurement(deg(0.0)).is_err());
    }

    #[test]
    fn outcome_independence_examples() {
        let sc = scenario(singlet(0), 0, 1);
        let r = outcome_independence(&sc, deg(0.0), deg(0.0), &tol());
        assert_eq!(r.classification, Factorization::Violating);
        assert!((r.max_deviation - 0.25).abs() < 1e-12);
        let r = outcome_independence(&sc, deg(0.0), deg(90.0), &tol());
        assert_eq!(r.classification, Factorization::Factorizing);

        let phi = StateVector::from_real(&[0.6, 0.8]).unwrap();
        let chi = StateVector::new(vec![C64::new(0.0, 0.6), C64::new(0.8, 0.0)]).unwrap();
        let sc = scenario(product_state(&phi, &chi, 0).unwrap(), 0, 1);
        let r = outcome_independence(&sc, deg(13.0), deg(200.0), &tol());
        assert_eq!(r.classification, Factorization::Factorizing);
        assert!(r.max_deviation <= 1e-10);
        assert!(r.max_conditional_deviation <= 1e-10);
    }

    #[test]
    fn conditional_rows_skip_impossible_outcomes() {
        let state = product_state(&z_up(), &z_up(), 0).unwrap();
        let sc = scenario(state, 0, 1);
        let r = outcome_independence(&sc, deg(0.0), deg(0.0), &tol());
        let missing: Vec<_> = r.conditional.iter().filter(|c| c.conditional.is_none()).collect();
        assert_eq!(missing.len(), 2);
        assert!(missing.iter().all(|c| c.t == Spin::Down));
    }

    #[test]
    fn product_counting_three_tenths_times_half() {
        let third = StateVector::from_real(&[(1.0f64 / 3.0).sqrt(), (2.0f64 / 3.0).sqrt()]).unwrap();
        let half = StateVector::from_real(&[FRAC_1_SQRT_2, FRAC_1_SQRT_2]).unwrap();
        let phi = third.embed(14).unwrap();
        let chi = half.embed(4).unwrap();
        let r = product_counting(&phi, &chi, deg(0.0), deg(0.0), 10, 2, 3, &tol()).unwrap();
        assert_eq!((r.m_a, r.n_a, r.m_b, r.n_b), (3, 10, 1, 2));
        assert_eq!(r.joint_count, 3);
        assert_eq!(r.joint_denominator, 20);
        assert_eq!(r.joint_probability, 0.15);
        assert!(r.exact && r.passed, "{r:?}");
        assert_eq!(r.families, ProductFamilies { both: 3, alice_only: 3, bob_only: 7, neither: 7 });
    }

    #[test]
    fn product_counting_certain_local_outcome() {
        // All 8 microstates in P_+: its rank 1 + ⌈pad/2⌉ needs pad 13.
        let phi = z_up().embed(15).unwrap();
        let chi = StateVector::from_real(&[0.6, 0.8]).unwrap().embed(14).unwrap();
        let r = product_counting(&phi, &chi, deg(0.0), deg(0.0), 8, 10, 0, &tol()).unwrap();
        assert_eq!(r.m_a, 8);
        assert_eq!(r.joint_count, r.m_b * 8);
        assert_eq!(r.joint_probability, r.m_b as f64 / 10.0);
        assert!(r.passed);
    }

    #[test]
    fn local_pad_examples() {
        let third = StateVector::from_real(&[(1.0f64 / 3.0).sqrt(), (2.0f64 / 3.0).sqrt()]).unwrap();
        // 3 of 10 up with a residual (4 directions), 6 down with one (7).
        assert_eq!(local_pad(&third, deg(0.0), 10).unwrap(), 12);
        assert_eq!(local_pad(&z_up(), deg(0.0), 8).unwrap(), 13);
        assert_eq!(marginal_pad(&singlet_spin(), &[deg(0.0)], 4).unwrap(), 2);
    }

    #[test]
    fn product_counting_errors() {
        let zero = StateVector::zeros(4);
        let ok = z_up().embed(4).unwrap();
        assert_eq!(product_counting(&zero, &ok, deg(0.0), deg(0.0), 2, 2, 0, &tol()).unwrap_err(), Error::ZeroState);
        let tight = StateVector::from_real(&[0.6, 0.8]).unwrap();
        assert!(matches!(
            product_counting(&tight, &ok, deg(0.0), deg(0.0), 2, 2, 0, &tol()),
            Err(Error::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn chsh_singlet_and_products() {
        let settings = [(deg(0.0), deg(45.0)), (deg(0.0), deg(135.0)), (deg(90.0), deg(45.0)), (deg(90.0), deg(135.0))];
        let pad = required_pad(&singlet_spin(), &settings, 100).unwrap();
        let sc = scenario(singlet(pad), pad, 100);
        let r = chsh(&sc).unwrap();
        assert!((r.born_s - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        for c in &r.correlators {
            assert!((c.born + (c.a - c.b).cos()).abs() < 1e-12);
        }
        assert_eq!(r.within_bound, Some(true));

        let mut rng = seeded_rng(4);
        for _ in 0..20 {
            let phi = StateVector::random(2, &mut rng);
            let chi = StateVector::random(2, &mut rng);
            let sc = scenario(product_state(&phi, &chi, 0).unwrap(), 0, 1);
            assert!(chsh_born(&sc).born_s <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn required_pad_matches_hand_count() {
        // Largest CHSH cell weight is (1 + cos 45°)/4, so 427 of 1000 with
        // a residual: 428 ≤ (1 + ⌊pad/2⌋)² first holds at pad 40.
        let settings = [(deg(0.0), deg(45.0)), (deg(0.0), deg(135.0)), (deg(90.0), deg(45.0)), (deg(90.0), deg(135.0))];
        assert_eq!(required_pad(&singlet_spin(), &settings, 1000).unwrap(), 40);
    }
}
