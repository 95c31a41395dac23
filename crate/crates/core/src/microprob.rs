//! Probability as the fraction of microstates lying in a projector.
//!
//! For a resolution of the identity `P_1 + … + P_k = I` and a target size
//! `n`, [`adapt_family`] builds an equiamplitude expansion of `ψ` in which
//! `m_o = ⌊n w_o⌋` microstates are eigenstates of `P_o` (`w_o` the Born
//! weight) and the leftover `R = n − Σ m_o` microstates are cat states
//! that straddle several outcomes. The binary case `{P, I − P}` has at
//! most one cat, so `m/n ≤ w < (m + 1)/n`.
//!
//! When `n w_o` lies within [`INTEGRAL_SNAP`] of an integer the count is
//! snapped to it and that outcome contributes no residual, so exact
//! rational weights give cat-free expansions.

use rand::RngCore;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expansion::{peel_inner, DirectionBudget, Expansion};
use crate::hilbert::{
    seeded_rng, Complement, PaddedProjector, Projection, ProjectorOp, StateVector, Tolerance, UnitaryOp, C64,
};

/// Distance from an integer below which `n·w` counts as integral. Matches
/// the default relative tolerance: a snapped outcome's last microstate is
/// off in squared norm by at most this fraction, and an unsnapped outcome
/// leaves a residual larger than the peel exhaustion threshold.
pub const INTEGRAL_SNAP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Label {
    /// Eigenstate (+1) of the family member with this index.
    Outcome(usize),
    /// Superposition across several outcomes.
    Cat,
}

/// How many microstates an outcome of weight `w` receives out of `n`, and
/// whether the count was snapped to an integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Allotment {
    pub count: usize,
    pub snapped: bool,
}

pub fn allot(weight: f64, n: usize) -> Allotment {
    let x = weight.clamp(0.0, 1.0) * n as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= INTEGRAL_SNAP {
        Allotment { count: nearest as usize, snapped: true }
    } else {
        Allotment { count: x.floor() as usize, snapped: false }
    }
}

/// Directions an outcome's range must offer for `count` microstates when
/// `n·w = scaled`: one per microstate, plus one more if a residual is left
/// over for the cats.
fn directions_needed(count: usize, scaled: f64) -> usize {
    if count == 0 {
        0
    } else {
        count + usize::from(scaled - count as f64 > INTEGRAL_SNAP)
    }
}

/// [`directions_needed`] under the default (shortcut) allotment.
pub(crate) fn range_needed(weight: f64, n: usize) -> usize {
    directions_needed(allot(weight, n).count, weight.clamp(0.0, 1.0) * n as f64)
}

/// `‖Pψ‖² / ‖ψ‖²`, clamped to `[0, 1]`.
pub fn born_weight(p: &dyn Projection, psi: &StateVector) -> Result<f64> {
    if p.dim() != psi.dim() {
        return Err(Error::DimensionMismatch { left: p.dim(), right: psi.dim() });
    }
    let norm_sq = psi.norm_sqr();
    if norm_sq.sqrt() <= Tolerance::default().abs {
        return Err(Error::ZeroState);
    }
    Ok((p.project(psi).norm_sqr() / norm_sq).clamp(0.0, 1.0))
}

/// An equiamplitude expansion with each microstate labelled by the family
/// member it lies in.
#[derive(Clone, Debug)]
pub struct AdaptedExpansion {
    expansion: Expansion,
    labels: Vec<Label>,
    outcomes: usize,
    weights: Vec<f64>,
}

impl AdaptedExpansion {
    pub fn expansion(&self) -> &Expansion {
        &self.expansion
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Born weights `‖P_o ψ‖²/‖ψ‖²` of the family members.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Microstates per outcome.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.outcomes];
        for l in &self.labels {
            if let Label::Outcome(o) = l {
                counts[*o] += 1;
            }
        }
        counts
    }

    pub fn cats(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Cat).count()
    }

    /// Verifies the labelling against the family: every `Outcome(o)`
    /// microstate satisfies `P_o ξ = ξ`, and for each outcome the labelled
    /// microstates plus `P_o` of the cat sum reproduce `P_o ψ`.
    pub fn verify(&self, family: &[&dyn Projection], tol: &Tolerance) -> LabelReport {
        let dim = self.expansion.dim();
        let mut eigen_defect: f64 = 0.0;
        let mut cat_sum = StateVector::zeros(dim);
        let mut per_outcome = vec![StateVector::zeros(dim); family.len()];
        for (xi, label) in self.expansion.microstates().iter().zip(&self.labels) {
            match label {
                Label::Outcome(o) => {
                    let d = family[*o].project(xi).distance(xi) / xi.norm().max(f64::MIN_POSITIVE);
                    eigen_defect = eigen_defect.max(d);
                    per_outcome[*o].axpy(C64::new(1.0, 0.0), xi);
                }
                Label::Cat => cat_sum.axpy(C64::new(1.0, 0.0), xi),
            }
        }
        let psi = self.expansion.psi();
        let mut reconstruction: f64 = 0.0;
        for (o, p) in family.iter().enumerate() {
            let mut lhs = per_outcome[o].clone();
            lhs.axpy(C64::new(1.0, 0.0), &p.project(&cat_sum));
            reconstruction = reconstruction.max(lhs.distance(&p.project(psi)) / psi.norm());
        }
        LabelReport { eigen_defect, reconstruction, passed: eigen_defect <= tol.rel && reconstruction <= tol.rel }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LabelReport {
    pub eigen_defect: f64,
    pub reconstruction: f64,
    pub passed: bool,
}

/// Builds an expansion of `psi` adapted to a family of mutually orthogonal
/// projectors summing to the identity.
pub fn adapt_family(family: &[&dyn Projection], psi: &StateVector, n: usize, seed: u64) -> Result<AdaptedExpansion> {
    adapt_family_with(family, psi, n, seed, true)
}

/// [`adapt`] without the integral shortcut: counts are `⌊n w⌋` and one
/// microstate is always set aside as a cat, even when it turns out to lie
/// wholly in one outcome.
pub fn adapt_without_shortcut(p: &dyn Projection, psi: &StateVector, n: usize, seed: u64) -> Result<AdaptedExpansion> {
    let complement = Complement(p);
    adapt_family_with(&[p, &complement], psi, n, seed, false)
}

fn adapt_family_with(
    family: &[&dyn Projection],
    psi: &StateVector,
    n: usize,
    seed: u64,
    shortcut: bool,
) -> Result<AdaptedExpansion> {
    let tol = Tolerance::default();
    let dim = psi.dim();
    if family.is_empty() {
        return Err(Error::InvalidInput("empty projector family".into()));
    }
    for p in family {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch { left: p.dim(), right: dim });
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    if n > dim {
        return Err(Error::DimensionTooSmall { needed: n, available: dim });
    }
    let psi_sq = psi.norm_sqr();
    if psi_sq.sqrt() <= tol.abs {
        return Err(Error::ZeroState);
    }

    let parts: Vec<StateVector> = family.iter().map(|p| p.project(psi)).collect();
    let resolution = StateVector::sum(dim, &parts).distance(psi) / psi_sq.sqrt();
    if resolution > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "projector family does not resolve the identity on psi (defect {resolution:.3e})"
        )));
    }
    let weights: Vec<f64> = parts.iter().map(|v| (v.norm_sqr() / psi_sq).clamp(0.0, 1.0)).collect();
    let mut allotments: Vec<Allotment> = if shortcut {
        weights.iter().map(|&w| allot(w, n)).collect()
    } else {
        weights.iter().map(|&w| Allotment { count: (w * n as f64).floor() as usize, snapped: false }).collect()
    };
    if !shortcut && allotments.iter().map(|a| a.count).sum::<usize>() >= n {
        // Keep one microstate back as the cat.
        if let Some(last) = allotments.iter_mut().rev().find(|a| a.count > 0) {
            last.count -= 1;
        }
    }
    let assigned: usize = allotments.iter().map(|a| a.count).sum();
    if assigned > n {
        return Err(Error::InvariantViolation(format!("allotted {assigned} microstates out of {n}")));
    }
    let cats = n - assigned;
    for ((p, a), w) in family.iter().zip(&allotments).zip(&weights) {
        let needed = directions_needed(a.count, w * n as f64);
        if needed > p.rank() {
            return Err(Error::DimensionTooSmall { needed, available: p.rank() });
        }
    }

    let amplitude = (psi_sq / n as f64).sqrt();
    let mut master = seeded_rng(seed);
    let mut microstates: Vec<StateVector> = Vec::with_capacity(n);
    let mut labels: Vec<Label> = Vec::with_capacity(n);
    let mut pool = StateVector::zeros(dim);
    let mut used = None;
    let mut largest: Option<(usize, usize)> = None;

    for (o, ((p, part), a)) in family.iter().zip(parts).zip(&allotments).enumerate() {
        let rng = seeded_rng(master.next_u64());
        let mut dirs = DirectionBudget::with_rng(dim, Some(*p), rng);
        dirs.exclude(&part);
        let peels = if a.snapped { a.count.saturating_sub(1) } else { a.count };
        let mut chi = part;
        for _ in 0..peels {
            let (xi, rest) = peel_inner(&chi, amplitude, &mut dirs, &tol, false)?;
            microstates.push(xi);
            labels.push(Label::Outcome(o));
            chi = rest;
        }
        if a.snapped && a.count > 0 {
            microstates.push(chi);
            labels.push(Label::Outcome(o));
        } else {
            pool.axpy(C64::new(1.0, 0.0), &chi);
        }
        if a.count > 0 && largest.is_none_or(|(_, c)| a.count > c) {
            largest = Some((microstates.len() - 1, a.count));
        }
        // Ranges are mutually orthogonal, so the per-outcome bases join
        // into one orthonormal set without further Gram–Schmidt.
        let set = dirs.into_used();
        match used.as_mut() {
            None => used = Some(set),
            Some(all) => all.absorb_orthogonal(set),
        }
    }

    if cats == 0 {
        // Only rounding dust from snapped outcomes can be left here.
        if let Some((idx, _)) = largest {
            microstates[idx].axpy(C64::new(1.0, 0.0), &pool);
        }
    } else {
        let rng = seeded_rng(master.next_u64());
        let mut dirs = DirectionBudget::with_used(used.expect("family is non-empty"), rng);
        let mut chi = pool;
        for _ in 0..cats - 1 {
            let (xi, rest) = peel_inner(&chi, amplitude, &mut dirs, &tol, false)?;
            microstates.push(xi);
            labels.push(Label::Cat);
            chi = rest;
        }
        microstates.push(chi);
        labels.push(Label::Cat);
    }

    let expansion = Expansion::from_parts(psi.clone(), microstates, Vec::new())?;
    Ok(AdaptedExpansion { expansion, labels, outcomes: family.len(), weights })
}

/// Expansion adapted to the binary family `{P, I − P}`: labels
/// `Outcome(0)` lie in `P`, `Outcome(1)` in `I − P`.
pub fn adapt(p: &dyn Projection, psi: &StateVector, n: usize, seed: u64) -> Result<AdaptedExpansion> {
    let complement = Complement(p);
    adapt_family(&[p, &complement], psi, n, seed)
}

/// Result of counting microstates for a binary projector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BranchCount {
    pub n: usize,
    /// Microstates lying in `P`.
    pub m: usize,
    /// Microstates lying in `I − P`.
    pub m_complement: usize,
    pub cats: usize,
    /// `[m/n, (m + cats)/n]`.
    pub interval: (f64, f64),
    /// `‖Pψ‖²/‖ψ‖²`.
    pub born: f64,
}

impl BranchCount {
    pub fn fraction(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    pub fn error(&self) -> f64 {
        (self.fraction() - self.born).abs()
    }

    /// Same counts (the born value may differ by rounding).
    pub fn same_counts(&self, other: &BranchCount) -> bool {
        (self.n, self.m, self.m_complement, self.cats) == (other.n, other.m, other.m_complement, other.cats)
    }
}

/// Counts the microstates of an adapted expansion lying in `P`, after
/// checking the labelling numerically.
pub fn count(p: &dyn Projection, psi: &StateVector, n: usize, seed: u64) -> Result<BranchCount> {
    count_pair(p, &Complement(p), psi, n, seed)
}

/// [`count`] with the complement `I − P` supplied by the caller (useful
/// when it has structure of its own, such as `P₋ ⊗ I` for `P₊ ⊗ I`).
pub fn count_pair(
    p: &dyn Projection,
    complement: &dyn Projection,
    psi: &StateVector,
    n: usize,
    seed: u64,
) -> Result<BranchCount> {
    let family = [p, complement];
    let adapted = adapt_family(&family, psi, n, seed)?;
    let report = adapted.verify(&family, &Tolerance::default());
    if !report.passed {
        return Err(Error::InvariantViolation(format!(
            "adapted expansion labels do not hold (eigen defect {:.3e}, reconstruction {:.3e})",
            report.eigen_defect, report.reconstruction
        )));
    }
    let counts = adapted.counts();
    let cats = adapted.cats();
    let nf = n as f64;
    Ok(BranchCount {
        n,
        m: counts[0],
        m_complement: counts[1],
        cats,
        interval: (counts[0] as f64 / nf, (counts[0] + cats) as f64 / nf),
        born: adapted.weights()[0],
    })
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs [`count`] over `trials` distinct seeds and reports whether every
/// adapted expansion yields the same `(m, m_complement, cats)`.
pub fn uniqueness_check(p: &dyn Projection, psi: &StateVector, n: usize, trials: usize, seed: u64) -> Result<bool> {
    let mut first: Option<BranchCount> = None;
    for t in 0..trials {
        let c = count(p, psi, n, trial_seed(seed, t))?;
        match &first {
            None => first = Some(c),
            Some(f) if !f.same_counts(&c) => return Ok(false),
            Some(_) => {}
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalityVerdict {
    /// Antecedent holds and the counts agree.
    Consistent,
    /// Antecedent fails; the condition says nothing.
    Inapplicable,
    /// Antecedent holds but the counts differ.
    Violation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LocalityReport {
    /// `‖UPψ − Pψ‖ / ‖ψ‖`.
    pub up_residual: f64,
    /// `‖PUψ − Pψ‖ / ‖ψ‖`.
    pub pu_residual: f64,
    pub antecedent_holds: bool,
    pub before: Option<BranchCount>,
    pub after: Option<BranchCount>,
    pub verdict: LocalityVerdict,
}

/// If `UPψ = Pψ` and `PUψ = Pψ`, the count for `P` must be the same in
/// `ψ` and `Uψ`.
pub fn locality_check(
    p: &dyn Projection,
    psi: &StateVector,
    u: &UnitaryOp,
    n: usize,
    seed: u64,
    tol: &Tolerance,
) -> Result<LocalityReport> {
    if p.dim() != psi.dim() {
        return Err(Error::DimensionMismatch { left: p.dim(), right: psi.dim() });
    }
    if u.dim() != psi.dim() {
        return Err(Error::DimensionMismatch { left: u.dim(), right: psi.dim() });
    }
    let scale = psi.norm();
    let p_psi = p.project(psi);
    let u_psi = u.apply(psi)?;
    let up_residual = u.apply(&p_psi)?.distance(&p_psi) / scale;
    let pu_residual = p.project(&u_psi).distance(&p_psi) / scale;
    let antecedent_holds = up_residual <= tol.rel && pu_residual <= tol.rel;
    if !antecedent_holds {
        return Ok(LocalityReport {
            up_residual,
            pu_residual,
            antecedent_holds,
            before: None,
            after: None,
            verdict: LocalityVerdict::Inapplicable,
        });
    }
    let before = count(p, psi, n, seed)?;
    let after = count(p, &u_psi, n, seed)?;
    let verdict = if before.same_counts(&after) { LocalityVerdict::Consistent } else { LocalityVerdict::Violation };
    Ok(LocalityReport { up_residual, pu_residual, antecedent_holds, before: Some(before), after: Some(after), verdict })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub m: usize,
    pub m_complement: usize,
    pub cats: usize,
    pub fraction: f64,
    pub interval: (f64, f64),
    pub born: f64,
    /// `|m/n − born|`.
    pub error: f64,
    /// `1/n`.
    pub bound: f64,
}

impl ConvergenceRow {
    pub fn within_bound(&self) -> bool {
        self.error < self.bound
    }
}

/// One counting row per grid entry. Row seeds depend on `n` only through
/// `seed`, so rows are independent.
pub fn converge(p: &dyn Projection, psi: &StateVector, n_grid: &[usize], seed: u64) -> Result<Vec<ConvergenceRow>> {
    let max_n = n_grid.iter().copied().max().unwrap_or(0);
    if max_n > psi.dim() {
        return Err(Error::DimensionTooSmall { needed: max_n, available: psi.dim() });
    }
    n_grid
        .iter()
        .map(|&n| {
            let c = count(p, psi, n, seed.wrapping_add(n as u64))?;
            Ok(ConvergenceRow {
                n,
                m: c.m,
                m_complement: c.m_complement,
                cats: c.cats,
                fraction: c.fraction(),
                interval: c.interval,
                born: c.born,
                error: c.error(),
                bound: 1.0 / n as f64,
            })
        })
        .collect()
}

/// Pads `P` and `ψ` by direct sums so that an `n`-element adapted
/// expansion fits: `P ⊕ I_in ⊕ 0_out` and `ψ ⊕ 0`.
pub fn embed_for_count(p: &ProjectorOp, psi: &StateVector, n: usize) -> Result<(PaddedProjector, StateVector)> {
    let w = born_weight(p, psi)?;
    let needed_in = range_needed(w, n);
    let needed_out = range_needed(1.0 - w, n);
    let pad_in = needed_in.saturating_sub(p.rank());
    let mut pad_out = needed_out.saturating_sub(p.dim() - p.rank());
    let total = p.dim() + pad_in + pad_out;
    if total < n {
        pad_out += n - total;
    }
    let embedded = PaddedProjector::new(p.clone(), pad_in, pad_out);
    let state = psi.embed(embedded.dim())?;
    Ok((embedded, state))
}
