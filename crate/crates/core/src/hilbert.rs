//! Dense complex linear algebra on finite-dimensional Hilbert spaces.
//!
//! States are unnormalised column vectors; operators are dense matrices.
//! Tensor products use row-major index order: for `u ⊗ v` the component at
//! `i * v.dim() + j` is `u[i] * v[j]`, so the left factor is the slow index.
//!
//! Projectors used for counting are accessed through the [`Projection`]
//! trait so that Kronecker-structured projectors (as in a bipartite
//! set-up) never have to be materialised as full matrices.

use std::fmt;
use std::ops::{Add, Sub};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Seeded generator used for every randomized construction.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Numerical comparison thresholds.
///
/// `rel` scales with the operand norms; `abs` is the floor below which a
/// quantity counts as zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rel: 1e-10, abs: 1e-12 }
    }
}

impl Tolerance {
    pub fn new(rel: f64, abs: f64) -> Result<Self> {
        if !(rel > 0.0 && abs > 0.0 && abs <= rel && rel.is_finite()) {
            return Err(Error::InvalidTolerance { rel, abs });
        }
        Ok(Tolerance { rel, abs })
    }

    /// Overrides the relative threshold, pulling `abs` down if needed.
    pub fn with_rel(rel: f64) -> Result<Self> {
        let abs = Tolerance::default().abs.min(rel);
        Tolerance::new(rel, abs)
    }
}

fn gaussian_c64<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im)
}

/// A vector in `C^dim`. No normalisation is assumed.
#[derive(Clone, PartialEq)]
pub struct StateVector {
    data: DVector<C64>,
}

impl fmt::Debug for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateVector").field("dim", &self.dim()).field("components", &self.data.as_slice()).finish()
    }
}

impl StateVector {
    pub fn new(components: Vec<C64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("state vector needs dimension >= 1".into()));
        }
        if components.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidInput("state vector has non-finite components".into()));
        }
        Ok(StateVector { data: DVector::from_vec(components) })
    }

    pub fn from_real(components: &[f64]) -> Result<Self> {
        Self::new(components.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub(crate) fn from_dvector(data: DVector<C64>) -> Self {
        StateVector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        StateVector { data: DVector::zeros(dim) }
    }

    /// Unit vector `e_index` in `C^dim`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[index] = C64::new(1.0, 0.0);
        v
    }

    /// Components drawn i.i.d. with standard normal real and imaginary parts.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        StateVector { data: DVector::from_fn(dim, |_, _| gaussian_c64(rng)) }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn components(&self) -> &[C64] {
        self.data.as_slice()
    }

    pub(crate) fn components_mut(&mut self) -> &mut [C64] {
        self.data.as_mut_slice()
    }

    pub(crate) fn as_dvector(&self) -> &DVector<C64> {
        &self.data
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn is_zero(&self, tol: &Tolerance) -> bool {
        self.norm_sqr() < tol.abs
    }

    pub fn scale(&self, c: C64) -> Self {
        StateVector { data: &self.data * c }
    }

    pub fn scale_real(&self, c: f64) -> Self {
        self.scale(C64::new(c, 0.0))
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroState);
        }
        Ok(self.scale_real(1.0 / n))
    }

    /// `self += c * other`.
    pub(crate) fn axpy(&mut self, c: C64, other: &StateVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x += c * y;
        }
    }

    /// Largest absolute component difference.
    pub fn max_abs_diff(&self, other: &StateVector) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Euclidean distance `‖self − other‖`.
    pub fn distance(&self, other: &StateVector) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
    }

    /// Zero-pads the vector to `new_dim` (direct sum with a zero block).
    pub fn embed(&self, new_dim: usize) -> Result<Self> {
        if new_dim < self.dim() {
            return Err(Error::DimensionTooSmall { needed: self.dim(), available: new_dim });
        }
        let mut data = DVector::zeros(new_dim);
        data.rows_mut(0, self.dim()).copy_from(&self.data);
        Ok(StateVector { data })
    }

    pub fn sum<'a, I: IntoIterator<Item = &'a StateVector>>(dim: usize, vectors: I) -> Self {
        let mut acc = StateVector::zeros(dim);
        for v in vectors {
            acc.axpy(C64::new(1.0, 0.0), v);
        }
        acc
    }
}

impl Add for &StateVector {
    type Output = StateVector;
    fn add(self, rhs: &StateVector) -> StateVector {
        StateVector { data: &self.data + &rhs.data }
    }
}

impl Sub for &StateVector {
    type Output = StateVector;
    fn sub(self, rhs: &StateVector) -> StateVector {
        StateVector { data: &self.data - &rhs.data }
    }
}

fn check_dims(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::DimensionMismatch { left, right });
    }
    Ok(())
}

#[inline]
fn dotc(u: &[C64], v: &[C64]) -> C64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for (a, b) in u.iter().zip(v.iter()) {
        re += a.re * b.re + a.im * b.im;
        im += a.re * b.im - a.im * b.re;
    }
    C64::new(re, im)
}

/// `⟨u|v⟩ = Σ conj(u_i) v_i`.
pub fn inner(u: &StateVector, v: &StateVector) -> Result<C64> {
    check_dims(u.dim(), v.dim())?;
    Ok(dotc(u.components(), v.components()))
}

pub(crate) fn inner_unchecked(u: &StateVector, v: &StateVector) -> C64 {
    dotc(u.components(), v.components())
}

/// `u ⊗ v` in row-major order.
pub fn tensor(u: &StateVector, v: &StateVector) -> StateVector {
    let mut out = Vec::with_capacity(u.dim() * v.dim());
    for a in u.components() {
        out.extend(v.components().iter().map(|b| a * b));
    }
    StateVector { data: DVector::from_vec(out) }
}

/// A square complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    matrix: DMatrix<C64>,
}

impl Operator {
    pub fn from_matrix(matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::NotSquare { rows: matrix.nrows(), cols: matrix.ncols() });
        }
        Ok(Operator { matrix })
    }

    /// Builds from row-major entries.
    pub fn from_rows(dim: usize, entries: &[C64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch { left: entries.len(), right: dim * dim });
        }
        Self::from_matrix(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Operator { matrix: DMatrix::identity(dim, dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Operator { matrix: DMatrix::zeros(dim, dim) }
    }

    /// `|u⟩⟨v|`.
    pub fn outer(u: &StateVector, v: &StateVector) -> Result<Self> {
        check_dims(u.dim(), v.dim())?;
        Ok(Operator { matrix: u.as_dvector() * v.as_dvector().adjoint() })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn adjoint(&self) -> Self {
        Operator { matrix: self.matrix.adjoint() }
    }

    pub fn compose(&self, rhs: &Operator) -> Result<Self> {
        check_dims(self.dim(), rhs.dim())?;
        Ok(Operator { matrix: &self.matrix * &rhs.matrix })
    }

    pub fn plus(&self, rhs: &Operator) -> Result<Self> {
        check_dims(self.dim(), rhs.dim())?;
        Ok(Operator { matrix: &self.matrix + &rhs.matrix })
    }

    pub fn minus(&self, rhs: &Operator) -> Result<Self> {
        check_dims(self.dim(), rhs.dim())?;
        Ok(Operator { matrix: &self.matrix - &rhs.matrix })
    }

    pub fn scale(&self, c: C64) -> Self {
        Operator { matrix: &self.matrix * c }
    }

    pub fn column(&self, j: usize) -> StateVector {
        StateVector::from_dvector(self.matrix.column(j).into_owned())
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        (&self.matrix - self.matrix.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn idempotence_defect(&self) -> f64 {
        (&self.matrix * &self.matrix - &self.matrix).iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// `max |(U†U − I)_{ij}|`.
    pub fn unitarity_defect(&self) -> f64 {
        let n = self.dim();
        (self.matrix.adjoint() * &self.matrix - DMatrix::<C64>::identity(n, n))
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    /// Direct sum `self ⊕ other` (block diagonal).
    pub fn direct_sum(&self, other: &Operator) -> Self {
        let (a, b) = (self.dim(), other.dim());
        let mut m = DMatrix::zeros(a + b, a + b);
        m.view_mut((0, 0), (a, a)).copy_from(&self.matrix);
        m.view_mut((a, a), (b, b)).copy_from(&other.matrix);
        Operator { matrix: m }
    }
}

/// Matrix-vector product.
pub fn apply(m: &Operator, v: &StateVector) -> Result<StateVector> {
    check_dims(m.dim(), v.dim())?;
    Ok(StateVector::from_dvector(&m.matrix * v.as_dvector()))
}

/// Kronecker product consistent with [`tensor`]: `(A⊗B)(u⊗v) = Au ⊗ Bv`.
pub fn tensor_op(a: &Operator, b: &Operator) -> Operator {
    Operator { matrix: a.matrix.kronecker(&b.matrix) }
}

/// Applies `A ⊗ B` without forming the Kronecker product.
pub fn apply_kron(a: &Operator, b: &Operator, v: &StateVector) -> Result<StateVector> {
    let (da, db) = (a.dim(), b.dim());
    check_dims(da * db, v.dim())?;
    // Row-major reshape: psi[i][j] = v[i * db + j]; result = A psi B^T.
    let psi = DMatrix::from_row_slice(da, db, v.components());
    let out = complex_matmul(&complex_matmul(&a.matrix, &psi), &b.matrix.transpose());
    let mut flat = Vec::with_capacity(da * db);
    for i in 0..da {
        flat.extend(out.row(i).iter().copied());
    }
    Ok(StateVector::from_dvector(DVector::from_vec(flat)))
}

/// Real and imaginary parts, or `None` for the latter when it vanishes.
fn split_parts(m: &DMatrix<C64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let re = m.map(|z| z.re);
    let im = m.iter().any(|z| z.im != 0.0).then(|| m.map(|z| z.im));
    (re, im)
}

/// Complex product through real products, which nalgebra hands to an
/// optimised kernel; complex products fall back to plain loops.
fn complex_matmul(x: &DMatrix<C64>, y: &DMatrix<C64>) -> DMatrix<C64> {
    let ((xr, xi), (yr, yi)) = (split_parts(x), split_parts(y));
    let mut re = &xr * &yr;
    let mut im = DMatrix::zeros(x.nrows(), y.ncols());
    if let Some(yi) = &yi {
        im += &xr * yi;
    }
    if let Some(xi) = &xi {
        im += xi * &yr;
        if let Some(yi) = &yi {
            re -= xi * yi;
        }
    }
    re.zip_map(&im, C64::new)
}

/// Hermitian idempotent operator.
///
/// Orthonormal bases of the range and the kernel are cached once known,
/// either from the construction or from an eigendecomposition on demand.
#[derive(Clone, Debug)]
pub struct ProjectorOp {
    op: Operator,
    rank: usize,
    range: OnceLock<Vec<StateVector>>,
    kernel: OnceLock<Vec<StateVector>>,
}

impl PartialEq for ProjectorOp {
    fn eq(&self, other: &Self) -> bool {
        self.rank == other.rank && self.op == other.op
    }
}

fn known(vectors: Vec<StateVector>) -> OnceLock<Vec<StateVector>> {
    let cell = OnceLock::new();
    let _ = cell.set(vectors);
    cell
}

impl ProjectorOp {
    pub fn new(op: Operator, tol: &Tolerance) -> Result<Self> {
        let scale = op.max_abs().max(1.0);
        let hermiticity = op.hermiticity_defect();
        let idempotence = op.idempotence_defect();
        if hermiticity > tol.rel * scale || idempotence > tol.rel * scale {
            return Err(Error::NotProjector { hermiticity, idempotence });
        }
        let rank = op.trace().re.round().max(0.0) as usize;
        Ok(ProjectorOp::from_parts(op, rank))
    }

    fn from_parts(op: Operator, rank: usize) -> Self {
        ProjectorOp { op, rank, range: OnceLock::new(), kernel: OnceLock::new() }
    }

    pub(crate) fn from_range_basis(dim: usize, basis: Vec<StateVector>) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for b in &basis {
            m += &b.data * b.data.adjoint();
        }
        let rank = basis.len();
        ProjectorOp { op: Operator { matrix: m }, rank, range: known(basis), kernel: OnceLock::new() }
    }

    pub fn identity(dim: usize) -> Self {
        let basis = (0..dim).map(|k| StateVector::basis(dim, k)).collect();
        ProjectorOp { op: Operator::identity(dim), rank: dim, range: known(basis), kernel: known(Vec::new()) }
    }

    pub fn zero(dim: usize) -> Self {
        let basis = (0..dim).map(|k| StateVector::basis(dim, k)).collect();
        ProjectorOp { op: Operator::zeros(dim), rank: 0, range: known(Vec::new()), kernel: known(basis) }
    }

    /// Orthogonal projector onto the span of `vectors`.
    pub fn onto(dim: usize, vectors: &[StateVector]) -> Result<Self> {
        let mut basis = OrthonormalSet::new(dim);
        for v in vectors {
            check_dims(dim, v.dim())?;
            basis.push(v);
        }
        Ok(basis.projector())
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Orthonormal basis of the range.
    pub fn range_basis(&self) -> &[StateVector] {
        self.range.get_or_init(|| self.eigenbasis(true))
    }

    /// Orthonormal basis of the kernel.
    pub fn kernel_basis(&self) -> &[StateVector] {
        self.kernel.get_or_init(|| match self.range.get() {
            Some(range) => completion(self.dim(), range),
            None => self.eigenbasis(false),
        })
    }

    fn eigenbasis(&self, range: bool) -> Vec<StateVector> {
        let eig = self.op.matrix.clone().symmetric_eigen();
        (0..self.dim())
            .filter(|&k| (eig.eigenvalues[k] > 0.5) == range)
            .map(|k| StateVector::from_dvector(eig.eigenvectors.column(k).into_owned()))
            .collect()
    }

    /// `I − P`.
    pub fn complement(&self) -> Self {
        let dim = self.dim();
        ProjectorOp {
            op: Operator { matrix: DMatrix::identity(dim, dim) - &self.op.matrix },
            rank: dim - self.rank,
            range: self.kernel.clone(),
            kernel: self.range.clone(),
        }
    }

    /// `P ⊕ I_{pad_in} ⊕ 0_{pad_out}`: the new directions are split between
    /// the range of the projector and its complement.
    pub fn embed(&self, pad_in: usize, pad_out: usize) -> Self {
        let d = self.dim();
        let dim = d + pad_in + pad_out;
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (d, d)).copy_from(&self.op.matrix);
        for k in d..d + pad_in {
            m[(k, k)] = C64::new(1.0, 0.0);
        }
        let lift = |basis: &[StateVector], pad: std::ops::Range<usize>| -> Vec<StateVector> {
            let mut out: Vec<StateVector> = basis.iter().map(|b| b.embed(dim).expect("larger dimension")).collect();
            out.extend(pad.map(|k| StateVector::basis(dim, k)));
            out
        };
        ProjectorOp {
            op: Operator { matrix: m },
            rank: self.rank + pad_in,
            range: known(lift(self.range_basis(), d..d + pad_in)),
            kernel: known(lift(self.kernel_basis(), d + pad_in..dim)),
        }
    }
}

/// Unitary operator.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryOp {
    op: Operator,
}

impl UnitaryOp {
    pub fn new(op: Operator, tol: &Tolerance) -> Result<Self> {
        let deviation = op.unitarity_defect();
        if deviation > tol.rel {
            return Err(Error::NotUnitary { deviation });
        }
        Ok(UnitaryOp { op })
    }

    pub(crate) fn new_unchecked(op: Operator) -> Self {
        UnitaryOp { op }
    }

    pub fn identity(dim: usize) -> Self {
        UnitaryOp { op: Operator::identity(dim) }
    }

    /// Haar-distributed unitary: Gram–Schmidt on a complex Gaussian matrix.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut basis = OrthonormalSet::new(dim);
        while basis.len() < dim {
            let g = StateVector::random(dim, rng);
            basis.push(&g);
        }
        UnitaryOp { op: basis.as_columns() }
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn adjoint(&self) -> Self {
        UnitaryOp { op: self.op.adjoint() }
    }

    pub fn compose(&self, rhs: &UnitaryOp) -> Result<Self> {
        Ok(UnitaryOp { op: self.op.compose(&rhs.op)? })
    }

    pub fn apply(&self, v: &StateVector) -> Result<StateVector> {
        apply(&self.op, v)
    }
}

/// Projector onto a Haar-random subspace of the given rank.
pub fn random_projector<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Result<ProjectorOp> {
    if rank > dim {
        return Err(Error::DimensionTooSmall { needed: rank, available: dim });
    }
    let mut basis = OrthonormalSet::new(dim);
    while basis.len() < rank {
        basis.push(&StateVector::random(dim, rng));
    }
    Ok(basis.projector())
}

/// Orthonormal basis of the orthogonal complement of an orthonormal set.
fn completion(dim: usize, basis: &[StateVector]) -> Vec<StateVector> {
    let mut set = OrthonormalSet::new(dim);
    set.vectors = basis.to_vec();
    let mut extra = Vec::with_capacity(dim - basis.len());
    for k in 0..dim {
        if set.len() == dim {
            break;
        }
        if let Some(u) = set.push(&StateVector::basis(dim, k)) {
            extra.push(u);
        }
    }
    extra
}

/// Orthonormal vectors maintained by classical Gram–Schmidt with
/// re-orthogonalisation.
#[derive(Clone, Debug)]
pub struct OrthonormalSet {
    dim: usize,
    vectors: Vec<StateVector>,
}

/// Candidates whose residual falls below this fraction of their norm are
/// treated as lying in the span already.
pub(crate) const RANK_CUTOFF: f64 = 1e-8;

impl OrthonormalSet {
    pub fn new(dim: usize) -> Self {
        OrthonormalSet { dim, vectors: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[StateVector] {
        &self.vectors
    }

    /// Component of `v` orthogonal to the set.
    pub fn residual(&self, v: &StateVector) -> StateVector {
        let mut r = v.clone();
        for _ in 0..2 {
            for b in &self.vectors {
                let c = dotc(b.components(), r.components());
                r.axpy(-c, b);
            }
        }
        r
    }

    /// Adds the normalised residual of `v` unless `v` is (numerically) in
    /// the span. Returns the added unit vector.
    pub fn push(&mut self, v: &StateVector) -> Option<StateVector> {
        let scale = v.norm();
        if scale == 0.0 {
            return None;
        }
        let r = self.residual(v);
        let rn = r.norm();
        if rn <= RANK_CUTOFF * scale {
            return None;
        }
        let unit = r.scale_real(1.0 / rn);
        self.vectors.push(unit.clone());
        Some(unit)
    }

    /// Appends vectors already known to be orthonormal to the set and to
    /// each other (e.g. bases of mutually orthogonal ranges).
    pub(crate) fn absorb_orthogonal(&mut self, other: OrthonormalSet) {
        debug_assert_eq!(self.dim, other.dim);
        self.vectors.extend(other.vectors);
    }

    /// Appends a unit vector already orthogonal to the set.
    pub(crate) fn push_orthonormal(&mut self, unit: StateVector) {
        self.vectors.push(unit);
    }

    /// Matrix whose columns are the set's vectors (square only when full).
    fn as_columns(&self) -> Operator {
        let cols: Vec<DVector<C64>> = self.vectors.iter().map(|v| v.data.clone()).collect();
        Operator { matrix: DMatrix::from_columns(&cols) }
    }

    /// `Σ |b⟩⟨b|` over the set.
    pub fn projector(&self) -> ProjectorOp {
        ProjectorOp::from_range_basis(self.dim, self.vectors.clone())
    }
}

/// Draws a unit vector orthogonal to `exclusions`: a complex Gaussian
/// sample, Gram–Schmidt against the exclusions, normalised.
pub fn orthonormal_complement_vector(exclusions: &[StateVector], dim: usize, seed: u64) -> Result<StateVector> {
    let mut rng = seeded_rng(seed);
    let mut set = OrthonormalSet::new(dim);
    for e in exclusions {
        check_dims(dim, e.dim())?;
        set.push(e);
    }
    fresh_unit_vector(&set, &mut rng)
}

pub(crate) fn fresh_unit_vector<R: Rng + ?Sized>(set: &OrthonormalSet, rng: &mut R) -> Result<StateVector> {
    if set.len() >= set.dim() {
        return Err(Error::NoFreeDirection { dim: set.dim() });
    }
    for _ in 0..4 {
        let g = StateVector::random(set.dim(), rng);
        let r = set.residual(&g);
        let rn = r.norm();
        if rn > RANK_CUTOFF * g.norm() {
            return Ok(r.scale_real(1.0 / rn));
        }
    }
    Err(Error::NoFreeDirection { dim: set.dim() })
}

/// Read access to an orthogonal projector, possibly without a dense matrix.
pub trait Projection {
    fn dim(&self) -> usize;
    fn rank(&self) -> usize;
    /// `P v`.
    fn project(&self, v: &StateVector) -> StateVector;
    /// `P e_j`.
    fn column(&self, j: usize) -> StateVector;
    /// `k`-th vector of an orthonormal basis of the range, for
    /// implementations that have one at hand.
    fn range_vector(&self, _k: usize) -> Option<StateVector> {
        None
    }
    /// As [`Projection::range_vector`], for the kernel.
    fn kernel_vector(&self, _k: usize) -> Option<StateVector> {
        None
    }
}

impl Projection for ProjectorOp {
    fn dim(&self) -> usize {
        self.op.dim()
    }
    fn rank(&self) -> usize {
        self.rank
    }
    fn project(&self, v: &StateVector) -> StateVector {
        StateVector::from_dvector(&self.op.matrix * v.as_dvector())
    }
    fn column(&self, j: usize) -> StateVector {
        self.op.column(j)
    }
    fn range_vector(&self, k: usize) -> Option<StateVector> {
        self.range_basis().get(k).cloned()
    }
    fn kernel_vector(&self, k: usize) -> Option<StateVector> {
        self.kernel_basis().get(k).cloned()
    }
}

/// `A ⊗ B` for projectors `A`, `B`, kept in factored form.
#[derive(Clone, Debug)]
pub struct KronProjector {
    pub left: ProjectorOp,
    pub right: ProjectorOp,
}

impl KronProjector {
    pub fn new(left: ProjectorOp, right: ProjectorOp) -> Self {
        KronProjector { left, right }
    }

    /// Dense `A ⊗ B`; only sensible for small factors.
    pub fn to_dense(&self) -> ProjectorOp {
        ProjectorOp::from_parts(tensor_op(&self.left.op, &self.right.op), self.left.rank * self.right.rank)
    }
}

impl Projection for KronProjector {
    fn dim(&self) -> usize {
        self.left.dim() * self.right.dim()
    }
    fn rank(&self) -> usize {
        self.left.rank * self.right.rank
    }
    fn project(&self, v: &StateVector) -> StateVector {
        apply_kron(&self.left.op, &self.right.op, v).expect("dimension checked by caller")
    }
    fn column(&self, j: usize) -> StateVector {
        let db = self.right.dim();
        tensor(&self.left.op.column(j / db), &self.right.op.column(j % db))
    }
    fn range_vector(&self, k: usize) -> Option<StateVector> {
        let rb = self.right.rank;
        if k >= self.rank() {
            return None;
        }
        Some(tensor(&self.left.range_basis()[k / rb], &self.right.range_basis()[k % rb]))
    }
}

/// `P ⊕ I_{pad_in} ⊕ 0_{pad_out}` kept in factored form, so that applying
/// it costs `O(d² + pad)` rather than `O(dim²)`.
#[derive(Clone, Debug)]
pub struct PaddedProjector {
    core: ProjectorOp,
    pad_in: usize,
    pad_out: usize,
}

impl PaddedProjector {
    pub fn new(core: ProjectorOp, pad_in: usize, pad_out: usize) -> Self {
        PaddedProjector { core, pad_in, pad_out }
    }

    pub fn core(&self) -> &ProjectorOp {
        &self.core
    }

    pub fn pad_in(&self) -> usize {
        self.pad_in
    }

    pub fn pad_out(&self) -> usize {
        self.pad_out
    }

    pub fn to_dense(&self) -> ProjectorOp {
        self.core.embed(self.pad_in, self.pad_out)
    }

    fn lift(&self, v: &StateVector) -> StateVector {
        v.embed(self.dim()).expect("larger dimension")
    }
}

impl Projection for PaddedProjector {
    fn dim(&self) -> usize {
        self.core.dim() + self.pad_in + self.pad_out
    }
    fn rank(&self) -> usize {
        self.core.rank + self.pad_in
    }
    fn project(&self, v: &StateVector) -> StateVector {
        let d = self.core.dim();
        let head = self.core.op.matrix.clone() * v.data.rows(0, d);
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, d).copy_from(&head);
        out.rows_mut(d, self.pad_in).copy_from(&v.data.rows(d, self.pad_in));
        StateVector::from_dvector(out)
    }
    fn column(&self, j: usize) -> StateVector {
        let d = self.core.dim();
        if j < d {
            self.lift(&self.core.column(j))
        } else if j < d + self.pad_in {
            StateVector::basis(self.dim(), j)
        } else {
            StateVector::zeros(self.dim())
        }
    }
    fn range_vector(&self, k: usize) -> Option<StateVector> {
        let basis = self.core.range_basis();
        if k < basis.len() {
            Some(self.lift(&basis[k]))
        } else if k < basis.len() + self.pad_in {
            Some(StateVector::basis(self.dim(), self.core.dim() + k - basis.len()))
        } else {
            None
        }
    }
    fn kernel_vector(&self, k: usize) -> Option<StateVector> {
        let basis = self.core.kernel_basis();
        if k < basis.len() {
            Some(self.lift(&basis[k]))
        } else if k < basis.len() + self.pad_out {
            Some(StateVector::basis(self.dim(), self.core.dim() + self.pad_in + k - basis.len()))
        } else {
            None
        }
    }
}

/// `I − P` for any projection `P`.
#[derive(Clone, Copy, Debug)]
pub struct Complement<'a, P: ?Sized>(pub &'a P);

impl<P: Projection + ?Sized> Projection for Complement<'_, P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn rank(&self) -> usize {
        self.0.dim() - self.0.rank()
    }
    fn project(&self, v: &StateVector) -> StateVector {
        v - &self.0.project(v)
    }
    fn column(&self, j: usize) -> StateVector {
        &StateVector::basis(self.0.dim(), j) - &self.0.column(j)
    }
    fn range_vector(&self, k: usize) -> Option<StateVector> {
        self.0.kernel_vector(k)
    }
    fn kernel_vector(&self, k: usize) -> Option<StateVector> {
        self.0.range_vector(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn inner_of_basis_vectors() {
        let e1 = StateVector::basis(2, 0);
        let e2 = StateVector::basis(2, 1);
        assert_eq!(inner(&e1, &e1).unwrap(), c(1.0, 0.0));
        assert_eq!(inner(&e1, &e2).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn inner_hand_computed() {
        // <2e1 | 3e1 + 4e2> = 2 * 3 = 6
        let u = StateVector::from_real(&[2.0, 0.0]).unwrap();
        let v = StateVector::from_real(&[3.0, 4.0]).unwrap();
        assert_eq!(inner(&u, &v).unwrap(), c(6.0, 0.0));
    }

    #[test]
    fn inner_is_conjugate_linear_in_first_argument() {
        let u = StateVector::new(vec![c(0.0, 1.0)]).unwrap();
        let v = StateVector::new(vec![c(1.0, 0.0)]).unwrap();
        assert_eq!(inner(&u, &v).unwrap(), c(0.0, -1.0));
    }

    #[test]
    fn inner_dimension_mismatch_names_both_dims() {
        let err = inner(&StateVector::zeros(2), &StateVector::zeros(3)).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { left: 2, right: 3 });
        assert!(err.to_string().contains('2') && err.to_string().contains('3'));
    }

    #[test]
    fn tensor_of_basis_vectors() {
        let t = tensor(&StateVector::basis(2, 0), &StateVector::basis(2, 1));
        assert_eq!(t, StateVector::basis(4, 1));
    }

    #[test]
    fn tensor_with_zero_is_zero() {
        let mut rng = seeded_rng(1);
        let psi = StateVector::random(3, &mut rng);
        let t = tensor(&psi, &StateVector::zeros(4));
        assert_eq!(t, StateVector::zeros(12));
    }

    #[test]
    fn tensor_op_of_identities() {
        assert_eq!(tensor_op(&Operator::identity(2), &Operator::identity(2)), Operator::identity(4));
    }

    #[test]
    fn apply_kron_matches_dense_kronecker() {
        let mut rng = seeded_rng(9);
        let a = UnitaryOp::random(3, &mut rng);
        let b = UnitaryOp::random(4, &mut rng);
        let v = StateVector::random(12, &mut rng);
        let dense = apply(&tensor_op(a.operator(), b.operator()), &v).unwrap();
        let fast = apply_kron(a.operator(), b.operator(), &v).unwrap();
        assert!(dense.max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn apply_identity_and_projector_idempotence() {
        let mut rng = seeded_rng(2);
        let v = StateVector::random(6, &mut rng);
        assert_eq!(apply(&Operator::identity(6), &v).unwrap(), v);
        let p = random_projector(6, 3, &mut rng).unwrap();
        let pv = apply(p.operator(), &v).unwrap();
        let ppv = apply(p.operator(), &pv).unwrap();
        assert!(ppv.max_abs_diff(&pv) < 1e-12);
    }

    #[test]
    fn apply_dimension_mismatch() {
        let err = apply(&Operator::identity(3), &StateVector::zeros(2)).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { left: 3, right: 2 });
    }

    #[test]
    fn complement_vector_forced_in_c2() {
        let phi = orthonormal_complement_vector(&[StateVector::basis(2, 0)], 2, 11).unwrap();
        assert!(phi.components()[0].norm() < 1e-14);
        assert!((phi.components()[1].norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn complement_vector_rank_full() {
        let ex: Vec<_> = (0..3).map(|i| StateVector::basis(3, i)).collect();
        let err = orthonormal_complement_vector(&ex, 3, 0).unwrap_err();
        assert_eq!(err, Error::NoFreeDirection { dim: 3 });
        // A spanning but non-orthogonal set is caught as well.
        let mut rng = seeded_rng(3);
        let ex: Vec<_> = (0..3).map(|_| StateVector::random(3, &mut rng)).collect();
        assert!(orthonormal_complement_vector(&ex, 3, 0).is_err());
    }

    #[test]
    fn complement_vector_is_deterministic_per_seed() {
        let ex = vec![StateVector::basis(5, 2)];
        let a = orthonormal_complement_vector(&ex, 5, 42).unwrap();
        let b = orthonormal_complement_vector(&ex, 5, 42).unwrap();
        let c = orthonormal_complement_vector(&ex, 5, 43).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c) > 1e-6);
    }

    #[test]
    fn projector_validation_rejects_non_projectors() {
        let tol = Tolerance::default();
        let half = Operator::identity(2).scale(c(0.5, 0.0));
        assert!(matches!(ProjectorOp::new(half, &tol), Err(Error::NotProjector { .. })));
        let mut rng = seeded_rng(5);
        let p = random_projector(5, 2, &mut rng).unwrap();
        let checked = ProjectorOp::new(p.operator().clone(), &tol).unwrap();
        assert_eq!(checked.rank(), 2);
        assert_eq!(checked.complement().rank(), 3);
    }

    #[test]
    fn unitary_validation() {
        let tol = Tolerance::default();
        let mut rng = seeded_rng(6);
        let u = UnitaryOp::random(7, &mut rng);
        assert!(UnitaryOp::new(u.operator().clone(), &tol).is_ok());
        let bad = u.operator().scale(c(1.01, 0.0));
        assert!(matches!(UnitaryOp::new(bad, &tol), Err(Error::NotUnitary { .. })));
    }

    #[test]
    fn embedded_projector_layout() {
        let p = ProjectorOp::onto(2, &[StateVector::basis(2, 0)]).unwrap();
        let e = p.embed(2, 3);
        assert_eq!(e.dim(), 7);
        assert_eq!(e.rank(), 3);
        assert!(ProjectorOp::new(e.operator().clone(), &Tolerance::default()).is_ok());
        assert_eq!(e.operator().matrix()[(2, 2)], c(1.0, 0.0));
        assert_eq!(e.operator().matrix()[(5, 5)], c(0.0, 0.0));
    }

    #[test]
    fn kron_and_complement_columns_match_dense() {
        let mut rng = seeded_rng(8);
        let a = random_projector(3, 1, &mut rng).unwrap();
        let b = random_projector(2, 1, &mut rng).unwrap();
        let k = KronProjector::new(a, b);
        let dense = k.to_dense();
        for j in 0..6 {
            assert!(k.column(j).max_abs_diff(&dense.column(j)) < 1e-14);
            let cj = Complement(&k).column(j);
            assert!(cj.max_abs_diff(&dense.complement().column(j)) < 1e-14);
        }
        assert_eq!(Complement(&k).rank(), 5);
    }

    #[test]
    fn tolerance_constraints() {
        assert!(Tolerance::new(1e-10, 1e-12).is_ok());
        assert!(Tolerance::new(1e-12, 1e-10).is_err());
        assert!(Tolerance::new(0.0, 0.0).is_err());
        assert_eq!(Tolerance::with_rel(1e-14).unwrap().abs, 1e-14);
    }
}
