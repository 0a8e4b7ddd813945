//! Dense complex linear algebra for registers of up to five qubits.
//!
//! Basis convention: qubit 0 is the least-significant bit of a
//! computational-basis index, so `|q_{N-1} ... q_1 q_0>` sits at
//! `sum_i q_i 2^i`. `kron(a, b)` places `a` on the high qubits.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{invalid, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Max-norm slack on `rho - rho^dagger`.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Allowed deviation of `tr rho` from one.
pub const TRACE_TOL: f64 = 1e-10;
/// Smallest eigenvalue still accepted as positive semidefinite.
pub const PSD_SLACK: f64 = 1e-9;
/// Allowed deviation of a state vector's squared norm from one.
pub const NORM_TOL: f64 = 1e-12;
/// Hermiticity slack accepted by the eigensolver.
pub const EIGEN_HERMITIAN_TOL: f64 = 1e-9;

/// Largest register the crate handles.
pub const MAX_QUBITS: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows * cols != data.len() {
            return invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return invalid("matrix entries must be finite");
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from real entries given row by row.
    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let data = rows
            .iter()
            .flat_map(|row| {
                assert_eq!(row.len(), c, "ragged rows");
                row.iter().map(|&x| C64::new(x, 0.0))
            })
            .collect();
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(values: &[C64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == ZERO {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len(), "matrix-vector shape mismatch");
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Self, s: C64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Largest entrywise modulus of `self - self^dagger`.
    pub fn hermitian_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.is_square()
            && self
                .adjoint()
                .matmul(self)
                .max_abs_diff(&Self::identity(self.rows))
                < tol
    }

    /// `|v><v|`.
    pub fn outer(v: &[C64]) -> Self {
        let n = v.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = v[i] * v[j].conj();
            }
        }
        m
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Kronecker product; entry `(i*b.rows + k, j*b.cols + l)` is `a[i,j] * b[k,l]`.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut out = ComplexMatrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            for k in 0..b.rows {
                for l in 0..b.cols {
                    out[(i * b.rows + k, j * b.cols + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Kronecker product of vectors.
pub fn kron_vec(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect()
}

/// A normalized pure state of `num_qubits` qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    num_qubits: usize,
    amplitudes: Vec<C64>,
}

impl StateVector {
    pub fn new(amplitudes: Vec<C64>) -> Result<Self> {
        let k = amplitudes.len();
        if k < 2 || !k.is_power_of_two() {
            return invalid(format!("state length {k} is not a power of two >= 2"));
        }
        let num_qubits = k.trailing_zeros() as usize;
        if num_qubits > MAX_QUBITS {
            return invalid(format!("{num_qubits} qubits exceeds the supported maximum"));
        }
        if amplitudes
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return invalid("amplitudes must be finite");
        }
        let norm_sq: f64 = amplitudes.iter().map(|z| z.norm_sqr()).sum();
        if (norm_sq - 1.0).abs() > NORM_TOL {
            return invalid(format!("squared norm {norm_sq} is not 1"));
        }
        Ok(Self {
            num_qubits,
            amplitudes,
        })
    }

    /// Rescales to unit norm before validating.
    pub fn normalized(mut amplitudes: Vec<C64>) -> Result<Self> {
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return invalid("cannot normalize a zero or non-finite vector");
        }
        for z in &mut amplitudes {
            *z /= norm;
        }
        Self::new(amplitudes)
    }

    /// `|b>` for computational-basis index `b`.
    pub fn basis(num_qubits: usize, index: usize) -> Self {
        assert!((1..=MAX_QUBITS).contains(&num_qubits));
        let mut amplitudes = vec![ZERO; 1 << num_qubits];
        amplitudes[index] = ONE;
        Self {
            num_qubits,
            amplitudes,
        }
    }

    pub(crate) fn from_raw(num_qubits: usize, amplitudes: Vec<C64>) -> Self {
        debug_assert_eq!(amplitudes.len(), 1 << num_qubits);
        Self {
            num_qubits,
            amplitudes,
        }
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix {
            num_qubits: self.num_qubits,
            matrix: ComplexMatrix::outer(&self.amplitudes),
        }
    }

    pub fn tensor(&self, other: &StateVector) -> StateVector {
        StateVector::from_raw(
            self.num_qubits + other.num_qubits,
            kron_vec(&self.amplitudes, &other.amplitudes),
        )
    }
}

/// A Hermitian, unit-trace, positive-semidefinite operator on `num_qubits` qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    num_qubits: usize,
    matrix: ComplexMatrix,
}

impl DensityMatrix {
    /// Validates every invariant, including positivity through a full
    /// eigendecomposition.
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(matrix)?;
        rho.validate()?;
        Ok(rho)
    }

    /// Checks shape only. Callers that build states by construction (unitary
    /// conjugation, convex sums of projectors) skip the eigen check.
    pub(crate) fn from_matrix_unchecked(matrix: ComplexMatrix) -> Result<Self> {
        let k = matrix.rows();
        if !matrix.is_square() || k < 2 || !k.is_power_of_two() {
            return invalid(format!(
                "density matrix must be 2^N x 2^N, got {}x{}",
                matrix.rows(),
                matrix.cols()
            ));
        }
        let num_qubits = k.trailing_zeros() as usize;
        if num_qubits > MAX_QUBITS {
            return invalid(format!("{num_qubits} qubits exceeds the supported maximum"));
        }
        Ok(Self { num_qubits, matrix })
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.as_slice()
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return invalid("density matrix has non-finite entries");
        }
        let defect = m.hermitian_defect();
        if defect >= HERMITIAN_TOL {
            return invalid(format!("not Hermitian (defect {defect:e})"));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return invalid(format!("trace {tr} is not 1"));
        }
        let min = hermitian_eigenvalues(m)?[0];
        if min < -PSD_SLACK {
            return invalid(format!("not positive semidefinite (min eigenvalue {min:e})"));
        }
        Ok(())
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    /// `tr rho^2`.
    pub fn purity(&self) -> f64 {
        // tr(rho rho) = sum_ij rho_ij rho_ji = sum_ij |rho_ij|^2 for Hermitian rho
        self.matrix.as_slice().iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        hermitian_eigenvalues(&self.matrix).expect("density matrix is Hermitian")
    }

    pub fn tensor(&self, other: &DensityMatrix) -> DensityMatrix {
        DensityMatrix {
            num_qubits: self.num_qubits + other.num_qubits,
            matrix: kron(&self.matrix, &other.matrix),
        }
    }

    /// `U rho U^dagger`.
    pub fn conjugate_by(&self, u: &ComplexMatrix) -> DensityMatrix {
        assert_eq!(u.rows(), self.dim());
        DensityMatrix {
            num_qubits: self.num_qubits,
            matrix: u.matmul(&self.matrix).matmul(&u.adjoint()),
        }
    }
}

fn check_qubit_set(n: usize, qubits: &[usize]) -> Result<u32> {
    let mut mask = 0u32;
    for &q in qubits {
        if q >= n {
            return invalid(format!("qubit {q} out of range for {n} qubits"));
        }
        if mask & (1 << q) != 0 {
            return invalid(format!("qubit {q} listed twice"));
        }
        mask |= 1 << q;
    }
    Ok(mask)
}

/// Spreads the low bits of `compact` onto the positions listed in `positions`.
fn scatter_bits(compact: usize, positions: &[usize]) -> usize {
    positions
        .iter()
        .enumerate()
        .fold(0, |acc, (k, &p)| acc | (((compact >> k) & 1) << p))
}

/// Traces out `traced` qubits. Surviving qubits keep their relative order.
pub fn partial_trace(rho: &DensityMatrix, traced: &[usize]) -> Result<DensityMatrix> {
    let n = rho.num_qubits();
    let traced_mask = check_qubit_set(n, traced)?;
    if traced.is_empty() || traced.len() == n {
        return invalid("traced qubits must be a proper non-empty subset");
    }
    let kept: Vec<usize> = (0..n).filter(|q| traced_mask & (1 << q) == 0).collect();
    let mut traced_sorted: Vec<usize> = traced.to_vec();
    traced_sorted.sort_unstable();

    let kd = 1usize << kept.len();
    let td = 1usize << traced_sorted.len();
    let src = rho.matrix();
    let mut out = ComplexMatrix::zeros(kd, kd);
    for r in 0..kd {
        let rf = scatter_bits(r, &kept);
        for c in 0..kd {
            let cf = scatter_bits(c, &kept);
            let mut acc = ZERO;
            for t in 0..td {
                let tf = scatter_bits(t, &traced_sorted);
                acc += src[(rf | tf, cf | tf)];
            }
            out[(r, c)] = acc;
        }
    }
    Ok(DensityMatrix {
        num_qubits: kept.len(),
        matrix: out,
    })
}

/// A bijection on qubit labels: qubit `i` moves to position `map[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QubitPermutation {
    map: Vec<usize>,
}

impl QubitPermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &p in &map {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return invalid(format!("{map:?} is not a permutation of 0..{n}"));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
        }
    }

    pub fn swap(n: usize, a: usize, b: usize) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.swap(a, b);
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn image(&self, qubit: usize) -> usize {
        self.map[qubit]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &QubitPermutation) -> QubitPermutation {
        assert_eq!(self.len(), first.len());
        QubitPermutation {
            map: first.map.iter().map(|&q| self.map[q]).collect(),
        }
    }

    pub fn inverse(&self) -> QubitPermutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &p) in self.map.iter().enumerate() {
            inv[p] = i;
        }
        QubitPermutation { map: inv }
    }

    /// Moves every set bit `i` of `mask` to bit `map[i]`.
    pub fn apply_to_mask(&self, mask: usize) -> usize {
        self.map
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &p)| acc | (((mask >> i) & 1) << p))
    }
}

/// Relabels qubits of `rho`, acting on row and column indices alike.
pub fn permute_qubits(rho: &DensityMatrix, perm: &QubitPermutation) -> Result<DensityMatrix> {
    let n = rho.num_qubits();
    if perm.len() != n {
        return invalid(format!(
            "permutation of {} qubits applied to a {n}-qubit state",
            perm.len()
        ));
    }
    let k = rho.dim();
    let target: Vec<usize> = (0..k).map(|b| perm.apply_to_mask(b)).collect();
    let src = rho.matrix();
    let mut out = ComplexMatrix::zeros(k, k);
    for r in 0..k {
        for c in 0..k {
            out[(target[r], target[c])] = src[(r, c)];
        }
    }
    Ok(DensityMatrix {
        num_qubits: n,
        matrix: out,
    })
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Eigenvalues of a Hermitian matrix in ascending order, by cyclic complex
/// Jacobi rotations.
///
/// Each pivot `(p, q)` first rephases column `q` so that `a_pq` is real and
/// then applies the real symmetric Jacobi rotation that annihilates it.
pub fn hermitian_eigenvalues(m: &ComplexMatrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return invalid("eigenvalues need a square matrix");
    }
    let defect = m.hermitian_defect();
    if !(defect < EIGEN_HERMITIAN_TOL) {
        return invalid(format!("matrix is not Hermitian (defect {defect:e})"));
    }
    let n = m.rows();
    let mut a = m.as_slice().to_vec();
    // symmetrize exactly so the rotations see a Hermitian matrix
    for i in 0..n {
        a[i * n + i] = C64::new(a[i * n + i].re, 0.0);
        for j in i + 1..n {
            let avg = (a[i * n + j] + a[j * n + i].conj()) * 0.5;
            a[i * n + j] = avg;
            a[j * n + i] = avg.conj();
        }
    }
    let total: f64 = a.iter().map(|z| z.norm_sqr()).sum();
    let threshold = (total * 1e-32).max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].norm_sqr())
            .sum();
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let g = a[p * n + q];
                let r = g.norm();
                if r == 0.0 {
                    continue;
                }
                // rephase: column q *= conj(g)/r, row q *= g/r
                let phase = g.conj() / r;
                for i in 0..n {
                    a[i * n + q] *= phase;
                }
                let phase_c = phase.conj();
                for j in 0..n {
                    a[q * n + j] *= phase_c;
                }
                let app = a[p * n + p].re;
                let aqq = a[q * n + q].re;
                let theta = (aqq - app) / (2.0 * r);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = aip * c - aiq * s;
                    a[i * n + q] = aip * s + aiq * c;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = apj * c - aqj * s;
                    a[q * n + j] = apj * s + aqj * c;
                }
                a[p * n + q] = ZERO;
                a[q * n + p] = ZERO;
                a[p * n + p].im = 0.0;
                a[q * n + q].im = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i].re).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}
