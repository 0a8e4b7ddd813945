//! Pure and mixed state generators: parameterized single-qubit and controlled
//! gates, random circuits, Haar sampling, GHZ/W, explicit mixtures, traced
//! subsystems and Kronecker-product separable mixtures.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::linalg::{
    kron, partial_trace, ComplexMatrix, DensityMatrix, StateVector, C64, MAX_QUBITS, ZERO,
};

/// Euler angles of the universal gate plus the controlled gate's global phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateParams {
    pub theta: f64,
    pub phi: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl GateParams {
    pub fn new(theta: f64, phi: f64, lambda: f64, gamma: f64) -> Result<Self> {
        let p = Self {
            theta,
            phi,
            lambda,
            gamma,
        };
        if [theta, phi, lambda, gamma]
            .iter()
            .any(|a| !(0.0..TAU).contains(a))
        {
            return invalid(format!("gate angles must lie in [0, 2pi): {p:?}"));
        }
        Ok(p)
    }

    pub const fn zero() -> Self {
        Self {
            theta: 0.0,
            phi: 0.0,
            lambda: 0.0,
            gamma: 0.0,
        }
    }

    /// All four angles uniform on [0, 2pi).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            theta: rng.random_range(0.0..TAU),
            phi: rng.random_range(0.0..TAU),
            lambda: rng.random_range(0.0..TAU),
            gamma: rng.random_range(0.0..TAU),
        }
    }
}

fn cis(a: f64) -> C64 {
    C64::from_polar(1.0, a)
}

/// `U(theta, phi, lambda)`; `gamma` is ignored.
pub fn u_gate(p: &GateParams) -> ComplexMatrix {
    let (s, c) = (p.theta / 2.0).sin_cos();
    ComplexMatrix::from_vec(
        2,
        2,
        vec![
            C64::new(c, 0.0),
            -cis(p.lambda) * s,
            cis(p.phi) * s,
            cis(p.phi + p.lambda) * c,
        ],
    )
    .expect("2x2")
}

/// Controlled `e^{i gamma} U(theta, phi, lambda)`. Local index `2*control + target`.
pub fn cu_gate(p: &GateParams) -> ComplexMatrix {
    let u = u_gate(p);
    let phase = cis(p.gamma);
    let mut m = ComplexMatrix::identity(4);
    for i in 0..2 {
        for j in 0..2 {
            m[(2 + i, 2 + j)] = phase * u[(i, j)];
        }
    }
    m
}

/// Applies a `2^k x 2^k` gate to `targets`; `targets[b]` is bit `b` of the
/// gate's local index.
pub fn apply_gate(
    state: &StateVector,
    gate: &ComplexMatrix,
    targets: &[usize],
) -> Result<StateVector> {
    let mut out = state.clone();
    apply_gate_in_place(&mut out, gate, targets)?;
    Ok(out)
}

pub(crate) fn apply_gate_in_place(
    state: &mut StateVector,
    gate: &ComplexMatrix,
    targets: &[usize],
) -> Result<()> {
    let n = state.num_qubits();
    let k = targets.len();
    if k == 0 || !gate.is_square() || gate.rows() != 1 << k {
        return invalid(format!(
            "a {}x{} gate cannot act on {k} target qubits",
            gate.rows(),
            gate.cols()
        ));
    }
    let mut tmask = 0usize;
    for &t in targets {
        if t >= n || tmask & (1 << t) != 0 {
            return invalid(format!("targets {targets:?} invalid for {n} qubits"));
        }
        tmask |= 1 << t;
    }
    let local = 1usize << k;
    let offsets: Vec<usize> = (0..local)
        .map(|l| {
            targets
                .iter()
                .enumerate()
                .fold(0, |acc, (b, &t)| acc | (((l >> b) & 1) << t))
        })
        .collect();
    let amps = state.amplitudes_mut();
    let mut buf = vec![ZERO; local];
    for base in 0..amps.len() {
        if base & tmask != 0 {
            continue;
        }
        for (slot, &off) in buf.iter_mut().zip(&offsets) {
            *slot = amps[base | off];
        }
        for (row, &off) in offsets.iter().enumerate() {
            amps[base | off] = (0..local).map(|col| gate[(row, col)] * buf[col]).sum();
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    U,
    Cu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOp {
    pub kind: GateKind,
    pub target: usize,
    pub control: Option<usize>,
    pub params: GateParams,
}

/// Bit position of the unordered pair `{a, b}` in a CU-pair bitmask.
/// Pairs are ordered colexicographically, so the index of a pair does not
/// depend on register size.
pub fn pair_index(a: usize, b: usize) -> usize {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    debug_assert!(lo != hi);
    hi * (hi - 1) / 2 + lo
}

/// Ordered gate list of a generating circuit.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitSpec {
    num_qubits: usize,
    ops: Vec<GateOp>,
}

impl CircuitSpec {
    pub fn new(num_qubits: usize, ops: Vec<GateOp>) -> Result<Self> {
        for op in &ops {
            let ok = op.target < num_qubits
                && match (op.kind, op.control) {
                    (GateKind::U, None) => true,
                    (GateKind::Cu, Some(c)) => c < num_qubits && c != op.target,
                    _ => false,
                };
            if !ok {
                return invalid(format!("malformed gate {op:?} on {num_qubits} qubits"));
            }
        }
        Ok(Self { num_qubits, ops })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn ops(&self) -> &[GateOp] {
        &self.ops
    }

    pub fn cu_count(&self) -> usize {
        self.ops.iter().filter(|o| o.kind == GateKind::Cu).count()
    }

    /// Unordered pairs touched by any CU gate, sorted.
    pub fn cu_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .ops
            .iter()
            .filter_map(|o| o.control.map(|c| (c.min(o.target), c.max(o.target))))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    pub fn cu_pair_mask(&self) -> u32 {
        self.cu_pairs()
            .iter()
            .fold(0, |m, &(a, b)| m | (1 << pair_index(a, b)))
    }

    /// Runs the circuit on `|0...0>`.
    pub fn simulate(&self) -> StateVector {
        let mut psi = StateVector::basis(self.num_qubits, 0);
        for op in &self.ops {
            match op.control {
                None => apply_gate_in_place(&mut psi, &u_gate(&op.params), &[op.target]),
                Some(c) => apply_gate_in_place(&mut psi, &cu_gate(&op.params), &[op.target, c]),
            }
            .expect("validated circuit");
        }
        psi
    }
}

/// Decodes a CU-pair bitmask back into pairs.
pub fn pairs_from_mask(mask: u32) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for hi in 1..MAX_QUBITS {
        for lo in 0..hi {
            if mask & (1 << pair_index(lo, hi)) != 0 {
                out.push((lo, hi));
            }
        }
    }
    out
}

/// Random U layer, optionally `k` CU gates with `k` uniform on `[1, 2*C(n,2))`
/// on uniformly drawn ordered (control, target) pairs, then a final U layer.
pub fn random_circuit<R: Rng + ?Sized>(n: usize, entangling: bool, rng: &mut R) -> Result<CircuitSpec> {
    if !(2..=MAX_QUBITS).contains(&n) {
        return invalid(format!("random circuits need 2..={MAX_QUBITS} qubits, got {n}"));
    }
    let mut ops = Vec::new();
    let u_layer = |ops: &mut Vec<GateOp>, rng: &mut R| {
        for q in 0..n {
            ops.push(GateOp {
                kind: GateKind::U,
                target: q,
                control: None,
                params: GateParams::random(rng),
            });
        }
    };
    u_layer(&mut ops, rng);
    if entangling {
        let upper = n * (n - 1); // 2 * C(n, 2), exclusive
        let k = rng.random_range(1..upper);
        for _ in 0..k {
            let control = rng.random_range(0..n);
            let mut target = rng.random_range(0..n - 1);
            if target >= control {
                target += 1;
            }
            ops.push(GateOp {
                kind: GateKind::Cu,
                target,
                control: Some(control),
                params: GateParams::random(rng),
            });
        }
    }
    u_layer(&mut ops, rng);
    CircuitSpec::new(n, ops)
}

pub fn random_circuit_state<R: Rng + ?Sized>(
    n: usize,
    entangling: bool,
    rng: &mut R,
) -> Result<(StateVector, CircuitSpec)> {
    let spec = random_circuit(n, entangling, rng)?;
    Ok((spec.simulate(), spec))
}

/// Haar state from explicit uniform draws `x_i` in (0, 1] and phases `gamma_i`.
pub fn haar_state_from(x: &[f64], gamma: &[f64]) -> Result<StateVector> {
    if x.len() != gamma.len() {
        return invalid("x and gamma lengths differ");
    }
    if x.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return invalid("x entries must lie in (0, 1]");
    }
    let y: Vec<f64> = x.iter().map(|&v| -v.ln()).collect();
    let total: f64 = y.iter().sum();
    if !(total > 0.0) {
        return invalid("all x equal to 1 gives a zero vector");
    }
    let amps = y
        .iter()
        .zip(gamma)
        .map(|(&yi, &g)| C64::from_polar((yi / total).sqrt(), g))
        .collect();
    StateVector::normalized(amps)
}

/// Uniformly random pure state via exponential weights and uniform phases.
pub fn haar_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<StateVector> {
    if !(1..=MAX_QUBITS).contains(&n) {
        return invalid(format!("Haar sampling needs 1..={MAX_QUBITS} qubits, got {n}"));
    }
    let k = 1usize << n;
    loop {
        // 1 - [0,1) lands in (0,1]
        let x: Vec<f64> = (0..k).map(|_| 1.0 - rng.random::<f64>()).collect();
        let gamma: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..TAU)).collect();
        if let Ok(psi) = haar_state_from(&x, &gamma) {
            return Ok(psi);
        }
    }
}

pub fn ghz_state(n: usize) -> Result<StateVector> {
    if !(2..=MAX_QUBITS).contains(&n) {
        return invalid(format!("GHZ needs 2..={MAX_QUBITS} qubits, got {n}"));
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut a = vec![ZERO; 1 << n];
    a[0] = C64::new(h, 0.0);
    a[(1 << n) - 1] = C64::new(h, 0.0);
    Ok(StateVector::from_raw(n, a))
}

pub fn w_state(n: usize) -> Result<StateVector> {
    if !(2..=MAX_QUBITS).contains(&n) {
        return invalid(format!("W needs 2..={MAX_QUBITS} qubits, got {n}"));
    }
    let v = C64::new(1.0 / (n as f64).sqrt(), 0.0);
    let mut a = vec![ZERO; 1 << n];
    for q in 0..n {
        a[1 << q] = v;
    }
    Ok(StateVector::from_raw(n, a))
}

/// One single-qubit unitary per qubit; the full operator is their tensor product.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUnitaries {
    gates: Vec<ComplexMatrix>,
}

impl LocalUnitaries {
    pub fn identity(n: usize) -> Self {
        Self {
            gates: vec![ComplexMatrix::identity(2); n],
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Self {
            gates: (0..n).map(|_| u_gate(&GateParams::random(rng))).collect(),
        }
    }

    pub fn from_gates(gates: Vec<ComplexMatrix>) -> Result<Self> {
        if gates.iter().any(|g| g.rows() != 2 || !g.is_unitary(1e-10)) {
            return invalid("local gates must be 2x2 unitaries");
        }
        Ok(Self { gates })
    }

    pub fn num_qubits(&self) -> usize {
        self.gates.len()
    }

    /// `U_{n-1} ⊗ ... ⊗ U_0`.
    pub fn operator(&self) -> ComplexMatrix {
        self.gates
            .iter()
            .rev()
            .fold(ComplexMatrix::identity(1), |acc, g| kron(&acc, g))
    }

    pub fn apply_state(&self, psi: &StateVector) -> StateVector {
        assert_eq!(psi.num_qubits(), self.num_qubits());
        let mut out = psi.clone();
        for (q, g) in self.gates.iter().enumerate() {
            apply_gate_in_place(&mut out, g, &[q]).expect("qubit in range");
        }
        out
    }

    pub fn apply_density(&self, rho: &DensityMatrix) -> DensityMatrix {
        assert_eq!(rho.num_qubits(), self.num_qubits());
        rho.conjugate_by(&self.operator())
    }
}

/// Applies an independent random U to every qubit of a state or density matrix.
pub trait RandomizeLocal: Sized {
    fn randomize_local<R: Rng + ?Sized>(&self, rng: &mut R) -> Self;
}

impl RandomizeLocal for StateVector {
    fn randomize_local<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        LocalUnitaries::random(self.num_qubits(), rng).apply_state(self)
    }
}

impl RandomizeLocal for DensityMatrix {
    fn randomize_local<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        LocalUnitaries::random(self.num_qubits(), rng).apply_density(self)
    }
}

/// Weights and pure components of `sum_i p_i |psi_i><psi_i|`.
#[derive(Clone, Debug)]
pub struct MixtureSpec {
    probs: Vec<f64>,
    components: Vec<StateVector>,
}

impl MixtureSpec {
    pub fn new(probs: Vec<f64>, components: Vec<StateVector>) -> Result<Self> {
        if probs.is_empty() || probs.len() != components.len() {
            return invalid("mixture needs matching non-empty probs and components");
        }
        if probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return invalid("mixture probabilities must be non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("mixture probabilities sum to {total}"));
        }
        let n = components[0].num_qubits();
        if components.iter().any(|c| c.num_qubits() != n) {
            return invalid("mixture components must share a qubit count");
        }
        Ok(Self { probs, components })
    }

    pub fn d(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn components(&self) -> &[StateVector] {
        &self.components
    }
}

/// `d` weights from normalized i.i.d. uniform (0, 1] draws.
pub fn random_weights<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..d).map(|_| 1.0 - rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn mix_states(spec: &MixtureSpec) -> DensityMatrix {
    let k = spec.components[0].dim();
    let mut m = ComplexMatrix::zeros(k, k);
    for (&p, psi) in spec.probs.iter().zip(&spec.components) {
        let a = psi.amplitudes();
        for i in 0..k {
            let ai = a[i] * p;
            for j in 0..k {
                m[(i, j)] += ai * a[j].conj();
            }
        }
    }
    DensityMatrix::from_matrix_unchecked(m).expect("square power-of-two")
}

/// Weighted sum of density matrices on the same register.
pub fn mix_densities(probs: &[f64], parts: &[DensityMatrix]) -> Result<DensityMatrix> {
    if probs.is_empty() || probs.len() != parts.len() {
        return invalid("need matching non-empty probs and parts");
    }
    let k = parts[0].dim();
    let mut m = ComplexMatrix::zeros(k, k);
    for (&p, rho) in probs.iter().zip(parts) {
        if rho.dim() != k {
            return invalid("parts must share a dimension");
        }
        m.add_assign_scaled(rho.matrix(), C64::new(p, 0.0));
    }
    DensityMatrix::from_matrix_unchecked(m)
}

/// Random entangling circuit on `n_target + n_extra` qubits with the top
/// `n_extra` qubits traced out.
pub fn traced_mixed_state<R: Rng + ?Sized>(
    n_target: usize,
    n_extra: usize,
    rng: &mut R,
) -> Result<(DensityMatrix, CircuitSpec)> {
    if n_extra == 0 || n_target == 0 {
        return invalid("traced_mixed_state needs n_target >= 1 and n_extra >= 1");
    }
    let total = n_target + n_extra;
    let (psi, spec) = random_circuit_state(total, true, rng)?;
    let traced: Vec<usize> = (n_target..total).collect();
    Ok((partial_trace(&psi.to_density(), &traced)?, spec))
}

/// Single-qubit mixed state from tracing one half of a Haar-random qubit pair.
pub fn random_mixed_qubit<R: Rng + ?Sized>(rng: &mut R) -> DensityMatrix {
    let pair = haar_state(2, rng).expect("2 qubits").to_density();
    partial_trace(&pair, &[1]).expect("proper subset")
}

/// `sum_i p_i rho_1^i ⊗ ... ⊗ rho_n^i` with mixed single-qubit factors; the
/// number of terms is uniform on `[1, 2^n]`.
pub fn kron_separable_mixed<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<DensityMatrix> {
    if !(2..=MAX_QUBITS).contains(&n) {
        return invalid(format!("kron_separable_mixed needs 2..={MAX_QUBITS} qubits"));
    }
    let terms = rng.random_range(1..=(1usize << n));
    let probs = random_weights(terms, rng);
    let parts: Vec<DensityMatrix> = (0..terms)
        .map(|_| {
            let mut rho = random_mixed_qubit(rng);
            for _ in 1..n {
                rho = random_mixed_qubit(rng).tensor(&rho);
            }
            rho
        })
        .collect();
    mix_densities(&probs, &parts)
}

/// Random angle helper used by the PPTES parameter draws.
pub(crate) fn uniform_open<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}
