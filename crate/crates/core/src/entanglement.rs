//! Bipartitions, partial transpose, negativity and the PPT-entangled families.
//!
//! A bipartition `A|B` is stored as the bitmask of side `B` with qubit 0
//! pinned to side `A`. Its canonical index is `mask >> 1`, which runs over
//! `1..2^{N-1}` in ascending order; label vectors are laid out in that order
//! (position `index - 1`).

use rand::Rng;

use crate::dataset::{Generator, LabeledState, Provenance};
use crate::error::{invalid, Result};
use crate::exec::Execution;
use crate::linalg::{
    hermitian_eigenvalues, kron_vec, ComplexMatrix, DensityMatrix, QubitPermutation, C64,
    MAX_QUBITS, ONE, ZERO,
};
use crate::seed;
use crate::stategen::{CircuitSpec, RandomizeLocal};

/// Eigenvalues of the partial transpose below `-NPT_THRESHOLD` count as negative.
pub const NPT_THRESHOLD: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bipartition {
    num_qubits: usize,
    side_b_mask: usize,
}

impl Bipartition {
    pub fn new(num_qubits: usize, side_b_mask: usize) -> Result<Self> {
        if !(2..=MAX_QUBITS).contains(&num_qubits) {
            return invalid(format!("bipartitions need 2..={MAX_QUBITS} qubits"));
        }
        if side_b_mask == 0 || side_b_mask & 1 != 0 || side_b_mask >= 1 << num_qubits {
            return invalid(format!(
                "side-B mask {side_b_mask:#b} invalid for {num_qubits} qubits"
            ));
        }
        Ok(Self {
            num_qubits,
            side_b_mask,
        })
    }

    /// Bipartition with canonical index `index` in `1..2^{N-1}`.
    pub fn from_index(num_qubits: usize, index: usize) -> Result<Self> {
        if index == 0 || index > bipartition_count(num_qubits) {
            return invalid(format!(
                "bipartition index {index} out of range for {num_qubits} qubits"
            ));
        }
        Self::new(num_qubits, index << 1)
    }

    /// Canonicalizes any proper non-empty side mask, flipping sides if it
    /// contains qubit 0.
    pub fn from_any_side(num_qubits: usize, side: usize) -> Result<Self> {
        let full = (1usize << num_qubits) - 1;
        let side = side & full;
        if side == 0 || side == full {
            return invalid("a bipartition side must be a proper non-empty subset");
        }
        Self::new(num_qubits, if side & 1 != 0 { full ^ side } else { side })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn side_b_mask(&self) -> usize {
        self.side_b_mask
    }

    pub fn side_a_mask(&self) -> usize {
        ((1 << self.num_qubits) - 1) ^ self.side_b_mask
    }

    pub fn index(&self) -> usize {
        self.side_b_mask >> 1
    }

    /// Position in a label vector.
    pub fn position(&self) -> usize {
        self.index() - 1
    }

    pub fn in_b(&self, qubit: usize) -> bool {
        self.side_b_mask & (1 << qubit) != 0
    }
}

/// `2^{N-1} - 1`.
pub fn bipartition_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (1 << (n - 1)) - 1
    }
}

pub fn enumerate_bipartitions(n: usize) -> Result<Vec<Bipartition>> {
    if !(2..=MAX_QUBITS).contains(&n) {
        return invalid(format!("bipartitions need 2..={MAX_QUBITS} qubits, got {n}"));
    }
    (1..=bipartition_count(n))
        .map(|j| Bipartition::from_index(n, j))
        .collect()
}

/// Binary per-bipartition labels in canonical order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        let m = values.len();
        if !(1..=bipartition_count(MAX_QUBITS)).contains(&m)
            || !(m + 1).is_power_of_two()
            || values.iter().any(|&v| v > 1)
        {
            return invalid(format!("{values:?} is not a valid label vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; bipartition_count(n)])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1; bipartition_count(n)])
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_qubits(&self) -> usize {
        (self.0.len() + 1).trailing_zeros() as usize + 1
    }

    pub fn get(&self, bp: &Bipartition) -> u8 {
        self.0[bp.position()]
    }

    pub fn set(&mut self, bp: &Bipartition, v: bool) {
        self.0[bp.position()] = v as u8;
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }
}

/// Transposes the side-B indices of `rho`.
pub fn partial_transpose(rho: &DensityMatrix, bp: &Bipartition) -> ComplexMatrix {
    assert_eq!(rho.num_qubits(), bp.num_qubits(), "bipartition size mismatch");
    let b = bp.side_b_mask();
    let k = rho.dim();
    let src = rho.matrix();
    let mut out = ComplexMatrix::zeros(k, k);
    for r in 0..k {
        for c in 0..k {
            let r2 = (r & !b) | (c & b);
            let c2 = (c & !b) | (r & b);
            out[(r2, c2)] = src[(r, c)];
        }
    }
    out
}

fn negativity_from_spectrum(eig: &[f64]) -> f64 {
    eig.iter()
        .filter(|&&l| l < -NPT_THRESHOLD)
        .map(|l| -l)
        .sum()
}

/// Sum of `|lambda|` over partial-transpose eigenvalues below `-NPT_THRESHOLD`.
pub fn negativity(rho: &DensityMatrix, bp: &Bipartition) -> f64 {
    let pt = partial_transpose(rho, bp);
    let eig = hermitian_eigenvalues(&pt).expect("partial transpose of a Hermitian matrix");
    negativity_from_spectrum(&eig)
}

/// Negativity of every bipartition, in canonical order.
pub fn negativities(rho: &DensityMatrix) -> Vec<f64> {
    enumerate_bipartitions(rho.num_qubits())
        .expect("valid register")
        .iter()
        .map(|bp| negativity(rho, bp))
        .collect()
}

pub fn is_npt(neg: f64) -> bool {
    neg > NPT_THRESHOLD
}

pub fn labels_from_negativities(negs: &[f64]) -> LabelVector {
    LabelVector(negs.iter().map(|&v| is_npt(v) as u8).collect())
}

/// Entangled iff NPT, per bipartition.
pub fn label_by_negativity(rho: &DensityMatrix) -> (LabelVector, Vec<f64>) {
    let negs = negativities(rho);
    (labels_from_negativities(&negs), negs)
}

/// Connectivity labels: NPT cuts are entangled; a PPT cut is labeled entangled
/// when some CU gate joined two surviving qubits on opposite sides.
///
/// `surviving[k]` is the circuit qubit that became qubit `k` of `rho`. CU
/// pairs touching traced-out qubits are ignored.
pub fn label_weakly(
    rho: &DensityMatrix,
    circuit: &CircuitSpec,
    surviving: &[usize],
) -> Result<(LabelVector, Vec<f64>)> {
    let negs = negativities(rho);
    let labels = weak_labels_from(&negs, circuit, surviving)?;
    Ok((labels, negs))
}

pub fn weak_labels_from(
    negs: &[f64],
    circuit: &CircuitSpec,
    surviving: &[usize],
) -> Result<LabelVector> {
    let n = surviving.len();
    if bipartition_count(n) != negs.len() {
        return invalid("surviving qubits do not match the state size");
    }
    if surviving.iter().any(|&q| q >= circuit.num_qubits()) {
        return invalid("surviving qubit outside the circuit");
    }
    let local = |q: usize| surviving.iter().position(|&s| s == q);
    let pairs: Vec<(usize, usize)> = circuit
        .cu_pairs()
        .into_iter()
        .filter_map(|(a, b)| Some((local(a)?, local(b)?)))
        .collect();
    let mut labels = labels_from_negativities(negs);
    for bp in enumerate_bipartitions(n)? {
        if labels.get(&bp) == 0 && pairs.iter().any(|&(a, b)| bp.in_b(a) != bp.in_b(b)) {
            labels.set(&bp, true);
        }
    }
    Ok(labels)
}

/// Bipartitions across which the generating circuit could have produced
/// correlations: some connected component of the CU graph (over all circuit
/// qubits, traced ones included) holds surviving qubits on both sides. Every
/// other cut is exactly a product across the cut.
pub fn connected_cuts(circuit: &CircuitSpec, surviving: &[usize]) -> Result<LabelVector> {
    let total = circuit.num_qubits();
    let mut parent: Vec<usize> = (0..total).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    for (a, b) in circuit.cu_pairs() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    let n = surviving.len();
    let roots: Vec<usize> = surviving.iter().map(|&q| find(&mut parent, q)).collect();
    let mut labels = LabelVector::zeros(n);
    for bp in enumerate_bipartitions(n)? {
        let crosses = (0..n).any(|a| {
            (0..n).any(|b| bp.in_b(a) != bp.in_b(b) && roots[a] == roots[b])
        });
        labels.set(&bp, crosses);
    }
    Ok(labels)
}

/// True when every bipartition flagged in `intended` is NPT.
pub fn is_verified(negs: &[f64], intended: &LabelVector) -> bool {
    negs.len() == intended.len()
        && intended
            .as_slice()
            .iter()
            .zip(negs)
            .all(|(&want, &neg)| want == 0 || is_npt(neg))
}

/// Keeps the states whose intended-entangled bipartitions are all NPT.
pub fn filter_verified(states: Vec<(DensityMatrix, LabelVector)>) -> Vec<(DensityMatrix, LabelVector)> {
    states
        .into_iter()
        .filter(|(rho, intended)| is_verified(&negativities(rho), intended))
        .collect()
}

/// Canonical index of the bipartition `j` after relabeling qubits by `perm`.
pub fn permuted_bipartition_index(j: usize, perm: &QubitPermutation, n: usize) -> Result<usize> {
    if perm.len() != n {
        return invalid("permutation size does not match qubit count");
    }
    let bp = Bipartition::from_index(n, j)?;
    let image = perm.apply_to_mask(bp.side_b_mask());
    Ok(Bipartition::from_any_side(n, image)?.index())
}

/// For each label position `j`, the position `pi(j)` it occupies after `perm`.
pub fn permuted_label_positions(perm: &QubitPermutation) -> Vec<usize> {
    let n = perm.len();
    (1..=bipartition_count(n))
        .map(|j| permuted_bipartition_index(j, perm, n).expect("valid index") - 1)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PptesFamily {
    Horodecki,
    Acin,
    Upb,
}

impl PptesFamily {
    pub const ALL: [PptesFamily; 3] = [PptesFamily::Horodecki, PptesFamily::Acin, PptesFamily::Upb];

    pub fn name(self) -> &'static str {
        match self {
            PptesFamily::Horodecki => "horodecki",
            PptesFamily::Acin => "acin",
            PptesFamily::Upb => "upb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "horodecki" => Ok(PptesFamily::Horodecki),
            "acin" => Ok(PptesFamily::Acin),
            "upb" => Ok(PptesFamily::Upb),
            other => invalid(format!("unknown PPTES family '{other}'")),
        }
    }

    pub fn generator(self) -> Generator {
        match self {
            PptesFamily::Horodecki => Generator::Horodecki,
            PptesFamily::Acin => Generator::Acin,
            PptesFamily::Upb => Generator::Upb,
        }
    }

    /// Bipartitions on which the family is PPT yet entangled by construction.
    pub fn ppt_cuts(self, n: usize) -> Vec<Bipartition> {
        match self {
            PptesFamily::Horodecki => {
                vec![Bipartition::new(n, 1 << (n - 1)).expect("n >= 3")]
            }
            PptesFamily::Acin | PptesFamily::Upb => {
                enumerate_bipartitions(n).expect("n = 3")
            }
        }
    }

    pub fn supports(self, n: usize) -> bool {
        match self {
            PptesFamily::Horodecki => (3..=MAX_QUBITS).contains(&n),
            PptesFamily::Acin | PptesFamily::Upb => n == 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PptesParams {
    Horodecki { b: f64 },
    Acin { a: f64, b: f64, c: f64 },
    Upb,
}

impl PptesParams {
    pub fn family(&self) -> PptesFamily {
        match self {
            PptesParams::Horodecki { .. } => PptesFamily::Horodecki,
            PptesParams::Acin { .. } => PptesFamily::Acin,
            PptesParams::Upb => PptesFamily::Upb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PptesParams::Horodecki { b } if !(b > 0.0 && b < 1.0) => {
                invalid(format!("Horodecki parameter b = {b} outside (0, 1)"))
            }
            PptesParams::Acin { a, b, c }
                if !(a > 0.0 && b > 0.0 && c > 0.0)
                    || ![a, b, c].iter().all(|v| v.is_finite()) =>
            {
                invalid(format!("Acin parameters must be positive: ({a}, {b}, {c})"))
            }
            _ => Ok(()),
        }
    }

    /// Horodecki `b` uniform on (0, 1); Acin parameters log-uniform on
    /// `[e^-2, e^2]` with `|ln abc| >= 0.1` so the state stays away from the
    /// separable `abc = 1` slice.
    pub fn random<R: Rng + ?Sized>(family: PptesFamily, rng: &mut R) -> Self {
        match family {
            PptesFamily::Horodecki => PptesParams::Horodecki {
                b: crate::stategen::uniform_open(0.0, 1.0, rng),
            },
            PptesFamily::Acin => loop {
                let [a, b, c] = [0; 3].map(|_| rng.random_range(-2.0..2.0f64));
                if (a + b + c).abs() >= 0.1 {
                    break PptesParams::Acin {
                        a: a.exp(),
                        b: b.exp(),
                        c: c.exp(),
                    };
                }
            },
            PptesFamily::Upb => PptesParams::Upb,
        }
    }

    pub fn state(&self, n: usize) -> Result<DensityMatrix> {
        match *self {
            PptesParams::Horodecki { b } => horodecki_state(b, n),
            PptesParams::Acin { a, b, c } => {
                if n != 3 {
                    return invalid("Acin states are defined for 3 qubits only");
                }
                acin_state(a, b, c)
            }
            PptesParams::Upb => {
                if n != 3 {
                    return invalid("the UPB state is defined for 3 qubits only");
                }
                Ok(upb_state())
            }
        }
    }
}

/// The `2 ⊗ 2^{n-1}` Horodecki PPT-entangled state. The two-dimensional
/// factor is qubit `n-1`; the state is PPT across `{n-1} | rest`.
///
/// With `M = 2^{n-1}` and blocks indexed by that qubit:
/// `[[b I, b S], [b S^T, Z]] / ((2M-1) b + 1)` where `S` is the unit
/// superdiagonal and `Z = b I` except `Z_00 = Z_{M-1,M-1} = (1+b)/2`,
/// `Z_{0,M-1} = Z_{M-1,0} = sqrt(1-b^2)/2`. For `n = 3` this is the original
/// 2x4 family.
pub fn horodecki_state(b: f64, n: usize) -> Result<DensityMatrix> {
    PptesParams::Horodecki { b }.validate()?;
    if !(3..=MAX_QUBITS).contains(&n) {
        return invalid(format!("Horodecki states need 3..={MAX_QUBITS} qubits"));
    }
    let m = 1usize << (n - 1);
    let k = 2 * m;
    let mut rho = ComplexMatrix::zeros(k, k);
    let re = |x: f64| C64::new(x, 0.0);
    for i in 0..m {
        rho[(i, i)] = re(b);
        rho[(m + i, m + i)] = re(b);
        if i + 1 < m {
            rho[(i, m + i + 1)] = re(b);
            rho[(m + i + 1, i)] = re(b);
        }
    }
    let corner = (1.0 + b) / 2.0;
    let coh = (1.0 - b * b).sqrt() / 2.0;
    rho[(m, m)] = re(corner);
    rho[(k - 1, k - 1)] = re(corner);
    rho[(m, k - 1)] = re(coh);
    rho[(k - 1, m)] = re(coh);
    let norm = (2 * m - 1) as f64 * b + 1.0;
    DensityMatrix::from_matrix_unchecked(rho.scale(re(1.0 / norm)))
}

/// Three-qubit GHZ-diagonal family that is PPT across every cut:
/// `(2|GHZ><GHZ| + a|001> + b|010> + c|011> + |100>/c + |101>/b + |110>/a) / norm`.
/// Ket strings list qubit 2 first.
pub fn acin_state(a: f64, b: f64, c: f64) -> Result<DensityMatrix> {
    PptesParams::Acin { a, b, c }.validate()?;
    let mut rho = ComplexMatrix::zeros(8, 8);
    let re = |x: f64| C64::new(x, 0.0);
    rho[(0, 0)] = ONE;
    rho[(7, 7)] = ONE;
    rho[(0, 7)] = ONE;
    rho[(7, 0)] = ONE;
    for (idx, w) in [(0b001, a), (0b010, b), (0b011, c), (0b100, 1.0 / c), (0b101, 1.0 / b), (0b110, 1.0 / a)] {
        rho[(idx, idx)] = re(w);
    }
    let norm = 2.0 + a + b + c + 1.0 / a + 1.0 / b + 1.0 / c;
    DensityMatrix::from_matrix_unchecked(rho.scale(re(1.0 / norm)))
}

/// Normalized projector onto the complement of the "Shifts" unextendible
/// product basis `{|0,1,+>, |1,+,0>, |+,0,1>, |-,-,->}`.
pub fn upb_state() -> DensityMatrix {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let zero = [ONE, ZERO];
    let one = [ZERO, ONE];
    let plus = [C64::new(h, 0.0), C64::new(h, 0.0)];
    let minus = [C64::new(h, 0.0), C64::new(-h, 0.0)];
    let product = |x: &[C64; 2], y: &[C64; 2], z: &[C64; 2]| kron_vec(x, &kron_vec(y, z));
    let basis = [
        product(&zero, &one, &plus),
        product(&one, &plus, &zero),
        product(&plus, &zero, &one),
        product(&minus, &minus, &minus),
    ];
    let mut proj = ComplexMatrix::identity(8);
    for v in &basis {
        proj.add_assign_scaled(&ComplexMatrix::outer(v), C64::new(-1.0, 0.0));
    }
    DensityMatrix::from_matrix_unchecked(proj.scale(C64::new(0.25, 0.0))).expect("8x8")
}

/// One locally randomized member of `family`, labeled entangled on its PPT
/// cuts and on any cut that is NPT.
pub fn pptes_sample<R: Rng + ?Sized>(family: PptesFamily, n: usize, rng: &mut R) -> Result<LabeledState> {
    if !family.supports(n) {
        return invalid(format!("{} states are not defined for {n} qubits", family.name()));
    }
    let params = PptesParams::random(family, rng);
    let rho = params.state(n)?.randomize_local(rng);
    let negs = negativities(&rho);
    let mut labels = labels_from_negativities(&negs);
    for bp in family.ppt_cuts(n) {
        labels.set(&bp, true);
    }
    Ok(LabeledState {
        rho,
        labels,
        neg_values: negs,
        provenance: Provenance {
            generator: family.generator(),
            d: 0,
            cu_pairs: 0,
        },
    })
}

/// `count` randomized states of `family`, one derived stream per sample.
pub fn make_pptes_testset(
    family: PptesFamily,
    n: usize,
    count: usize,
    master_seed: u64,
    exec: Execution,
) -> Result<Vec<LabeledState>> {
    if count == 0 {
        return invalid("PPTES set needs count >= 1");
    }
    if !family.supports(n) {
        return invalid(format!("{} states are not defined for {n} qubits", family.name()));
    }
    exec.map(count, |i| {
        let mut rng = seed::rng_for(
            master_seed,
            &[seed::domain::PPTES, family as u64, n as u64, i as u64],
        );
        pptes_sample(family, n, &mut rng)
    })
    .into_iter()
    .collect()
}
