//! Labeled corpora: composition, labeling strategies and the binary format.
//!
//! File layout (little-endian):
//!
//! ```text
//! header   "QENT" | version u32 | N u8 | strategy u8 | count u64 | master_seed u64
//! record   2*4^N f64 (real parts row-major, then imaginary parts row-major)
//!          m u8 labels | m f64 negativities
//!          generator u8 | d u16 | cu_pairs u32
//! trailer  crc32 u32 over every preceding byte
//! ```
//!
//! Records have a fixed stride, so a reader can seek to any sample. A sidecar
//! `<file>.manifest` repeats the header as `key=value` lines together with the
//! section breakdown.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::entanglement::{
    bipartition_count, connected_cuts, is_verified, labels_from_negativities, negativities,
    make_pptes_testset, weak_labels_from, LabelVector, PptesFamily,
};
use crate::error::{invalid, io_err, Error, Result};
use crate::exec::Execution;
use crate::linalg::{ComplexMatrix, DensityMatrix, StateVector, C64};
use crate::seed::{self, domain, SampleRng};
use crate::stategen::{
    ghz_state, haar_state, kron_separable_mixed, mix_states, random_circuit_state,
    random_weights, traced_mixed_state, w_state, MixtureSpec, RandomizeLocal,
};

pub const MAGIC: &[u8; 4] = b"QENT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 8 + 8;

/// Largest mixture size used by test sets, indexed by qubit count.
pub fn test_d_cap(n: usize) -> usize {
    match n {
        3 => 30,
        4 => 70,
        5 => 190,
        _ => 1 << n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Label every cut by its negativity.
    Negativity,
    /// Drop states that are PPT on a cut expected to be entangled.
    Verified,
    /// PPT cuts take the CU-connectivity label.
    Weakly,
    /// Labels fixed by construction (PPT-entangled families).
    Definition,
}

impl Strategy {
    pub fn code(self) -> u8 {
        match self {
            Strategy::Negativity => 0,
            Strategy::Verified => 1,
            Strategy::Weakly => 2,
            Strategy::Definition => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Strategy::Negativity,
            1 => Strategy::Verified,
            2 => Strategy::Weakly,
            3 => Strategy::Definition,
            _ => return Err(Error::Format(format!("unknown strategy code {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Negativity => "negativity",
            Strategy::Verified => "verified",
            Strategy::Weakly => "weakly",
            Strategy::Definition => "definition",
        }
    }

    /// Parses one of the three training strategies.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "negativity" | "negativity-labeled" => Ok(Strategy::Negativity),
            "verified" => Ok(Strategy::Verified),
            "weakly" | "weakly-labeled" => Ok(Strategy::Weakly),
            other => invalid(format!("unknown labeling strategy '{other}'")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Generator {
    SeparableCircuit = 0,
    EntangledCircuit = 1,
    Ghz = 2,
    W = 3,
    Haar = 4,
    ProductPure = 5,
    SeparableMixture = 6,
    KronMixed = 7,
    CircuitMixture = 8,
    HaarMixture = 9,
    Traced = 10,
    Horodecki = 11,
    Acin = 12,
    Upb = 13,
}

impl Generator {
    pub fn from_code(c: u8) -> Result<Self> {
        use Generator::*;
        const ALL: [Generator; 14] = [
            SeparableCircuit,
            EntangledCircuit,
            Ghz,
            W,
            Haar,
            ProductPure,
            SeparableMixture,
            KronMixed,
            CircuitMixture,
            HaarMixture,
            Traced,
            Horodecki,
            Acin,
            Upb,
        ];
        ALL.get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown generator code {c}")))
    }

    pub fn is_pure(self) -> bool {
        matches!(
            self,
            Generator::SeparableCircuit
                | Generator::EntangledCircuit
                | Generator::Ghz
                | Generator::W
                | Generator::Haar
                | Generator::ProductPure
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub generator: Generator,
    /// Number of pure components (mixtures), 1 for pure states, 0 otherwise.
    pub d: u16,
    /// CU pairs of the generating circuit, see [`crate::stategen::pair_index`].
    pub cu_pairs: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledState {
    pub rho: DensityMatrix,
    pub labels: LabelVector,
    pub neg_values: Vec<f64>,
    pub provenance: Provenance,
}

impl LabeledState {
    pub fn num_qubits(&self) -> usize {
        self.rho.num_qubits()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SetKind {
    Train,
    Validation,
    TestPure,
    TestMixed,
    Pptes(PptesFamily),
    Extension,
    Other,
}

impl SetKind {
    pub fn name(&self) -> String {
        match self {
            SetKind::Train => "train".into(),
            SetKind::Validation => "valid".into(),
            SetKind::TestPure => "test-pure".into(),
            SetKind::TestMixed => "test-mixed".into(),
            SetKind::Pptes(f) => format!("pptes:{}", f.name()),
            SetKind::Extension => "extension".into(),
            SetKind::Other => "other".into(),
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "train" => SetKind::Train,
            "valid" => SetKind::Validation,
            "test-pure" => SetKind::TestPure,
            "test-mixed" => SetKind::TestMixed,
            "extension" => SetKind::Extension,
            other => other
                .strip_prefix("pptes:")
                .and_then(|f| PptesFamily::parse(f).ok())
                .map_or(SetKind::Other, SetKind::Pptes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_qubits: usize,
    pub strategy: Strategy,
    pub master_seed: u64,
    pub kind: SetKind,
    pub scale: f64,
    /// `(section name, count)` in generation order.
    pub sections: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<LabeledState>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_qubits(&self) -> usize {
        self.manifest.num_qubits
    }

    /// Concatenates `other` (same qubit count) onto this set.
    pub fn extend_with(&mut self, other: Dataset) -> Result<()> {
        if other.num_qubits() != self.num_qubits() {
            return invalid("cannot merge datasets with different qubit counts");
        }
        self.manifest.sections.extend(other.manifest.sections);
        self.records.extend(other.records);
        Ok(())
    }
}

/// How a section's samples are generated.
#[derive(Clone, Copy, Debug, PartialEq)]
enum SectionKind {
    PureSeparable { product_fraction: f64 },
    PureEntangled { ghz: f64, w: f64, circuit: f64 },
    SeparableMixture { d_max: usize },
    KronMixed,
    DefinitionMixture { d_max: usize, circuit_fraction: f64 },
    Traced,
}

#[derive(Clone, Debug)]
struct Section {
    name: &'static str,
    full_count: usize,
    kind: SectionKind,
}

/// Fraction of the Eq.-7-style mixtures whose components come from random
/// circuits; the rest use Haar components.
pub const CIRCUIT_MIXTURE_FRACTION: f64 = 0.5;
/// Share of GHZ and of W states inside the pure entangled pool.
pub const GHZ_FRACTION: f64 = 0.1;
pub const W_FRACTION: f64 = 0.1;

fn training_sections(n: usize) -> Vec<Section> {
    let d_max = 1 << n;
    let circuit = (1.0 - GHZ_FRACTION - W_FRACTION) / 2.0;
    vec![
        Section {
            name: "pure_separable",
            full_count: 40_000,
            kind: SectionKind::PureSeparable {
                product_fraction: 0.0,
            },
        },
        Section {
            name: "pure_entangled",
            full_count: 60_000,
            kind: SectionKind::PureEntangled {
                ghz: GHZ_FRACTION,
                w: W_FRACTION,
                circuit,
            },
        },
        Section {
            name: "mixed_separable_circuit",
            full_count: 60_000,
            kind: SectionKind::SeparableMixture { d_max },
        },
        Section {
            name: "mixed_separable_kron",
            full_count: 20_000,
            kind: SectionKind::KronMixed,
        },
        Section {
            name: "mixed_entangled_mixture",
            full_count: 90_000,
            kind: SectionKind::DefinitionMixture {
                d_max,
                circuit_fraction: CIRCUIT_MIXTURE_FRACTION,
            },
        },
        Section {
            name: "mixed_entangled_traced",
            full_count: 60_000,
            kind: SectionKind::Traced,
        },
    ]
}

fn pure_test_sections() -> Vec<Section> {
    vec![
        Section {
            name: "pure_separable",
            full_count: 15_000,
            kind: SectionKind::PureSeparable {
                product_fraction: 0.5,
            },
        },
        Section {
            name: "pure_entangled",
            full_count: 15_000,
            kind: SectionKind::PureEntangled {
                ghz: 0.0,
                w: 0.0,
                circuit: 0.5,
            },
        },
    ]
}

fn mixed_test_sections(n: usize) -> Vec<Section> {
    let d_max = test_d_cap(n);
    vec![
        Section {
            name: "mixed_separable_circuit",
            full_count: 15_000,
            kind: SectionKind::SeparableMixture { d_max },
        },
        Section {
            name: "mixed_separable_kron",
            full_count: 5_000,
            kind: SectionKind::KronMixed,
        },
        Section {
            name: "mixed_entangled_mixture",
            full_count: 10_000,
            kind: SectionKind::DefinitionMixture {
                d_max,
                circuit_fraction: CIRCUIT_MIXTURE_FRACTION,
            },
        },
        Section {
            name: "mixed_entangled_traced",
            full_count: 10_000,
            kind: SectionKind::Traced,
        },
    ]
}

/// `round(full * scale)` per section.
pub fn scaled_count(full: usize, scale: f64) -> usize {
    (full as f64 * scale).round() as usize
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale <= 1.0) {
        return invalid(format!("scale {scale} outside (0, 1]"));
    }
    Ok(())
}

fn check_qubits(n: usize) -> Result<()> {
    if !(2..=5).contains(&n) {
        return invalid(format!("datasets support 2..=5 qubits, got {n}"));
    }
    Ok(())
}

/// Sub-bucket of sample `i` out of `count` for cumulative fractions `cum`.
fn bucket(i: usize, count: usize, cum: &[f64]) -> usize {
    let x = (i as f64 + 0.5) / count as f64;
    cum.iter().position(|&c| x < c).unwrap_or(cum.len())
}

fn pure_record(psi: &StateVector, generator: Generator, cu_pairs: u32) -> LabeledState {
    let rho = psi.to_density();
    let negs = negativities(&rho);
    LabeledState {
        labels: labels_from_negativities(&negs),
        neg_values: negs,
        rho,
        provenance: Provenance {
            generator,
            d: 1,
            cu_pairs,
        },
    }
}

/// Random circuit state that is NPT on at least one bipartition.
pub fn entangled_circuit_state(n: usize, rng: &mut SampleRng) -> (StateVector, u32) {
    loop {
        let (psi, spec) = random_circuit_state(n, true, rng).expect("n >= 2");
        let negs = negativities(&psi.to_density());
        if negs.iter().any(|&v| crate::entanglement::is_npt(v)) {
            return (psi, spec.cu_pair_mask());
        }
    }
}

/// Random circuit state that is NPT on every bipartition, with its CU pairs.
pub fn fully_entangled_circuit_state(n: usize, rng: &mut SampleRng) -> (StateVector, u32) {
    loop {
        let (psi, spec) = random_circuit_state(n, true, rng).expect("n >= 2");
        if negativities(&psi.to_density())
            .iter()
            .all(|&v| crate::entanglement::is_npt(v))
        {
            return (psi, spec.cu_pair_mask());
        }
    }
}

/// Haar state that is NPT on every bipartition.
pub fn fully_entangled_haar_state(n: usize, rng: &mut SampleRng) -> StateVector {
    loop {
        let psi = haar_state(n, rng).expect("n >= 1");
        if negativities(&psi.to_density())
            .iter()
            .all(|&v| crate::entanglement::is_npt(v))
        {
            return psi;
        }
    }
}

pub fn separable_circuit_state(n: usize, rng: &mut SampleRng) -> StateVector {
    random_circuit_state(n, false, rng).expect("n >= 2").0
}

fn product_of_haar_qubits(n: usize, rng: &mut SampleRng) -> StateVector {
    let mut psi = haar_state(1, rng).expect("1 qubit");
    for _ in 1..n {
        psi = haar_state(1, rng).expect("1 qubit").tensor(&psi);
    }
    psi
}

/// Mixture of `d` separable pure states; labeled all-zero by construction.
pub fn separable_mixture(n: usize, d: usize, rng: &mut SampleRng) -> DensityMatrix {
    let comps = (0..d).map(|_| separable_circuit_state(n, rng)).collect();
    mix_states(&MixtureSpec::new(random_weights(d, rng), comps).expect("valid mixture"))
}

fn sample_section(
    kind: SectionKind,
    n: usize,
    strategy: Strategy,
    i: usize,
    count: usize,
    rng: &mut SampleRng,
) -> LabeledState {
    match kind {
        SectionKind::PureSeparable { product_fraction } => {
            if bucket(i, count, &[product_fraction]) == 0 {
                pure_record(&product_of_haar_qubits(n, rng), Generator::ProductPure, 0)
            } else {
                let (psi, _) = random_circuit_state(n, false, rng).expect("n >= 2");
                pure_record(&psi, Generator::SeparableCircuit, 0)
            }
        }
        SectionKind::PureEntangled { ghz, w, circuit } => {
            match bucket(i, count, &[ghz, ghz + w, ghz + w + circuit]) {
                0 => pure_record(
                    &ghz_state(n).expect("n >= 2").randomize_local(rng),
                    Generator::Ghz,
                    0,
                ),
                1 => pure_record(
                    &w_state(n).expect("n >= 2").randomize_local(rng),
                    Generator::W,
                    0,
                ),
                2 => {
                    let (psi, mask) = entangled_circuit_state(n, rng);
                    pure_record(&psi, Generator::EntangledCircuit, mask)
                }
                _ => loop {
                    let psi = haar_state(n, rng).expect("n >= 1");
                    let rec = pure_record(&psi, Generator::Haar, 0);
                    if !rec.labels.is_zero() {
                        break rec;
                    }
                },
            }
        }
        SectionKind::SeparableMixture { d_max } => {
            let d = rng.random_range(2..=d_max);
            let rho = separable_mixture(n, d, rng);
            let negs = negativities(&rho);
            LabeledState {
                rho,
                labels: LabelVector::zeros(n),
                neg_values: negs,
                provenance: Provenance {
                    generator: Generator::SeparableMixture,
                    d: d as u16,
                    cu_pairs: 0,
                },
            }
        }
        SectionKind::KronMixed => {
            let rho = kron_separable_mixed(n, rng).expect("n >= 2");
            let negs = negativities(&rho);
            LabeledState {
                rho,
                labels: LabelVector::zeros(n),
                neg_values: negs,
                provenance: Provenance {
                    generator: Generator::KronMixed,
                    d: 0,
                    cu_pairs: 0,
                },
            }
        }
        SectionKind::DefinitionMixture {
            d_max,
            circuit_fraction,
        } => {
            let from_circuits = bucket(i, count, &[circuit_fraction]) == 0;
            loop {
                if let Some(rec) = definition_mixture(n, d_max, from_circuits, rng) {
                    break rec;
                }
            }
        }
        SectionKind::Traced => loop {
            if let Some(rec) = traced_record(n, strategy, rng) {
                break rec;
            }
        },
    }
}

/// Mixture of fully entangled pure states, kept only when NPT on every cut
/// where some component is entangled. Labels are the negativity labels.
fn definition_mixture(
    n: usize,
    d_max: usize,
    from_circuits: bool,
    rng: &mut SampleRng,
) -> Option<LabeledState> {
    let d = rng.random_range(2..=d_max.max(2));
    let mut intended = vec![0u8; bipartition_count(n)];
    let mut comps = Vec::with_capacity(d);
    let mut mask = 0u32;
    for _ in 0..d {
        let psi = if from_circuits {
            let (psi, m) = fully_entangled_circuit_state(n, rng);
            mask |= m;
            psi
        } else {
            fully_entangled_haar_state(n, rng)
        };
        for (slot, neg) in intended.iter_mut().zip(negativities(&psi.to_density())) {
            *slot |= crate::entanglement::is_npt(neg) as u8;
        }
        comps.push(psi);
    }
    let rho = mix_states(&MixtureSpec::new(random_weights(d, rng), comps).ok()?);
    let negs = negativities(&rho);
    let intended = LabelVector::new(intended).ok()?;
    if intended.is_zero() || !is_verified(&negs, &intended) {
        return None;
    }
    Some(LabeledState {
        labels: labels_from_negativities(&negs),
        neg_values: negs,
        rho,
        provenance: Provenance {
            generator: if from_circuits {
                Generator::CircuitMixture
            } else {
                Generator::HaarMixture
            },
            d: d as u16,
            cu_pairs: mask,
        },
    })
}

/// Reduced state of a larger random circuit, labeled per `strategy`.
fn traced_record(n: usize, strategy: Strategy, rng: &mut SampleRng) -> Option<LabeledState> {
    let extra = rng.random_range(1..=2);
    let (rho, circuit) = traced_mixed_state(n, extra, rng).ok()?;
    let surviving: Vec<usize> = (0..n).collect();
    let negs = negativities(&rho);
    let labels = match strategy {
        Strategy::Negativity | Strategy::Definition => labels_from_negativities(&negs),
        Strategy::Verified => {
            let intended = connected_cuts(&circuit, &surviving).ok()?;
            if intended.is_zero() || !is_verified(&negs, &intended) {
                return None;
            }
            labels_from_negativities(&negs)
        }
        Strategy::Weakly => weak_labels_from(&negs, &circuit, &surviving).ok()?,
    };
    Some(LabeledState {
        rho,
        labels,
        neg_values: negs,
        provenance: Provenance {
            generator: Generator::Traced,
            d: 0,
            cu_pairs: circuit.cu_pair_mask(),
        },
    })
}

fn build_sections(
    n: usize,
    strategy: Strategy,
    scale: f64,
    master_seed: u64,
    domain_tag: u64,
    kind: SetKind,
    sections: Vec<Section>,
    exec: Execution,
) -> Result<Dataset> {
    check_qubits(n)?;
    check_scale(scale)?;
    let mut records = Vec::new();
    let mut counts = Vec::new();
    for (sid, sec) in sections.iter().enumerate() {
        let count = scaled_count(sec.full_count, scale);
        let kind_copy = sec.kind;
        let part = exec.map(count, |i| {
            let mut rng = seed::rng_for(master_seed, &[domain_tag, n as u64, sid as u64, i as u64]);
            sample_section(kind_copy, n, strategy, i, count, &mut rng)
        });
        records.extend(part);
        counts.push((sec.name.to_string(), count));
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            num_qubits: n,
            strategy,
            master_seed,
            kind,
            scale,
            sections: counts,
        },
        records,
    })
}

/// Training corpus: 40k pure separable, 60k pure entangled, 60k + 20k mixed
/// separable, 90k + 60k mixed entangled, each times `scale`.
pub fn build_training_set(
    n: usize,
    strategy: Strategy,
    scale: f64,
    seed: u64,
    exec: Execution,
) -> Result<Dataset> {
    if strategy == Strategy::Definition {
        return invalid("training sets use the negativity, verified or weakly strategy");
    }
    build_sections(
        n,
        strategy,
        scale,
        seed,
        domain::TRAIN,
        SetKind::Train,
        training_sections(n),
        exec,
    )
}

/// Verified-structure set at a tenth of the training size.
pub fn build_validation_set(n: usize, scale: f64, seed: u64, exec: Execution) -> Result<Dataset> {
    check_scale(scale)?;
    let mut ds = build_sections(
        n,
        Strategy::Verified,
        scale * 0.1,
        seed,
        domain::VALID,
        SetKind::Validation,
        training_sections(n),
        exec,
    )?;
    ds.manifest.scale = scale;
    Ok(ds)
}

pub struct TestSets {
    pub pure: Dataset,
    pub mixed: Dataset,
}

/// Pure test set (15k + 15k) and mixed test set (20k separable + 20k NPT-only
/// entangled, mixtures capped at [`test_d_cap`]).
pub fn build_test_sets(n: usize, scale: f64, seed: u64, exec: Execution) -> Result<TestSets> {
    Ok(TestSets {
        pure: build_pure_test_set(n, scale, seed, exec)?,
        mixed: build_mixed_test_set(n, scale, seed, exec)?,
    })
}

pub fn build_pure_test_set(n: usize, scale: f64, seed: u64, exec: Execution) -> Result<Dataset> {
    build_sections(
        n,
        Strategy::Verified,
        scale,
        seed,
        domain::TEST_PURE,
        SetKind::TestPure,
        pure_test_sections(),
        exec,
    )
}

pub fn build_mixed_test_set(n: usize, scale: f64, seed: u64, exec: Execution) -> Result<Dataset> {
    build_sections(
        n,
        Strategy::Verified,
        scale,
        seed,
        domain::TEST_MIXED,
        SetKind::TestMixed,
        mixed_test_sections(n),
        exec,
    )
}

/// Full-scale size of each PPTES test set.
pub const PPTES_FULL_COUNT: usize = 10_000;

pub fn build_pptes_set(
    family: PptesFamily,
    n: usize,
    scale: f64,
    seed: u64,
    exec: Execution,
) -> Result<Dataset> {
    check_scale(scale)?;
    let count = scaled_count(PPTES_FULL_COUNT, scale).max(1);
    let records = make_pptes_testset(family, n, count, seed, exec)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            num_qubits: n,
            strategy: Strategy::Definition,
            master_seed: seed,
            kind: SetKind::Pptes(family),
            scale,
            sections: vec![(family.name().to_string(), count)],
        },
        records,
    })
}

/// Retraining extension: 20k UPB and 30k Acin states at full scale, seeded
/// apart from the PPTES test sets.
pub fn build_pptes_extension(scale: f64, seed: u64, exec: Execution) -> Result<Dataset> {
    check_scale(scale)?;
    let ext_seed = seed::derive(seed, &[domain::PPTES, 0xE47]);
    let upb_n = scaled_count(20_000, scale).max(1);
    let acin_n = scaled_count(30_000, scale).max(1);
    let mut records = make_pptes_testset(PptesFamily::Upb, 3, upb_n, ext_seed, exec)?;
    records.extend(make_pptes_testset(PptesFamily::Acin, 3, acin_n, ext_seed, exec)?);
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            num_qubits: 3,
            strategy: Strategy::Definition,
            master_seed: seed,
            kind: SetKind::Extension,
            scale,
            sections: vec![("upb".into(), upb_n), ("acin".into(), acin_n)],
        },
        records,
    })
}

fn record_len(n: usize) -> usize {
    let k2 = 1usize << (2 * n);
    let m = bipartition_count(n);
    2 * k2 * 8 + m + m * 8 + 1 + 2 + 4
}

/// Serializes to the binary layout described in the module docs.
pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let n = ds.num_qubits();
    check_qubits(n)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.len() * record_len(n) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ds.manifest.format_version.to_le_bytes());
    buf.push(n as u8);
    buf.push(ds.manifest.strategy.code());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&ds.manifest.master_seed.to_le_bytes());
    let m = bipartition_count(n);
    for (idx, rec) in ds.records.iter().enumerate() {
        if rec.num_qubits() != n || rec.labels.len() != m || rec.neg_values.len() != m {
            return invalid(format!("record {idx} does not match the {n}-qubit manifest"));
        }
        let entries = rec.rho.matrix().as_slice();
        for z in entries {
            buf.extend_from_slice(&z.re.to_le_bytes());
        }
        for z in entries {
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        buf.extend_from_slice(rec.labels.as_slice());
        for v in &rec.neg_values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(rec.provenance.generator as u8);
        buf.extend_from_slice(&rec.provenance.d.to_le_bytes());
        buf.extend_from_slice(&rec.provenance.cu_pairs.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Parses the binary layout. The manifest's `kind`, `scale` and `sections`
/// are not part of the binary file and come back as defaults.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u32::from_le_bytes(r.take());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n = r.take::<1>()[0] as usize;
    if !(2..=5).contains(&n) {
        return Err(Error::Format(format!("qubit count {n} unsupported")));
    }
    let strategy = Strategy::from_code(r.take::<1>()[0])?;
    let count = u64::from_le_bytes(r.take());
    let master_seed = u64::from_le_bytes(r.take());

    let body = &bytes[HEADER_LEN..];
    if body.len() < 4 {
        return Err(Error::Truncated("missing checksum trailer".into()));
    }
    let payload_len = body.len() - 4;
    let rec_len = record_len(n);
    if !payload_len.is_multiple_of(rec_len) {
        return Err(Error::Truncated(format!(
            "{payload_len} record bytes is not a whole number of {rec_len}-byte records"
        )));
    }
    let present = (payload_len / rec_len) as u64;
    if present != count {
        return Err(Error::Integrity(format!(
            "header announces {count} records, file holds {present}"
        )));
    }
    let stored = u32::from_le_bytes(body[payload_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..HEADER_LEN + payload_len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let k = 1usize << n;
    let m = bipartition_count(n);
    let mut records = Vec::with_capacity(count as usize);
    for idx in 0..count as usize {
        let re: Vec<f64> = (0..k * k).map(|_| r.f64()).collect();
        let im: Vec<f64> = (0..k * k).map(|_| r.f64()).collect();
        let entries = re.into_iter().zip(im).map(|(a, b)| C64::new(a, b)).collect();
        let bad = |what: String| Error::Integrity(format!("record {idx}: {what}"));
        let rho = ComplexMatrix::from_vec(k, k, entries)
            .and_then(DensityMatrix::new)
            .map_err(|e| bad(e.to_string()))?;
        let labels = LabelVector::new(r.bytes[r.pos..r.pos + m].to_vec()).map_err(|e| bad(e.to_string()))?;
        r.pos += m;
        let neg_values: Vec<f64> = (0..m).map(|_| r.f64()).collect();
        if neg_values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(bad("negative or non-finite negativity".into()));
        }
        let generator = Generator::from_code(r.take::<1>()[0])?;
        let d = u16::from_le_bytes(r.take());
        let cu_pairs = u32::from_le_bytes(r.take());
        records.push(LabeledState {
            rho,
            labels,
            neg_values,
            provenance: Provenance {
                generator,
                d,
                cu_pairs,
            },
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: version,
            num_qubits: n,
            strategy,
            master_seed,
            kind: SetKind::Other,
            scale: 1.0,
            sections: vec![],
        },
        records,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn manifest_text(ds: &Dataset) -> String {
    let m = &ds.manifest;
    let mut out = format!(
        "format_version={}\nnum_qubits={}\nstrategy={}\nset={}\nmaster_seed={}\nscale={:?}\ncount={}\n",
        m.format_version,
        m.num_qubits,
        m.strategy.name(),
        m.kind.name(),
        m.master_seed,
        m.scale,
        ds.len()
    );
    for (name, count) in &m.sections {
        out.push_str(&format!("section.{name}={count}\n"));
    }
    out
}

fn apply_sidecar(ds: &mut Dataset, text: &str) {
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key {
            "set" => ds.manifest.kind = SetKind::parse(value),
            "scale" => {
                if let Ok(s) = value.parse() {
                    ds.manifest.scale = s;
                }
            }
            _ => {
                if let (Some(name), Ok(c)) = (key.strip_prefix("section."), value.parse()) {
                    ds.manifest.sections.push((name.to_string(), c));
                }
            }
        }
    }
}

/// Writes the binary file and its sidecar manifest.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let side = sidecar_path(path);
    fs::write(&side, manifest_text(ds)).map_err(io_err(&side))
}

/// Reads a binary file, picking up the sidecar manifest when present.
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut ds = decode(&bytes)?;
    if let Ok(text) = fs::read_to_string(sidecar_path(path)) {
        apply_sidecar(&mut ds, &text);
    }
    Ok(ds)
}
