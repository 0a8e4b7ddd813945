mod common;

use proptest::prelude::*;

use qent_core::autograd::Graph;
use qent_core::dataset::{self, Strategy as Labeling};
use qent_core::entanglement::{
    enumerate_bipartitions, negativities, negativity, partial_transpose, permuted_bipartition_index,
    Bipartition,
};
use qent_core::harness::{combined_decisions, decide, score_decisions, threshold_all};
use qent_core::linalg::{
    hermitian_eigenvalues, kron, partial_trace, permute_qubits, QubitPermutation, HERMITIAN_TOL,
};
use qent_core::model::{build_cnn, siamese_loss, ArchConfig};
use qent_core::seed::rng_for;
use qent_core::stategen::{random_circuit_state, LocalUnitaries};
use qent_core::Execution;

use common::{random_mixed, transpose_side};

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partial_transpose_is_an_involution(seed in any::<u64>(), n in 2usize..=4) {
        let mut rng = rng_for(seed, &[]);
        let rho = random_mixed(n, &mut rng);
        for bp in enumerate_bipartitions(n).unwrap() {
            let once = partial_transpose(&rho, &bp);
            prop_assert!(once.hermitian_defect() < HERMITIAN_TOL);
            prop_assert!((once.trace() - rho.trace()).norm() < 1e-12);
            let twice = transpose_side(&once, bp.side_b_mask());
            prop_assert!(twice.max_abs_diff(rho.matrix()) < 1e-15);
            prop_assert!(transpose_side(rho.matrix(), bp.side_b_mask()).max_abs_diff(&once) < 1e-15);
        }
    }

    #[test]
    fn eigenvalues_sum_to_trace_and_match_oracle(seed in any::<u64>(), n in 1usize..=4) {
        let mut rng = rng_for(seed, &[1]);
        let rho = if n == 1 {
            qent_core::stategen::random_mixed_qubit(&mut rng)
        } else {
            random_mixed(n, &mut rng)
        };
        let ev = hermitian_eigenvalues(rho.matrix()).unwrap();
        prop_assert!((ev.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        for (a, b) in ev.iter().zip(common::oracle_eigenvalues(&rho)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn negativity_is_invariant_under_local_unitaries(seed in any::<u64>(), n in 2usize..=4) {
        let mut rng = rng_for(seed, &[2]);
        let rho = random_mixed(n, &mut rng);
        let rotated = LocalUnitaries::random(n, &mut rng).apply_density(&rho);
        for (a, b) in negativities(&rho).iter().zip(negativities(&rotated)) {
            prop_assert!((a - b).abs() < 1e-8);
            prop_assert!(*a >= 0.0);
        }
    }

    #[test]
    fn permutation_remaps_negativity(seed in any::<u64>(), map in perm_strategy(4)) {
        let mut rng = rng_for(seed, &[3]);
        let rho = random_mixed(4, &mut rng);
        let perm = QubitPermutation::new(map).unwrap();
        let moved = permute_qubits(&rho, &perm).unwrap();
        for j in 1..=7 {
            let j2 = permuted_bipartition_index(j, &perm, 4).unwrap();
            let a = negativity(&rho, &Bipartition::from_index(4, j).unwrap());
            let b = negativity(&moved, &Bipartition::from_index(4, j2).unwrap());
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn permutation_composition(a in perm_strategy(5), b in perm_strategy(5), mask in 0usize..32) {
        let pa = QubitPermutation::new(a).unwrap();
        let pb = QubitPermutation::new(b).unwrap();
        let both = pa.compose(&pb);
        prop_assert_eq!(both.apply_to_mask(mask), pa.apply_to_mask(pb.apply_to_mask(mask)));
        prop_assert_eq!(pa.compose(&pa.inverse()), QubitPermutation::identity(5));
    }

    #[test]
    fn partial_trace_keeps_trace_and_psd(seed in any::<u64>(), n in 2usize..=4, which in 0usize..4) {
        let mut rng = rng_for(seed, &[4]);
        let rho = random_mixed(n, &mut rng);
        let traced = [which % n];
        let red = partial_trace(&rho, &traced).unwrap();
        prop_assert!((red.trace().re - 1.0).abs() < 1e-10);
        prop_assert!(red.eigenvalues()[0] > -1e-9);
    }

    #[test]
    fn kron_of_densities_is_a_density(seed in any::<u64>()) {
        let mut rng = rng_for(seed, &[5]);
        let a = random_mixed(2, &mut rng);
        let b = qent_core::stategen::random_mixed_qubit(&mut rng);
        let k = kron(a.matrix(), b.matrix());
        prop_assert_eq!(k.rows(), 8);
        prop_assert!(qent_core::linalg::DensityMatrix::new(k).is_ok());
    }

    #[test]
    fn separable_circuits_are_ppt(seed in any::<u64>(), n in 2usize..=4) {
        let mut rng = rng_for(seed, &[6]);
        let (psi, _) = random_circuit_state(n, false, &mut rng).unwrap();
        prop_assert!((psi.norm_sqr() - 1.0).abs() < 1e-12);
        prop_assert!(negativities(&psi.to_density()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generators_are_seed_deterministic(seed in any::<u64>()) {
        let a = random_mixed(3, &mut rng_for(seed, &[7]));
        let b = random_mixed(3, &mut rng_for(seed, &[7]));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gradient_paths_add(vals in proptest::collection::vec(-3.0f64..3.0, 1..12)) {
        let mut g = Graph::new();
        let x = g.variable(vec![vals.len()], vals.clone()).unwrap();
        let s = g.sigmoid(x);
        let r = g.relu(x);
        let y = g.add(s, r).unwrap();
        let total = g.sum(y);
        g.backward(total).unwrap();
        let grad = g.grad(x);
        for (v, gr) in vals.iter().zip(grad) {
            let sg = 1.0 / (1.0 + (-v).exp());
            let expect = sg * (1.0 - sg) + if *v > 0.0 { 1.0 } else { 0.0 };
            prop_assert!((gr - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_matches_recount(seed in any::<u64>(), probs in proptest::collection::vec(0.0f64..1.0, 60)) {
        let ds = dataset::build_pptes_set(qent_core::entanglement::PptesFamily::Acin, 3, 0.002, seed, Execution::Sequential).unwrap();
        let rows: Vec<Vec<f64>> = probs.chunks(3).take(ds.len()).map(<[f64]>::to_vec).collect();
        let recs = &ds.records[..rows.len()];
        let rep = score_decisions("x", &threshold_all(&rows), recs, &[true; 3]);
        let mut correct = 0usize;
        for (p, r) in rows.iter().zip(recs) {
            for j in 0..3 {
                correct += (decide(p[j]) == r.labels.as_slice()[j]) as usize;
            }
        }
        prop_assert!((rep.accuracy - correct as f64 / (3 * rows.len()) as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&rep.conv_neg));
        for c in &rep.confusion {
            prop_assert_eq!(c.total(), rows.len());
        }
    }

    #[test]
    fn combined_never_hurts_on_npt_labels(probs in proptest::collection::vec(0.0f64..1.0, 7), negs in proptest::collection::vec(prop_oneof![Just(0.0), 0.001f64..0.5], 7)) {
        let labels: Vec<u8> = negs.iter().map(|&v| (v > 1e-7) as u8).collect();
        let net: Vec<u8> = probs.iter().map(|&p| decide(p)).collect();
        let comb = combined_decisions(&probs, &negs);
        let hits = |d: &[u8]| d.iter().zip(&labels).filter(|(a, b)| a == b).count();
        prop_assert!(hits(&comb) >= hits(&net));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_round_trip_and_corruption(seed in any::<u64>(), flip in any::<prop::sample::Index>()) {
        let ds = dataset::build_training_set(2, Labeling::Weakly, 0.0003, seed, Execution::Sequential).unwrap();
        let bytes = dataset::encode(&ds).unwrap();
        let back = dataset::decode(&bytes).unwrap();
        prop_assert_eq!(&back.records, &ds.records);
        prop_assert_eq!(dataset::encode(&back).unwrap(), bytes.clone());
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x10;
        prop_assert!(dataset::decode(&bad).is_err());
    }

    #[test]
    fn siamese_terms_are_nonnegative(seed in any::<u64>()) {
        let ds = dataset::build_pptes_set(qent_core::entanglement::PptesFamily::Upb, 3, 0.001, seed, Execution::Sequential).unwrap();
        let model = build_cnn(&ArchConfig::new(3), seed).unwrap();
        let batch: Vec<_> = ds.records.iter().take(5).collect();
        let parts = siamese_loss(&model, &batch, 0.5, 0.5, &mut rng_for(seed, &[8])).unwrap();
        prop_assert!(parts.locc >= 0.0 && parts.perm >= 0.0);
        prop_assert!(parts.total >= parts.bce);
    }
}
