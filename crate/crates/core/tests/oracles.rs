mod common;

use approx::assert_abs_diff_eq;

use common::{oracle_eigenvalues, oracle_negativity, random_mixed, side_b_qubits};
use qent_core::entanglement::{
    acin_state, enumerate_bipartitions, horodecki_state, negativities, upb_state, PptesFamily,
    PptesParams,
};
use qent_core::linalg::{hermitian_eigenvalues, StateVector, C64};
use qent_core::seed::rng_for;
use qent_core::stategen::{ghz_state, w_state, RandomizeLocal};

#[test]
fn negativity_matches_dense_oracle() {
    for n in 2..=5 {
        let mut rng = rng_for(21, &[n as u64]);
        for _ in 0..40 {
            let rho = random_mixed(n, &mut rng);
            for (j, neg) in negativities(&rho).iter().enumerate() {
                let want = oracle_negativity(&rho, &side_b_qubits(n, j + 1));
                assert_abs_diff_eq!(*neg, want, epsilon = 1e-9);
            }
        }
    }
}

#[test]
fn eigenvalues_match_oracle_for_general_hermitian() {
    let mut rng = rng_for(22, &[]);
    for _ in 0..50 {
        let rho = random_mixed(3, &mut rng);
        let ours = hermitian_eigenvalues(rho.matrix()).unwrap();
        for (a, b) in ours.iter().zip(oracle_eigenvalues(&rho)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-11);
        }
    }
}

#[test]
fn ghz_and_bell_are_one_half_everywhere() {
    for n in 2..=6 {
        let rho = ghz_state(n).unwrap().to_density();
        for v in negativities(&rho) {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-9);
        }
    }
}

#[test]
fn w_state_single_qubit_cuts() {
    // Schmidt weights 2/3 and 1/3 give sqrt(2/9).
    let rho = w_state(3).unwrap().to_density();
    for v in negativities(&rho) {
        assert_abs_diff_eq!(v, 2f64.sqrt() / 3.0, epsilon = 1e-9);
    }
}

#[test]
fn pure_state_negativity_from_schmidt_weights() {
    // For a pure state the negative eigenvalues are -sqrt(l_i l_j), i < j.
    let mut rng = rng_for(23, &[]);
    for _ in 0..20 {
        let psi = qent_core::stategen::haar_state(3, &mut rng).unwrap();
        let rho = psi.to_density();
        let reduced = qent_core::linalg::partial_trace(&rho, &[1, 2]).unwrap();
        let l = reduced.eigenvalues();
        let want = (l[0].max(0.0) * l[1].max(0.0)).sqrt();
        // bipartition index 3 puts qubits 1 and 2 on side B
        assert_abs_diff_eq!(negativities(&rho)[2], want, epsilon = 1e-9);
    }
}

#[test]
fn maximally_mixed_and_products_are_ppt() {
    let k = 16;
    let data = (0..k * k)
        .map(|i| if i % (k + 1) == 0 { C64::new(1.0 / k as f64, 0.0) } else { C64::new(0.0, 0.0) })
        .collect();
    let rho = qent_core::linalg::DensityMatrix::new(
        qent_core::linalg::ComplexMatrix::from_vec(k, k, data).unwrap(),
    )
    .unwrap();
    assert!(negativities(&rho).iter().all(|&v| v == 0.0));
    let prod = StateVector::basis(4, 5).randomize_local(&mut rng_for(24, &[]));
    assert!(negativities(&prod.to_density()).iter().all(|&v| v == 0.0));
}

#[test]
fn pptes_families_are_ppt_on_their_cuts_by_oracle() {
    let mut rng = rng_for(25, &[]);
    for family in [PptesFamily::Horodecki, PptesFamily::Acin, PptesFamily::Upb] {
        let n = 3;
        for _ in 0..20 {
            let rho = PptesParams::random(family, &mut rng).state(n).unwrap();
            for bp in family.ppt_cuts(n) {
                let side: Vec<usize> = (0..n).filter(|&q| bp.in_b(q)).collect();
                assert!(oracle_negativity(&rho, &side) < 1e-9, "{}", family.name());
            }
        }
    }
    assert!(negativities(&upb_state()).iter().all(|&v| v < 1e-9));
    assert!(negativities(&acin_state(2.0, 0.7, 1.3).unwrap()).iter().all(|&v| v < 1e-9));
    let h = horodecki_state(0.3, 4).unwrap();
    assert_eq!(enumerate_bipartitions(4).unwrap().len(), negativities(&h).len());
}
