mod common;

use common::{gradcheck_case, gradient_check, project, random_values, GRAD_OPS};
use qent_core::seed::rng_for;

#[test]
fn every_op_passes_twenty_random_cases() {
    for op in GRAD_OPS {
        for seed in 0..20 {
            let err = gradcheck_case(op, seed);
            assert!(err < 1e-4, "{op} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn composite_network_gradient() {
    let mut rng = rng_for(11, &[]);
    let inputs = vec![
        (vec![2, 5, 5, 2], random_values(100, 0.0, &mut rng)),
        (vec![3, 3, 2, 4], random_values(72, 0.0, &mut rng)),
        (vec![4], random_values(4, 0.0, &mut rng)),
        (vec![36, 3], random_values(108, 0.0, &mut rng)),
        (vec![3], random_values(3, 0.0, &mut rng)),
    ];
    let err = gradient_check(&inputs, 1e-5, &|g, v| {
        let c = g.conv2d(v[0], v[1], v[2]).unwrap();
        let r = g.relu(c);
        let f = g.reshape(r, vec![2, 36]).unwrap();
        let d = g.dense(f, v[3], v[4]).unwrap();
        let p = g.sigmoid(d);
        g.bce_mean(p, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap()
    });
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn consistency_terms_gradient() {
    let mut rng = rng_for(12, &[]);
    let inputs = vec![
        (vec![3, 3], random_values(9, 0.0, &mut rng)),
        (vec![3, 3], random_values(9, 0.0, &mut rng)),
    ];
    let err = gradient_check(&inputs, 1e-5, &|g, v| {
        let a = g.sigmoid(v[0]);
        let b = g.sigmoid(v[1]);
        let bp = g.gather_cols(b, &[2, 0, 1]).unwrap();
        let d = g.sub(a, bp).unwrap();
        let ad = g.abs(d);
        let m = g.mean(ad);
        let s = g.scale(m, 0.5);
        let t = project(g, a, 3);
        g.add(s, t).unwrap()
    });
    assert!(err < 1e-4, "relative error {err:e}");
}
