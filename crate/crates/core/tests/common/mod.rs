#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use qent_core::autograd::{Graph, Var};
use qent_core::linalg::{ComplexMatrix, DensityMatrix};
use qent_core::seed::SampleRng;
use qent_core::stategen::{
    haar_state, kron_separable_mixed, mix_states, random_weights, traced_mixed_state, MixtureSpec,
    RandomizeLocal,
};

/// Partial transpose built qubit by qubit, then diagonalized by nalgebra.
pub fn oracle_negativity(rho: &DensityMatrix, side_b: &[usize]) -> f64 {
    let k = rho.dim();
    let m = rho.matrix();
    let swap = |r: usize, c: usize| {
        let (mut r2, mut c2) = (r, c);
        for &q in side_b {
            let (br, bc) = ((r >> q) & 1, (c >> q) & 1);
            r2 = (r2 & !(1 << q)) | (bc << q);
            c2 = (c2 & !(1 << q)) | (br << q);
        }
        (r2, c2)
    };
    let pt = DMatrix::<Complex64>::from_fn(k, k, |r, c| {
        let (r2, c2) = swap(r, c);
        m[(r2, c2)]
    });
    pt.symmetric_eigenvalues()
        .iter()
        .filter(|&&l| l < -1e-7)
        .map(|l| -l)
        .sum()
}

pub fn oracle_eigenvalues(rho: &DensityMatrix) -> Vec<f64> {
    let k = rho.dim();
    let m = rho.matrix();
    let a = DMatrix::<Complex64>::from_fn(k, k, |r, c| m[(r, c)]);
    let mut v: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Swaps row and column bits on the qubits in `mask`.
pub fn transpose_side(m: &ComplexMatrix, mask: usize) -> ComplexMatrix {
    let k = m.rows();
    let mut out = ComplexMatrix::zeros(k, k);
    for r in 0..k {
        for c in 0..k {
            let (r2, c2) = ((r & !mask) | (c & mask), (c & !mask) | (r & mask));
            out[(r2, c2)] = m[(r, c)];
        }
    }
    out
}

/// Qubits on side B of canonical bipartition `index`.
pub fn side_b_qubits(n: usize, index: usize) -> Vec<usize> {
    let mask = index << 1;
    (0..n).filter(|&q| mask >> q & 1 == 1).collect()
}

/// A mixed state from one of three generators, locally randomized.
pub fn random_mixed(n: usize, rng: &mut SampleRng) -> DensityMatrix {
    let rho = match rng.random_range(0..3) {
        0 => traced_mixed_state(n, rng.random_range(1..=2), rng).unwrap().0,
        1 => {
            let d = rng.random_range(2..=6);
            let comps = (0..d).map(|_| haar_state(n, rng).unwrap()).collect();
            mix_states(&MixtureSpec::new(random_weights(d, rng), comps).unwrap())
        }
        _ => kron_separable_mixed(n, rng).unwrap(),
    };
    rho.randomize_local(rng)
}

/// Values uniform in `[-1, 1]` kept at least `gap` away from zero.
pub fn random_values(len: usize, gap: f64, rng: &mut SampleRng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Largest relative error between the analytic gradient of `build` and
/// central differences with step `eps`, over every input tensor.
///
/// `build` receives the graph and the leaf handles and returns a scalar loss.
pub fn gradient_check(
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[(Vec<usize>, Vec<f64>)]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|(s, v)| g.variable(s.clone(), v.clone()).unwrap())
            .collect();
        let loss = build(&mut g, &vars);
        (g, vars, loss)
    };
    let (mut g, vars, loss) = eval(inputs);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (t, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var);
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[t].1[i] += eps;
            let mut minus = inputs.to_vec();
            minus[t].1[i] -= eps;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            numeric[i] = (gp.value(lp)[0] - gm.value(lm)[0]) / (2.0 * eps);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let norm_n: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / (norm_a + norm_n).max(1e-12));
    }
    worst
}

/// Weighted sum `sum(w * x)` with fixed random weights, turning any tensor
/// into a scalar with a non-degenerate gradient.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = qent_core::seed::rng_for(seed, &[0x9e]);
    let len = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = g
        .constant(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let prod = g.mul(x, w).unwrap();
    g.sum(prod)
}

pub const GRAD_OPS: [&str; 5] = ["conv2d", "dense", "relu", "sigmoid", "bce_mean"];

/// Relative gradient error of `op` on one random configuration.
pub fn gradcheck_case(op: &str, seed: u64) -> f64 {
    let mut rng = qent_core::seed::rng_for(seed, &[op.len() as u64, 0x6772]);
    let eps = 1e-5;
    match op {
        "conv2d" => {
            let k = rng.random_range(1..=3);
            let (b, c, o) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (rng.random_range(k..=5), rng.random_range(k..=5));
            let inputs = vec![
                (vec![b, h, w, c], random_values(b * h * w * c, 0.0, &mut rng)),
                (vec![k, k, c, o], random_values(k * k * c * o, 0.0, &mut rng)),
                (vec![o], random_values(o, 0.0, &mut rng)),
            ];
            gradient_check(&inputs, eps, &|g, v| {
                let y = g.conv2d(v[0], v[1], v[2]).unwrap();
                project(g, y, seed)
            })
        }
        "dense" => {
            let (b, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
            let inputs = vec![
                (vec![b, i], random_values(b * i, 0.0, &mut rng)),
                (vec![i, o], random_values(i * o, 0.0, &mut rng)),
                (vec![o], random_values(o, 0.0, &mut rng)),
            ];
            gradient_check(&inputs, eps, &|g, v| {
                let y = g.dense(v[0], v[1], v[2]).unwrap();
                project(g, y, seed)
            })
        }
        "relu" => {
            let len = rng.random_range(1..=24);
            let inputs = vec![(vec![len], random_values(len, 1e-3, &mut rng))];
            gradient_check(&inputs, eps, &|g, v| {
                let y = g.relu(v[0]);
                project(g, y, seed)
            })
        }
        "sigmoid" => {
            let len = rng.random_range(1..=24);
            let vals = random_values(len, 0.0, &mut rng).iter().map(|x| 3.0 * x).collect();
            gradient_check(&[(vec![len], vals)], eps, &|g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, seed)
            })
        }
        "bce_mean" => {
            let len = rng.random_range(1..=24);
            let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..0.95)).collect();
            let q: Vec<f64> = (0..len).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
            gradient_check(&[(vec![len], p)], eps, &|g, v| g.bce_mean(v[0], &q).unwrap())
        }
        other => panic!("no gradient case for {other}"),
    }
}
