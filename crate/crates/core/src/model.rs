//! Convolutional classifier over density matrices and its Siamese loss.
//!
//! A model maps a `K×K` density matrix (`K = 2^N`) split into real and
//! imaginary channels to `m = 2^(N-1) - 1` probabilities, one per bipartition.
//! Loss evaluation splits each batch into fixed-size chunks, builds one graph
//! per chunk and sums the chunk gradients in chunk order, so results do not
//! depend on the number of worker threads.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{self, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::dataset::LabeledState;
use crate::entanglement::{bipartition_count, permuted_label_positions};
use crate::error::{invalid, io_err, Error, Result};
use crate::exec::Execution;
use crate::linalg::{permute_qubits, DensityMatrix, QubitPermutation};
use crate::seed::{self, domain};
use crate::stategen::LocalUnitaries;

/// Samples per graph instance during training.
pub const TRAIN_CHUNK: usize = 16;
/// Samples per graph instance during inference.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub n_qubits: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub r1: f64,
    pub fc_layers: usize,
    pub fc_units: usize,
}

impl ArchConfig {
    pub fn new(n_qubits: usize) -> Self {
        Self {
            n_qubits,
            conv_layers: 3,
            kernel: 2,
            r1: 16.0,
            fc_layers: 5,
            fc_units: 128,
        }
    }

    /// Output channels of each conv layer: `c_i = floor(r_i c_{i-1})`,
    /// `r_i = sqrt(r_{i-1})`, `c_0 = 2`.
    pub fn channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.conv_layers);
        let (mut r, mut c) = (self.r1, 2usize);
        for i in 0..self.conv_layers {
            if i > 0 {
                r = r.sqrt();
            }
            c = (r * c as f64).floor() as usize;
            out.push(c);
        }
        out
    }

    pub fn input_size(&self) -> usize {
        1 << self.n_qubits
    }

    /// Spatial side after the conv stack, or `None` on underflow.
    pub fn final_spatial(&self) -> Option<usize> {
        let shrink = self.conv_layers.checked_mul(self.kernel.checked_sub(1)?)?;
        self.input_size().checked_sub(shrink).filter(|&s| s >= 1)
    }

    pub fn flatten_size(&self) -> usize {
        let s = self.final_spatial().unwrap_or(0);
        let c = self.channels().last().copied().unwrap_or(2);
        s * s * c
    }

    pub fn outputs(&self) -> usize {
        bipartition_count(self.n_qubits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.n_qubits) {
            return invalid(format!("model supports 2..=5 qubits, got {}", self.n_qubits));
        }
        if self.kernel == 0 || self.final_spatial().is_none() {
            return invalid(format!(
                "{} conv layers with kernel {} underflow a {}x{} input",
                self.conv_layers,
                self.kernel,
                self.input_size(),
                self.input_size()
            ));
        }
        if !(self.r1 >= 1.0) || self.channels().contains(&0) {
            return invalid(format!("ratio r1 = {} gives an empty layer", self.r1));
        }
        if self.fc_units == 0 {
            return invalid("fc_units must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_qubits={}\nconv_layers={}\nkernel={}\nr1={:?}\nfc_layers={}\nfc_units={}\n",
            self.n_qubits, self.conv_layers, self.kernel, self.r1, self.fc_layers, self.fc_units
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::new(0);
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad architecture line '{line}'")))?;
            let bad = |_| Error::Format(format!("bad value for {k}: '{v}'"));
            match k.trim() {
                "n_qubits" => cfg.n_qubits = v.trim().parse().map_err(bad)?,
                "conv_layers" => cfg.conv_layers = v.trim().parse().map_err(bad)?,
                "kernel" => cfg.kernel = v.trim().parse().map_err(bad)?,
                "fc_layers" => cfg.fc_layers = v.trim().parse().map_err(bad)?,
                "fc_units" => cfg.fc_units = v.trim().parse().map_err(bad)?,
                "r1" => {
                    cfg.r1 = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("bad value for r1: '{v}'")))?
                }
                _ => continue,
            }
            seen += 1;
        }
        if seen < 6 {
            return Err(Error::Format("architecture description is incomplete".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cnn,
    Siamese,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "siamese" => Ok(ModelKind::Siamese),
            _ => invalid(format!("unknown model kind '{s}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Siamese => "siamese",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cnn,
            lambda1: 0.5,
            lambda2: 0.5,
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return invalid("lambda1 and lambda2 must be non-negative");
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.adam.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "model={}\nlambda1={:?}\nlambda2={:?}\nepochs={}\nbatch_size={}\nlr={:?}\nbeta1={:?}\nbeta2={:?}\nadam_eps={:?}\nseed={}\ndeterministic={}\n",
            self.kind.name(),
            self.lambda1,
            self.lambda2,
            self.epochs,
            self.batch_size,
            self.adam.lr,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
            self.seed,
            self.deterministic
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchConfig,
    params: ParamStore,
}

/// Creates the network with weights uniform in `±sqrt(1/fan_in)`.
pub fn build_cnn(arch: &ArchConfig, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = seed::rng_for(seed, &[domain::INIT]);
    let mut params = ParamStore::new();
    let k = arch.kernel;
    let mut c_in = 2;
    for c_out in arch.channels() {
        let fan_in = k * k * c_in;
        params.push_uniform(vec![k, k, c_in, c_out], fan_in, &mut rng);
        params.push_uniform(vec![c_out], fan_in, &mut rng);
        c_in = c_out;
    }
    let mut width = arch.flatten_size();
    for _ in 0..arch.fc_layers {
        params.push_uniform(vec![width, arch.fc_units], width, &mut rng);
        params.push_uniform(vec![arch.fc_units], width, &mut rng);
        width = arch.fc_units;
    }
    params.push_uniform(vec![width, arch.outputs()], width, &mut rng);
    params.push_uniform(vec![arch.outputs()], width, &mut rng);
    Ok(Model {
        arch: arch.clone(),
        params,
    })
}

impl Model {
    pub fn from_parts(arch: ArchConfig, params: ParamStore) -> Result<Self> {
        let reference = build_cnn(&arch, 0)?;
        let same = reference.params.len() == params.len()
            && reference
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Integrity("checkpoint tensors do not match the architecture".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_qubits(&self) -> usize {
        self.arch.n_qubits
    }

    pub fn outputs(&self) -> usize {
        self.arch.outputs()
    }

    /// Forward pass of a `[B, K, K, 2]` input through parameter handles `p`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let mut i = 0;
        for _ in 0..self.arch.conv_layers {
            h = g.conv2d(h, p[i], p[i + 1])?;
            h = g.relu(h);
            i += 2;
        }
        let batch = g.shape(h)[0];
        h = g.reshape(h, vec![batch, self.arch.flatten_size()])?;
        for _ in 0..self.arch.fc_layers {
            h = g.dense(h, p[i], p[i + 1])?;
            h = g.relu(h);
            i += 2;
        }
        h = g.dense(h, p[i], p[i + 1])?;
        Ok(g.sigmoid(h))
    }

    fn check_input(&self, rho: &DensityMatrix) -> Result<()> {
        if rho.num_qubits() != self.num_qubits() {
            return invalid(format!(
                "model expects {} qubits, got a {}-qubit state",
                self.num_qubits(),
                rho.num_qubits()
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        autograd::save_params(&self.params, path)?;
        let side = arch_path(path);
        fs::write(&side, self.arch.to_text()).map_err(io_err(&side))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = arch_path(path);
        let arch = ArchConfig::from_text(&fs::read_to_string(&side).map_err(io_err(&side))?)?;
        Model::from_parts(arch, autograd::load_params(path)?)
    }
}

pub fn arch_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".arch");
    PathBuf::from(s)
}

/// Channels-last `[1, K, K, 2]`: channel 0 real part, channel 1 imaginary.
pub fn encode_input(rho: &DensityMatrix) -> Tensor {
    let k = rho.dim();
    let mut data = Vec::with_capacity(2 * k * k);
    for z in rho.matrix().as_slice() {
        data.push(z.re);
        data.push(z.im);
    }
    Tensor::new(vec![1, k, k, 2], data).expect("2*K*K values")
}

/// Inverse of [`encode_input`] on the raw entries.
pub fn decode_input(t: &Tensor) -> Result<crate::linalg::ComplexMatrix> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != s[2] || s[3] != 2 {
        return invalid(format!("expected [1, K, K, 2], got {s:?}"));
    }
    let entries = t
        .data()
        .chunks_exact(2)
        .map(|c| crate::linalg::C64::new(c[0], c[1]))
        .collect();
    crate::linalg::ComplexMatrix::from_vec(s[1], s[1], entries)
}

fn encode_batch(g: &mut Graph, rhos: &[&DensityMatrix]) -> Result<Var> {
    let k = rhos[0].dim();
    let mut data = Vec::with_capacity(rhos.len() * 2 * k * k);
    for rho in rhos {
        for z in rho.matrix().as_slice() {
            data.push(z.re);
            data.push(z.im);
        }
    }
    g.constant(vec![rhos.len(), k, k, 2], data)
}

/// Probabilities for every state, row per state.
pub fn predict_batch(model: &Model, rhos: &[&DensityMatrix], exec: Execution) -> Result<Vec<Vec<f64>>> {
    for rho in rhos {
        model.check_input(rho)?;
    }
    let chunks: Vec<&[&DensityMatrix]> = rhos.chunks(EVAL_CHUNK).collect();
    let parts = exec.map_slice(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = g.params(&model.params);
        let x = encode_batch(&mut g, chunk)?;
        let y = model.forward(&mut g, &p, x)?;
        Ok(g.value(y).chunks_exact(model.outputs()).map(<[f64]>::to_vec).collect())
    });
    let mut out = Vec::with_capacity(rhos.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub fn predict(model: &Model, rho: &DensityMatrix) -> Result<Vec<f64>> {
    Ok(predict_batch(model, &[rho], Execution::Sequential)?.remove(0))
}

/// Transformations shared by a whole batch in the Siamese loss.
#[derive(Clone, Debug)]
pub struct Augmentation {
    pub locc: LocalUnitaries,
    pub perm: QubitPermutation,
}

impl Augmentation {
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let locc = LocalUnitaries::random(n, rng);
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Self {
            locc,
            perm: QubitPermutation::new(map).expect("shuffled identity"),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            locc: LocalUnitaries::identity(n),
            perm: QubitPermutation::identity(n),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub locc: f64,
    pub perm: f64,
}

pub enum Objective<'a> {
    Cnn,
    Siamese {
        lambda1: f64,
        lambda2: f64,
        aug: &'a Augmentation,
    },
}

fn chunk_loss(
    model: &Model,
    chunk: &[&LabeledState],
    batch_len: usize,
    objective: &Objective<'_>,
    want_grads: bool,
) -> Result<(LossParts, Option<Vec<Vec<f64>>>)> {
    let mut g = Graph::new();
    let p = g.params(&model.params);
    let rhos: Vec<&DensityMatrix> = chunk.iter().map(|s| &s.rho).collect();
    for rho in &rhos {
        model.check_input(rho)?;
    }
    let targets: Vec<f64> = chunk
        .iter()
        .flat_map(|s| s.labels.as_slice().iter().map(|&l| f64::from(l)))
        .collect();
    let share = chunk.len() as f64 / batch_len as f64;
    let x = encode_batch(&mut g, &rhos)?;
    let y = model.forward(&mut g, &p, x)?;
    let bce = g.bce_mean(y, &targets)?;
    let mut total = g.scale(bce, share);
    let mut parts = LossParts {
        bce: g.value(bce)[0] * share,
        ..LossParts::default()
    };
    if let Objective::Siamese { lambda1, lambda2, aug } = *objective {
        let rotated: Vec<DensityMatrix> = rhos.iter().map(|r| aug.locc.apply_density(r)).collect();
        let xr = encode_batch(&mut g, &rotated.iter().collect::<Vec<_>>())?;
        let yr = model.forward(&mut g, &p, xr)?;
        let d = g.sub(y, yr)?;
        let d = g.abs(d);
        let m1 = g.mean(d);
        parts.locc = g.value(m1)[0] * share;
        let t1 = g.scale(m1, lambda1 * share);

        let permuted = rhos
            .iter()
            .map(|r| permute_qubits(r, &aug.perm))
            .collect::<Result<Vec<_>>>()?;
        let xp = encode_batch(&mut g, &permuted.iter().collect::<Vec<_>>())?;
        let yp = model.forward(&mut g, &p, xp)?;
        let yp = g.gather_cols(yp, &permuted_label_positions(&aug.perm))?;
        let d = g.sub(y, yp)?;
        let d = g.abs(d);
        let m2 = g.mean(d);
        parts.perm = g.value(m2)[0] * share;
        let t2 = g.scale(m2, lambda2 * share);

        total = g.add(total, t1)?;
        total = g.add(total, t2)?;
    }
    parts.total = g.value(total)[0];
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", parts.total)));
    }
    if !want_grads {
        return Ok((parts, None));
    }
    g.backward(total)?;
    Ok((parts, Some(g.param_grads(&model.params))))
}

/// Batch loss and, optionally, its parameter gradients. Chunk contributions
/// are summed in chunk order.
pub fn batch_loss(
    model: &Model,
    batch: &[&LabeledState],
    objective: &Objective<'_>,
    exec: Execution,
    want_grads: bool,
) -> Result<(LossParts, Option<Vec<Vec<f64>>>)> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let chunks: Vec<&[&LabeledState]> = batch.chunks(TRAIN_CHUNK).collect();
    let results = exec.map_slice(&chunks, |c| chunk_loss(model, c, batch.len(), objective, want_grads));
    let mut parts = LossParts::default();
    let mut grads = want_grads.then(|| model.params.zero_grads());
    for r in results {
        let (lp, g) = r?;
        parts.total += lp.total;
        parts.bce += lp.bce;
        parts.locc += lp.locc;
        parts.perm += lp.perm;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            for (a, gi) in acc.iter_mut().zip(g) {
                for (x, y) in a.iter_mut().zip(gi) {
                    *x += y;
                }
            }
        }
    }
    Ok((parts, grads))
}

/// Mean binary cross entropy of the network over `batch`.
pub fn cnn_loss(model: &Model, batch: &[&LabeledState]) -> Result<f64> {
    Ok(batch_loss(model, batch, &Objective::Cnn, Execution::default(), false)?.0.total)
}

/// Cross entropy plus `lambda1` times the mean local-unitary disagreement and
/// `lambda2` times the mean permutation disagreement, with one random
/// transformation pair drawn from `rng` for the whole batch.
pub fn siamese_loss<R: Rng + ?Sized>(
    model: &Model,
    batch: &[&LabeledState],
    lambda1: f64,
    lambda2: f64,
    rng: &mut R,
) -> Result<LossParts> {
    let aug = Augmentation::random(model.num_qubits(), rng);
    let obj = Objective::Siamese {
        lambda1,
        lambda2,
        aug: &aug,
    };
    Ok(batch_loss(model, batch, &obj, Execution::default(), false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ComplexMatrix, C64};

    #[test]
    fn default_channels_and_sizes() {
        let a = ArchConfig::new(3);
        assert_eq!(a.channels(), vec![32, 128, 256]);
        assert_eq!(a.final_spatial(), Some(5));
        assert_eq!(a.flatten_size(), 6400);
        for (n, m) in [(3, 3), (4, 7), (5, 15)] {
            assert_eq!(ArchConfig::new(n).outputs(), m);
        }
        let mut b = a.clone();
        b.r1 = 9.0;
        assert_eq!(b.channels(), vec![18, 54, 93]);
    }

    #[test]
    fn underflow_rejected() {
        let mut a = ArchConfig::new(2);
        a.kernel = 3;
        assert!(build_cnn(&a, 0).is_err());
        a.kernel = 2;
        a.conv_layers = 4;
        assert!(build_cnn(&a, 0).is_err());
        a.conv_layers = 3;
        assert!(build_cnn(&a, 0).is_ok());
    }

    #[test]
    fn arch_text_round_trip() {
        let mut a = ArchConfig::new(4);
        a.kernel = 3;
        a.conv_layers = 2;
        assert_eq!(ArchConfig::from_text(&a.to_text()).unwrap(), a);
        assert!(ArchConfig::from_text("n_qubits=3\n").is_err());
    }

    #[test]
    fn encoding_layout() {
        let m = ComplexMatrix::from_vec(
            2,
            2,
            vec![C64::new(0.7, 0.0), C64::new(0.1, -0.2), C64::new(0.1, 0.2), C64::new(0.3, 0.0)],
        )
        .unwrap();
        let rho = DensityMatrix::new(m.clone()).unwrap();
        let t = encode_input(&rho);
        assert_eq!(t.shape(), &[1, 2, 2, 2]);
        assert_eq!(t.data()[2..4], [0.1, -0.2]);
        assert_eq!(decode_input(&t).unwrap(), m);
    }

    #[test]
    fn outputs_are_probabilities() {
        for n in 3..=4 {
            let model = build_cnn(&ArchConfig::new(n), 3).unwrap();
            let rho = crate::stategen::ghz_state(n).unwrap().to_density();
            let p = predict(&model, &rho).unwrap();
            assert_eq!(p.len(), model.outputs());
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(p, predict(&model, &rho).unwrap());
        }
        let model = build_cnn(&ArchConfig::new(3), 3).unwrap();
        let rho4 = crate::stategen::ghz_state(4).unwrap().to_density();
        assert!(predict(&model, &rho4).is_err());
    }
}
