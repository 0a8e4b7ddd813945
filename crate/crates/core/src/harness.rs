//! Training, evaluation and the experiment drivers built on top of them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autograd::Adam;
use crate::dataset::{
    self, build_mixed_test_set, build_pptes_extension, build_pptes_set, build_pure_test_set,
    build_training_set, build_validation_set, separable_mixture, Dataset, LabeledState, SetKind,
    Strategy,
};
use crate::entanglement::{is_npt, negativities, PptesFamily};
use crate::error::{invalid, io_err, Result};
use crate::exec::Execution;
use crate::linalg::DensityMatrix;
use crate::model::{
    batch_loss, build_cnn, predict_batch, ArchConfig, Augmentation, LossParts, Model, ModelKind,
    Objective, TrainConfig,
};
use crate::seed::{self, domain};
use crate::stategen::{mix_states, random_weights, MixtureSpec};

/// Probability above which a cut is called entangled.
pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn decide(p: f64) -> u8 {
    (p > DECISION_THRESHOLD) as u8
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    fn add(&mut self, decision: u8, label: u8) {
        match (decision, label) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (1, _) => self.fp += 1,
            _ => self.fn_ += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub samples: usize,
    pub accuracy: f64,
    /// Accuracy per bipartition position; `NaN` where a position is excluded.
    pub per_bipartition: Vec<f64>,
    pub confusion: Vec<Confusion>,
    pub conv_neg: f64,
    pub npt_fraction: f64,
    pub seconds: f64,
    pub config: Vec<(String, String)>,
}

/// Positions scored for a set: only the PPT cut for the Horodecki family,
/// every cut otherwise.
pub fn evaluation_mask(ds: &Dataset) -> Vec<bool> {
    let n = ds.num_qubits();
    let m = crate::entanglement::bipartition_count(n);
    match ds.manifest.kind {
        SetKind::Pptes(PptesFamily::Horodecki) => {
            let mut mask = vec![false; m];
            for bp in PptesFamily::Horodecki.ppt_cuts(n) {
                mask[bp.position()] = true;
            }
            mask
        }
        _ => vec![true; m],
    }
}

/// Scores 0/1 `decisions` against stored labels; `ConvNeg` compares them to
/// the negativity indicator.
pub fn score_decisions(
    name: &str,
    decisions: &[Vec<u8>],
    records: &[LabeledState],
    mask: &[bool],
) -> MetricsReport {
    let m = mask.len();
    let mut confusion = vec![Confusion::default(); m];
    let (mut agree, mut scored) = (0usize, 0usize);
    let mut npt_states = 0usize;
    for (d, rec) in decisions.iter().zip(records) {
        if rec.neg_values.iter().any(|&v| is_npt(v)) {
            npt_states += 1;
        }
        for j in (0..m).filter(|&j| mask[j]) {
            confusion[j].add(d[j], rec.labels.as_slice()[j]);
            agree += (d[j] == is_npt(rec.neg_values[j]) as u8) as usize;
            scored += 1;
        }
    }
    let correct: usize = confusion.iter().map(|c| c.tp + c.tn).sum();
    let per_bipartition = confusion
        .iter()
        .zip(mask)
        .map(|(c, &on)| if on { c.accuracy() } else { f64::NAN })
        .collect();
    MetricsReport {
        dataset: name.to_string(),
        samples: records.len(),
        accuracy: correct as f64 / scored.max(1) as f64,
        per_bipartition,
        confusion,
        conv_neg: agree as f64 / scored.max(1) as f64,
        npt_fraction: npt_states as f64 / records.len().max(1) as f64,
        seconds: 0.0,
        config: vec![],
    }
}

pub fn threshold_all(probs: &[Vec<f64>]) -> Vec<Vec<u8>> {
    probs.iter().map(|p| p.iter().map(|&v| decide(v)).collect()).collect()
}

fn set_name(ds: &Dataset) -> String {
    ds.manifest.kind.name()
}

fn check_model_data(model: &Model, ds: &Dataset) -> Result<()> {
    if model.num_qubits() != ds.num_qubits() {
        return invalid(format!(
            "model is for {} qubits but the dataset has {}",
            model.num_qubits(),
            ds.num_qubits()
        ));
    }
    Ok(())
}

pub fn predict_dataset(model: &Model, ds: &Dataset, exec: Execution) -> Result<Vec<Vec<f64>>> {
    check_model_data(model, ds)?;
    let rhos: Vec<&DensityMatrix> = ds.records.iter().map(|r| &r.rho).collect();
    predict_batch(model, &rhos, exec)
}

/// Thresholded-network accuracy with confusion counts and ConvNeg.
pub fn evaluate_accuracy(model: &Model, ds: &Dataset, exec: Execution) -> Result<MetricsReport> {
    let t0 = Instant::now();
    let probs = predict_dataset(model, ds, exec)?;
    let mut rep = score_decisions(&set_name(ds), &threshold_all(&probs), &ds.records, &evaluation_mask(ds));
    rep.seconds = t0.elapsed().as_secs_f64();
    Ok(rep)
}

/// `1 - mean |p_j - p^Neg_j|` over all samples and cuts, with network
/// predictions thresholded at 0.5.
pub fn conv_neg(model: &Model, ds: &Dataset, exec: Execution) -> Result<f64> {
    let probs = predict_dataset(model, ds, exec)?;
    Ok(conv_neg_from(&probs, ds.records.iter().map(|r| r.neg_values.as_slice())))
}

pub fn conv_neg_from<'a>(probs: &[Vec<f64>], negs: impl Iterator<Item = &'a [f64]>) -> f64 {
    let (mut diff, mut count) = (0.0, 0usize);
    for (p, n) in probs.iter().zip(negs) {
        for (&pj, &nj) in p.iter().zip(n) {
            diff += (f64::from(decide(pj)) - f64::from(is_npt(nj) as u8)).abs();
            count += 1;
        }
    }
    1.0 - diff / count.max(1) as f64
}

/// Negativity first, network second: an NPT cut is entangled, any other cut
/// takes the thresholded network output.
pub fn combined_decisions(probs: &[f64], negs: &[f64]) -> Vec<u8> {
    probs
        .iter()
        .zip(negs)
        .map(|(&p, &n)| if is_npt(n) { 1 } else { decide(p) })
        .collect()
}

pub fn combined_classify(model: &Model, rho: &DensityMatrix) -> Result<Vec<u8>> {
    let probs = crate::model::predict(model, rho)?;
    Ok(combined_decisions(&probs, &negativities(rho)))
}

pub fn evaluate_combined(model: &Model, ds: &Dataset, exec: Execution) -> Result<MetricsReport> {
    let t0 = Instant::now();
    let probs = predict_dataset(model, ds, exec)?;
    let decisions: Vec<Vec<u8>> = probs
        .iter()
        .zip(&ds.records)
        .map(|(p, r)| combined_decisions(p, &r.neg_values))
        .collect();
    let mut rep = score_decisions(
        &format!("{}+negativity", set_name(ds)),
        &decisions,
        &ds.records,
        &evaluation_mask(ds),
    );
    rep.seconds = t0.elapsed().as_secs_f64();
    Ok(rep)
}

/// Fraction of label-1 cuts that `decisions` flag.
pub fn entangled_cut_recall(decisions: &[Vec<u8>], records: &[LabeledState]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (d, r) in decisions.iter().zip(records) {
        for (&dj, &lj) in d.iter().zip(r.labels.as_slice()) {
            if lj == 1 {
                total += 1;
                hit += dj as usize;
            }
        }
    }
    hit as f64 / total.max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub locc: f64,
    pub perm: f64,
    pub valid_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy (the last
    /// epoch when no validation set is given).
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Total loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
}

/// Mini-batch training with Adam. Batches are reshuffled every epoch from a
/// stream derived from `cfg.seed`; Siamese transformations come from a
/// separate stream, one draw per batch.
pub fn train(
    mut model: Model,
    data: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_model_data(&model, data)?;
    if let Some(v) = valid {
        check_model_data(&model, v)?;
    }
    if data.is_empty() {
        return invalid("training set is empty");
    }
    let n = model.num_qubits();
    let mut opt = Adam::new(model.params(), cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut rng = seed::rng_for(cfg.seed, &[domain::SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledState> = idx.iter().map(|&i| &data.records[i]).collect();
            let aug;
            let objective = match cfg.kind {
                ModelKind::Cnn => Objective::Cnn,
                ModelKind::Siamese => {
                    let mut arng = seed::rng_for(cfg.seed, &[domain::AUGMENT, epoch as u64, bi as u64]);
                    aug = Augmentation::random(n, &mut arng);
                    Objective::Siamese {
                        lambda1: cfg.lambda1,
                        lambda2: cfg.lambda2,
                        aug: &aug,
                    }
                }
            };
            let (parts, grads) = batch_loss(&model, &batch, &objective, exec, true)?;
            opt.step(model.params_mut(), &grads.expect("requested"))?;
            step_losses.push(parts.total);
            sums.total += parts.total;
            sums.bce += parts.bce;
            sums.locc += parts.locc;
            sums.perm += parts.perm;
            batches += 1;
        }
        let valid_accuracy = match valid {
            Some(v) => Some(evaluate_accuracy(&model, v, exec)?.accuracy),
            None => None,
        };
        let score = valid_accuracy.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        let b = batches as f64;
        history.push(EpochLog {
            epoch,
            loss: sums.total / b,
            bce: sums.bce / b,
            locc: sums.locc / b,
            perm: sums.perm / b,
            valid_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, 0),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        step_losses,
    })
}

pub fn history_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,bce,locc,perm,valid_accuracy,seconds\n");
    for h in history {
        let va = h.valid_accuracy.map_or(String::new(), |v| format!("{v:?}"));
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{},{:?}",
            h.epoch, h.loss, h.bce, h.locc, h.perm, va, h.seconds
        );
    }
    out
}

/// `dataset,accuracy,convneg,npt_fraction,seconds` rows.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("dataset,accuracy,convneg,npt_fraction,seconds\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?}",
            r.dataset, r.accuracy, r.conv_neg, r.npt_fraction, r.seconds
        );
    }
    out
}

/// Key=value summary including per-bipartition breakdowns and config echo.
pub fn reports_summary(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let p = &r.dataset;
        let _ = writeln!(out, "{p}.samples={}", r.samples);
        let _ = writeln!(out, "{p}.accuracy={:?}", r.accuracy);
        let _ = writeln!(out, "{p}.convneg={:?}", r.conv_neg);
        let _ = writeln!(out, "{p}.npt_fraction={:?}", r.npt_fraction);
        for (j, (acc, c)) in r.per_bipartition.iter().zip(&r.confusion).enumerate() {
            if acc.is_nan() {
                continue;
            }
            let _ = writeln!(
                out,
                "{p}.cut{}.accuracy={acc:?}\n{p}.cut{}.tp={}\n{p}.cut{}.tn={}\n{p}.cut{}.fp={}\n{p}.cut{}.fn={}",
                j + 1,
                j + 1,
                c.tp,
                j + 1,
                c.tn,
                j + 1,
                c.fp,
                j + 1,
                c.fn_
            );
        }
        for (k, v) in &r.config {
            let _ = writeln!(out, "{p}.config.{k}={v}");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPoint {
    pub d: usize,
    pub npt_fraction_circuit: f64,
    pub npt_fraction_haar: f64,
    pub npt_fraction_separable: f64,
    pub conv_neg_circuit: Option<f64>,
    pub conv_neg_haar: Option<f64>,
    pub conv_neg_separable: Option<f64>,
}

/// The three pools for one `d`: circuit-component and Haar-component
/// mixtures of fully entangled pure states, and separable mixtures.
pub fn transition_pools(
    n: usize,
    d: usize,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<[Vec<DensityMatrix>; 3]> {
    if d == 0 || samples == 0 {
        return invalid("transition analysis needs d >= 1 and samples >= 1");
    }
    let pool = |tag: u64, f: &(dyn Fn(&mut seed::SampleRng) -> DensityMatrix + Sync)| {
        exec.map(samples, |i| {
            let mut rng = seed::rng_for(seed, &[domain::TRANSITION, n as u64, d as u64, tag, i as u64]);
            f(&mut rng)
        })
    };
    let entangled_mix = |circuit: bool| {
        move |rng: &mut seed::SampleRng| {
            let comps = (0..d)
                .map(|_| {
                    if circuit {
                        dataset::fully_entangled_circuit_state(n, rng).0
                    } else {
                        dataset::fully_entangled_haar_state(n, rng)
                    }
                })
                .collect();
            mix_states(&MixtureSpec::new(random_weights(d, rng), comps).expect("valid mixture"))
        }
    };
    Ok([
        pool(0, &entangled_mix(true)),
        pool(1, &entangled_mix(false)),
        pool(2, &|rng| separable_mixture(n, d, rng)),
    ])
}

/// NPT fraction and, given a model, ConvNeg of each pool against `d`.
pub fn transition_analysis(
    model: Option<&Model>,
    n: usize,
    d_values: &[usize],
    samples_per_d: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<TransitionPoint>> {
    if let Some(m) = model {
        if m.num_qubits() != n {
            return invalid("model qubit count differs from the requested analysis");
        }
    }
    let mut out = Vec::with_capacity(d_values.len());
    for &d in d_values {
        let pools = transition_pools(n, d, samples_per_d, seed, exec)?;
        let mut fractions = [0.0; 3];
        let mut conv = [None; 3];
        for (k, pool) in pools.iter().enumerate() {
            let negs: Vec<Vec<f64>> = exec.map_slice(pool, negativities);
            fractions[k] = negs.iter().filter(|v| v.iter().any(|&x| is_npt(x))).count() as f64
                / pool.len() as f64;
            if let Some(m) = model {
                let refs: Vec<&DensityMatrix> = pool.iter().collect();
                let probs = predict_batch(m, &refs, exec)?;
                conv[k] = Some(conv_neg_from(&probs, negs.iter().map(Vec::as_slice)));
            }
        }
        out.push(TransitionPoint {
            d,
            npt_fraction_circuit: fractions[0],
            npt_fraction_haar: fractions[1],
            npt_fraction_separable: fractions[2],
            conv_neg_circuit: conv[0],
            conv_neg_haar: conv[1],
            conv_neg_separable: conv[2],
        });
    }
    Ok(out)
}

/// `series,d,value` rows, one series per curve.
pub fn transition_csv(points: &[TransitionPoint]) -> String {
    let mut out = String::from("series,d,value\n");
    let mut series = |name: &str, get: &dyn Fn(&TransitionPoint) -> Option<f64>| {
        for p in points {
            if let Some(v) = get(p) {
                let _ = writeln!(out, "{name},{},{v:?}", p.d);
            }
        }
    };
    series("npt_fraction_circuit", &|p| Some(p.npt_fraction_circuit));
    series("npt_fraction_haar", &|p| Some(p.npt_fraction_haar));
    series("npt_fraction_separable", &|p| Some(p.npt_fraction_separable));
    series("convneg_circuit", &|p| p.conv_neg_circuit);
    series("convneg_haar", &|p| p.conv_neg_haar);
    series("convneg_separable", &|p| p.conv_neg_separable);
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub conv_layers: usize,
    pub kernel: usize,
    pub best_valid_accuracy: f64,
    pub best_epoch: usize,
    pub parameters: usize,
}

/// Trains one model per feasible `(depth, kernel)` pair and records its best
/// validation accuracy.
pub fn sweep(
    data: &Dataset,
    valid: &Dataset,
    depths: &[usize],
    kernels: &[usize],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &depth in depths {
        for &kernel in kernels {
            let mut arch = ArchConfig::new(data.num_qubits());
            arch.conv_layers = depth;
            arch.kernel = kernel;
            if arch.validate().is_err() {
                continue;
            }
            let model = build_cnn(&arch, cfg.seed)?;
            let parameters = model.params().num_scalars();
            let run = train(model, data, Some(valid), cfg, exec)?;
            out.push(SweepPoint {
                conv_layers: depth,
                kernel,
                best_valid_accuracy: run.history[run.best_epoch].valid_accuracy.unwrap_or(f64::NAN),
                best_epoch: run.best_epoch,
                parameters,
            });
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("conv_layers,kernel,best_valid_accuracy,best_epoch,parameters\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{:?},{},{}",
            p.conv_layers, p.kernel, p.best_valid_accuracy, p.best_epoch, p.parameters
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub n_qubits: usize,
    pub strategy: Strategy,
    pub scale: f64,
    pub data_seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Also score the PPTES families available for `n_qubits`.
    pub pptes: bool,
    /// Retrain for this many epochs on the training set plus the PPTES
    /// extension and report again.
    pub retrain_epochs: Option<usize>,
    /// Start from this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(n_qubits: usize, strategy: Strategy, scale: f64, seed: u64) -> Self {
        Self {
            n_qubits,
            strategy,
            scale,
            data_seed: seed,
            arch: ArchConfig::new(n_qubits),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            pptes: true,
            retrain_epochs: None,
            checkpoint: None,
            out_dir: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n_qubits={}\nstrategy={}\nscale={:?}\ndata_seed={}\npptes={}\nretrain_epochs={}\ncheckpoint={}\n",
            self.n_qubits,
            self.strategy,
            self.scale,
            self.data_seed,
            self.pptes,
            self.retrain_epochs.map_or("none".into(), |e| e.to_string()),
            self.checkpoint
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        );
        s.push_str(&self.arch.to_text());
        s.push_str(&self.train.to_text());
        s
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub reports: Vec<MetricsReport>,
    pub retrained: Vec<MetricsReport>,
    pub history: Vec<EpochLog>,
    pub model: Model,
}

fn evaluation_sets(plan: &ExperimentPlan, exec: Execution) -> Result<Vec<Dataset>> {
    let n = plan.n_qubits;
    let mut sets = vec![
        build_pure_test_set(n, plan.scale, plan.data_seed, exec)?,
        build_mixed_test_set(n, plan.scale, plan.data_seed, exec)?,
    ];
    if plan.pptes {
        for fam in PptesFamily::ALL.into_iter().filter(|f| f.supports(n)) {
            sets.push(build_pptes_set(fam, n, plan.scale, plan.data_seed, exec)?);
        }
    }
    Ok(sets)
}

fn score_all(model: &Model, sets: &[Dataset], plan: &ExperimentPlan, exec: Execution) -> Result<Vec<MetricsReport>> {
    let echo = vec![
        ("n_qubits".to_string(), plan.n_qubits.to_string()),
        ("strategy".to_string(), plan.strategy.to_string()),
        ("model".to_string(), plan.train.kind.name().to_string()),
        ("scale".to_string(), format!("{:?}", plan.scale)),
        ("seed".to_string(), plan.data_seed.to_string()),
    ];
    sets.iter()
        .map(|s| {
            let mut r = evaluate_accuracy(model, s, exec)?;
            r.config = echo.clone();
            Ok(r)
        })
        .collect()
}

/// Trains (or loads), evaluates on the test sets and optionally retrains
/// with the PPTES extension. Reports are written to `out_dir` when set.
pub fn run_experiment(plan: &ExperimentPlan, exec: Execution) -> Result<ExperimentReport> {
    if plan.arch.n_qubits != plan.n_qubits {
        return invalid("architecture qubit count differs from the plan");
    }
    if let Some(dir) = &plan.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_text(&dir.join("config.txt"), &plan.to_text())?;
    }
    let train_set = build_training_set(plan.n_qubits, plan.strategy, plan.scale, plan.data_seed, exec)?;
    let valid = build_validation_set(plan.n_qubits, plan.scale, plan.data_seed, exec)?;
    let (model, history) = match &plan.checkpoint {
        Some(path) => (Model::load(path)?, vec![]),
        None => {
            let run = train(build_cnn(&plan.arch, plan.train.seed)?, &train_set, Some(&valid), &plan.train, exec)?;
            (run.model, run.history)
        }
    };
    let sets = evaluation_sets(plan, exec)?;
    let reports = score_all(&model, &sets, plan, exec)?;
    let mut retrained = vec![];
    let mut final_model = model;
    if let Some(extra) = plan.retrain_epochs {
        if plan.n_qubits != 3 {
            return invalid("the PPTES extension is defined for 3 qubits");
        }
        let mut merged = train_set;
        merged.extend_with(build_pptes_extension(plan.scale, plan.data_seed, exec)?)?;
        let cfg = TrainConfig {
            epochs: extra,
            ..plan.train.clone()
        };
        final_model = train(final_model, &merged, Some(&valid), &cfg, exec)?.model;
        retrained = score_all(&final_model, &sets, plan, exec)?;
        for r in &mut retrained {
            r.dataset.push_str("@retrained");
        }
    }
    if let Some(dir) = &plan.out_dir {
        let all: Vec<MetricsReport> = reports.iter().chain(&retrained).cloned().collect();
        write_text(&dir.join("report.csv"), &reports_csv(&all))?;
        write_text(&dir.join("summary.txt"), &reports_summary(&all))?;
        write_text(&dir.join("history.csv"), &history_csv(&history))?;
        final_model.save(&dir.join("model.qenm"))?;
    }
    Ok(ExperimentReport {
        reports,
        retrained,
        history,
        model: final_model,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Generator, Provenance};
    use crate::entanglement::LabelVector;
    use crate::stategen::ghz_state;

    fn record(labels: Vec<u8>, negs: Vec<f64>) -> LabeledState {
        LabeledState {
            rho: ghz_state(3).unwrap().to_density(),
            labels: LabelVector::new(labels).unwrap(),
            neg_values: negs,
            provenance: Provenance {
                generator: Generator::Ghz,
                d: 1,
                cu_pairs: 0,
            },
        }
    }

    #[test]
    fn accuracy_extremes() {
        let recs = vec![record(vec![1, 0, 1], vec![0.5, 0.0, 0.5]), record(vec![0, 0, 1], vec![0.0; 3])];
        let labels: Vec<Vec<u8>> = recs.iter().map(|r| r.labels.as_slice().to_vec()).collect();
        let flipped: Vec<Vec<u8>> = labels.iter().map(|l| l.iter().map(|v| 1 - v).collect()).collect();
        let mask = vec![true; 3];
        assert_eq!(score_decisions("x", &labels, &recs, &mask).accuracy, 1.0);
        assert_eq!(score_decisions("x", &flipped, &recs, &mask).accuracy, 0.0);
        let zeros = vec![vec![0u8; 3]; 2];
        let r = score_decisions("x", &zeros, &recs, &mask);
        assert_eq!(r.accuracy, 0.5);
        for c in &r.confusion {
            assert_eq!(c.total(), 2);
        }
        assert_eq!(decide(0.5), 0);
        assert_eq!(r.npt_fraction, 0.5);
    }

    #[test]
    fn conv_neg_extremes() {
        let negs = [vec![0.2, 0.0, 0.3]];
        let exact = vec![vec![0.9, 0.1, 0.8]];
        let opposite = vec![vec![0.1, 0.9, 0.2]];
        assert_eq!(conv_neg_from(&exact, negs.iter().map(Vec::as_slice)), 1.0);
        assert_eq!(conv_neg_from(&opposite, negs.iter().map(Vec::as_slice)), 0.0);
    }

    #[test]
    fn combined_overrides_only_npt_cuts() {
        assert_eq!(combined_decisions(&[0.1, 0.9, 0.2], &[0.3, 0.0, 0.0]), vec![1, 1, 0]);
        assert_eq!(combined_decisions(&[0.1, 0.2, 0.3], &[0.0; 3]), vec![0, 0, 0]);
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let r = spearman(&x, &[1.0, 1.0, 2.0, 2.0]);
        assert!(r > 0.8 && r < 1.0);
    }

    #[test]
    fn csv_shapes() {
        let recs = vec![record(vec![1, 1, 1], vec![0.5; 3])];
        let mut r = score_decisions("ghz", &[vec![1, 1, 1]], &recs, &[true; 3]);
        r.seconds = 1.5;
        let csv = reports_csv(&[r.clone()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dataset,accuracy,convneg,npt_fraction,seconds");
        assert_eq!(lines[1], "ghz,1.0,1.0,1.0,1.5");
        assert!(reports_summary(&[r]).contains("ghz.cut2.tp=1"));
    }
}
