use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qent_core::autograd::AdamConfig;
use qent_core::dataset::{self, Dataset, Strategy};
use qent_core::entanglement::PptesFamily;
use qent_core::harness::{self, write_text};
use qent_core::model::{build_cnn, ArchConfig, Model, ModelKind, TrainConfig};
use qent_core::{Error, Execution, Result};

#[derive(Parser, Debug)]
#[command(name = "qent", version, about = "Entanglement classification of multi-qubit states")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "QENT_THREADS")]
    threads: Option<usize>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled dataset.
    Gen(GenArgs),
    /// Train a CNN or Siamese model.
    Train(TrainArgs),
    /// Score a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Train one model per (conv depth, kernel) grid point.
    Sweep(SweepArgs),
    /// NPT fraction and ConvNeg against the number of mixed pure states.
    Convneg(ConvnegArgs),
    /// Generate, train and evaluate in one go.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    qubits: usize,
    #[arg(long, default_value = "verified")]
    strategy: String,
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// train, valid, test, extension or pptes:FAMILY (horodecki, acin, upb).
    #[arg(long, default_value = "train")]
    set: String,
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    #[arg(long, default_value_t = 3)]
    conv_layers: usize,
    #[arg(long, default_value_t = 2)]
    kernel: usize,
    #[arg(long, default_value_t = 16.0)]
    r1: f64,
    #[arg(long, default_value_t = 5)]
    fc_layers: usize,
    #[arg(long, default_value_t = 128)]
    fc_units: usize,
}

impl ArchArgs {
    fn build(&self, n: usize) -> ArchConfig {
        ArchConfig {
            n_qubits: n,
            conv_layers: self.conv_layers,
            kernel: self.kernel,
            r1: self.r1,
            fc_layers: self.fc_layers,
            fc_units: self.fc_units,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct OptArgs {
    #[arg(long, default_value = "cnn")]
    model: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda2: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long)]
    seed: u64,
}

impl OptArgs {
    fn build(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            kind: ModelKind::parse(&self.model)?,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
            deterministic: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation set used for best-epoch selection.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Extra records appended to the training data (e.g. a PPTES extension).
    #[arg(long)]
    extra_data: Vec<PathBuf>,
    #[command(flatten)]
    opt: OptArgs,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Negativity decides NPT cuts, the network decides the rest.
    #[arg(long)]
    combined: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    kernels: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opt: OptArgs,
}

#[derive(Args, Debug)]
struct ConvnegArgs {
    /// Without a checkpoint only the NPT fractions are reported.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    qubits: usize,
    #[arg(long)]
    dmax: usize,
    #[arg(long, default_value_t = 1)]
    dmin: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    qubits: usize,
    #[arg(long, default_value = "verified")]
    strategy: String,
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_pptes: bool,
    /// Extra epochs on training data plus the PPTES extension.
    #[arg(long)]
    retrain_epochs: Option<usize>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    opt: OptArgs,
    #[command(flatten)]
    arch: ArchArgs,
}

/// Writes `key=value` lines for every resolved setting before a run starts.
fn snapshot(path: &Path, cli: &Cli, exec: Execution) -> Result<()> {
    let text = format!(
        "command={:?}\nthreads={}\nexecution={}\nversion={}\n",
        cli.cmd,
        cli.threads.map_or("default".into(), |t| t.to_string()),
        if exec.is_parallel() { "parallel" } else { "sequential" },
        env!("CARGO_PKG_VERSION"),
    );
    write_text(path, &text)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn save_checked(ds: &Dataset, path: &Path) -> Result<()> {
    dataset::save(ds, path)?;
    let back = dataset::load(path)?;
    if back.records != ds.records {
        return Err(Error::Integrity(format!("{} did not read back identically", path.display())));
    }
    println!("wrote {} ({} records)", path.display(), ds.len());
    Ok(())
}

fn cmd_gen(a: &GenArgs, exec: Execution) -> Result<()> {
    let n = a.qubits;
    match a.set.as_str() {
        "train" => save_checked(
            &dataset::build_training_set(n, Strategy::parse(&a.strategy)?, a.scale, a.seed, exec)?,
            &a.out,
        ),
        "valid" => save_checked(&dataset::build_validation_set(n, a.scale, a.seed, exec)?, &a.out),
        "test" => {
            let sets = dataset::build_test_sets(n, a.scale, a.seed, exec)?;
            save_checked(&sets.pure, &with_suffix(&a.out, ".pure"))?;
            save_checked(&sets.mixed, &with_suffix(&a.out, ".mixed"))
        }
        "extension" => save_checked(&dataset::build_pptes_extension(a.scale, a.seed, exec)?, &a.out),
        other => match other.strip_prefix("pptes:") {
            Some(fam) => save_checked(
                &dataset::build_pptes_set(PptesFamily::parse(fam)?, n, a.scale, a.seed, exec)?,
                &a.out,
            ),
            None => Err(Error::InvalidArgument(format!("unknown set '{other}'"))),
        },
    }
}

fn cmd_train(a: &TrainArgs, exec: Execution) -> Result<()> {
    let cfg = a.opt.build()?;
    let mut data = dataset::load(&a.data)?;
    for extra in &a.extra_data {
        data.extend_with(dataset::load(extra)?)?;
    }
    let valid = a.valid.as_deref().map(dataset::load).transpose()?;
    let model = match &a.resume {
        Some(path) => {
            let m = Model::load(path)?;
            if m.num_qubits() != data.num_qubits() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint is for {} qubits, data has {}",
                    m.num_qubits(),
                    data.num_qubits()
                )));
            }
            m
        }
        None => build_cnn(&a.arch.build(data.num_qubits()), cfg.seed)?,
    };
    let run = harness::train(model, &data, valid.as_ref(), &cfg, exec)?;
    for h in &run.history {
        println!(
            "epoch {:>3}  loss {:.6}  valid {}  {:.1}s",
            h.epoch,
            h.loss,
            h.valid_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
            h.seconds
        );
    }
    run.model.save(&a.out)?;
    Model::load(&a.out)?;
    write_text(&with_suffix(&a.out, ".history.csv"), &harness::history_csv(&run.history))?;
    let steps: String = std::iter::once("step,loss\n".to_string())
        .chain(run.step_losses.iter().enumerate().map(|(i, l)| format!("{i},{l:?}\n")))
        .collect();
    write_text(&with_suffix(&a.out, ".steps.csv"), &steps)?;
    println!("best epoch {}; wrote {}", run.best_epoch, a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, exec: Execution) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let mut reports = Vec::new();
    for path in &a.data {
        let ds = dataset::load(path)?;
        let mut r = if a.combined {
            harness::evaluate_combined(&model, &ds, exec)?
        } else {
            harness::evaluate_accuracy(&model, &ds, exec)?
        };
        r.dataset = format!("{}:{}", path.display(), r.dataset);
        println!("{}  accuracy {:.4}  convneg {:.4}", r.dataset, r.accuracy, r.conv_neg);
        reports.push(r);
    }
    write_text(&a.out.join("report.csv"), &harness::reports_csv(&reports))?;
    write_text(&a.out.join("summary.txt"), &harness::reports_summary(&reports))
}

fn cmd_sweep(a: &SweepArgs, exec: Execution) -> Result<()> {
    let cfg = a.opt.build()?;
    let data = dataset::load(&a.data)?;
    let valid = dataset::load(&a.valid)?;
    let points = harness::sweep(&data, &valid, &a.depths, &a.kernels, &cfg, exec)?;
    for p in &points {
        println!(
            "depth {} kernel {}  best valid {:.4} (epoch {})",
            p.conv_layers, p.kernel, p.best_valid_accuracy, p.best_epoch
        );
    }
    write_text(&a.out.join("sweep.csv"), &harness::sweep_csv(&points))
}

fn cmd_convneg(a: &ConvnegArgs, exec: Execution) -> Result<()> {
    if a.step == 0 || a.dmin == 0 || a.dmin > a.dmax {
        return Err(Error::InvalidArgument("need 1 <= dmin <= dmax and step >= 1".into()));
    }
    let model = a.ckpt.as_deref().map(Model::load).transpose()?;
    let ds: Vec<usize> = (a.dmin..=a.dmax).step_by(a.step).collect();
    let points = harness::transition_analysis(model.as_ref(), a.qubits, &ds, a.samples, a.seed, exec)?;
    for p in &points {
        println!(
            "d {:>4}  npt circuit {:.3}  haar {:.3}  separable {:.3}",
            p.d, p.npt_fraction_circuit, p.npt_fraction_haar, p.npt_fraction_separable
        );
    }
    write_text(&a.out.join("convneg.csv"), &harness::transition_csv(&points))
}

fn cmd_run(a: &RunArgs, exec: Execution) -> Result<()> {
    let mut plan = harness::ExperimentPlan::new(a.qubits, Strategy::parse(&a.strategy)?, a.scale, a.opt.seed);
    plan.arch = a.arch.build(a.qubits);
    plan.train = a.opt.build()?;
    plan.pptes = !a.no_pptes;
    plan.retrain_epochs = a.retrain_epochs;
    plan.checkpoint = a.ckpt.clone();
    plan.out_dir = Some(a.out.clone());
    let rep = harness::run_experiment(&plan, exec)?;
    for r in rep.reports.iter().chain(&rep.retrained) {
        println!("{:<28} accuracy {:.4}  convneg {:.4}", r.dataset, r.accuracy, r.conv_neg);
    }
    Ok(())
}

fn snapshot_path(cmd: &Command) -> PathBuf {
    match cmd {
        Command::Gen(a) => with_suffix(&a.out, ".config"),
        Command::Train(a) => with_suffix(&a.out, ".config"),
        Command::Eval(a) => a.out.join("config.txt"),
        Command::Sweep(a) => a.out.join("config.txt"),
        Command::Convneg(a) => a.out.join("config.txt"),
        Command::Run(a) => a.out.join("run-config.txt"),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads == Some(0) {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    snapshot(&snapshot_path(&cli.cmd), cli, exec)?;
    qent_core::exec::with_threads(cli.threads, || match &cli.cmd {
        Command::Gen(a) => cmd_gen(a, exec),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Sweep(a) => cmd_sweep(a, exec),
        Command::Convneg(a) => cmd_convneg(a, exec),
        Command::Run(a) => cmd_run(a, exec),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
