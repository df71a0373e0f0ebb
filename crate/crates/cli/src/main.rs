use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use covprop::certify::{certified_accuracy, certify, format_accuracy_line, write_cert_csv, CertRow, RADIUS_THRESHOLDS};
use covprop::cost::{cost_table, CostMode};
use covprop::data::{load_dataset, pair_flip, toy_test, toy_train, Dataset, TOY_RMAX, TOY_SIGMA};
use covprop::interval::{tightness_report, DEFAULT_WIDTH_MULTIPLIER};
use covprop::mc::{mc_certify_dataset, mc_layer_moments, mc_summary, write_mc_csv, MCConfig, MCRow};
use covprop::moments::{propagate_all, BoundConfig};
use covprop::network::{build_lenet_small, load_file, save_file};
use covprop::numkit::min_eigenvalue_sym;
use covprop::train::{noisy_label_finetune, train_loop, write_metrics_csv, LossConfig, TrainConfig};
use covprop::{Error, NetworkSpec};

/// Certified radii by moment propagation, with a Monte Carlo cross-check.
#[derive(Parser, Debug)]
#[command(name = "covprop", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Propagated certification of every sample in a dataset.
    Certify(CertifyArgs),
    /// Randomized-smoothing certification by sampling.
    McCertify(McArgs),
    /// Per-layer propagated vs sampled moments vs interval volumes for one sample.
    Compare(CompareArgs),
    /// Train from scratch or from a checkpoint.
    Train(TrainArgs),
    /// Matrices an exact cross-correlation bookkeeping would need.
    Cost(CostArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dataset JSON, or `toy:train` / `toy:test` for the built-in toy split.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = TOY_SIGMA)]
    sigma: f64,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = TOY_RMAX)]
    rmax: f64,
}

#[derive(Args, Debug)]
struct McArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    n0: usize,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = TOY_RMAX)]
    rmax: f64,
    /// Monte Carlo samples (1000 or more recommended).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Which sample of the dataset to probe.
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainMode {
    Standard,
    /// Fine-tune with the top radius decile dropped each epoch.
    NoisyFinetune,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Starting checkpoint; a fresh small LeNet when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: String,
    /// Dataset evaluated after every epoch.
    #[arg(long)]
    eval_data: Option<String>,
    /// Checkpoint written at the end.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV (defaults to the checkpoint path with `.metrics.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = TOY_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = TOY_RMAX)]
    rmax: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Hinge offset (defaults to 8σ).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = TrainMode::Standard)]
    mode: TrainMode,
    /// Pair-flip this fraction of training labels first.
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long)]
    kernel: u64,
    #[arg(long)]
    depth: u32,
    #[arg(long, default_value = "overlap")]
    mode: CostMode,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn open_out(path: Option<&Path>) -> covprop::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Summary lines go to stdout when the CSV went to a file, else to stderr.
fn summary(to_file: bool, line: &str) {
    if to_file {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
}

fn read_data(spec: &str) -> covprop::Result<Dataset> {
    let data = match spec {
        "toy:train" => toy_train(),
        "toy:test" => toy_test(),
        path => load_dataset(path)?,
    };
    data.validate()?;
    Ok(data)
}

fn read_model(path: &Path, data: &Dataset) -> covprop::Result<NetworkSpec> {
    let net = load_file(path)?;
    if net.input_shape != data.shape() {
        return Err(Error::Shape {
            expected: format!("data of shape {}", net.input_shape),
            actual: data.shape().to_string(),
        });
    }
    Ok(net)
}

fn cmd_certify(a: &CertifyArgs) -> covprop::Result<()> {
    let data = read_data(&a.common.data)?;
    let net = read_model(&a.common.model, &data)?;
    let cfg = BoundConfig::new(a.rmax, a.common.sigma)?;
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(CertRow::new(i, data.label(i), &certify(&net, &data.image(i)?, &cfg)?)))
        .collect::<covprop::Result<Vec<_>>>()?;
    write_cert_csv(&rows, open_out(a.common.out.as_deref())?)?;
    let acr = rows.iter().map(|r| r.radius).sum::<f64>() / rows.len().max(1) as f64;
    let acc = certified_accuracy(&rows, &RADIUS_THRESHOLDS);
    summary(a.common.out.is_some(), &format!("{} | ACR {acr:.3}", format_accuracy_line(&acc)));
    Ok(())
}

fn mc_accuracy(rows: &[MCRow]) -> Vec<(f64, f64)> {
    let m = rows.len().max(1) as f64;
    RADIUS_THRESHOLDS
        .iter()
        .map(|&t| {
            let hits = rows
                .iter()
                .filter(|r| !r.abstained && r.predicted == r.true_label && r.radius >= t)
                .count();
            (t, hits as f64 / m)
        })
        .collect()
}

fn cmd_mc_certify(a: &McArgs) -> covprop::Result<()> {
    let data = read_data(&a.common.data)?;
    let net = read_model(&a.common.model, &data)?;
    let cfg = MCConfig {
        n0: a.n0,
        n: a.n,
        alpha: a.alpha,
        sigma: a.common.sigma,
        seed: a.seed,
    };
    cfg.validate()?;
    if cfg.undersampled() {
        eprintln!("warning: n = {} cannot certify at alpha = {}", cfg.n, cfg.alpha);
    }
    let rows = mc_certify_dataset(&net, &data, &cfg)?;
    write_mc_csv(&rows, open_out(a.common.out.as_deref())?)?;
    let (_, acr) = mc_summary(&rows);
    let abstained = rows.iter().filter(|r| r.abstained).count();
    summary(
        a.common.out.is_some(),
        &format!("{} | ACR {acr:.3} | abstained {abstained}", format_accuracy_line(&mc_accuracy(&rows))),
    );
    Ok(())
}

fn mean_diag(m: &covprop::Matrix) -> f64 {
    m.diag().iter().sum::<f64>() / m.rows().max(1) as f64
}

fn cmd_compare(a: &CompareArgs) -> covprop::Result<()> {
    let data = read_data(&a.common.data)?;
    let net = read_model(&a.common.model, &data)?;
    if a.sample >= data.len() {
        return Err(Error::Domain(format!("sample {} out of range (dataset has {})", a.sample, data.len())));
    }
    if a.n < 1000 {
        eprintln!("warning: fewer than 1000 samples make the sampled moments noisy");
    }
    let image = data.image(a.sample)?;
    let cfg = BoundConfig::new(a.rmax, a.common.sigma)?;
    let (_, trace) = propagate_all(&net, &image, &cfg)?;
    let mc = mc_layer_moments(&net, &image, cfg.sigma_in, a.n, a.seed)?;
    let boxes = tightness_report(&net, &image, &cfg, DEFAULT_WIDTH_MULTIPLIER)?;
    if trace.len() != mc.len() || boxes.len() != trace.len() + 1 {
        return Err(Error::Numerical(format!(
            "internal: layer counts differ (propagated {}, sampled {}, interval {})",
            trace.len(),
            mc.len(),
            boxes.len() - 1
        )));
    }
    let mut w = csv::Writer::from_writer(open_out(a.common.out.as_deref())?);
    let header = [
        "layer_index",
        "layer_kind",
        "N",
        "prop_var",
        "mc_var",
        "ratio",
        "min_eig_gap",
        "mc_max_cross_corr",
        "box_log_volume",
        "cov_log_volume",
    ];
    let csv_err = |e: csv::Error| Error::Io(io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    let mut worst_gap = f64::INFINITY;
    for ((p, m), b) in trace.iter().zip(&mc).zip(&boxes[1..]) {
        let (pv, mv) = (mean_diag(&p.cov), mean_diag(&m.cov));
        let gap = min_eigenvalue_sym(&p.cov.sub(&m.cov)?.symmetrize())?;
        worst_gap = worst_gap.min(gap);
        w.write_record([
            m.layer_index.to_string(),
            m.kind.to_string(),
            p.cov.rows().to_string(),
            pv.to_string(),
            mv.to_string(),
            (pv / mv).to_string(),
            gap.to_string(),
            m.max_cross_corr.to_string(),
            b.box_log_volume.to_string(),
            b.cov_log_volume.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let corr = covprop::mc::max_cross_correlation(&mc);
    summary(
        a.common.out.is_some(),
        &format!("layers {} | max cross-pixel correlation {corr:.3} | smallest min-eig gap {worst_gap:.3e}", trace.len()),
    );
    Ok(())
}

fn metrics_path(a: &TrainArgs) -> PathBuf {
    a.metrics.clone().unwrap_or_else(|| a.out.with_extension("metrics.csv"))
}

fn cmd_train(a: &TrainArgs) -> covprop::Result<()> {
    let mut data = read_data(&a.data)?;
    if a.noise_rate > 0.0 {
        let (noisy, flipped) = pair_flip(&data, a.noise_rate, a.seed)?;
        eprintln!("flipped {flipped} of {} labels", data.len());
        data = noisy;
    }
    let eval = a.eval_data.as_deref().map(read_data).transpose()?;
    let init = match &a.model {
        Some(p) => read_model(p, &data)?,
        None => build_lenet_small(data.shape(), data.class_count, a.seed)?,
    };
    let mut loss = LossConfig::new(a.lambda, a.sigma);
    if let Some(g) = a.gamma {
        loss.gamma = g;
    }
    let mut cfg = TrainConfig::new(loss, a.rmax);
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (net, metrics) = match a.mode {
        TrainMode::Standard => train_loop(&init, &data, eval.as_ref(), &cfg, a.seed)?,
        TrainMode::NoisyFinetune => noisy_label_finetune(&init, &data, eval.as_ref(), &cfg, a.seed)?,
    };
    save_file(&net, &a.out)?;
    let mpath = metrics_path(a);
    write_metrics_csv(&metrics, BufWriter::new(File::create(&mpath)?))?;
    if let Some(last) = metrics.last() {
        println!(
            "epoch {} | accuracy {:.3} | ACR {:.3} | checkpoint {} | metrics {}",
            last.epoch,
            last.clean_acc,
            last.acr,
            a.out.display(),
            mpath.display()
        );
    }
    Ok(())
}

fn cmd_cost(a: &CostArgs) -> covprop::Result<()> {
    let rows = cost_table(a.kernel, a.depth, a.mode)?;
    let mut out = io::stdout().lock();
    writeln!(out, "k = {}, {:?}", a.kernel, a.mode)?;
    writeln!(out, "{:>4} {:>22} {:>22}", "q", "covariances", "cross-correlations")?;
    for r in &rows {
        writeln!(out, "{:>4} {:>22} {:>22}", r.q, r.sigma_count, r.e_count)?;
    }
    if let Some(p) = &a.out {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::Io(io::Error::other(e)))?;
        for r in &rows {
            w.serialize(r).map_err(|e| Error::Io(io::Error::other(e)))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn configure_threads() -> covprop::Result<()> {
    let Ok(v) = std::env::var("COVPROP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Domain(format!("COVPROP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Domain(e.to_string()))
}

fn run(cli: &Cli) -> covprop::Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Certify(a) => cmd_certify(a),
        Command::McCertify(a) => cmd_mc_certify(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Train(a) => cmd_train(a),
        Command::Cost(a) => cmd_cost(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
