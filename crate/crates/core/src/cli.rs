//! Command-line front end: `train`, `consensus-demo`, `matrix`, `gradcheck`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ExperimentConfig, TopologyChoice};
use crate::consensus::{run_tracking_experiment, ScalarSignalSpec, SignalFamily, TrackingMethod};
use crate::data::{gen_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::fedsim::run_experiment;
use crate::matrix::{validate, TopologyKind};
use crate::model::{finite_diff_grad, init_params, loss_and_grad, max_relative_error, min_abs_preactivation, ModelShape};
use crate::numfmt::sig17;
use crate::seed::{derive, rng_from, Stream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dacfl", version, about = "Serverless federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train one algorithm and write metrics.csv, final_eval.csv, resolved_config.txt.
    Train(TrainArgs),
    /// Track the average of scalar reference signals and print the errors as CSV.
    ConsensusDemo(DemoArgs),
    /// Print a mixing matrix as CSV.
    Matrix(MatrixArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate the full-gradient bound each round.
    #[arg(long, alias = "bound_check")]
    bound_check: bool,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    nodes: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long, alias = "batch_size")]
    batch_size: Option<String>,
    #[arg(long, alias = "local_epochs")]
    local_epochs: Option<String>,
    #[arg(long, alias = "steps_mode")]
    steps_mode: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long, alias = "lr_decay")]
    lr_decay: Option<String>,
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    density: Option<String>,
    #[arg(long, alias = "time_varying")]
    time_varying: Option<String>,
    #[arg(long, alias = "tv_period")]
    tv_period: Option<String>,
    #[arg(long)]
    partition: Option<String>,
    #[arg(long, alias = "shards_per_node")]
    shards_per_node: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    images: Option<String>,
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long, alias = "per_class")]
    per_class: Option<String>,
    #[arg(long)]
    spread: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("algorithm", &self.algorithm),
            ("nodes", &self.nodes),
            ("rounds", &self.rounds),
            ("batch_size", &self.batch_size),
            ("local_epochs", &self.local_epochs),
            ("steps_mode", &self.steps_mode),
            ("lr", &self.lr),
            ("lr_decay", &self.lr_decay),
            ("topology", &self.topology),
            ("density", &self.density),
            ("time_varying", &self.time_varying),
            ("tv_period", &self.tv_period),
            ("partition", &self.partition),
            ("shards_per_node", &self.shards_per_node),
            ("data", &self.data),
            ("images", &self.images),
            ("labels", &self.labels),
            ("classes", &self.classes),
            ("dim", &self.dim),
            ("per_class", &self.per_class),
            ("spread", &self.spread),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        }
        for (key, value) in self.overrides() {
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("--{key}: {e}")))?;
        }
        cfg.bound_check |= self.bound_check;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Inputs {
    I,
    Ii,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long, value_enum, default_value = "i")]
    inputs: Inputs,
    #[arg(long, default_value = "dense")]
    topology: String,
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "dense")]
    kind: String,
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    draws: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Exit status for an error: 1 for anything the user can fix in the
/// invocation or config, 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::InvalidDimension(_)
        | Error::InvalidDensity { .. }
        | Error::TooFewSamples(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn topology_kind(name: &str, density: f64) -> Result<TopologyKind> {
    let choice: TopologyChoice = name.parse()?;
    Ok(match choice {
        TopologyChoice::Uniform => TopologyKind::Uniform,
        TopologyChoice::Dense => TopologyKind::Dense,
        TopologyChoice::Sparse => TopologyKind::Sparse { density },
    })
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn parse_and_dispatch<I, T>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn dispatch(cmd: Command, out: &mut impl Write, err: &mut impl Write) -> Result<i32> {
    match cmd {
        Command::Train(args) => train(&args, out, err),
        Command::ConsensusDemo(args) => consensus_demo(&args, out, err),
        Command::Matrix(args) => matrix(&args, out, err),
        Command::Gradcheck(args) => gradcheck(&args, out, err),
    }
}

fn train(args: &TrainArgs, out: &mut impl Write, err: &mut impl Write) -> Result<i32> {
    let cfg = args.resolve()?;
    let _ = writeln!(err, "# resolved config\n{}bound_check={}", cfg.to_text(), cfg.bound_check);
    let result = run_experiment(&cfg)?;
    result.write_to(&cfg.out)?;
    if let Some(last) = result.output.metrics.last() {
        writeln!(
            out,
            "{} round {}: avg_acc={} var_acc={} avg_loss={}",
            cfg.algorithm,
            last.round,
            sig17(last.avg_acc),
            sig17(last.var_acc),
            sig17(last.avg_loss)
        )
        .map_err(io_err)?;
    }
    if let Some(b) = &result.bound {
        let text = format!(
            "measured={}\nc0={}\nc1={}\nbound={}\nholds={}\nlr={}\ng_sq={}\ntheta_sq={}\nsmoothness={}\n",
            sig17(b.measured),
            sig17(b.terms.c0),
            sig17(b.terms.c1),
            sig17(b.terms.bound),
            b.holds(),
            sig17(b.inputs.lr),
            sig17(b.inputs.g_sq),
            sig17(b.inputs.theta_sq),
            sig17(b.inputs.smoothness)
        );
        let path = cfg.out.join("bound_check.txt");
        fs::write(&path, &text).map_err(|e| Error::io(path, e))?;
        write!(out, "{text}").map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

fn consensus_demo(args: &DemoArgs, out: &mut impl Write, err: &mut impl Write) -> Result<i32> {
    let kind = topology_kind(&args.topology, args.density)?;
    let family = match args.inputs {
        Inputs::I => SignalFamily::InputsI,
        Inputs::Ii => SignalFamily::InputsII,
    };
    let spec = ScalarSignalSpec {
        family,
        n: args.n,
        horizon: args.horizon,
    };
    let _ = writeln!(
        err,
        "# consensus-demo inputs={:?} topology={} density={} n={} horizon={} seed={}",
        args.inputs, args.topology, args.density, args.n, args.horizon, args.seed
    );
    let result = run_tracking_experiment(spec, kind, derive(args.seed, Stream::Topology, 0))?;
    for m in TrackingMethod::ALL {
        let _ = writeln!(err, "# {m}: max error at t={} is {}", args.horizon, sig17(result.max_error(m, args.horizon)));
    }
    match &args.out {
        Some(path) => result.write_csv_file(path)?,
        None => result.write_csv(out).map_err(io_err)?,
    }
    Ok(EXIT_OK)
}

fn matrix(args: &MatrixArgs, out: &mut impl Write, err: &mut impl Write) -> Result<i32> {
    let kind = topology_kind(&args.kind, args.density)?;
    let _ = writeln!(err, "# matrix n={} kind={} density={} seed={}", args.n, args.kind, args.density, args.seed);
    let w = kind.build(args.n, derive(args.seed, Stream::Topology, 0))?;
    let _ = writeln!(err, "# {}", validate(&w));
    out.write_all(w.to_csv().as_bytes()).map_err(io_err)?;
    Ok(EXIT_OK)
}

/// Central differences are unreliable within this many step sizes of a kink.
const KINK_MARGIN: f64 = 10.0;

fn gradcheck(args: &GradcheckArgs, out: &mut impl Write, err: &mut impl Write) -> Result<i32> {
    let _ = writeln!(
        err,
        "# gradcheck draws={} hidden={} dim={} classes={} batch={} eps={} tol={} seed={}",
        args.draws, args.hidden, args.dim, args.classes, args.batch, args.eps, args.tol, args.seed
    );
    let shape = ModelShape::new(args.dim, args.hidden, args.classes)?;
    let (worst, used, skipped) = gradcheck_draws(shape, args.batch, args.draws, args.eps, args.seed)?;
    let pass = worst <= args.tol;
    writeln!(
        out,
        "max_relative_error={} draws={} skipped={} tol={} {}",
        sig17(worst),
        used,
        skipped,
        sig17(args.tol),
        if pass { "PASS" } else { "FAIL" }
    )
    .map_err(io_err)?;
    Ok(if pass { EXIT_OK } else { EXIT_RUNTIME })
}

/// Worst relative gradient error over `draws` random (params, batch) pairs.
/// Draws with a hidden pre-activation near a ReLU kink are replaced.
/// Returns `(worst, draws used, draws skipped)`.
pub fn gradcheck_draws(shape: ModelShape, batch: usize, draws: usize, eps: f64, seed: u64) -> Result<(f64, usize, usize)> {
    if batch == 0 || draws == 0 {
        return Err(Error::InvalidArgument("gradcheck needs batch >= 1 and draws >= 1".into()));
    }
    let mut worst = 0.0f64;
    let (mut used, mut skipped, mut k) = (0usize, 0usize, 0u64);
    while used < draws {
        if skipped > 100 * draws {
            return Err(Error::InvalidArgument("every gradcheck draw lands near a ReLU kink".into()));
        }
        let s = derive(seed, Stream::Init, k);
        k += 1;
        let params = init_params(shape, s);
        let batch = random_batch(shape, batch, s)?;
        if let Some(m) = min_abs_preactivation(&params, &batch)? {
            if m < KINK_MARGIN * eps {
                skipped += 1;
                continue;
            }
        }
        let (_, g) = loss_and_grad(&params, &batch)?;
        let fd = finite_diff_grad(&params, &batch, eps)?;
        worst = worst.max(max_relative_error(&g, &fd, 1e-6));
        used += 1;
    }
    Ok((worst, used, skipped))
}

fn random_batch(shape: ModelShape, size: usize, seed: u64) -> Result<Dataset> {
    use rand::Rng;
    let ds = gen_synthetic(shape.num_classes, shape.input_dim, size.div_ceil(shape.num_classes), 2.0, seed)?;
    let mut rng = rng_from(derive(seed, Stream::Batches, 0));
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..ds.len())).collect();
    Ok(ds.subset(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = parse_and_dispatch(std::iter::once("dacfl").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn uniform_matrix_csv() {
        let (code, out, _) = run(&["matrix", "--n", "10", "--kind", "uniform"]);
        assert_eq!(code, 0);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines.iter().all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap() == 0.1)));
    }

    #[test]
    fn missing_config_names_path() {
        let (code, _, err) = run(&["train", "--config", "missing.cfg"]);
        assert_eq!(code, 1);
        assert!(err.contains("missing.cfg"), "{err}");
    }

    #[test]
    fn bad_override_is_config_error() {
        let (code, _, err) = run(&["train", "--algorithm", "sgd"]);
        assert_eq!(code, 1);
        assert!(err.contains("sgd"));
        assert_eq!(run(&["train", "--no-such-flag", "1"]).0, 1);
        assert_eq!(run(&["matrix", "--n", "4", "--kind", "sparse"]).0, 1);
    }

    #[test]
    fn gradcheck_passes() {
        let (code, out, _) = run(&["gradcheck", "--draws", "5"]);
        assert_eq!(code, 0, "{out}");
        assert!(out.contains("PASS"));
    }

    #[test]
    fn consensus_demo_prints_csv() {
        let (code, out, _) = run(&["consensus-demo", "--topology", "uniform"]);
        assert_eq!(code, 0);
        assert!(out.starts_with("method,node,t,estimate,true_mean,abs_err\n"));
        assert_eq!(out.lines().count(), 1 + 3 * 10 * 20);
    }
}
