use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tvgc::causality::Direction;
use tvgc::io::{emit_csv, Layout};
use tvgc::pipeline::{run_pipeline, ModelKind, PipelineConfig, Stage};
use tvgc::simulate::{gen_bss, gen_slow_varying, NoiseKind};
use tvgc::Error;

#[derive(Parser)]
#[command(name = "tvgc", version, about = "Time-varying, frequency-specific Granger causality")]
struct Cli {
    /// Worker threads for candidate fits and permutations.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated data set as CSV.
    Simulate(SimulateArgs),
    /// Select the design and write selection.json.
    Select(RunArgs),
    /// Select (unless fixed) and fit; writes posterior.json.
    Fit(RunArgs),
    /// Fit and write the causality traces.
    Causality(RunArgs),
    /// Everything including the cluster-mass permutation test.
    Permtest(RunArgs),
    /// Same as permtest; the full pipeline.
    Pipeline(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    /// Drawn from the state-space model.
    Bss,
    /// Slowly drifting coefficients with a known causal window.
    Slow,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Normal,
    T,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Wide,
    Long,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Wide => Layout::Wide,
            LayoutArg::Long => Layout::Long,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Bss,
    Msbss,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    #[value(name = "x-y")]
    XY,
    #[value(name = "y-x")]
    YX,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "slow")]
    kind: SimKind,
    #[arg(long, default_value_t = 1)]
    order: usize,
    #[arg(long, default_value_t = 500)]
    len: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Plateau of the drifting coefficients.
    #[arg(long, default_value_t = 1.0)]
    value: f64,
    #[arg(long, value_enum, default_value = "normal")]
    noise: NoiseArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "wide")]
    layout: LayoutArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Fixed time-domain order.
    #[arg(long)]
    order: Option<usize>,
    /// Fixed multiscale orders, comma separated, smooth last.
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
    #[arg(long)]
    p_max: Option<usize>,
    #[arg(long)]
    j_max: Option<usize>,
    #[arg(long)]
    scale_p_max: Option<usize>,
    #[arg(long)]
    single_trial_selection: bool,
    #[arg(long)]
    tol_selection: Option<f64>,
    #[arg(long)]
    tol_fit: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long = "direction", value_enum)]
    directions: Vec<DirectionArg>,
    #[arg(long)]
    cluster_level: Option<f64>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    downsample: Option<usize>,
    #[arg(long)]
    smoothing: Option<f64>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig, Error> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$f = v.into(); })* };
        }
        set!(
            layout,
            output,
            p_max,
            j_max,
            scale_p_max,
            tol_selection,
            tol_fit,
            max_iter,
            cluster_level,
            permutations,
            seed,
            downsample
        );
        if self.input.is_some() {
            c.input = self.input.clone();
        }
        if let Some(m) = self.model {
            c.model = match m {
                ModelArg::Bss => ModelKind::Bss,
                ModelArg::Msbss => ModelKind::Msbss,
            };
        }
        if self.order.is_some() {
            c.order = self.order;
        }
        if self.orders.is_some() {
            c.orders = self.orders.clone();
        }
        if self.smoothing.is_some() {
            c.smoothing = self.smoothing;
        }
        if self.single_trial_selection {
            c.single_trial_selection = true;
        }
        if !self.directions.is_empty() {
            c.directions = self
                .directions
                .iter()
                .map(|d| match d {
                    DirectionArg::XY => Direction::XToY,
                    DirectionArg::YX => Direction::YToX,
                })
                .collect();
        }
        Ok(c)
    }
}

fn simulate(a: &SimulateArgs) -> Result<(), Error> {
    let series = match a.kind {
        SimKind::Bss => gen_bss(a.order, a.len, a.trials, a.seed)?.series,
        SimKind::Slow => {
            let noise = match a.noise {
                NoiseArg::Normal => NoiseKind::Normal,
                NoiseArg::T => NoiseKind::student_t5(),
            };
            let s = gen_slow_varying(a.order, a.len, a.trials, a.value, noise, a.seed)?;
            log::info!("causal window {}..={}", s.window.start, s.window.end);
            s.series
        }
    };
    emit_csv(&series, &a.out, a.layout.into())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    let (args, stage) = match &cli.command {
        Command::Simulate(a) => return simulate(a),
        Command::Select(a) => (a, Stage::Select),
        Command::Fit(a) => (a, Stage::Fit),
        Command::Causality(a) => (a, Stage::Causality),
        Command::Permtest(a) | Command::Pipeline(a) => (a, Stage::Permtest),
    };
    let config = args.config()?;
    let manifest = run_pipeline(&config, stage)?;
    println!("{}", config.output.join("manifest.json").display());
    log::info!("wrote {} files, config hash {}", manifest.files.len(), manifest.config_hash);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
