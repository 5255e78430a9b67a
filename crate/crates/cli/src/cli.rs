//! Argument parsing and dispatch.

use std::path::PathBuf;

use bros_core::memproxy::Method;
use clap::{Args, Parser, Subcommand};

use crate::commands::{
    self, CounterexampleArgs, CounterexampleMode, EstimatorArgs, MemoryArgs, MomentsArgs, Sink, TableFormat,
};
use crate::config::{Alpha, MethodName, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "bros",
    version,
    about = "Randomized-subspace bilevel optimization experiments"
)]
pub struct Cli {
    /// Directory for output files that have no explicit path.
    #[arg(long, global = true, env = "BROS_OUTPUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form vs Monte Carlo projector moments, as CSV.
    VerifyMoments {
        /// Dimensions m (comma separated).
        #[arg(long = "m", value_delimiter = ',', default_value = "3")]
        dims: Vec<usize>,
        /// Ranks r (comma separated); pairs with r > m are skipped.
        #[arg(long = "r", value_delimiter = ',', default_value = "2")]
        ranks: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Mean error and variance of the corrected and naive HVP estimators.
    VerifyEstimators {
        /// Layer shapes `MxN`, comma separated.
        #[arg(long, value_delimiter = ',', value_parser = parse_layer, default_value = "8x5")]
        layers: Vec<(usize, usize)>,
        /// Projector ranks to test (clipped to each layer's row count).
        #[arg(long, value_delimiter = ',', default_value = "2,3,5")]
        ranks: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        conditioning: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// The three-dimensional counterexample under naive and corrected updates.
    Counterexample {
        #[arg(long, value_enum, default_value = "meanfield-naive")]
        mode: CounterexampleMode,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        eval_stride: Option<usize>,
        /// Trace path (default: `<out-dir>/counterexample-<mode>.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write zeros in the wall_time column.
        #[arg(long)]
        no_wall_time: bool,
    },
    /// One solver run from a config file.
    Run(RunArgs),
    /// Peak-memory proxy of one decoder block.
    MemoryProxy {
        /// Methods to report (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "bros,masoba,fdehbo,penalty")]
        method: Vec<Method>,
        /// Reference method for the reduction column.
        #[arg(long, default_value = "masoba")]
        baseline: Method,
        #[arg(long, default_value_t = 1024)]
        n: u64,
        #[arg(long, default_value_t = 1)]
        b: u64,
        /// Sequence length; overrides --bs-ratio.
        #[arg(long)]
        s: Option<u64>,
        /// b·s as a multiple of n.
        #[arg(long, default_value_t = 1.0)]
        bs_ratio: f64,
        #[arg(long, default_value_t = 16)]
        heads: u64,
        /// Subspace rank; overrides --rank-ratio.
        #[arg(long)]
        rank: Option<u64>,
        /// r as a fraction of n (comma separated for a sweep).
        #[arg(long, value_delimiter = ',', default_value = "0.25")]
        rank_ratio: Vec<f64>,
        /// Drop the 2·b·h·s² attention-score term.
        #[arg(long)]
        no_attention: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: TableFormat,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Grid of runs from a config file with a `[sweep]` table, run concurrently.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Config file plus flags that override its values.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub method: Option<MethodName>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// A number or `auto`.
    #[arg(long, value_parser = Alpha::parse_flag)]
    pub alpha: Option<Alpha>,
    #[arg(long)]
    pub alpha_bar: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub c3: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub z_clip: Option<f64>,
    #[arg(long)]
    pub eval_stride: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub no_wall_time: bool,
}

impl std::str::FromStr for MethodName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        MethodName::try_from(s.to_string())
    }
}

fn parse_layer(s: &str) -> Result<(usize, usize), String> {
    let (m, n) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected MxN, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension in {s:?}"));
    Ok((p(m)?, p(n)?))
}

impl RunArgs {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        let s = &mut cfg.solver;
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(v) = self.iterations {
            s.iterations = v;
        }
        if let Some(v) = &self.alpha {
            s.alpha = v.clone();
        }
        if let Some(v) = self.alpha_bar {
            s.alpha_bar = v;
        }
        if let Some(v) = self.c1 {
            s.c1 = v;
        }
        if let Some(v) = self.c2 {
            s.c2 = v;
        }
        if let Some(v) = self.c3 {
            s.c3 = v;
        }
        if let Some(v) = &self.ranks {
            s.ranks = v.clone();
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.z_clip {
            s.z_clip = Some(v);
        }
        if let Some(v) = self.eval_stride {
            s.eval_stride = v;
        }
        if let Some(v) = &self.output {
            cfg.output = Some(v.clone());
        }
        if self.no_wall_time {
            cfg.wall_time = false;
        }
        Ok(cfg)
    }
}

fn sink(output: Option<PathBuf>) -> Sink {
    output.map_or(Sink::Stdout, Sink::File)
}

/// Runs one parsed command; the returned text goes to stdout.
pub fn dispatch(cli: Cli) -> Result<String, CliError> {
    let out_dir = cli.out_dir;
    match cli.command {
        Command::VerifyMoments {
            dims,
            ranks,
            trials,
            seed,
            output,
        } => commands::verify_moments(
            &MomentsArgs {
                dims,
                ranks,
                trials,
                seed,
            },
            &sink(output),
        ),
        Command::VerifyEstimators {
            layers,
            ranks,
            trials,
            seed,
            conditioning,
            output,
        } => commands::verify_estimators(
            &EstimatorArgs {
                layers,
                ranks,
                trials,
                seed,
                conditioning,
            },
            &sink(output),
        ),
        Command::Counterexample {
            mode,
            iterations,
            alpha,
            rank,
            seed,
            eval_stride,
            output,
            no_wall_time,
        } => commands::counterexample(
            mode,
            &CounterexampleArgs {
                iterations,
                alpha,
                rank,
                seed,
                eval_stride,
                output,
                wall_time: !no_wall_time,
            },
            &out_dir,
        ),
        Command::Run(args) => commands::run(&args.load()?, &out_dir),
        Command::MemoryProxy {
            method,
            baseline,
            n,
            b,
            s,
            bs_ratio,
            heads,
            rank,
            rank_ratio,
            no_attention,
            format,
            output,
        } => commands::memory_proxy(
            &MemoryArgs {
                methods: method,
                baseline,
                n,
                b,
                s,
                bs_ratio,
                heads,
                rank,
                rank_ratios: rank_ratio,
                attention: !no_attention,
                format,
            },
            &sink(output),
        ),
        Command::Sweep { run, jobs } => {
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            commands::sweep(&run.load()?, &out_dir, jobs)
        }
    }
}
