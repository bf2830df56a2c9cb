use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tilestream::ledger::{self, Ledger};
use tilestream::network::{Network, NetworkSpec};
use tilestream::probe::{canonical_tile, probe};
use tilestream::stream::{plan_for_grid, saliency, PlanMode};
use tilestream::{context, sten, DType, Element};
use tilestream_cli::bench::{run_bench, BenchOptions};
use tilestream_cli::equiv::{run_equiv, EquivOptions};
use tilestream_cli::input::{parse_grid, InputSource};
use tilestream_cli::train::{train_demo, TrainMode, TrainOptions};
use tilestream_cli::{exit, exit_code, retain_freed_memory};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Stream,
    Full,
    Both,
}

#[derive(Debug, Parser)]
#[command(name = "tilestream", version, about = "Tile-streamed CNN training on large images")]
struct Cli {
    /// Overrides the dtype declared in the network file.
    #[arg(long, global = true, value_enum)]
    dtype: Option<DtypeArg>,
    /// Seed for weight initialization and generated data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for tile parallelism; 1 runs tiles sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Writes the allocation ledger (summary and event log) as JSON.
    #[arg(long, global = true, value_name = "FILE")]
    ledger: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compares streamed and conventional forward/backward passes.
    Equiv {
        #[arg(long)]
        net: PathBuf,
        /// Tensor file or random:HxW:seed.
        #[arg(long)]
        input: InputSource,
        /// Tile grid, e.g. 2x2.
        #[arg(long, default_value = "2x2")]
        tiles: String,
        /// Channels of a generated input.
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Directory for predictions and gradients as tensor files.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Shrinks the planned overlap (negative control).
        #[arg(long, default_value_t = 0)]
        reduce_overlap: usize,
    },
    /// Measures the invalid borders and output stride of the streamed prefix.
    Probe {
        #[arg(long)]
        net: PathBuf,
        /// Probe tile, e.g. 64x64; defaults to a size that always works.
        #[arg(long)]
        tile: Option<String>,
        /// Spatial rank when no tile is given.
        #[arg(long, default_value_t = 2)]
        rank: usize,
    },
    /// Times passes and records peak ledger bytes as CSV.
    Bench {
        #[arg(long)]
        net: PathBuf,
        /// Square input sides, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1024")]
        sizes: Vec<usize>,
        /// Square tile sides, comma separated; a side covering the input
        /// runs the conventional passes.
        #[arg(long, value_delimiter = ',', default_value = "1024,527")]
        tiles: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Inputs wider than this are accounted without arithmetic.
        #[arg(long, default_value_t = 1024)]
        shape_only_above: usize,
    },
    /// Trains a small network on synthetic images conventionally and streamed.
    TrainDemo {
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long, default_value_t = 60)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value = "2x2")]
        tiles: String,
    },
    /// Writes a saliency map of one output class as a tensor file.
    Saliency {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        input: InputSource,
        #[arg(long, default_value = "2x2")]
        tiles: String,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_spec(path: &Path, dtype: Option<DtypeArg>) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec: NetworkSpec = text.parse()?;
    if let Some(d) = dtype {
        spec.dtype = match d {
            DtypeArg::F32 => DType::F32,
            DtypeArg::F64 => DType::F64,
        };
    }
    Ok(spec)
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn print_csv<S: Serialize>(rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Network with the sample shape of `input`.
fn network_for<T: Element>(spec: &NetworkSpec, input: &tilestream::Tensor<T>, seed: u64) -> Result<Network<T>> {
    Ok(Network::init(spec, &input.shape()[1..], seed)?)
}

fn equiv<T: Element>(cli: &Cli, spec: &NetworkSpec) -> Result<i32> {
    let Command::Equiv { input, tiles, channels, dump, reduce_overlap, .. } = &cli.command else {
        unreachable!()
    };
    let x = input.load::<T>(*channels)?;
    let net = network_for(spec, &x, cli.seed)?;
    let report = run_equiv(
        &net,
        &x,
        &EquivOptions {
            grid: &parse_grid(tiles)?,
            reduce_overlap: *reduce_overlap,
            dump: dump.as_deref(),
        },
    )?;
    print_json(&report)?;
    Ok(if report.pass { exit::OK } else { exit::EQUIVALENCE })
}

fn saliency_cmd<T: Element>(cli: &Cli, spec: &NetworkSpec) -> Result<i32> {
    let Command::Saliency { input, tiles, class, channels, out, .. } = &cli.command else {
        unreachable!()
    };
    let x = input.load::<T>(*channels)?;
    let net = network_for(spec, &x, cli.seed)?;
    let plan = plan_for_grid(spec, x.spatial(), &parse_grid(tiles)?, PlanMode::BackwardWithInput)?;
    let map = saliency(&net, &x, &plan, *class)?;
    sten::write(out, &map)?;
    print_json(&serde_json::json!({
        "out": out.display().to_string(),
        "shape": map.shape(),
        "tiles": plan.tile_count(),
    }))?;
    Ok(exit::OK)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Equiv { net, .. } => {
            let spec = load_spec(net, cli.dtype)?;
            match spec.dtype {
                DType::F32 => equiv::<f32>(cli, &spec),
                DType::F64 => equiv::<f64>(cli, &spec),
            }
        }
        Command::Saliency { net, .. } => {
            let spec = load_spec(net, cli.dtype)?;
            match spec.dtype {
                DType::F32 => saliency_cmd::<f32>(cli, &spec),
                DType::F64 => saliency_cmd::<f64>(cli, &spec),
            }
        }
        Command::Probe { net, tile, rank } => {
            let spec = load_spec(net, cli.dtype)?;
            let tile = match tile {
                Some(t) => parse_grid(t)?,
                None => canonical_tile(&spec, *rank)?,
            };
            let report = probe(&spec, &tile)?;
            print_json(&serde_json::json!({
                "output_stride": report.output_stride,
                "forward_overlap": report.forward_overlap(),
                "tile": tile,
                "layers": report.layers,
            }))?;
            Ok(exit::OK)
        }
        Command::Bench { net, sizes, tiles, repeats, channels, shape_only_above } => {
            let spec = load_spec(net, cli.dtype)?;
            let opts = BenchOptions {
                sizes: sizes.clone(),
                tiles: tiles.clone(),
                repeats: *repeats,
                channels: *channels,
                seed: cli.seed,
                shape_only_above: *shape_only_above,
            };
            let rows = match spec.dtype {
                DType::F32 => run_bench::<f32>(&spec, &opts)?,
                DType::F64 => run_bench::<f64>(&spec, &opts)?,
            };
            print_csv(&rows)?;
            Ok(exit::OK)
        }
        Command::TrainDemo { epochs, mode, samples, batch, lr, tiles } => {
            let opts = TrainOptions {
                epochs: *epochs,
                seed: cli.seed,
                mode: match mode {
                    ModeArg::Stream => TrainMode::Stream,
                    ModeArg::Full => TrainMode::Full,
                    ModeArg::Both => TrainMode::Both,
                },
                samples: *samples,
                side: 64,
                batch: *batch,
                lr: *lr,
                grid: parse_grid(tiles)?,
            };
            if opts.samples == 0 {
                bail!(tilestream::Error::Usage("--samples must be positive".into()));
            }
            let rows = match cli.dtype {
                Some(DtypeArg::F32) => train_demo::<f32>(&opts)?,
                _ => train_demo::<f64>(&opts)?,
            };
            print_csv(&rows)?;
            Ok(exit::OK)
        }
    }
}

fn write_ledger(path: &Path, ledger: &Arc<Ledger>) -> Result<()> {
    let json = serde_json::json!({ "report": ledger.report(), "events": ledger.events() });
    std::fs::write(path, serde_json::to_vec_pretty(&json)?)
        .with_context(|| format!("writing ledger {}", path.display()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    retain_freed_memory();
    let parallel = cli.threads.map_or(true, |n| n > 1);
    if let Some(n) = cli.threads.filter(|&n| n > 1) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::RESOURCE as u8);
        }
    }
    let ledger = cli.ledger.as_ref().map(|_| Ledger::with_event_log());
    let result = context::with_parallelism(parallel, || match &ledger {
        Some(l) => ledger::scope(l, || run(&cli)),
        None => run(&cli),
    });
    let result = result.and_then(|code| {
        if let (Some(path), Some(l)) = (&cli.ledger, &ledger) {
            write_ledger(path, l)?;
        }
        Ok(code)
    });
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
