//! `gridshare`: allocation, Markov analysis and parameter studies from the command line.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gridshare::allocator::{Allocator, StateVector};
use gridshare::experiments::{
    equal_fractions, estimate_critical_rate, lot1_fractions, run_heatmap, run_sweep, CriticalStatus, Method,
    RateAxis, SweepTable,
};
use gridshare::markov::{exact_metrics, simulate, stationary_distribution, ArrivalSpec, SimulationConfig};
use gridshare::NetworkConfig;

use config::{FileConfig, NetworkFlags, SimFlags};
use output::{Manifest, PointRows, RunInfo, Table};

#[derive(Parser, Debug)]
#[command(name = "gridshare", version, about = "Proportional-fair EV charging on a line distribution network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Proportional-fair power allocation for one occupancy state.
    Allocate {
        #[command(flatten)]
        net: NetworkArgs,
        /// EVs per lot, comma separated (lot 1 first).
        #[arg(long, value_delimiter = ',', required = true)]
        state: Vec<u32>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Event-driven simulation of the occupancy chain.
    Simulate {
        #[command(flatten)]
        net: NetworkArgs,
        #[command(flatten)]
        arrivals: ArrivalArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Exact stationary metrics of the occupancy chain.
    Stationary {
        #[command(flatten)]
        net: NetworkArgs,
        #[command(flatten)]
        arrivals: ArrivalArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-lot metrics over a grid of arrival rates.
    Sweep {
        #[command(flatten)]
        net: NetworkArgs,
        #[command(flatten)]
        grid: SweepArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Critical arrival rate by the largest jump in total mean number.
    Critical {
        #[command(flatten)]
        net: NetworkArgs,
        #[command(flatten)]
        grid: SweepArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Total mean number over total arrival rate and lot-1 fraction.
    Heatmap {
        #[command(flatten)]
        net: NetworkArgs,
        /// Total arrival rates, `start:stop:step` or a list [default: 0.1:1.2:0.05].
        #[arg(long)]
        total_grid: Option<String>,
        /// Lot-1 fractions, `start:stop:step` or a list [default: 0.05:0.95:0.05].
        #[arg(long)]
        fraction_grid: Option<String>,
        /// exact, sim or auto [default: auto].
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args, Debug)]
struct NetworkArgs {
    /// distflow, linearized or both.
    #[arg(long)]
    model: Option<String>,
    /// Number of parking lots N [default: 2].
    #[arg(long)]
    stations: Option<usize>,
    /// Per-edge resistance r [default: 0.1].
    #[arg(long)]
    resistance: Option<f64>,
    /// Allowed relative voltage drop [default: 0.05].
    #[arg(long)]
    delta: Option<f64>,
    /// Parking spaces per lot K [default: 100].
    #[arg(long)]
    capacity: Option<u32>,
    /// TOML file with default settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl NetworkArgs {
    fn flags(&self) -> NetworkFlags<'_> {
        NetworkFlags {
            model: self.model.as_deref(),
            stations: self.stations,
            resistance: self.resistance,
            delta: self.delta,
            capacity: self.capacity,
        }
    }
}

#[derive(Args, Debug)]
struct ArrivalArgs {
    /// Per-lot arrival rates; a single value applies to every lot.
    #[arg(long, value_delimiter = ',', conflicts_with = "total_rate")]
    lambda: Option<Vec<f64>>,
    /// Total arrival rate, split by --fractions (equal split by default).
    #[arg(long)]
    total_rate: Option<f64>,
    /// Per-lot fractions of the total rate.
    #[arg(long, value_delimiter = ',', requires = "total_rate")]
    fractions: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Master seed [default: $GRIDSHARE_SEED, else 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated time per replication [default: 200000].
    #[arg(long)]
    horizon: Option<f64>,
    /// Discarded warm-up time [default: 20000].
    #[arg(long)]
    burn_in: Option<f64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Batches per replication for the batch-means interval.
    #[arg(long)]
    batches: Option<usize>,
}

impl SimArgs {
    fn flags(&self) -> SimFlags {
        SimFlags {
            seed: self.seed,
            horizon: self.horizon,
            burn_in: self.burn_in,
            replications: self.replications,
            batches: self.batches,
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Rate grid, `start:stop:step` or a list [default: 0.02:0.40:0.005].
    #[arg(long)]
    grid: Option<String>,
    /// Whether grid values are per-lot or total rates [default: per-lot].
    #[arg(long)]
    axis: Option<String>,
    /// Lot-1 fractions of the total rate; the rest is split evenly [default: equal split].
    #[arg(long = "fraction-1", value_delimiter = ',')]
    fraction_1: Option<Vec<f64>>,
    /// exact, sim or auto [default: auto].
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Directory for CSV output and the run manifest.
    #[arg(long, default_value = "gridshare-out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Allocate { net, state, out } => cmd_allocate(&net, &state, &out.out),
        Command::Simulate { net, arrivals, sim, out } => cmd_point(&net, &arrivals, Some(&sim), &out.out),
        Command::Stationary { net, arrivals, out } => cmd_point(&net, &arrivals, None, &out.out),
        Command::Sweep { net, grid, sim, out } => cmd_sweep(&net, &grid, &sim, &out.out, false),
        Command::Critical { net, grid, sim, out } => cmd_sweep(&net, &grid, &sim, &out.out, true),
        Command::Heatmap { net, total_grid, fraction_grid, method, sim, out } => {
            cmd_heatmap(&net, total_grid, fraction_grid, method, &sim, &out.out)
        }
    }
}

fn cmd_allocate(net: &NetworkArgs, state: &[u32], out: &Path) -> Result<()> {
    let file = FileConfig::load(net.config.as_deref())?;
    let cfgs = config::networks(&net.flags(), &file, "distflow")?;
    let mut manifest = Manifest::new("allocate");
    config::record_network(&mut manifest, &cfgs);
    manifest.set("state", state.iter().map(u32::to_string).collect::<Vec<_>>().join(","));

    let mut table = Table::new(output::ALLOCATION_HEADER);
    for cfg in &cfgs {
        let x = StateVector::new(state.to_vec(), cfg)?;
        let p = gridshare::allocator::allocate(&x, cfg)?;
        let line = p.iter().map(|v| output::sig7(*v)).collect::<Vec<_>>().join(", ");
        if cfgs.len() > 1 {
            println!("{}: {line}", cfg.model());
        } else {
            println!("{line}");
        }
        for (j, v) in p.iter().enumerate() {
            table.push(vec![cfg.model().to_string(), (j + 1).to_string(), state[j].to_string(), output::sig7(*v)]);
        }
    }
    output::write_run(out, manifest, &[("allocation.csv", &table)])?;
    Ok(())
}

/// Flags win over the config file; within each source `lambda` wins over `total_rate`.
fn arrival_spec(args: &ArrivalArgs, file: &FileConfig, n: usize) -> Result<ArrivalSpec> {
    let fractions = args.fractions.clone().or_else(|| file.fractions.clone());
    if let Some(l) = &args.lambda {
        rates_spec(l.clone(), n)
    } else if let Some(t) = args.total_rate {
        total_spec(t, fractions, n)
    } else if let Some(l) = &file.lambda {
        rates_spec(l.clone(), n)
    } else if let Some(t) = file.total_rate {
        total_spec(t, fractions, n)
    } else {
        bail!("arrival rates are required: pass --lambda or --total-rate")
    }
}

fn rates_spec(mut l: Vec<f64>, n: usize) -> Result<ArrivalSpec> {
    if l.len() == 1 {
        l = vec![l[0]; n];
    }
    Ok(ArrivalSpec::from_rates(l)?)
}

fn total_spec(total: f64, fractions: Option<Vec<f64>>, n: usize) -> Result<ArrivalSpec> {
    let f = fractions.unwrap_or_else(|| equal_fractions(n));
    Ok(ArrivalSpec::from_total(total, &f)?)
}

fn cmd_point(net: &NetworkArgs, arrivals: &ArrivalArgs, sim: Option<&SimArgs>, out: &Path) -> Result<()> {
    let name = if sim.is_some() { "simulate" } else { "stationary" };
    let file = FileConfig::load(net.config.as_deref())?;
    let cfgs = config::networks(&net.flags(), &file, "distflow")?;
    let spec = arrival_spec(arrivals, &file, cfgs[0].n_stations())?;
    let mut manifest = Manifest::new(name);
    config::record_network(&mut manifest, &cfgs);
    manifest.set_list("lambda", spec.rates());
    let sim_cfg = sim.map(|s| config::simulation(&s.flags(), &file)).transpose()?;
    if let Some(s) = &sim_cfg {
        config::record_simulation(&mut manifest, s);
    }

    let total = spec.total();
    let fraction_1 = (total > 0.0).then(|| spec.rates()[0] / total);
    let mut table = Table::new(output::SWEEP_HEADER);
    for cfg in &cfgs {
        let allocator = Allocator::new(cfg.clone());
        let (lots, method, run) = match &sim_cfg {
            Some(s) => {
                let r = simulate(&spec, &allocator, s)?;
                (r.lots, "sim", Some(RunInfo { seed: s.seed, horizon: s.horizon, burn_in: s.burn_in }))
            }
            None => {
                let pi = stationary_distribution(&spec, &allocator)?;
                eprintln!("{}: stationary residual {:.3e}", cfg.model(), pi.residual());
                (exact_metrics(&pi, &spec)?, "exact", None)
            }
        };
        for (j, l) in lots.iter().enumerate() {
            let time = l.mean_charging_time.map_or_else(|| output::NA.into(), |t| t.to_string());
            println!("{} lot {}: mean number {}, mean time {time}, blocking {:.7}", cfg.model(), j + 1, l.mean_number, l.blocking.value);
        }
        output::push_point(
            &mut table,
            &PointRows {
                model: cfg.model(),
                method,
                lambdas: spec.rates(),
                total_rate: total,
                fraction_1,
                lots: Some(&lots),
                run,
            },
        );
    }
    output::write_run(out, manifest, &[("sweep.csv", &table)])?;
    Ok(())
}

fn parse_method(flag: Option<String>, file: &FileConfig) -> Result<Method> {
    Ok(flag.or_else(|| file.method.clone()).as_deref().unwrap_or("auto").parse::<Method>()?)
}

/// Shared setup of `sweep` and `critical`.
fn cmd_sweep(net: &NetworkArgs, args: &SweepArgs, sim: &SimArgs, out: &Path, critical: bool) -> Result<()> {
    let name = if critical { "critical" } else { "sweep" };
    let file = FileConfig::load(net.config.as_deref())?;
    let cfgs = config::networks(&net.flags(), &file, "both")?;
    let n = cfgs[0].n_stations();
    let grid_text = args.grid.clone().or_else(|| file.grid.clone()).unwrap_or_else(|| "0.02:0.40:0.005".into());
    let grid = config::parse_grid(&grid_text)?;
    let axis: RateAxis =
        args.axis.clone().or_else(|| file.axis.clone()).as_deref().unwrap_or("per-lot").parse()?;
    let fractions: Vec<Vec<f64>> = match args.fraction_1.clone().or_else(|| file.fraction_1.clone()) {
        Some(fs) => fs.iter().map(|&f| lot1_fractions(f, n)).collect::<Result<_, _>>()?,
        None => vec![equal_fractions(n)],
    };
    let method = parse_method(args.method.clone(), &file)?;
    let sim_cfg = config::simulation(&sim.flags(), &file)?;

    let mut manifest = Manifest::new(name);
    config::record_network(&mut manifest, &cfgs);
    manifest.set("grid", &grid_text);
    manifest.set("axis", axis.as_str());
    manifest.set(
        "fraction_1",
        fractions.iter().map(|f| f[0].to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.set("method", method.as_str());
    config::record_simulation(&mut manifest, &sim_cfg);

    let table = run_models(&cfgs, |allocator| {
        Ok(run_sweep(&grid, axis, &fractions, allocator, &sim_cfg, method)?)
    })?;
    let failures = table.points.iter().filter(|p| p.outcome.is_err()).count();
    if failures > 0 {
        eprintln!("warning: {failures} grid point(s) failed and are marked NA");
        for p in table.points.iter().filter(|p| p.outcome.is_err()) {
            eprintln!("  {} rate {}: {}", p.model, p.rate, p.outcome.as_ref().unwrap_err());
        }
    }
    let sweep_csv = output::sweep_table(&table);
    if !critical {
        output::write_run(out, manifest, &[("sweep.csv", &sweep_csv)])?;
        println!("{} rows written to {}", sweep_csv.len(), out.join("sweep.csv").display());
        return Ok(());
    }

    let estimates = estimate_critical_rate(&table)?;
    for e in &estimates {
        let rate = e.rate.map_or_else(|| output::NA.to_string(), output::sig7);
        let note = match &e.status {
            CriticalStatus::Clear => String::new(),
            CriticalStatus::NoExplosion => " (no explosion: all jumps tie)".into(),
            CriticalStatus::Tie(c) => format!(" (tie between midpoints {c:?})"),
        };
        println!("{} f1={}: critical {} rate {rate}{note}", e.model, output::sig7(e.fraction_1()), axis.as_str());
    }
    let critical_csv = output::critical_table(&estimates);
    output::write_run(out, manifest, &[("critical.csv", &critical_csv), ("sweep.csv", &sweep_csv)])?;
    Ok(())
}

fn run_models(cfgs: &[NetworkConfig], f: impl Fn(&Allocator) -> Result<SweepTable>) -> Result<SweepTable> {
    let mut acc: Option<SweepTable> = None;
    for cfg in cfgs {
        let t = f(&Allocator::new(cfg.clone())).with_context(|| format!("{} model", cfg.model()))?;
        acc = Some(match acc {
            None => t,
            Some(a) => a.merge(t)?,
        });
    }
    acc.context("no model selected")
}

fn cmd_heatmap(
    net: &NetworkArgs,
    total_grid: Option<String>,
    fraction_grid: Option<String>,
    method: Option<String>,
    sim: &SimArgs,
    out: &Path,
) -> Result<()> {
    let file = FileConfig::load(net.config.as_deref())?;
    let cfgs = config::networks(&net.flags(), &file, "both")?;
    let totals_text = total_grid.or_else(|| file.total_grid.clone()).unwrap_or_else(|| "0.1:1.2:0.05".into());
    let fractions_text =
        fraction_grid.or_else(|| file.fraction_grid.clone()).unwrap_or_else(|| "0.05:0.95:0.05".into());
    let totals = config::parse_grid(&totals_text)?;
    let fractions = config::parse_grid(&fractions_text)?;
    let method = parse_method(method, &file)?;
    let sim_cfg: SimulationConfig = config::simulation(&sim.flags(), &file)?;

    let mut manifest = Manifest::new("heatmap");
    config::record_network(&mut manifest, &cfgs);
    manifest.set("total_grid", &totals_text);
    manifest.set("fraction_grid", &fractions_text);
    manifest.set("method", method.as_str());
    config::record_simulation(&mut manifest, &sim_cfg);

    let mut cells = Vec::new();
    for cfg in &cfgs {
        let map = run_heatmap(&totals, &fractions, &Allocator::new(cfg.clone()), &sim_cfg, method)
            .with_context(|| format!("{} model", cfg.model()))?;
        cells.extend(map.cells);
    }
    let failures = cells.iter().filter(|c| c.total_mean_number.is_err()).count();
    if failures > 0 {
        eprintln!("warning: {failures} cell(s) failed and are marked NA");
    }
    let table = output::heatmap_table(&gridshare::experiments::HeatmapTable { cells });
    output::write_run(out, manifest, &[("heatmap.csv", &table)])?;
    println!("{} cells written to {}", table.len(), out.join("heatmap.csv").display());
    Ok(())
}
