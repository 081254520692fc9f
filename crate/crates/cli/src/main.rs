//! Command-line surface: graph analysis, training, threshold calibration,
//! harvesting simulation, and cost reporting.
//!
//! Exit codes: 0 success, 2 parse failure, 3 validation failure,
//! 4 runtime/I-O failure.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use exitq::costmodel::{calibrate_profile, load_cal_table, reduction_report, MacCounts};
use exitq::eats::SchedulerConfig;
use exitq::error::{Error, ErrorCategory};
use exitq::exitpolicy::{calibrate_thresholds, load_calibration, save_calibration};
use exitq::harvestsim::{
    export_report, load_report, load_trace, prepare_bundle, run_simulation, SimConfig,
    SimEventKind,
};
use exitq::netgraph::{build_preset, load_graph, ExitPoint, MultiExitNetwork};
use exitq::quantizer::BitWidth;
use exitq::trainer::dataset::load_dataset;
use exitq::trainer::{train, TrainConfig};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "exitq", version, about = "Quantized multi-exit inference under harvested energy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GraphArgs {
    /// Preset name (resnet_mini, densenet_mini) or path to a graph JSON.
    #[arg(long)]
    graph: String,
    /// Class count when building a preset.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Input shape `CxHxW` when building a preset.
    #[arg(long, default_value = "3x32x32")]
    input: String,
}

#[derive(Subcommand)]
enum Command {
    /// Per-exit MAC, parameter, and size accounting.
    Count {
        #[command(flatten)]
        graph: GraphArgs,
        /// Directory for count.txt and the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a multi-exit network and write a weight container.
    Train {
        #[command(flatten)]
        graph: GraphArgs,
        /// Dataset container manifest.
        #[arg(long)]
        dataset: PathBuf,
        /// Training configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate confidence thresholds against a labeled split.
    Calibrate {
        #[command(flatten)]
        graph: GraphArgs,
        /// Weight container manifest.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Split to calibrate on.
        #[arg(long, default_value = "val")]
        split: String,
        /// Largest tolerated drop in end-to-end accuracy.
        #[arg(long = "max-drop")]
        max_drop: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the harvesting simulation over a charging trace.
    Simulate {
        #[command(flatten)]
        graph: GraphArgs,
        /// fp32 weight container; Q8/Q4 sets are derived from it.
        #[arg(long)]
        weights: PathBuf,
        /// Calibration report with the confidence thresholds.
        #[arg(long)]
        thresholds: PathBuf,
        /// Scheduler + simulation configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Charging-rate trace CSV.
        #[arg(long)]
        trace: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-MAC costs from a measured table and report stage costs.
    Costs {
        #[command(flatten)]
        graph: GraphArgs,
        /// Measured table: `exit,precision,power,delay[,pdp]` rows.
        #[arg(long)]
        table: PathBuf,
        /// Cumulative MAC counts `ee1,ee2,me` overriding the graph's own.
        #[arg(long)]
        macs: Option<String>,
        /// Directory for the scheduler-config fragment and manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a simulation report.
    Report {
        /// Report JSON produced by `simulate`.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    // Die quietly when a pipe downstream closes (e.g. `exitq ... | head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.category() {
                ErrorCategory::Parse => ExitCode::from(2),
                ErrorCategory::Validation => ExitCode::from(3),
                ErrorCategory::Runtime => ExitCode::from(4),
            }
        }
    }
}

fn run(command: Command) -> exitq::Result<()> {
    match command {
        Command::Count { graph, out } => cmd_count(&graph, out.as_deref()),
        Command::Train { graph, dataset, config, seed, out } => {
            cmd_train(&graph, &dataset, &config, seed, &out)
        }
        Command::Calibrate { graph, weights, dataset, split, max_drop, out } => {
            cmd_calibrate(&graph, &weights, &dataset, &split, max_drop, &out)
        }
        Command::Simulate { graph, weights, thresholds, config, trace, seed, out } => {
            cmd_simulate(&graph, &weights, &thresholds, &config, &trace, seed, &out)
        }
        Command::Costs { graph, table, macs, out } => cmd_costs(&graph, &table, macs.as_deref(), out.as_deref()),
        Command::Report { input } => cmd_report(&input),
    }
}

/// Resolve a preset name or graph file into a network, reporting the file
/// (if any) for manifest hashing.
fn resolve_graph(args: &GraphArgs) -> exitq::Result<(MultiExitNetwork, Option<PathBuf>)> {
    if args.graph == "resnet_mini" || args.graph == "densenet_mini" {
        let shape = parse_shape(&args.input)?;
        return Ok((build_preset(&args.graph, args.classes, shape)?, None));
    }
    let path = PathBuf::from(&args.graph);
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "'{}' is neither a preset (resnet_mini, densenet_mini) nor an existing graph file",
            args.graph
        )));
    }
    Ok((load_graph(&path)?, Some(path)))
}

fn parse_shape(s: &str) -> exitq::Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Invalid(format!("input shape must be CxHxW, got '{s}'")));
    }
    let dim = |p: &str| -> exitq::Result<usize> {
        p.parse().map_err(|_| Error::Invalid(format!("bad dimension '{p}' in shape '{s}'")))
    };
    Ok((dim(parts[0])?, dim(parts[1])?, dim(parts[2])?))
}

fn ensure_out_dir(out: &Path) -> exitq::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

fn cmd_count(graph: &GraphArgs, out: Option<&Path>) -> exitq::Result<()> {
    let (net, graph_file) = resolve_graph(graph)?;
    let mut table = String::new();
    table.push_str(&format!(
        "{:<6} {:>14} {:>14} {:>12} {:>12} {:>12} {:>12}\n",
        "stage", "cum_macs", "stage_macs", "params", "fp32_bytes", "q8_bytes", "q4_bytes"
    ));
    let stages = net.stage_macs();
    for exit in ExitPoint::ALL {
        let params = net.count_params_to_exit(exit);
        table.push_str(&format!(
            "{:<6} {:>14} {:>14} {:>12} {:>12} {:>12} {:>12}\n",
            exit.name(),
            net.cumulative_macs(exit),
            stages[exit.index() - 1],
            params,
            net.param_bytes_to_exit(exit, BitWidth::Fp32),
            net.param_bytes_to_exit(exit, BitWidth::Q8),
            net.param_bytes_to_exit(exit, BitWidth::Q4),
        ));
    }
    table.push_str(&format!(
        "{:<6} {:>14} {:>14} {:>12} {:>12} {:>12} {:>12}\n",
        "full",
        "-",
        "-",
        net.count_params(),
        net.param_bytes(BitWidth::Fp32),
        net.param_bytes(BitWidth::Q8),
        net.param_bytes(BitWidth::Q4),
    ));
    print!("{table}");
    if let Some(out) = out {
        ensure_out_dir(out)?;
        let mut m = RunManifest::new("count", None);
        if let Some(f) = &graph_file {
            m.record_input(f)?;
        }
        let table_path = out.join("count.txt");
        std::fs::write(&table_path, &table).map_err(|e| Error::io(table_path.display().to_string(), e))?;
        m.record_output(&table_path);
        m.write(out)?;
    }
    Ok(())
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> exitq::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0);
        Error::parse(path.display().to_string(), line, e.message().to_string())
    })
}

fn cmd_train(
    graph: &GraphArgs,
    dataset: &Path,
    config: &Path,
    seed: Option<u64>,
    out: &Path,
) -> exitq::Result<()> {
    let (net, graph_file) = resolve_graph(graph)?;
    let data = load_dataset(dataset)?;
    let mut train_config: TrainConfig = load_toml(config)?;
    if let Some(seed) = seed {
        train_config.seed = seed;
    }
    let outcome = train(&net, &data, &train_config)?;
    for stat in &outcome.log {
        println!(
            "epoch {:>3}  loss {:>10.6}  train_acc {:>6.4}",
            stat.epoch, stat.mean_loss, stat.train_accuracy
        );
    }
    ensure_out_dir(out)?;
    let mut m = RunManifest::new("train", Some(train_config.seed));
    if let Some(f) = &graph_file {
        m.record_input(f)?;
    }
    m.record_input(dataset)?;
    m.record_input(config)?;
    let weights_path = out.join("weights.json");
    exitq::container::save_weight_set(&outcome.weights, &weights_path)?;
    m.record_output(&weights_path);
    let log_path = out.join("train_log.json");
    let log_text = serde_json::to_string_pretty(&outcome.log)
        .map_err(|e| Error::Invalid(format!("log serialization failed: {e}")))?;
    std::fs::write(&log_path, log_text).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    m.record_output(&log_path);
    m.write(out)?;
    Ok(())
}

fn cmd_calibrate(
    graph: &GraphArgs,
    weights: &Path,
    dataset: &Path,
    split: &str,
    max_drop: f64,
    out: &Path,
) -> exitq::Result<()> {
    let (net, graph_file) = resolve_graph(graph)?;
    let ws = exitq::container::load_weight_set(weights)?;
    let data = load_dataset(dataset)?;
    let split_data = match split {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => return Err(Error::Invalid(format!("unknown split '{other}'"))),
    };
    let report = calibrate_thresholds(
        &net,
        &ws,
        &split_data.inputs,
        &split_data.labels,
        ws.bit_width,
        max_drop,
    )?;
    println!(
        "thresholds t1 {:.2} t2 {:.2} t3 {:.2}",
        report.thresholds.t1, report.thresholds.t2, report.thresholds.t3
    );
    println!(
        "full-depth acc {:.4}  adaptive acc {:.4}",
        report.full_depth_accuracy, report.stats.accuracy
    );
    for exit in ExitPoint::ALL {
        let i = exit.index() - 1;
        println!(
            "{:<4} exit_rate {:.4}  exit_acc {}",
            exit.name(),
            report.stats.exit_rates[i],
            report.stats.exit_accuracy[i]
                .map_or_else(|| "   n/a".to_string(), |a| format!("{a:.4}")),
        );
    }
    ensure_out_dir(out)?;
    let mut m = RunManifest::new("calibrate", None);
    if let Some(f) = &graph_file {
        m.record_input(f)?;
    }
    m.record_input(weights)?;
    m.record_input(dataset)?;
    let path = out.join("thresholds.json");
    save_calibration(&report, &path)?;
    m.record_output(&path);
    m.write(out)?;
    Ok(())
}

/// Simulation configuration file: a scheduler section (hardware profile
/// plus optional threshold overrides) and the simulation-loop settings.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFile {
    scheduler: SchedulerConfig,
    sim: SimSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    #[serde(default = "default_dt")]
    dt: f64,
    e_cap: f64,
    #[serde(default)]
    e_init: f64,
    #[serde(default)]
    seed: u64,
    /// Synthetic inputs used to calibrate activation ranges when deriving
    /// the quantized weight sets.
    #[serde(default = "default_calibration_inputs")]
    calibration_inputs: usize,
}

fn default_dt() -> f64 {
    exitq::harvestsim::DEFAULT_DT
}

fn default_calibration_inputs() -> usize {
    8
}

fn cmd_simulate(
    graph: &GraphArgs,
    weights: &Path,
    thresholds: &Path,
    config: &Path,
    trace_path: &Path,
    seed: Option<u64>,
    out: &Path,
) -> exitq::Result<()> {
    let (net, graph_file) = resolve_graph(graph)?;
    let ws = exitq::container::load_weight_set(weights)?;
    if ws.bit_width != BitWidth::Fp32 {
        return Err(Error::Invalid(
            "simulate needs an fp32 weight container; quantized sets are derived from it".into(),
        ));
    }
    let calibration = load_calibration(thresholds)?;
    let file: SimulateFile = load_toml(config)?;
    let trace = load_trace(trace_path)?;
    let seed = seed.unwrap_or(file.sim.seed);

    // Derive the quantized weight sets with a seeded calibration stream.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let (c, h, w) = net.input_shape;
    let calib: Vec<exitq::Tensor> = (0..file.sim.calibration_inputs.max(1))
        .map(|_| {
            let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            exitq::Tensor { shape: vec![c, h, w], data }
        })
        .collect();
    let bundle = prepare_bundle(&net, ws, &calib)?;

    let sim_config = SimConfig {
        dt: file.sim.dt,
        e_cap: file.sim.e_cap,
        e_init: file.sim.e_init,
        seed,
        profile: file.scheduler.profile(),
        thresholds: file.scheduler.thresholds(&net)?,
        confidence: calibration.thresholds,
    };
    let result = run_simulation(&sim_config, &net, &bundle, &trace)?;
    print_sim_summary(&result);

    ensure_out_dir(out)?;
    let mut m = RunManifest::new("simulate", Some(seed));
    if let Some(f) = &graph_file {
        m.record_input(f)?;
    }
    for input in [weights, thresholds, config, trace_path] {
        m.record_input(input)?;
    }
    let report_path = out.join("report.json");
    export_report(&result, &report_path)?;
    m.record_output(&report_path);
    m.write(out)?;
    Ok(())
}

fn print_sim_summary(result: &exitq::harvestsim::SimResult) {
    let starts = result.start_precisions();
    let exits = result.exit_events();
    println!(
        "samples {}  dt {:.4e}  starts {}  exits {}",
        result.series.time.len(),
        result.dt,
        starts.len(),
        exits.len()
    );
    for exit in ExitPoint::ALL {
        let confidence = exits
            .iter()
            .filter(|(e, r)| *e == exit && *r == exitq::exitpolicy::ExitReason::Confidence)
            .count();
        let energy = exits
            .iter()
            .filter(|(e, r)| *e == exit && *r == exitq::exitpolicy::ExitReason::Energy)
            .count();
        println!("{:<4} confidence {:>5}  energy {:>5}", exit.name(), confidence, energy);
    }
    let depleted = result
        .events
        .iter()
        .filter(|e| matches!(e.kind, SimEventKind::EnergyDepletedMidSegment))
        .count();
    println!("depleted_mid_segment {depleted}");
}

fn cmd_costs(
    graph: &GraphArgs,
    table: &Path,
    macs_override: Option<&str>,
    out: Option<&Path>,
) -> exitq::Result<()> {
    let (net, graph_file) = resolve_graph(graph)?;
    let rows = load_cal_table(table)?;
    let macs = match macs_override {
        Some(spec) => {
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Invalid(format!("--macs must be 'ee1,ee2,me', got '{spec}'")));
            }
            let parse = |p: &str| -> exitq::Result<f64> {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad MAC count '{p}'")))
            };
            MacCounts { ee1: parse(parts[0])?, ee2: parse(parts[1])?, me: parse(parts[2])? }
        }
        None => MacCounts::from_network(&net),
    };
    let model = calibrate_profile(&rows, &macs)?;

    println!(
        "{:<5} {:<5} {:>12} {:>12} {:>12}",
        "exit", "prec", "power_w", "delay_s", "pdp_j"
    );
    for exit in ExitPoint::ALL {
        for bw in [BitWidth::Fp32, BitWidth::Q8, BitWidth::Q4] {
            let c = model.stage(exit, bw, macs.get(exit));
            println!(
                "{:<5} {:<5} {:>12.4e} {:>12.4e} {:>12.4e}",
                exit.name(),
                bw.name(),
                c.power,
                c.delay,
                c.pdp
            );
        }
    }
    println!(
        "packing_ratio q8 {:>7.3}  q4 {:>7.3}",
        model.packing_ratio(BitWidth::Q8),
        model.packing_ratio(BitWidth::Q4)
    );
    let report = reduction_report(&model, &macs);
    for s in &report.stages {
        println!(
            "{:<4} {:<4} power -{:>6.2}%  delay -{:>6.2}%  pdp -{:>6.2}%",
            s.exit.name(),
            s.precision.name(),
            s.power_reduction_pct,
            s.delay_reduction_pct,
            s.pdp_reduction_pct
        );
    }
    for bw in [BitWidth::Fp32, BitWidth::Q8, BitWidth::Q4] {
        let f = model.get(bw);
        println!(
            "fit {:<5} power_per_mac {:.4e} (res {:.2e})  delay_per_mac {:.4e} (res {:.2e})",
            bw.name(),
            f.power_per_mac,
            f.power_residual,
            f.delay_per_mac,
            f.delay_residual
        );
    }

    if let Some(out) = out {
        ensure_out_dir(out)?;
        let profile = model.to_hardware_profile(macs.me, 1.0, 1.2, 1.2)?;
        let fragment = SchedulerConfig {
            e_mac: profile.e_mac,
            delay_mac: profile.delay_mac,
            f_max: profile.f_max,
            kappa_rate: profile.kappa_rate,
            kappa_energy: profile.kappa_energy,
            overrides: Default::default(),
        };
        let text = toml::to_string_pretty(&fragment)
            .map_err(|e| Error::Invalid(format!("fragment serialization failed: {e}")))?;
        let path = out.join("scheduler.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut m = RunManifest::new("costs", None);
        if let Some(f) = &graph_file {
            m.record_input(f)?;
        }
        m.record_input(table)?;
        m.record_output(&path);
        m.write(out)?;
    }
    Ok(())
}

fn cmd_report(input: &Path) -> exitq::Result<()> {
    let result = load_report(input)?;
    print_sim_summary(&result);
    let e_min = result.series.e_sys.iter().cloned().fold(f64::INFINITY, f64::min);
    let e_max = result.series.e_sys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("e_sys range [{e_min:.6e}, {e_max:.6e}]  e_cap {:.6e}", result.e_cap);
    let busy = result.series.precision.iter().filter(|p| p.is_some()).count();
    println!(
        "active fraction {:.4}",
        busy as f64 / result.series.precision.len() as f64
    );
    for event in result.events.iter().take(20) {
        println!("t {:>10.4}  {:?}", event.time, event.kind);
    }
    if result.events.len() > 20 {
        println!("... {} more events", result.events.len() - 20);
    }
    Ok(())
}
