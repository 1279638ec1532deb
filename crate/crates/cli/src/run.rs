//! Subcommand execution and file emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use piconet_core::channel::ChannelModel;
use piconet_core::minenergy::{
    phi_lower, phi_upper, phi_upper_unoptimized, BoundOptions, EnergyFunctionResult, MinEnergyError,
};
use piconet_core::phy::{db_to_linear, LinkModel, PhyModeSet, TabulatedLink};
use piconet_core::sim::{replicate_seed, run_episode, sweep_v, SimConfig, SimError, SlotRecord, SweepPoint};
use thiserror::Error;

use crate::config::{ConfigError, Curve, ExperimentConfig};
use crate::manifest::{sha256_hex, Manifest, OutputEntry};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("unstable: {0}")]
    Unstable(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Unstable(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

fn bound_error(e: MinEnergyError) -> CliError {
    match e {
        MinEnergyError::InfeasibleRate { .. } => CliError::Infeasible(e.to_string()),
        e => CliError::Other(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    PhyCurves,
    Bounds,
    MinEnergy,
    Simulate,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PhyCurves => "phy-curves",
            Command::Bounds => "bounds",
            Command::MinEnergy => "min-energy",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Command::PhyCurves, Command::Bounds, Command::MinEnergy, Command::Simulate, Command::Sweep]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

/// What one command produced, before anything is written.
#[derive(Debug, Default)]
struct Outcome {
    files: Vec<(String, String)>,
    seeds: Vec<u64>,
    /// Raised after the files and manifest are on disk.
    flag: Option<CliError>,
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub command: Command,
    pub config: ExperimentConfig,
    pub config_text: String,
    pub config_file: String,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

/// Runs the command, writes its files and manifest, then reports any flag.
pub fn execute(req: &RunRequest) -> Result<RunReport, CliError> {
    let cfg = &req.config;
    let outcome = match req.command {
        Command::PhyCurves => phy_curves(cfg)?,
        Command::Bounds => bounds(cfg)?,
        Command::MinEnergy => min_energy(cfg)?,
        Command::Simulate => simulate(cfg)?,
        Command::Sweep => sweep(cfg)?,
    };
    std::fs::create_dir_all(&req.out_dir)?;
    let mut outputs = Vec::with_capacity(outcome.files.len());
    for (name, body) in &outcome.files {
        std::fs::write(req.out_dir.join(name), body)?;
        outputs.push(OutputEntry { file: name.clone(), sha256: sha256_hex(body.as_bytes()) });
    }
    let manifest = Manifest {
        tool: "piconet".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: req.command.name().into(),
        config_file: req.config_file.clone(),
        config_sha256: sha256_hex(req.config_text.as_bytes()),
        config: req.config_text.clone(),
        seed: cfg.run.seed,
        seeds: outcome.seeds,
        outputs,
    };
    let manifest_path = req.out_dir.join(Manifest::file_name(req.command.name()));
    std::fs::write(&manifest_path, manifest.to_json())?;
    match outcome.flag {
        Some(e) => Err(e),
        None => Ok(RunReport { manifest, manifest_path }),
    }
}

/// Reruns a manifest into `out_dir` and lists the outputs whose hash changed.
pub fn replay(manifest_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<Vec<String>, CliError> {
    let m = Manifest::load(manifest_path).map_err(CliError::Other)?;
    let command = Command::from_name(&m.command).ok_or_else(|| CliError::Other(format!("unknown command {}", m.command)))?;
    let mut config = crate::config::parse_config_str(&m.config)?;
    config.run.seed = seed.unwrap_or(m.seed);
    let req = RunRequest {
        command,
        config,
        config_text: m.config.clone(),
        config_file: m.config_file.clone(),
        out_dir: out_dir.to_path_buf(),
    };
    let report = match execute(&req) {
        Ok(r) => r.manifest,
        Err(CliError::Infeasible(_) | CliError::Unstable(_)) => Manifest::load(&out_dir.join(Manifest::file_name(&m.command)))
            .map_err(CliError::Other)?,
        Err(e) => return Err(e),
    };
    Ok(m.outputs
        .iter()
        .filter(|o| !report.outputs.contains(o))
        .map(|o| o.file.clone())
        .collect())
}

fn sim_link(cfg: &ExperimentConfig, modes: PhyModeSet) -> Box<dyn LinkModel> {
    if cfg.phy.tabulate {
        Box::new(TabulatedLink::with_default_grid(modes))
    } else {
        Box::new(modes)
    }
}

fn bound_options(cfg: &ExperimentConfig) -> BoundOptions {
    BoundOptions {
        grid_per_dim: cfg.bounds.grid_per_dim,
        n_samples: cfg.bounds.n_samples,
        screen_samples: cfg.bounds.screen_samples,
        seed: cfg.run.seed,
        ..BoundOptions::default()
    }
}

fn require_sensors(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.sensors.is_empty() {
        return Err(ConfigError { line: None, column: None, message: "no [[sensors]] tables".into() }.into());
    }
    Ok(())
}

/// Total offered rate must stay below the largest mode rate.
fn check_offered_load(cfg: &ExperimentConfig, modes: &PhyModeSet) -> Result<(), CliError> {
    let total: f64 = cfg.sensors.iter().map(|a| a.mean_rate()).sum();
    if total >= modes.max_rate() {
        return Err(CliError::Infeasible(format!(
            "offered load {total} is not below the largest mode rate {}",
            modes.max_rate()
        )));
    }
    Ok(())
}

fn phy_curves(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let modes = cfg.modes()?;
    let mut csv = String::from("snr_db,mode_label,p_success,effective_rate\n");
    for snr_db in cfg.phy_curves.grid() {
        let snr = db_to_linear(snr_db);
        for (l, mode) in modes.modes().iter().enumerate() {
            let p = modes.success_probability(l, snr);
            writeln!(csv, "{snr_db},{},{p},{}", mode.label, modes.rate(l) * p).unwrap();
        }
        let (mu, l) = modes.effective_rate(snr);
        let p = if l == 0 { 0.0 } else { modes.success_probability(l, snr) };
        writeln!(csv, "{snr_db},best,{p},{mu}").unwrap();
    }
    Ok(Outcome { files: vec![("phy_curves.csv".into(), csv)], ..Outcome::default() })
}

fn bounds(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let modes = cfg.modes()?;
    let channel = cfg.channel_model()?;
    let opts = bound_options(cfg);
    let mut csv = String::from("lambda,phi_lower,phi_upper,phi_upper_unoptimized,omega,iterations\n");
    let mut infeasible = Vec::new();
    for &lam in &cfg.bounds.lambda {
        let lambda = vec![lam; cfg.bounds.sensors];
        let solve = || -> Result<_, MinEnergyError> {
            Ok((
                phi_lower(&lambda, &modes, &channel, &opts)?,
                phi_upper(&lambda, &modes, &channel, &opts)?,
                phi_upper_unoptimized(&lambda, &modes, &channel, &opts)?,
            ))
        };
        match solve() {
            Ok((lo, up, un)) => {
                writeln!(csv, "{lam},{},{},{},{},{}", lo.value, up.value, un.value, up.omega[0], up.iterations).unwrap();
            }
            Err(e @ MinEnergyError::InfeasibleRate { .. }) => {
                log::warn!("lambda {lam}: {e}");
                infeasible.push(lam);
            }
            Err(e) => return Err(bound_error(e)),
        }
    }
    let flag = (!infeasible.is_empty()).then(|| CliError::Infeasible(format!("no feasible policy at lambda {infeasible:?}")));
    Ok(Outcome { files: vec![("bounds.csv".into(), csv)], seeds: vec![cfg.run.seed], flag })
}

fn min_energy(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    require_sensors(cfg)?;
    let modes = cfg.modes()?;
    let channel = cfg.channel_model()?;
    check_offered_load(cfg, &modes)?;
    let opts = bound_options(cfg);
    let lambda: Vec<f64> = cfg.sensors.iter().map(|a| a.mean_rate()).collect();
    let lo = phi_lower(&lambda, &modes, &channel, &opts).map_err(bound_error)?;
    let up = phi_upper(&lambda, &modes, &channel, &opts).map_err(bound_error)?;
    let un = phi_upper_unoptimized(&lambda, &modes, &channel, &opts).map_err(bound_error)?;
    let mut summary = String::from("bound,value,dual_bound,iterations,converged\n");
    for (name, r) in [("phi_lower", &lo), ("phi_upper", &up), ("phi_upper_unoptimized", &un)] {
        writeln!(summary, "{name},{},{},{},{}", r.value, r.dual_bound, r.iterations, r.converged as u8).unwrap();
    }
    Ok(Outcome {
        files: vec![
            ("min_energy.csv".into(), summary),
            ("min_energy_sensors.csv".into(), sensor_table(&lambda, &up)),
            ("min_energy_thresholds.csv".into(), threshold_table(&up, &modes)),
        ],
        seeds: vec![cfg.run.seed],
        flag: None,
    })
}

fn sensor_table(lambda: &[f64], r: &EnergyFunctionResult) -> String {
    let mut csv = String::from("sensor,lambda,omega,rate_achieved\n");
    for (k, lam) in lambda.iter().enumerate() {
        writeln!(csv, "{},{lam},{},{}", k + 1, r.omega[k], r.rate_achieved[k]).unwrap();
    }
    csv
}

fn threshold_table(r: &EnergyFunctionResult, modes: &PhyModeSet) -> String {
    let mut csv = String::from("mode_label,threshold_snr,threshold_snr_db,rate\n");
    for (i, (&a, &rate)) in r.thresholds.a.iter().zip(&r.thresholds.r).enumerate() {
        let label = r.thresholds.modes.get(i).and_then(|&l| modes.modes().get(l)).map_or("?", |m| m.label.as_str());
        writeln!(csv, "{label},{a},{},{rate}", 10.0 * a.log10()).unwrap();
    }
    csv
}

fn sim_config(cfg: &ExperimentConfig, curve: &Curve, v: f64) -> SimConfig {
    SimConfig {
        arrivals: cfg.sensors.clone(),
        policy: curve.policy,
        v,
        p_max: cfg.policy.p_max,
        tau: curve.tau,
        slots: cfg.run.slots,
        warmup: cfg.run.warmup(),
        record_trace: cfg.run.trace,
    }
}

fn numbered(prefix: &str, k: usize) -> String {
    (1..=k).map(|i| format!(",{prefix}_{i}")).collect()
}

fn joined(xs: &[f64]) -> String {
    xs.iter().map(|x| format!(",{x}")).collect()
}

fn trace_csv(trace: &[SlotRecord]) -> String {
    let mut csv = String::from("slot,sensor,mode,energy,success,reconnect_energy\n");
    for r in trace {
        let sensor = r.sensor.map_or(String::new(), |k| (k + 1).to_string());
        writeln!(csv, "{},{sensor},{},{},{},{}", r.slot, r.mode, r.energy, r.success as u8, r.reconnect_energy).unwrap();
    }
    csv
}

fn simulate(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    require_sensors(cfg)?;
    let modes = cfg.modes()?;
    let channel = cfg.channel_model()?;
    check_offered_load(cfg, &modes)?;
    let link = sim_link(cfg, modes);
    let k_n = cfg.sensors.len();
    let mut csv = format!(
        "curve,V,seed,avg_energy,avg_delay{}{}{},null_energy,reconnect_energy,sleep_events,unstable_flag\n",
        numbered("avg_queue", k_n),
        numbered("avg_delay", k_n),
        numbered("measured_delay", k_n),
    );
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    let mut unstable = Vec::new();
    for curve in cfg.curves() {
        for (i, &v) in cfg.policy.v.iter().enumerate() {
            let seed = replicate_seed(cfg.run.seed, i, 0);
            seeds.push(seed);
            let ep = run_episode(&sim_config(cfg, &curve, v), link.as_ref(), &channel, seed)?;
            let m = &ep.metrics;
            writeln!(
                csv,
                "{},{v},{seed},{},{}{}{}{},{},{},{},{}",
                curve.label(),
                m.avg_energy,
                m.mean_delay(),
                joined(&m.avg_queue),
                joined(&m.avg_delay),
                joined(&m.measured_delay),
                m.null_energy,
                m.reconnect_energy,
                m.sleep_events.iter().sum::<u64>(),
                m.unstable as u8
            )
            .unwrap();
            if m.unstable {
                unstable.push(format!("{} at V={v}", curve.label()));
            }
            if cfg.run.trace {
                files.push((format!("trace_{}_V{v}.csv", curve.label()), trace_csv(&ep.trace)));
            }
        }
    }
    files.insert(0, ("simulate.csv".into(), csv));
    Ok(Outcome { files, seeds, flag: unstable_flag(unstable) })
}

fn unstable_flag(unstable: Vec<String>) -> Option<CliError> {
    (!unstable.is_empty()).then(|| CliError::Unstable(format!("unstable_flag set for {}", unstable.join(", "))))
}

/// Tradeoff table for one curve.
pub fn sweep_csv(points: &[SweepPoint], k_n: usize) -> String {
    let mut csv = format!(
        "V,avg_energy,avg_delay{},null_energy,reconnect_energy,unstable_flag\n",
        numbered("avg_queue", k_n)
    );
    for p in points {
        writeln!(
            csv,
            "{},{},{}{},{},{},{}",
            p.v,
            p.avg_energy,
            p.avg_delay,
            joined(&p.avg_queue),
            p.null_energy,
            p.reconnect_energy,
            p.unstable as u8
        )
        .unwrap();
    }
    csv
}

/// Two-column delay/energy file for gnuplot.
pub fn sweep_dat(label: &str, points: &[SweepPoint]) -> String {
    let mut dat = format!("# {label}\n# avg_delay avg_energy\n");
    for p in points {
        writeln!(dat, "{} {}", p.avg_delay, p.avg_energy).unwrap();
    }
    dat
}

fn sweep(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    require_sensors(cfg)?;
    let modes = cfg.modes()?;
    let channel: ChannelModel = cfg.channel_model()?;
    check_offered_load(cfg, &modes)?;
    let link = sim_link(cfg, modes);
    let k_n = cfg.sensors.len();
    let mut files = Vec::new();
    let mut unstable = Vec::new();
    for curve in cfg.curves() {
        let base = SimConfig { record_trace: false, ..sim_config(cfg, &curve, cfg.policy.v[0]) };
        let points = sweep_v(&base, &cfg.policy.v, cfg.run.replicates, link.as_ref(), &channel, cfg.run.seed)?;
        let label = curve.label();
        unstable.extend(points.iter().filter(|p| p.unstable).map(|p| format!("{label} at V={}", p.v)));
        files.push((format!("sweep_{label}.csv"), sweep_csv(&points, k_n)));
        files.push((format!("sweep_{label}.dat"), sweep_dat(&label, &points)));
    }
    let seeds = (0..cfg.policy.v.len())
        .flat_map(|i| (0..cfg.run.replicates).map(move |r| (i, r)))
        .map(|(i, r)| replicate_seed(cfg.run.seed, i, r))
        .collect();
    Ok(Outcome { files, seeds, flag: unstable_flag(unstable) })
}
