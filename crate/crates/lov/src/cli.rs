//! Command-line front end. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use lov_core::calibrate::{self, EpochRecord};
use lov_core::localvol::dupire_from_implied;
use lov_core::market::assign_weights;
use lov_core::simulator::simulate_lov;
use lov_core::{LocalVolSurface, MarketEnvironment, OptionQuote, SensitivitySpec};
use serde_json::json;

use crate::chain::{load_chain, load_env};
use crate::config::{load_json, CalibrateConfig, SimulateConfig, SpecConfig};
use crate::manifest::{self, Recorder};
use crate::plots::{self, exercise_code, flag_code, write_json, write_rows};
use crate::surface::{load_implied_surface, load_local_surface, write_grid};
use crate::checkpoint;

#[derive(Debug, Parser)]
#[command(name = "lov", version, about = "Local occupied volatility Monte Carlo engine")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an LOV path ensemble.
    Simulate(SimulateArgs),
    /// Price a chain of instruments off a simulated ensemble.
    Price(PriceArgs),
    /// Extract a local volatility surface from implied vols (Dupire).
    Localvol(LocalvolArgs),
    /// Fit a neural sensitivity to a chain.
    Calibrate(CalibrateArgs),
    /// Price a chain under a calibrated sensitivity and emit plot data.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config JSON (grid, env, model).
    #[arg(long)]
    pub config: PathBuf,
    /// Local volatility surface CSV.
    #[arg(long)]
    pub surface: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["config", "ensemble"])))]
pub struct PriceArgs {
    /// Simulation config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory of an earlier `simulate` run; its ensemble is regenerated.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long)]
    pub surface: Option<PathBuf>,
    /// Chain CSV of instruments to price.
    #[arg(long)]
    pub instruments: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub max_rel_spread: f64,
}

#[derive(Debug, Args)]
pub struct LocalvolArgs {
    /// Implied volatility surface CSV.
    #[arg(long)]
    pub implied: PathBuf,
    #[arg(long)]
    pub env: PathBuf,
    /// Local volatility surface CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long)]
    pub surface: Option<PathBuf>,
    /// Calibration config JSON (model, network, schedule, gradient, stopping rule).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long)]
    pub surface: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    /// Calibrated parameters (`theta.bin` with its JSON sidecar).
    #[arg(long)]
    pub theta: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Sensitivity slice at `t,X` (repeatable).
    #[arg(long, value_parser = parse_pair)]
    pub slice: Vec<(f64, f64)>,
    /// Occupation snapshot of this path at the horizon.
    #[arg(long)]
    pub snapshot_path: Option<usize>,
    /// Loss history CSV from `calibrate` to copy into `loss_curve.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `t,X`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"));
    Ok((parse(a)?, parse(b)?))
}

/// Bad flags, missing files and schema violations; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialised; --threads ignored");
        }
    }
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let result = dispatch(cli.command, args);
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Simulate(a) => recorded("simulate", argv, &a.out.join("manifest.json"), |r| simulate(a, r)),
        Command::Price(a) => {
            let m = with_suffix(&a.out, "manifest.json");
            recorded("price", argv, &m, |r| price(a, r))
        }
        Command::Localvol(a) => {
            let m = with_suffix(&a.out, "manifest.json");
            recorded("localvol", argv, &m, |r| localvol(a, r))
        }
        Command::Calibrate(a) => recorded("calibrate", argv, &a.out_dir.join("manifest.json"), |r| calibrate_cmd(a, r)),
        Command::Report(a) => recorded("report", argv, &a.out_dir.join("manifest.json"), |r| report(a, r)),
        Command::Replay(a) => {
            if !a.manifest.exists() {
                return Err(usage(format!("--manifest: {} does not exist", a.manifest.display())));
            }
            let m = manifest::load(&a.manifest).map_err(|e| usage(format!("{e:#}")))?;
            for (path, digest) in &m.inputs {
                let now = manifest::sha256_file(Path::new(path)).map_err(|e| usage(format!("{e:#}")))?;
                if &now != digest {
                    bail!("input {path} changed since the manifest was written");
                }
            }
            info!("replaying `lov {}`", m.argv.join(" "));
            let mut argv = vec!["lov".to_string()];
            argv.extend(m.argv);
            match run(argv) {
                0 => Ok(()),
                2 => Err(usage("replayed command failed with a usage error")),
                _ => bail!("replayed command failed"),
            }
        }
    }
}

/// `<out>.manifest.json` next to a file output.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn recorded(command: &str, argv: Vec<String>, manifest_path: &Path, f: impl FnOnce(&mut Recorder) -> Result<()>) -> Result<()> {
    let mut rec = Recorder::new(command, argv);
    let outcome = f(&mut rec);
    if let Err(e) = rec.finish(&outcome, manifest_path) {
        warn!("could not write manifest {}: {e:#}", manifest_path.display());
    }
    outcome
}

fn input(rec: &mut Recorder, path: &Path, flag: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{flag}: file {} does not exist", path.display())));
    }
    rec.input(path)
}

fn config<T: serde::de::DeserializeOwned>(rec: &mut Recorder, path: &Path) -> Result<T> {
    input(rec, path, "--config")?;
    load_json(path).map_err(|e| usage(format!("{e:#}")))
}

fn surface_path(flag: Option<PathBuf>, from_config: Option<&PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| from_config.cloned())
        .ok_or_else(|| usage("--surface is required (or set model.surface_file in the config)"))
}

fn local_surface(rec: &mut Recorder, path: &Path) -> Result<LocalVolSurface> {
    input(rec, path, "--surface")?;
    load_local_surface(path)
}

fn env_file(rec: &mut Recorder, path: &Path) -> Result<MarketEnvironment> {
    input(rec, path, "--env")?;
    load_env(path)
}

fn simulate(a: SimulateArgs, rec: &mut Recorder) -> Result<()> {
    let cfg: SimulateConfig = config(rec, &a.config)?;
    let surface = local_surface(rec, &surface_path(a.surface, cfg.model.surface_file.as_ref())?)?;
    rec.config(&cfg);
    rec.manifest.seed = Some(cfg.seed);
    cfg.env.validate()?;
    let model = cfg.model.build(&surface, &cfg.env, cfg.horizon)?;
    let start = Instant::now();
    let e = simulate_lov(&cfg.sim(), &cfg.env, &model)?;
    let runtime = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;

    let terminal = a.out.join("terminal.csv");
    write_rows(&terminal, ["path_id", "x_terminal"], e.terminal().iter().enumerate().map(|(j, x)| [j.to_string(), x.to_string()]))?;
    rec.output(&terminal);
    if cfg.dump_paths {
        let paths = a.out.join("paths.csv");
        let rows = (0..e.paths).flat_map(|j| {
            let e = &e;
            (0..=e.steps).map(move |n| {
                let s = if n < e.steps { e.sigma(j, n).to_string() } else { String::new() };
                [j.to_string(), n.to_string(), e.time(n).to_string(), e.x(j, n).to_string(), s]
            })
        });
        write_rows(&paths, ["path_id", "step", "t", "X", "sigma"], rows)?;
        rec.output(&paths);
    }
    let mean = e.terminal().iter().sum::<f64>() / e.paths as f64;
    let summary = a.out.join("summary.json");
    write_json(
        &summary,
        &json!({
            "paths": e.paths,
            "steps": e.steps,
            "horizon": e.horizon(),
            "seed": cfg.seed,
            "clamp_events": e.clamp_events,
            "mass_residual": e.mass_residual,
            "total_mass": e.total_mass,
            "mean_terminal": mean,
            "forward": cfg.env.forward(e.horizon()),
            "runtime_seconds": runtime,
        }),
    )?;
    rec.output(&summary);
    info!("simulate paths={} steps={} clamps={} runtime={runtime:.3}s", e.paths, e.steps, e.clamp_events);
    Ok(())
}

fn price(a: PriceArgs, rec: &mut Recorder) -> Result<()> {
    let cfg: SimulateConfig = match (&a.config, &a.ensemble) {
        (Some(c), _) => config(rec, c)?,
        (None, Some(dir)) => {
            let path = dir.join("manifest.json");
            input(rec, &path, "--ensemble")?;
            let m = manifest::load(&path).map_err(|e| usage(format!("{e:#}")))?;
            if m.command != "simulate" || m.status != "ok" {
                return Err(usage(format!("--ensemble: {} is not a successful simulate run", dir.display())));
            }
            serde_json::from_value(m.resolved_config).map_err(|e| usage(format!("--ensemble: {e}")))?
        }
        (None, None) => return Err(usage("one of --config or --ensemble is required")),
    };
    let surface = local_surface(rec, &surface_path(a.surface, cfg.model.surface_file.as_ref())?)?;
    input(rec, &a.instruments, "--instruments")?;
    let chain = load_chain(&a.instruments, a.max_rel_spread)?;
    rec.config(&cfg);
    rec.manifest.seed = Some(cfg.seed);
    let model = cfg.model.build(&surface, &cfg.env, cfg.horizon)?;
    let e = simulate_lov(&cfg.sim(), &cfg.env, &model)?;
    let prices = calibrate::price_quotes(&e, &cfg.env, &chain.quotes, &cfg.lsmc)?;
    write_rows(
        &a.out,
        ["strike", "expiry", "flag", "exercise", "price", "std_error"],
        chain.quotes.iter().zip(&prices).map(|(q, p)| {
            [q.strike.to_string(), q.expiry.to_string(), flag_code(q.flag).into(), exercise_code(q.exercise).into(), p.price.to_string(), p.std_error.to_string()]
        }),
    )?;
    rec.output(&a.out);
    info!("priced {} instruments on {} paths", chain.quotes.len(), e.paths);
    Ok(())
}

fn localvol(a: LocalvolArgs, rec: &mut Recorder) -> Result<()> {
    input(rec, &a.implied, "--implied")?;
    let env = env_file(rec, &a.env)?;
    let iv = load_implied_surface(&a.implied)?;
    let out = dupire_from_implied(&iv, &env)?;
    let file = std::fs::File::create(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_grid(out.surface.grid(), file)?;
    rec.output(&a.out);
    let warnings = with_suffix(&a.out, "warnings.csv");
    write_rows(
        &warnings,
        ["time", "strike", "raw_variance", "stored_variance"],
        out.warnings.iter().map(|w| {
            let g = out.surface.grid();
            [g.times()[w.time_index].to_string(), g.strikes()[w.strike_index].to_string(), w.raw_variance.to_string(), w.stored_variance.to_string()]
        }),
    )?;
    rec.output(&warnings);
    for w in &out.warnings {
        warn!("dupire node t_index={} k_index={} raw={} stored={}", w.time_index, w.strike_index, w.raw_variance, w.stored_variance);
    }
    Ok(())
}

struct Market {
    env: MarketEnvironment,
    surface: LocalVolSurface,
    quotes: Vec<OptionQuote>,
    cfg: CalibrateConfig,
}

fn market(rec: &mut Recorder, chain: &Path, env: &Path, surface: Option<PathBuf>, cfg_path: &Path) -> Result<Market> {
    let cfg: CalibrateConfig = config(rec, cfg_path)?;
    cfg.calibration.validate().map_err(|e| usage(format!("--config: {e}")))?;
    let env = env_file(rec, env)?;
    let surface = local_surface(rec, &surface_path(surface, cfg.model.surface_file.as_ref())?)?;
    input(rec, chain, "--chain")?;
    let loaded = load_chain(chain, cfg.max_rel_spread)?;
    for (expiry, (calls, puts)) in loaded.counts_by_expiry() {
        info!("chain expiry={expiry} calls={calls} puts={puts}");
    }
    info!("chain kept={} dropped={}", loaded.quotes.len(), loaded.dropped);
    let mut quotes = loaded.quotes;
    assign_weights(&mut quotes, &env, cfg.calibration.vega_floor)?;
    rec.config(&cfg);
    rec.manifest.seed = Some(cfg.calibration.seed);
    Ok(Market { env, surface, quotes, cfg })
}

fn horizon(quotes: &[OptionQuote]) -> Result<f64> {
    let t = quotes.iter().map(|q| q.expiry).fold(0.0, f64::max);
    if t > 0.0 {
        Ok(t)
    } else {
        Err(lov_core::Error::EmptyCalibrationSet.into())
    }
}

fn calibrate_cmd(a: CalibrateArgs, rec: &mut Recorder) -> Result<()> {
    let mk = market(rec, &a.chain, &a.env, a.surface, &a.config)?;
    let model = mk.cfg.model.build(&mk.surface, &mk.env, horizon(&mk.quotes)?)?;
    let SensitivitySpec::Neural(net) = &model.spec else {
        return Err(usage("--config: calibrate needs a neural sensitivity (model.spec.kind = \"neural\")"));
    };
    let shape = net.shape().clone();
    std::fs::create_dir_all(a.out_dir.join("checkpoints")).with_context(|| format!("cannot create {}", a.out_dir.display()))?;

    let history_path = a.out_dir.join("loss_history.csv");
    let mut history = csv::Writer::from_path(&history_path)?;
    history.write_record(["epoch", "loss", "alpha", "J"])?;
    let mut failure: Option<anyhow::Error> = None;
    let every = mk.cfg.checkpoint_every;
    let ckpt_dir = a.out_dir.join("checkpoints");
    let mut observer = |r: &EpochRecord, theta: &[f64]| {
        if failure.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            history.write_record([r.epoch.to_string(), r.loss.to_string(), r.alpha.to_string(), r.paths.to_string()])?;
            history.flush()?;
            if every > 0 && r.epoch.is_multiple_of(every) {
                checkpoint::save_theta(&ckpt_dir.join(format!("theta_{:06}.bin", r.epoch)), &shape, theta)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            failure = Some(e);
        }
        info!("epoch={} loss={:.6} alpha={:.6} J={} grad_norm={:.3e}", r.epoch, r.loss, r.alpha, r.paths, r.gradient_norm);
    };
    let outcome = calibrate::calibrate(&mk.cfg.calibration, &model, &mk.env, &mk.quotes, &mut observer)?;
    if let Some(e) = failure {
        return Err(e);
    }
    rec.output(&history_path);
    let theta_path = a.out_dir.join("theta.bin");
    checkpoint::save_theta(&theta_path, &shape, &outcome.theta)?;
    rec.output(&theta_path);
    let report_path = a.out_dir.join("report.json");
    write_json(&report_path, &outcome.report)?;
    rec.output(&report_path);
    if !outcome.report.converged {
        warn!("epoch limit reached without meeting the stopping rule; kept the best epoch {}", outcome.report.best_epoch);
    }
    info!(
        "calibrate converged={} epochs={} holdout_loss={:.6} alpha={:.6} in_band={:.3}",
        outcome.report.converged, outcome.report.epochs, outcome.report.holdout_loss, outcome.report.alpha, outcome.report.holdout_in_band
    );
    Ok(())
}

fn report(a: ReportArgs, rec: &mut Recorder) -> Result<()> {
    let mut mk = market(rec, &a.chain, &a.env, a.surface, &a.config)?;
    if let Some(theta) = &a.theta {
        input(rec, theta, "--theta")?;
        match &mut mk.cfg.model.spec {
            SpecConfig::Neural { network } => network.checkpoint = Some(theta.clone()),
            _ => return Err(usage("--theta given but the configured sensitivity is not neural")),
        }
    }
    let t_max = horizon(&mk.quotes)?;
    let model = mk.cfg.model.build(&mk.surface, &mk.env, t_max)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;

    let fits = calibrate::report_fits(&model, &mk.env, &mk.quotes, &mk.cfg.calibration)?;
    let report_path = a.out_dir.join("report.csv");
    write_rows(
        &report_path,
        ["strike", "expiry", "flag", "model_price", "bid", "ask", "in_band"],
        fits.iter().map(|f| {
            [f.strike.to_string(), f.expiry.to_string(), flag_code(f.flag).into(), f.model_price.to_string(), f.bid.to_string(), f.ask.to_string(), f.in_band.to_string()]
        }),
    )?;
    rec.output(&report_path);
    let smile_path = a.out_dir.join("smile.csv");
    plots::write_smile(&smile_path, &plots::smile(&fits, &mk.env))?;
    rec.output(&smile_path);

    for (i, (t, x)) in a.slice.iter().enumerate() {
        let path = a.out_dir.join(format!("sensitivity_slice_{i}.csv"));
        plots::write_slice(&path, &plots::sensitivity_slice(&model.spec, *t, *x, model.partition.nodes()))?;
        rec.output(&path);
    }
    if let Some(j) = a.snapshot_path {
        let grid = &mk.cfg.calibration.grid;
        let sim = grid.sim_config(&mk.quotes, 2 * mk.cfg.calibration.holdout_pairs, mk.cfg.calibration.holdout_seed, false)?;
        let e = simulate_lov(&sim, &mk.env, &model)?;
        let path = a.out_dir.join("occupation_snapshot.csv");
        plots::write_snapshot(&path, &plots::occupation_snapshot(&e, j)?)?;
        rec.output(&path);
    }
    if let Some(h) = &a.history {
        input(rec, h, "--history")?;
        let path = a.out_dir.join("loss_curve.csv");
        plots::loss_curve(h, &path)?;
        rec.output(&path);
    }
    let inside = fits.iter().filter(|f| f.in_band).count();
    info!("report instruments={} in_band={inside}", fits.len());
    Ok(())
}
