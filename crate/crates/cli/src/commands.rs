use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use drbsde::calibration;
use drbsde::oracle::{self, compare_to_deep, grid_dp_solve, GridSpec, ValueModel};
use drbsde::skorokhod::{reconstruct_backward, verify_skorokhod, BarrierPaths, ReflectedDecomposition};
use drbsde::solver::{
    load_solver, rollout, save_solver, y0_distribution, EpochSchedule, GameSpec, PayoffEstimate, SolveReport,
};
use drbsde::stats::{self, Summary};
use drbsde::{Error, Result};

use crate::config::{ExperimentConfig, FitSummary, OuConfig};
use crate::manifest::{self, canonical_json, OutDir, RunManifest, Seeds};

/// Command-line overrides shared by the configurable commands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub retrains: Option<usize>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(s) = self.seed {
            cfg.training.seed = s;
        }
        if let Some(r) = self.retrains {
            cfg.training.retrains = r;
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = EpochSchedule::uniform(e);
        }
        cfg.validate()
    }
}

/// Invocation details recorded in the manifest.
pub struct Invocation {
    pub command: String,
    pub args: Vec<String>,
    pub threads: usize,
    pub started_at: String,
}

fn finish(out: &mut OutDir, inv: &Invocation, config: &impl Serialize, seeds: Seeds) -> Result<()> {
    let config_json = canonical_json(config)?;
    let m = RunManifest {
        tool: "drbsde".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: inv.command.clone(),
        args: inv.args.clone(),
        config_hash: manifest::sha256_hex(config_json.as_bytes()),
        config: serde_json::from_str(&config_json)?,
        seeds,
        threads: inv.threads,
        started_at: inv.started_at.clone(),
        finished_at: manifest::now(),
        files: out.inventory()?,
    };
    let mut bytes = serde_json::to_vec_pretty(&m)?;
    bytes.push(b'\n');
    manifest::write_atomic(&out.path(manifest::MANIFEST), &bytes)
}

fn seeds_of(cfg: &ExperimentConfig, strike_seed: Option<u64>) -> Seeds {
    let kappa_seed = match cfg.game.ou {
        OuConfig::BenchmarkUniform { kappa_seed, .. } => Some(kappa_seed),
        _ => None,
    };
    Seeds { seed: cfg.training.seed, strike_seed, kappa_seed }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Game as stored next to the outputs, with component labels.
#[derive(Serialize, Deserialize)]
struct GameFile {
    labels: Vec<String>,
    game: GameSpec<f64>,
}

pub fn simulate(cfg: ExperimentConfig, out: &Path, inv: &Invocation) -> Result<()> {
    let r = cfg.resolve()?;
    let game = &r.game;
    let seed = cfg.training.seed;
    let sim = &cfg.simulation;
    let paths = game.simulate(sim.paths, seed)?;
    let d = game.dim();
    let mut o = OutDir::create(out)?;
    o.write_json("game.json", &GameFile { labels: r.labels.clone(), game: game.clone() })?;

    let mut head = String::from("path,t");
    for l in &r.labels {
        write!(head, ",{l}").unwrap();
    }
    let mut csv = head.clone() + "\n";
    for j in 0..sim.export_paths.min(sim.paths) {
        let p = paths.path(j);
        for (n, &t) in game.grid.nodes().iter().enumerate() {
            write!(csv, "{j},{}", num(t)).unwrap();
            for k in 0..d {
                write!(csv, ",{}", num(p[[n, k]])).unwrap();
            }
            csv.push('\n');
        }
    }
    o.write("paths.csv", csv.as_bytes())?;

    let mut summary = String::from("t");
    for l in &r.labels {
        write!(summary, ",mean_{l},sd_{l}").unwrap();
    }
    summary.push('\n');
    for (n, &t) in game.grid.nodes().iter().enumerate() {
        summary += &num(t);
        let x = paths.at(n);
        for k in 0..d {
            let col: Vec<f64> = x.column(k).to_vec();
            let s = stats::summarize(&col);
            write!(summary, ",{},{}", num(s.mean), num(s.std_dev)).unwrap();
        }
        summary.push('\n');
    }
    o.write("summary.csv", summary.as_bytes())?;
    finish(&mut o, inv, &cfg, seeds_of(&cfg, r.strike_seed))
}

pub fn calibrate(csv: &Path, cfg: Option<ExperimentConfig>, out: &Path, inv: &Invocation) -> Result<()> {
    let cal = cfg.as_ref().and_then(|c| c.calibration.clone()).unwrap_or_default();
    let series = calibration::read_price_csv(csv, &cal.csv_options())?;
    let fits = calibration::calibrate_all(&series, cal.form)?;
    let mut o = OutDir::create(out)?;
    let mut summaries = Vec::with_capacity(fits.len());
    for fit in &fits {
        for w in &fit.warnings {
            eprintln!("warning: {}: {w}", fit.label);
        }
        for f in calibration::write_fit_exports(fit, &o.path("fits"))? {
            o.record(&format!("fits/{f}"));
        }
        summaries.push(FitSummary {
            label: fit.label.clone(),
            kappa: fit.kappa,
            mu: fit.mu,
            sigma: fit.sigma,
            se_kappa: fit.se_kappa,
            se_mu: fit.se_mu,
            se_sigma: fit.se_sigma,
            ks_pvalue: fit.ks_pvalue,
            transitions: fit.transitions,
            warnings: fit.warnings.clone(),
        });
    }
    o.write_json("fits.json", &summaries)?;
    let mut table = String::from("label,kappa,mu,sigma,se_kappa,se_mu,se_sigma,ks_pvalue\n");
    for s in &summaries {
        writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            s.label,
            num(s.kappa),
            num(s.mu),
            num(s.sigma),
            num(s.se_kappa),
            num(s.se_mu),
            num(s.se_sigma),
            num(s.ks_pvalue)
        )
        .unwrap();
    }
    o.write("fits.csv", table.as_bytes())?;
    let input = std::fs::read(csv).map_err(|e| Error::io(csv, e))?;
    #[derive(Serialize)]
    struct CalibrateRun<'a> {
        csv: String,
        csv_sha256: String,
        calibration: &'a crate::config::CalibrationConfig,
    }
    let record = CalibrateRun { csv: csv.display().to_string(), csv_sha256: manifest::sha256_hex(&input), calibration: &cal };
    finish(&mut o, inv, &record, Seeds { seed: 0, strike_seed: None, kappa_seed: None })
}

/// `report.json` of the solve command; raw exit times go to CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub retrains: usize,
    pub y0: Summary,
    pub y0_samples: Vec<f64>,
    pub no_exit_fraction: f64,
    pub player1_fraction: f64,
    pub player2_fraction: f64,
    pub mean_exit_time: f64,
    pub payoff: PayoffEstimate,
    pub barrier_violation_max: f64,
    pub eval_paths_per_retrain: usize,
}

impl SolveSummary {
    fn new(r: &SolveReport, eval_paths: usize) -> Self {
        SolveSummary {
            retrains: r.retrains.len(),
            y0: r.y0,
            y0_samples: r.y0_samples.clone(),
            no_exit_fraction: r.no_exit_fraction,
            player1_fraction: r.player1_fraction,
            player2_fraction: r.player2_fraction,
            mean_exit_time: r.mean_exit_time,
            payoff: r.payoff,
            barrier_violation_max: r.barrier_violation_max,
            eval_paths_per_retrain: eval_paths,
        }
    }
}

pub fn solve(cfg: ExperimentConfig, out: &Path, inv: &Invocation) -> Result<()> {
    let r = cfg.resolve()?;
    let game = &r.game;
    let train = cfg.training.train_config();
    let (report, first) = y0_distribution(game, &train, cfg.training.retrains, cfg.evaluation.paths, cfg.training.seed)?;
    let mut o = OutDir::create(out)?;
    o.write_json("game.json", &GameFile { labels: r.labels.clone(), game: game.clone() })?;
    for f in save_solver(&first, &o.path("solver"))? {
        o.record(&format!("solver/{f}"));
    }
    o.write_json("report.json", &SolveSummary::new(&report, cfg.evaluation.paths))?;

    let mut y0 = String::from("retrain,seed,y0,payoff,no_exit,player1,player2\n");
    for (i, e) in report.retrains.iter().enumerate() {
        writeln!(
            y0,
            "{i},{},{},{},{},{},{}",
            e.seed,
            num(e.y0),
            num(e.payoff.mean),
            num(e.exits.no_exit_fraction),
            num(e.exits.player1_fraction),
            num(e.exits.player2_fraction)
        )
        .unwrap();
    }
    o.write("y0_samples.csv", y0.as_bytes())?;

    let mut ex = String::from("player,time\n");
    for t in &report.exit_times_p1 {
        writeln!(ex, "1,{}", num(*t)).unwrap();
    }
    for t in &report.exit_times_p2 {
        writeln!(ex, "2,{}", num(*t)).unwrap();
    }
    o.write("exit_times.csv", ex.as_bytes())?;

    let mut loss = String::from("stage,epoch,loss\n");
    for (n, h) in first.loss_history.iter().enumerate() {
        for (e, l) in h.iter().enumerate() {
            writeln!(loss, "{n},{e},{}", num(*l)).unwrap();
        }
    }
    o.write("loss_history.csv", loss.as_bytes())?;

    let k = cfg.evaluation.export_paths;
    if k > 0 {
        let paths = game.simulate(k, drbsde::rng::derive(cfg.training.seed, &[drbsde::rng::tag("export")]))?;
        let roll = rollout(&first, &paths)?;
        let mut s = String::from("path,t,y_tilde,y_hat,lower,upper\n");
        for j in 0..k {
            for (n, &t) in game.grid.nodes().iter().enumerate() {
                let (lo, hi) = game.barriers.bounds(t)?;
                writeln!(s, "{j},{},{},{},{},{}", num(t), num(roll.y_tilde[[n, j]]), num(roll.y_hat[[n, j]]), num(lo), num(hi))
                    .unwrap();
            }
        }
        o.write("y_paths.csv", s.as_bytes())?;
    }
    println!(
        "Y0 mean {:.6} sd {:.6} over {} retrains; no-exit {:.4}, P1 {:.4}, P2 {:.4}",
        report.y0.mean,
        report.y0.std_dev,
        report.retrains.len(),
        report.no_exit_fraction,
        report.player1_fraction,
        report.player2_fraction
    );
    finish(&mut o, inv, &cfg, seeds_of(&cfg, r.strike_seed))
}

/// Contents of `oracle.json`; enough to rebuild the solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleRecord {
    pub game: GameSpec<f64>,
    pub grid: GridSpec,
    pub y0: f64,
    pub y0_tilde: f64,
}

pub fn oracle(cfg: ExperimentConfig, solver_dir: Option<&Path>, out: &Path, inv: &Invocation) -> Result<()> {
    let r = cfg.resolve()?;
    let ocfg = cfg.oracle.clone().unwrap_or_default();
    let spec = ocfg.grid_spec(&r.game)?;
    let sol = grid_dp_solve(&r.game, &spec)?;
    let mut o = OutDir::create(out)?;
    o.write_json("oracle.json", &OracleRecord { game: r.game.clone(), grid: spec, y0: sol.y0, y0_tilde: sol.y0_tilde })?;
    oracle::write_surfaces_csv(&sol, &o.path("surfaces.csv"))?;
    o.record("surfaces.csv");
    println!("oracle Y0 {:.8}", sol.y0);
    if let Some(dir) = solver_dir {
        let deep = load_solver::<f64>(dir)?;
        let cmp = compare_to_deep(&sol, &deep, ocfg.compare_paths, cfg.training.seed)?;
        println!("deep Y0 {:.8}, |difference| {:.2e}, exit-time KS {:.4}", cmp.y0_model, cmp.y0_abs_error, cmp.exit_ks.statistic);
        o.write_json("comparison.json", &cmp)?;
    }
    finish(&mut o, inv, &cfg, seeds_of(&cfg, r.strike_seed))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkorokhodSummary {
    pub source: String,
    pub paths: usize,
    pub failures: usize,
    pub max_slackness: f64,
    pub max_identity_error: f64,
    /// Largest gap between the reflected path and the model's clamped values.
    pub max_value_mismatch: f64,
    pub pass: bool,
}

pub enum ValueSource {
    Solver(PathBuf),
    Oracle(PathBuf),
}

pub fn skorokhod(source: ValueSource, paths: usize, seed: u64, out: &Path, inv: &Invocation) -> Result<bool> {
    let (label, model): (String, Box<dyn ValueModel>) = match &source {
        ValueSource::Solver(dir) => (format!("solver:{}", dir.display()), Box::new(load_solver::<f64>(dir)?)),
        ValueSource::Oracle(dir) => {
            let path = dir.join("oracle.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rec: OracleRecord =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            (format!("oracle:{}", dir.display()), Box::new(grid_dp_solve(&rec.game, &rec.grid)?))
        }
    };
    if paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let game = model.game().clone();
    let grid = &game.grid;
    let steps = grid.steps();
    let batch = game.simulate(paths, seed)?;
    let yt = model.continuation(&batch)?;
    let times: Vec<f64> = grid.nodes().to_vec();
    let bars = BarrierPaths::new(
        times.iter().map(|&t| -game.barriers.f2(t)).collect(),
        times.iter().map(|&t| game.barriers.f1(t)).collect(),
    )?;
    let clamp = |n: usize, v: f64| if n == steps { v } else { v.max(bars.alpha()[n]).min(bars.beta()[n]) };
    let mut o = OutDir::create(out)?;
    let mut summary = SkorokhodSummary {
        source: label,
        paths,
        failures: 0,
        max_slackness: 0.0,
        max_identity_error: 0.0,
        max_value_mismatch: 0.0,
        pass: true,
    };
    let mut table = String::from("path,pass,slackness_lower,slackness_upper,identity_error,push_up,push_down\n");
    for j in 0..paths {
        let yh: Vec<f64> = (0..=steps).map(|n| clamp(n, yt[[n, j]])).collect();
        let deltas: Vec<f64> = (0..steps).map(|n| yt[[n, j]] - yh[n + 1]).collect();
        let dec: ReflectedDecomposition<f64> = reconstruct_backward(yh[steps], &deltas, &bars)?;
        let rep = verify_skorokhod(&dec, 1e-8);
        let mismatch = dec.y.iter().zip(&yh).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ok = rep.pass && mismatch <= 1e-10 * rep.scale;
        summary.failures += usize::from(!ok);
        summary.max_slackness = summary.max_slackness.max(rep.slackness_lower.abs()).max(rep.slackness_upper.abs());
        summary.max_identity_error = summary.max_identity_error.max(rep.max_identity_error);
        summary.max_value_mismatch = summary.max_value_mismatch.max(mismatch);
        writeln!(
            table,
            "{j},{},{},{},{},{},{}",
            u8::from(ok),
            num(rep.slackness_lower),
            num(rep.slackness_upper),
            num(rep.max_identity_error),
            num(dec.a[steps]),
            num(dec.c[steps])
        )
        .unwrap();
        if j < 5 {
            let rel = format!("paths/path_{j:03}.csv");
            let path = o.path(&rel);
            std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
            drbsde::skorokhod::write_csv(&dec, &times, &path)?;
            o.record(&rel);
        }
    }
    summary.pass = summary.failures == 0;
    o.write("paths.csv", table.as_bytes())?;
    o.write_json("report.json", &summary)?;
    println!("{} of {paths} paths verified; max slackness {:.2e}", paths - summary.failures, summary.max_slackness);
    #[derive(Serialize)]
    struct SkorokhodRun<'a> {
        source: &'a str,
        paths: usize,
        seed: u64,
    }
    let rec = SkorokhodRun { source: &summary.source, paths, seed };
    finish(&mut o, inv, &rec, Seeds { seed, strike_seed: None, kappa_seed: None })?;
    Ok(summary.pass)
}

fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> String {
    let mut counts = vec![0usize; bins];
    let w = (hi - lo) / bins as f64;
    for &x in xs {
        if x.is_finite() && w > 0.0 {
            let b = (((x - lo) / w).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let mut s = String::from("left,right,count\n");
    for (b, c) in counts.iter().enumerate() {
        writeln!(s, "{},{},{c}", num(lo + b as f64 * w), num(lo + (b + 1) as f64 * w)).unwrap();
    }
    s
}

#[derive(Serialize)]
struct RunRow {
    dir: String,
    command: String,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    solve: Option<SolveSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_y0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skorokhod: Option<SkorokhodSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fits: Option<Vec<FitSummary>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Collects the results of earlier runs into one JSON summary plus
/// plot-ready histograms.
pub fn report(runs: &[PathBuf], out: &Path, inv: &Invocation) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    let mut o = OutDir::create(out)?;
    for (i, dir) in runs.iter().enumerate() {
        let m = manifest::read_manifest(dir)?;
        let solve: Option<SolveSummary> = if m.command == "solve" { read_json(&dir.join("report.json"))? } else { None };
        let skorokhod: Option<SkorokhodSummary> =
            if m.command == "skorokhod" { read_json(&dir.join("report.json"))? } else { None };
        let oracle: Option<OracleRecord> = read_json(&dir.join("oracle.json"))?;
        if let Some(s) = &solve {
            let (lo, hi) = s.y0_samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let pad = ((hi - lo) * 0.05).max(1e-3);
            o.write(&format!("run{i}_y0_histogram.csv"), histogram(&s.y0_samples, lo - pad, hi + pad, 20).as_bytes())?;
            let exits = dir.join("exit_times.csv");
            if exits.is_file() {
                let text = std::fs::read_to_string(&exits).map_err(|e| Error::io(&exits, e))?;
                for player in ["1", "2"] {
                    let ts: Vec<f64> = text
                        .lines()
                        .skip(1)
                        .filter_map(|l| l.split_once(','))
                        .filter(|(p, _)| *p == player)
                        .filter_map(|(_, t)| t.parse().ok())
                        .collect();
                    let hi = ts.iter().cloned().fold(0.0, f64::max).max(1e-9);
                    o.write(&format!("run{i}_exit_p{player}_histogram.csv"), histogram(&ts, 0.0, hi, 25).as_bytes())?;
                }
            }
        }
        rows.push(RunRow {
            dir: dir.display().to_string(),
            command: m.command.clone(),
            config_hash: m.config_hash.clone(),
            solve,
            oracle_y0: oracle.map(|r| r.y0),
            comparison: read_json(&dir.join("comparison.json"))?,
            skorokhod,
            fits: if m.command == "calibrate" { read_json(&dir.join("fits.json"))? } else { None },
        });
    }
    o.write_json("summary.json", &rows)?;
    println!("summarised {} runs", rows.len());
    #[derive(Serialize)]
    struct ReportRun {
        runs: Vec<String>,
    }
    finish(&mut o, inv, &ReportRun { runs: runs.iter().map(|r| r.display().to_string()).collect() }, Seeds {
        seed: 0,
        strike_seed: None,
        kappa_seed: None,
    })
}
