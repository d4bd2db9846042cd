//! Command-line front end.
//!
//! Every command prints one `key=value` summary line on success. Exit codes:
//! 2 invalid input, 3 solver failure, 4 degenerate market, 5 non-finite
//! simulation, 6 price series of the wrong length, 1 anything else.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::config::RunConfig;
use crate::error::Error;
use crate::filterbank::{run_filter, solve_beta, FilterSolution};
use crate::hjbsolve::{solve_hjb, HjbCoefficients};
use crate::model::{MarketModel, TimeGrid};
use crate::policy::{expected_e2xi, frontier_sweep, BondOnly, PolicyContext};
use crate::simkit::{simulate_optimal, simulate_paths, Estimate, PathRecord, SimResult};

#[derive(Debug, Parser)]
#[command(name = "pimv", version, about = "Mean-variance portfolios with filtered factors")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the filter covariance and value-function coefficients.
    Solve,
    /// Efficient frontier at the configured targets.
    Frontier,
    /// Monte Carlo check of the efficient strategy.
    Simulate(SimulateArgs),
    /// Run the filter over an observed price series.
    Filter(FilterArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub paths: Option<usize>,
    /// Simulation step; must divide the solver step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Target terminal mean.
    #[arg(long)]
    pub xbar: Option<f64>,
    /// Report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Hold only the bond instead of the efficient strategy.
    #[arg(long)]
    pub zero_policy: bool,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// CSV with a `t` column and either `log_s_i` or `s_i` columns, one row per grid node.
    #[arg(long)]
    pub prices: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::DegenerateMarket { .. }) => 4,
        Some(Error::NonFinite { .. }) => 5,
        Some(Error::LengthMismatch { .. }) => 6,
        Some(Error::StepTooCoarse { .. } | Error::Singular { .. } | Error::Unsupported(_)) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".to_string(), fmt)
}

struct Session {
    cfg: RunConfig,
    model: MarketModel,
    out_dir: PathBuf,
}

impl Session {
    fn open(cli: &Cli) -> anyhow::Result<Self> {
        let Some(path) = &cli.config else {
            return Err(Error::Config("--config is required".to_string()).into());
        };
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.sim.seed = seed;
        }
        let model = cfg.validate()?;
        let out_dir = cli.out_dir.clone().unwrap_or_else(|| cfg.output.dir.clone());
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self { cfg, model, out_dir })
    }

    fn filter(&self) -> anyhow::Result<FilterSolution> {
        let grid = TimeGrid::for_model(&self.model, self.cfg.grid.steps)?;
        Ok(solve_beta(&self.model, &grid)?)
    }

    fn solve(&self) -> anyhow::Result<(FilterSolution, HjbCoefficients)> {
        let fs = self.filter()?;
        let coeffs = solve_hjb(&self.model, &fs)?;
        Ok((fs, coeffs))
    }

    fn target(&self, path: Option<&PathBuf>, default: &str) -> PathBuf {
        path.cloned().unwrap_or_else(|| self.out_dir.join(default))
    }
}

fn writer(path: &Path) -> anyhow::Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn indexed(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

/// Column-major names `prefix_i_j`.
fn matrix_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (1..=cols)
        .flat_map(|j| (1..=rows).map(move |i| format!("{prefix}_{i}_{j}")))
        .collect()
}

/// Runs one command and returns its summary line.
pub fn run(cli: &Cli) -> anyhow::Result<String> {
    let session = Session::open(cli)?;
    match &cli.command {
        Command::Solve => cmd_solve(&session),
        Command::Frontier => cmd_frontier(&session),
        Command::Simulate(args) => cmd_simulate(&session, args),
        Command::Filter(args) => cmd_filter(&session, args),
    }
}

fn cmd_solve(s: &Session) -> anyhow::Result<String> {
    let (fs, c) = s.solve()?;
    let (m, n) = (s.model.m, s.model.n);
    let path = s.out_dir.join("coefficients.csv");
    let mut w = writer(&path)?;
    let mut header = vec!["t".to_string(), "p".to_string()];
    header.extend(indexed("q", n));
    header.extend(matrix_names("G", n, n));
    header.extend(indexed("V", m));
    header.extend(matrix_names("U", m, n));
    header.extend(matrix_names("beta", n, n));
    w.write_record(&header)?;
    for k in 0..=fs.grid.steps() {
        let mut row = vec![fmt(fs.grid.t(k)), fmt(c.p[k])];
        row.extend(c.q[k].iter().map(|&x| fmt(x)));
        row.extend(c.g[k].iter().map(|&x| fmt(x)));
        row.extend(c.v[k].iter().map(|&x| fmt(x)));
        row.extend(c.u[k].iter().map(|&x| fmt(x)));
        row.extend(fs.beta[k].iter().map(|&x| fmt(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    let e2xi = expected_e2xi(&c, &s.model.y0)?;
    Ok(format!(
        "command=solve steps={} p0={} e2xi={} out={}",
        fs.grid.steps(),
        fmt(c.p[0]),
        fmt(e2xi),
        path.display()
    ))
}

fn cmd_frontier(s: &Session) -> anyhow::Result<String> {
    if s.cfg.frontier.targets.is_empty() {
        return Err(Error::Config("frontier.targets is empty".to_string()).into());
    }
    let (_, c) = s.solve()?;
    let points = frontier_sweep(&s.cfg.frontier.targets, &s.model, &c)?;
    let path = s.out_dir.join("frontier.csv");
    let mut w = writer(&path)?;
    w.write_record(["x_bar", "gamma_star", "variance", "stdev", "e2xi"])?;
    for p in &points {
        w.write_record([fmt(p.x_bar), fmt(p.gamma_star), fmt(p.variance), fmt(p.stdev()), fmt(p.e2xi)])?;
    }
    w.flush()?;
    Ok(format!(
        "command=frontier points={} e2xi={} out={}",
        points.len(),
        fmt(points[0].e2xi),
        path.display()
    ))
}

struct Check {
    name: &'static str,
    estimate: Estimate,
    target: f64,
}

impl Check {
    fn z(&self) -> Option<f64> {
        self.estimate.z_score(self.target)
    }

    fn status(&self) -> &'static str {
        match self.z() {
            Some(z) if z < 3.0 => "PASS",
            Some(_) => "FAIL",
            None => "UNDEFINED",
        }
    }
}

fn cmd_simulate(s: &Session, args: &SimulateArgs) -> anyhow::Result<String> {
    let mut sim = s.cfg.sim.clone();
    if let Some(p) = args.paths {
        sim.paths = p;
    }
    if let Some(h) = args.step {
        sim.step = Some(h);
    }
    let (fs, c) = s.solve()?;
    let bond = s.model.bond_growth();
    let (res, checks): (SimResult, Vec<Check>) = if args.zero_policy {
        let res = simulate_paths(&s.model, &fs, &BondOnly, &sim)?;
        let checks = vec![
            Check { name: "mean", estimate: res.terminal_mean, target: bond },
            Check { name: "variance", estimate: res.terminal_variance, target: 0.0 },
        ];
        (res, checks)
    } else {
        let Some(x_bar) = args.xbar.or(s.cfg.sim_target()) else {
            return Err(Error::Config("no target: pass --xbar or set target in the config".to_string()).into());
        };
        if !(x_bar >= bond) {
            return Err(Error::TargetBelowBondGrowth { x_bar, bond_growth: bond }.into());
        }
        let point = crate::policy::frontier_point(x_bar, &s.model, &c)?;
        let ctx = PolicyContext::new(&s.model, &fs, &c, x_bar)?;
        let res = simulate_optimal(&s.model, &ctx, &sim)?;
        let mut checks = vec![
            Check { name: "mean", estimate: res.terminal_mean, target: x_bar },
            Check { name: "variance", estimate: res.terminal_variance, target: point.variance },
        ];
        if let Some(e) = res.e2xi {
            let exact = expected_e2xi(&c, &s.model.y0)?;
            checks.push(Check { name: "e2xi_direct", estimate: e.direct, target: exact });
            checks.push(Check { name: "e2xi_wealth", estimate: e.wealth, target: exact });
        }
        (res, checks)
    };

    let path = s.target(args.out.as_ref(), "simulate.csv");
    let mut w = writer(&path)?;
    w.write_record(["quantity", "estimate", "se", "half_width", "target", "z", "status"])?;
    for ch in &checks {
        w.write_record([
            ch.name.to_string(),
            fmt(ch.estimate.value),
            opt(ch.estimate.se),
            opt(ch.estimate.half_width()),
            fmt(ch.target),
            opt(ch.z()),
            ch.status().to_string(),
        ])?;
    }
    w.flush()?;
    if let Some(term) = &res.terminal {
        let mut w = writer(&s.out_dir.join("terminal.csv"))?;
        w.write_record(["path", "wealth"])?;
        for (i, x) in term.iter().enumerate() {
            w.write_record([i.to_string(), fmt(*x)])?;
        }
        w.flush()?;
    }
    if let Some(rec) = &res.path {
        write_path(&s.out_dir, rec)?;
    }

    let mut line = format!("command=simulate paths={} step={}", res.paths, fmt(res.step));
    for ch in &checks {
        line.push_str(&format!(
            " {0}={1} {0}_se={2} {0}_check={3}",
            ch.name,
            fmt(ch.estimate.value),
            opt(ch.estimate.se),
            ch.status()
        ));
    }
    line.push_str(&format!(" out={}", path.display()));
    Ok(line)
}

/// Writes the recorded path and, separately, its log prices in the layout
/// `filter` reads.
fn write_path(dir: &Path, rec: &PathRecord) -> anyhow::Result<()> {
    let (n, m) = (rec.y[0].len(), rec.log_prices[0].len());
    let mut w = writer(&dir.join("path.csv"))?;
    let mut header = vec!["t".to_string()];
    header.extend(indexed("y", n));
    header.extend(indexed("log_s", m));
    header.extend(indexed("yhat", n));
    header.extend(indexed("dv", m));
    header.push("wealth".to_string());
    w.write_record(&header)?;
    for j in 0..rec.t.len() {
        let mut row = vec![fmt(rec.t[j])];
        for v in [&rec.y[j], &rec.log_prices[j], &rec.y_hat[j], &rec.innovations[j]] {
            row.extend(v.iter().map(|&x| fmt(x)));
        }
        row.push(fmt(rec.wealth[j]));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = writer(&dir.join("prices.csv"))?;
    let mut header = vec!["t".to_string()];
    header.extend(indexed("log_s", m));
    w.write_record(&header)?;
    for j in 0..rec.t.len() {
        let mut row = vec![fmt(rec.t[j])];
        row.extend(rec.log_prices[j].iter().map(|&x| fmt(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `(t, log prices)` rows; plain `s_i` columns are converted to logs.
fn read_prices(path: &Path, m: usize) -> anyhow::Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let Some(t_col) = find("t") else {
        return Err(Error::Config("price file has no `t` column".to_string()).into());
    };
    let (cols, log) = if let Some(cols) = (1..=m).map(|i| find(&format!("log_s_{i}"))).collect::<Option<Vec<_>>>() {
        (cols, true)
    } else if let Some(cols) = (1..=m).map(|i| find(&format!("s_{i}"))).collect::<Option<Vec<_>>>() {
        (cols, false)
    } else {
        return Err(Error::Config(format!("price file needs columns log_s_1..log_s_{m} or s_1..s_{m}")).into());
    };
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let num = |c: usize| -> anyhow::Result<f64> {
            let field = record.get(c).unwrap_or("").trim();
            field
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("row {}: `{field}` is not a number", line + 2)).into())
        };
        times.push(num(t_col)?);
        let mut v = DVector::zeros(m);
        for (i, &c) in cols.iter().enumerate() {
            let x = num(c)?;
            v[i] = if log {
                x
            } else {
                if !(x > 0.0) {
                    bail!(Error::Config(format!("row {}: price {x} is not positive", line + 2)));
                }
                x.ln()
            };
        }
        rows.push(v);
    }
    Ok((times, rows))
}

fn cmd_filter(s: &Session, args: &FilterArgs) -> anyhow::Result<String> {
    let fs = s.filter()?;
    let (times, log_prices) = read_prices(&args.prices, s.model.m)?;
    let path = run_filter(&s.model, &fs, &log_prices)?;
    for (k, &t) in times.iter().enumerate() {
        if fs.grid.node_index(t)? != k {
            return Err(Error::GridMismatch { t }.into());
        }
    }
    let out = s.target(args.out.as_ref(), "filter.csv");
    let mut w = writer(&out)?;
    let mut header = vec!["t".to_string()];
    header.extend(indexed("yhat", s.model.n));
    header.extend(indexed("dv", s.model.m));
    w.write_record(&header)?;
    for k in 0..log_prices.len() {
        let mut row = vec![fmt(fs.grid.t(k))];
        row.extend(path.y_hat[k].iter().map(|&x| fmt(x)));
        row.extend(path.innovations[k].iter().map(|&x| fmt(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    let last = path.y_hat.last().map(|y| y.iter().map(|&x| fmt(x)).collect::<Vec<_>>().join(";"));
    Ok(format!(
        "command=filter rows={} yhat_T={} out={}",
        log_prices.len(),
        last.unwrap_or_default(),
        out.display()
    ))
}

/// Entry point shared by the binary: prints the summary or the error and
/// returns the exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(line) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{line}");
            0
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}
