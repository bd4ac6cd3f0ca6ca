mod svg;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crnlab::boundary::{exit_distribution_mc, transience_lower_bound, TubeVariant};
use crnlab::fluid::{integrate, vector_field_grid, write_grid_csv, Rect};
use crnlab::lab::{classify_stability, occupation_measure, phi_moment, return_time_stats, verify_drift, Annulus, ClassifyConfig};
use crnlab::lyapunov::{assemble, select_parameters, Tuning, Variant};
use crnlab::scaling::RegionParams;
use crnlab::ssa::{simulate, stream, StopCondition};
use crnlab::{builtin_network, parse_network, Concentration, Network, State};

const BUILTINS: [&str; 3] = ["crn0", "crn1", "crn2"];

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] crnlab::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("drift condition violated at {0} points")]
    Violations(usize),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Violations(_) => 2,
            Failure::Core(crnlab::Error::Infeasible { .. }) => 3,
            _ => 1,
        }
    }
}

type Outcome = Result<(), Failure>;

/// Stochastic mass-action network laboratory.
///
/// Every subcommand writes its CSV (and, where noted, SVG) files into the
/// output directory. Exit status: 0 success, 1 usage or input error,
/// 2 verification failure, 3 infeasible parameter selection.
#[derive(Debug, Parser)]
#[command(name = "crnlab", version)]
struct Cli {
    /// Seed for all random streams; identical argv and seed give identical CSV.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true, env = "CRNLAB_OUT", default_value = "crnlab-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact stochastic simulation of one trajectory.
    ///
    /// Output: trajectory.csv with columns t,x1,..,xd, one row per state
    /// visited, starting with the initial state at t = 0.
    Simulate(SimulateArgs),
    /// Integrate the mass-action ODE and sample its vector field.
    ///
    /// Outputs: ode_path.csv (t,x1,..,xd), vector_field.csv (x1,x2,f1,f2)
    /// on an n x n grid, vector_field.svg (arrows plus the path).
    Ode(OdeArgs),
    /// Monte Carlo exit law of the boundary tube {x2 <= 1}.
    ///
    /// Output: exit_law.csv with columns b,analytic,empirical,stderr for exit
    /// levels k0..=b-max; `analytic` is empty where no closed form exists.
    Boundary(BoundaryArgs),
    /// Select Lyapunov parameters and tabulate V.
    ///
    /// Outputs: params.toml (the selected constants), margins.csv
    /// (name,value; positive means the inequality holds), v_surface.csv
    /// (x1,x2,region,V,h on the window) and v_surface.svg (log10 V contours).
    Lyapunov(LyapunovArgs),
    /// Check the drift inequality on an annulus.
    ///
    /// Output: drift_report.csv with columns x1,x2,region,LV,phiV,margin,
    /// one row per violating point. Exits 2 if any row is written.
    Verify(VerifyArgs),
    /// Occupation measure of a long trajectory and optional return times.
    ///
    /// Outputs: occupation.csv (x1,..,xd,time, sorted by state);
    /// phi_moment.csv (decile,cumulative) for crn0 and crn1; with
    /// --returns N also return_times.csv (index,tau,censored,jumps).
    Measure(MeasureArgs),
    /// Classify the network as positive recurrent, null recurrent or transient.
    ///
    /// Outputs: classification.txt (verdict and statistics) and
    /// truncated_means.csv (budget,truncated_mean).
    Classify(ClassifyArgs),
}

#[derive(Debug, Args)]
struct NetArg {
    /// Builtin name (crn0, crn1, crn2) or path to a network file.
    #[arg(long)]
    net: String,
}

impl NetArg {
    fn load(&self) -> Result<Network, Failure> {
        if BUILTINS.contains(&self.net.as_str()) {
            return Ok(builtin_network(&self.net)?);
        }
        let text = fs::read_to_string(&self.net)
            .map_err(|e| Failure::Usage(format!("cannot read network file {}: {e}", self.net)))?;
        Ok(parse_network(&text)?)
    }

    /// Construction variant: `--variant` if given, else the builtin name.
    fn variant(&self, explicit: Option<&str>) -> Result<Variant, Failure> {
        Variant::from_name(explicit.unwrap_or(&self.net)).map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    net: NetArg,
    /// Initial state, comma separated.
    #[arg(long, default_value = "0,0", value_parser = parse_list::<u64>)]
    x0: List<u64>,
    /// Stop after this many jumps.
    #[arg(long)]
    jumps: Option<u64>,
    /// Stop before the first jump past this time.
    #[arg(long)]
    time: Option<f64>,
}

#[derive(Debug, Args)]
struct OdeArgs {
    #[command(flatten)]
    net: NetArg,
    /// Initial concentration, comma separated.
    #[arg(long, default_value = "1,1", value_parser = parse_list::<f64>)]
    x0: List<f64>,
    #[arg(long, default_value_t = 10.0)]
    t_end: f64,
    /// Local error tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Grid points per side of the vector field.
    #[arg(long, default_value_t = 21)]
    grid: usize,
    /// Field window in x1 as lo:hi.
    #[arg(long, default_value = "0:5", value_parser = parse_span::<f64>)]
    x1: (f64, f64),
    /// Field window in x2 as lo:hi.
    #[arg(long, default_value = "0:5", value_parser = parse_span::<f64>)]
    x2: (f64, f64),
}

#[derive(Debug, Args)]
struct BoundaryArgs {
    #[command(flatten)]
    net: NetArg,
    /// Start at (k0, 1).
    #[arg(long, default_value_t = 1)]
    k0: u64,
    #[arg(long, default_value_t = 10_000)]
    samples: u64,
    /// Step budget per run; runs still inside are censored.
    #[arg(long, default_value_t = 1_000_000)]
    max_steps: u64,
    /// Largest exit level tabulated (default k0 + 30).
    #[arg(long)]
    b_max: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// delta0 0.5, eps 0.1, b0 20, b1 10, b2 50, rho 200.
    #[value(alias = "paper-desk")]
    Desk,
}

#[derive(Debug, Args)]
struct ConstructionArgs {
    /// Construction to use (crn0 or crn1); defaults to the --net name, so it
    /// is required when --net is a file.
    #[arg(long)]
    variant: Option<String>,
    /// Overrides the exponent and region flags below.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 0.5)]
    delta0: f64,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value_t = 20.0)]
    b0: f64,
    #[arg(long, default_value_t = 10.0)]
    b1: f64,
    #[arg(long, default_value_t = 50.0)]
    b2: f64,
    #[arg(long, default_value_t = 200.0)]
    rho: f64,
}

impl ConstructionArgs {
    fn build(&self, net: &NetArg) -> Result<crnlab::lyapunov::Selection, Failure> {
        let variant = net.variant(self.variant.as_deref())?;
        let (delta0, eps, region) = match self.preset {
            Some(Preset::Desk) => (0.5, 0.1, RegionParams::default()),
            None => (self.delta0, self.eps, RegionParams::new(self.b0, self.b1, self.b2, self.rho)?),
        };
        Ok(select_parameters(delta0, eps, variant, region, &Tuning::default())?)
    }
}

#[derive(Debug, Args)]
struct LyapunovArgs {
    #[command(flatten)]
    net: NetArg,
    #[command(flatten)]
    construction: ConstructionArgs,
    /// Surface window in x1 as lo:hi.
    #[arg(long, default_value = "0:400", value_parser = parse_span::<u64>)]
    x1: (u64, u64),
    /// Surface window in x2 as lo:hi.
    #[arg(long, default_value = "0:400", value_parser = parse_span::<u64>)]
    x2: (u64, u64),
    #[arg(long, default_value_t = 4)]
    stride: u64,
    /// Contour levels in the SVG.
    #[arg(long, default_value_t = 12)]
    levels: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    net: NetArg,
    #[command(flatten)]
    construction: ConstructionArgs,
    /// Radii r_min:r_max of the checked annulus.
    #[arg(long, default_value = "200:2000", value_parser = parse_span::<f64>)]
    annulus: (f64, f64),
    /// Sweep stride away from interfaces.
    #[arg(long, default_value_t = 7)]
    stride: u64,
}

#[derive(Debug, Args)]
struct MeasureArgs {
    #[command(flatten)]
    net: NetArg,
    #[arg(long, default_value = "0,0", value_parser = parse_list::<u64>)]
    x0: List<u64>,
    #[arg(long, default_value_t = 1_000_000)]
    jumps: u64,
    /// Number of return-time samples (0 skips them).
    #[arg(long, default_value_t = 0)]
    returns: usize,
    /// Return target is the ball of this radius.
    #[arg(long, default_value_t = 50.0)]
    radius: f64,
    /// Start of each return-time sample.
    #[arg(long, default_value = "100,0", value_parser = parse_list::<u64>)]
    return_from: List<u64>,
    /// Jump budget per return-time sample.
    #[arg(long, default_value_t = 1_000_000)]
    budget: u64,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    net: NetArg,
    /// Main-run sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Return target radius.
    #[arg(long)]
    radius: Option<f64>,
}

/// Comma-separated coordinates, kept as one clap value.
#[derive(Debug, Clone)]
struct List<T>(Vec<T>);

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<List<T>, String> {
    s.split(',').map(|p| p.trim().parse().map_err(|_| format!("bad entry `{p}`"))).collect::<Result<_, _>>().map(List)
}

fn parse_span<T: std::str::FromStr + PartialOrd>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo = a.trim().parse().map_err(|_| format!("bad bound `{a}`"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad bound `{b}`"))?;
    if lo > hi {
        return Err("need lo <= hi".into());
    }
    Ok((lo, hi))
}

struct Out<'a>(&'a Path);

impl Out<'_> {
    fn file(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), Failure> {
        fs::create_dir_all(self.0).map_err(|source| Failure::Io { path: self.0.to_path_buf(), source })?;
        let path = self.0.join(name);
        let f = File::create(&path).map_err(|source| Failure::Io { path: path.clone(), source })?;
        Ok((path, BufWriter::new(f)))
    }

    fn csv(&self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> crnlab::Result<()>) -> Outcome {
        let (path, mut w) = self.file(name)?;
        write(&mut w)?;
        w.flush().map_err(|source| Failure::Io { path: path.clone(), source })?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn text(&self, name: &str, body: &str) -> Outcome {
        let (path, mut w) = self.file(name)?;
        w.write_all(body.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|source| Failure::Io { path: path.clone(), source })?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn state(net: &Network, x: &[u64]) -> Result<State, Failure> {
    if x.len() != net.dim() {
        return Err(Failure::Usage(format!("state has {} entries, network has {} species", x.len(), net.dim())));
    }
    Ok(State::new(x))
}

fn simulate_cmd(a: &SimulateArgs, seed: u64, out: &Out) -> Outcome {
    let net = a.net.load()?;
    let x0 = state(&net, &a.x0.0)?;
    let stop = match (a.jumps, a.time) {
        (Some(n), Some(t)) => StopCondition::jumps(n).and_time(t),
        (Some(n), None) => StopCondition::jumps(n),
        (None, Some(t)) => StopCondition::time(t),
        (None, None) => StopCondition::jumps(1000),
    };
    let tr = simulate(&net, &x0, &stop, &mut stream(seed, 0));
    out.csv("trajectory.csv", |w| tr.write_csv(w))
}

fn ode_cmd(a: &OdeArgs, out: &Out) -> Outcome {
    let net = a.net.load()?;
    if a.x0.0.len() != net.dim() {
        return Err(Failure::Usage(format!("x0 has {} entries, network has {} species", a.x0.0.len(), net.dim())));
    }
    let path = integrate(&net, &Concentration(a.x0.0.clone()), a.t_end, a.tol)?;
    out.csv("ode_path.csv", |w| path.write_csv(w))?;
    let grid = vector_field_grid(&net, Rect { x1: a.x1, x2: a.x2 }, a.grid)?;
    out.csv("vector_field.csv", |w| write_grid_csv(&grid, w))?;
    let arrows: Vec<_> = grid.iter().map(|g| (g.x1, g.x2, g.f1, g.f2)).collect();
    let line: Vec<_> = path.samples.iter().map(|(_, c)| (c.0[0], c.0[1])).collect();
    let nx = if a.x1.1 > a.x1.0 { a.grid } else { 1 };
    out.text("vector_field.svg", &svg::vector_field(&arrows, nx, &line))
}

fn boundary_cmd(a: &BoundaryArgs, seed: u64, out: &Out) -> Outcome {
    let variant = TubeVariant::from_name(&a.net.net).map_err(|e| Failure::Usage(e.to_string()))?;
    let law = exit_distribution_mc(variant, a.k0, a.samples, a.max_steps, seed)?;
    out.csv("exit_law.csv", |w| law.write_csv(w, a.b_max.unwrap_or(a.k0 + 30)))?;
    println!("escaped fraction {:.6} (censored {})", law.escaped_fraction(), law.censored);
    if variant == TubeVariant::Crn2 {
        println!("escape probability lower bound {:.6}", transience_lower_bound(a.k0));
    }
    Ok(())
}

fn lyapunov_cmd(a: &LyapunovArgs, out: &Out) -> Outcome {
    let sel = a.construction.build(&a.net)?;
    for m in &sel.margins {
        println!("{:>24} {:+.6e}", m.name, m.value);
    }
    out.text("params.toml", &sel.params.to_toml())?;
    out.csv("margins.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["name", "value"])?;
        for m in &sel.margins {
            c.write_record([m.name.to_string(), format!("{}", m.value)])?;
        }
        c.flush().map_err(|e| crnlab::Error::Csv(e.to_string()))
    })?;
    let v = assemble(sel.params)?;
    out.csv("v_surface.csv", |w| v.write_surface(a.x1, a.x2, a.stride, w))?;
    let step = a.stride.max(1) as usize;
    let xs: Vec<u64> = (a.x1.0..=a.x1.1).step_by(step).collect();
    let ys: Vec<u64> = (a.x2.0..=a.x2.1).step_by(step).collect();
    let z: Vec<f64> = ys.iter().flat_map(|&b| xs.iter().map(move |&a| (a, b))).map(|(a, b)| v.value(&State::xy(a, b)).log10()).collect();
    let to_f = |s: &[u64]| s.iter().map(|&k| k as f64).collect::<Vec<_>>();
    out.text("v_surface.svg", &svg::contours(&to_f(&xs), &to_f(&ys), &z, a.levels))
}

fn verify_cmd(a: &VerifyArgs, out: &Out) -> Outcome {
    let net = a.net.load()?;
    let v = assemble(a.construction.build(&a.net)?.params)?;
    let annulus = Annulus { r_min: a.annulus.0, r_max: a.annulus.1, stride: a.stride };
    let rep = verify_drift(&net, &v, annulus)?;
    out.csv("drift_report.csv", |w| rep.write_csv(w))?;
    println!("checked {} points, worst margin {:.6e}", rep.points, rep.worst_margin);
    match rep.violations.len() {
        0 => Ok(()),
        n => Err(Failure::Violations(n)),
    }
}

fn measure_cmd(a: &MeasureArgs, seed: u64, out: &Out) -> Outcome {
    let net = a.net.load()?;
    let x0 = state(&net, &a.x0.0)?;
    let mu = occupation_measure(&net, &x0, a.jumps, &mut stream(seed, 0))?;
    out.csv("occupation.csv", |w| mu.write_csv(w))?;
    println!("total time {:.6}, mass within radius {} = {:.6}", mu.total_time, a.radius, mu.mass_within(a.radius));
    if let Ok(variant) = Variant::from_name(&a.net.net) {
        let v = assemble(select_parameters(0.5, 0.1, variant, RegionParams::default(), &Tuning::default())?.params)?;
        let m = phi_moment(&mu, |x| v.value(x), |s| v.phi(s));
        out.csv("phi_moment.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["decile", "cumulative"])?;
            for (k, s) in m.cumulative.iter().enumerate() {
                c.write_record([(k + 1).to_string(), format!("{s}")])?;
            }
            c.flush().map_err(|e| crnlab::Error::Csv(e.to_string()))
        })?;
    }
    if a.returns > 0 {
        let from = state(&net, &a.return_from.0)?;
        let r = return_time_stats(&net, a.radius, &from, a.returns, a.budget, seed)?;
        out.csv("return_times.csv", |w| r.write_csv(w))?;
        println!("censored fraction {:.6}", r.censored_fraction());
    }
    Ok(())
}

fn classify_cmd(a: &ClassifyArgs, seed: u64, out: &Out) -> Outcome {
    let net = a.net.load()?;
    let mut cfg = ClassifyConfig { seed, ..Default::default() };
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    if let Some(r) = a.radius {
        cfg.radius = r;
    }
    let c = classify_stability(&net, &cfg)?;
    let report = c.report();
    print!("{report}");
    out.text("classification.txt", &report)?;
    let budgets = if c.truncated_means.len() == cfg.budgets.len() { &cfg.budgets } else { &cfg.pilot_budgets };
    out.csv("truncated_means.csv", |w| {
        let mut o = csv::Writer::from_writer(w);
        o.write_record(["budget", "truncated_mean"])?;
        for (b, m) in budgets.iter().zip(&c.truncated_means) {
            o.write_record([b.to_string(), format!("{m}")])?;
        }
        o.flush().map_err(|e| crnlab::Error::Csv(e.to_string()))
    })
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let out = Out(&cli.out);
    match &cli.cmd {
        Command::Simulate(a) => simulate_cmd(a, cli.seed, &out),
        Command::Ode(a) => ode_cmd(a, &out),
        Command::Boundary(a) => boundary_cmd(a, cli.seed, &out),
        Command::Lyapunov(a) => lyapunov_cmd(a, &out),
        Command::Verify(a) => verify_cmd(a, &out),
        Command::Measure(a) => measure_cmd(a, cli.seed, &out),
        Command::Classify(a) => classify_cmd(a, cli.seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
