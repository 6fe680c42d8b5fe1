//! `diffnet` command-line front end.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffnet::engine::{self, EngineError};
use diffnet::optimize::{self, AdamConfig, Objective, SpsaConfig};
use diffnet::routing;
use diffnet::{ParamSet, Scenario, ScenarioError, Tape, Var};

#[derive(Parser)]
#[command(
    name = "diffnet",
    version,
    about = "Differentiable network loading and toll optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward run; writes the link time series.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Gradient of an objective with respect to selected parameters.
    Grad {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Gradient next to central differences at several step sizes.
    Fdcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Comma-separated step sizes.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "1e-1,1e-2,1e-3,1e-4,1e-5"
        )]
        eps: Vec<f64>,
    },
    /// Virtual-vehicle trajectories, one per `--trip t0:origin:destination`.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long = "trip", required = true)]
        trips: Vec<String>,
    },
    /// Toll design with Adam on exact gradients.
    OptimizeToll {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        toll: TollArgs,
        #[arg(long, default_value_t = 7.0)]
        lr: f64,
        #[arg(long, default_value_t = 2e6)]
        clip: f64,
    },
    /// Toll design with SPSA.
    SpsaToll {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        toll: TollArgs,
        #[arg(long, default_value_t = 1e-4)]
        a: f64,
        #[arg(long, default_value_t = 30.0)]
        c: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Logit scale (1/s); 0 gives deterministic DUO.
    #[arg(long)]
    mu: Option<f64>,
    /// Segments per link; switches to segment travel times.
    #[arg(long)]
    segments: Option<usize>,
    /// Route refresh interval (s).
    #[arg(long)]
    dt_route: Option<f64>,
}

#[derive(Args)]
struct Target {
    /// Parameter selection, e.g. `q1,u3,alpha1` or `toll:*`.
    #[arg(long)]
    params: String,
    /// ttt | ttt-link:<id> | att:<id> | trip:<t0>:<origin>:<destination> | toll-J
    #[arg(long, default_value = "ttt")]
    objective: String,
    #[arg(long, default_value_t = 0.001)]
    lambda: f64,
}

#[derive(Args)]
struct TollArgs {
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0.001)]
    lambda: f64,
    /// Add a wall-clock column to the trace (makes output run-dependent).
    #[arg(long)]
    timing: bool,
}

impl Common {
    fn load(&self) -> Result<Scenario> {
        let sc = Scenario::load(&self.scenario)?;
        if self.mu.is_none() && self.segments.is_none() && self.dt_route.is_none() {
            return Ok(sc);
        }
        let mut file = sc.to_file();
        if let Some(mu) = self.mu {
            file.meta.mu = mu;
        }
        if let Some(m) = self.segments {
            file.meta.m = m;
            file.meta.tt_method = diffnet::scenario::TravelTimeMethod::Segments;
        }
        if let Some(r) = self.dt_route {
            file.meta.dt_route = Some(r);
        }
        Ok(Scenario::from_file(file)?)
    }
}

fn parse_objective(sc: &Scenario, text: &str, lambda: f64) -> Result<Objective> {
    let link = |id: &str| {
        sc.link_index(id)
            .ok_or_else(|| anyhow!(ScenarioError::UnknownLink(id.to_string())))
    };
    let node = |id: &str| {
        sc.node_index(id)
            .ok_or_else(|| anyhow!(ScenarioError::UnknownNode(id.to_string())))
    };
    let parts: Vec<&str> = text.split(':').collect();
    Ok(match parts.as_slice() {
        ["ttt"] => Objective::Ttt,
        ["toll-J"] => Objective::Toll { lambda },
        ["ttt-link", ids @ ..] if !ids.is_empty() => {
            Objective::TttLinks(ids.iter().map(|id| link(id)).collect::<Result<_>>()?)
        }
        ["att", id] => Objective::Att(link(id)?),
        ["trip", t0, o, d] => Objective::Trip {
            t0: t0
                .parse()
                .with_context(|| format!("bad departure time `{t0}`"))?,
            origin: node(o)?,
            destination: node(d)?,
        },
        _ => bail!(ScenarioError::Parse(format!("unknown objective `{text}`"))),
    })
}

const HEADER: &str = concat!("# diffnet ", env!("CARGO_PKG_VERSION"));

/// CSV table written under a version line.
struct Table {
    csv: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        let mut buf = Vec::new();
        writeln!(buf, "{HEADER}").unwrap();
        let mut csv = csv::Writer::from_writer(buf);
        csv.write_record(columns.iter().map(AsRef::as_ref)).unwrap();
        Table { csv }
    }

    fn row(&mut self, fields: &[&dyn ToString]) {
        self.csv
            .write_record(fields.iter().map(|f| f.to_string()))
            .unwrap();
    }

    /// Writes to `dir/name` through a temporary file and a rename.
    fn save(self, dir: &Path, name: &str) -> Result<PathBuf> {
        let bytes = self.csv.into_inner().expect("in-memory writer");
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(path)
    }
}

fn link_series(sc: &Scenario, res: &engine::SimResult) -> Table {
    let mut tape = Tape::new();
    let mut table = Table::new(&["t", "link", "N_up", "N_down", "density_avg", "speed_avg"]);
    for t in 0..=res.steps {
        for (l, link) in sc.links.iter().enumerate() {
            let (up, down) = (res.up[l].value_at(t), res.down[l].value_at(t));
            let k = (up - down) / link.length;
            let v = routing::speed(&mut tape, &res.inputs.fds[l], Var::constant(k)).value();
            table.row(&[&(t as f64 * res.dt), &link.id, &up, &down, &k, &v]);
        }
    }
    table
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::Run { common } => {
            let sc = common.load()?;
            let mut tape = Tape::new();
            let res = engine::run(&mut tape, &sc, &ParamSet::default())?;
            let ttt = engine::objective_ttt(&mut tape, &res, None).value();
            let path = link_series(&sc, &res).save(&common.out, "links.csv")?;
            println!(
                "TTT {ttt:.6} veh.s; conservation error {:.2e}; wrote {} in {:.2}s",
                res.conservation_error,
                path.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Grad { common, target } => {
            let sc = common.load()?;
            let params = sc.register_parameters(&target.params)?;
            let obj = parse_objective(&sc, &target.objective, target.lambda)?;
            let report = optimize::grad(&sc, &params, &obj)?;
            let mut table = Table::new(&["parameter", "value", "ad"]);
            for (i, name) in report.names.iter().enumerate() {
                table.row(&[name, &params.values[i], &report.gradient[i]]);
            }
            let path = table.save(&common.out, "gradient.csv")?;
            println!(
                "{} = {:.6}; gradient norm {:.6e}; wrote {} in {:.2}s",
                report.objective,
                report.value,
                report.norm(),
                path.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Fdcheck {
            common,
            target,
            eps,
        } => {
            let sc = common.load()?;
            let params = sc.register_parameters(&target.params)?;
            let obj = parse_objective(&sc, &target.objective, target.lambda)?;
            let table = optimize::fd_check(&sc, &params, &obj, &eps)?;
            let mut columns = vec!["parameter".to_string(), "ad".to_string()];
            columns.extend(eps.iter().map(|e| format!("fd_{e:e}")));
            let mut out = Table::new(&columns);
            let mut worst: f64 = 0.0;
            for (i, name) in table.names.iter().enumerate() {
                let mut fields: Vec<&dyn ToString> = vec![name, &table.ad[i]];
                for j in 0..eps.len() {
                    fields.push(&table.fd[i][j]);
                    worst = worst.max(table.rel_err(i, j));
                }
                out.row(&fields);
            }
            let path = out.save(&common.out, "fdcheck.csv")?;
            println!(
                "{}: largest relative gap {worst:.3e}; wrote {} in {:.2}s",
                table.objective,
                path.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Trace { common, trips } => {
            let sc = common.load()?;
            let res = engine::simulate(&sc)?;
            let mut tape = Tape::new();
            let mut table = Table::new(&["trip", "t0", "origin", "destination", "link", "t_exit"]);
            for (k, trip_arg) in trips.iter().enumerate() {
                let [t0, o, d] = trip_arg.split(':').collect::<Vec<_>>()[..] else {
                    bail!(ScenarioError::Parse(format!(
                        "trip `{trip_arg}` is not t0:origin:destination"
                    )));
                };
                let t0: f64 = t0
                    .parse()
                    .with_context(|| format!("bad departure time `{t0}`"))?;
                let trip = engine::trace_trip_by_id(&mut tape, &sc, &res, t0, o, d)?;
                for (l, exit) in trip.links.iter().zip(&trip.exits) {
                    table.row(&[&k, &t0, &o, &d, &sc.links[*l].id, &exit.value()]);
                }
                println!(
                    "trip {k}: {o} -> {d} at {t0} s takes {:.3} s",
                    trip.travel_time.value()
                );
            }
            let path = table.save(&common.out, "trajectories.csv")?;
            println!(
                "wrote {} in {:.2}s",
                path.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::OptimizeToll {
            common,
            toll,
            lr,
            clip,
        } => {
            let sc = common.load()?;
            let params = sc.register_parameters("toll:*")?;
            let cfg = AdamConfig {
                learning_rate: lr,
                clip_norm: clip,
                iterations: toll.iters,
                ..AdamConfig::default()
            };
            let res = optimize::adam_optimize(
                &sc,
                &params,
                &Objective::Toll {
                    lambda: toll.lambda,
                },
                &cfg,
            )?;
            finish_toll(&common.out, &params, &res, toll.timing, start)?;
        }
        Command::SpsaToll {
            common,
            toll,
            a,
            c,
            seed,
        } => {
            let sc = common.load()?;
            let params = sc.register_parameters("toll:*")?;
            let cfg = SpsaConfig {
                a,
                c,
                seed,
                iterations: toll.iters,
                ..SpsaConfig::default()
            };
            let res = optimize::spsa_optimize(
                &sc,
                &params,
                &Objective::Toll {
                    lambda: toll.lambda,
                },
                &cfg,
            )?;
            finish_toll(&common.out, &params, &res, toll.timing, start)?;
        }
    }
    Ok(())
}

fn finish_toll(
    out: &Path,
    params: &ParamSet,
    res: &optimize::OptimizeResult,
    timing: bool,
    start: Instant,
) -> Result<()> {
    let columns = ["iteration", "J", "TTT", "grad_norm", "wall"];
    let mut trace = Table::new(&columns[..if timing { 5 } else { 4 }]);
    for r in &res.trace {
        let mut fields: Vec<&dyn ToString> = vec![&r.iteration, &r.objective, &r.ttt, &r.grad_norm];
        if timing {
            fields.push(&r.wall);
        }
        trace.row(&fields);
    }
    trace.save(out, "trace.csv")?;
    let mut tolls = Table::new(&["parameter", "value"]);
    for (name, v) in params.names.iter().zip(&res.values) {
        tolls.row(&[name, v]);
    }
    let path = tolls.save(out, "tolls.csv")?;
    println!(
        "J {:.6}, TTT {:.6} veh.s after {} iterations; wrote {} in {:.2}s",
        res.final_objective,
        res.final_ttt,
        res.trace.len(),
        path.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ScenarioError>() {
            return if matches!(e, ScenarioError::Io(_)) {
                3
            } else {
                1
            };
        }
        if let Some(e) = cause.downcast_ref::<EngineError>() {
            return match e {
                EngineError::Unknown { .. } | EngineError::NoPath { .. } => 1,
                EngineError::InvalidParameter { .. } => 1,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if cause.is::<std::num::ParseFloatError>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("DIFFNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
