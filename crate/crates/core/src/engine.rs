//! The simulation scan, scalar objectives and virtual-vehicle trajectories.
//!
//! [`run`] folds the one-step transition over all timesteps, recording every
//! operation on the caller's tape. Link curves are carried in fixed-width
//! windows during the scan; per-step flows are kept and full cumulative
//! curves are rebuilt by summation afterwards.

use std::collections::BinaryHeap;

use thiserror::Error;

use crate::ad::{AdError, Op, Tape, Var};
use crate::ltm::{self, CountHistory, CumCurve, CurveWindow, LinkFd};
use crate::node;
use crate::routing::{self, RoutingTable};
use crate::scenario::{NodeKind, Param, ParamSet, RouteChoice, Scenario, TravelTimeMethod};

/// Weight given to on-link vehicles when splitting an outlink's inflow by
/// destination, relative to this step's through-flow.
const SHARE_PAD: f64 = 1e-6;
/// Slack (veh) when checking that a trip completes.
const COUNT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite state at step {step} (link {link})")]
    NonFinite { step: usize, link: String },
    #[error("parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("trip does not complete: vehicle {count:.3} never leaves link {link}")]
    IncompleteTrip { link: String, count: f64 },
    #[error("no path from {origin} to {destination}")]
    NoPath { origin: String, destination: String },
    #[error("unknown {kind} `{id}`")]
    Unknown { kind: &'static str, id: String },
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Tracked model inputs for one run.
#[derive(Debug, Clone)]
pub struct Inputs {
    /// Registered parameters, aligned with the `ParamSet`.
    pub params: Vec<Var>,
    pub fds: Vec<LinkFd>,
    /// `rates[demand][piece]` (veh/s).
    pub rates: Vec<Vec<Var>>,
    /// `tolls[link][period]` (s).
    pub tolls: Vec<Vec<Var>>,
    pub turns: Vec<Var>,
}

/// Registers `params` on the tape and builds every model input, using the
/// parameter values in place of the scenario's.
pub fn bind(tape: &mut Tape, sc: &Scenario, params: &ParamSet) -> Result<Inputs, EngineError> {
    let vars: Vec<Var> = params.values.iter().map(|&v| tape.input(v)).collect();
    let lookup = |key: Param, default: f64| -> Var {
        params
            .position(key)
            .map(|i| vars[i])
            .unwrap_or(Var::constant(default))
    };
    for (i, (&key, &v)) in params.keys.iter().zip(&params.values).enumerate() {
        let bad = |reason: &str| EngineError::InvalidParameter {
            name: params.names[i].clone(),
            reason: reason.to_string(),
        };
        if !v.is_finite() {
            return Err(bad("not finite"));
        }
        match key {
            Param::Toll { .. } | Param::Turn(_) | Param::Demand { .. } if v < 0.0 => {
                return Err(bad("must be non-negative"))
            }
            Param::FreeFlowSpeed(_)
            | Param::Capacity(_)
            | Param::JamDensity(_)
            | Param::WaveSpeed(_)
            | Param::Priority(_)
                if v <= 0.0 =>
            {
                return Err(bad("must be positive"))
            }
            _ => {}
        }
    }

    let dt = sc.config.dt;
    let mut fds = Vec::with_capacity(sc.links.len());
    for (l, link) in sc.links.iter().enumerate() {
        let u = lookup(Param::FreeFlowSpeed(l), link.free_flow_speed);
        let kappa = lookup(Param::JamDensity(l), link.jam_density);
        let alpha = lookup(Param::Priority(l), link.priority);
        let fd = match params.position(Param::WaveSpeed(l)) {
            Some(i) => LinkFd::from_wave_speed(tape, link.length, dt, u, vars[i], kappa, alpha),
            None => {
                let qmax = lookup(Param::Capacity(l), link.capacity);
                if qmax.value() / u.value() >= kappa.value() {
                    return Err(EngineError::InvalidParameter {
                        name: link.id.clone(),
                        reason: "critical density reaches jam density".into(),
                    });
                }
                LinkFd::from_capacity(tape, link.length, dt, u, qmax, kappa, alpha)
            }
        };
        if fd.ff_steps.value() < 1.0 - 1e-9 {
            return Err(EngineError::InvalidParameter {
                name: link.id.clone(),
                reason: format!(
                    "free-flow time {} s is shorter than the timestep",
                    fd.ff_steps.value() * dt
                ),
            });
        }
        fds.push(fd);
    }
    let rates = sc
        .demands
        .iter()
        .enumerate()
        .map(|(d, prof)| {
            prof.pieces
                .iter()
                .enumerate()
                .map(|(p, piece)| {
                    lookup(
                        Param::Demand {
                            demand: d,
                            piece: p,
                        },
                        piece.rate,
                    )
                })
                .collect()
        })
        .collect();
    let tolls = (0..sc.links.len())
        .map(|l| {
            (0..sc.tolls.periods)
                .map(|p| lookup(Param::Toll { link: l, period: p }, sc.tolls.values[l][p]))
                .collect()
        })
        .collect();
    let turns = sc
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| lookup(Param::Turn(i), t.fraction))
        .collect();
    Ok(Inputs {
        params: vars,
        fds,
        rates,
        tolls,
        turns,
    })
}

/// Output of one simulation run.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub dt: f64,
    pub steps: usize,
    pub inputs: Inputs,
    /// Rebuilt cumulative curves, `N(0..=steps)`, per link.
    pub up: Vec<CumCurve>,
    pub down: Vec<CumCurve>,
    /// `inflow[t][l]`, `outflow[t][l]` (veh/s).
    pub inflow: Vec<Vec<Var>>,
    pub outflow: Vec<Vec<Var>>,
    /// Origin nodes, and their total queue at the start of each step
    /// (`queues[i][0..=steps]`).
    pub origins: Vec<usize>,
    pub queues: Vec<Vec<Var>>,
    /// Vehicles absorbed per destination (order of `Scenario::destinations`).
    pub absorbed: Vec<Var>,
    /// Vehicles generated by the demand profiles.
    pub injected: f64,
    /// Largest `|generated − (on links + queued + absorbed)|` over all steps.
    pub conservation_error: f64,
    /// Largest `|Σ_s N^s − N|` over links, boundaries and steps.
    pub destination_error: f64,
    /// Window contents at the end of the scan, `(step, up, down)` per link.
    pub window_tail: Vec<Vec<(usize, Var, Var)>>,
    /// Tape length when the scan finished.
    pub tape_len: usize,
}

impl SimResult {
    /// Vehicles on link `l` at step `t`.
    pub fn occupancy(&self, l: usize, t: usize) -> f64 {
        self.up[l].value_at(t) - self.down[l].value_at(t)
    }
}

struct NodePlan {
    kind: NodeKind,
    ins: Vec<usize>,
    outs: Vec<usize>,
    /// Fixed turning rows (`[inlink or origin row][outlink]`) as indices into
    /// the scenario's turn list.
    fixed: Vec<Vec<Option<usize>>>,
    origin_slot: Option<usize>,
}

fn plan_nodes(sc: &Scenario) -> (Vec<NodePlan>, Vec<usize>) {
    let mut origins = Vec::new();
    let plans = (0..sc.nodes.len())
        .map(|n| {
            let kind = sc.nodes[n].kind;
            let ins = sc.in_links(n).to_vec();
            let outs = sc.out_links(n).to_vec();
            let rows: Vec<Option<usize>> = if kind == NodeKind::Origin {
                vec![None]
            } else {
                ins.iter().copied().map(Some).collect()
            };
            let fixed = rows
                .iter()
                .map(|row| {
                    outs.iter()
                        .map(|&o| {
                            sc.turns
                                .iter()
                                .position(|t| t.node == n && t.from == *row && t.to == o)
                        })
                        .collect()
                })
                .collect();
            let origin_slot = (kind == NodeKind::Origin).then(|| {
                origins.push(n);
                origins.len() - 1
            });
            NodePlan {
                kind,
                ins,
                outs,
                fixed,
                origin_slot,
            }
        })
        .collect();
    (plans, origins)
}

/// Rough tape size of a run, used to pre-size tapes.
pub fn estimate_tape_len(sc: &Scenario) -> usize {
    let dests = sc.destinations().len().max(1);
    let per_step: usize = (0..sc.nodes.len())
        .map(|n| {
            let (i, j) = (sc.in_links(n).len(), sc.out_links(n).len());
            (i + j + 1) * (i * j + 4 * (i + j) + 4) + dests * (i + j) * 6
        })
        .sum::<usize>()
        + sc.links.len() * (40 + 8 * dests);
    per_step * sc.config.steps + 1024
}

/// Runs the simulation with `params` registered as differentiable inputs.
pub fn run(tape: &mut Tape, sc: &Scenario, params: &ParamSet) -> Result<SimResult, EngineError> {
    let inputs = bind(tape, sc, params)?;
    let cfg = &sc.config;
    let dt = cfg.dt;
    let steps = cfg.steps;
    let n_links = sc.links.len();
    let dests = sc.destinations().to_vec();
    let n_dest = dests.len();
    let (plans, origins) = plan_nodes(sc);
    let link_ends: Vec<(usize, usize)> = sc.links.iter().map(|l| (l.from, l.to)).collect();
    let eps = cfg.fifo_eps;

    // Window width frozen from the scenario values; registered FD parameters
    // may stretch a lookup by a fraction of a step.
    let width = sc.history_width().max(
        inputs
            .fds
            .iter()
            .map(LinkFd::history_steps)
            .max()
            .unwrap_or(1),
    ) + 1;
    let mut up: Vec<CurveWindow> = (0..n_links).map(|_| CurveWindow::new(width)).collect();
    let mut down: Vec<CurveWindow> = (0..n_links).map(|_| CurveWindow::new(width)).collect();
    let mut up_s = vec![vec![Var::ZERO; n_dest]; n_links];
    let mut down_s = vec![vec![Var::ZERO; n_dest]; n_links];
    let mut queue = vec![vec![Var::ZERO; n_dest]; origins.len()];
    let mut absorbed = vec![Var::ZERO; n_dest];

    // Per-origin, per-destination demand pieces.
    let mut od: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n_dest]; origins.len()];
    for (d, prof) in sc.demands.iter().enumerate() {
        let o = plans[prof.origin]
            .origin_slot
            .expect("demand starts at an origin");
        let s = sc
            .destination_slot(prof.destination)
            .expect("demand ends at a destination");
        od[o][s].push(d);
    }

    let mut inflow_log = Vec::with_capacity(steps);
    let mut outflow_log = Vec::with_capacity(steps);
    let mut queue_log: Vec<Vec<Var>> = vec![Vec::with_capacity(steps + 1); origins.len()];
    let mut injected = 0.0;
    let mut conservation_error: f64 = 0.0;
    let mut destination_error: f64 = 0.0;
    // prob[node][s][o]; `reach[node][s]` marks destinations reachable from the node.
    let mut prob: Vec<Vec<Vec<Var>>> = plans
        .iter()
        .map(|p| vec![uniform(p.outs.len()); n_dest])
        .collect();
    let mut reach: Vec<Vec<bool>> = vec![vec![true; n_dest]; plans.len()];

    for t in 0..steps {
        let now = t as f64 * dt;
        for (i, q) in queue.iter().enumerate() {
            queue_log[i].push(tape.sum(q));
        }

        if cfg.route_choice == RouteChoice::Duo && t % cfg.route_every == 0 && n_dest > 0 {
            let period = sc.tolls.period_at(now);
            let weights: Vec<Var> = (0..n_links)
                .map(|l| {
                    let fd = &inputs.fds[l];
                    let tt = match cfg.tt_method {
                        TravelTimeMethod::Average => {
                            routing::travel_time_avg(tape, fd, up[l].current(), down[l].current())
                        }
                        TravelTimeMethod::Segments => routing::travel_time_segments(
                            tape,
                            fd,
                            &up[l],
                            &down[l],
                            t,
                            cfg.segments,
                        ),
                    };
                    tape.add(tt, inputs.tolls[l][period])
                })
                .collect();
            let table = routing::shortest_paths(tape, sc.nodes.len(), &link_ends, weights, &dests);
            for (n, plan) in plans.iter().enumerate() {
                if plan.outs.is_empty() {
                    continue;
                }
                for s in 0..n_dest {
                    let (p, r) = node_choice(tape, &table, plan, &link_ends, n, s, cfg.mu);
                    prob[n][s] = p;
                    reach[n][s] = r;
                }
            }
        }

        let bounds: Vec<ltm::LinkFlowBounds> = (0..n_links)
            .map(|l| ltm::demand_supply(tape, &inputs.fds[l], &up[l], &down[l], t, dt))
            .collect();

        let mut f_in = vec![Var::ZERO; n_links];
        let mut f_out = vec![Var::ZERO; n_links];
        let mut x_in = vec![vec![Var::ZERO; n_dest]; n_links];
        let mut x_out = vec![vec![Var::ZERO; n_dest]; n_links];
        let mut step_arrivals = 0.0;

        for (n, plan) in plans.iter().enumerate() {
            match plan.kind {
                NodeKind::Origin => {
                    let slot = plan.origin_slot.expect("origin");
                    let mut held = Vec::with_capacity(n_dest);
                    for s in 0..n_dest {
                        let mut q = queue[slot][s];
                        for &d in &od[slot][s] {
                            if let Some(p) = sc.demands[d].piece_at(now) {
                                let add = tape.mul(inputs.rates[d][p], dt);
                                step_arrivals += add.value();
                                q = tape.add(q, add);
                            }
                        }
                        held.push(q);
                    }
                    if plan.outs.is_empty() || n_dest == 0 {
                        queue[slot] = held;
                        continue;
                    }
                    let total = tape.sum(&held);
                    let supply: Vec<Var> = plan.outs.iter().map(|&o| bounds[o].supply).collect();
                    let fallback: Vec<f64> = reach_weights(&reach[n]);
                    let (beta, rows) = match cfg.route_choice {
                        RouteChoice::Duo => {
                            let b = routing::diverge_ratios(tape, &prob[n], &held, &fallback, eps);
                            (b, prob[n].clone())
                        }
                        RouteChoice::Fixed => {
                            let b = fixed_row(&plan.fixed[0], &inputs.turns);
                            (b.clone(), vec![b; n_dest])
                        }
                    };
                    let inj = node::origin_inject(tape, total, dt, &supply, &beta);
                    let shares = routing::destination_shares(tape, &rows, &held, &held, 0.0, eps);
                    let mut left = held;
                    for (j, &o) in plan.outs.iter().enumerate() {
                        f_in[o] = inj.outflow[j];
                        for s in 0..n_dest {
                            let x = tape.mul(inj.outflow[j], shares[j][s]);
                            x_in[o][s] = x;
                            let gone = tape.mul(x, dt);
                            left[s] = tape.sub(left[s], gone);
                        }
                    }
                    queue[slot] = left;
                }
                NodeKind::Destination => {
                    let demand: Vec<Var> = plan.ins.iter().map(|&l| bounds[l].demand).collect();
                    let flows = node::destination_absorb(&demand);
                    for (i, &l) in plan.ins.iter().enumerate() {
                        f_out[l] = flows[i];
                        let parts =
                            routing::fifo_split(tape, flows[i], up[l].current(), &up_s[l], eps);
                        let gone = tape.sum(&parts);
                        let gone = tape.mul(gone, dt);
                        let s = sc.destination_slot(n).expect("destination");
                        absorbed[s] = tape.add(absorbed[s], gone);
                        x_out[l] = parts;
                    }
                }
                NodeKind::Intermediate => {
                    if plan.ins.is_empty() || plan.outs.is_empty() {
                        continue;
                    }
                    let demand: Vec<Var> = plan.ins.iter().map(|&l| bounds[l].demand).collect();
                    let supply: Vec<Var> = plan.outs.iter().map(|&o| bounds[o].supply).collect();
                    let alpha: Vec<Var> = plan.ins.iter().map(|&l| inputs.fds[l].alpha).collect();
                    let omega: Vec<Var> = (0..n_dest)
                        .map(|s| {
                            let on: Vec<Var> = plan
                                .ins
                                .iter()
                                .map(|&l| tape.sub(up_s[l][s], down_s[l][s]))
                                .collect();
                            // The cumulative-mix FIFO split can overdraw one
                            // destination's count; a negative weight would push
                            // the diverge ratios outside [0, 1].
                            let on = tape.sum(&on);
                            tape.relu(on)
                        })
                        .collect();
                    let turns: Vec<Vec<Var>> = match cfg.route_choice {
                        RouteChoice::Duo => {
                            let fallback = reach_weights(&reach[n]);
                            let beta = if plan.outs.len() == 1 {
                                vec![Var::constant(1.0)]
                            } else {
                                routing::diverge_ratios(tape, &prob[n], &omega, &fallback, eps)
                            };
                            vec![beta; plan.ins.len()]
                        }
                        RouteChoice::Fixed => plan
                            .fixed
                            .iter()
                            .map(|row| fixed_row(row, &inputs.turns))
                            .collect(),
                    };
                    let tr = node::inm_fixed(tape, &demand, &supply, &turns, &alpha);
                    let mut through = vec![Vec::new(); n_dest];
                    for (i, &l) in plan.ins.iter().enumerate() {
                        f_out[l] = tr.inflow[i];
                        let parts =
                            routing::fifo_split(tape, tr.inflow[i], up[l].current(), &up_s[l], eps);
                        for s in 0..n_dest {
                            through[s].push(parts[s]);
                        }
                        x_out[l] = parts;
                    }
                    match cfg.route_choice {
                        RouteChoice::Duo => {
                            let mix: Vec<Var> = through.iter().map(|p| tape.sum(p)).collect();
                            let shares = if plan.outs.len() == 1 {
                                let total = tape.sum(&mix);
                                vec![mix.iter().map(|&m| tape.divg(m, total, eps)).collect()]
                            } else {
                                routing::destination_shares(
                                    tape, &prob[n], &mix, &omega, SHARE_PAD, eps,
                                )
                            };
                            for (j, &o) in plan.outs.iter().enumerate() {
                                f_in[o] = tr.outflow[j];
                                for s in 0..n_dest {
                                    x_in[o][s] = tape.mul(tr.outflow[j], shares[j][s]);
                                }
                            }
                        }
                        RouteChoice::Fixed => {
                            for (j, &o) in plan.outs.iter().enumerate() {
                                f_in[o] = tr.outflow[j];
                                for s in 0..n_dest {
                                    let parts: Vec<Var> = (0..plan.ins.len())
                                        .map(|i| tape.mul(turns[i][j], through[s][i]))
                                        .collect();
                                    x_in[o][s] = tape.sum(&parts);
                                }
                            }
                        }
                    }
                }
            }
        }

        for l in 0..n_links {
            ltm::update_boundaries(
                tape,
                &mut up[l],
                &mut down[l],
                Some(&bounds[l]),
                f_in[l],
                f_out[l],
                dt,
            );
            for s in 0..n_dest {
                let a = tape.mul(x_in[l][s], dt);
                up_s[l][s] = tape.add(up_s[l][s], a);
                let b = tape.mul(x_out[l][s], dt);
                down_s[l][s] = tape.add(down_s[l][s], b);
            }
            let (nu, nd) = (up[l].current().value(), down[l].current().value());
            if !(nu.is_finite() && nd.is_finite()) {
                return Err(EngineError::NonFinite {
                    step: t,
                    link: sc.links[l].id.clone(),
                });
            }
            if n_dest > 0 {
                let su: f64 = up_s[l].iter().map(Var::value).sum();
                let sd: f64 = down_s[l].iter().map(Var::value).sum();
                destination_error = destination_error.max((su - nu).abs()).max((sd - nd).abs());
            }
        }

        injected += step_arrivals;
        let on_links: f64 = (0..n_links)
            .map(|l| up[l].current().value() - down[l].current().value())
            .sum();
        let queued: f64 = queue.iter().flatten().map(Var::value).sum();
        let gone: f64 = absorbed.iter().map(Var::value).sum();
        conservation_error = conservation_error.max((injected - on_links - queued - gone).abs());

        inflow_log.push(f_in);
        outflow_log.push(f_out);
    }
    for (i, q) in queue.iter().enumerate() {
        queue_log[i].push(tape.sum(q));
    }

    let (up_full, down_full) = rebuild_curves(tape, n_links, dt, &inflow_log, &outflow_log);
    let window_tail = (0..n_links)
        .map(|l| {
            let first = steps.saturating_sub(width - 1);
            (first..=steps)
                .map(|k| (k, up[l].at(k as i64), down[l].at(k as i64)))
                .collect()
        })
        .collect();

    Ok(SimResult {
        dt,
        steps,
        inputs,
        up: up_full,
        down: down_full,
        inflow: inflow_log,
        outflow: outflow_log,
        origins,
        queues: queue_log,
        absorbed,
        injected,
        conservation_error,
        destination_error,
        window_tail,
        tape_len: tape.len(),
    })
}

/// Convenience run with no registered parameters.
pub fn simulate(sc: &Scenario) -> Result<SimResult, EngineError> {
    let mut tape = Tape::new();
    run(&mut tape, sc, &ParamSet::default())
}

fn uniform(n: usize) -> Vec<Var> {
    vec![Var::constant(1.0 / n.max(1) as f64); n]
}

fn reach_weights(reach: &[bool]) -> Vec<f64> {
    if reach.iter().any(|r| *r) {
        reach.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect()
    } else {
        vec![1.0; reach.len()]
    }
}

fn fixed_row(row: &[Option<usize>], turns: &[Var]) -> Vec<Var> {
    if row.len() == 1 {
        return vec![Var::constant(1.0)];
    }
    row.iter()
        .map(|t| t.map(|i| turns[i]).unwrap_or(Var::ZERO))
        .collect()
}

/// Choice probabilities at node `n` towards destination slot `s`, and
/// whether the destination is reachable from the node at all.
fn node_choice(
    tape: &mut Tape,
    table: &RoutingTable,
    plan: &NodePlan,
    links: &[(usize, usize)],
    n: usize,
    s: usize,
    mu: f64,
) -> (Vec<Var>, bool) {
    let tree = &table.trees[s];
    let Some(best) = tree.next[n] else {
        return (uniform(plan.outs.len()), false);
    };
    if plan.outs.len() == 1 {
        return (vec![Var::constant(1.0)], true);
    }
    let best = plan
        .outs
        .iter()
        .position(|&o| o == best)
        .expect("next link leaves the node");
    let costs: Vec<Option<Var>> = if mu > 0.0 {
        plan.outs
            .iter()
            .map(|&o| table.link_cost(tape, o, links[o].1, s))
            .collect()
    } else {
        vec![None; plan.outs.len()]
    };
    (routing::choice_probabilities(tape, &costs, best, mu), true)
}

/// Rebuilds full cumulative curves from per-step flows.
pub fn rebuild_curves(
    tape: &mut Tape,
    n_links: usize,
    dt: f64,
    inflow: &[Vec<Var>],
    outflow: &[Vec<Var>],
) -> (Vec<CumCurve>, Vec<CumCurve>) {
    let mut up: Vec<CumCurve> = (0..n_links).map(|_| CumCurve::new()).collect();
    let mut down: Vec<CumCurve> = (0..n_links).map(|_| CumCurve::new()).collect();
    for (fi, fo) in inflow.iter().zip(outflow) {
        for l in 0..n_links {
            let a = tape.mul(fi[l], dt);
            let a = tape.add(up[l].last(), a);
            up[l].values.push(a);
            let b = tape.mul(fo[l], dt);
            let b = tape.add(down[l].last(), b);
            down[l].values.push(b);
        }
    }
    (up, down)
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Total travel time (veh·s): time-integrated link occupancy plus origin
/// queues. With `links` given, only those links count and queues are left out.
pub fn objective_ttt(tape: &mut Tape, res: &SimResult, links: Option<&[usize]>) -> Var {
    let all: Vec<usize> = (0..res.up.len()).collect();
    let subset = links.unwrap_or(&all);
    let mut terms = Vec::with_capacity(subset.len() * res.steps + res.queues.len());
    for &l in subset {
        for t in 0..res.steps {
            let n = tape.sub(res.up[l].values[t], res.down[l].values[t]);
            terms.push(tape.max2(n, 0.0));
        }
    }
    if links.is_none() {
        for q in &res.queues {
            terms.extend_from_slice(&q[..res.steps]);
        }
    }
    let total = tape.sum(&terms);
    tape.mul(total, res.dt)
}

/// Average time spent on link `l` per entering vehicle (s).
pub fn objective_att(tape: &mut Tape, res: &SimResult, l: usize, eps: f64) -> Var {
    let ttt = objective_ttt(tape, res, Some(&[l]));
    let entered = res.up[l].last();
    tape.divg(ttt, entered, eps)
}

// ---------------------------------------------------------------------------
// Virtual vehicles
// ---------------------------------------------------------------------------

/// Earliest fractional step at which `curve` reaches `n`.
pub fn inverse_cumcount(tape: &mut Tape, curve: &CumCurve, n: Var) -> Result<Var, EngineError> {
    let vals = &curve.values;
    let last = vals[vals.len() - 1].value();
    if n.value() > last + COUNT_TOL {
        return Err(EngineError::IncompleteTrip {
            link: String::new(),
            count: n.value(),
        });
    }
    let target = n.value().min(last);
    // First index whose value reaches the target.
    let k = vals.partition_point(|v| v.value() < target);
    if k == 0 {
        return Ok(Var::ZERO);
    }
    let (lo, hi) = (vals[k - 1], vals[k]);
    let span = hi.value() - lo.value();
    let frac = (n.value() - lo.value()) / span;
    let value = (k - 1) as f64 + frac;
    let partials = [
        1.0 / span,
        (n.value() - hi.value()) / (span * span),
        -(n.value() - lo.value()) / (span * span),
    ];
    Ok(tape.record(Op::Custom, &[n, lo, hi], value, &partials)?)
}

/// Exit time (s) of the vehicle entering link `l` at `t_enter` (s).
pub fn vehicle_exit_time(
    tape: &mut Tape,
    sc: &Scenario,
    res: &SimResult,
    l: usize,
    t_enter: Var,
) -> Result<Var, EngineError> {
    let fd = &res.inputs.fds[l];
    let pos = tape.div_c(t_enter, res.dt);
    let n = ltm::interp(tape, &res.up[l], pos);
    let queued = inverse_cumcount(tape, &res.down[l], n).map_err(|e| match e {
        EngineError::IncompleteTrip { count, .. } => EngineError::IncompleteTrip {
            link: sc.links[l].id.clone(),
            count,
        },
        other => other,
    })?;
    let queued = tape.mul(queued, res.dt);
    let ff = tape.mul(fd.ff_steps, res.dt);
    let free = tape.add(t_enter, ff);
    Ok(tape.max2(free, queued))
}

/// A virtual vehicle's trip.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub depart: f64,
    pub origin: usize,
    pub destination: usize,
    pub links: Vec<usize>,
    /// Exit time from each link (s).
    pub exits: Vec<Var>,
    pub travel_time: Var,
}

#[derive(PartialEq)]
struct Label(f64, usize);

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Earliest-arrival path from `origin` departing at `t0` (s), using realized
/// link exit times. Travel time excludes any wait in the origin queue.
pub fn trace_trip(
    tape: &mut Tape,
    sc: &Scenario,
    res: &SimResult,
    t0: f64,
    origin: usize,
    destination: usize,
) -> Result<Trajectory, EngineError> {
    let n_nodes = sc.nodes.len();
    let mut arrival: Vec<Option<Var>> = vec![None; n_nodes];
    let mut via: Vec<Option<(usize, usize)>> = vec![None; n_nodes];
    let mut done = vec![false; n_nodes];
    let mut heap = BinaryHeap::new();
    arrival[origin] = Some(Var::constant(t0));
    heap.push(Label(t0, origin));
    let mut stuck: Option<EngineError> = None;
    while let Some(Label(_, n)) = heap.pop() {
        if done[n] {
            continue;
        }
        done[n] = true;
        if n == destination {
            break;
        }
        let t_here = arrival[n].expect("labelled");
        for &l in sc.out_links(n) {
            let head = sc.links[l].to;
            if done[head] {
                continue;
            }
            let exit = match vehicle_exit_time(tape, sc, res, l, t_here) {
                Ok(e) => e,
                Err(e @ EngineError::IncompleteTrip { .. }) => {
                    stuck.get_or_insert(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            if arrival[head].is_none_or(|a| exit.value() < a.value()) {
                arrival[head] = Some(exit);
                via[head] = Some((l, n));
                heap.push(Label(exit.value(), head));
            }
        }
    }
    let Some(end) = arrival[destination] else {
        return Err(stuck.unwrap_or_else(|| EngineError::NoPath {
            origin: sc.nodes[origin].id.clone(),
            destination: sc.nodes[destination].id.clone(),
        }));
    };
    let mut path = Vec::new();
    let mut n = destination;
    while let Some((l, prev)) = via[n] {
        path.push(l);
        n = prev;
    }
    path.reverse();
    let trip = follow_path(tape, sc, res, t0, &path)?;
    debug_assert_eq!(trip.exits.last().map(Var::value), Some(end.value()));
    Ok(trip)
}

/// Trip along a fixed link sequence, departing at `t0` (s).
pub fn follow_path(
    tape: &mut Tape,
    sc: &Scenario,
    res: &SimResult,
    t0: f64,
    path: &[usize],
) -> Result<Trajectory, EngineError> {
    assert!(!path.is_empty(), "a path has at least one link");
    for w in path.windows(2) {
        assert_eq!(
            sc.links[w[0]].to, sc.links[w[1]].from,
            "links must be consecutive"
        );
    }
    let mut exits = Vec::with_capacity(path.len());
    let mut t = Var::constant(t0);
    for &l in path {
        t = vehicle_exit_time(tape, sc, res, l, t)?;
        exits.push(t);
    }
    let travel_time = tape.sub(t, t0);
    Ok(Trajectory {
        depart: t0,
        origin: sc.links[path[0]].from,
        destination: sc.links[path[path.len() - 1]].to,
        links: path.to_vec(),
        exits,
        travel_time,
    })
}

/// Looks up a trip by node ids.
pub fn trace_trip_by_id(
    tape: &mut Tape,
    sc: &Scenario,
    res: &SimResult,
    t0: f64,
    origin: &str,
    destination: &str,
) -> Result<Trajectory, EngineError> {
    let node = |id: &str| {
        sc.node_index(id).ok_or_else(|| EngineError::Unknown {
            kind: "node",
            id: id.to_string(),
        })
    };
    let (o, d) = (node(origin)?, node(destination)?);
    trace_trip(tape, sc, res, t0, o, d)
}
