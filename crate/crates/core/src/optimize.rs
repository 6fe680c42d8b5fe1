//! Gradients, finite-difference checks, and toll optimization (Adam, SPSA).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ad::{Tape, Var};
use crate::engine::{self, EngineError, SimResult};
use crate::scenario::{Param, ParamSet, Scenario};

/// Scalar objectives over a simulation run.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Total travel time including origin queues.
    Ttt,
    /// Travel time on the given links only.
    TttLinks(Vec<usize>),
    /// Average time on one link per entering vehicle.
    Att(usize),
    /// Trip travel time of a vehicle departing at `t0` (s).
    Trip {
        t0: f64,
        origin: usize,
        destination: usize,
    },
    /// Travel time along a fixed path departing at `t0` (s).
    Path { t0: f64, links: Vec<usize> },
    /// `TTT + λ Σ τ²` over the registered toll parameters.
    Toll { lambda: f64 },
}

/// Guard for average-travel-time denominators (veh).
pub const ATT_EPS: f64 = 1e-9;

impl Objective {
    pub fn name(&self, sc: &Scenario) -> String {
        match self {
            Objective::Ttt => "TTT".into(),
            Objective::TttLinks(ls) => {
                let ids: Vec<&str> = ls.iter().map(|&l| sc.links[l].id.as_str()).collect();
                format!("TTTlink:{}", ids.join("+"))
            }
            Objective::Att(l) => format!("ATT:{}", sc.links[*l].id),
            Objective::Trip {
                t0,
                origin,
                destination,
            } => format!(
                "TT({t0},{},{})",
                sc.nodes[*origin].id, sc.nodes[*destination].id
            ),
            Objective::Path { t0, links } => {
                let ids: Vec<&str> = links.iter().map(|&l| sc.links[l].id.as_str()).collect();
                format!("TT({t0},{})", ids.join(">"))
            }
            Objective::Toll { lambda } => format!("J(lambda={lambda})"),
        }
    }

    /// Records the objective on the run's tape.
    pub fn record(
        &self,
        tape: &mut Tape,
        sc: &Scenario,
        params: &ParamSet,
        res: &SimResult,
    ) -> Result<Var, EngineError> {
        Ok(match self {
            Objective::Ttt => engine::objective_ttt(tape, res, None),
            Objective::TttLinks(ls) => engine::objective_ttt(tape, res, Some(ls)),
            Objective::Att(l) => engine::objective_att(tape, res, *l, ATT_EPS),
            Objective::Trip {
                t0,
                origin,
                destination,
            } => engine::trace_trip(tape, sc, res, *t0, *origin, *destination)?.travel_time,
            Objective::Path { t0, links } => {
                engine::follow_path(tape, sc, res, *t0, links)?.travel_time
            }
            Objective::Toll { lambda } => {
                let ttt = engine::objective_ttt(tape, res, None);
                let sq: Vec<Var> = params
                    .keys
                    .iter()
                    .zip(&res.inputs.params)
                    .filter(|(k, _)| matches!(k, Param::Toll { .. }))
                    .map(|(_, &v)| tape.square(v))
                    .collect();
                let reg = tape.sum(&sq);
                let reg = tape.mul(reg, *lambda);
                tape.add(ttt, reg)
            }
        })
    }
}

/// Adjoints of one objective with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub objective: String,
    pub value: f64,
    pub names: Vec<String>,
    pub gradient: Vec<f64>,
    /// Total travel time of the run.
    pub ttt: f64,
    pub tape_len: usize,
}

impl GradientReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.gradient[i])
    }

    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// One forward run and one backward sweep.
pub fn grad(
    sc: &Scenario,
    params: &ParamSet,
    objective: &Objective,
) -> Result<GradientReport, EngineError> {
    let mut tape = Tape::with_capacity(engine::estimate_tape_len(sc));
    let res = engine::run(&mut tape, sc, params)?;
    let ttt = engine::objective_ttt(&mut tape, &res, None).value();
    let out = objective.record(&mut tape, sc, params, &res)?;
    let adj = tape.backward_checked(out)?;
    Ok(GradientReport {
        objective: objective.name(sc),
        value: out.value(),
        names: params.names.clone(),
        gradient: res.inputs.params.iter().map(|&p| adj.get(p)).collect(),
        ttt,
        tape_len: tape.len(),
    })
}

/// Objective value without a backward sweep.
pub fn evaluate(
    sc: &Scenario,
    params: &ParamSet,
    objective: &Objective,
) -> Result<f64, EngineError> {
    let mut tape = Tape::with_capacity(engine::estimate_tape_len(sc));
    let res = engine::run(&mut tape, sc, params)?;
    Ok(objective.record(&mut tape, sc, params, &res)?.value())
}

/// Central difference `(J(x+ε) − J(x−ε)) / 2ε`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// AD column plus one central-difference column per step size.
#[derive(Debug, Clone)]
pub struct FdTable {
    pub objective: String,
    pub names: Vec<String>,
    pub ad: Vec<f64>,
    pub eps: Vec<f64>,
    /// `fd[param][eps]`.
    pub fd: Vec<Vec<f64>>,
}

impl FdTable {
    /// `|AD − FD| / |FD|` for parameter `i` and step `j`.
    pub fn rel_err(&self, i: usize, j: usize) -> f64 {
        (self.ad[i] - self.fd[i][j]).abs() / self.fd[i][j].abs()
    }
}

/// Compares AD adjoints with central differences. Runs are independent and
/// execute on the rayon pool.
pub fn fd_check(
    sc: &Scenario,
    params: &ParamSet,
    objective: &Objective,
    eps: &[f64],
) -> Result<FdTable, EngineError> {
    let report = grad(sc, params, objective)?;
    let jobs: Vec<(usize, usize, f64)> = (0..params.len())
        .flat_map(|i| eps.iter().enumerate().map(move |(j, &e)| (i, j, e)))
        .flat_map(|(i, j, e)| [(i, j, e), (i, j, -e)])
        .collect();
    let vals: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, _, d)| evaluate(sc, &params.perturbed(i, d), objective))
        .collect::<Result<_, _>>()?;
    let mut fd = vec![vec![0.0; eps.len()]; params.len()];
    for (pair, v) in jobs.chunks(2).zip(vals.chunks(2)) {
        let (i, j, e) = pair[0];
        fd[i][j] = (v[0] - v[1]) / (2.0 * e);
    }
    Ok(FdTable {
        objective: report.objective,
        names: report.names,
        ad: report.gradient,
        eps: eps.to_vec(),
        fd,
    })
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub iterations: usize,
    pub nonneg: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 7.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 2e6,
            iterations: 300,
            nonneg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpsaConfig {
    pub a: f64,
    pub c: f64,
    pub big_a: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub iterations: usize,
    /// Seed for ChaCha8 (`rand_chacha`), so traces are platform independent.
    pub seed: u64,
    pub nonneg: bool,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            a: 1e-4,
            c: 30.0,
            big_a: 100.0,
            alpha: 0.602,
            gamma: 0.101,
            iterations: 1000,
            seed: 0,
            nonneg: true,
        }
    }
}

/// One optimizer iteration, evaluated at the parameters before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub ttt: f64,
    pub grad_norm: f64,
    /// Seconds since the optimizer started.
    pub wall: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub trace: Vec<TraceRow>,
    /// Parameters after the last update.
    pub values: Vec<f64>,
    /// Objective at the final parameters.
    pub final_objective: f64,
    pub final_ttt: f64,
}

/// Scales `g` down to norm `max_norm` if it is longer.
pub fn clip(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

pub fn project_nonneg(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Adam state over a fixed-length parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        assert!(cfg.learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2));
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Clips `g`, applies one bias-corrected update to `x`, then projects.
    pub fn step(&mut self, x: &mut [f64], g: &mut [f64]) {
        clip(g, self.cfg.clip_norm);
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.cfg.learning_rate * mh / (vh.sqrt() + self.cfg.epsilon);
        }
        if self.cfg.nonneg {
            project_nonneg(x);
        }
    }
}

/// Gradient descent with Adam on `objective` starting from `params`.
pub fn adam_optimize(
    sc: &Scenario,
    params: &ParamSet,
    objective: &Objective,
    cfg: &AdamConfig,
) -> Result<OptimizeResult, EngineError> {
    let start = Instant::now();
    let mut x = params.values.clone();
    let mut adam = Adam::new(cfg.clone(), x.len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let rep = grad(sc, &params.with_values(x.clone()), objective)?;
        let mut g = rep.gradient.clone();
        trace.push(TraceRow {
            iteration: k,
            objective: rep.value,
            ttt: rep.ttt,
            grad_norm: rep.norm(),
            wall: start.elapsed().as_secs_f64(),
        });
        adam.step(&mut x, &mut g);
    }
    finish(sc, params, objective, x, trace)
}

fn finish(
    sc: &Scenario,
    params: &ParamSet,
    objective: &Objective,
    x: Vec<f64>,
    trace: Vec<TraceRow>,
) -> Result<OptimizeResult, EngineError> {
    let p = params.with_values(x.clone());
    let mut tape = Tape::with_capacity(engine::estimate_tape_len(sc));
    let res = engine::run(&mut tape, sc, &p)?;
    let ttt = engine::objective_ttt(&mut tape, &res, None).value();
    let j = objective.record(&mut tape, sc, &p, &res)?.value();
    Ok(OptimizeResult {
        trace,
        values: x,
        final_objective: j,
        final_ttt: ttt,
    })
}

/// SPSA gradient estimate from two evaluations at `x ± c·δ`.
pub fn spsa_estimate(j_plus: f64, j_minus: f64, c: f64, delta: &[f64]) -> Vec<f64> {
    delta
        .iter()
        .map(|d| (j_plus - j_minus) / (2.0 * c * d))
        .collect()
}

/// Bernoulli ±1 perturbation.
pub fn rademacher(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Simultaneous perturbation stochastic approximation.
pub fn spsa_optimize(
    sc: &Scenario,
    params: &ParamSet,
    objective: &Objective,
    cfg: &SpsaConfig,
) -> Result<OptimizeResult, EngineError> {
    assert!(cfg.a > 0.0 && cfg.c > 0.0 && cfg.big_a >= 0.0 && cfg.alpha > 0.0 && cfg.gamma > 0.0);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = params.values.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        let ak = cfg.a / (cfg.big_a + k as f64).powf(cfg.alpha);
        let ck = cfg.c / (k as f64).powf(cfg.gamma);
        let delta = rademacher(&mut rng, x.len());
        let shifted = |sign: f64| -> Vec<f64> {
            let mut v: Vec<f64> = x
                .iter()
                .zip(&delta)
                .map(|(xi, d)| xi + sign * ck * d)
                .collect();
            if cfg.nonneg {
                project_nonneg(&mut v);
            }
            v
        };
        let (plus, minus) = (shifted(1.0), shifted(-1.0));
        let (jp, jm) = rayon::join(
            || evaluate(sc, &params.with_values(plus), objective),
            || evaluate(sc, &params.with_values(minus), objective),
        );
        let (jp, jm) = (jp?, jm?);
        let g = spsa_estimate(jp, jm, ck, &delta);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        trace.push(TraceRow {
            iteration: k,
            objective: 0.5 * (jp + jm),
            ttt: f64::NAN,
            grad_norm: norm,
            wall: start.elapsed().as_secs_f64(),
        });
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= ak * gi;
        }
        if cfg.nonneg {
            project_nonneg(&mut x);
        }
    }
    finish(sc, params, objective, x, trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_keeps_direction() {
        let mut g = vec![3.0, 4.0];
        clip(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut h = vec![0.3, 0.4];
        clip(&mut h, 1.0);
        assert_eq!(h, vec![0.3, 0.4]);
    }

    #[test]
    fn adam_quadratic() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            nonneg: false,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, 1);
        let mut x = vec![0.0];
        for _ in 0..500 {
            let mut g = vec![2.0 * (x[0] - 3.0)];
            adam.step(&mut x, &mut g);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "{}", x[0]);
    }

    #[test]
    fn adam_zero_gradient() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut x = vec![1.0, 2.0];
        for _ in 0..10 {
            adam.step(&mut x, &mut [0.0, 0.0]);
        }
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn spsa_one_dimensional_is_central_difference() {
        let f = |x: f64| x * x * x;
        for d in [1.0, -1.0] {
            let g = spsa_estimate(f(2.0 + 0.1 * d), f(2.0 - 0.1 * d), 0.1, &[d]);
            assert!((g[0] - central_difference(f, 2.0, 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn spsa_seeded_draws_repeat() {
        let a = rademacher(&mut ChaCha8Rng::seed_from_u64(7), 16);
        let b = rademacher(&mut ChaCha8Rng::seed_from_u64(7), 16);
        assert_eq!(a, b);
    }
}
