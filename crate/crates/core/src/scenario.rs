//! Network, demand, toll and configuration data.
//!
//! A [`Scenario`] is validated once at construction and immutable afterwards.
//! The on-disk form is a TOML document mirroring [`ScenarioFile`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack used when checking that a time is a multiple of `dt`.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("link `{link}`: {reason}")]
    InvalidLink { link: String, reason: String },
    #[error("link `{link}` violates CFL: dt = {dt} s exceeds d/u = {limit} s")]
    Cfl { link: String, dt: f64, limit: f64 },
    #[error("node `{node}`: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("demand {origin} -> {destination}: {reason}")]
    InvalidDemand {
        origin: String,
        destination: String,
        reason: String,
    },
    #[error("destination `{destination}` is unreachable from origin `{origin}`")]
    Unreachable { origin: String, destination: String },
    #[error("tolls on link `{link}`: {reason}")]
    InvalidToll { link: String, reason: String },
    #[error("turn at node `{node}`: {reason}")]
    InvalidTurn { node: String, reason: String },
    #[error("meta.{field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("parameter selection `{token}`: {reason}")]
    InvalidSelection { token: String, reason: String },
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub meta: MetaFile,
    pub nodes: Vec<NodeFile>,
    pub links: Vec<LinkFile>,
    #[serde(default)]
    pub demands: Vec<DemandFile>,
    #[serde(default)]
    pub tolls: Vec<TollFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<TurnFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaFile {
    pub dt: f64,
    pub t_max: f64,
    #[serde(default)]
    pub dt_route: Option<f64>,
    #[serde(default)]
    pub dt_toll: Option<f64>,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "one", alias = "segments")]
    pub m: usize,
    #[serde(default)]
    pub tt_method: TravelTimeMethod,
    #[serde(default)]
    pub route_choice: RouteChoice,
    #[serde(default = "default_guard")]
    pub fifo_eps: f64,
}

fn one() -> usize {
    1
}

fn default_guard() -> f64 {
    crate::ad::DEFAULT_GUARD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeFile {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFile {
    pub id: String,
    pub from: String,
    pub to: String,
    pub d: f64,
    pub u: f64,
    pub qmax: f64,
    pub kappa: f64,
    #[serde(default = "unit")]
    pub alpha: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandFile {
    pub origin: String,
    pub destination: String,
    /// `[t_start, t_end, rate]` triples.
    pub rates: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TollFile {
    pub link: String,
    #[serde(default)]
    pub values: Vec<f64>,
}

/// Fixed turning fraction; `from = None` designates an origin's own queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnFile {
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    pub to: String,
    pub fraction: f64,
}

// ---------------------------------------------------------------------------
// Validated model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Origin,
    Destination,
    Intermediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TravelTimeMethod {
    #[default]
    Average,
    Segments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteChoice {
    /// Instantaneous shortest paths, softened by a logit when `mu > 0`.
    #[default]
    Duo,
    /// Exogenous turning fractions from the `turns` section.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub x: Option<f64>,
    pub y: Option<f64>,
}

/// Link geometry and triangular fundamental diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams {
    pub id: String,
    pub from: usize,
    pub to: usize,
    /// Length (m).
    pub length: f64,
    /// Free-flow speed (m/s).
    pub free_flow_speed: f64,
    /// Capacity (veh/s).
    pub capacity: f64,
    /// Jam density (veh/m).
    pub jam_density: f64,
    /// Merge priority.
    pub priority: f64,
    critical_density: f64,
    wave_speed: f64,
}

impl LinkParams {
    pub fn critical_density(&self) -> f64 {
        self.critical_density
    }

    pub fn wave_speed(&self) -> f64 {
        self.wave_speed
    }

    pub fn free_flow_time(&self) -> f64 {
        self.length / self.free_flow_speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandPiece {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

/// Piecewise-constant OD flow rate (veh/s); zero outside the listed pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    pub origin: usize,
    pub destination: usize,
    pub pieces: Vec<DemandPiece>,
}

impl DemandProfile {
    /// Index of the piece active during `[t, t + dt)`.
    pub fn piece_at(&self, t: f64) -> Option<usize> {
        self.pieces
            .iter()
            .position(|p| t >= p.start - GRID_TOL && t < p.end - GRID_TOL)
    }

    pub fn total_vehicles(&self) -> f64 {
        self.pieces.iter().map(|p| p.rate * (p.end - p.start)).sum()
    }
}

/// Per-link step tolls in equivalent seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TollSchedule {
    pub period: f64,
    pub periods: usize,
    /// `values[link][period]`, zero for untolled links.
    pub values: Vec<Vec<f64>>,
    pub tolled: Vec<bool>,
}

impl TollSchedule {
    pub fn period_at(&self, t: f64) -> usize {
        ((t / self.period + GRID_TOL).floor() as usize).min(self.periods - 1)
    }

    pub fn tolled_links(&self) -> impl Iterator<Item = usize> + '_ {
        self.tolled
            .iter()
            .enumerate()
            .filter(|(_, t)| **t)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub node: usize,
    pub from: Option<usize>,
    pub to: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    pub steps: usize,
    pub dt_route: f64,
    pub route_every: usize,
    pub tt_method: TravelTimeMethod,
    pub segments: usize,
    /// Logit scale (1/s); zero selects deterministic DUO.
    pub mu: f64,
    pub fifo_eps: f64,
    pub route_choice: RouteChoice,
}

/// Validated, immutable scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub nodes: Vec<Node>,
    pub links: Vec<LinkParams>,
    pub demands: Vec<DemandProfile>,
    pub tolls: TollSchedule,
    pub turns: Vec<Turn>,
    pub config: SimConfig,
    in_links: Vec<Vec<usize>>,
    out_links: Vec<Vec<usize>>,
    destinations: Vec<usize>,
    destination_slot: Vec<Option<usize>>,
}

fn grid_steps(t: f64, dt: f64) -> Option<usize> {
    let r = t / dt;
    let n = r.round();
    ((r - n).abs() <= GRID_TOL * n.max(1.0) && n >= 0.0).then_some(n as usize)
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_file()).expect("scenario serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let meta = &file.meta;
        let cfg_err = |field, reason: &str| ScenarioError::InvalidConfig {
            field,
            reason: reason.to_string(),
        };
        if !(meta.dt > 0.0 && meta.dt.is_finite()) {
            return Err(cfg_err("dt", "must be positive"));
        }
        let steps = grid_steps(meta.t_max, meta.dt)
            .filter(|&n| n > 0)
            .ok_or_else(|| cfg_err("t_max", "must be a positive multiple of dt"))?;
        let dt_route = meta.dt_route.unwrap_or(meta.dt);
        let route_every = grid_steps(dt_route, meta.dt)
            .filter(|&n| n > 0)
            .ok_or_else(|| cfg_err("dt_route", "must be a positive multiple of dt"))?;
        let dt_toll = meta.dt_toll.unwrap_or(meta.t_max);
        grid_steps(dt_toll, meta.dt)
            .filter(|&n| n > 0)
            .ok_or_else(|| cfg_err("dt_toll", "must be a positive multiple of dt"))?;
        if !(meta.mu >= 0.0 && meta.mu.is_finite()) {
            return Err(cfg_err("mu", "must be non-negative"));
        }
        if meta.m == 0 {
            return Err(cfg_err("m", "segment count must be at least 1"));
        }
        if meta.fifo_eps.is_nan() || meta.fifo_eps <= 0.0 {
            return Err(cfg_err("fifo_eps", "must be positive"));
        }

        let mut node_index = HashMap::new();
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for n in &file.nodes {
            if node_index.insert(n.id.clone(), nodes.len()).is_some() {
                return Err(ScenarioError::DuplicateId {
                    kind: "node",
                    id: n.id.clone(),
                });
            }
            nodes.push(Node {
                id: n.id.clone(),
                kind: n.kind,
                x: n.x,
                y: n.y,
            });
        }
        let node = |id: &str| {
            node_index
                .get(id)
                .copied()
                .ok_or_else(|| ScenarioError::UnknownNode(id.to_string()))
        };

        let mut link_index = HashMap::new();
        let mut links = Vec::with_capacity(file.links.len());
        let mut in_links = vec![Vec::new(); nodes.len()];
        let mut out_links = vec![Vec::new(); nodes.len()];
        for l in &file.links {
            if link_index.insert(l.id.clone(), links.len()).is_some() {
                return Err(ScenarioError::DuplicateId {
                    kind: "link",
                    id: l.id.clone(),
                });
            }
            let bad = |reason: &str| ScenarioError::InvalidLink {
                link: l.id.clone(),
                reason: reason.to_string(),
            };
            for (name, v) in [
                ("d", l.d),
                ("u", l.u),
                ("qmax", l.qmax),
                ("kappa", l.kappa),
                ("alpha", l.alpha),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(&format!("{name} must be positive, got {v}")));
                }
            }
            let k_crit = l.qmax / l.u;
            if k_crit >= l.kappa {
                return Err(bad(&format!(
                    "critical density {k_crit} must be below jam density {}",
                    l.kappa
                )));
            }
            let limit = l.d / l.u;
            if meta.dt > limit * (1.0 + GRID_TOL) {
                return Err(ScenarioError::Cfl {
                    link: l.id.clone(),
                    dt: meta.dt,
                    limit,
                });
            }
            let (from, to) = (node(&l.from)?, node(&l.to)?);
            if from == to {
                return Err(bad("self loops are not supported"));
            }
            out_links[from].push(links.len());
            in_links[to].push(links.len());
            links.push(LinkParams {
                id: l.id.clone(),
                from,
                to,
                length: l.d,
                free_flow_speed: l.u,
                capacity: l.qmax,
                jam_density: l.kappa,
                priority: l.alpha,
                critical_density: k_crit,
                wave_speed: l.qmax / (l.kappa - k_crit),
            });
        }

        for (i, n) in nodes.iter().enumerate() {
            let bad = |reason: &str| ScenarioError::InvalidNode {
                node: n.id.clone(),
                reason: reason.to_string(),
            };
            match n.kind {
                NodeKind::Origin if !in_links[i].is_empty() => {
                    return Err(bad("origins cannot have incoming links"))
                }
                NodeKind::Destination if !out_links[i].is_empty() => {
                    return Err(bad("destinations cannot have outgoing links"))
                }
                _ => {}
            }
        }

        let mut demands = Vec::with_capacity(file.demands.len());
        for d in &file.demands {
            let bad = |reason: String| ScenarioError::InvalidDemand {
                origin: d.origin.clone(),
                destination: d.destination.clone(),
                reason,
            };
            let (o, s) = (node(&d.origin)?, node(&d.destination)?);
            if nodes[o].kind != NodeKind::Origin {
                return Err(bad(format!("`{}` is not an origin", d.origin)));
            }
            if nodes[s].kind != NodeKind::Destination {
                return Err(bad(format!("`{}` is not a destination", d.destination)));
            }
            let mut pieces = Vec::with_capacity(d.rates.len());
            for &[start, end, rate] in &d.rates {
                if !(rate >= 0.0 && rate.is_finite()) {
                    return Err(bad(format!("rate {rate} must be non-negative")));
                }
                if !(start < end && start >= 0.0 && end <= meta.t_max * (1.0 + GRID_TOL)) {
                    return Err(bad(format!("interval [{start}, {end}) outside [0, t_max)")));
                }
                if grid_steps(start, meta.dt).is_none() || grid_steps(end, meta.dt).is_none() {
                    return Err(bad(format!(
                        "interval [{start}, {end}) is not aligned to dt"
                    )));
                }
                pieces.push(DemandPiece { start, end, rate });
            }
            let mut sorted: Vec<_> = pieces.clone();
            sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
            for w in sorted.windows(2) {
                if w[1].start < w[0].end - GRID_TOL {
                    return Err(bad(format!(
                        "intervals starting at {} and {} overlap",
                        w[0].start, w[1].start
                    )));
                }
            }
            demands.push(DemandProfile {
                origin: o,
                destination: s,
                pieces,
            });
        }

        // Reachability for every OD pair.
        for d in &demands {
            if !reachable(&links, &out_links, d.origin, d.destination) {
                return Err(ScenarioError::Unreachable {
                    origin: nodes[d.origin].id.clone(),
                    destination: nodes[d.destination].id.clone(),
                });
            }
        }

        let periods = (meta.t_max / dt_toll - GRID_TOL).ceil().max(1.0) as usize;
        let mut toll_values = vec![vec![0.0; periods]; links.len()];
        let mut tolled = vec![false; links.len()];
        for t in &file.tolls {
            let l = *link_index
                .get(&t.link)
                .ok_or_else(|| ScenarioError::UnknownLink(t.link.clone()))?;
            let bad = |reason: String| ScenarioError::InvalidToll {
                link: t.link.clone(),
                reason,
            };
            if tolled[l] {
                return Err(bad("listed twice".into()));
            }
            if t.values.len() > periods {
                return Err(bad(format!(
                    "{} values given for {periods} periods",
                    t.values.len()
                )));
            }
            for (i, &v) in t.values.iter().enumerate() {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(bad(format!("period {i}: toll {v} must be non-negative")));
                }
                toll_values[l][i] = v;
            }
            tolled[l] = true;
        }

        let mut turns = Vec::with_capacity(file.turns.len());
        for t in &file.turns {
            let n = node(&t.node)?;
            let bad = |reason: String| ScenarioError::InvalidTurn {
                node: t.node.clone(),
                reason,
            };
            let link = |id: &str| {
                link_index
                    .get(id)
                    .copied()
                    .ok_or_else(|| ScenarioError::UnknownLink(id.to_string()))
            };
            let from = t.from.as_deref().map(link).transpose()?;
            let to = link(&t.to)?;
            match from {
                Some(f) if links[f].to != n => {
                    return Err(bad(format!("`{}` does not enter this node", links[f].id)))
                }
                None if nodes[n].kind != NodeKind::Origin => {
                    return Err(bad("`from` may only be omitted at origins".into()))
                }
                _ => {}
            }
            if links[to].from != n {
                return Err(bad(format!("`{}` does not leave this node", t.to)));
            }
            if !(t.fraction >= 0.0 && t.fraction.is_finite()) {
                return Err(bad(format!("fraction {} must be non-negative", t.fraction)));
            }
            turns.push(Turn {
                node: n,
                from,
                to,
                fraction: t.fraction,
            });
        }
        if meta.route_choice == RouteChoice::Fixed {
            validate_turn_rows(&nodes, &in_links, &out_links, &turns)?;
        }

        let destinations: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Destination)
            .map(|(i, _)| i)
            .collect();
        let mut destination_slot = vec![None; nodes.len()];
        for (k, &d) in destinations.iter().enumerate() {
            destination_slot[d] = Some(k);
        }

        Ok(Scenario {
            nodes,
            links,
            demands,
            tolls: TollSchedule {
                period: dt_toll,
                periods,
                values: toll_values,
                tolled,
            },
            turns,
            config: SimConfig {
                dt: meta.dt,
                t_max: meta.t_max,
                steps,
                dt_route,
                route_every,
                tt_method: meta.tt_method,
                segments: meta.m,
                mu: meta.mu,
                fifo_eps: meta.fifo_eps,
                route_choice: meta.route_choice,
            },
            in_links,
            out_links,
            destinations,
            destination_slot,
        })
    }

    pub fn to_file(&self) -> ScenarioFile {
        let node_id = |i: usize| self.nodes[i].id.clone();
        ScenarioFile {
            meta: MetaFile {
                dt: self.config.dt,
                t_max: self.config.t_max,
                dt_route: Some(self.config.dt_route),
                dt_toll: Some(self.tolls.period),
                mu: self.config.mu,
                m: self.config.segments,
                tt_method: self.config.tt_method,
                route_choice: self.config.route_choice,
                fifo_eps: self.config.fifo_eps,
            },
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeFile {
                    id: n.id.clone(),
                    kind: n.kind,
                    x: n.x,
                    y: n.y,
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkFile {
                    id: l.id.clone(),
                    from: node_id(l.from),
                    to: node_id(l.to),
                    d: l.length,
                    u: l.free_flow_speed,
                    qmax: l.capacity,
                    kappa: l.jam_density,
                    alpha: l.priority,
                })
                .collect(),
            demands: self
                .demands
                .iter()
                .map(|d| DemandFile {
                    origin: node_id(d.origin),
                    destination: node_id(d.destination),
                    rates: d.pieces.iter().map(|p| [p.start, p.end, p.rate]).collect(),
                })
                .collect(),
            tolls: self
                .tolls
                .tolled_links()
                .map(|l| TollFile {
                    link: self.links[l].id.clone(),
                    values: self.tolls.values[l].clone(),
                })
                .collect(),
            turns: self
                .turns
                .iter()
                .map(|t| TurnFile {
                    node: node_id(t.node),
                    from: t.from.map(|f| self.links[f].id.clone()),
                    to: self.links[t.to].id.clone(),
                    fraction: t.fraction,
                })
                .collect(),
        }
    }

    pub fn in_links(&self, node: usize) -> &[usize] {
        &self.in_links[node]
    }

    pub fn out_links(&self, node: usize) -> &[usize] {
        &self.out_links[node]
    }

    /// Destination nodes in declaration order.
    pub fn destinations(&self) -> &[usize] {
        &self.destinations
    }

    /// Position of `node` in [`Scenario::destinations`].
    pub fn destination_slot(&self, node: usize) -> Option<usize> {
        self.destination_slot[node]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn link_index(&self, id: &str) -> Option<usize> {
        self.links.iter().position(|l| l.id == id)
    }

    /// Widest history (in steps) any demand or supply lookup reaches back.
    pub fn history_width(&self) -> usize {
        self.links
            .iter()
            .map(|l| {
                let dt = self.config.dt;
                let a = (l.length / (l.free_flow_speed * dt)).ceil();
                let b = (l.length / (l.wave_speed() * dt)).ceil();
                a.max(b) as usize
            })
            .max()
            .unwrap_or(0)
    }

    pub fn with_config(&self, f: impl FnOnce(&mut SimConfig)) -> Scenario {
        let mut s = self.clone();
        f(&mut s.config);
        s
    }

    /// Replaces toll values; `values[link][period]`.
    pub fn with_tolls(&self, values: Vec<Vec<f64>>) -> Scenario {
        let mut s = self.clone();
        s.tolls.values = values;
        s
    }
}

fn reachable(links: &[LinkParams], out_links: &[Vec<usize>], from: usize, to: usize) -> bool {
    let mut seen = vec![false; out_links.len()];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        for &l in &out_links[n] {
            let m = links[l].to;
            if !seen[m] {
                seen[m] = true;
                stack.push(m);
            }
        }
    }
    false
}

fn validate_turn_rows(
    nodes: &[Node],
    in_links: &[Vec<usize>],
    out_links: &[Vec<usize>],
    turns: &[Turn],
) -> Result<(), ScenarioError> {
    for (n, node) in nodes.iter().enumerate() {
        if out_links[n].len() < 2 {
            continue;
        }
        let rows: Vec<Option<usize>> = if node.kind == NodeKind::Origin {
            vec![None]
        } else {
            in_links[n].iter().copied().map(Some).collect()
        };
        for row in rows {
            let total: f64 = turns
                .iter()
                .filter(|t| t.node == n && t.from == row)
                .map(|t| t.fraction)
                .sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(ScenarioError::InvalidTurn {
                    node: node.id.clone(),
                    reason: format!("fractions sum to {total}, expected 1"),
                });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parameter registration
// ---------------------------------------------------------------------------

/// A scalar scenario input that can be registered for differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    FreeFlowSpeed(usize),
    Capacity(usize),
    JamDensity(usize),
    /// Selecting this switches the link to the (u, w, κ) parameterization.
    WaveSpeed(usize),
    Priority(usize),
    Demand {
        demand: usize,
        piece: usize,
    },
    Toll {
        link: usize,
        period: usize,
    },
    Turn(usize),
}

/// Registered parameters with their current values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub keys: Vec<Param>,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn position(&self, key: Param) -> Option<usize> {
        self.keys.iter().position(|k| *k == key)
    }

    pub fn with_values(&self, values: Vec<f64>) -> ParamSet {
        assert_eq!(values.len(), self.len());
        ParamSet {
            values,
            ..self.clone()
        }
    }

    /// Copy with parameter `i` shifted by `delta`.
    pub fn perturbed(&self, i: usize, delta: f64) -> ParamSet {
        let mut p = self.clone();
        p.values[i] += delta;
        p
    }

    fn push(&mut self, key: Param, name: String, value: f64) -> Result<(), ScenarioError> {
        if self.keys.contains(&key) {
            return Err(ScenarioError::InvalidSelection {
                token: name,
                reason: "selected twice".into(),
            });
        }
        self.keys.push(key);
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }
}

impl fmt::Display for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in self.names.iter().zip(&self.values).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{n}={v}")?;
        }
        Ok(())
    }
}

impl Scenario {
    /// Current scenario value of a parameter.
    pub fn param_value(&self, p: Param) -> f64 {
        match p {
            Param::FreeFlowSpeed(l) => self.links[l].free_flow_speed,
            Param::Capacity(l) => self.links[l].capacity,
            Param::JamDensity(l) => self.links[l].jam_density,
            Param::WaveSpeed(l) => self.links[l].wave_speed(),
            Param::Priority(l) => self.links[l].priority,
            Param::Demand { demand, piece } => self.demands[demand].pieces[piece].rate,
            Param::Toll { link, period } => self.tolls.values[link][period],
            Param::Turn(t) => self.turns[t].fraction,
        }
    }

    /// Canonical selection token for a parameter.
    pub fn param_name(&self, p: Param) -> String {
        let lid = |l: usize| &self.links[l].id;
        match p {
            Param::FreeFlowSpeed(l) => format!("u{}", lid(l)),
            Param::Capacity(l) => format!("qmax{}", lid(l)),
            Param::JamDensity(l) => format!("kappa{}", lid(l)),
            Param::WaveSpeed(l) => format!("w{}", lid(l)),
            Param::Priority(l) => format!("alpha{}", lid(l)),
            Param::Demand { demand, piece } => {
                let d = &self.demands[demand];
                let from_origin = self
                    .demands
                    .iter()
                    .filter(|o| o.origin == d.origin)
                    .map(|o| o.pieces.len())
                    .sum::<usize>();
                if from_origin == 1 {
                    format!("q{}", self.nodes[d.origin].id)
                } else {
                    format!(
                        "q:{}:{}:{piece}",
                        self.nodes[d.origin].id, self.nodes[d.destination].id
                    )
                }
            }
            Param::Toll { link, period } => format!("toll:{}:{period}", lid(link)),
            Param::Turn(t) => {
                let t = &self.turns[t];
                format!(
                    "b:{}:{}:{}",
                    self.nodes[t.node].id,
                    t.from.map(|f| lid(f).as_str()).unwrap_or("-"),
                    lid(t.to)
                )
            }
        }
    }

    /// Resolves a comma-separated selection expression.
    ///
    /// Tokens: `q<origin>`, `q:<origin>:<dest>:<piece>`, `u<link>`,
    /// `qmax<link>`, `kappa<link>`, `w<link>`, `alpha<link>`,
    /// `toll:<link>:<period>`, `toll:*`, `b:<node>:<from|->:<to>`.
    pub fn register_parameters(&self, selection: &str) -> Result<ParamSet, ScenarioError> {
        let mut set = ParamSet::default();
        for token in selection
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
        {
            for key in self.resolve_token(token)? {
                set.push(key, self.param_name(key), self.param_value(key))?;
            }
        }
        for key in &set.keys {
            if let Param::WaveSpeed(l) = key {
                if set.keys.contains(&Param::Capacity(*l)) {
                    return Err(ScenarioError::InvalidSelection {
                        token: format!("w{}", self.links[*l].id),
                        reason: "capacity and wave speed of one link cannot both be independent"
                            .into(),
                    });
                }
            }
        }
        Ok(set)
    }

    /// Registers explicit keys (values taken from the scenario).
    pub fn register_keys(&self, keys: &[Param]) -> Result<ParamSet, ScenarioError> {
        let mut set = ParamSet::default();
        for &k in keys {
            set.push(k, self.param_name(k), self.param_value(k))?;
        }
        Ok(set)
    }

    fn resolve_token(&self, token: &str) -> Result<Vec<Param>, ScenarioError> {
        let err = |reason: &str| ScenarioError::InvalidSelection {
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let link = |id: &str| self.link_index(id).ok_or_else(|| err("unknown link"));

        if let Some(rest) = token.strip_prefix("toll:") {
            if rest == "*" {
                let keys: Vec<_> = self
                    .tolls
                    .tolled_links()
                    .flat_map(|l| {
                        (0..self.tolls.periods).map(move |p| Param::Toll { link: l, period: p })
                    })
                    .collect();
                if keys.is_empty() {
                    return Err(err("scenario has no tolled links"));
                }
                return Ok(keys);
            }
            let (l, p) = rest
                .rsplit_once(':')
                .ok_or_else(|| err("expected toll:<link>:<period>"))?;
            let l = link(l)?;
            let p: usize = p.parse().map_err(|_| err("period must be an integer"))?;
            if p >= self.tolls.periods {
                return Err(err("period out of range"));
            }
            return Ok(vec![Param::Toll { link: l, period: p }]);
        }
        if let Some(rest) = token.strip_prefix("b:") {
            let parts: Vec<_> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(err("expected b:<node>:<from|->:<to>"));
            }
            let n = self
                .node_index(parts[0])
                .ok_or_else(|| err("unknown node"))?;
            let from = if parts[1] == "-" {
                None
            } else {
                Some(link(parts[1])?)
            };
            let to = link(parts[2])?;
            if self.config.route_choice != RouteChoice::Fixed {
                return Err(err(
                    "turning fractions are parameters only in fixed-turning mode",
                ));
            }
            let t = self
                .turns
                .iter()
                .position(|t| t.node == n && t.from == from && t.to == to)
                .ok_or_else(|| err("no such turn"))?;
            return Ok(vec![Param::Turn(t)]);
        }
        if let Some(rest) = token.strip_prefix("q:") {
            let parts: Vec<_> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(err("expected q:<origin>:<destination>:<piece>"));
            }
            let o = self
                .node_index(parts[0])
                .ok_or_else(|| err("unknown origin"))?;
            let s = self
                .node_index(parts[1])
                .ok_or_else(|| err("unknown destination"))?;
            let piece: usize = parts[2]
                .parse()
                .map_err(|_| err("piece must be an integer"))?;
            let d = self
                .demands
                .iter()
                .position(|d| d.origin == o && d.destination == s)
                .ok_or_else(|| err("no demand for this OD pair"))?;
            if piece >= self.demands[d].pieces.len() {
                return Err(err("piece out of range"));
            }
            return Ok(vec![Param::Demand { demand: d, piece }]);
        }
        type Ctor = fn(usize) -> Param;
        let link_prefixes: [(&str, Ctor); 5] = [
            ("qmax", Param::Capacity),
            ("kappa", Param::JamDensity),
            ("alpha", Param::Priority),
            ("u", Param::FreeFlowSpeed),
            ("w", Param::WaveSpeed),
        ];
        for (prefix, ctor) in link_prefixes {
            if let Some(id) = token.strip_prefix(prefix) {
                if let Some(l) = self.link_index(id) {
                    return Ok(vec![ctor(l)]);
                }
            }
        }
        if let Some(id) = token.strip_prefix('q') {
            if let Some(o) = self.node_index(id) {
                if self.nodes[o].kind != NodeKind::Origin {
                    return Err(err("not an origin"));
                }
                let keys: Vec<_> = self
                    .demands
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.origin == o)
                    .flat_map(|(i, d)| {
                        (0..d.pieces.len()).map(move |p| Param::Demand {
                            demand: i,
                            piece: p,
                        })
                    })
                    .collect();
                if keys.is_empty() {
                    return Err(err("origin has no demand"));
                }
                return Ok(keys);
            }
        }
        Err(err("unrecognized parameter"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MERGE: &str = include_str!("../scenarios/merge.toml");

    fn merge() -> Scenario {
        Scenario::from_toml_str(MERGE).unwrap()
    }

    fn with_meta(patch: &str) -> String {
        MERGE.replacen("dt = 5.0", patch, 1)
    }

    #[test]
    fn merge_derived_quantities() {
        let s = merge();
        assert_eq!(s.links.len(), 3);
        for l in &s.links {
            assert!((l.wave_speed() - 5.0).abs() < 1e-12);
            assert!((l.critical_density() - 0.04).abs() < 1e-15);
        }
        assert_eq!(s.config.steps, 400);
        assert_eq!(s.destinations().len(), 1);
    }

    #[test]
    fn cfl_violation_names_link() {
        let err = Scenario::from_toml_str(&with_meta("dt = 100.0").replacen(
            "dt_route = 5.0",
            "dt_route = 100.0",
            1,
        ))
        .unwrap_err();
        match err {
            ScenarioError::Cfl { link, .. } => assert_eq!(link, "1"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_demand_is_valid() {
        let text = MERGE.split("[[demands]]").next().unwrap();
        let s = Scenario::from_toml_str(text).unwrap();
        assert!(s.demands.is_empty());
    }

    #[test]
    fn link_invariants_are_checked() {
        let cases = [
            ("kappa = 0.2", "kappa = 0.04", "critical density"),
            ("kappa = 0.2", "kappa = 0.0", "kappa must be positive"),
            ("d = 1000.0", "d = -1.0", "d must be positive"),
            ("u = 20.0", "u = 0.0", "u must be positive"),
            ("qmax = 0.8", "qmax = 0.0", "qmax must be positive"),
            ("alpha = 1.0", "alpha = 0.0", "alpha must be positive"),
        ];
        for (from, to, needle) in cases {
            let text = MERGE.replacen(from, to, 1);
            let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
        }
    }

    #[test]
    fn config_invariants_are_checked() {
        for (patch, field) in [
            ("dt = 5.0\nt_max_extra = 1", "unknown field"),
            ("dt = 7.0", "t_max"),
            ("dt = 0.0", "dt"),
        ] {
            let err = Scenario::from_toml_str(&with_meta(patch))
                .unwrap_err()
                .to_string();
            assert!(err.contains(field), "{err}");
        }
        let text = MERGE.replacen("dt_route = 5.0", "dt_route = 7.5", 1);
        assert!(Scenario::from_toml_str(&text)
            .unwrap_err()
            .to_string()
            .contains("dt_route"));
        let text = MERGE.replacen("mu = 0.0", "mu = -1.0", 1);
        assert!(Scenario::from_toml_str(&text)
            .unwrap_err()
            .to_string()
            .contains("mu"));
    }

    #[test]
    fn parse_error_reports_location() {
        let text = MERGE.replacen("u = 20.0", "u = \"fast\"", 1);
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn demand_invariants_are_checked() {
        let text = MERGE.replacen("[0.0, 1000.0, 0.45]", "[0.0, 1000.0, -0.45]", 1);
        assert!(Scenario::from_toml_str(&text).is_err());
        let text = MERGE.replacen("[0.0, 1000.0, 0.45]", "[0.0, 1002.0, 0.45]", 1);
        assert!(Scenario::from_toml_str(&text)
            .unwrap_err()
            .to_string()
            .contains("aligned"));
        let text = MERGE.replacen(
            "[0.0, 1000.0, 0.45]",
            "[0.0, 1000.0, 0.45], [500.0, 600.0, 0.1]",
            1,
        );
        assert!(Scenario::from_toml_str(&text)
            .unwrap_err()
            .to_string()
            .contains("overlap"));
    }

    #[test]
    fn unreachable_destination_names_pair() {
        let text = MERGE.replacen("from = \"m\"\nto = \"d\"", "from = \"d2\"\nto = \"d\"", 1)
            + "\n[[nodes]]\nid = \"d2\"\nkind = \"intermediate\"\n";
        match Scenario::from_toml_str(&text).unwrap_err() {
            ScenarioError::Unreachable {
                origin,
                destination,
            } => {
                assert_eq!((origin.as_str(), destination.as_str()), ("1", "d"))
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn toll_invariants_are_checked() {
        let text = format!("{MERGE}\n[[tolls]]\nlink = \"3\"\nvalues = [-1.0]\n");
        assert!(Scenario::from_toml_str(&text).is_err());
        let text = format!("{MERGE}\n[[tolls]]\nlink = \"9\"\n");
        assert!(Scenario::from_toml_str(&text).is_err());
        let text = format!("{MERGE}\n[[tolls]]\nlink = \"3\"\nvalues = [1.0, 2.0]\n");
        assert!(Scenario::from_toml_str(&text)
            .unwrap_err()
            .to_string()
            .contains("periods"));
    }

    #[test]
    fn selection_dimensions() {
        let s = merge();
        assert_eq!(s.register_parameters("q1,q2").unwrap().len(), 2);
        let p = s.register_parameters("u1,u2,u3").unwrap();
        assert_eq!(p.names, vec!["u1", "u2", "u3"]);
        assert_eq!(p.values, vec![20.0, 20.0, 20.0]);
        assert!(s.register_parameters("qmax3,w3").is_err());
        assert!(s.register_parameters("u9").is_err());
        assert!(s.register_parameters("q1,q1").is_err());
        assert!(s.register_parameters("toll:*").is_err());
    }

    #[test]
    fn toll_star_covers_schedule() {
        // 383 tolled links x 40 periods.
        let mut text = String::from(
            "[meta]\ndt = 10.0\nt_max = 12000.0\ndt_toll = 300.0\n\n\
             [[nodes]]\nid = \"o\"\nkind = \"origin\"\n",
        );
        for i in 0..=383 {
            text += &format!("[[nodes]]\nid = \"n{i}\"\nkind = \"intermediate\"\n");
        }
        for i in 0..383 {
            text += &format!(
                "[[links]]\nid = \"l{i}\"\nfrom = \"n{i}\"\nto = \"n{}\"\nd = 500.0\nu = 20.0\nqmax = 0.5\nkappa = 0.15\n\
                 [[tolls]]\nlink = \"l{i}\"\n",
                i + 1
            );
        }
        let s = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s.tolls.periods, 40);
        assert_eq!(s.register_parameters("toll:*").unwrap().len(), 15320);
    }

    #[test]
    fn save_load_round_trip() {
        let s = merge();
        let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(s, back);
    }
}
