//! Route choice: instantaneous link travel times, reverse shortest paths per
//! destination, DUO / logit-DUO diverge ratios and FIFO destination splits.

use crate::ad::{Tape, Var};
use crate::ltm::{newell_count, CountHistory, LinkFd};

/// Speed floor (m/s) applied at jam density.
pub const V_MIN: f64 = 0.01;
/// Densities this close to jam density use the speed floor.
pub const JAM_SLACK: f64 = 1e-9;

/// Speed at density `k` on the triangular FD, floored at [`V_MIN`].
pub fn speed(tape: &mut Tape, fd: &LinkFd, k: Var) -> Var {
    let gap = tape.sub(fd.kappa, k);
    let flow = tape.mul(fd.w, gap);
    let cong = tape.divg(flow, k, JAM_SLACK);
    let cong = tape.max2(cong, V_MIN);
    let jammed = k.value() >= fd.kappa.value() - JAM_SLACK;
    let cong = tape.select(jammed, V_MIN, cong);
    tape.select(k.value() <= fd.k_crit.value(), fd.u, cong)
}

/// Travel time from the link-average density.
pub fn travel_time_avg(tape: &mut Tape, fd: &LinkFd, n_up: Var, n_down: Var) -> Var {
    let n = tape.sub(n_up, n_down);
    let k = tape.div_c(n, fd.length);
    let v = speed(tape, fd, k);
    tape.div(fd.length, v).expect("speed is floored")
}

/// Travel time summed over `m` equal segments whose densities come from
/// Newell's formula at the segment boundaries at step `t`.
pub fn travel_time_segments(
    tape: &mut Tape,
    fd: &LinkFd,
    up: &impl CountHistory,
    down: &impl CountHistory,
    t: usize,
    m: usize,
) -> Var {
    assert!(m >= 1);
    let dx = fd.length / m as f64;
    let counts: Vec<Var> = (0..=m)
        .map(|i| {
            let x = if i == m { fd.length } else { i as f64 * dx };
            newell_count(tape, fd, up, down, t as f64, x)
        })
        .collect();
    let mut parts = Vec::with_capacity(m);
    for i in 0..m {
        let n = tape.sub(counts[i], counts[i + 1]);
        let k = tape.div_c(n, dx);
        let k = tape.max2(k, 0.0);
        let v = speed(tape, fd, k);
        parts.push(tape.div(dx, v).expect("speed is floored"));
    }
    tape.sum(&parts)
}

/// Shortest paths towards one destination.
#[derive(Debug, Clone)]
pub struct DestinationTree {
    pub destination: usize,
    /// Node cost (s); `None` where the destination is unreachable.
    pub node_cost: Vec<Option<Var>>,
    /// Next link on the shortest path from each node.
    pub next: Vec<Option<usize>>,
}

/// Shortest-path trees for all destinations plus the edge weights used.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    pub weights: Vec<Var>,
    pub trees: Vec<DestinationTree>,
}

impl RoutingTable {
    /// Cost of entering `link` towards tree `s`: weight plus downstream cost.
    pub fn link_cost(&self, tape: &mut Tape, link: usize, head: usize, s: usize) -> Option<Var> {
        let down = self.trees[s].node_cost[head]?;
        Some(tape.add(self.weights[link], down))
    }
}

/// Plain-value reverse Bellman–Ford towards `dest`. `links[i] = (from, to)`.
/// Returns node costs and next links; ties go to the earliest-declared link.
pub fn bellman_ford(
    n_nodes: usize,
    links: &[(usize, usize)],
    weights: &[f64],
    dest: usize,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut cost = vec![f64::INFINITY; n_nodes];
    let mut next = vec![None; n_nodes];
    cost[dest] = 0.0;
    for _ in 0..n_nodes {
        let mut changed = false;
        for (l, &(from, to)) in links.iter().enumerate() {
            if from == dest || !cost[to].is_finite() {
                continue;
            }
            let c = weights[l] + cost[to];
            let better = c < cost[from] || (c == cost[from] && next[from].is_some_and(|n| l < n));
            if better {
                cost[from] = c;
                next[from] = Some(l);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (cost, next)
}

/// Builds shortest-path trees for every destination from tracked weights.
/// The tree is found on plain values; node costs are then re-assembled on the
/// tape along tree edges so that they carry gradients.
pub fn shortest_paths(
    tape: &mut Tape,
    n_nodes: usize,
    links: &[(usize, usize)],
    weights: Vec<Var>,
    destinations: &[usize],
) -> RoutingTable {
    let plain: Vec<f64> = weights.iter().map(Var::value).collect();
    debug_assert!(plain.iter().all(|w| *w > 0.0 && w.is_finite()));
    let trees = destinations
        .iter()
        .map(|&dest| {
            let (cost, next) = bellman_ford(n_nodes, links, &plain, dest);
            let mut order: Vec<usize> = (0..n_nodes).filter(|&n| cost[n].is_finite()).collect();
            order.sort_by(|&a, &b| cost[a].total_cmp(&cost[b]));
            let mut node_cost: Vec<Option<Var>> = vec![None; n_nodes];
            node_cost[dest] = Some(Var::ZERO);
            for n in order {
                if n == dest {
                    continue;
                }
                let l = next[n].expect("finite cost has a next link");
                let down = node_cost[links[l].1].expect("downstream settled first");
                node_cost[n] = Some(tape.add(weights[l], down));
            }
            DestinationTree {
                destination: dest,
                node_cost,
                next,
            }
        })
        .collect();
    RoutingTable { weights, trees }
}

/// Per-destination choice probabilities over a node's outlinks.
///
/// `costs[o]` is the cost of entering outlink `o` (None if the destination
/// cannot be reached through it). With `mu == 0` the shortest outlink
/// (`best`) gets probability one.
pub fn choice_probabilities(
    tape: &mut Tape,
    costs: &[Option<Var>],
    best: usize,
    mu: f64,
) -> Vec<Var> {
    if mu == 0.0 {
        return (0..costs.len())
            .map(|o| Var::constant(if o == best { 1.0 } else { 0.0 }))
            .collect();
    }
    let floor = costs
        .iter()
        .flatten()
        .map(Var::value)
        .fold(f64::INFINITY, f64::min);
    let weights: Vec<Var> = costs
        .iter()
        .map(|c| match c {
            Some(c) => {
                let shifted = tape.sub(*c, floor);
                let z = tape.mul(shifted, -mu);
                tape.exp(z)
            }
            None => Var::ZERO,
        })
        .collect();
    let total = tape.sum(&weights);
    weights
        .into_iter()
        .map(|w| {
            tape.div(w, total)
                .expect("the cheapest outlink has weight one")
        })
        .collect()
}

/// Diverge ratios `beta[o] = Σ_s ω_s p_so / Σ_s ω_s` from per-destination
/// probabilities `prob[s][o]` and weights `omega[s]`. When the node holds
/// fewer than `eps` vehicles the weights fall back to `fallback[s]`.
pub fn diverge_ratios(
    tape: &mut Tape,
    prob: &[Vec<Var>],
    omega: &[Var],
    fallback: &[f64],
    eps: f64,
) -> Vec<Var> {
    assert_eq!(prob.len(), omega.len());
    assert!(!prob.is_empty(), "at least one destination");
    let n_out = prob[0].len();
    let total = tape.sum(omega);
    let empty = total.value() <= eps;
    let w: Vec<Var> = omega
        .iter()
        .zip(fallback)
        .map(|(&o, &f)| tape.select(empty, f, o))
        .collect();
    let total = tape.sum(&w);
    (0..n_out)
        .map(|o| {
            let parts: Vec<Var> = (0..prob.len())
                .map(|s| tape.mul(w[s], prob[s][o]))
                .collect();
            let num = tape.sum(&parts);
            tape.divg(num, total, eps)
        })
        .collect()
}

/// Destination mix of each outlink's inflow: `share[o][s] ∝ m_s p_so`, with
/// `m_s = mix[s] + pad·omega[s]`. Falls back to `share[o][s] ∝ p_so` when
/// the weighted sum is below `eps`.
pub fn destination_shares(
    tape: &mut Tape,
    prob: &[Vec<Var>],
    mix: &[Var],
    omega: &[Var],
    pad: f64,
    eps: f64,
) -> Vec<Vec<Var>> {
    let n_out = prob[0].len();
    let m: Vec<Var> = mix
        .iter()
        .zip(omega)
        .map(|(&x, &w)| {
            let extra = tape.mul(w, pad);
            tape.add(x, extra)
        })
        .collect();
    (0..n_out)
        .map(|o| {
            let parts: Vec<Var> = (0..prob.len())
                .map(|s| tape.mul(m[s], prob[s][o]))
                .collect();
            let num = tape.sum(&parts);
            // Nothing bound for this outlink: split by the choice
            // probabilities alone so that the shares still sum to one.
            let parts: Vec<Var> = if num.value() > eps {
                parts
            } else {
                (0..prob.len()).map(|s| prob[s][o]).collect()
            };
            let num = tape.sum(&parts);
            parts.iter().map(|&p| tape.divg(p, num, eps)).collect()
        })
        .collect()
}

/// FIFO split of a link's outflow by the destination mix of its cumulative
/// arrivals. The parts sum to `f_out` up to rounding.
pub fn fifo_split(tape: &mut Tape, f_out: Var, n_up: Var, n_up_dest: &[Var], eps: f64) -> Vec<Var> {
    if n_up_dest.len() == 1 {
        return vec![tape.select(n_up.value() > 0.0, f_out, 0.0)];
    }
    let ratios: Vec<Var> = n_up_dest.iter().map(|&n| tape.divg(n, n_up, eps)).collect();
    let total = tape.sum(&ratios);
    ratios
        .into_iter()
        .map(|r| {
            let part = tape.mul(f_out, r);
            tape.divg(part, total, eps)
        })
        .collect()
}
