//! Flow transfer at nodes.
//!
//! General junctions use a fixed-length Incremental Node Model: `I + J + 1`
//! iterations of an active-set step, where iterations after convergence take a
//! zero step. Origins inject from vertical queues through the same model with
//! a single virtual inlink; destinations absorb their inlinks' full demand.

use crate::ad::{Tape, Var};

/// Guard on the outlink direction in step-size divisions.
pub const ACTIVE_EPS: f64 = 1e-12;
/// Turning fractions at or below this do not connect an inlink to an outlink.
pub const TURN_EPS: f64 = 1e-12;

/// Allocated flows at one node (veh/s).
#[derive(Debug, Clone)]
pub struct NodeTransfer {
    /// Outflow of each inlink.
    pub inflow: Vec<Var>,
    /// Inflow of each outlink.
    pub outflow: Vec<Var>,
}

/// Stand-in step length for constraints that are not active.
const NO_BOUND: f64 = 1e300;

/// Runs the incremental node model for exactly `I + J + 1 + extra`
/// iterations. `turns[l][o]` is the fraction of inlink `l` bound to outlink
/// `o`. Every iteration records the same operations whatever the active set,
/// so the recorded graph depends only on the node's shape.
pub fn inm_fixed_padded(
    tape: &mut Tape,
    demand: &[Var],
    supply: &[Var],
    turns: &[Vec<Var>],
    priority: &[Var],
    extra: usize,
) -> NodeTransfer {
    let ni = demand.len();
    let nj = supply.len();
    assert_eq!(turns.len(), ni, "one turning row per inlink");
    assert_eq!(priority.len(), ni, "one priority per inlink");
    debug_assert!(turns.iter().all(|r| r.len() == nj));

    let mut q_in = vec![Var::ZERO; ni];
    let mut q_out = vec![Var::ZERO; nj];
    let connects = |l: usize, o: usize| turns[l][o].value() > TURN_EPS;
    // A constraint leaves the active set only once it has set the step, so a
    // tie is resolved as if the earlier candidate were slightly tighter and
    // later phases still carry the matching derivatives.
    let mut full_in = vec![false; ni];
    let mut full_out = vec![false; nj];

    for _ in 0..ni + nj + 1 + extra {
        let active_in: Vec<bool> = (0..ni)
            .map(|l| !full_in[l] && (0..nj).all(|o| !connects(l, o) || !full_out[o]))
            .collect();
        let active_out: Vec<bool> = (0..nj)
            .map(|o| !full_out[o] && (0..ni).any(|l| active_in[l] && connects(l, o)))
            .collect();

        let phi_in: Vec<Var> = (0..ni)
            .map(|l| tape.select(active_in[l], priority[l], 0.0))
            .collect();
        let phi_out: Vec<Var> = (0..nj)
            .map(|o| {
                let terms: Vec<Var> = (0..ni).map(|l| tape.mul(turns[l][o], phi_in[l])).collect();
                tape.sum(&terms)
            })
            .collect();

        let mut theta = Var::constant(NO_BOUND);
        let mut binding = None;
        for l in 0..ni {
            let room = tape.sub(demand[l], q_in[l]);
            let step = tape
                .div(room, priority[l])
                .expect("priorities are positive");
            let step = tape.select(active_in[l], step, NO_BOUND);
            if active_in[l] && step.value() < theta.value() {
                binding = Some((true, l));
            }
            theta = tape.min2(theta, step);
        }
        for o in 0..nj {
            let room = tape.sub(supply[o], q_out[o]);
            let step = tape.divg(room, phi_out[o], ACTIVE_EPS);
            let bound = active_out[o] && phi_out[o].value() > 0.0;
            let step = tape.select(bound, step, NO_BOUND);
            if bound && step.value() < theta.value() {
                binding = Some((false, o));
            }
            theta = tape.min2(theta, step);
        }
        // Rounding can leave a room a hair below zero.
        let theta = tape.max2(theta, 0.0);
        let theta = tape.select(binding.is_some(), theta, 0.0);
        match binding {
            Some((true, l)) => full_in[l] = true,
            Some((false, o)) => full_out[o] = true,
            None => {}
        }

        for l in 0..ni {
            let inc = tape.mul(theta, phi_in[l]);
            q_in[l] = tape.add(q_in[l], inc);
        }
        for o in 0..nj {
            let inc = tape.mul(theta, phi_out[o]);
            q_out[o] = tape.add(q_out[o], inc);
        }
    }
    NodeTransfer {
        inflow: q_in,
        outflow: q_out,
    }
}

/// Fixed-length incremental node model with `I + J + 1` iterations.
pub fn inm_fixed(
    tape: &mut Tape,
    demand: &[Var],
    supply: &[Var],
    turns: &[Vec<Var>],
    priority: &[Var],
) -> NodeTransfer {
    inm_fixed_padded(tape, demand, supply, turns, priority, 0)
}

/// Result of one origin step.
#[derive(Debug, Clone)]
pub struct Injection {
    /// Inflow into each outlink (veh/s).
    pub outflow: Vec<Var>,
    /// Total leaving the queue (veh/s).
    pub total: Var,
}

/// Origin release: the queue (arrivals of this step already added) is
/// offered as the demand of a virtual inlink whose turning row is `ratios`.
pub fn origin_inject(
    tape: &mut Tape,
    queued: Var,
    dt: f64,
    supply: &[Var],
    ratios: &[Var],
) -> Injection {
    let demand = tape.div_c(queued, dt);
    if supply.len() == 1 {
        // Single outlink: the node model reduces to min(D, S).
        let f = tape.min2(demand, supply[0]);
        return Injection {
            outflow: vec![f],
            total: f,
        };
    }
    let t = inm_fixed(
        tape,
        &[demand],
        supply,
        &[ratios.to_vec()],
        &[Var::constant(1.0)],
    );
    Injection {
        total: t.inflow[0],
        outflow: t.outflow,
    }
}

/// Destinations are sinks with unlimited supply: every inlink sends its demand.
pub fn destination_absorb(demand: &[Var]) -> Vec<Var> {
    demand.to_vec()
}
