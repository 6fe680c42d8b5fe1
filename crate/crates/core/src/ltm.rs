//! Link Transmission Model: cumulative count curves, Newell's formula and
//! link demand/supply.
//!
//! Time on a curve is measured in steps. A curve holds `N(k)` for integer
//! `k`, with `N(0) = 0`; lookups at fractional positions interpolate
//! linearly. Positions before the start read as zero and positions past the
//! latest sample read as the latest sample.

use crate::ad::{Tape, Var};

/// Positions within this distance of an integer are treated as that integer.
const SNAP: f64 = 1e-9;

/// Read access to one cumulative count curve.
pub trait CountHistory {
    /// Latest recorded step index.
    fn latest(&self) -> usize;
    /// Sample at an integer step; callers clamp to `..=latest`.
    fn at(&self, k: i64) -> Var;
}

/// Complete cumulative count curve, `N(0..=T)`.
#[derive(Debug, Clone, Default)]
pub struct CumCurve {
    pub values: Vec<Var>,
}

impl CumCurve {
    pub fn new() -> Self {
        CumCurve {
            values: vec![Var::ZERO],
        }
    }

    pub fn last(&self) -> Var {
        *self.values.last().expect("curve holds N(0)")
    }

    pub fn value_at(&self, k: usize) -> f64 {
        self.values[k].value()
    }
}

impl CountHistory for CumCurve {
    fn latest(&self) -> usize {
        self.values.len() - 1
    }

    fn at(&self, k: i64) -> Var {
        if k <= 0 {
            self.values[0]
        } else {
            self.values[(k as usize).min(self.values.len() - 1)]
        }
    }
}

/// Fixed-width ring holding the most recent samples of a curve.
#[derive(Debug, Clone)]
pub struct CurveWindow {
    buf: Vec<Var>,
    latest: usize,
}

impl CurveWindow {
    /// Window able to serve lookups reaching `width` steps back.
    pub fn new(width: usize) -> Self {
        CurveWindow {
            buf: vec![Var::ZERO; width + 2],
            latest: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.buf.len()
    }

    pub fn current(&self) -> Var {
        self.buf[self.latest % self.buf.len()]
    }

    pub fn push(&mut self, v: Var) {
        self.latest += 1;
        let n = self.buf.len();
        self.buf[self.latest % n] = v;
    }
}

impl CountHistory for CurveWindow {
    fn latest(&self) -> usize {
        self.latest
    }

    fn at(&self, k: i64) -> Var {
        if k <= 0 {
            return Var::ZERO;
        }
        let k = (k as usize).min(self.latest);
        assert!(
            k + self.buf.len() > self.latest,
            "lookup at step {k} fell out of a window of width {} at step {}",
            self.buf.len(),
            self.latest
        );
        self.buf[k % self.buf.len()]
    }
}

/// Integer part of a fractional position, with near-integers snapped.
pub fn grid_base(pos: f64) -> f64 {
    let r = pos.round();
    if (pos - r).abs() < SNAP {
        r
    } else {
        pos.floor()
    }
}

/// `N(pos)` by linear interpolation between neighbouring samples.
pub fn interp(tape: &mut Tape, curve: &impl CountHistory, pos: Var) -> Var {
    let base = grid_base(pos.value());
    let latest = curve.latest() as f64;
    if base >= latest {
        // Past the newest sample: hold it, zero slope.
        let v = curve.at(curve.latest() as i64);
        return tape.interp(v, v, pos, base);
    }
    let k = base as i64;
    let lo = curve.at(k);
    let hi = curve.at(k + 1);
    tape.interp(lo, hi, pos, base)
}

/// Fundamental diagram of one link as tracked quantities.
#[derive(Debug, Clone, Copy)]
pub struct LinkFd {
    pub length: f64,
    pub u: Var,
    pub qmax: Var,
    pub kappa: Var,
    pub w: Var,
    pub k_crit: Var,
    pub alpha: Var,
    /// `d / (u dt)`, free-flow traversal in steps.
    pub ff_steps: Var,
    /// `d / (w dt)`, backward-wave traversal in steps.
    pub wave_steps: Var,
    /// `κ d`, jam storage (veh).
    pub jam_count: Var,
}

impl LinkFd {
    /// Builds the derived quantities from the independent triple (u, q*, κ).
    pub fn from_capacity(
        tape: &mut Tape,
        length: f64,
        dt: f64,
        u: Var,
        qmax: Var,
        kappa: Var,
        alpha: Var,
    ) -> Self {
        let k_crit = tape.div(qmax, u).expect("positive speed");
        let gap = tape.sub(kappa, k_crit);
        let w = tape.div(qmax, gap).expect("k* < kappa");
        Self::assemble(tape, length, dt, u, qmax, kappa, w, k_crit, alpha)
    }

    /// Builds the derived quantities from (u, w, κ); q* = w κ u / (u + w).
    pub fn from_wave_speed(
        tape: &mut Tape,
        length: f64,
        dt: f64,
        u: Var,
        w: Var,
        kappa: Var,
        alpha: Var,
    ) -> Self {
        let wk = tape.mul(w, kappa);
        let num = tape.mul(wk, u);
        let den = tape.add(u, w);
        let qmax = tape.div(num, den).expect("positive speeds");
        let k_crit = tape.div(qmax, u).expect("positive speed");
        Self::assemble(tape, length, dt, u, qmax, kappa, w, k_crit, alpha)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        tape: &mut Tape,
        length: f64,
        dt: f64,
        u: Var,
        qmax: Var,
        kappa: Var,
        w: Var,
        k_crit: Var,
        alpha: Var,
    ) -> Self {
        let ff = tape.div(length, u).expect("positive speed");
        let ff_steps = tape.div_c(ff, dt);
        let back = tape.div(length, w).expect("positive wave speed");
        let wave_steps = tape.div_c(back, dt);
        let jam_count = tape.mul(kappa, length);
        LinkFd {
            length,
            u,
            qmax,
            kappa,
            w,
            k_crit,
            alpha,
            ff_steps,
            wave_steps,
            jam_count,
        }
    }

    /// Steps of history a demand or supply lookup needs.
    pub fn history_steps(&self) -> usize {
        self.ff_steps.value().max(self.wave_steps.value()).ceil() as usize + 1
    }

    /// Flow from the triangular FD at density `k` (plain values).
    pub fn flow(&self, k: f64) -> f64 {
        if k <= self.k_crit.value() {
            self.u.value() * k
        } else {
            self.w.value() * (self.kappa.value() - k)
        }
    }
}

/// Demand and supply of a link during one step (veh/s).
#[derive(Debug, Clone, Copy)]
pub struct LinkFlowBounds {
    pub demand: Var,
    pub supply: Var,
}

/// Newell's cumulative count at position `x` (m) and step `t`.
pub fn newell_count(
    tape: &mut Tape,
    fd: &LinkFd,
    up: &impl CountHistory,
    down: &impl CountHistory,
    t: f64,
    x: f64,
) -> Var {
    debug_assert!((0.0..=fd.length).contains(&x));
    let frac_up = x / fd.length;
    let lag_up = tape.mul(fd.ff_steps, frac_up);
    let pos_up = tape.sub(t, lag_up);
    let free = interp(tape, up, pos_up);

    let rest = 1.0 - frac_up;
    let lag_down = tape.mul(fd.wave_steps, rest);
    let pos_down = tape.sub(t, lag_down);
    let jam = tape.mul(fd.jam_count, rest);
    let down_n = interp(tape, down, pos_down);
    let cong = tape.add(down_n, jam);
    tape.min2(free, cong)
}

/// Link demand and supply at step `t`, clamped to `[0, q*]`.
pub fn demand_supply(
    tape: &mut Tape,
    fd: &LinkFd,
    up: &impl CountHistory,
    down: &impl CountHistory,
    t: usize,
    dt: f64,
) -> LinkFlowBounds {
    let next = (t + 1) as f64;
    let up_now = up.at(t as i64);
    let down_now = down.at(t as i64);

    let pos = tape.sub(next, fd.ff_steps);
    let arrived = interp(tape, up, pos);
    let sendable = tape.sub(arrived, down_now);
    let rate = tape.div_c(sendable, dt);
    let rate = tape.max2(rate, 0.0);
    let demand = tape.min2(rate, fd.qmax);

    let pos = tape.sub(next, fd.wave_steps);
    let freed = interp(tape, down, pos);
    let room = tape.add(freed, fd.jam_count);
    let room = tape.sub(room, up_now);
    let rate = tape.div_c(room, dt);
    let rate = tape.max2(rate, 0.0);
    let supply = tape.min2(rate, fd.qmax);

    LinkFlowBounds { demand, supply }
}

/// Tolerance (veh/s) for flow-bound assertions in debug builds.
pub const FLOW_TOL: f64 = 1e-6;

/// Advances both boundary curves of a link by one step.
pub fn update_boundaries(
    tape: &mut Tape,
    up: &mut CurveWindow,
    down: &mut CurveWindow,
    bounds: Option<&LinkFlowBounds>,
    f_in: Var,
    f_out: Var,
    dt: f64,
) -> (Var, Var) {
    assert!(
        f_in.value() >= -FLOW_TOL && f_out.value() >= -FLOW_TOL,
        "negative flow (in {}, out {})",
        f_in.value(),
        f_out.value()
    );
    if let Some(b) = bounds {
        debug_assert!(f_in.value() <= b.supply.value() + FLOW_TOL);
        debug_assert!(f_out.value() <= b.demand.value() + FLOW_TOL);
    }
    let n_up = {
        let inc = tape.mul(f_in, dt);
        tape.add(up.current(), inc)
    };
    let n_down = {
        let inc = tape.mul(f_out, dt);
        tape.add(down.current(), inc)
    };
    up.push(n_up);
    down.push(n_down);
    (n_up, n_down)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(vals: &[f64]) -> CumCurve {
        CumCurve {
            values: vals.iter().map(|&v| Var::constant(v)).collect(),
        }
    }

    fn merge_fd(tape: &mut Tape) -> LinkFd {
        LinkFd::from_capacity(
            tape,
            1000.0,
            5.0,
            Var::constant(20.0),
            Var::constant(0.8),
            Var::constant(0.2),
            Var::constant(1.0),
        )
    }

    /// Curve defined for negative steps too, for stationary-state tests.
    struct Shifted {
        offset: i64,
        values: Vec<f64>,
    }

    impl CountHistory for Shifted {
        fn latest(&self) -> usize {
            (self.values.len() as i64 - 1 - self.offset) as usize
        }
        fn at(&self, k: i64) -> Var {
            Var::constant(self.values[(k + self.offset) as usize])
        }
    }

    #[test]
    fn interp_cases() {
        let mut t = Tape::new();
        let c = curve(&[0.0, 1.0, 3.0, 3.0]);
        assert_eq!(interp(&mut t, &c, Var::constant(2.0)).value(), 3.0);
        assert_eq!(interp(&mut t, &c, Var::constant(1.0)).value(), 1.0);
        assert_eq!(interp(&mut t, &c, Var::constant(2.5)).value(), 3.0);
        assert_eq!(interp(&mut t, &c, Var::constant(1.5)).value(), 2.0);
        assert_eq!(interp(&mut t, &c, Var::constant(-0.5)).value(), 0.0);
        assert_eq!(interp(&mut t, &c, Var::constant(7.2)).value(), 3.0);
    }

    #[test]
    fn interp_position_derivative_is_forward_slope() {
        let mut t = Tape::new();
        let c = curve(&[0.0, 1.0, 3.0, 3.0]);
        let p = t.input(1.0);
        let v = interp(&mut t, &c, p);
        assert_eq!(t.backward(v).unwrap().get(p), 2.0);
        let p = t.input(1.0 + 1e-12);
        let v = interp(&mut t, &c, p);
        assert_eq!(t.backward(v).unwrap().get(p), 2.0);
        let p = t.input(3.0);
        let v = interp(&mut t, &c, p);
        assert_eq!(t.backward(v).unwrap().get(p), 0.0);
    }

    #[test]
    fn window_matches_full_curve() {
        let mut w = CurveWindow::new(3);
        let mut full = CumCurve::new();
        for k in 1..20 {
            let v = Var::constant((k * k) as f64);
            w.push(v);
            full.values.push(v);
            for back in 0..=3 {
                let j = k as i64 - back;
                assert_eq!(w.at(j), full.at(j));
            }
        }
    }

    #[test]
    fn derived_wave_speed() {
        let mut t = Tape::new();
        let fd = merge_fd(&mut t);
        assert!((fd.w.value() - 5.0).abs() < 1e-12);
        assert!((fd.ff_steps.value() - 10.0).abs() < 1e-12);
        assert!((fd.wave_steps.value() - 40.0).abs() < 1e-9);
        let alt = LinkFd::from_wave_speed(
            &mut t,
            1000.0,
            5.0,
            Var::constant(20.0),
            Var::constant(5.0),
            Var::constant(0.2),
            Var::constant(1.0),
        );
        assert!((alt.qmax.value() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn empty_link_bounds() {
        let mut t = Tape::new();
        let fd = merge_fd(&mut t);
        let (up, down) = (CurveWindow::new(50), CurveWindow::new(50));
        let b = demand_supply(&mut t, &fd, &up, &down, 0, 5.0);
        assert_eq!(b.demand.value(), 0.0);
        assert_eq!(b.supply.value(), 0.8);
    }

    #[test]
    fn saturated_inflow_gives_capacity_demand() {
        // N_U grows at q* = 0.8 veh/s, link has been loaded for 30 steps while
        // N_D lagged behind by the free-flow travel time.
        let mut t = Tape::new();
        let fd = merge_fd(&mut t);
        let up = curve(&(0..=30).map(|k| 4.0 * k as f64).collect::<Vec<_>>());
        let down = curve(
            &(0..=30)
                .map(|k| 4.0 * (k as f64 - 10.0).max(0.0))
                .collect::<Vec<_>>(),
        );
        let b = demand_supply(&mut t, &fd, &up, &down, 30, 5.0);
        assert!((b.demand.value() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn jam_full_link_has_no_supply() {
        let mut t = Tape::new();
        let fd = merge_fd(&mut t);
        // N_D flat at 10, N_U = N_D + κ d = 210.
        let up = curve(&[210.0; 60]);
        let mut dv = vec![10.0; 60];
        dv[0] = 0.0;
        let mut down = curve(&dv);
        down.values[0] = Var::ZERO;
        let b = demand_supply(&mut t, &fd, &up, &down, 59, 5.0);
        assert_eq!(b.supply.value(), 0.0);
    }

    #[test]
    fn newell_boundaries_and_jam() {
        let mut t = Tape::new();
        let fd = merge_fd(&mut t);
        // Free flow at 0.4 veh/s: N_U(k) = 2k, N_D(k) = 2(k - 10).
        let up = curve(&(0..=100).map(|k| 2.0 * k as f64).collect::<Vec<_>>());
        let down = curve(
            &(0..=100)
                .map(|k| 2.0 * (k as f64 - 10.0).max(0.0))
                .collect::<Vec<_>>(),
        );
        let n0 = newell_count(&mut t, &fd, &up, &down, 100.0, 0.0);
        assert_eq!(n0.value(), 200.0);
        let nd = newell_count(&mut t, &fd, &up, &down, 100.0, 1000.0);
        assert_eq!(nd.value(), 180.0);

        // Stationary jam: both curves flat, N_U = N_D + κ d.
        let up = Shifted {
            offset: 100,
            values: vec![250.0; 201],
        };
        let down = Shifted {
            offset: 100,
            values: vec![50.0; 201],
        };
        let dx = 100.0;
        for i in 0..10 {
            let x0 = i as f64 * dx;
            let a = newell_count(&mut t, &fd, &up, &down, 100.0, x0).value();
            let b = newell_count(&mut t, &fd, &up, &down, 100.0, x0 + dx).value();
            assert!(((a - b) / dx - 0.2).abs() < 1e-12);
        }
    }

    /// Ring of identical links started in a uniform stationary state. Node
    /// transfers are min(demand, supply); the circulating flow must equal the
    /// triangular FD at the initial density.
    fn ring_flow(k: f64) -> f64 {
        let mut tape = Tape::new();
        let fd = merge_fd(&mut tape);
        let n_links = 4;
        let dt = 5.0;
        let q = fd.flow(k);
        let hist = 200i64;
        let steps = 300usize;
        let d = fd.length;
        // Link i upstream boundary is the downstream boundary of link i-1;
        // stationary uniform state: N at the upstream end leads the
        // downstream end by k d.
        let mut ups: Vec<Shifted> = (0..n_links)
            .map(|i| Shifted {
                offset: hist,
                values: (-hist..=0)
                    .map(|s| q * dt * s as f64 + k * d * (n_links - i) as f64)
                    .collect(),
            })
            .collect();
        let mut flows = Vec::new();
        for t in 0..steps as i64 {
            let bounds: Vec<_> = (0..n_links)
                .map(|i| {
                    let down = &ups[(i + 1) % n_links];
                    let down_shift = if i + 1 == n_links {
                        k * d * n_links as f64
                    } else {
                        0.0
                    };
                    let shifted = Shifted {
                        offset: down.offset,
                        values: down.values.iter().map(|v| v - down_shift).collect(),
                    };
                    demand_supply(&mut tape, &fd, &ups[i], &shifted, t as usize, dt)
                })
                .collect();
            let through: Vec<f64> = (0..n_links)
                .map(|i| {
                    bounds[i]
                        .demand
                        .value()
                        .min(bounds[(i + 1) % n_links].supply.value())
                })
                .collect();
            for i in 0..n_links {
                // Boundary i sits between link i-1 and link i.
                let f = through[(i + n_links - 1) % n_links];
                let last = *ups[i].values.last().unwrap();
                ups[i].values.push(last + f * dt);
            }
            flows.push(through[0]);
        }
        *flows.last().unwrap()
    }

    #[test]
    fn ring_reproduces_fundamental_diagram() {
        for k in [0.01, 0.03, 0.04, 0.08, 0.12, 0.18] {
            let mut tape = Tape::new();
            let fd = merge_fd(&mut tape);
            let expected = fd.flow(k);
            let got = ring_flow(k);
            assert!((got - expected).abs() < 1e-9, "k={k}: {got} vs {expected}");
        }
    }
}
