//! Tape-based automatic differentiation.
//!
//! Every differentiable quantity in the simulator is a [`Var`]: a value plus a
//! handle into an append-only [`Tape`]. Elementary operations append one entry
//! holding the result value, the parent handles and the local partial
//! derivatives evaluated at record time. A single reverse sweep
//! ([`Tape::backward`]) then yields the adjoint of every entry, and a forward
//! sweep ([`Tape::jvp`]) yields a directional derivative.
//!
//! Values that do not depend on any registered input are *constants*. They
//! carry no tape entry, and operations whose parents are all constants are
//! evaluated without recording anything. A simulation with no registered
//! parameters therefore runs as plain floating-point code.
//!
//! Kinks follow a fixed subgradient convention: at an exact tie, `min2` and
//! `max2` pass the full derivative to their first argument.

use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

/// Guard used by [`Tape::divg`] when none is supplied explicitly (vehicles).
pub const DEFAULT_GUARD: f64 = 1e-9;

const CONST_IDX: u32 = u32::MAX;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("variable belongs to tape {found}, expected tape {expected}")]
    ForeignVar { expected: u32, found: u32 },
    #[error("operation has {parents} parents but {partials} partials")]
    ArityMismatch { parents: usize, partials: usize },
    #[error("division by zero")]
    DivisionByZero,
    #[error("logarithm of non-positive value {0}")]
    LogDomain(f64),
    #[error("non-finite adjoint at tape entry {index} ({op})")]
    NonFiniteAdjoint { index: usize, op: Op },
}

/// Elementary operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Min,
    Max,
    Relu,
    Exp,
    Log,
    Select,
    Lerp,
    Sum,
    Custom,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A scalar value, optionally tracked on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Var {
    tape: u32,
    idx: u32,
    value: f64,
}

impl Var {
    /// An untracked constant.
    pub const fn constant(value: f64) -> Self {
        Var {
            tape: 0,
            idx: CONST_IDX,
            value,
        }
    }

    pub const ZERO: Var = Var::constant(0.0);

    #[inline]
    pub fn value(&self) -> f64 {
        self.value
    }

    #[inline]
    pub fn is_const(&self) -> bool {
        self.idx == CONST_IDX
    }

    /// Tape index, `None` for constants.
    pub fn id(&self) -> Option<usize> {
        (!self.is_const()).then_some(self.idx as usize)
    }
}

impl From<f64> for Var {
    fn from(v: f64) -> Self {
        Var::constant(v)
    }
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    tape: u32,
    values: Vec<f64>,
}

impl Adjoints {
    /// Adjoint of `v`; constants and foreign variables have adjoint zero.
    pub fn get(&self, v: Var) -> f64 {
        if v.is_const() || v.tape != self.tape {
            return 0.0;
        }
        self.values.get(v.idx as usize).copied().unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Append-only record of elementary operations.
#[derive(Debug, Clone)]
pub struct Tape {
    id: u32,
    ops: Vec<Op>,
    values: Vec<f64>,
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    inputs: Vec<u32>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    /// Pre-sizes storage for roughly `entries` operations.
    pub fn with_capacity(entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(entries + 1);
        offsets.push(0);
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            ops: Vec::with_capacity(entries),
            values: Vec::with_capacity(entries),
            offsets,
            parents: Vec::with_capacity(entries * 2),
            partials: Vec::with_capacity(entries * 2),
            inputs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registered inputs, in registration order.
    pub fn inputs(&self) -> impl Iterator<Item = Var> + '_ {
        self.inputs.iter().map(move |&i| Var {
            tape: self.id,
            idx: i,
            value: self.values[i as usize],
        })
    }

    pub fn op(&self, v: Var) -> Option<Op> {
        v.id().map(|i| self.ops[i])
    }

    /// Parent handles of a recorded entry (constant parents are not stored).
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.entry(v)
            .map(|(s, e)| {
                self.parents[s..e]
                    .iter()
                    .map(|&p| Var {
                        tape: self.id,
                        idx: p,
                        value: self.values[p as usize],
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Local partials of a recorded entry, aligned with [`Tape::parents`].
    pub fn partials(&self, v: Var) -> &[f64] {
        match self.entry(v) {
            Some((s, e)) => &self.partials[s..e],
            None => &[],
        }
    }

    fn entry(&self, v: Var) -> Option<(usize, usize)> {
        if v.is_const() || v.tape != self.id {
            return None;
        }
        let i = v.idx as usize;
        Some((self.offsets[i] as usize, self.offsets[i + 1] as usize))
    }

    /// Registers a differentiable input.
    pub fn input(&mut self, value: f64) -> Var {
        let v = self.push(Op::Input, value, std::iter::empty());
        self.inputs.push(v.idx);
        v
    }

    /// Records an arbitrary operation. Constant parents are dropped; if every
    /// parent is constant the result is a constant as well.
    pub fn record(
        &mut self,
        op: Op,
        parents: &[Var],
        value: f64,
        partials: &[f64],
    ) -> Result<Var, AdError> {
        if parents.len() != partials.len() {
            return Err(AdError::ArityMismatch {
                parents: parents.len(),
                partials: partials.len(),
            });
        }
        for p in parents {
            self.check(*p)?;
        }
        if parents.iter().all(Var::is_const) {
            return Ok(Var::constant(value));
        }
        Ok(self.push(
            op,
            value,
            parents
                .iter()
                .zip(partials)
                .filter(|(p, _)| !p.is_const())
                .map(|(p, d)| (p.idx, *d)),
        ))
    }

    fn check(&self, v: Var) -> Result<(), AdError> {
        if v.is_const() || v.tape == self.id {
            Ok(())
        } else {
            Err(AdError::ForeignVar {
                expected: self.id,
                found: v.tape,
            })
        }
    }

    #[inline]
    fn push(&mut self, op: Op, value: f64, edges: impl Iterator<Item = (u32, f64)>) -> Var {
        let idx = self.values.len() as u32;
        for (p, d) in edges {
            self.parents.push(p);
            self.partials.push(d);
        }
        self.ops.push(op);
        self.values.push(value);
        self.offsets.push(self.parents.len() as u32);
        Var {
            tape: self.id,
            idx,
            value,
        }
    }

    #[inline]
    fn unary(&mut self, op: Op, a: Var, value: f64, da: f64) -> Var {
        if a.is_const() {
            return Var::constant(value);
        }
        self.assert_own(a);
        self.push(op, value, std::iter::once((a.idx, da)))
    }

    #[inline]
    fn binary(&mut self, op: Op, a: Var, b: Var, value: f64, da: f64, db: f64) -> Var {
        match (a.is_const(), b.is_const()) {
            (true, true) => Var::constant(value),
            (false, true) => {
                self.assert_own(a);
                self.push(op, value, std::iter::once((a.idx, da)))
            }
            (true, false) => {
                self.assert_own(b);
                self.push(op, value, std::iter::once((b.idx, db)))
            }
            (false, false) => {
                self.assert_own(a);
                self.assert_own(b);
                self.push(op, value, [(a.idx, da), (b.idx, db)].into_iter())
            }
        }
    }

    #[inline]
    fn assert_own(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
    }

    pub fn add(&mut self, a: impl Into<Var>, b: impl Into<Var>) -> Var {
        let (a, b) = (a.into(), b.into());
        self.binary(Op::Add, a, b, a.value + b.value, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: impl Into<Var>, b: impl Into<Var>) -> Var {
        let (a, b) = (a.into(), b.into());
        self.binary(Op::Sub, a, b, a.value - b.value, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: impl Into<Var>, b: impl Into<Var>) -> Var {
        let (a, b) = (a.into(), b.into());
        self.binary(Op::Mul, a, b, a.value * b.value, b.value, a.value)
    }

    pub fn neg(&mut self, a: impl Into<Var>) -> Var {
        let a = a.into();
        self.unary(Op::Neg, a, -a.value, -1.0)
    }

    /// `a / b`; fails on an exactly zero denominator.
    pub fn div(&mut self, a: impl Into<Var>, b: impl Into<Var>) -> Result<Var, AdError> {
        let (a, b) = (a.into(), b.into());
        if b.value == 0.0 {
            return Err(AdError::DivisionByZero);
        }
        Ok(self.div_unchecked(a, b))
    }

    fn div_unchecked(&mut self, a: Var, b: Var) -> Var {
        let inv = 1.0 / b.value;
        let value = a.value / b.value;
        self.binary(Op::Div, a, b, value, inv, -value * inv)
    }

    /// Guarded division `a / max(b, eps)`.
    pub fn divg(&mut self, a: impl Into<Var>, b: impl Into<Var>, eps: f64) -> Var {
        let (a, b) = (a.into(), b.into());
        let den = self.max2(b, eps);
        self.div_unchecked(a, den)
    }

    /// Division by a nonzero constant.
    pub fn div_c(&mut self, a: impl Into<Var>, c: f64) -> Var {
        let a = a.into();
        self.unary(Op::Div, a, a.value / c, 1.0 / c)
    }

    pub fn min2(&mut self, a: impl Into<Var>, b: impl Into<Var>) -> Var {
        let (a, b) = (a.into(), b.into());
        if a.value <= b.value {
            self.binary(Op::Min, a, b, a.value, 1.0, 0.0)
        } else {
            self.binary(Op::Min, a, b, b.value, 0.0, 1.0)
        }
    }

    pub fn max2(&mut self, a: impl Into<Var>, b: impl Into<Var>) -> Var {
        let (a, b) = (a.into(), b.into());
        if a.value >= b.value {
            self.binary(Op::Max, a, b, a.value, 1.0, 0.0)
        } else {
            self.binary(Op::Max, a, b, b.value, 0.0, 1.0)
        }
    }

    pub fn relu(&mut self, a: impl Into<Var>) -> Var {
        let a = a.into();
        if a.value >= 0.0 {
            self.unary(Op::Relu, a, a.value, 1.0)
        } else {
            self.unary(Op::Relu, a, 0.0, 0.0)
        }
    }

    pub fn exp(&mut self, a: impl Into<Var>) -> Var {
        let a = a.into();
        let e = a.value.exp();
        self.unary(Op::Exp, a, e, e)
    }

    pub fn log(&mut self, a: impl Into<Var>) -> Result<Var, AdError> {
        let a = a.into();
        if a.value <= 0.0 || a.value.is_nan() {
            return Err(AdError::LogDomain(a.value));
        }
        Ok(self.unary(Op::Log, a, a.value.ln(), 1.0 / a.value))
    }

    /// `if cond { then } else { otherwise }` with a zero partial for the
    /// inactive branch. The condition is treated as piecewise constant.
    pub fn select(&mut self, cond: bool, then: impl Into<Var>, otherwise: impl Into<Var>) -> Var {
        let (a, b) = (then.into(), otherwise.into());
        if cond {
            self.binary(Op::Select, a, b, a.value, 1.0, 0.0)
        } else {
            self.binary(Op::Select, a, b, b.value, 0.0, 1.0)
        }
    }

    /// `a + t·(b − a)`.
    pub fn lerp(&mut self, a: impl Into<Var>, b: impl Into<Var>, t: impl Into<Var>) -> Var {
        let (a, b, t) = (a.into(), b.into(), t.into());
        let value = a.value + t.value * (b.value - a.value);
        let ps = [(a, 1.0 - t.value), (b, t.value), (t, b.value - a.value)];
        if ps.iter().all(|(v, _)| v.is_const()) {
            return Var::constant(value);
        }
        for (v, _) in &ps {
            if !v.is_const() {
                self.assert_own(*v);
            }
        }
        self.push(
            Op::Lerp,
            value,
            ps.into_iter()
                .filter(|(v, _)| !v.is_const())
                .map(|(v, d)| (v.idx, d)),
        )
    }

    /// Linear interpolation between grid samples `lo` (at `base`) and `hi`
    /// (at `base + 1`) at the fractional position `pos`. Differentiable with
    /// respect to both samples and the position itself.
    pub fn interp(&mut self, lo: Var, hi: Var, pos: Var, base: f64) -> Var {
        let frac = pos.value - base;
        let slope = hi.value - lo.value;
        let value = lo.value + frac * slope;
        let ps = [(lo, 1.0 - frac), (hi, frac), (pos, slope)];
        if ps.iter().all(|(v, _)| v.is_const()) {
            return Var::constant(value);
        }
        for (v, _) in &ps {
            if !v.is_const() {
                self.assert_own(*v);
            }
        }
        self.push(
            Op::Lerp,
            value,
            ps.into_iter()
                .filter(|(v, _)| !v.is_const())
                .map(|(v, d)| (v.idx, d)),
        )
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let value: f64 = terms.iter().map(|v| v.value).sum();
        if terms.iter().all(Var::is_const) {
            return Var::constant(value);
        }
        for v in terms.iter().filter(|v| !v.is_const()) {
            self.assert_own(*v);
        }
        self.push(
            Op::Sum,
            value,
            terms.iter().filter(|v| !v.is_const()).map(|v| (v.idx, 1.0)),
        )
    }

    /// `Σ c_i · v_i`.
    pub fn dot_c(&mut self, terms: &[Var], coeffs: &[f64]) -> Var {
        debug_assert_eq!(terms.len(), coeffs.len());
        let value: f64 = terms.iter().zip(coeffs).map(|(v, c)| v.value * c).sum();
        if terms.iter().all(Var::is_const) {
            return Var::constant(value);
        }
        self.push(
            Op::Sum,
            value,
            terms
                .iter()
                .zip(coeffs)
                .filter(|(v, _)| !v.is_const())
                .map(|(v, c)| (v.idx, *c)),
        )
    }

    pub fn square(&mut self, a: impl Into<Var>) -> Var {
        let a = a.into();
        self.unary(Op::Mul, a, a.value * a.value, 2.0 * a.value)
    }

    /// Reverse sweep from `output`.
    pub fn backward(&self, output: Var) -> Result<Adjoints, AdError> {
        self.check(output)?;
        let mut adj = vec![0.0; self.len()];
        if output.is_const() {
            return Ok(Adjoints {
                tape: self.id,
                values: adj,
            });
        }
        let top = output.idx as usize;
        adj[top] = 1.0;
        for i in (0..=top).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
            for k in s..e {
                adj[self.parents[k] as usize] += a * self.partials[k];
            }
        }
        Ok(Adjoints {
            tape: self.id,
            values: adj,
        })
    }

    /// Like [`Tape::backward`], but reports the first entry (in sweep order)
    /// whose adjoint became non-finite.
    pub fn backward_checked(&self, output: Var) -> Result<Adjoints, AdError> {
        let adj = self.backward(output)?;
        if let Some(i) = adj
            .values
            .iter()
            .enumerate()
            .rev()
            .find(|(_, a)| !a.is_finite())
            .map(|(i, _)| i)
        {
            return Err(AdError::NonFiniteAdjoint {
                index: i,
                op: self.ops[i],
            });
        }
        Ok(adj)
    }

    /// Directional derivative of `output` along `direction` (forward sweep).
    pub fn jvp(&self, output: Var, direction: &[(Var, f64)]) -> Result<f64, AdError> {
        self.check(output)?;
        if output.is_const() {
            return Ok(0.0);
        }
        let top = output.idx as usize;
        let mut tangent = vec![0.0; top + 1];
        for (v, d) in direction {
            self.check(*v)?;
            if let Some(i) = v.id() {
                if i <= top {
                    tangent[i] += d;
                }
            }
        }
        for i in 0..=top {
            let (s, e) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
            let mut t = tangent[i];
            for k in s..e {
                t += self.partials[k] * tangent[self.parents[k] as usize];
            }
            tangent[i] = t;
        }
        Ok(tangent[top])
    }

    /// First recorded entry with a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, Op)> {
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i, self.ops[i]))
    }
}
