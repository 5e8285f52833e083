//! Truncated-generator evolution, probability currents into ready components,
//! and the stochastic hazard `J/s`.
//!
//! Realized members evolve under the Hermitian restriction of the master
//! Hamiltonian to the realized set. Ready members only accumulate inflow
//! across gaps: their own energies, internal couplings and any coupling out
//! of them are withheld. Dormant and phantom members are frozen.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{ComponentId, CouplingKind, Status, StatusMap, SystemGraph};

/// Hazards are undefined below this active square modulus.
pub const S_FLOOR: f64 = 1e-250;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Local error bound per step, relative to the state scale `sqrt(s)`,
    /// applied per unit step for steps shorter than one time unit.
    pub tol: f64,
    /// Local error bound on the accumulated hazard per step.
    pub quad_tol: f64,
    pub dt_init: f64,
    pub dt_floor: f64,
    pub dt_max: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            tol: 1e-9,
            quad_tol: 1e-9,
            dt_init: 1e-3,
            dt_floor: 1e-12,
            dt_max: 1.0,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tol(tol: f64) -> Self {
        IntegratorConfig {
            tol,
            quad_tol: tol,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.tol > 0.0
            && self.quad_tol > 0.0
            && self.dt_init > 0.0
            && self.dt_floor > 0.0
            && self.dt_max >= self.dt_floor
            && self.dt_init >= self.dt_floor
            && [
                self.tol,
                self.quad_tol,
                self.dt_init,
                self.dt_floor,
                self.dt_max,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "integrator settings must be positive and finite, with dt_floor <= dt_init and dt_floor <= dt_max: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveState {
    pub t: f64,
    pub amp: Vec<Complex64>,
    pub statuses: StatusMap,
    /// Square modulus over realized and ready members.
    pub s_active: f64,
}

impl WaveState {
    /// Launch state of a graph: initial amplitudes with the initial statuses
    /// run through classification.
    pub fn initial(graph: &SystemGraph) -> Result<WaveState> {
        let statuses = crate::hilbert::classify(graph, &graph.initial_statuses())?;
        Ok(WaveState::new(
            graph,
            0.0,
            graph.initial_amplitudes().to_vec(),
            statuses,
        ))
    }

    pub fn new(graph: &SystemGraph, t: f64, amp: Vec<Complex64>, statuses: StatusMap) -> Self {
        let s_active = active_modulus(graph, &amp, &statuses);
        WaveState {
            t,
            amp,
            statuses,
            s_active,
        }
    }

    pub fn refresh_modulus(&mut self, graph: &SystemGraph) {
        self.s_active = active_modulus(graph, &self.amp, &self.statuses);
    }

    pub fn component_modulus(&self, graph: &SystemGraph, id: ComponentId) -> f64 {
        graph.components()[id.0]
            .members
            .iter()
            .map(|&m| self.amp[m].norm_sqr())
            .sum()
    }

    pub fn tag_population(&self, graph: &SystemGraph, tag: &str) -> f64 {
        graph
            .tagged(tag)
            .into_iter()
            .map(|m| self.amp[m].norm_sqr())
            .sum()
    }
}

pub fn active_modulus(graph: &SystemGraph, amp: &[Complex64], statuses: &StatusMap) -> f64 {
    graph
        .components()
        .iter()
        .filter(|c| statuses.get(c.id).is_active())
        .flat_map(|c| c.members.iter())
        .map(|&m| amp[m].norm_sqr())
        .sum()
}

/// One gap term `H[to][from] = value` with `from` realized and `to` ready.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapTerm {
    pub from: usize,
    pub to: usize,
    pub value: Complex64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadyInflow {
    pub component: ComponentId,
    pub members: Vec<usize>,
    pub terms: Vec<GapTerm>,
}

/// The nRule-truncated generator for one stage of a trajectory.
#[derive(Clone, Debug)]
pub struct GeneratorView {
    realized_members: Vec<usize>,
    realized_block: Vec<(usize, usize, Complex64)>,
    inflow: Vec<ReadyInflow>,
    compact: Compact,
}

/// Dense-index form of the generator used by the integrator. Local indices
/// list realized members first, then ready members.
#[derive(Clone, Debug)]
struct Compact {
    active: Vec<usize>,
    rows: Vec<Vec<(usize, Complex64)>>,
    /// Local member indices per ready component, aligned with `inflow`.
    channels: Vec<Vec<usize>>,
}

impl GeneratorView {
    pub fn realized_members(&self) -> &[usize] {
        &self.realized_members
    }

    /// `(row, col, H[row][col])` among realized members, diagonal included.
    pub fn realized_block(&self) -> &[(usize, usize, Complex64)] {
        &self.realized_block
    }

    pub fn inflow(&self) -> &[ReadyInflow] {
        &self.inflow
    }

    pub fn ready_components(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.inflow.iter().map(|r| r.component)
    }

    pub fn has_ready(&self) -> bool {
        !self.inflow.is_empty()
    }

    /// Global indices of realized and ready members (the active set).
    pub fn active(&self) -> &[usize] {
        &self.compact.active
    }

    fn channel(&self, k: ComponentId) -> Result<&ReadyInflow> {
        self.inflow
            .iter()
            .find(|r| r.component == k)
            .ok_or(Error::NotReady(k))
    }

    /// `dy = -i M y` on the compact state; returns the total hazard when
    /// `hazard` is set and zero otherwise.
    fn eval(&self, y: &[Complex64], dy: &mut [Complex64], hazard: bool) -> f64 {
        for (row, out) in self.compact.rows.iter().zip(dy.iter_mut()) {
            let mut z = ZERO;
            for &(col, h) in row {
                z += h * y[col];
            }
            *out = Complex64::new(z.im, -z.re);
        }
        if !hazard || self.compact.channels.is_empty() {
            return 0.0;
        }
        let s: f64 = y.iter().map(|a| a.norm_sqr()).sum();
        if s <= S_FLOOR {
            return 0.0;
        }
        let mut total = 0.0;
        for members in &self.compact.channels {
            let j: f64 = members
                .iter()
                .map(|&m| 2.0 * (y[m].re * dy[m].re + y[m].im * dy[m].im))
                .sum();
            if j > 0.0 {
                total += j;
            }
        }
        total / s
    }
}

pub fn build_generator(graph: &SystemGraph, statuses: &StatusMap) -> Result<GeneratorView> {
    let status_of = |index: usize| graph.owner(index).map(|c| statuses.get(c));

    let mut realized_members = Vec::new();
    let mut ready: Vec<ReadyInflow> = Vec::new();
    for c in graph.components() {
        match statuses.get(c.id) {
            Status::Realized => realized_members.extend(c.members.iter().copied()),
            Status::Ready => ready.push(ReadyInflow {
                component: c.id,
                members: c.members.clone(),
                terms: Vec::new(),
            }),
            _ => {}
        }
    }

    let mut realized_block = Vec::new();
    for &m in &realized_members {
        let e = graph.diag()[m];
        if e != 0.0 {
            realized_block.push((m, m, Complex64::new(e, 0.0)));
        }
    }
    for c in graph.couplings() {
        let (src, dst) = (status_of(c.from), status_of(c.to));
        match c.kind {
            CouplingKind::Continuous => match (src, dst) {
                (Some(Status::Realized), Some(Status::Realized)) => {
                    realized_block.push((c.to, c.from, c.value));
                }
                (Some(Status::Realized), Some(Status::Ready))
                | (Some(Status::Ready), Some(Status::Realized)) => {
                    return Err(Error::ContinuousIntoReady {
                        from: c.from,
                        to: c.to,
                    });
                }
                _ => {}
            },
            CouplingKind::Gap => {
                if src == Some(Status::Realized) && dst == Some(Status::Ready) {
                    let owner = graph.owner(c.to).expect("ready member has an owner");
                    let slot = ready
                        .iter_mut()
                        .find(|r| r.component == owner)
                        .expect("ready component listed");
                    slot.terms.push(GapTerm {
                        from: c.from,
                        to: c.to,
                        value: c.value,
                    });
                }
            }
        }
    }

    let mut active = realized_members.clone();
    for r in &ready {
        active.extend(r.members.iter().copied());
    }
    let mut local = vec![usize::MAX; graph.dim()];
    for (i, &g) in active.iter().enumerate() {
        local[g] = i;
    }
    let mut rows: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); active.len()];
    for &(r, c, h) in &realized_block {
        rows[local[r]].push((local[c], h));
    }
    for r in &ready {
        for t in &r.terms {
            rows[local[t.to]].push((local[t.from], t.value));
        }
    }
    let channels = ready
        .iter()
        .map(|r| r.members.iter().map(|&m| local[m]).collect())
        .collect();

    Ok(GeneratorView {
        realized_members,
        realized_block,
        inflow: ready,
        compact: Compact {
            active,
            rows,
            channels,
        },
    })
}

/// Time derivative of the full amplitude vector under the truncated
/// generator. Entries outside the active set are zero.
pub fn derivative(gen: &GeneratorView, amp: &[Complex64]) -> Vec<Complex64> {
    let minus_i = Complex64::new(0.0, -1.0);
    let mut out = vec![ZERO; amp.len()];
    for &(m, n, h) in &gen.realized_block {
        out[m] += minus_i * h * amp[n];
    }
    for r in &gen.inflow {
        for t in &r.terms {
            out[t.to] += minus_i * t.value * amp[t.from];
        }
    }
    out
}

/// Probability current `J_K = d/dt sum_{m in K} |amp_m|^2` into a ready
/// component.
pub fn gap_current(state: &WaveState, gen: &GeneratorView, k: ComponentId) -> Result<f64> {
    let channel = gen.channel(k)?;
    Ok(current_of(channel, &state.amp))
}

fn current_of(channel: &ReadyInflow, amp: &[Complex64]) -> f64 {
    channel
        .terms
        .iter()
        .map(|t| 2.0 * (amp[t.to].conj() * t.value * amp[t.from]).im)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hazard {
    pub total: f64,
    pub per_component: BTreeMap<ComponentId, f64>,
    /// Clamped currents `max(J_K, 0)`.
    pub currents: BTreeMap<ComponentId, f64>,
    pub s_active: f64,
}

pub fn hazard(state: &WaveState, gen: &GeneratorView) -> Result<Hazard> {
    let s: f64 = gen.active().iter().map(|&m| state.amp[m].norm_sqr()).sum();
    if s <= S_FLOOR || !s.is_finite() {
        return Err(Error::DegenerateState(s));
    }
    let mut per_component = BTreeMap::new();
    let mut currents = BTreeMap::new();
    let mut total = 0.0;
    for channel in &gen.inflow {
        let j = current_of(channel, &state.amp).max(0.0);
        let lambda = j / s;
        total += lambda;
        per_component.insert(channel.component, lambda);
        currents.insert(channel.component, j);
    }
    Ok(Hazard {
        total,
        per_component,
        currents,
        s_active: s,
    })
}

/// Advances `state` by `dt` under `gen`. `dt = 0` returns the state unchanged.
pub fn step(
    state: &WaveState,
    gen: &GeneratorView,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<WaveState> {
    if !(dt >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "dt must be >= 0, got {dt}"
        )));
    }
    let mut out = state.clone();
    if dt == 0.0 {
        return Ok(out);
    }
    let mut integrator = Integrator::new(*cfg)?;
    integrator.advance(gen, &mut out, state.t + dt, None, &mut NoObserver)?;
    let s: f64 = gen.active().iter().map(|&m| out.amp[m].norm_sqr()).sum();
    out.s_active = s;
    Ok(out)
}

/// Accumulated hazard of the current stage against its exponential threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitClock {
    pub threshold: f64,
    pub accumulated: f64,
}

impl HitClock {
    pub fn new(threshold: f64) -> Self {
        HitClock {
            threshold,
            accumulated: 0.0,
        }
    }
}

/// Receives integrator output. Samples are evaluated at exact requested times
/// inside accepted steps and do not alter the step sequence.
pub trait Observer {
    fn next_sample_time(&self) -> Option<f64> {
        None
    }
    fn sample(&mut self, _t: f64, _amp: &[Complex64]) {}
    fn wants_nodes(&self) -> bool {
        false
    }
    fn node(&mut self, _t: f64, _amp: &[Complex64]) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Relative precision of hit-time localization.
pub const HIT_REL_PRECISION: f64 = 1e-6;

// Dormand-Prince 5(4) tableau; the stage times are not needed for an
// autonomous system.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand-Prince integrator for the compact truncated system with
/// an optional hazard quadrature carried as an extra real component.
pub struct Integrator {
    cfg: IntegratorConfig,
    h: f64,
    k: [Vec<Complex64>; 7],
    lam: [f64; 7],
    ytmp: Vec<Complex64>,
    ynew: Vec<Complex64>,
    full: Vec<Complex64>,
}

/// Result of a single unchecked trial step of size `h` from `y0`.
struct Trial {
    lam_inc: f64,
    err_amp: f64,
    err_lam: f64,
}

/// Pre-collapse state at a located hit.
#[derive(Clone, Debug, PartialEq)]
pub struct HitLocation {
    pub t: f64,
    /// Accumulated hazard at the bracket's left end and hit time.
    pub bracket: (f64, f64),
}

impl Integrator {
    pub fn new(cfg: IntegratorConfig) -> Result<Self> {
        cfg.check()?;
        Ok(Integrator {
            cfg,
            h: cfg.dt_init,
            k: Default::default(),
            lam: [0.0; 7],
            ytmp: Vec::new(),
            ynew: Vec::new(),
            full: Vec::new(),
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    /// Starts a new stage: the step-size guess returns to `dt_init`.
    pub fn reset(&mut self) {
        self.h = self.cfg.dt_init;
    }

    fn resize(&mut self, n: usize) {
        for k in &mut self.k {
            k.resize(n, ZERO);
        }
        self.ytmp.resize(n, ZERO);
        self.ynew.resize(n, ZERO);
    }

    /// One step of size `h` from `y0` (with `k[0]`, `lam[0]` already set),
    /// writing the result to `ynew` and the end derivative to `k[6]`.
    #[allow(clippy::needless_range_loop)]
    fn trial(&mut self, gen: &GeneratorView, y0: &[Complex64], h: f64, hazard: bool) -> Trial {
        let n = y0.len();
        for s in 1..7 {
            for i in 0..n {
                let mut acc = ZERO;
                for (j, &a) in A[s].iter().enumerate().take(s) {
                    if a != 0.0 {
                        acc += self.k[j][i] * a;
                    }
                }
                self.ytmp[i] = y0[i] + acc * h;
            }
            self.lam[s] = gen.eval(&self.ytmp, &mut self.k[s], hazard);
            if s == 6 {
                self.ynew.copy_from_slice(&self.ytmp);
            }
        }
        let mut err_amp: f64 = 0.0;
        for i in 0..n {
            let mut e = ZERO;
            for (j, &w) in E.iter().enumerate() {
                if w != 0.0 {
                    e += self.k[j][i] * w;
                }
            }
            err_amp = err_amp.max((e * h).norm());
        }
        let lam_inc = h * A[6]
            .iter()
            .zip(self.lam.iter())
            .map(|(&b, &l)| b * l)
            .sum::<f64>();
        let err_lam = (h * E
            .iter()
            .zip(self.lam.iter())
            .map(|(&w, &l)| w * l)
            .sum::<f64>())
        .abs();
        Trial {
            lam_inc,
            err_amp,
            err_lam,
        }
    }

    fn gather(gen: &GeneratorView, amp: &[Complex64]) -> Vec<Complex64> {
        gen.active().iter().map(|&m| amp[m]).collect()
    }

    fn scatter(gen: &GeneratorView, y: &[Complex64], amp: &mut [Complex64]) {
        for (&m, &v) in gen.active().iter().zip(y) {
            amp[m] = v;
        }
    }

    /// Evaluates the state `tau` past a step start by a fresh single step.
    fn substep(
        &mut self,
        gen: &GeneratorView,
        y0: &[Complex64],
        k0: &[Complex64],
        lam0: f64,
        tau: f64,
        hazard: bool,
    ) -> f64 {
        self.k[0].copy_from_slice(k0);
        self.lam[0] = lam0;
        self.trial(gen, y0, tau, hazard).lam_inc
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_samples(
        &mut self,
        gen: &GeneratorView,
        obs: &mut dyn Observer,
        base: &[Complex64],
        y0: &[Complex64],
        k0: &[Complex64],
        lam0: f64,
        t0: f64,
        t_upto: f64,
        hazard: bool,
    ) {
        while let Some(ts) = obs.next_sample_time() {
            if ts > t_upto || ts < t0 {
                break;
            }
            let tau = ts - t0;
            if tau > 0.0 {
                self.substep(gen, y0, k0, lam0, tau, hazard);
                self.full.clear();
                self.full.extend_from_slice(base);
                let ynew = std::mem::take(&mut self.ynew);
                Self::scatter(gen, &ynew, &mut self.full);
                self.ynew = ynew;
            } else {
                self.full.clear();
                self.full.extend_from_slice(base);
                Self::scatter(gen, y0, &mut self.full);
            }
            let full = std::mem::take(&mut self.full);
            obs.sample(ts, &full);
            self.full = full;
        }
    }

    /// Integrates `state` to `t_end`, or until the hit clock crosses its
    /// threshold. On a hit, `state` is left at the located hit time and the
    /// location is returned.
    pub fn advance(
        &mut self,
        gen: &GeneratorView,
        state: &mut WaveState,
        t_end: f64,
        mut clock: Option<&mut HitClock>,
        obs: &mut dyn Observer,
    ) -> Result<Option<HitLocation>> {
        let hazard = clock.is_some() && gen.has_ready();
        let mut y = Self::gather(gen, &state.amp);
        let n = y.len();
        self.resize(n);
        let base = state.amp.clone();
        let mut t = state.t;

        if n == 0 {
            self.emit_samples(gen, obs, &base, &y, &[], 0.0, t, t_end, false);
            state.t = t_end.max(t);
            return Ok(None);
        }

        let mut k0 = vec![ZERO; n];
        let mut lam0 = gen.eval(&y, &mut k0, hazard);
        let tol = self.cfg.tol;
        let qtol = self.cfg.quad_tol;

        while t < t_end {
            let remaining = t_end - t;
            let mut h = self.h.min(self.cfg.dt_max);
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            let scale = y
                .iter()
                .map(|a| a.norm_sqr())
                .sum::<f64>()
                .sqrt()
                .max(1e-300);

            self.k[0].copy_from_slice(&k0);
            self.lam[0] = lam0;
            let trial = self.trial(gen, &y, h, hazard);
            let unit = h.min(1.0);
            let mut err = trial.err_amp / (tol * scale * unit);
            if hazard {
                err = err.max(trial.err_lam / (qtol * unit));
            }
            if !err.is_finite() {
                err = f64::INFINITY;
            }

            if err > 1.0 {
                let factor = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                let next = h * factor;
                if next < self.cfg.dt_floor {
                    return Err(Error::StepUnderflow {
                        t,
                        h: next,
                        floor: self.cfg.dt_floor,
                    });
                }
                self.h = next;
                continue;
            }

            let t_next = if last { t_end } else { t + h };
            let clock_hit = match clock.as_deref() {
                Some(c) if hazard => c.accumulated + trial.lam_inc >= c.threshold,
                _ => false,
            };

            if clock_hit {
                let c = clock.as_deref_mut().expect("clock checked");
                let lam_start = c.accumulated;
                // bisection on the step offset; Λ(lo) < Θ <= Λ(hi)
                let mut lo = 0.0;
                let mut hi = h;
                let mut lam_hi = lam_start + trial.lam_inc;
                let y_step = y.clone();
                for _ in 0..200 {
                    if hi - lo <= HIT_REL_PRECISION * (t + hi) {
                        break;
                    }
                    let mid = lo + 0.5 * (hi - lo);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    let inc = self.substep(gen, &y_step, &k0, lam0, mid, true);
                    if lam_start + inc >= c.threshold {
                        hi = mid;
                        lam_hi = lam_start + inc;
                    } else {
                        lo = mid;
                    }
                }
                let t_hit = if hi == h { t_next } else { t + hi };
                self.emit_samples(gen, obs, &base, &y_step, &k0, lam0, t, t_hit, true);
                self.substep(gen, &y_step, &k0, lam0, hi, true);
                y.copy_from_slice(&self.ynew);
                c.accumulated = lam_hi;
                Self::scatter(gen, &y, &mut state.amp);
                state.t = t_hit;
                state.s_active = y.iter().map(|a| a.norm_sqr()).sum();
                if obs.wants_nodes() {
                    obs.node(t_hit, &state.amp);
                }
                return Ok(Some(HitLocation {
                    t: t_hit,
                    bracket: (lam_start, lam_hi),
                }));
            }

            if obs.next_sample_time().is_some_and(|ts| ts <= t_next) {
                let y_step = y.clone();
                let ynew = self.ynew.clone();
                let k6 = self.k[6].clone();
                let lam6 = self.lam[6];
                self.emit_samples(gen, obs, &base, &y_step, &k0, lam0, t, t_next, hazard);
                self.ynew = ynew;
                self.k[6] = k6;
                self.lam[6] = lam6;
            }

            y.copy_from_slice(&self.ynew);
            k0.copy_from_slice(&self.k[6]);
            lam0 = self.lam[6];
            if let Some(c) = clock.as_deref_mut() {
                c.accumulated += trial.lam_inc;
            }
            t = t_next;

            if obs.wants_nodes() {
                self.full.clear();
                self.full.extend_from_slice(&base);
                Self::scatter(gen, &y, &mut self.full);
                let full = std::mem::take(&mut self.full);
                obs.node(t, &full);
                self.full = full;
            }

            let grow = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if !last {
                self.h = (h * grow).min(self.cfg.dt_max);
            }
        }

        Self::scatter(gen, &y, &mut state.amp);
        state.t = t_end;
        state.s_active = y.iter().map(|a| a.norm_sqr()).sum();
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{GraphBuilder, Status};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn single_gap(g: f64) -> SystemGraph {
        let mut b = GraphBuilder::new();
        let s0 = b.state("psi·d0", &[]);
        let s1 = b.state("d1", &[]);
        b.component("psi d0", &[s0], Status::Realized);
        b.component("d1", &[s1], Status::Dormant);
        b.gap(s0, s1, c(g));
        b.amplitude(s0, c(1.0));
        b.build().unwrap()
    }

    fn rabi_pair(g: f64) -> SystemGraph {
        let mut b = GraphBuilder::new();
        let s0 = b.state("a0", &[]);
        let s1 = b.state("a1", &[]);
        b.component("rabi", &[s0, s1], Status::Realized);
        b.hopping(s0, s1, c(g));
        b.amplitude(s0, c(1.0));
        b.build().unwrap()
    }

    /// Rabi pair with an emission gap off the excited member.
    fn rabi_with_gap(g: f64, gamma: f64) -> SystemGraph {
        let mut b = GraphBuilder::new();
        let s0 = b.state("a0", &[]);
        let s1 = b.state("a1", &[]);
        let s2 = b.state("a0·γ", &[]);
        b.component("rabi", &[s0, s1], Status::Realized);
        b.component("emitted", &[s2], Status::Dormant);
        b.hopping(s0, s1, c(g));
        b.gap(s1, s2, c(gamma));
        b.amplitude(s0, c(1.0));
        b.build().unwrap()
    }

    fn setup(graph: &SystemGraph) -> (WaveState, GeneratorView) {
        let state = WaveState::initial(graph).unwrap();
        let gen = build_generator(graph, &state.statuses).unwrap();
        (state, gen)
    }

    #[test]
    fn generator_for_single_gap() {
        let g = single_gap(1.0);
        let (_, gen) = setup(&g);
        assert_eq!(gen.realized_members(), &[0]);
        assert!(gen.realized_block().is_empty());
        assert_eq!(gen.inflow().len(), 1);
        assert_eq!(gen.inflow()[0].component, ComponentId(1));
        assert_eq!(
            gen.inflow()[0].terms,
            vec![GapTerm {
                from: 0,
                to: 1,
                value: c(1.0)
            }]
        );
    }

    #[test]
    fn generator_rejects_continuous_into_ready() {
        let mut b = GraphBuilder::new();
        let s0 = b.state("a", &[]);
        let s1 = b.state("b", &[]);
        b.component("A", &[s0], Status::Realized);
        b.component("B", &[s1], Status::Ready);
        b.hopping(s0, s1, c(1.0));
        let g = b.build().unwrap();
        let st = g.initial_statuses();
        assert!(matches!(
            build_generator(&g, &st),
            Err(Error::ContinuousIntoReady { .. })
        ));
    }

    #[test]
    fn generator_without_couplings_is_diagonal() {
        let mut b = GraphBuilder::new();
        let s0 = b.state("a", &[]);
        b.component("A", &[s0], Status::Realized);
        b.energy(s0, 2.0);
        b.amplitude(s0, c(1.0));
        let g = b.build().unwrap();
        let (_, gen) = setup(&g);
        assert!(gen.inflow().is_empty());
        assert_eq!(gen.realized_block(), &[(0, 0, c(2.0))]);
    }

    #[test]
    fn derivative_examples() {
        let g = single_gap(1.0);
        let (state, gen) = setup(&g);
        let d = derivative(&gen, &state.amp);
        assert_eq!(d, vec![c(0.0), Complex64::new(0.0, -1.0)]);

        let g = rabi_pair(0.7);
        let (state, gen) = setup(&g);
        let d = derivative(&gen, &state.amp);
        assert_abs_diff_eq!(d[0].norm(), 0.0);
        assert_abs_diff_eq!((d[1] - Complex64::new(0.0, -0.7)).norm(), 0.0);

        let zero = vec![c(0.0); 2];
        assert_eq!(derivative(&gen, &zero), zero);
    }

    #[test]
    fn ready_amplitudes_never_feed_realized_derivatives() {
        let g = rabi_with_gap(1.0, 0.5);
        let (mut state, gen) = setup(&g);
        state.amp[1] = Complex64::new(0.3, -0.2);
        let before = derivative(&gen, &state.amp);
        state.amp[2] = Complex64::new(17.0, 5.0);
        let after = derivative(&gen, &state.amp);
        assert_eq!(before[0].re.to_bits(), after[0].re.to_bits());
        assert_eq!(before[0].im.to_bits(), after[0].im.to_bits());
        assert_eq!(before[1].re.to_bits(), after[1].re.to_bits());
        assert_eq!(before[1].im.to_bits(), after[1].im.to_bits());
    }

    #[test]
    fn step_rabi_quarter_period() {
        let g = rabi_pair(1.0);
        let (state, gen) = setup(&g);
        let out = step(&state, &gen, PI / 2.0, &IntegratorConfig::default()).unwrap();
        assert_abs_diff_eq!(out.amp[0].norm(), 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out.amp[1].norm(), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out.t, PI / 2.0);
    }

    #[test]
    fn step_single_gap_closed_form() {
        let g = single_gap(1.0);
        let (state, gen) = setup(&g);
        let out = step(&state, &gen, 1.0, &IntegratorConfig::default()).unwrap();
        assert_abs_diff_eq!(out.amp[1].norm_sqr(), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out.s_active, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn step_zero_is_identity() {
        let g = rabi_pair(1.0);
        let (state, gen) = setup(&g);
        let out = step(&state, &gen, 0.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn unitary_subcase_conserves_norm() {
        let g = rabi_pair(1.3);
        let (state, gen) = setup(&g);
        let cfg = IntegratorConfig::default();
        let t = 40.0;
        let out = step(&state, &gen, t, &cfg).unwrap();
        assert!((out.s_active - state.s_active).abs() < cfg.tol * t);
    }

    #[test]
    fn step_underflow_is_reported() {
        let g = rabi_pair(1.0);
        let (state, gen) = setup(&g);
        let cfg = IntegratorConfig {
            tol: 1e-30,
            quad_tol: 1e-30,
            dt_floor: 1e-3,
            ..IntegratorConfig::default()
        };
        assert!(matches!(
            step(&state, &gen, 1.0, &cfg),
            Err(Error::StepUnderflow { .. })
        ));
    }

    #[test]
    fn gap_current_examples() {
        let g = single_gap(1.0);
        let (mut state, gen) = setup(&g);
        assert_eq!(gap_current(&state, &gen, ComponentId(1)).unwrap(), 0.0);
        state.amp[1] = Complex64::new(0.0, -1.0);
        assert_abs_diff_eq!(gap_current(&state, &gen, ComponentId(1)).unwrap(), 2.0);
        assert!(matches!(
            gap_current(&state, &gen, ComponentId(0)),
            Err(Error::NotReady(_))
        ));

        let g = single_gap(0.0);
        let (state, gen) = setup(&g);
        let out = step(&state, &gen, 3.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(gap_current(&out, &gen, ComponentId(1)).unwrap(), 0.0);
    }

    #[test]
    fn hazard_examples() {
        let g = single_gap(1.0);
        let (mut state, gen) = setup(&g);
        state.amp[1] = Complex64::new(0.0, -1.0);
        let h = hazard(&state, &gen).unwrap();
        assert_abs_diff_eq!(h.s_active, 2.0);
        assert_abs_diff_eq!(h.total, 1.0);

        let mut scaled = state.clone();
        for a in &mut scaled.amp {
            *a *= 10.0;
        }
        let hs = hazard(&scaled, &gen).unwrap();
        assert_abs_diff_eq!(hs.total, h.total, epsilon = 1e-15);

        let g = rabi_pair(1.0);
        let (state, gen) = setup(&g);
        assert_eq!(hazard(&state, &gen).unwrap().total, 0.0);

        let mut dead = state.clone();
        dead.amp = vec![c(0.0); 2];
        assert!(matches!(
            hazard(&dead, &gen),
            Err(Error::DegenerateState(_))
        ));
    }

    #[test]
    fn hazard_excludes_phantom_modulus() {
        let mut b = GraphBuilder::new();
        let s0 = b.state("old", &[]);
        let s1 = b.state("now", &[]);
        let s2 = b.state("next", &[]);
        b.component("old", &[s0], Status::Phantom);
        b.component("now", &[s1], Status::Realized);
        b.component("next", &[s2], Status::Dormant);
        b.gap(s0, s1, c(1.0));
        b.gap(s1, s2, c(1.0));
        let g = b.build().unwrap();
        let statuses = crate::hilbert::classify(&g, &g.initial_statuses()).unwrap();
        let amp = vec![c(100.0), c(1.0), Complex64::new(0.0, -1.0)];
        let state = WaveState::new(&g, 1.0, amp, statuses);
        let gen = build_generator(&g, &state.statuses).unwrap();
        assert_abs_diff_eq!(state.s_active, 2.0);
        assert_abs_diff_eq!(hazard(&state, &gen).unwrap().total, 1.0);
    }

    #[test]
    fn current_integrates_to_ready_modulus() {
        let g = rabi_with_gap(1.0, 0.4);
        let (state, gen) = setup(&g);
        let cfg = IntegratorConfig::with_tol(1e-11);
        // trapezoid-free check: Simpson on a fine grid of J(t)
        let n = 400;
        let t_end = 3.0;
        let dt = t_end / n as f64;
        let mut js = Vec::with_capacity(n + 1);
        let mut s = state.clone();
        js.push(gap_current(&s, &gen, ComponentId(1)).unwrap());
        for _ in 0..n {
            s = step(&s, &gen, dt, &cfg).unwrap();
            js.push(gap_current(&s, &gen, ComponentId(1)).unwrap());
        }
        let simpson: f64 = (0..n / 2)
            .map(|i| dt / 3.0 * (js[2 * i] + 4.0 * js[2 * i + 1] + js[2 * i + 2]))
            .sum();
        let ready = s.component_modulus(&g, ComponentId(1));
        assert_abs_diff_eq!(simpson, ready, epsilon = 10.0 * 1e-9);
    }

    struct Recorder {
        times: Vec<f64>,
        next: usize,
        got: Vec<(f64, Vec<Complex64>)>,
    }

    impl Observer for Recorder {
        fn next_sample_time(&self) -> Option<f64> {
            self.times.get(self.next).copied()
        }
        fn sample(&mut self, t: f64, amp: &[Complex64]) {
            self.next += 1;
            self.got.push((t, amp.to_vec()));
        }
    }

    #[test]
    fn samples_do_not_perturb_the_step_sequence() {
        let g = rabi_pair(1.0);
        let (state, gen) = setup(&g);
        let cfg = IntegratorConfig::default();
        let mut plain = state.clone();
        Integrator::new(cfg)
            .unwrap()
            .advance(&gen, &mut plain, 5.0, None, &mut NoObserver)
            .unwrap();
        let mut sampled = state.clone();
        let mut rec = Recorder {
            times: (0..=10).map(|i| 0.5 * i as f64).collect(),
            next: 0,
            got: Vec::new(),
        };
        Integrator::new(cfg)
            .unwrap()
            .advance(&gen, &mut sampled, 5.0, None, &mut rec)
            .unwrap();
        assert_eq!(plain.amp, sampled.amp);
        assert_eq!(rec.got.len(), 11);
        for (t, amp) in &rec.got {
            assert_abs_diff_eq!(amp[1].norm_sqr(), t.sin().powi(2), epsilon = 1e-8);
        }
    }
}
