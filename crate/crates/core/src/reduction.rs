//! Stochastic trigger, collapse onto the chosen launch component, relaunch of
//! the next solution, and complete single trajectories.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    build_generator, hazard, GeneratorView, HitClock, Integrator, IntegratorConfig, Observer,
    WaveState,
};
use crate::error::{Error, Result};
use crate::hilbert::{classify, ComponentId, Status, StatusMap, SystemGraph};

/// Launch amplitudes are normalized to unit `s` and snapped to this grid so
/// that any rescaling of the input launches the same trajectory.
pub const LAUNCH_GRID: f64 = 1.0 / (1u64 << 32) as f64;

/// Per-trial generator: the ChaCha stream `trial` under key `master_seed`.
pub fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollapsePolicy {
    /// Non-chosen components are set to zero.
    #[default]
    #[serde(rename = "zero")]
    ZeroNonChosen,
    /// Non-chosen components are frozen as phantoms.
    #[serde(rename = "phantom")]
    KeepPhantoms,
}

impl std::str::FromStr for CollapsePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(CollapsePolicy::ZeroNonChosen),
            "phantom" => Ok(CollapsePolicy::KeepPhantoms),
            other => Err(Error::InvalidParameter(format!(
                "policy must be `zero` or `phantom`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for CollapsePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CollapsePolicy::ZeroNonChosen => "zero",
            CollapsePolicy::KeepPhantoms => "phantom",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticEvent {
    pub t_sc: f64,
    pub chosen: ComponentId,
    pub lambda_at_hit: f64,
    /// `max(J_K, 0)` per ready component at the hit.
    pub channel_weights: BTreeMap<ComponentId, f64>,
    pub s_before: f64,
    pub s_after: f64,
}

/// A located hit before collapse.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub t_sc: f64,
    pub chosen: ComponentId,
    pub lambda_total: f64,
    pub per_component: BTreeMap<ComponentId, f64>,
    pub weights: BTreeMap<ComponentId, f64>,
    pub s_before: f64,
    pub threshold: f64,
}

/// Picks a channel with probability `lambda_K / lambda_total` for a uniform
/// draw `u` in `[0, 1)`. When every rate vanishes at the located time the
/// ready square moduli, the time-integrated currents, are used instead.
pub fn choose_channel(
    state: &WaveState,
    graph: &SystemGraph,
    per_component: &BTreeMap<ComponentId, f64>,
    u: f64,
) -> Result<ComponentId> {
    let total: f64 = per_component.values().sum();
    let weights: Vec<(ComponentId, f64)> = if total > 0.0 {
        per_component.iter().map(|(&k, &l)| (k, l)).collect()
    } else {
        per_component
            .keys()
            .map(|&k| (k, state.component_modulus(graph, k)))
            .collect()
    };
    let sum: f64 = weights.iter().map(|(_, w)| w).sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateState(sum));
    }
    let target = u * sum;
    let mut acc = 0.0;
    for &(k, w) in &weights {
        acc += w;
        if target < acc {
            return Ok(k);
        }
    }
    // u * sum rounded up to the last cumulative value
    Ok(weights
        .iter()
        .rev()
        .find(|(_, w)| *w > 0.0)
        .map(|&(k, _)| k)
        .expect("positive sum has a positive weight"))
}

fn draw_threshold<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -u.ln()
}

/// Inhomogeneous Poisson first passage of the hazard from `state.t` up to
/// `t_max`. On `None` the state has been evolved to `t_max`; otherwise it sits
/// at the hit time, uncollapsed.
pub fn sample_hit<R: Rng + ?Sized>(
    state: &mut WaveState,
    graph: &SystemGraph,
    gen: &GeneratorView,
    rng: &mut R,
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<Option<Hit>> {
    let mut integrator = Integrator::new(*cfg)?;
    stage_hit(
        state,
        graph,
        gen,
        rng,
        t_max,
        &mut integrator,
        &mut crate::dynamics::NoObserver,
    )
}

fn stage_hit<R: Rng + ?Sized>(
    state: &mut WaveState,
    graph: &SystemGraph,
    gen: &GeneratorView,
    rng: &mut R,
    t_max: f64,
    integrator: &mut Integrator,
    obs: &mut dyn Observer,
) -> Result<Option<Hit>> {
    if !(t_max > state.t) {
        return Err(Error::InvalidParameter(format!(
            "t_max = {t_max} must exceed the state time {}",
            state.t
        )));
    }
    let threshold = draw_threshold(rng);
    let u: f64 = rng.random();
    let mut clock = HitClock::new(threshold);
    integrator.reset();
    let Some(_loc) = integrator.advance(gen, state, t_max, Some(&mut clock), obs)? else {
        return Ok(None);
    };
    let hz = hazard(state, gen)?;
    let chosen = choose_channel(state, graph, &hz.per_component, u)?;
    Ok(Some(Hit {
        t_sc: state.t,
        chosen,
        lambda_total: hz.total,
        per_component: hz.per_component,
        weights: hz.currents,
        s_before: hz.s_active,
        threshold,
    }))
}

/// The chosen ready component becomes realized with its accumulated
/// amplitudes; every other active component becomes a phantom. Amplitudes are
/// never renormalized.
pub fn collapse(
    state: &WaveState,
    graph: &SystemGraph,
    chosen: ComponentId,
    policy: CollapsePolicy,
) -> Result<WaveState> {
    graph.component(chosen)?;
    if state.statuses.get(chosen) != Status::Ready {
        return Err(Error::NotReady(chosen));
    }
    let mut statuses = state.statuses.clone();
    let mut amp = state.amp.clone();
    for (id, s) in state.statuses.iter() {
        if id == chosen {
            statuses.set(id, Status::Realized);
        } else if s.is_active() {
            statuses.set(id, Status::Phantom);
            if policy == CollapsePolicy::ZeroNonChosen {
                for &m in &graph.components()[id.0].members {
                    amp[m] = Complex64::new(0.0, 0.0);
                }
            }
        }
    }
    Ok(WaveState::new(graph, state.t, amp, statuses))
}

/// Promotes the components beyond the new realized component and builds the
/// next truncated generator.
pub fn relaunch(graph: &SystemGraph, state: &WaveState) -> Result<(StatusMap, GeneratorView)> {
    let statuses = classify(graph, &state.statuses)?;
    let gen = build_generator(graph, &statuses)?;
    Ok((statuses, gen))
}

/// Initial state with amplitudes normalized to unit `s` and snapped to
/// [`LAUNCH_GRID`].
pub fn canonical_launch(graph: &SystemGraph) -> Result<WaveState> {
    let raw = WaveState::initial(graph)?;
    let s = raw.s_active;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::DegenerateState(s));
    }
    let norm = s.sqrt();
    let snap = |x: f64| (x / norm / LAUNCH_GRID).round() * LAUNCH_GRID;
    let amp = raw
        .amp
        .iter()
        .map(|a| Complex64::new(snap(a.re), snap(a.im)))
        .collect();
    let state = WaveState::new(graph, 0.0, amp, raw.statuses);
    if !(state.s_active > 0.0) {
        return Err(Error::DegenerateState(state.s_active));
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    /// `|amp|^2` per basis state.
    pub populations: Vec<f64>,
}

impl Sample {
    pub fn component_moduli(&self, graph: &SystemGraph) -> Vec<f64> {
        graph
            .components()
            .iter()
            .map(|c| c.members.iter().map(|&m| self.populations[m]).sum())
            .collect()
    }

    pub fn tag_population(&self, graph: &SystemGraph, tag: &str) -> f64 {
        graph.tagged(tag).iter().map(|&m| self.populations[m]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub scenario: String,
    pub seed: u64,
    pub trial: u64,
    pub events: Vec<StochasticEvent>,
    pub terminal_statuses: StatusMap,
    pub samples: Vec<Sample>,
    /// True when the trajectory ended with no ready component left.
    pub complete: bool,
    pub t_end: f64,
    pub s_initial: f64,
    pub s_final: f64,
    /// Basis states with nonzero amplitude in realized components at the end.
    pub terminal_support: Vec<usize>,
    /// Peak population per watched tag in each stage, sampled at integrator
    /// nodes and at the hit; stage `i` precedes event `i`.
    pub stage_tag_peaks: Vec<BTreeMap<String, f64>>,
}

impl TrajectoryRecord {
    pub fn chosen(&self) -> Vec<ComponentId> {
        self.events.iter().map(|e| e.chosen).collect()
    }
}

/// Outcome key: the chosen component labels in order.
pub fn outcome_signature(graph: &SystemGraph, chosen: &[ComponentId]) -> String {
    if chosen.is_empty() {
        return NO_EVENTS.to_string();
    }
    chosen
        .iter()
        .map(|k| graph.components()[k.0].label.as_str())
        .collect::<Vec<_>>()
        .join(" > ")
}

/// Signature of a trajectory without events.
pub const NO_EVENTS: &str = "(none)";

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryConfig {
    pub t_max: f64,
    pub policy: CollapsePolicy,
    pub integrator: IntegratorConfig,
    pub sample_every: Option<f64>,
    pub watch_tags: Vec<String>,
    pub max_events: usize,
}

impl TrajectoryConfig {
    pub fn new(t_max: f64) -> Self {
        TrajectoryConfig {
            t_max,
            policy: CollapsePolicy::default(),
            integrator: IntegratorConfig::default(),
            sample_every: None,
            watch_tags: Vec::new(),
            max_events: 10_000,
        }
    }
}

struct TrajectoryObserver<'a> {
    every: Option<f64>,
    next_index: u64,
    t_max: f64,
    samples: Vec<Sample>,
    watch: Vec<(&'a str, Vec<usize>)>,
    peaks: BTreeMap<String, f64>,
}

impl TrajectoryObserver<'_> {
    fn record_peaks(&mut self, amp: &[Complex64]) {
        for (tag, members) in &self.watch {
            let p: f64 = members.iter().map(|&m| amp[m].norm_sqr()).sum();
            let slot = self.peaks.entry(tag.to_string()).or_insert(0.0);
            if p > *slot {
                *slot = p;
            }
        }
    }

    fn take_peaks(&mut self) -> BTreeMap<String, f64> {
        let fresh = self
            .watch
            .iter()
            .map(|(t, _)| (t.to_string(), 0.0))
            .collect();
        std::mem::replace(&mut self.peaks, fresh)
    }
}

impl Observer for TrajectoryObserver<'_> {
    fn next_sample_time(&self) -> Option<f64> {
        let every = self.every?;
        let t = self.next_index as f64 * every;
        (t <= self.t_max).then_some(t)
    }

    fn sample(&mut self, t: f64, amp: &[Complex64]) {
        self.next_index += 1;
        self.samples.push(Sample {
            t,
            populations: amp.iter().map(|a| a.norm_sqr()).collect(),
        });
    }

    fn wants_nodes(&self) -> bool {
        !self.watch.is_empty()
    }

    fn node(&mut self, _t: f64, amp: &[Complex64]) {
        self.record_peaks(amp);
    }
}

/// Alternates evolution, hit sampling, collapse and relaunch until no ready
/// component remains or `t_max` is reached.
pub fn run_trajectory<R: Rng + ?Sized>(
    graph: &SystemGraph,
    scenario: &str,
    rng: &mut R,
    cfg: &TrajectoryConfig,
) -> Result<TrajectoryRecord> {
    if !(cfg.t_max > 0.0) || !cfg.t_max.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "t_max must be positive and finite, got {}",
            cfg.t_max
        )));
    }
    if let Some(every) = cfg.sample_every {
        if !(every > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sample interval must be positive, got {every}"
            )));
        }
    }
    let mut integrator = Integrator::new(cfg.integrator)?;
    let mut state = canonical_launch(graph)?;
    let s_initial = state.s_active;

    let watch = cfg
        .watch_tags
        .iter()
        .map(|t| (t.as_str(), graph.tagged(t)))
        .collect();
    let mut obs = TrajectoryObserver {
        every: cfg.sample_every,
        next_index: 0,
        t_max: cfg.t_max,
        samples: Vec::new(),
        watch,
        peaks: BTreeMap::new(),
    };
    obs.take_peaks();

    let mut events: Vec<StochasticEvent> = Vec::new();
    let mut stage_tag_peaks = Vec::new();
    let mut complete = false;
    let mut gen = build_generator(graph, &state.statuses)?;

    loop {
        obs.record_peaks(&state.amp);
        if !gen.has_ready() {
            complete = true;
            if cfg.sample_every.is_some() && state.t < cfg.t_max {
                integrator.reset();
                integrator.advance(&gen, &mut state, cfg.t_max, None, &mut obs)?;
            }
            break;
        }
        if state.t >= cfg.t_max || events.len() >= cfg.max_events {
            break;
        }
        let Some(hit) = stage_hit(
            &mut state,
            graph,
            &gen,
            rng,
            cfg.t_max,
            &mut integrator,
            &mut obs,
        )?
        else {
            break;
        };
        obs.record_peaks(&state.amp);
        stage_tag_peaks.push(obs.take_peaks());

        let collapsed = collapse(&state, graph, hit.chosen, cfg.policy)?;
        let (statuses, next_gen) = relaunch(graph, &collapsed)?;
        events.push(StochasticEvent {
            t_sc: hit.t_sc,
            chosen: hit.chosen,
            lambda_at_hit: hit.lambda_total,
            channel_weights: hit.weights,
            s_before: hit.s_before,
            s_after: collapsed.s_active,
        });
        state = collapsed;
        state.statuses = statuses;
        gen = next_gen;
    }
    stage_tag_peaks.push(obs.take_peaks());

    let terminal_support = graph
        .components()
        .iter()
        .filter(|c| state.statuses.get(c.id) == Status::Realized)
        .flat_map(|c| c.members.iter().copied())
        .filter(|&m| state.amp[m].norm_sqr() > 0.0)
        .collect();
    let s_final = gen.active().iter().map(|&m| state.amp[m].norm_sqr()).sum();

    Ok(TrajectoryRecord {
        scenario: scenario.to_string(),
        seed: 0,
        trial: 0,
        events,
        terminal_statuses: state.statuses,
        samples: obs.samples,
        complete,
        t_end: state.t,
        s_initial,
        s_final,
        terminal_support,
        stage_tag_peaks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventLogHeader {
    pub scenario: String,
    pub seed: u64,
    pub tol: f64,
    pub policy: CollapsePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct EventLogLine {
    pub t: f64,
    pub chosen: ComponentId,
    pub lambda: f64,
    pub s_before: f64,
    pub s_after: f64,
    pub weights: BTreeMap<ComponentId, f64>,
}

impl From<&StochasticEvent> for EventLogLine {
    fn from(e: &StochasticEvent) -> Self {
        EventLogLine {
            t: e.t_sc,
            chosen: e.chosen,
            lambda: e.lambda_at_hit,
            s_before: e.s_before,
            s_after: e.s_after,
            weights: e.channel_weights.clone(),
        }
    }
}

/// JSON-lines event log: a header line, then one line per event.
pub fn event_log(record: &TrajectoryRecord, tol: f64, policy: CollapsePolicy) -> String {
    let header = EventLogHeader {
        scenario: record.scenario.clone(),
        seed: record.seed,
        tol,
        policy,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for e in &record.events {
        out.push_str(&serde_json::to_string(&EventLogLine::from(e)).expect("event serializes"));
        out.push('\n');
    }
    out
}

/// Parses a log written by [`event_log`].
pub fn parse_event_log(text: &str) -> Result<(EventLogHeader, Vec<EventLogLine>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty event log".into()))?;
    let header: EventLogHeader = serde_json::from_str(header)?;
    let events = lines
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::GraphBuilder;
    use approx::assert_abs_diff_eq;

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

    fn diamond(gr: f64, gl: f64) -> SystemGraph {
        let mut b = GraphBuilder::new();
        let s: Vec<usize> = ["A0", "A_r", "A_l", "A_f"]
            .iter()
            .map(|l| b.state(*l, &[]))
            .collect();
        b.component("A0", &[s[0]], Status::Realized);
        b.component("A_r", &[s[1]], Status::Dormant);
        b.component("A_l", &[s[2]], Status::Dormant);
        b.component("A_f", &[s[3]], Status::Dormant);
        b.gap(s[0], s[1], c(gr));
        b.gap(s[0], s[2], c(gl));
        b.gap(s[1], s[3], c(1.0));
        b.gap(s[2], s[3], c(1.0));
        b.amplitude(s[0], c(1.0));
        b.build().unwrap()
    }

    #[test]
    fn single_gap_survival_matches_closed_form() {
        let g = single_gap(1.0);
        let cfg = IntegratorConfig::default();
        let n = 4000;
        let mut hit_times = Vec::with_capacity(n);
        let mut rng = trial_rng(7, 0);
        for _ in 0..n {
            let mut state = WaveState::initial(&g).unwrap();
            let gen = build_generator(&g, &state.statuses).unwrap();
            if let Some(hit) = sample_hit(&mut state, &g, &gen, &mut rng, 50.0, &cfg).unwrap() {
                assert_eq!(hit.chosen, ComponentId(1));
                hit_times.push(hit.t_sc);
            }
        }
        // S(t) = 1 / (1 + t^2): median 1, and P(t <= 3) = 0.9
        let below_one = hit_times.iter().filter(|&&t| t <= 1.0).count() as f64 / n as f64;
        let below_three = hit_times.iter().filter(|&&t| t <= 3.0).count() as f64 / n as f64;
        let sd = (0.25 / n as f64).sqrt();
        assert!((below_one - 0.5).abs() < 4.0 * sd, "{below_one}");
        assert!((below_three - 0.9).abs() < 4.0 * (0.09 / n as f64).sqrt());
    }

    #[test]
    fn threshold_matches_integrated_hazard_at_hit() {
        // Λ(t) = ln(1 + t^2) for the unit gap: the hit time solves Λ = Θ
        let g = single_gap(1.0);
        let cfg = IntegratorConfig::default();
        let mut rng = trial_rng(3, 1);
        for _ in 0..50 {
            let mut state = WaveState::initial(&g).unwrap();
            let gen = build_generator(&g, &state.statuses).unwrap();
            let hit = sample_hit(&mut state, &g, &gen, &mut rng, 1e4, &cfg)
                .unwrap()
                .unwrap();
            let expected = (hit.threshold.exp() - 1.0).sqrt();
            assert!(
                (hit.t_sc - expected).abs() <= 2e-6 * expected.max(1e-3),
                "{} vs {expected}",
                hit.t_sc
            );
            // hazard at the hit: 2t / (1 + t^2)
            let t = hit.t_sc;
            assert_abs_diff_eq!(hit.lambda_total, 2.0 * t / (1.0 + t * t), epsilon = 1e-6);
            assert_abs_diff_eq!(hit.s_before, 1.0 + t * t, epsilon = 1e-6 * (1.0 + t * t));
        }
    }

    #[test]
    fn no_ready_current_means_no_hit() {
        let g = single_gap(0.0);
        let cfg = IntegratorConfig::default();
        let mut rng = trial_rng(1, 0);
        let mut state = WaveState::initial(&g).unwrap();
        let gen = build_generator(&g, &state.statuses).unwrap();
        let hit = sample_hit(&mut state, &g, &gen, &mut rng, 20.0, &cfg).unwrap();
        assert!(hit.is_none());
        assert_eq!(state.t, 20.0);
    }

    #[test]
    fn channel_choice_follows_rate_ratio() {
        let g = diamond(1.0, 2.0);
        let cfg = IntegratorConfig::default();
        let n = 4000;
        let mut right = 0;
        let mut rng = trial_rng(11, 0);
        for _ in 0..n {
            let mut state = WaveState::initial(&g).unwrap();
            let gen = build_generator(&g, &state.statuses).unwrap();
            let hit = sample_hit(&mut state, &g, &gen, &mut rng, 200.0, &cfg)
                .unwrap()
                .unwrap();
            if hit.chosen == ComponentId(1) {
                right += 1;
            }
            // constant ratio lambda_r : lambda_l = 1 : 4
            let r = hit.per_component[&ComponentId(1)];
            let l = hit.per_component[&ComponentId(2)];
            assert_abs_diff_eq!(r / (r + l), 0.2, epsilon = 1e-9);
        }
        let f = right as f64 / n as f64;
        assert!((f - 0.2).abs() < 4.0 * (0.16 / n as f64).sqrt(), "{f}");
    }

    #[test]
    fn choose_channel_falls_back_to_moduli() {
        let g = diamond(1.0, 2.0);
        let mut state = WaveState::initial(&g).unwrap();
        state.amp[1] = c(0.1);
        state.amp[2] = c(0.3);
        let zero: BTreeMap<_, _> = [(ComponentId(1), 0.0), (ComponentId(2), 0.0)].into();
        assert_eq!(
            choose_channel(&state, &g, &zero, 0.05).unwrap(),
            ComponentId(1)
        );
        assert_eq!(
            choose_channel(&state, &g, &zero, 0.5).unwrap(),
            ComponentId(2)
        );
    }

    #[test]
    fn collapse_keeps_launch_amplitudes() {
        let g = diamond(1.0, 2.0);
        let mut state = WaveState::initial(&g).unwrap();
        state.amp[1] = Complex64::new(0.0, -0.4);
        state.amp[2] = Complex64::new(0.0, -0.8);
        state.refresh_modulus(&g);

        let out = collapse(&state, &g, ComponentId(1), CollapsePolicy::ZeroNonChosen).unwrap();
        assert_eq!(out.amp[1], state.amp[1]);
        assert_eq!(out.amp[0], c(0.0));
        assert_eq!(out.amp[2], c(0.0));
        assert_eq!(
            out.statuses.as_slice(),
            &[
                Status::Phantom,
                Status::Realized,
                Status::Phantom,
                Status::Dormant
            ]
        );
        assert_abs_diff_eq!(out.s_active, 0.16, epsilon = 1e-15);

        let kept = collapse(&state, &g, ComponentId(1), CollapsePolicy::KeepPhantoms).unwrap();
        assert_eq!(kept.amp, state.amp);
        assert_eq!(kept.statuses, out.statuses);
        assert_eq!(kept.s_active, out.s_active);

        assert!(matches!(
            collapse(&state, &g, ComponentId(0), CollapsePolicy::ZeroNonChosen),
            Err(Error::NotReady(_))
        ));

        let (statuses, gen) = relaunch(&g, &out).unwrap();
        assert_eq!(
            statuses.as_slice(),
            &[
                Status::Phantom,
                Status::Realized,
                Status::Phantom,
                Status::Ready
            ]
        );
        assert_eq!(gen.ready_components().collect::<Vec<_>>(), [ComponentId(3)]);
    }

    #[test]
    fn relaunch_after_terminal_component_has_no_ready() {
        let g = single_gap(1.0);
        let mut state = WaveState::initial(&g).unwrap();
        state.amp[1] = Complex64::new(0.0, -1.0);
        let out = collapse(&state, &g, ComponentId(1), CollapsePolicy::ZeroNonChosen).unwrap();
        let (_, gen) = relaunch(&g, &out).unwrap();
        assert!(!gen.has_ready());
    }

    #[test]
    fn diamond_trajectories_take_one_path() {
        let g = diamond(1.0, 2.0);
        let cfg = TrajectoryConfig::new(1e4);
        for trial in 0..200 {
            let mut rng = trial_rng(5, trial);
            let rec = run_trajectory(&g, "diamond", &mut rng, &cfg).unwrap();
            assert!(rec.complete);
            let chosen = rec.chosen();
            assert_eq!(chosen.len(), 2);
            assert!(chosen[0] == ComponentId(1) || chosen[0] == ComponentId(2));
            assert_eq!(chosen[1], ComponentId(3));
            assert!(rec.events[0].t_sc < rec.events[1].t_sc);
            assert_eq!(rec.terminal_support, vec![3]);
        }
    }

    #[test]
    fn trajectories_are_deterministic_and_policy_independent() {
        let g = diamond(1.0, 2.0);
        let zero = TrajectoryConfig::new(50.0);
        let phantom = TrajectoryConfig {
            policy: CollapsePolicy::KeepPhantoms,
            ..zero.clone()
        };
        for trial in 0..20 {
            let a = run_trajectory(&g, "d", &mut trial_rng(9, trial), &zero).unwrap();
            let b = run_trajectory(&g, "d", &mut trial_rng(9, trial), &zero).unwrap();
            let p = run_trajectory(&g, "d", &mut trial_rng(9, trial), &phantom).unwrap();
            assert_eq!(a, b);
            assert_eq!(
                event_log(&a, 1e-9, CollapsePolicy::ZeroNonChosen),
                event_log(&p, 1e-9, CollapsePolicy::ZeroNonChosen)
            );
        }
    }

    #[test]
    fn launch_is_scale_free() {
        let g = diamond(1.0, 2.0);
        let a = canonical_launch(&g).unwrap();
        let b = canonical_launch(&g.with_scaled_amplitudes(c(10.0))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.s_active, 1.0);
    }

    #[test]
    fn event_log_round_trips() {
        let g = diamond(1.0, 2.0);
        let rec =
            run_trajectory(&g, "d", &mut trial_rng(2, 0), &TrajectoryConfig::new(50.0)).unwrap();
        let text = event_log(&rec, 1e-9, CollapsePolicy::KeepPhantoms);
        let (header, lines) = parse_event_log(&text).unwrap();
        assert_eq!(header.policy, CollapsePolicy::KeepPhantoms);
        assert_eq!(lines.len(), rec.events.len());
        assert_eq!(lines[0].t.to_bits(), rec.events[0].t_sc.to_bits());
        let first = text.lines().nth(1).unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(
            keys,
            ["chosen", "lambda", "sAfter", "sBefore", "t", "weights"]
        );
    }

    #[test]
    fn samples_cover_the_run() {
        let g = single_gap(1.0);
        let cfg = TrajectoryConfig {
            sample_every: Some(0.25),
            ..TrajectoryConfig::new(4.0)
        };
        let rec = run_trajectory(&g, "s", &mut trial_rng(1, 0), &cfg).unwrap();
        assert_eq!(rec.samples.len(), 17);
        for (i, s) in rec.samples.iter().enumerate() {
            assert_eq!(s.t, 0.25 * i as f64);
        }
    }
}
