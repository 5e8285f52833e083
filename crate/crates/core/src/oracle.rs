//! Independent references for the trajectory engine.
//!
//! Nothing here uses the Runge-Kutta integrator. Full unitary evolution and
//! the truncated stage propagator both diagonalize the relevant Hermitian
//! block once and evaluate the exact exponential at any time.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{classify, ComponentId, CouplingKind, Status, StatusMap, SystemGraph};
use crate::reduction::{canonical_launch, outcome_signature};
use crate::scenarios::ScenarioSpec;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OracleKind {
    Unitary,
    RaceQuadrature,
    ClosedForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: f64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OracleResult {
    pub mode: OracleKind,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<SeriesPoint>,
    pub error_estimate: f64,
}

/// `exp(-i H t)` for a Hermitian `H` through its eigendecomposition.
#[derive(Clone, Debug)]
pub struct Spectral {
    energies: DVector<f64>,
    vectors: DMatrix<Complex64>,
}

impl Spectral {
    pub fn new(h: DMatrix<Complex64>) -> Result<Self> {
        let n = h.nrows();
        if n == 0 {
            return Ok(Spectral {
                energies: DVector::zeros(0),
                vectors: DMatrix::zeros(0, 0),
            });
        }
        let eig = SymmetricEigen::try_new(h, 1e-15, 10_000)
            .ok_or_else(|| Error::Eigen(format!("no convergence for a {n}x{n} block")))?;
        Ok(Spectral {
            energies: eig.eigenvalues,
            vectors: eig.eigenvectors,
        })
    }

    pub fn energies(&self) -> &DVector<f64> {
        &self.energies
    }

    /// Coordinates of `a` in the eigenbasis.
    pub fn project(&self, a: &DVector<Complex64>) -> DVector<Complex64> {
        self.vectors.adjoint() * a
    }

    pub fn evolve_projected(&self, c: &DVector<Complex64>, t: f64) -> DVector<Complex64> {
        let phased = DVector::from_iterator(
            c.len(),
            c.iter()
                .zip(self.energies.iter())
                .map(|(&ci, &e)| ci * Complex64::from_polar(1.0, -e * t)),
        );
        &self.vectors * phased
    }

    pub fn evolve(&self, a: &DVector<Complex64>, t: f64) -> DVector<Complex64> {
        self.evolve_projected(&self.project(a), t)
    }
}

/// The full master Hamiltonian, no truncation.
pub fn master_matrix(graph: &SystemGraph) -> DMatrix<Complex64> {
    let n = graph.dim();
    let mut h = DMatrix::from_element(n, n, ZERO);
    for (r, c, v) in graph.master_entries() {
        h[(r, c)] = v;
    }
    h
}

/// Full unitary propagator of a graph, reusable across times.
#[derive(Clone, Debug)]
pub struct Unitary {
    spectral: Spectral,
    c0: DVector<Complex64>,
}

impl Unitary {
    pub fn new(graph: &SystemGraph) -> Result<Self> {
        let spectral = Spectral::new(master_matrix(graph))?;
        let a0 = DVector::from_column_slice(graph.initial_amplitudes());
        let c0 = spectral.project(&a0);
        Ok(Unitary { spectral, c0 })
    }

    pub fn at(&self, t: f64) -> Vec<Complex64> {
        self.spectral
            .evolve_projected(&self.c0, t)
            .iter()
            .copied()
            .collect()
    }
}

/// Amplitudes at time `t` under the full Hermitian master Hamiltonian.
pub fn unitary_evolve(graph: &SystemGraph, t: f64) -> Result<Vec<Complex64>> {
    Ok(Unitary::new(graph)?.at(t))
}

/// `int_0^t exp(-i e tau) dtau`.
fn phase_integral(e: f64, t: f64) -> Complex64 {
    let x = e * t;
    let half = 0.5 * x;
    let sinc = if half.abs() < 1e-6 {
        1.0 - half * half / 6.0
    } else {
        half.sin() / half
    };
    Complex64::from_polar(t * sinc, -half)
}

/// One truncated stage solved exactly: realized members evolve under their
/// own block, ready members integrate the gap inflow.
#[derive(Clone, Debug)]
pub struct Stage {
    realized: Vec<usize>,
    ready_members: Vec<usize>,
    channels: Vec<(ComponentId, Vec<usize>)>,
    spectral: Spectral,
    c0: DVector<Complex64>,
    gv: DMatrix<Complex64>,
    ready0: DVector<Complex64>,
    realized_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePoint {
    pub s: f64,
    pub total: f64,
}

impl Stage {
    /// `statuses` must already be classified.
    pub fn new(graph: &SystemGraph, statuses: &StatusMap, amp: &[Complex64]) -> Result<Self> {
        let status_of = |m: usize| graph.owner(m).map(|k| statuses.get(k));
        let mut realized = Vec::new();
        let mut channels = Vec::new();
        let mut ready_members = Vec::new();
        for comp in graph.components() {
            match statuses.get(comp.id) {
                Status::Realized => realized.extend_from_slice(&comp.members),
                Status::Ready => {
                    let start = ready_members.len();
                    ready_members.extend_from_slice(&comp.members);
                    channels.push((comp.id, (start..ready_members.len()).collect()));
                }
                _ => {}
            }
        }
        if realized.is_empty() {
            return Err(Error::NoRealized);
        }
        let r_index: BTreeMap<usize, usize> =
            realized.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        let q_index: BTreeMap<usize, usize> = ready_members
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, i))
            .collect();

        let nr = realized.len();
        let mut h = DMatrix::from_element(nr, nr, ZERO);
        for (i, &m) in realized.iter().enumerate() {
            h[(i, i)] = Complex64::new(graph.diag()[m], 0.0);
        }
        let mut g = DMatrix::from_element(ready_members.len(), nr, ZERO);
        for c in graph.couplings() {
            let (from, to) = (status_of(c.from), status_of(c.to));
            match c.kind {
                CouplingKind::Continuous => {
                    if let (Some(&i), Some(&j)) = (r_index.get(&c.to), r_index.get(&c.from)) {
                        h[(i, j)] += c.value;
                    } else if matches!(
                        (from, to),
                        (Some(Status::Realized), Some(Status::Ready))
                            | (Some(Status::Ready), Some(Status::Realized))
                    ) {
                        return Err(Error::ContinuousIntoReady {
                            from: c.from,
                            to: c.to,
                        });
                    }
                }
                CouplingKind::Gap => {
                    if let (Some(&q), Some(&j)) = (q_index.get(&c.to), r_index.get(&c.from)) {
                        g[(q, j)] += c.value;
                    }
                }
            }
        }
        let spectral = Spectral::new(h)?;
        let a_r0 = DVector::from_iterator(nr, realized.iter().map(|&m| amp[m]));
        let realized_norm = a_r0.norm_squared();
        let c0 = spectral.project(&a_r0);
        let gv = &g * &spectral.vectors;
        let ready0 =
            DVector::from_iterator(ready_members.len(), ready_members.iter().map(|&m| amp[m]));
        Ok(Stage {
            realized,
            ready_members,
            channels,
            spectral,
            c0,
            gv,
            ready0,
            realized_norm,
        })
    }

    pub fn channels(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.channels.iter().map(|(k, _)| *k)
    }

    fn ready_at(&self, t: f64) -> (DVector<Complex64>, DVector<Complex64>) {
        let phased = DVector::from_iterator(
            self.c0.len(),
            self.c0
                .iter()
                .zip(self.spectral.energies.iter())
                .map(|(&c, &e)| c * Complex64::from_polar(1.0, -e * t)),
        );
        let integ = DVector::from_iterator(
            self.c0.len(),
            self.c0
                .iter()
                .zip(self.spectral.energies.iter())
                .map(|(&c, &e)| c * phase_integral(e, t)),
        );
        let ready = &self.ready0 - (&self.gv * integ) * I;
        let drive = (&self.gv * phased) * (-I);
        (ready, drive)
    }

    /// Full-length amplitudes at stage time `t`.
    pub fn amplitudes_at(&self, t: f64, dim: usize) -> Vec<Complex64> {
        let mut out = vec![ZERO; dim];
        let a_r = self.spectral.evolve_projected(&self.c0, t);
        for (i, &m) in self.realized.iter().enumerate() {
            out[m] = a_r[i];
        }
        let (ready, _) = self.ready_at(t);
        for (i, &m) in self.ready_members.iter().enumerate() {
            out[m] = ready[i];
        }
        out
    }

    /// Per-channel hazards `max(J_K, 0) / s` into `rates`.
    pub fn rates(&self, t: f64, rates: &mut [f64]) -> StagePoint {
        let (ready, drive) = self.ready_at(t);
        let s = self.realized_norm + ready.norm_squared();
        let mut total = 0.0;
        for ((_, rows), slot) in self.channels.iter().zip(rates.iter_mut()) {
            let j: f64 = rows
                .iter()
                .map(|&r| 2.0 * (ready[r].conj() * drive[r]).re)
                .sum();
            *slot = j.max(0.0) / s;
            total += *slot;
        }
        StagePoint { s, total }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceConfig {
    pub t_max: f64,
    /// Uniform grid intervals; a multiple of 4 so the half grid is Simpson too.
    pub n_steps: usize,
    pub max_error: Option<f64>,
}

impl RaceConfig {
    pub fn new(t_max: f64) -> Self {
        RaceConfig {
            t_max,
            n_steps: 1 << 14,
            max_error: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaceResult {
    pub probabilities: BTreeMap<ComponentId, f64>,
    pub no_hit: f64,
    pub error_estimate: f64,
    /// Time at which half of each channel's hit mass has arrived.
    pub median_hit: BTreeMap<ComponentId, f64>,
    pub n_steps: usize,
}

struct Grid {
    cum: Vec<f64>,
    probs: Vec<f64>,
}

fn integrate(rates: &[Vec<f64>], totals: &[f64], h: f64, stride: usize) -> Grid {
    let n = (totals.len() - 1) / stride;
    let f = |i: usize| totals[i * stride];
    let mut cum = vec![0.0; n + 1];
    let mut i = 0;
    while i + 2 <= n {
        let (f0, f1, f2) = (f(i), f(i + 1), f(i + 2));
        cum[i + 1] = cum[i] + h * (5.0 * f0 + 8.0 * f1 - f2) / 12.0;
        cum[i + 2] = cum[i] + h * (f0 + 4.0 * f1 + f2) / 3.0;
        i += 2;
    }
    let probs = rates
        .iter()
        .map(|lam| {
            let g = |i: usize| lam[i * stride] * (-cum[i]).exp();
            let mut acc = 0.0;
            let mut i = 0;
            while i + 2 <= n {
                acc += h * (g(i) + 4.0 * g(i + 1) + g(i + 2)) / 3.0;
                i += 2;
            }
            acc
        })
        .collect();
    Grid { cum, probs }
}

/// First-hit probabilities of every ready channel of a stage up to `t_max`,
/// by composite Simpson on the exact truncated dynamics. The probabilities at
/// `n_steps / 2` give the error estimate.
pub fn race_quadrature(stage: &Stage, cfg: &RaceConfig) -> Result<RaceResult> {
    if !(cfg.t_max > 0.0) || !cfg.t_max.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "t_max must be positive and finite, got {}",
            cfg.t_max
        )));
    }
    if cfg.n_steps < 8 || !cfg.n_steps.is_multiple_of(4) {
        return Err(Error::InvalidParameter(format!(
            "n_steps must be a multiple of 4 and >= 8, got {}",
            cfg.n_steps
        )));
    }
    let n = cfg.n_steps;
    let h = cfg.t_max / n as f64;
    let k = stage.channels.len();
    let mut rates = vec![vec![0.0; n + 1]; k];
    let mut totals = vec![0.0; n + 1];
    let mut buf = vec![0.0; k];
    for i in 0..=n {
        let p = stage.rates(i as f64 * h, &mut buf);
        if !(p.s > 0.0) || !p.s.is_finite() {
            return Err(Error::DegenerateState(p.s));
        }
        totals[i] = p.total;
        for (c, &r) in buf.iter().enumerate() {
            rates[c][i] = r;
        }
    }
    let fine = integrate(&rates, &totals, h, 1);
    let coarse = integrate(&rates, &totals, 2.0 * h, 2);
    let no_hit = (-fine.cum[n]).exp();
    let mut error_estimate = fine
        .probs
        .iter()
        .zip(&coarse.probs)
        .map(|(a, b)| (a - b).abs())
        .fold((no_hit - (-coarse.cum[n / 2]).exp()).abs(), f64::max);
    let mass: f64 = fine.probs.iter().sum::<f64>() + no_hit;
    error_estimate = error_estimate.max((mass - 1.0).abs());
    if let Some(max) = cfg.max_error {
        if error_estimate > max {
            return Err(Error::QuadratureResolution {
                estimate: error_estimate,
                requested: max,
                n_steps: n,
            });
        }
    }

    let mut median_hit = BTreeMap::new();
    for (c, (id, _)) in stage.channels.iter().enumerate() {
        let target = 0.5 * fine.probs[c];
        let mut acc = 0.0;
        let mut t_med = cfg.t_max;
        for i in 0..n {
            let g0 = rates[c][i] * (-fine.cum[i]).exp();
            let g1 = rates[c][i + 1] * (-fine.cum[i + 1]).exp();
            let step = 0.5 * h * (g0 + g1);
            if acc + step >= target && fine.probs[c] > 0.0 {
                t_med = (i as f64 + (target - acc) / step) * h;
                break;
            }
            acc += step;
        }
        median_hit.insert(*id, t_med);
    }

    Ok(RaceResult {
        probabilities: stage
            .channels
            .iter()
            .zip(&fine.probs)
            .map(|((id, _), &p)| (*id, p))
            .collect(),
        no_hit,
        error_estimate,
        median_hit,
        n_steps: n,
    })
}

/// Doubles the grid from `cfg.n_steps` until the estimate reaches `target`
/// or `max_steps` is hit; returns the last result either way.
pub fn race_refined(
    stage: &Stage,
    cfg: &RaceConfig,
    target: f64,
    max_steps: usize,
) -> Result<RaceResult> {
    let mut c = RaceConfig {
        max_error: None,
        ..*cfg
    };
    loop {
        let r = race_quadrature(stage, &c)?;
        if r.error_estimate <= target || c.n_steps * 2 > max_steps {
            return Ok(r);
        }
        c.n_steps *= 2;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeConfig {
    pub race: RaceConfig,
    pub target_error: f64,
    pub max_steps: usize,
    pub max_depth: usize,
}

impl TreeConfig {
    pub fn new(t_max: f64) -> Self {
        TreeConfig {
            race: RaceConfig::new(t_max),
            target_error: 1e-7,
            max_steps: 1 << 21,
            max_depth: 64,
        }
    }
}

/// Probability of every outcome signature, stage by stage. Each stage gets
/// the full horizon, and the next launch profile is taken at the channel's
/// median hit time, which is exact when that profile does not change shape
/// during the stage.
pub fn outcome_distribution(spec: &ScenarioSpec, cfg: &TreeConfig) -> Result<OracleResult> {
    let graph = &spec.graph;
    let launch = canonical_launch(graph)?;
    let mut values = BTreeMap::new();
    let mut error = 0.0;
    let mut stack = vec![(
        launch.statuses,
        launch.amp,
        Vec::<ComponentId>::new(),
        1.0f64,
    )];
    while let Some((statuses, amp, prefix, weight)) = stack.pop() {
        let statuses = classify(graph, &statuses)?;
        if statuses.count(Status::Ready) == 0 || prefix.len() >= cfg.max_depth {
            *values
                .entry(outcome_signature(graph, &prefix))
                .or_insert(0.0) += weight;
            continue;
        }
        let stage = Stage::new(graph, &statuses, &amp)?;
        let race = race_refined(&stage, &cfg.race, cfg.target_error, cfg.max_steps)?;
        error += weight * race.error_estimate;
        if race.no_hit > 0.0 {
            *values
                .entry(outcome_signature(graph, &prefix))
                .or_insert(0.0) += weight * race.no_hit;
        }
        for (&k, &p) in &race.probabilities {
            if !(p > 0.0) {
                continue;
            }
            let at = stage.amplitudes_at(race.median_hit[&k], graph.dim());
            let mut next = vec![ZERO; graph.dim()];
            for &m in &graph.components()[k.0].members {
                next[m] = at[m];
            }
            let mut st = statuses.clone();
            for (id, s) in statuses.iter() {
                if id == k {
                    st.set(id, Status::Realized);
                } else if s.is_active() {
                    st.set(id, Status::Phantom);
                }
            }
            let mut path = prefix.clone();
            path.push(k);
            stack.push((st, next, path, weight * p));
        }
    }
    Ok(OracleResult {
        mode: OracleKind::RaceQuadrature,
        values,
        series: Vec::new(),
        error_estimate: error,
    })
}

/// Unitary populations sampled on `n_points` uniform times in `[0, t_max]`:
/// per component and per watched tag. `values` holds the peak of each watched
/// tag, the peak over time of the smallest watched-tag population, and the
/// largest norm drift.
pub fn unitary_report(spec: &ScenarioSpec, t_max: f64, n_points: usize) -> Result<OracleResult> {
    if n_points < 2 {
        return Err(Error::InvalidParameter(
            "need at least two sample points".into(),
        ));
    }
    let graph = &spec.graph;
    let u = Unitary::new(graph)?;
    let norm0: f64 = graph
        .initial_amplitudes()
        .iter()
        .map(|a| a.norm_sqr())
        .sum();
    let tags: Vec<(&str, Vec<usize>)> = spec
        .meta
        .watch_tags
        .iter()
        .map(|t| (t.as_str(), graph.tagged(t)))
        .collect();
    let mut series = Vec::with_capacity(n_points);
    let mut drift: f64 = 0.0;
    let mut peaks = vec![0.0f64; tags.len()];
    let mut simultaneous: f64 = 0.0;
    for i in 0..n_points {
        let t = t_max * i as f64 / (n_points - 1) as f64;
        let a = u.at(t);
        let pop: Vec<f64> = a.iter().map(|x| x.norm_sqr()).collect();
        drift = drift.max((pop.iter().sum::<f64>() - norm0).abs() / norm0);
        let mut values = BTreeMap::new();
        for c in graph.components() {
            values.insert(
                c.label.clone(),
                c.members.iter().map(|&m| pop[m]).sum::<f64>() / norm0,
            );
        }
        let mut low = f64::INFINITY;
        for (j, (tag, members)) in tags.iter().enumerate() {
            let p = members.iter().map(|&m| pop[m]).sum::<f64>() / norm0;
            peaks[j] = peaks[j].max(p);
            low = low.min(p);
            values.insert(format!("tag:{tag}"), p);
        }
        if tags.len() >= 2 {
            simultaneous = simultaneous.max(low);
        }
        series.push(SeriesPoint { t, values });
    }
    let mut values = BTreeMap::new();
    for ((tag, _), p) in tags.iter().zip(&peaks) {
        values.insert(format!("peak:{tag}"), *p);
    }
    if tags.len() >= 2 {
        values.insert("peakSimultaneous".into(), simultaneous);
    }
    values.insert("normDrift".into(), drift);
    Ok(OracleResult {
        mode: OracleKind::Unitary,
        values,
        series,
        error_estimate: drift,
    })
}

/// `S(t) = 1 / (1 + g^2 t^2)` for one gap out of a single realized state.
pub fn single_gap_survival(g: f64, t: f64) -> f64 {
    1.0 / (1.0 + g * g * t * t)
}

/// Hazard of the single gap, `2 g^2 t / (1 + g^2 t^2)`.
pub fn single_gap_hazard(g: f64, t: f64) -> f64 {
    2.0 * g * g * t / (1.0 + g * g * t * t)
}

/// `(cos^2(g t), sin^2(g t))` for a resonant pair with coupling `g`.
pub fn rabi_populations(g: f64, t: f64) -> (f64, f64) {
    let (s, c) = (g * t).sin_cos();
    (c * c, s * s)
}

/// Two gaps out of one realized state: `(gR^2, gL^2) / (gR^2 + gL^2)`.
pub fn race_ratio(gr: f64, gl: f64) -> (f64, f64) {
    let total = gr * gr + gl * gl;
    (gr * gr / total, gl * gl / total)
}

/// Registered analytic cases: `single-gap` (g, t), `rabi` (g, t) and
/// `race` (gR, gL).
pub fn closed_form(case: &str, params: &BTreeMap<String, f64>) -> Result<OracleResult> {
    let get = |k: &str| {
        params
            .get(k)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("closed form `{case}` needs `{k}`")))
    };
    let values: BTreeMap<String, f64> = match case {
        "single-gap" => {
            let (g, t) = (get("g")?, get("t")?);
            let s = single_gap_survival(g, t);
            [
                ("survival".to_string(), s),
                ("hit".to_string(), 1.0 - s),
                ("hazard".to_string(), single_gap_hazard(g, t)),
            ]
            .into()
        }
        "rabi" => {
            let (p0, p1) = rabi_populations(get("g")?, get("t")?);
            [("p0".to_string(), p0), ("p1".to_string(), p1)].into()
        }
        "race" => {
            let (r, l) = race_ratio(get("gR")?, get("gL")?);
            [("r".to_string(), r), ("l".to_string(), l)].into()
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown closed form `{other}`"
            )))
        }
    };
    Ok(OracleResult {
        mode: OracleKind::ClosedForm,
        values,
        series: Vec::new(),
        error_estimate: 0.0,
    })
}
