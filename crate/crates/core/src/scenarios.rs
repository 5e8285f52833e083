//! Scenario builders: each returns a validated graph together with the
//! assertions an ensemble of its trajectories must satisfy.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{validate, ComponentId, CouplingKind, GraphBuilder, Status, SystemGraph};
use crate::reduction::TrajectoryConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Race,
    Unitary,
}

impl std::str::FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "race" => Ok(OracleMode::Race),
            "unitary" => Ok(OracleMode::Unitary),
            other => Err(Error::InvalidParameter(format!(
                "oracle mode must be `race` or `unitary`, got `{other}`"
            ))),
        }
    }
}

/// Assertions checked on every trajectory record of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioMeta {
    /// Event-count bounds for trajectories that ran to completion.
    pub min_events: usize,
    pub max_events: Option<usize>,
    /// Allowed chosen-component sequences. A completed trajectory matches one
    /// exactly; a truncated one is a proper prefix of one.
    pub sequences: Option<Vec<Vec<ComponentId>>>,
    /// Tags whose population must be exactly zero before the first event.
    pub zero_before_first_hit: Vec<String>,
    /// Terminal support must carry a single tag with this prefix.
    pub single_support_prefix: Option<String>,
    pub t_max: f64,
    pub oracle: OracleMode,
    pub watch_tags: Vec<String>,
    pub params: BTreeMap<String, f64>,
}

impl ScenarioMeta {
    fn open(graph: &SystemGraph) -> Self {
        ScenarioMeta {
            min_events: 0,
            max_events: None,
            sequences: None,
            zero_before_first_hit: Vec::new(),
            single_support_prefix: None,
            t_max: default_t_max(graph),
            oracle: OracleMode::Race,
            watch_tags: Vec::new(),
            params: BTreeMap::new(),
        }
    }
}

/// `50 / g_min` over nonzero gaps. Without gaps, 100 periods of the slowest
/// continuous coupling.
pub fn default_t_max(graph: &SystemGraph) -> f64 {
    let min_of = |kind: CouplingKind| {
        graph
            .couplings()
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.value.norm())
            .filter(|&g| g > 0.0)
            .fold(f64::INFINITY, f64::min)
    };
    let g = min_of(CouplingKind::Gap);
    if g.is_finite() {
        return 50.0 / g;
    }
    let h = min_of(CouplingKind::Continuous);
    if h.is_finite() {
        100.0 * PI / h
    } else {
        50.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub id: String,
    pub graph: SystemGraph,
    pub meta: ScenarioMeta,
}

impl ScenarioSpec {
    /// A graph read from a file, with only the generic assertions.
    pub fn from_graph(id: impl Into<String>, graph: SystemGraph) -> Result<Self> {
        let meta = ScenarioMeta::open(&graph);
        finish(id.into(), graph, meta)
    }

    pub fn trajectory_config(&self) -> TrajectoryConfig {
        let mut watch = self.meta.watch_tags.clone();
        for t in &self.meta.zero_before_first_hit {
            if !watch.contains(t) {
                watch.push(t.clone());
            }
        }
        TrajectoryConfig {
            watch_tags: watch,
            ..TrajectoryConfig::new(self.meta.t_max)
        }
    }

    pub fn label(&self, id: ComponentId) -> &str {
        &self.graph.components()[id.0].label
    }
}

fn finish(id: String, graph: SystemGraph, meta: ScenarioMeta) -> Result<ScenarioSpec> {
    validate(&graph).into_result()?;
    let known_tag = |t: &String| graph.basis().iter().any(|b| b.tags.contains(t));
    if let Some(t) = meta
        .zero_before_first_hit
        .iter()
        .chain(&meta.watch_tags)
        .find(|t| !known_tag(t))
    {
        return Err(Error::InvalidParameter(format!(
            "scenario `{id}` asserts on missing tag `{t}`"
        )));
    }
    if let Some(seqs) = &meta.sequences {
        if let Some(bad) = seqs
            .iter()
            .flatten()
            .find(|k| k.0 >= graph.components().len())
        {
            return Err(Error::UnknownComponent(*bad));
        }
    }
    if !(meta.t_max > 0.0) || !meta.t_max.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "scenario `{id}` has no usable time horizon"
        )));
    }
    Ok(ScenarioSpec { id, graph, meta })
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn non_negative(name: &str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be finite and >= 0, got {v}"
        )))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<usize> {
    if v >= min {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be >= {min}, got {v}"
        )))
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

/// A particle crossing into a detector: `psi d0 -> d1`, one hit at most.
pub fn detector_capture(g: f64) -> Result<ScenarioSpec> {
    non_negative("g", g)?;
    let mut b = GraphBuilder::new();
    let s0 = b.state("psi·d0", &[]);
    let s1 = b.state("d1", &[]);
    b.component("psi·d0", &[s0], Status::Realized);
    let d1 = b.component("d1", &[s1], Status::Dormant);
    b.gap(s0, s1, c(g));
    b.amplitude(s0, c(1.0));
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 1;
    meta.max_events = Some(1);
    meta.sequences = Some(vec![vec![d1]]);
    meta.params = params(&[("g", g)]);
    finish("detector-capture".into(), graph, meta)
}

/// Counter chain `A0 -> A1 -> ... -> An` with gap `gs[k]` into `A(k+1)`.
pub fn series_counter(gs: &[f64]) -> Result<ScenarioSpec> {
    let n = at_least("n", gs.len(), 2)?;
    for (k, &g) in gs.iter().enumerate() {
        non_negative(&format!("g{}", k + 1), g)?;
    }
    let mut b = GraphBuilder::new();
    let states: Vec<usize> = (0..=n).map(|k| b.state(format!("A{k}"), &[])).collect();
    let ids: Vec<ComponentId> = states
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let status = if k == 0 {
                Status::Realized
            } else {
                Status::Dormant
            };
            b.component(format!("A{k}"), &[s], status)
        })
        .collect();
    for (k, &g) in gs.iter().enumerate() {
        b.gap(states[k], states[k + 1], c(g));
    }
    b.amplitude(states[0], c(1.0));
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = n;
    meta.max_events = Some(n);
    meta.sequences = Some(vec![ids[1..].to_vec()]);
    meta.params.insert("n".into(), n as f64);
    for (k, &g) in gs.iter().enumerate() {
        meta.params.insert(format!("g{}", k + 1), g);
    }
    finish("series-counter".into(), graph, meta)
}

/// Diamond `A0 -> {A_r, A_l} -> A_f`.
pub fn parallel_branch(gr: f64, gl: f64, gf: f64) -> Result<ScenarioSpec> {
    non_negative("gR", gr)?;
    non_negative("gL", gl)?;
    non_negative("gF", gf)?;
    let mut b = GraphBuilder::new();
    let a0 = b.state("A0", &[]);
    let ar = b.state("A_r", &[]);
    let al = b.state("A_l", &[]);
    let af = b.state("A_f", &[]);
    b.component("A0", &[a0], Status::Realized);
    let r = b.component("A_r", &[ar], Status::Dormant);
    let l = b.component("A_l", &[al], Status::Dormant);
    let f = b.component("A_f", &[af], Status::Dormant);
    b.gap(a0, ar, c(gr));
    b.gap(a0, al, c(gl));
    b.gap(ar, af, c(gf));
    b.gap(al, af, c(gf));
    b.amplitude(a0, c(1.0));
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 2;
    meta.max_events = Some(2);
    meta.sequences = Some(vec![vec![r, f], vec![l, f]]);
    meta.params = params(&[("gR", gr), ("gL", gl), ("gF", gf)]);
    finish("parallel-branch".into(), graph, meta)
}

/// Detector capture followed by an observer whose brain state is carried
/// from `B0` to `B1` along a hopping chain inside the captured component.
///
/// Chain couplings are `hop * sqrt(k (N - k))`, which move the whole
/// population from the window (site 0) to the `B1` end at `pi / (2 hop)`.
pub fn observer_chain(g: f64, hop: f64, chain_len: usize) -> Result<ScenarioSpec> {
    non_negative("g", g)?;
    non_negative("hop", hop)?;
    let n = at_least("chainLen", chain_len, 2)?;
    let mut b = GraphBuilder::new();
    let s0 = b.state("ψ·d0·B0", &["B0"]);
    let sites: Vec<usize> = (0..n)
        .map(|k| match k {
            0 => b.state("d1w·B0", &["B0"]),
            k if k == n - 1 => b.state("d1d·B1", &["B1"]),
            k => b.state(format!("d1·s{k}·B0"), &["B0"]),
        })
        .collect();
    b.component("ψ·d0·B0", &[s0], Status::Realized);
    let captured = b.component("d1·B", &sites, Status::Dormant);
    b.gap(s0, sites[0], c(g));
    for k in 1..n {
        let j = hop * ((k * (n - k)) as f64).sqrt();
        b.hopping(sites[k - 1], sites[k], c(j));
    }
    b.amplitude(s0, c(1.0));
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 1;
    meta.max_events = Some(1);
    meta.sequences = Some(vec![vec![captured]]);
    meta.zero_before_first_hit = vec!["B1".into()];
    meta.watch_tags = vec!["B0".into(), "B1".into()];
    meta.oracle = OracleMode::Unitary;
    meta.params = params(&[("g", g), ("hop", hop), ("chainLen", n as f64)]);
    finish("observer-chain".into(), graph, meta)
}

/// Couplings of the two-level sequence tree: three first-level branches,
/// each splitting in two.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceCouplings {
    pub first: [f64; 3],
    pub second: [[f64; 2]; 3],
}

impl Default for SequenceCouplings {
    fn default() -> Self {
        SequenceCouplings {
            first: [1.0, 1.5, 2.0],
            second: [[1.0, 2.0], [1.0, 1.0], [2.0, 1.0]],
        }
    }
}

/// `AB0 -> {AB1, AB2, AB3}`, then each `ABk -> {ABka, ABkb}`: six sequences.
pub fn multi_sequence(g: SequenceCouplings) -> Result<ScenarioSpec> {
    for (k, &v) in g.first.iter().enumerate() {
        non_negative(&format!("g{}", k + 1), v)?;
    }
    for (k, pair) in g.second.iter().enumerate() {
        for (j, &v) in pair.iter().enumerate() {
            non_negative(&format!("g{}{}", k + 1, ['a', 'b'][j]), v)?;
        }
    }
    let mut b = GraphBuilder::new();
    let root = b.state("AB0", &[]);
    b.component("AB0", &[root], Status::Realized);
    b.amplitude(root, c(1.0));
    let mut sequences = Vec::new();
    let mut p = vec![];
    for k in 0..3 {
        let label = format!("AB{}", k + 1);
        let mid = b.state(label.clone(), &[]);
        let mid_id = b.component(label.clone(), &[mid], Status::Dormant);
        b.gap(root, mid, c(g.first[k]));
        p.push((format!("g{}", k + 1), g.first[k]));
        for (j, suffix) in ['a', 'b'].into_iter().enumerate() {
            let leaf_label = format!("{label}{suffix}");
            let leaf = b.state(leaf_label.clone(), &[]);
            let leaf_id = b.component(leaf_label, &[leaf], Status::Dormant);
            b.gap(mid, leaf, c(g.second[k][j]));
            p.push((format!("g{}{suffix}", k + 1), g.second[k][j]));
            sequences.push(vec![mid_id, leaf_id]);
        }
    }
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 2;
    meta.max_events = Some(2);
    meta.sequences = Some(sequences);
    meta.params = p.into_iter().collect();
    finish("multi-sequence".into(), graph, meta)
}

fn rabi(
    id: &str,
    labels: [&str; 3],
    excited_start: bool,
    g: f64,
    gamma: f64,
) -> Result<ScenarioSpec> {
    non_negative("g", g)?;
    non_negative("gamma", gamma)?;
    let mut b = GraphBuilder::new();
    let ground = b.state(labels[0], &[]);
    let excited = b.state(labels[1], &[]);
    let emitted = b.state(labels[2], &[]);
    b.component("atom", &[ground, excited], Status::Realized);
    let out = b.component(labels[2], &[emitted], Status::Dormant);
    b.hopping(ground, excited, c(g));
    b.gap(excited, emitted, c(gamma));
    b.amplitude(if excited_start { excited } else { ground }, c(1.0));
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 1;
    meta.max_events = Some(1);
    meta.sequences = Some(vec![vec![out]]);
    meta.params = params(&[("g", g), ("gamma", gamma)]);
    finish(id.into(), graph, meta)
}

/// Rabi pair `γn·a0 <-> γn-1·a1` starting in the ground state, with
/// spontaneous emission off the excited member.
pub fn rabi_absorption(g: f64, gamma: f64) -> Result<ScenarioSpec> {
    rabi(
        "rabi-absorption",
        ["γn·a0", "γn-1·a1", "γn-1·a0⊗γ"],
        false,
        g,
        gamma,
    )
}

/// Same topology as [`rabi_absorption`], starting in the excited state.
pub fn rabi_emission(g: f64, gamma: f64) -> Result<ScenarioSpec> {
    rabi(
        "rabi-emission",
        ["γn+1·a0", "γn·a1", "γn·a0⊗γ"],
        true,
        g,
        gamma,
    )
}

/// One pumped laser cycle: `a3 -> a2`, stimulated `a2 <-> a1` into the beam,
/// then either the metastable decay of `a2` or the fast decay of `a1`.
pub fn laser_cycle(g: f64, gamma32: f64, meta_rate: f64, fast_rate: f64) -> Result<ScenarioSpec> {
    non_negative("g", g)?;
    non_negative("gamma32", gamma32)?;
    non_negative("gamma10meta", meta_rate)?;
    non_negative("gamma10fast", fast_rate)?;
    let mut b = GraphBuilder::new();
    let a3 = b.state("γn·a3", &[]);
    let a2 = b.state("γn·a2⊗e_x", &[]);
    let a1 = b.state("γn+1·a1⊗e_x", &[]);
    let m0 = b.state("γn·a0⊗γ_m⊗e_xx", &[]);
    let f0 = b.state("γn+1·a0⊗e_xx", &[]);
    b.component("γn·a3", &[a3], Status::Realized);
    let pumped = b.component("a2⇔a1", &[a2, a1], Status::Dormant);
    let meta_id = b.component("metastable", &[m0], Status::Dormant);
    let fast_id = b.component("fast", &[f0], Status::Dormant);
    b.gap(a3, a2, c(gamma32));
    b.hopping(a2, a1, c(g));
    b.gap(a2, m0, c(meta_rate));
    b.gap(a1, f0, c(fast_rate));
    b.amplitude(a3, c(1.0));
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 2;
    meta.max_events = Some(2);
    meta.sequences = Some(vec![vec![pumped, fast_id], vec![pumped, meta_id]]);
    // the pump stage has survival 1 / (1 + (gamma32 t)^2); 50 / g_min leaves
    // too many trials short of two events
    meta.t_max = if gamma32 > 0.0 {
        2000.0 / gamma32
    } else {
        meta.t_max
    };
    meta.params = params(&[
        ("g", g),
        ("gamma32", gamma32),
        ("gamma10meta", meta_rate),
        ("gamma10fast", fast_rate),
    ]);
    finish("laser-cycle".into(), graph, meta)
}

/// Initial neutron packet on the lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Packet {
    /// Gaussian width in sites; zero puts the packet on the single site
    /// nearest `center`.
    pub width: f64,
    pub center: f64,
    pub momentum: f64,
}

impl Packet {
    pub fn default_for(l: usize) -> Self {
        Packet {
            width: l as f64 / 8.0,
            center: l as f64 / 4.0,
            momentum: PI / 2.0,
        }
    }

    pub fn amplitudes(&self, l: usize) -> Vec<Complex64> {
        if self.width == 0.0 {
            let j = (self.center.round().max(0.0) as usize).min(l - 1);
            return (0..l).map(|i| c(if i == j { 1.0 } else { 0.0 })).collect();
        }
        (0..l)
            .map(|j| {
                let x = j as f64 - self.center;
                let env = (-x * x / (2.0 * self.width * self.width)).exp();
                Complex64::from_polar(env, self.momentum * j as f64)
            })
            .collect()
    }
}

/// Neutron packet hopping on `l` sites; each site has its own decay gap, so
/// the decay happens at one stochastically chosen site.
pub fn neutron_decay(l: usize, hop: f64, g_decay: f64, packet: Packet) -> Result<ScenarioSpec> {
    let l = at_least("L", l, 2)?;
    non_negative("hop", hop)?;
    non_negative("gDecay", g_decay)?;
    non_negative("width", packet.width)?;
    if !packet.center.is_finite() || !packet.momentum.is_finite() {
        return Err(Error::InvalidParameter(
            "packet center and momentum must be finite".into(),
        ));
    }
    let mut b = GraphBuilder::new();
    let sites: Vec<usize> = (0..l)
        .map(|j| b.state(format!("n@{j}"), &[&format!("site:{j}")]))
        .collect();
    let decays: Vec<usize> = (0..l)
        .map(|j| b.state(format!("epν̄@{j}"), &[&format!("site:{j}")]))
        .collect();
    b.component("n", &sites, Status::Realized);
    let ids: Vec<ComponentId> = (0..l)
        .map(|j| b.component(format!("epν̄@{j}"), &[decays[j]], Status::Dormant))
        .collect();
    for j in 1..l {
        b.hopping(sites[j - 1], sites[j], c(hop));
    }
    for j in 0..l {
        b.gap(sites[j], decays[j], c(g_decay));
    }
    let amps = packet.amplitudes(l);
    for j in 0..l {
        b.amplitude(sites[j], amps[j]);
    }
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 1;
    meta.max_events = Some(1);
    meta.sequences = Some(ids.into_iter().map(|k| vec![k]).collect());
    meta.single_support_prefix = Some("site:".into());
    meta.params = params(&[
        ("L", l as f64),
        ("hop", hop),
        ("gDecay", g_decay),
        ("width", packet.width),
        ("center", packet.center),
        ("k0", packet.momentum),
    ]);
    finish("neutron-decay".into(), graph, meta)
}

/// An atom spread over `n` bubbles, each bubble an independent Rabi pair
/// with its own emission gap. Bubble `k` starts with weight `sqrt(k + 1)`.
pub fn localization(n: usize, g: f64, gamma: f64) -> Result<ScenarioSpec> {
    let n = at_least("nBubbles", n, 1)?;
    non_negative("g", g)?;
    non_negative("gamma", gamma)?;
    let mut b = GraphBuilder::new();
    let mut sequences = Vec::new();
    for k in 0..n {
        let tag = format!("bubble:{k}");
        let ground = b.state(format!("γ·a{k}"), &[&tag]);
        let excited = b.state(format!("a*{k}"), &[&tag]);
        let emitted = b.state(format!("a{k}⊗γ{k}"), &[&tag]);
        b.component(format!("bubble {k}"), &[ground, excited], Status::Realized);
        let out = b.component(format!("a{k}⊗γ{k}"), &[emitted], Status::Dormant);
        b.hopping(ground, excited, c(g));
        b.gap(excited, emitted, c(gamma));
        b.amplitude(ground, c(((k + 1) as f64).sqrt()));
        sequences.push(vec![out]);
    }
    let graph = b.build()?;
    let mut meta = ScenarioMeta::open(&graph);
    meta.min_events = 1;
    meta.max_events = Some(1);
    meta.sequences = Some(sequences);
    meta.single_support_prefix = Some("bubble:".into());
    meta.params = params(&[("nBubbles", n as f64), ("g", g), ("gamma", gamma)]);
    finish("localization".into(), graph, meta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub integer: bool,
}

const fn real(name: &'static str, default: f64) -> ParamSpec {
    ParamSpec {
        name,
        default,
        integer: false,
    }
}

const fn int(name: &'static str, default: f64) -> ParamSpec {
    ParamSpec {
        name,
        default,
        integer: true,
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScenarioEntry {
    pub id: &'static str,
    pub summary: &'static str,
    pub params: &'static [ParamSpec],
}

pub const REGISTRY: &[ScenarioEntry] = &[
    ScenarioEntry {
        id: "detector-capture",
        summary: "particle capture, one gap",
        params: &[real("g", 1.0)],
    },
    ScenarioEntry {
        id: "series-counter",
        summary: "counter chain A0 -> ... -> An (g1..gn override g)",
        params: &[int("n", 3.0), real("g", 1.0)],
    },
    ScenarioEntry {
        id: "parallel-branch",
        summary: "diamond A0 -> {A_r, A_l} -> A_f",
        params: &[real("gR", 1.0), real("gL", 2.0), real("gF", 1.0)],
    },
    ScenarioEntry {
        id: "observer-chain",
        summary: "capture, then brain state carried B0 -> B1 along a chain",
        params: &[real("g", 0.5), real("hop", 1.0), int("chainLen", 4.0)],
    },
    ScenarioEntry {
        id: "multi-sequence",
        summary: "three branches, each splitting in two",
        params: &[
            real("g1", 1.0),
            real("g2", 1.5),
            real("g3", 2.0),
            real("g1a", 1.0),
            real("g1b", 2.0),
            real("g2a", 1.0),
            real("g2b", 1.0),
            real("g3a", 2.0),
            real("g3b", 1.0),
        ],
    },
    ScenarioEntry {
        id: "rabi-absorption",
        summary: "Rabi pair from the ground state with spontaneous emission",
        params: &[real("g", 1.0), real("gamma", 0.5)],
    },
    ScenarioEntry {
        id: "rabi-emission",
        summary: "Rabi pair from the excited state with spontaneous emission",
        params: &[real("g", 1.0), real("gamma", 0.5)],
    },
    ScenarioEntry {
        id: "laser-cycle",
        summary: "pump, stimulated transfer, metastable or fast decay",
        params: &[
            real("g", 1.0),
            real("gamma32", 1.0),
            real("gamma10meta", 0.1),
            real("gamma10fast", 1.0),
        ],
    },
    ScenarioEntry {
        id: "neutron-decay",
        summary: "packet on a lattice with a decay gap at every site",
        params: &[
            int("L", 16.0),
            real("hop", 1.0),
            real("gDecay", 0.2),
            real("width", f64::NAN),
            real("center", f64::NAN),
            real("k0", PI / 2.0),
        ],
    },
    ScenarioEntry {
        id: "localization",
        summary: "atom over n bubbles, one Rabi pair and emission gap each",
        params: &[int("nBubbles", 8.0), real("g", 1.0), real("gamma", 0.5)],
    },
];

pub fn entry(id: &str) -> Result<&'static ScenarioEntry> {
    REGISTRY
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::UnknownScenario(id.to_string()))
}

struct Args<'a> {
    entry: &'static ScenarioEntry,
    given: &'a BTreeMap<String, f64>,
}

impl Args<'_> {
    fn real(&self, name: &str) -> f64 {
        self.given.get(name).copied().unwrap_or_else(|| {
            self.entry
                .params
                .iter()
                .find(|p| p.name == name)
                .expect("registered parameter")
                .default
        })
    }

    fn int(&self, name: &str) -> Result<usize> {
        let v = self.real(name);
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(Error::InvalidParameter(format!(
                "{name} must be a non-negative integer, got {v}"
            )))
        }
    }
}

/// Builds a registered scenario, with `given` overriding parameter defaults.
pub fn build(id: &str, given: &BTreeMap<String, f64>) -> Result<ScenarioSpec> {
    let entry = entry(id)?;
    let counter_override = |k: &str| {
        id == "series-counter"
            && k.strip_prefix('g')
                .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
    };
    if let Some(k) = given
        .keys()
        .find(|k| !entry.params.iter().any(|p| p.name == k.as_str()) && !counter_override(k))
    {
        return Err(Error::InvalidParameter(format!(
            "scenario `{id}` has no parameter `{k}`"
        )));
    }
    let a = Args { entry, given };
    match id {
        "detector-capture" => detector_capture(a.real("g")),
        "series-counter" => {
            let n = a.int("n")?;
            let g = a.real("g");
            let gs: Vec<f64> = (1..=n)
                .map(|k| given.get(&format!("g{k}")).copied().unwrap_or(g))
                .collect();
            if let Some(k) = given
                .keys()
                .filter(|k| counter_override(k))
                .find(|k| k[1..].parse::<usize>().map_or(true, |i| i == 0 || i > n))
            {
                return Err(Error::InvalidParameter(format!(
                    "`{k}` is outside the {n}-gap counter"
                )));
            }
            series_counter(&gs)
        }
        "parallel-branch" => parallel_branch(a.real("gR"), a.real("gL"), a.real("gF")),
        "observer-chain" => observer_chain(a.real("g"), a.real("hop"), a.int("chainLen")?),
        "multi-sequence" => multi_sequence(SequenceCouplings {
            first: [a.real("g1"), a.real("g2"), a.real("g3")],
            second: [
                [a.real("g1a"), a.real("g1b")],
                [a.real("g2a"), a.real("g2b")],
                [a.real("g3a"), a.real("g3b")],
            ],
        }),
        "rabi-absorption" => rabi_absorption(a.real("g"), a.real("gamma")),
        "rabi-emission" => rabi_emission(a.real("g"), a.real("gamma")),
        "laser-cycle" => laser_cycle(
            a.real("g"),
            a.real("gamma32"),
            a.real("gamma10meta"),
            a.real("gamma10fast"),
        ),
        "neutron-decay" => {
            let l = a.int("L")?;
            let d = Packet::default_for(l.max(1));
            let pick = |name: &str, fallback: f64| {
                let v = a.real(name);
                if v.is_nan() {
                    fallback
                } else {
                    v
                }
            };
            let packet = Packet {
                width: pick("width", d.width),
                center: pick("center", d.center),
                momentum: a.real("k0"),
            };
            neutron_decay(l, a.real("hop"), a.real("gDecay"), packet)
        }
        "localization" => localization(a.int("nBubbles")?, a.real("g"), a.real("gamma")),
        _ => unreachable!("registry and builder table agree"),
    }
}

/// Every registered scenario at its default parameters.
pub fn defaults() -> Result<Vec<ScenarioSpec>> {
    REGISTRY
        .iter()
        .map(|e| build(e.id, &BTreeMap::new()))
        .collect()
}

/// Resolves a registered id or a path to a scenario file.
pub fn resolve(name: &str, given: &BTreeMap<String, f64>) -> Result<ScenarioSpec> {
    if entry(name).is_ok() {
        return build(name, given);
    }
    let path = std::path::Path::new(name);
    if path.exists() {
        if !given.is_empty() {
            return Err(Error::InvalidParameter(
                "parameters apply to registered scenarios only".into(),
            ));
        }
        let graph = crate::format::read_graph(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.to_string());
        return ScenarioSpec::from_graph(id, graph);
    }
    Err(Error::UnknownScenario(name.to_string()))
}

impl ScenarioSpec {
    /// Labels of the components named by `meta.sequences`, for reports.
    pub fn sequence_labels(&self) -> Vec<Vec<String>> {
        self.meta
            .sequences
            .iter()
            .flatten()
            .map(|s| s.iter().map(|&k| self.label(k).to_string()).collect())
            .collect()
    }

    pub fn component(&self, label: &str) -> Option<ComponentId> {
        self.graph.component_by_label(label)
    }
}
