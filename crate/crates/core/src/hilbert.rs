//! Component/gap graph model: basis states grouped into components, Hermitian
//! continuous couplings, declared gaps, and classification of ready components.
//!
//! A gap is declared once, in its forward direction `from -> to`, with
//! `value = H[to][from]`. The master Hamiltonian carries the implied Hermitian
//! partner `H[from][to] = conj(value)`; the truncated generator never does.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when matching a continuous coupling against its
/// conjugate partner.
pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(pub usize);

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Realized,
    Ready,
    Phantom,
    Dormant,
}

impl Status {
    /// Realized and ready components carry the live solution.
    pub fn is_active(self) -> bool {
        matches!(self, Status::Realized | Status::Ready)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasisState {
    pub index: usize,
    pub label: String,
    pub tags: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub id: ComponentId,
    pub label: String,
    pub members: Vec<usize>,
    pub initial_status: Status,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Continuous,
    Gap,
}

/// Matrix element `H[to][from] = value`: amplitude on `from` drives `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coupling {
    pub from: usize,
    pub to: usize,
    pub value: Complex64,
    pub kind: CouplingKind,
}

/// Per-component status, indexed by [`ComponentId`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StatusMap(Vec<Status>);

impl StatusMap {
    pub fn new(statuses: Vec<Status>) -> Self {
        StatusMap(statuses)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: ComponentId) -> Status {
        self.0[id.0]
    }

    pub fn set(&mut self, id: ComponentId, status: Status) {
        self.0[id.0] = status;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ComponentId, Status)> + '_ {
        self.0.iter().enumerate().map(|(i, &s)| (ComponentId(i), s))
    }

    pub fn with_status(&self, status: Status) -> impl Iterator<Item = ComponentId> + '_ {
        self.iter()
            .filter(move |&(_, s)| s == status)
            .map(|(id, _)| id)
    }

    pub fn count(&self, status: Status) -> usize {
        self.0.iter().filter(|&&s| s == status).count()
    }

    pub fn as_slice(&self) -> &[Status] {
        &self.0
    }
}

/// The static topology of a scenario. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemGraph {
    basis: Vec<BasisState>,
    components: Vec<Component>,
    diag: Vec<f64>,
    couplings: Vec<Coupling>,
    initial_amplitudes: Vec<Complex64>,
    owner: Vec<Option<ComponentId>>,
}

impl SystemGraph {
    /// Checks shape only (dense indices, lengths, ranges). Semantic checks
    /// live in [`validate`].
    pub fn new(
        basis: Vec<BasisState>,
        components: Vec<Component>,
        diag: Vec<f64>,
        couplings: Vec<Coupling>,
        initial_amplitudes: Vec<Complex64>,
    ) -> Result<Self> {
        let dim = basis.len();
        for (i, b) in basis.iter().enumerate() {
            if b.index != i {
                return Err(Error::Format(format!(
                    "basis indices must be dense 0..{dim}: position {i} has index {}",
                    b.index
                )));
            }
        }
        for (i, c) in components.iter().enumerate() {
            if c.id.0 != i {
                return Err(Error::Format(format!(
                    "component ids must be dense: position {i} has id {}",
                    c.id
                )));
            }
            if let Some(&m) = c.members.iter().find(|&&m| m >= dim) {
                return Err(Error::Format(format!(
                    "component {} lists member {m} outside basis of size {dim}",
                    c.id
                )));
            }
        }
        if diag.len() != dim {
            return Err(Error::Format(format!(
                "diag has {} entries for basis of size {dim}",
                diag.len()
            )));
        }
        if initial_amplitudes.len() != dim {
            return Err(Error::Format(format!(
                "initial amplitudes have {} entries for basis of size {dim}",
                initial_amplitudes.len()
            )));
        }
        for c in &couplings {
            if c.from >= dim || c.to >= dim {
                return Err(Error::Format(format!(
                    "coupling {} -> {} outside basis of size {dim}",
                    c.from, c.to
                )));
            }
            if !(c.value.re.is_finite() && c.value.im.is_finite()) {
                return Err(Error::Format(format!(
                    "coupling {} -> {} is not finite",
                    c.from, c.to
                )));
            }
        }
        if diag.iter().any(|d| !d.is_finite())
            || initial_amplitudes
                .iter()
                .any(|a| !(a.re.is_finite() && a.im.is_finite()))
        {
            return Err(Error::Format("non-finite diagonal or amplitude".into()));
        }

        let mut owner = vec![None; dim];
        for c in &components {
            for &m in &c.members {
                owner[m].get_or_insert(c.id);
            }
        }
        Ok(SystemGraph {
            basis,
            components,
            diag,
            couplings,
            initial_amplitudes,
            owner,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[BasisState] {
        &self.basis
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, id: ComponentId) -> Result<&Component> {
        self.components.get(id.0).ok_or(Error::UnknownComponent(id))
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn initial_amplitudes(&self) -> &[Complex64] {
        &self.initial_amplitudes
    }

    /// Component containing basis state `index` (first one, if membership overlaps).
    pub fn owner(&self, index: usize) -> Option<ComponentId> {
        self.owner[index]
    }

    pub fn initial_statuses(&self) -> StatusMap {
        StatusMap(self.components.iter().map(|c| c.initial_status).collect())
    }

    pub fn gaps(&self) -> impl Iterator<Item = &Coupling> {
        self.couplings
            .iter()
            .filter(|c| c.kind == CouplingKind::Gap)
    }

    pub fn component_by_label(&self, label: &str) -> Option<ComponentId> {
        self.components
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.id)
    }

    /// Basis indices carrying `tag`.
    pub fn tagged(&self, tag: &str) -> Vec<usize> {
        self.basis
            .iter()
            .filter(|b| b.tags.contains(tag))
            .map(|b| b.index)
            .collect()
    }

    /// Every nonzero entry of the full (untruncated) Hermitian Hamiltonian as
    /// `(row, col, value)`, duplicates summed.
    pub fn master_entries(&self) -> Vec<(usize, usize, Complex64)> {
        let mut entries: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
        for (i, &d) in self.diag.iter().enumerate() {
            if d != 0.0 {
                *entries.entry((i, i)).or_default() += Complex64::new(d, 0.0);
            }
        }
        for c in &self.couplings {
            *entries.entry((c.to, c.from)).or_default() += c.value;
            if c.kind == CouplingKind::Gap {
                *entries.entry((c.from, c.to)).or_default() += c.value.conj();
            }
        }
        entries
            .into_iter()
            .filter(|(_, v)| *v != Complex64::new(0.0, 0.0))
            .map(|((r, c), v)| (r, c, v))
            .collect()
    }

    /// Same graph with every initial amplitude multiplied by `factor`.
    pub fn with_scaled_amplitudes(&self, factor: Complex64) -> SystemGraph {
        let mut g = self.clone();
        for a in &mut g.initial_amplitudes {
            *a *= factor;
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonHermitian {
        from: usize,
        to: usize,
    },
    SelfCoupling {
        index: usize,
    },
    OverlappingMembership {
        index: usize,
        components: Vec<ComponentId>,
    },
    Uncovered {
        index: usize,
    },
    GapInternal {
        from: usize,
        to: usize,
        component: ComponentId,
    },
    GapBetweenRealized {
        from: usize,
        to: usize,
    },
    ContinuousCrossesComponents {
        from: usize,
        to: usize,
    },
    InitialAmplitudeOutsideRealized {
        index: usize,
        component: ComponentId,
    },
    InitialPhantom {
        component: ComponentId,
    },
    NoRealized,
    ReadyNotAdjacentToRealized {
        component: ComponentId,
    },
    Unreachable {
        component: ComponentId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonHermitian { from, to } => write!(
                f,
                "non-Hermitian: continuous coupling {from} -> {to} has no matching conjugate {to} -> {from}"
            ),
            Violation::SelfCoupling { index } => {
                write!(f, "self coupling on state {index}: energies belong in diag")
            }
            Violation::OverlappingMembership { index, components } => {
                write!(f, "overlapping membership: state {index} is in components {components:?}")
            }
            Violation::Uncovered { index } => write!(f, "state {index} belongs to no component"),
            Violation::GapInternal {
                from,
                to,
                component,
            } => write!(f, "gap {from} -> {to} is internal to component {component}"),
            Violation::GapBetweenRealized { from, to } => {
                write!(f, "gap {from} -> {to} joins two initially realized components")
            }
            Violation::ContinuousCrossesComponents { from, to } => {
                write!(f, "continuous coupling {from} -> {to} crosses a component boundary")
            }
            Violation::InitialAmplitudeOutsideRealized { index, component } => write!(
                f,
                "initial amplitude on state {index} in non-realized component {component}"
            ),
            Violation::InitialPhantom { component } => {
                write!(f, "component {component} starts as phantom")
            }
            Violation::NoRealized => write!(f, "no initially realized component"),
            Violation::ReadyNotAdjacentToRealized { component } => write!(
                f,
                "ready not adjacent to realized: component {component} has no gap from a realized component"
            ),
            Violation::Unreachable { component } => write!(
                f,
                "unreachable: component {component} has no coupling path from the initial realized set"
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_pass() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pass() {
            return write!(f, "pass");
        }
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

pub fn validate(graph: &SystemGraph) -> ValidationReport {
    let mut violations = Vec::new();
    let initial = graph.initial_statuses();

    let mut memberships: Vec<Vec<ComponentId>> = vec![Vec::new(); graph.dim()];
    for c in graph.components() {
        for &m in &c.members {
            if !memberships[m].contains(&c.id) {
                memberships[m].push(c.id);
            }
        }
    }
    for (index, owners) in memberships.iter().enumerate() {
        match owners.len() {
            0 => violations.push(Violation::Uncovered { index }),
            1 => {}
            _ => violations.push(Violation::OverlappingMembership {
                index,
                components: owners.clone(),
            }),
        }
    }

    let mut continuous: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    for c in graph.couplings() {
        let owners = (graph.owner(c.from), graph.owner(c.to));
        match c.kind {
            CouplingKind::Continuous => {
                if c.from == c.to {
                    violations.push(Violation::SelfCoupling { index: c.from });
                    continue;
                }
                *continuous.entry((c.from, c.to)).or_default() += c.value;
                if let (Some(a), Some(b)) = owners {
                    if a != b {
                        violations.push(Violation::ContinuousCrossesComponents {
                            from: c.from,
                            to: c.to,
                        });
                    }
                }
            }
            CouplingKind::Gap => {
                if let (Some(a), Some(b)) = owners {
                    if a == b {
                        violations.push(Violation::GapInternal {
                            from: c.from,
                            to: c.to,
                            component: a,
                        });
                    } else if initial.get(a) == Status::Realized
                        && initial.get(b) == Status::Realized
                    {
                        violations.push(Violation::GapBetweenRealized {
                            from: c.from,
                            to: c.to,
                        });
                    }
                }
            }
        }
    }
    for (&(from, to), &v) in &continuous {
        let partner = continuous.get(&(to, from)).copied().unwrap_or_default();
        let scale = v.norm().max(partner.norm()).max(1.0);
        if (partner - v.conj()).norm() > HERMITIAN_TOL * scale {
            // report each offending pair once
            if from < to || !continuous.contains_key(&(to, from)) {
                violations.push(Violation::NonHermitian { from, to });
            }
        }
    }

    for c in graph.components() {
        if c.initial_status == Status::Phantom {
            violations.push(Violation::InitialPhantom { component: c.id });
        }
        if c.initial_status != Status::Realized {
            for &m in &c.members {
                if graph.initial_amplitudes()[m] != Complex64::new(0.0, 0.0) {
                    violations.push(Violation::InitialAmplitudeOutsideRealized {
                        index: m,
                        component: c.id,
                    });
                }
            }
        }
    }
    // amplitude on a state owned by no component
    for (index, owners) in memberships.iter().enumerate() {
        if owners.is_empty() && graph.initial_amplitudes()[index] != Complex64::new(0.0, 0.0) {
            violations.push(Violation::Uncovered { index });
        }
    }

    if initial.count(Status::Realized) == 0 {
        violations.push(Violation::NoRealized);
    } else {
        let mut demoted = initial.clone();
        for (id, s) in initial.iter() {
            if s == Status::Ready {
                demoted.set(id, Status::Dormant);
            }
        }
        if let Ok(expected) = classify(graph, &demoted) {
            for (id, s) in initial.iter() {
                if s == Status::Ready && expected.get(id) != Status::Ready {
                    violations.push(Violation::ReadyNotAdjacentToRealized { component: id });
                }
            }
        }
        for id in unreachable_components(graph, &initial) {
            violations.push(Violation::Unreachable { component: id });
        }
    }

    ValidationReport { violations }
}

/// Components with no coupling path (continuous either way, gaps forward)
/// from the realized set.
fn unreachable_components(graph: &SystemGraph, statuses: &StatusMap) -> Vec<ComponentId> {
    let dim = graph.dim();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); dim];
    for c in graph.couplings() {
        adjacency[c.from].push(c.to);
        if c.kind == CouplingKind::Continuous {
            adjacency[c.to].push(c.from);
        }
    }
    let mut seen = vec![false; dim];
    let mut queue = VecDeque::new();
    for id in statuses.with_status(Status::Realized) {
        for &m in &graph.components()[id.0].members {
            if !seen[m] {
                seen[m] = true;
                queue.push_back(m);
            }
        }
    }
    while let Some(n) = queue.pop_front() {
        for &m in &adjacency[n] {
            if !seen[m] {
                seen[m] = true;
                queue.push_back(m);
            }
        }
    }
    graph
        .components()
        .iter()
        .filter(|c| !c.members.iter().any(|&m| seen[m]))
        .map(|c| c.id)
        .collect()
}

/// Promotes every dormant component that receives a gap from a realized
/// component to ready. Realized, ready and phantom statuses are left alone.
pub fn classify(graph: &SystemGraph, statuses: &StatusMap) -> Result<StatusMap> {
    if statuses.count(Status::Realized) == 0 {
        return Err(Error::NoRealized);
    }
    let mut out = statuses.clone();
    for gap in graph.gaps() {
        let (Some(src), Some(dst)) = (graph.owner(gap.from), graph.owner(gap.to)) else {
            continue;
        };
        if statuses.get(src) == Status::Realized && statuses.get(dst) == Status::Dormant {
            out.set(dst, Status::Ready);
        }
    }
    Ok(out)
}

/// Convenience constructor used by the scenario builders and tests.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    basis: Vec<BasisState>,
    components: Vec<Component>,
    diag: Vec<f64>,
    couplings: Vec<Coupling>,
    amplitudes: Vec<Complex64>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&mut self, label: impl Into<String>, tags: &[&str]) -> usize {
        let index = self.basis.len();
        self.basis.push(BasisState {
            index,
            label: label.into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        });
        self.diag.push(0.0);
        self.amplitudes.push(Complex64::new(0.0, 0.0));
        index
    }

    pub fn component(
        &mut self,
        label: impl Into<String>,
        members: &[usize],
        status: Status,
    ) -> ComponentId {
        let id = ComponentId(self.components.len());
        self.components.push(Component {
            id,
            label: label.into(),
            members: members.to_vec(),
            initial_status: status,
        });
        id
    }

    pub fn energy(&mut self, index: usize, e: f64) -> &mut Self {
        self.diag[index] = e;
        self
    }

    /// Hermitian pair `H[b][a] = value`, `H[a][b] = conj(value)`.
    pub fn hopping(&mut self, a: usize, b: usize, value: Complex64) -> &mut Self {
        self.couplings.push(Coupling {
            from: a,
            to: b,
            value,
            kind: CouplingKind::Continuous,
        });
        self.couplings.push(Coupling {
            from: b,
            to: a,
            value: value.conj(),
            kind: CouplingKind::Continuous,
        });
        self
    }

    pub fn gap(&mut self, from: usize, to: usize, value: Complex64) -> &mut Self {
        self.couplings.push(Coupling {
            from,
            to,
            value,
            kind: CouplingKind::Gap,
        });
        self
    }

    pub fn raw_coupling(&mut self, coupling: Coupling) -> &mut Self {
        self.couplings.push(coupling);
        self
    }

    pub fn amplitude(&mut self, index: usize, a: Complex64) -> &mut Self {
        self.amplitudes[index] = a;
        self
    }

    pub fn build(self) -> Result<SystemGraph> {
        SystemGraph::new(
            self.basis,
            self.components,
            self.diag,
            self.couplings,
            self.amplitudes,
        )
    }
}
