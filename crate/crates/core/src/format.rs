//! JSON scenario files.
//!
//! ```json
//! {
//!   "basis": [{"index": 0, "label": "psi d0", "tags": []}, ...],
//!   "components": [{"id": 0, "label": "...", "members": [0], "initialStatus": "realized"}, ...],
//!   "diag": [0.0, ...],
//!   "couplings": [{"from": 0, "to": 1, "re": 1.0, "im": 0.0, "kind": "gap"}, ...],
//!   "initialAmplitudes": [{"index": 0, "re": 1.0, "im": 0.0}]
//! }
//! ```
//!
//! Amplitudes not listed are zero. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{
    BasisState, Component, ComponentId, Coupling, CouplingKind, Status, SystemGraph,
};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct GraphFile {
    basis: Vec<BasisFile>,
    components: Vec<ComponentFile>,
    diag: Vec<f64>,
    couplings: Vec<CouplingFile>,
    initial_amplitudes: Vec<AmplitudeFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisFile {
    index: usize,
    label: String,
    #[serde(default)]
    tags: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct ComponentFile {
    id: usize,
    label: String,
    members: Vec<usize>,
    initial_status: Status,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingFile {
    from: usize,
    to: usize,
    re: f64,
    im: f64,
    kind: CouplingKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AmplitudeFile {
    index: usize,
    re: f64,
    im: f64,
}

pub fn to_json(graph: &SystemGraph) -> String {
    let file = GraphFile {
        basis: graph
            .basis()
            .iter()
            .map(|b| BasisFile {
                index: b.index,
                label: b.label.clone(),
                tags: b.tags.clone(),
            })
            .collect(),
        components: graph
            .components()
            .iter()
            .map(|c| ComponentFile {
                id: c.id.0,
                label: c.label.clone(),
                members: c.members.clone(),
                initial_status: c.initial_status,
            })
            .collect(),
        diag: graph.diag().to_vec(),
        couplings: graph
            .couplings()
            .iter()
            .map(|c| CouplingFile {
                from: c.from,
                to: c.to,
                re: c.value.re,
                im: c.value.im,
                kind: c.kind,
            })
            .collect(),
        initial_amplitudes: graph
            .initial_amplitudes()
            .iter()
            .enumerate()
            .filter(|(_, a)| a.re != 0.0 || a.im != 0.0)
            .map(|(index, a)| AmplitudeFile {
                index,
                re: a.re,
                im: a.im,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("graph serializes")
}

pub fn from_json(text: &str) -> Result<SystemGraph> {
    let file: GraphFile = serde_json::from_str(text)?;
    let dim = file.basis.len();
    let mut amplitudes = vec![Complex64::new(0.0, 0.0); dim];
    for a in &file.initial_amplitudes {
        let slot = amplitudes.get_mut(a.index).ok_or_else(|| {
            Error::Format(format!(
                "initial amplitude index {} outside basis of size {dim}",
                a.index
            ))
        })?;
        *slot = Complex64::new(a.re, a.im);
    }
    SystemGraph::new(
        file.basis
            .into_iter()
            .map(|b| BasisState {
                index: b.index,
                label: b.label,
                tags: b.tags,
            })
            .collect(),
        file.components
            .into_iter()
            .map(|c| Component {
                id: ComponentId(c.id),
                label: c.label,
                members: c.members,
                initial_status: c.initial_status,
            })
            .collect(),
        file.diag,
        file.couplings
            .into_iter()
            .map(|c| Coupling {
                from: c.from,
                to: c.to,
                value: Complex64::new(c.re, c.im),
                kind: c.kind,
            })
            .collect(),
        amplitudes,
    )
}

pub fn read_graph(path: &Path) -> Result<SystemGraph> {
    from_json(&std::fs::read_to_string(path)?)
}
