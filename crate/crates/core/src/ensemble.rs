//! Monte Carlo ensembles: independent trials on per-trial RNG streams,
//! aggregation in trial order, invariant checks and oracle comparison.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::reduction::{
    outcome_signature, run_trajectory, trial_rng, TrajectoryConfig, TrajectoryRecord,
};
use crate::scenarios::ScenarioSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub trials: u64,
    pub seed: u64,
    /// Index of the first trial, for sharded runs.
    pub first_trial: u64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub trajectory: TrajectoryConfig,
    pub bin_width: f64,
    pub n_bins: usize,
}

impl EnsembleConfig {
    pub fn new(spec: &ScenarioSpec, trials: u64, seed: u64) -> Self {
        EnsembleConfig {
            trials,
            seed,
            first_trial: 0,
            workers: 0,
            trajectory: spec.trajectory_config(),
            bin_width: spec.meta.t_max / 200.0,
            n_bins: 200,
        }
    }
}

/// Runs trials `first_trial .. first_trial + trials` and returns their
/// records in trial order. The first failing trial, by index, is reported.
pub fn run_records(spec: &ScenarioSpec, cfg: &EnsembleConfig) -> Result<Vec<TrajectoryRecord>> {
    if cfg.trials == 0 {
        return Err(Error::InvalidParameter("need at least one trial".into()));
    }
    let run =
        |i: u64| -> Result<TrajectoryRecord> {
            let mut rng = trial_rng(cfg.seed, i);
            let mut rec = run_trajectory(&spec.graph, &spec.id, &mut rng, &cfg.trajectory)
                .map_err(|e| Error::Trial {
                    index: i,
                    source: Box::new(e),
                })?;
            rec.seed = cfg.seed;
            rec.trial = i;
            Ok(rec)
        };
    let range = cfg.first_trial..cfg.first_trial + cfg.trials;
    let results: Vec<Result<TrajectoryRecord>> = if cfg.workers == 1 {
        range.map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
        pool.install(|| range.into_par_iter().map(run).collect())
    };
    results.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Histogram {
    pub slot: usize,
    pub bin_width: f64,
    pub counts: Vec<u64>,
    /// Times past the last bin, plus trials without an event in this slot.
    pub overflow: u64,
}

impl Histogram {
    fn empty(slot: usize, bin_width: f64, n_bins: usize) -> Self {
        Histogram {
            slot,
            bin_width,
            counts: vec![0; n_bins],
            overflow: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InvariantFailure {
    pub trial: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutcomeComparison {
    pub outcome: String,
    pub count: u64,
    pub frequency: f64,
    pub oracle_p: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Comparison {
    pub outcomes: Vec<OutcomeComparison>,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub z_threshold: f64,
    pub p_threshold: f64,
    /// Observed outcomes to which the oracle assigns no probability.
    pub uncovered: Vec<String>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutcomeStats {
    pub scenario: String,
    pub n: u64,
    pub complete: u64,
    pub outcome_counts: BTreeMap<String, u64>,
    pub hit_time_histograms: Vec<Histogram>,
    pub invariant_failures: Vec<InvariantFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_comparison: Option<Comparison>,
}

impl OutcomeStats {
    pub fn from_records(
        spec: &ScenarioSpec,
        records: &[TrajectoryRecord],
        bin_width: f64,
        n_bins: usize,
    ) -> Result<Self> {
        if !(bin_width > 0.0) || n_bins == 0 {
            return Err(Error::InvalidParameter(format!(
                "histogram needs a positive bin width and at least one bin, got {bin_width} x {n_bins}"
            )));
        }
        let slots = records.iter().map(|r| r.events.len()).max().unwrap_or(0);
        let mut hist: Vec<Histogram> = (0..slots)
            .map(|s| Histogram::empty(s, bin_width, n_bins))
            .collect();
        let mut outcome_counts = BTreeMap::new();
        let mut complete = 0;
        for r in records {
            *outcome_counts
                .entry(outcome_signature(&spec.graph, &r.chosen()))
                .or_insert(0) += 1;
            complete += r.complete as u64;
            for (slot, h) in hist.iter_mut().enumerate() {
                match r.events.get(slot) {
                    Some(e) => {
                        let bin = (e.t_sc / bin_width).floor();
                        if bin >= 0.0 && (bin as usize) < n_bins {
                            h.counts[bin as usize] += 1;
                        } else {
                            h.overflow += 1;
                        }
                    }
                    None => h.overflow += 1,
                }
            }
        }
        Ok(OutcomeStats {
            scenario: spec.id.clone(),
            n: records.len() as u64,
            complete,
            outcome_counts,
            hit_time_histograms: hist,
            invariant_failures: check_invariants(records, spec),
            oracle_comparison: None,
        })
    }

    /// Combines two disjoint shards. Associative and independent of order.
    pub fn merge(&self, other: &OutcomeStats) -> Result<OutcomeStats> {
        if self.scenario != other.scenario {
            return Err(Error::InvalidParameter(format!(
                "cannot merge `{}` with `{}`",
                self.scenario, other.scenario
            )));
        }
        let template = self
            .hit_time_histograms
            .first()
            .or(other.hit_time_histograms.first());
        if let (Some(a), Some(b)) = (
            self.hit_time_histograms.first(),
            other.hit_time_histograms.first(),
        ) {
            if a.bin_width != b.bin_width || a.counts.len() != b.counts.len() {
                return Err(Error::InvalidParameter("histogram binning differs".into()));
            }
        }
        let slots = self
            .hit_time_histograms
            .len()
            .max(other.hit_time_histograms.len());
        let pick = |side: &OutcomeStats, s: usize| -> Histogram {
            side.hit_time_histograms.get(s).cloned().unwrap_or_else(|| {
                let t = template.expect("some side has a slot");
                let mut h = Histogram::empty(s, t.bin_width, t.counts.len());
                h.overflow = side.n;
                h
            })
        };
        let hit_time_histograms = (0..slots)
            .map(|s| {
                let (a, b) = (pick(self, s), pick(other, s));
                Histogram {
                    slot: s,
                    bin_width: a.bin_width,
                    counts: a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect(),
                    overflow: a.overflow + b.overflow,
                }
            })
            .collect();
        let mut outcome_counts = self.outcome_counts.clone();
        for (k, v) in &other.outcome_counts {
            *outcome_counts.entry(k.clone()).or_insert(0) += v;
        }
        let mut invariant_failures: Vec<InvariantFailure> = self
            .invariant_failures
            .iter()
            .chain(&other.invariant_failures)
            .cloned()
            .collect();
        invariant_failures.sort();
        Ok(OutcomeStats {
            scenario: self.scenario.clone(),
            n: self.n + other.n,
            complete: self.complete + other.complete,
            outcome_counts,
            hit_time_histograms,
            invariant_failures,
            oracle_comparison: None,
        })
    }
}

pub fn run_ensemble(spec: &ScenarioSpec, cfg: &EnsembleConfig) -> Result<OutcomeStats> {
    let records = run_records(spec, cfg)?;
    OutcomeStats::from_records(spec, &records, cfg.bin_width, cfg.n_bins)
}

fn check_record(r: &TrajectoryRecord, spec: &ScenarioSpec, out: &mut Vec<String>) {
    let meta = &spec.meta;
    let graph = &spec.graph;
    for w in r.events.windows(2) {
        if !(w[1].t_sc > w[0].t_sc) {
            out.push(format!(
                "event times not increasing: {} then {}",
                w[0].t_sc, w[1].t_sc
            ));
        }
    }
    let chosen = r.chosen();
    let sig = || outcome_signature(graph, &chosen);
    if r.complete {
        let n = chosen.len();
        if n < meta.min_events || meta.max_events.is_some_and(|m| n > m) {
            out.push(format!("completed with {n} events: {}", sig()));
        }
    }
    if let Some(seqs) = &meta.sequences {
        let ok = seqs.iter().any(|s| {
            if r.complete {
                *s == chosen
            } else {
                s.len() > chosen.len() && s[..chosen.len()] == chosen[..]
            }
        });
        if !ok {
            out.push(format!("sequence not allowed: {}", sig()));
        }
    }
    if !meta.zero_before_first_hit.is_empty() {
        match r.stage_tag_peaks.first() {
            Some(peaks) => {
                for tag in &meta.zero_before_first_hit {
                    match peaks.get(tag) {
                        Some(&0.0) => {}
                        Some(&p) => {
                            out.push(format!("tag {tag} reached {p:e} before the first event"))
                        }
                        None => out.push(format!("tag {tag} was not recorded")),
                    }
                }
            }
            None => out.push("no stage peaks recorded".into()),
        }
    }
    if let Some(prefix) = &meta.single_support_prefix {
        if !r.events.is_empty() {
            let groups: std::collections::BTreeSet<&str> = r
                .terminal_support
                .iter()
                .flat_map(|&m| graph.basis()[m].tags.iter())
                .filter(|t| t.starts_with(prefix.as_str()))
                .map(|t| t.as_str())
                .collect();
            if groups.len() != 1 {
                out.push(format!(
                    "terminal support spans {} `{prefix}` groups",
                    groups.len()
                ));
            }
        }
    }
}

/// Evaluates the scenario assertions on every record.
pub fn check_invariants(
    records: &[TrajectoryRecord],
    spec: &ScenarioSpec,
) -> Vec<InvariantFailure> {
    let mut failures = Vec::new();
    let mut buf = Vec::new();
    for r in records {
        check_record(r, spec, &mut buf);
        failures.extend(buf.drain(..).map(|message| InvariantFailure {
            trial: r.trial,
            message,
        }));
    }
    failures
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Significance {
    pub z: f64,
    pub p: f64,
}

impl Default for Significance {
    fn default() -> Self {
        Significance { z: 3.0, p: 0.001 }
    }
}

/// Expected counts below this are pooled for the chi-square test and exempt
/// from the per-outcome z gate.
pub const MIN_EXPECTED: f64 = 5.0;

/// Per-outcome binomial z-scores and a chi-square goodness-of-fit test of the
/// observed outcome counts against `oracle`.
pub fn compare_to_oracle(
    stats: &OutcomeStats,
    oracle: &BTreeMap<String, f64>,
    sig: Significance,
) -> Comparison {
    let n = stats.n as f64;
    let mut keys: Vec<&String> = oracle.keys().chain(stats.outcome_counts.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut outcomes = Vec::new();
    let mut uncovered = Vec::new();
    let mut z_ok = true;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for k in keys {
        let count = stats.outcome_counts.get(k).copied().unwrap_or(0);
        let p = oracle.get(k).copied().unwrap_or(0.0).clamp(0.0, 1.0);
        let expected = n * p;
        let var = n * p * (1.0 - p);
        let z = if var > 0.0 {
            (count as f64 - expected) / var.sqrt()
        } else if (count as f64 - expected).abs() < 0.5 {
            0.0
        } else {
            f64::INFINITY
        };
        if p == 0.0 && count > 0 {
            uncovered.push(k.clone());
        }
        if expected >= MIN_EXPECTED && z.abs() > sig.z {
            z_ok = false;
        }
        cells.push((count as f64, expected));
        outcomes.push(OutcomeComparison {
            outcome: k.clone(),
            count,
            frequency: count as f64 / n,
            oracle_p: p,
            z,
        });
    }

    let (mut kept, small): (Vec<_>, Vec<_>) = cells.into_iter().partition(|c| c.1 >= MIN_EXPECTED);
    let pooled = small
        .iter()
        .fold((0.0, 0.0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    if pooled.1 >= MIN_EXPECTED || (kept.is_empty() && pooled.1 > 0.0) {
        kept.push(pooled);
    } else if pooled.1 > 0.0 || pooled.0 > 0.0 {
        let smallest = kept
            .iter_mut()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("kept is non-empty");
        smallest.0 += pooled.0;
        smallest.1 += pooled.1;
    }
    let chi_square: f64 = kept
        .iter()
        .map(|&(o, e)| if e > 0.0 { (o - e) * (o - e) / e } else { 0.0 })
        .sum();
    let dof = kept.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(dof as f64).expect("positive dof");
        1.0 - dist.cdf(chi_square)
    };
    let pass = z_ok && uncovered.is_empty() && p_value > sig.p;
    Comparison {
        outcomes,
        chi_square,
        dof,
        p_value,
        z_threshold: sig.z,
        p_threshold: sig.p,
        uncovered,
        pass,
    }
}

/// Kolmogorov-Smirnov distance between the empirical distribution of `hits`
/// out of `n_total` trials and `cdf`. Trials without a hit sit beyond
/// `horizon`, where the comparison stops.
pub fn ks_distance(hits: &[f64], n_total: usize, horizon: f64, cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted: Vec<f64> = hits.iter().copied().filter(|&t| t <= horizon).collect();
    sorted.sort_by(f64::total_cmp);
    let n = n_total as f64;
    let mut d: f64 = 0.0;
    for (i, &t) in sorted.iter().enumerate() {
        let f = cdf(t);
        d = d
            .max((i as f64 / n - f).abs())
            .max(((i + 1) as f64 / n - f).abs());
    }
    d.max((sorted.len() as f64 / n - cdf(horizon)).abs())
}

/// Median of the first-event times, counting trials without an event as
/// later than every hit. `None` when fewer than half the trials hit.
pub fn median_first_hit(records: &[TrajectoryRecord]) -> Option<f64> {
    let mut t: Vec<f64> = records
        .iter()
        .filter_map(|r| r.events.first().map(|e| e.t_sc))
        .collect();
    t.sort_by(f64::total_cmp);
    let n = records.len();
    if n == 0 || 2 * t.len() < n + 1 {
        return None;
    }
    Some(if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t.get(n / 2).copied().unwrap_or(f64::INFINITY))
    })
}
