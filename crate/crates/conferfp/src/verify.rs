//! Label-only ownership verification.
//!
//! The suspect is an opaque label oracle: one input in, one class index
//! out. `compute_ard` issues exactly 2K queries (each pair's original and
//! perturbed example), journals every answer, and reports the
//! accuracy-robustness distance `ard = p_conf - p_ori` where `p_ori` is the
//! victim/suspect mismatch rate on originals and `p_conf` the match rate on
//! the perturbed examples, gated on each pair being adversarial for the
//! victim (guaranteed by the pair invariant). Populations of ARD values
//! yield robustness/uniqueness curves and their intersection area.

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintSet;
use crate::nn::{Network, Tensor};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Minimal black-box interface: one input image, one class index.
pub trait LabelOracle {
    fn suspect_id(&self) -> &str;
    fn label(&mut self, input: &Tensor) -> Result<usize>;
}

/// Local in-process model as an oracle.
pub struct NetworkOracle<'a> {
    pub id: String,
    pub net: &'a Network,
}

impl<'a> NetworkOracle<'a> {
    pub fn new(id: impl Into<String>, net: &'a Network) -> Self {
        NetworkOracle {
            id: id.into(),
            net,
        }
    }
}

impl LabelOracle for NetworkOracle<'_> {
    fn suspect_id(&self) -> &str {
        &self.id
    }

    fn label(&mut self, input: &Tensor) -> Result<usize> {
        let batched = input.view().insert_axis(Axis(0)).to_owned();
        Ok(self.net.predict(&batched)[0])
    }
}

/// Closure-backed oracle for tests and synthetic populations.
pub struct FnOracle<F: FnMut(&Tensor) -> Result<usize>> {
    pub id: String,
    pub f: F,
}

impl<F: FnMut(&Tensor) -> Result<usize>> LabelOracle for FnOracle<F> {
    fn suspect_id(&self) -> &str {
        &self.id
    }

    fn label(&mut self, input: &Tensor) -> Result<usize> {
        (self.f)(input)
    }
}

/// Which of the pair's two examples a query used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Original,
    Adversarial,
}

/// One journaled suspect answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub suspect_id: String,
    pub pair_index: usize,
    pub input_kind: InputKind,
    pub label: usize,
}

/// Append-only JSON-lines audit log of suspect queries.
pub struct Journal {
    writer: std::io::BufWriter<std::fs::File>,
}

impl Journal {
    pub fn append_to(path: &Path) -> Result<Journal> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Journal {
            writer: std::io::BufWriter::new(file),
        })
    }

    pub fn record(&mut self, entry: &JournalEntry) -> Result<()> {
        serde_json::to_writer(&mut self.writer, entry)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalEntry>> {
    let file = std::fs::File::open(path)?;
    let mut entries = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}

/// Replay oracle: serves labels recorded in a journal, keyed by
/// `(pair_index, input_kind)`.
pub struct TranscriptOracle {
    id: String,
    answers: std::collections::HashMap<(usize, InputKind), usize>,
}

impl TranscriptOracle {
    pub fn from_entries(suspect_id: &str, entries: &[JournalEntry]) -> TranscriptOracle {
        let mut answers = std::collections::HashMap::new();
        for e in entries.iter().filter(|e| e.suspect_id == suspect_id) {
            answers.insert((e.pair_index, e.input_kind), e.label);
        }
        TranscriptOracle {
            id: suspect_id.to_string(),
            answers,
        }
    }

    pub fn suspect_id(&self) -> &str {
        &self.id
    }

    fn answer(&self, pair_index: usize, kind: InputKind) -> Result<usize> {
        self.answers
            .get(&(pair_index, kind))
            .copied()
            .ok_or_else(|| {
                Error::NotFound(format!(
                    "journal lacks answer for pair {pair_index} ({kind:?})"
                ))
            })
    }
}

/// Per-pair verification bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub ori_mismatch: bool,
    pub conf_match: bool,
}

/// Verification verdict for one suspect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArdReport {
    pub suspect_id: String,
    pub k: usize,
    pub p_ori: f64,
    pub p_conf: f64,
    pub ard: f64,
    pub per_pair: Vec<PairOutcome>,
}

impl ArdReport {
    /// Rebuild the rates from the per-pair bits; used to assert the exact
    /// arithmetic identity.
    pub fn recompute(&self) -> (f64, f64, f64) {
        let ori = self.per_pair.iter().filter(|p| p.ori_mismatch).count();
        let conf = self.per_pair.iter().filter(|p| p.conf_match).count();
        let p_ori = ori as f64 / self.k as f64;
        let p_conf = conf as f64 / self.k as f64;
        (p_ori, p_conf, p_conf - p_ori)
    }
}

fn ard_from_labels(
    suspect_id: &str,
    victim_x: &[usize],
    victim_xp: &[usize],
    suspect_x: &[usize],
    suspect_xp: &[usize],
) -> ArdReport {
    let k = victim_x.len();
    let mut per_pair = Vec::with_capacity(k);
    let mut ori = 0usize;
    let mut conf = 0usize;
    for i in 0..k {
        let ori_mismatch = victim_x[i] != suspect_x[i];
        // the adversarial gate: the pair invariant guarantees
        // victim_xp != victim_x, so the first indicator is always 1 for a
        // valid set; it is still evaluated to keep the computation honest
        let conf_match = (victim_xp[i] != victim_x[i]) && (victim_xp[i] == suspect_xp[i]);
        per_pair.push(PairOutcome {
            ori_mismatch,
            conf_match,
        });
        ori += ori_mismatch as usize;
        conf += conf_match as usize;
    }
    let p_ori = ori as f64 / k as f64;
    let p_conf = conf as f64 / k as f64;
    ArdReport {
        suspect_id: suspect_id.to_string(),
        k,
        p_ori,
        p_conf,
        ard: p_conf - p_ori,
        per_pair,
    }
}

/// Query the suspect on every pair (original first, then adversarial) and
/// compute the ARD report. Exactly `2K` queries are issued; a mid-run
/// oracle failure surfaces as a partial-result error with the number of
/// completed answers.
pub fn compute_ard(
    fingerprints: &FingerprintSet,
    suspect: &mut dyn LabelOracle,
    mut journal: Option<&mut Journal>,
) -> Result<ArdReport> {
    let k = fingerprints.k();
    if k == 0 {
        return Err(Error::Validation("empty fingerprint set".into()));
    }
    let mut suspect_x = Vec::with_capacity(k);
    let mut suspect_xp = Vec::with_capacity(k);
    let mut completed = 0usize;
    for (i, pair) in fingerprints.pairs.iter().enumerate() {
        for (kind, input, sink) in [
            (InputKind::Original, &pair.x, &mut suspect_x),
            (InputKind::Adversarial, &pair.x_prime, &mut suspect_xp),
        ] {
            let label = suspect.label(input).map_err(|e| Error::PartialResult {
                completed,
                reason: e.to_string(),
            })?;
            if let Some(j) = journal.as_deref_mut() {
                j.record(&JournalEntry {
                    suspect_id: suspect.suspect_id().to_string(),
                    pair_index: i,
                    input_kind: kind,
                    label,
                })?;
            }
            sink.push(label);
            completed += 1;
        }
    }
    if let Some(j) = journal.as_deref_mut() {
        j.flush()?;
    }
    Ok(ard_from_labels(
        suspect.suspect_id(),
        &fingerprints.victim_x_labels(),
        &fingerprints.victim_xp_labels(),
        &suspect_x,
        &suspect_xp,
    ))
}

/// Recompute a report from journaled answers without touching the suspect.
pub fn replay_ard(fingerprints: &FingerprintSet, suspect_id: &str, journal: &Path) -> Result<ArdReport> {
    let entries = read_journal(journal)?;
    let oracle = TranscriptOracle::from_entries(suspect_id, &entries);
    let k = fingerprints.k();
    let mut suspect_x = Vec::with_capacity(k);
    let mut suspect_xp = Vec::with_capacity(k);
    for i in 0..k {
        suspect_x.push(oracle.answer(i, InputKind::Original)?);
        suspect_xp.push(oracle.answer(i, InputKind::Adversarial)?);
    }
    Ok(ard_from_labels(
        suspect_id,
        &fingerprints.victim_x_labels(),
        &fingerprints.victim_xp_labels(),
        &suspect_x,
        &suspect_xp,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pirated,
    Irrelevant,
}

/// Strict threshold rule: pirated iff `ard > threshold`.
pub fn classify(report: &ArdReport, threshold: f64) -> Verdict {
    if report.ard > threshold {
        Verdict::Pirated
    } else {
        Verdict::Irrelevant
    }
}

/// Threshold-indexed robustness/uniqueness curves and their intersection
/// area over the open interval (0, 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArucResult {
    pub thresholds: Vec<f64>,
    pub robustness: Vec<f64>,
    pub uniqueness: Vec<f64>,
    pub aruc: f64,
}

/// Robustness(t) = fraction of pirated ARDs strictly above `t`;
/// uniqueness(t) = fraction of irrelevant ARDs at or below `t`. The grid is
/// uniform over the open interval and the area is the trapezoidal integral
/// of the pointwise minimum.
pub fn compute_curves(
    pirated_ards: &[f64],
    irrelevant_ards: &[f64],
    grid_size: usize,
) -> Result<ArucResult> {
    if pirated_ards.is_empty() || irrelevant_ards.is_empty() {
        return Err(Error::Validation(
            "both suspect populations must be non-empty".into(),
        ));
    }
    if grid_size < 2 {
        return Err(Error::Validation("grid_size must be at least 2".into()));
    }
    let g = grid_size;
    let mut thresholds = Vec::with_capacity(g);
    let mut robustness = Vec::with_capacity(g);
    let mut uniqueness = Vec::with_capacity(g);
    for i in 1..=g {
        let t = i as f64 / (g + 1) as f64;
        let r = pirated_ards.iter().filter(|&&a| a > t).count() as f64
            / pirated_ards.len() as f64;
        let u = irrelevant_ards.iter().filter(|&&a| a <= t).count() as f64
            / irrelevant_ards.len() as f64;
        thresholds.push(t);
        robustness.push(r);
        uniqueness.push(u);
    }
    let mut aruc = 0.0;
    for i in 1..g {
        let h = thresholds[i] - thresholds[i - 1];
        let a = robustness[i - 1].min(uniqueness[i - 1]);
        let b = robustness[i].min(uniqueness[i]);
        aruc += h * (a + b) / 2.0;
    }
    Ok(ArucResult {
        thresholds,
        robustness,
        uniqueness,
        aruc,
    })
}

/// Fraction of examples on which two oracles answer identically.
pub fn label_matching_rate(
    a: &mut dyn LabelOracle,
    b: &mut dyn LabelOracle,
    examples: &[Tensor],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Validation("no examples supplied".into()));
    }
    let mut same = 0usize;
    for (i, x) in examples.iter().enumerate() {
        let la = a.label(x).map_err(|e| Error::PartialResult {
            completed: i,
            reason: e.to_string(),
        })?;
        let lb = b.label(x).map_err(|e| Error::PartialResult {
            completed: i,
            reason: e.to_string(),
        })?;
        if la == lb {
            same += 1;
        }
    }
    Ok(same as f64 / examples.len() as f64)
}

/// Serialize a report deterministically (fixed field order, fixed float
/// formatting) so replays are byte-identical.
pub fn report_to_json(report: &ArdReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialization")
}
