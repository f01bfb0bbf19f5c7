//! Network records, pool construction, and the training routines that
//! populate the zoo: the victim on `d_v`, extraction-derived positives on
//! `d_p` under the victim's labels, and independently initialized negatives
//! on `d_v` with true labels.

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    build_classifier, cross_entropy, distillation_kl, Arch, Network, Sgd, Tensor,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Victim,
    Positive,
    Negative,
    Pirated,
    Irrelevant,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Victim => "victim",
            Role::Positive => "positive",
            Role::Negative => "negative",
            Role::Pirated => "pirated",
            Role::Irrelevant => "irrelevant",
        };
        f.write_str(s)
    }
}

/// Parent pointer plus a human-readable attack descriptor string, e.g.
/// `extract-label` or `extract-label->adv-train`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: String,
    pub attack: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub role: Role,
    pub arch: Arch,
    pub lineage: Option<Lineage>,
    pub weights_ref: String,
    pub test_accuracy: f64,
    pub seed: u64,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ModelRecord {
    pub fn validate(&self) -> Result<()> {
        match self.role {
            Role::Positive | Role::Pirated => {
                if self.lineage.is_none() {
                    return Err(Error::Validation(format!(
                        "{} record `{}` must carry lineage",
                        self.role, self.model_id
                    )));
                }
            }
            Role::Negative | Role::Irrelevant => {
                if self.lineage.is_some() {
                    return Err(Error::Validation(format!(
                        "{} record `{}` must not carry lineage",
                        self.role, self.model_id
                    )));
                }
            }
            Role::Victim => {}
        }
        if !(0.0..=1.0).contains(&self.test_accuracy) {
            return Err(Error::Validation(format!(
                "test_accuracy {} outside [0, 1]",
                self.test_accuracy
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolRole {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolPurpose {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPool {
    pub pool_id: String,
    pub role: PoolRole,
    pub member_ids: Vec<String>,
    pub purpose: PoolPurpose,
}

/// Four pairwise-disjoint pools (positive/negative x train/validation),
/// `m_train` + `m_val` members each per role, in record order.
pub fn build_pools(
    records: &[ModelRecord],
    m_train: usize,
    m_val: usize,
) -> Result<[NetworkPool; 4]> {
    let pick = |role: Role, pool_role: PoolRole| -> Result<(NetworkPool, NetworkPool)> {
        let ids: Vec<String> = records
            .iter()
            .filter(|r| r.role == role)
            .map(|r| r.model_id.clone())
            .collect();
        if ids.len() < m_train + m_val {
            return Err(Error::Capacity {
                what: format!("{role} records"),
                needed: m_train + m_val,
                available: ids.len(),
            });
        }
        let train = NetworkPool {
            pool_id: format!("{role}-train"),
            role: pool_role,
            member_ids: ids[..m_train].to_vec(),
            purpose: PoolPurpose::Train,
        };
        let val = NetworkPool {
            pool_id: format!("{role}-val"),
            role: pool_role,
            member_ids: ids[m_train..m_train + m_val].to_vec(),
            purpose: PoolPurpose::Validation,
        };
        Ok((train, val))
    };
    let (pt, pv) = pick(Role::Positive, PoolRole::Positive)?;
    let (nt, nv) = pick(Role::Negative, PoolRole::Negative)?;
    Ok([pt, pv, nt, nv])
}

/// Shared hyperparameters for classifier training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 128,
            lr: 0.001,
            momentum: 0.9,
        }
    }
}

/// Label source for `train_classifier`; which one is used is recorded in
/// each record's `label_source` metadata so audits can confirm positives
/// never saw ground truth.
pub enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a Array2<f32>),
}

/// Mini-batch SGD over a fixed image set. Returns per-epoch mean losses.
/// `mask`, when given, restricts which parameter slots may change.
pub fn train_classifier(
    net: &mut Network,
    images: &Tensor,
    targets: &Targets,
    cfg: &TrainConfig,
    seed: u64,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    let mut opt = Sgd::new(net, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = select_batch(images, chunk);
            let (logits, tape) = net.forward_traced(&x);
            let logits2 = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
            let (loss, dlogits) = match targets {
                Targets::Hard(labels) => {
                    let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    cross_entropy(&logits2, &batch_labels)
                }
                Targets::Soft(probs) => {
                    let rows: Vec<usize> = chunk.to_vec();
                    let teacher = probs.select(ndarray::Axis(0), &rows);
                    distillation_kl(&logits2, &teacher)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss {loss}"),
                });
            }
            let mut grads = net.grad_slots();
            net.backward(&tape, dlogits.into_dyn(), Some(&mut grads));
            opt.step(net, &grads, mask);
            epoch_loss += loss as f64;
            batches += 1;
        }
        log.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }
    Ok(log)
}

fn select_batch(images: &Tensor, rows: &[usize]) -> Tensor {
    images.select(ndarray::Axis(0), rows)
}

/// Fraction of correct top-1 predictions over `indices`, batched.
pub fn evaluate_accuracy(net: &Network, ds: &Dataset, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let x = ds.batch(chunk);
        let pred = net.predict(&x);
        for (p, &i) in pred.iter().zip(chunk) {
            if *p == ds.labels[i] {
                correct += 1;
            }
        }
    }
    correct as f64 / indices.len() as f64
}

/// Fraction of identical argmax labels between two networks on `indices`.
pub fn label_agreement(a: &Network, b: &Network, ds: &Dataset, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut same = 0usize;
    for chunk in indices.chunks(256) {
        let x = ds.batch(chunk);
        let pa = a.predict(&x);
        let pb = b.predict(&x);
        same += pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
    }
    same as f64 / indices.len() as f64
}

/// Victim labels over `indices`, read from the disk cache when present.
pub fn victim_labels_cached(
    victim: &Network,
    ds: &Dataset,
    indices: &[usize],
    cache: Option<&Path>,
) -> Result<Vec<usize>> {
    if let Some(path) = cache {
        if path.is_file() {
            let text = std::fs::read_to_string(path)?;
            let labels: Vec<usize> = serde_json::from_str(&text)?;
            if labels.len() == indices.len() {
                return Ok(labels);
            }
        }
    }
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        labels.extend(victim.predict(&ds.batch(chunk)));
    }
    if let Some(path) = cache {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(&labels)?)?;
    }
    Ok(labels)
}

fn finish_record(
    model_id: &str,
    role: Role,
    arch: Arch,
    lineage: Option<Lineage>,
    seed: u64,
    net: &Network,
    ds: &Dataset,
    eval: &[usize],
    label_source: &str,
) -> ModelRecord {
    let mut metadata = BTreeMap::new();
    metadata.insert(
        "label_source".to_string(),
        serde_json::Value::String(label_source.to_string()),
    );
    ModelRecord {
        model_id: model_id.to_string(),
        role,
        arch,
        lineage,
        weights_ref: format!("{model_id}/weights.bin"),
        test_accuracy: evaluate_accuracy(net, ds, eval),
        seed,
        input_shape: ds.input_shape(),
        num_classes: ds.num_classes,
        metadata,
    }
}

/// Train the victim on `d_v` with true labels.
pub fn train_victim(
    ds: &Dataset,
    split: &DataSplit,
    arch: Arch,
    hyper: &TrainConfig,
    seed: u64,
    model_id: &str,
) -> Result<(ModelRecord, Network)> {
    let mut net = build_classifier(arch, &ds.input_shape(), ds.num_classes, seed);
    let images = ds.batch(&split.d_v);
    let labels = ds.labels_for(&split.d_v);
    train_classifier(&mut net, &images, &Targets::Hard(&labels), hyper, seed, None)?;
    let rec = finish_record(
        model_id,
        Role::Victim,
        arch,
        None,
        seed,
        &net,
        ds,
        &split.eval_set,
        "ground_truth",
    );
    Ok((rec, net))
}

/// Independently initialized network trained from scratch on `d_v` with
/// true labels; carries no lineage.
pub fn train_negative(
    ds: &Dataset,
    split: &DataSplit,
    arch: Arch,
    hyper: &TrainConfig,
    seed: u64,
    model_id: &str,
) -> Result<(ModelRecord, Network)> {
    let mut net = build_classifier(arch, &ds.input_shape(), ds.num_classes, seed);
    let images = ds.batch(&split.d_v);
    let labels = ds.labels_for(&split.d_v);
    train_classifier(&mut net, &images, &Targets::Hard(&labels), hyper, seed, None)?;
    let rec = finish_record(
        model_id,
        Role::Negative,
        arch,
        None,
        seed,
        &net,
        ds,
        &split.eval_set,
        "ground_truth",
    );
    Ok((rec, net))
}

/// Label-based extraction: the student trains on `d_p` inputs under the
/// victim's hard labels and never sees ground truth. Eval-set agreement
/// with the victim is recorded in the metadata.
pub fn train_positive_extraction(
    victim: &Network,
    victim_id: &str,
    ds: &Dataset,
    split: &DataSplit,
    arch: Arch,
    hyper: &TrainConfig,
    seed: u64,
    model_id: &str,
    label_cache: Option<&Path>,
) -> Result<(ModelRecord, Network)> {
    let mut net = build_classifier(arch, &ds.input_shape(), ds.num_classes, seed);
    let images = ds.batch(&split.d_p);
    let labels = victim_labels_cached(victim, ds, &split.d_p, label_cache)?;
    train_classifier(&mut net, &images, &Targets::Hard(&labels), hyper, seed, None)?;
    let mut rec = finish_record(
        model_id,
        Role::Positive,
        arch,
        Some(Lineage {
            parent: victim_id.to_string(),
            attack: "extract-label".to_string(),
        }),
        seed,
        &net,
        ds,
        &split.eval_set,
        "victim_labels",
    );
    let agreement = label_agreement(victim, &net, ds, &split.eval_set);
    rec.metadata.insert(
        "victim_agreement".to_string(),
        serde_json::json!(agreement),
    );
    Ok((rec, net))
}

pub fn predict_all(net: &Network, ds: &Dataset, indices: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        out.extend(net.predict(&ds.batch(chunk)));
    }
    out
}

pub fn probs_all(net: &Network, ds: &Dataset, indices: &[usize]) -> Array2<f32> {
    let mut rows: Vec<Array2<f32>> = Vec::new();
    for chunk in indices.chunks(256) {
        rows.push(net.probs(&ds.batch(chunk)));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
}

/// Majority-class frequency over `indices` — the floor any useful
/// classifier must clear.
pub fn majority_class_rate(ds: &Dataset, indices: &[usize]) -> f64 {
    let mut counts = vec![0usize; ds.num_classes];
    for &i in indices {
        counts[ds.labels[i]] += 1;
    }
    let max = counts.into_iter().max().unwrap_or(0);
    max as f64 / indices.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_dataset;

    fn small_dataset() -> Dataset {
        Dataset::load("synth10", None).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
        }
    }

    #[test]
    fn untrained_network_is_near_chance() {
        let ds = small_dataset();
        let split = split_dataset(&ds, 0, 0.5).unwrap();
        let (rec, _) = train_victim(&ds, &split, Arch::TinyCnn, &quick_cfg(0), 0, "v0").unwrap();
        assert!(
            (rec.test_accuracy - 0.1).abs() <= 0.05,
            "untrained accuracy {}",
            rec.test_accuracy
        );
    }

    #[test]
    fn victim_beats_chance_after_training() {
        let ds = small_dataset();
        let split = split_dataset(&ds, 0, 0.5).unwrap();
        let (rec, _) =
            train_victim(&ds, &split, Arch::TinyCnn, &quick_cfg(6), 0, "v").unwrap();
        let majority = majority_class_rate(&ds, &split.eval_set);
        assert!(rec.test_accuracy >= 0.5, "accuracy {}", rec.test_accuracy);
        assert!(rec.test_accuracy > majority);
    }

    #[test]
    fn negatives_differ_by_seed_and_carry_no_lineage() {
        let ds = small_dataset();
        let split = split_dataset(&ds, 0, 0.5).unwrap();
        let (r1, n1) = train_negative(&ds, &split, Arch::TinyCnn, &quick_cfg(1), 1, "n1").unwrap();
        let (r2, n2) = train_negative(&ds, &split, Arch::TinyCnn, &quick_cfg(1), 2, "n2").unwrap();
        assert!(n1.max_param_delta(&n2) > 0.0);
        assert!(r1.lineage.is_none() && r2.lineage.is_none());
    }

    #[test]
    fn extraction_student_agrees_with_teacher() {
        let ds = small_dataset();
        let split = split_dataset(&ds, 0, 0.5).unwrap();
        let (_, victim) =
            train_victim(&ds, &split, Arch::TinyCnn, &quick_cfg(6), 0, "v").unwrap();
        let (rec, _) = train_positive_extraction(
            &victim,
            "v",
            &ds,
            &split,
            Arch::TinyCnn,
            &quick_cfg(6),
            11,
            "p1",
            None,
        )
        .unwrap();
        let agreement = rec.metadata["victim_agreement"].as_f64().unwrap();
        assert!(agreement >= 0.8, "agreement {agreement}");
        assert_eq!(rec.lineage.as_ref().unwrap().parent, "v");
    }

    #[test]
    fn pools_are_disjoint_and_sized() {
        let mk = |id: &str, role: Role| ModelRecord {
            model_id: id.to_string(),
            role,
            arch: Arch::TinyCnn,
            lineage: matches!(role, Role::Positive).then(|| Lineage {
                parent: "v".into(),
                attack: "extract-label".into(),
            }),
            weights_ref: format!("{id}/weights.bin"),
            test_accuracy: 0.5,
            seed: 0,
            input_shape: [1, 16, 16],
            num_classes: 10,
            metadata: Default::default(),
        };
        let mut records = Vec::new();
        for i in 0..8 {
            records.push(mk(&format!("p{i}"), Role::Positive));
            records.push(mk(&format!("n{i}"), Role::Negative));
        }
        let pools = build_pools(&records, 5, 3).unwrap();
        assert_eq!(pools[0].member_ids.len(), 5);
        assert_eq!(pools[1].member_ids.len(), 3);
        for id in &pools[0].member_ids {
            assert!(!pools[1].member_ids.contains(id));
        }
        // shortfall
        let err = build_pools(&records, 7, 3).unwrap_err();
        assert!(matches!(err, Error::Capacity { needed: 10, available: 8, .. }));
    }

    #[test]
    fn evaluate_accuracy_hand_case() {
        // hand-built 3-item eval with 2 correct: constant predictor on a
        // dataset whose first three eval labels are known
        let ds = small_dataset();
        let eval = ds.eval_indices();
        let probe: Vec<usize> = eval[..3].to_vec();
        let labels: Vec<usize> = probe.iter().map(|&i| ds.labels[i]).collect();
        // find a class hitting exactly 2 of 3
        let mut target = None;
        for c in 0..ds.num_classes {
            if labels.iter().filter(|&&l| l == c).count() == 2 {
                target = Some(c);
            }
        }
        // fall back: craft indices with 2 equal labels + 1 different
        let (probe, expected) = if let Some(c) = target {
            (probe, c)
        } else {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
            for &i in &eval {
                by_class[ds.labels[i]].push(i);
            }
            let c = (0..ds.num_classes).find(|&c| by_class[c].len() >= 2).unwrap();
            let other = (0..ds.num_classes)
                .find(|&o| o != c && !by_class[o].is_empty())
                .unwrap();
            (
                vec![by_class[c][0], by_class[c][1], by_class[other][0]],
                c,
            )
        };
        // constant predictor: a network whose last-layer bias forces `expected`
        let mut net = build_classifier(Arch::TinyCnn, &ds.input_shape(), ds.num_classes, 0);
        {
            let count = net.param_count();
            let mut params = net.params_mut();
            params[count - 2].fill(0.0);
            params[count - 1].fill(0.0);
            params[count - 1][[expected]] = 10.0;
        }
        let acc = evaluate_accuracy(&net, &ds, &probe);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }
}
