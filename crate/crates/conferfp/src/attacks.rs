//! Attacker-side post-processing: fine-tuning variants, magnitude pruning,
//! model extraction (label- and probability-based), and FGSM adversarial
//! training. Every attack yields a pirated record whose lineage chain
//! terminates at the victim.

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    build_classifier, cross_entropy, final_dense_slots, kaiming, Arch, Layer, Network, Tensor,
};
use crate::zoo::{
    evaluate_accuracy, label_agreement, probs_all, train_classifier, victim_labels_cached,
    Lineage, ModelRecord, Role, Targets, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Fine-tune the last layer only, freeze the rest.
    Ftll,
    /// Fine-tune all layers.
    Ftal,
    /// Re-initialize the last layer, then fine-tune it alone.
    Rtll,
    /// Re-initialize the last layer, then fine-tune all layers.
    Rtal,
}

impl FinetuneMode {
    pub fn tag(&self) -> &'static str {
        match self {
            FinetuneMode::Ftll => "ftll",
            FinetuneMode::Ftal => "ftal",
            FinetuneMode::Rtll => "rtll",
            FinetuneMode::Rtal => "rtal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    Label,
    Prob,
}

/// One attack to run against a stolen copy of the victim. Parameter fields
/// are meaningful only for their own kind: `prune_rate` for `prune`,
/// `fgsm_eps`/`rounds` for `adv_train`, `target_arch` for the extraction
/// kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackDescriptor {
    Ftll { epochs: usize },
    Ftal { epochs: usize },
    Rtll { epochs: usize },
    Rtal { epochs: usize },
    Prune { prune_rate: f64 },
    ExtractLabel { target_arch: Arch },
    ExtractProb { target_arch: Arch },
    AdvTrain { fgsm_eps: f64, rounds: usize },
}

impl AttackDescriptor {
    pub fn tag(&self) -> String {
        match self {
            AttackDescriptor::Ftll { .. } => "ftll".into(),
            AttackDescriptor::Ftal { .. } => "ftal".into(),
            AttackDescriptor::Rtll { .. } => "rtll".into(),
            AttackDescriptor::Rtal { .. } => "rtal".into(),
            AttackDescriptor::Prune { prune_rate } => format!("prune-{prune_rate}"),
            AttackDescriptor::ExtractLabel { target_arch } => {
                format!("extract-label-{target_arch}")
            }
            AttackDescriptor::ExtractProb { target_arch } => {
                format!("extract-prob-{target_arch}")
            }
            AttackDescriptor::AdvTrain { .. } => "adv-train".into(),
        }
    }
}

fn pirated_record(
    model_id: &str,
    parent: &str,
    attack: String,
    base: &ModelRecord,
    net: &Network,
    ds: &Dataset,
    eval: &[usize],
    seed: u64,
    label_source: &str,
) -> ModelRecord {
    let mut metadata = BTreeMap::new();
    metadata.insert(
        "label_source".to_string(),
        serde_json::Value::String(label_source.to_string()),
    );
    ModelRecord {
        model_id: model_id.to_string(),
        role: Role::Pirated,
        arch: base.arch,
        lineage: Some(Lineage {
            parent: parent.to_string(),
            attack,
        }),
        weights_ref: format!("{model_id}/weights.bin"),
        test_accuracy: evaluate_accuracy(net, ds, eval),
        seed,
        input_shape: base.input_shape,
        num_classes: base.num_classes,
        metadata,
    }
}

/// Fine-tune a stolen copy on the attacker dataset `d_p` (true labels).
/// FTLL/RTLL update only the final affine layer; the re-train modes first
/// re-initialize that layer from a fresh seed.
pub fn finetune(
    model: &ModelRecord,
    net: &Network,
    ds: &Dataset,
    split: &DataSplit,
    mode: FinetuneMode,
    epochs: usize,
    hyper: &TrainConfig,
    seed: u64,
    model_id: &str,
) -> Result<(ModelRecord, Network)> {
    let mut tuned = net.clone();
    let (w_slot, b_slot) = final_dense_slots(&tuned);
    if matches!(mode, FinetuneMode::Rtll | FinetuneMode::Rtal) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E1F_1A5E);
        let mut params = tuned.params_mut();
        let shape: Vec<usize> = params[w_slot].shape().to_vec();
        let fan_in = shape[1];
        *params[w_slot] = kaiming(&shape, fan_in, &mut rng);
        params[b_slot].fill(0.0);
    }
    let mask = match mode {
        FinetuneMode::Ftll | FinetuneMode::Rtll => {
            let mut m = vec![false; tuned.param_count()];
            m[w_slot] = true;
            m[b_slot] = true;
            Some(m)
        }
        FinetuneMode::Ftal | FinetuneMode::Rtal => None,
    };
    let cfg = TrainConfig {
        epochs,
        ..hyper.clone()
    };
    let images = ds.batch(&split.d_p);
    let labels = ds.labels_for(&split.d_p);
    train_classifier(
        &mut tuned,
        &images,
        &Targets::Hard(&labels),
        &cfg,
        seed,
        mask.as_deref(),
    )?;
    let rec = pirated_record(
        model_id,
        &model.model_id,
        mode.tag().to_string(),
        model,
        &tuned,
        ds,
        &split.eval_set,
        seed,
        "ground_truth",
    );
    Ok((rec, tuned))
}

/// Zero the `floor(p * n)` smallest-magnitude entries of every weight
/// tensor, per layer, ties broken by index order; biases are exempt.
pub fn prune(
    model: &ModelRecord,
    net: &Network,
    ds: &Dataset,
    eval: &[usize],
    p: f64,
    model_id: &str,
) -> Result<(ModelRecord, Network)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!(
            "prune rate must lie in [0, 1], got {p}"
        )));
    }
    let mut pruned = net.clone();
    prune_weights_in_place(&mut pruned, p);
    let rec = pirated_record(
        model_id,
        &model.model_id,
        format!("prune-{p}"),
        model,
        &pruned,
        ds,
        eval,
        model.seed,
        "none",
    );
    Ok((rec, pruned))
}

/// In-place magnitude pruning over the weight tensors of dense/conv layers.
pub fn prune_weights_in_place(net: &mut Network, p: f64) {
    fn walk(layers: &mut [Layer], p: f64) {
        for layer in layers {
            match layer {
                Layer::Dense(d) => prune_tensor(&mut d.w, p),
                Layer::Conv2d(c) => prune_tensor(&mut c.w, p),
                Layer::Residual(body) | Layer::DenseCat(body) => walk(body, p),
                _ => {}
            }
        }
    }
    walk(&mut net.layers, p);
}

fn prune_tensor(w: &mut Tensor, p: f64) {
    let n = w.len();
    // tiny epsilon so that exact rationals like 0.3 * 10 floor to the
    // mathematically intended count despite binary rounding
    let k = ((p * n as f64) + 1e-9).floor() as usize;
    let k = k.min(n);
    if k == 0 {
        return;
    }
    let slice = w.as_slice_mut().expect("standard layout weights");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        slice[a]
            .abs()
            .partial_cmp(&slice[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &idx in order.iter().take(k) {
        slice[idx] = 0.0;
    }
}

/// Count of zero entries per weight tensor, for contract checks.
pub fn weight_sparsity(net: &Network) -> Vec<(usize, usize)> {
    fn walk(layers: &[Layer], out: &mut Vec<(usize, usize)>) {
        for layer in layers {
            match layer {
                Layer::Dense(d) => out.push((d.w.iter().filter(|&&v| v == 0.0).count(), d.w.len())),
                Layer::Conv2d(c) => out.push((c.w.iter().filter(|&&v| v == 0.0).count(), c.w.len())),
                Layer::Residual(body) | Layer::DenseCat(body) => walk(body, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&net.layers, &mut out);
    out
}

/// Train a fresh surrogate of `target_arch` on `d_p` against the victim's
/// outputs: hard labels (cross-entropy) or probability rows (KL).
#[allow(clippy::too_many_arguments)]
pub fn extract(
    victim: &Network,
    victim_rec: &ModelRecord,
    ds: &Dataset,
    split: &DataSplit,
    target_arch: Arch,
    mode: ExtractMode,
    hyper: &TrainConfig,
    seed: u64,
    model_id: &str,
    label_cache: Option<&Path>,
) -> Result<(ModelRecord, Network)> {
    let mut student = build_classifier(target_arch, &ds.input_shape(), ds.num_classes, seed);
    let images = ds.batch(&split.d_p);
    let (attack_tag, label_source) = match mode {
        ExtractMode::Label => {
            let labels = victim_labels_cached(victim, ds, &split.d_p, label_cache)?;
            train_classifier(
                &mut student,
                &images,
                &Targets::Hard(&labels),
                hyper,
                seed,
                None,
            )?;
            ("extract-label", "victim_labels")
        }
        ExtractMode::Prob => {
            let probs = probs_all(victim, ds, &split.d_p);
            train_classifier(
                &mut student,
                &images,
                &Targets::Soft(&probs),
                hyper,
                seed,
                None,
            )?;
            ("extract-prob", "victim_probs")
        }
    };
    let mut rec = pirated_record(
        model_id,
        &victim_rec.model_id,
        format!("{attack_tag}-{target_arch}"),
        victim_rec,
        &student,
        ds,
        &split.eval_set,
        seed,
        label_source,
    );
    rec.arch = target_arch;
    let agreement = label_agreement(victim, &student, ds, &split.eval_set);
    rec.metadata
        .insert("victim_agreement".to_string(), serde_json::json!(agreement));
    Ok((rec, student))
}

/// FGSM perturbation of a batch: `clip(x + eps * sign(dCE/dx), 0, 1)`.
pub fn fgsm_batch(net: &Network, x: &Tensor, labels: &[usize], eps: f32) -> Tensor {
    let (logits, tape) = net.forward_traced(x);
    let logits2 = logits.into_dimensionality::<ndarray::Ix2>().unwrap();
    let (_, dlogits) = cross_entropy(&logits2, labels);
    let gx = net.backward(&tape, dlogits.into_dyn(), None);
    let mut adv = x.clone();
    adv.zip_mut_with(&gx, |v, &g| {
        *v = (*v + eps * g.signum()).clamp(0.0, 1.0);
    });
    adv
}

/// Accuracy against `labels` on FGSM examples generated from the network
/// under evaluation.
pub fn fgsm_robust_accuracy(
    net: &Network,
    ds: &Dataset,
    indices: &[usize],
    labels: &[usize],
    eps: f32,
) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (chunk, label_chunk) in indices.chunks(256).zip(labels.chunks(256)) {
        let x = ds.batch(chunk);
        let adv = fgsm_batch(net, &x, label_chunk, eps);
        let pred = net.predict(&adv);
        correct += pred.iter().zip(label_chunk).filter(|(p, l)| p == l).count();
    }
    correct as f64 / indices.len() as f64
}

/// Adversarial training rounds over `d_p`: each round regenerates FGSM
/// examples against the current weights and trains on a clean+adversarial
/// mix. Labels are the victim's cached answers on `d_p`, matching the
/// extraction lineage this attack builds on; `eps = 0` degenerates to
/// plain fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    model: &ModelRecord,
    net: &Network,
    victim: &Network,
    ds: &Dataset,
    split: &DataSplit,
    fgsm_eps: f64,
    rounds: usize,
    hyper: &TrainConfig,
    seed: u64,
    model_id: &str,
    label_cache: Option<&Path>,
) -> Result<(ModelRecord, Network)> {
    if fgsm_eps < 0.0 {
        return Err(Error::Validation(format!(
            "fgsm_eps must be non-negative, got {fgsm_eps}"
        )));
    }
    let mut robust = net.clone();
    let labels = victim_labels_cached(victim, ds, &split.d_p, label_cache)?;
    let clean = ds.batch(&split.d_p);
    for round in 0..rounds {
        let adv = fgsm_batch(&robust, &clean, &labels, fgsm_eps as f32);
        let mixed = ndarray::concatenate(
            ndarray::Axis(0),
            &[clean.view(), adv.view()],
        )
        .expect("clean/adv concat");
        let mut mixed_labels = labels.clone();
        mixed_labels.extend_from_slice(&labels);
        train_classifier(
            &mut robust,
            &mixed,
            &Targets::Hard(&mixed_labels),
            hyper,
            seed ^ round as u64,
            None,
        )?;
    }
    let parent_attack = model
        .lineage
        .as_ref()
        .map(|l| format!("{}->adv-train", l.attack))
        .unwrap_or_else(|| "adv-train".to_string());
    let mut rec = pirated_record(
        model_id,
        &model.model_id,
        parent_attack,
        model,
        &robust,
        ds,
        &split.eval_set,
        seed,
        "victim_labels",
    );
    rec.arch = model.arch;
    Ok((rec, robust))
}
