//! Datasets and deterministic train/attacker/eval splits.
//!
//! Two dataset tags are supported:
//!
//! - `synth10`: a bundled, procedurally generated 10-class 16x16 grayscale
//!   set. The corpus is a pure function of hard-coded constants, so every
//!   build sees identical data. This is the desk-profile default.
//! - `cifar10`: loaded from the standard binary batches
//!   (`cifar-10-batches-bin/`) under a caller-supplied data directory.
//!
//! A split partitions the training portion into the defender set `d_v` and
//! the attacker set `d_p` (stratified per class), with the held-out portion
//! as the shared evaluation set.

use crate::error::{Error, Result};
use crate::nn::{normal_sample, Tensor};
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// Fixed corpus parameters for the bundled synthetic set.
pub const SYNTH10_TRAIN: usize = 4000;
pub const SYNTH10_EVAL: usize = 1000;
pub const SYNTH10_CLASSES: usize = 10;
const SYNTH10_SIDE: usize = 16;
const SYNTH10_MASTER_SEED: u64 = 0x5EED_10;

#[derive(Clone)]
pub struct Dataset {
    pub tag: String,
    /// `(N, C, H, W)`, values in `[0, 1]`. Training portion first, then the
    /// held-out evaluation portion.
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_train: usize,
    pub num_classes: usize,
}

impl Dataset {
    /// Load by tag. `data_dir` is only consulted for `cifar10`.
    pub fn load(tag: &str, data_dir: Option<&Path>) -> Result<Dataset> {
        match tag {
            "synth10" => Ok(synth10()),
            "cifar10" => {
                let dir = data_dir.ok_or_else(|| {
                    Error::Config("cifar10 requires --data-dir with cifar-10-batches-bin".into())
                })?;
                load_cifar10(dir)
            }
            other => Err(Error::Config(format!("unknown dataset tag `{other}`"))),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gather an image batch `(B, C, H, W)` for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.images.select(Axis(0), indices).into_dyn()
    }

    pub fn labels_for(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        (self.num_train..self.images.shape()[0]).collect()
    }
}

/// Class prototypes are smooth sinusoid mixtures; samples add a random
/// cyclic shift, amplitude jitter, and pixel noise. Classes overlap enough
/// that independently trained networks disagree near the boundaries.
fn synth10() -> Dataset {
    let side = SYNTH10_SIDE;
    let n = SYNTH10_TRAIN + SYNTH10_EVAL;
    let mut protos = Vec::with_capacity(SYNTH10_CLASSES);
    for class in 0..SYNTH10_CLASSES {
        let mut rng = ChaCha8Rng::seed_from_u64(SYNTH10_MASTER_SEED ^ (class as u64 + 1));
        let mut proto = vec![0.0f32; side * side];
        for _ in 0..3 {
            let fi = rng.random_range(1..4) as f32;
            let fj = rng.random_range(1..4) as f32;
            let phase: f32 = rng.random::<f32>() * std::f32::consts::TAU;
            let amp: f32 = 0.4 + 0.6 * rng.random::<f32>();
            for i in 0..side {
                for j in 0..side {
                    let t = std::f32::consts::TAU
                        * (fi * i as f32 / side as f32 + fj * j as f32 / side as f32)
                        + phase;
                    proto[i * side + j] += amp * t.sin();
                }
            }
        }
        let max = proto.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        for v in &mut proto {
            *v /= max;
        }
        protos.push(proto);
    }

    let mut images = Array4::<f32>::zeros((n, 1, side, side));
    let mut labels = Vec::with_capacity(n);
    for idx in 0..n {
        let class = idx % SYNTH10_CLASSES;
        let mut rng = ChaCha8Rng::seed_from_u64(SYNTH10_MASTER_SEED.wrapping_mul(31) ^ idx as u64);
        // small cyclic jitter (+-2 px) and amplitude jitter keep the task
        // learnable by small nets while the pixel noise blurs boundaries
        let di = (rng.random_range(0..5) + side - 2) % side;
        let dj = (rng.random_range(0..5) + side - 2) % side;
        let gain = 0.35 + 0.15 * rng.random::<f32>();
        let proto = &protos[class];
        for i in 0..side {
            for j in 0..side {
                let src = ((i + di) % side) * side + (j + dj) % side;
                let noise = normal_sample(&mut rng) as f32 * 0.18;
                let v = 0.5 + gain * proto[src] + noise;
                images[[idx, 0, i, j]] = v.clamp(0.0, 1.0);
            }
        }
        labels.push(class);
    }
    Dataset {
        tag: "synth10".to_string(),
        images,
        labels,
        num_train: SYNTH10_TRAIN,
        num_classes: SYNTH10_CLASSES,
    }
}

fn load_cifar10(data_dir: &Path) -> Result<Dataset> {
    let base = data_dir.join("cifar-10-batches-bin");
    let mut files: Vec<std::path::PathBuf> = (1..=5)
        .map(|i| base.join(format!("data_batch_{i}.bin")))
        .collect();
    files.push(base.join("test_batch.bin"));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", file.display()))
        })?;
        const REC: usize = 3073;
        if bytes.len() % REC != 0 {
            return Err(Error::Integrity {
                path: file.display().to_string(),
                field: "record_size".to_string(),
                reason: format!("file length {} not a multiple of {REC}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(REC) {
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let images = Array4::from_shape_vec((n, 3, 32, 32), images)
        .map_err(|e| Error::Config(format!("cifar10 shape: {e}")))?;
    Ok(Dataset {
        tag: "cifar10".to_string(),
        images,
        labels,
        num_train: 50_000,
        num_classes: 10,
    })
}

/// Disjoint index partition of a dataset: defender data `d_v`, attacker
/// data `d_p`, and the shared held-out evaluation set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub split_id: String,
    pub source_dataset: String,
    pub seed: u64,
    pub d_v: Vec<usize>,
    pub d_p: Vec<usize>,
    pub eval_set: Vec<usize>,
}

impl DataSplit {
    /// Check disjointness and coverage against the dataset geometry.
    pub fn validate(&self, num_train: usize, num_total: usize) -> Result<()> {
        let dv: BTreeSet<usize> = self.d_v.iter().copied().collect();
        let dp: BTreeSet<usize> = self.d_p.iter().copied().collect();
        let ev: BTreeSet<usize> = self.eval_set.iter().copied().collect();
        if dv.len() != self.d_v.len() || dp.len() != self.d_p.len() {
            return Err(Error::Validation("duplicate indices within a partition".into()));
        }
        if dv.intersection(&dp).next().is_some() {
            return Err(Error::Validation("d_v and d_p overlap".into()));
        }
        if dv.union(&dp).count() != num_train
            || dv.union(&dp).any(|&i| i >= num_train)
        {
            return Err(Error::Validation(
                "d_v and d_p must exactly cover the training portion".into(),
            ));
        }
        if ev.iter().any(|&i| i < num_train || i >= num_total) {
            return Err(Error::Validation(
                "eval indices must lie in the held-out portion".into(),
            ));
        }
        Ok(())
    }
}

/// Stratified split of the training portion: per class, `fraction` of the
/// items (rounded) go to `d_v`, the rest to `d_p`. Deterministic in
/// `(dataset tag, seed)`.
pub fn split_dataset(dataset: &Dataset, seed: u64, fraction: f64) -> Result<DataSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for idx in 0..dataset.num_train {
        per_class[dataset.labels[idx]].push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d_v = Vec::new();
    let mut d_p = Vec::new();
    for class_indices in &mut per_class {
        class_indices.shuffle(&mut rng);
        let take = (fraction * class_indices.len() as f64).round() as usize;
        let take = take.min(class_indices.len());
        d_v.extend_from_slice(&class_indices[..take]);
        d_p.extend_from_slice(&class_indices[take..]);
    }
    d_v.sort_unstable();
    d_p.sort_unstable();
    let split = DataSplit {
        split_id: format!("{}-s{}-f{}", dataset.tag, seed, fraction),
        source_dataset: dataset.tag.clone(),
        seed,
        d_v,
        d_p,
        eval_set: dataset.eval_indices(),
    };
    split.validate(dataset.num_train, dataset.images.shape()[0])?;
    Ok(split)
}

pub fn persist_split(split: &DataSplit, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(split)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<DataSplit> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let integrity = |field: &str, reason: &str| Error::Integrity {
        path: path.display().to_string(),
        field: field.to_string(),
        reason: reason.to_string(),
    };
    for field in ["split_id", "source_dataset", "seed", "d_v", "d_p", "eval_set"] {
        if raw.get(field).is_none() {
            return Err(integrity(field, "missing"));
        }
    }
    let split: DataSplit = serde_json::from_value(raw)?;
    let dv: BTreeSet<usize> = split.d_v.iter().copied().collect();
    if split.d_p.iter().any(|i| dv.contains(i)) {
        return Err(integrity("d_p", "overlaps d_v"));
    }
    let ev: BTreeSet<usize> = split.eval_set.iter().copied().collect();
    if split.d_v.iter().chain(&split.d_p).any(|i| ev.contains(i)) {
        return Err(integrity("eval_set", "overlaps training partitions"));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth10_is_reproducible_and_balanced() {
        let a = synth10();
        let b = synth10();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let mut counts = [0usize; 10];
        for &l in &a.labels[..a.num_train] {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == SYNTH10_TRAIN / 10));
    }

    #[test]
    fn split_halves_are_disjoint_and_cover() {
        let ds = synth10();
        let split = split_dataset(&ds, 0, 0.5).unwrap();
        assert_eq!(split.d_v.len(), SYNTH10_TRAIN / 2);
        assert_eq!(split.d_p.len(), SYNTH10_TRAIN / 2);
        let dv: BTreeSet<_> = split.d_v.iter().collect();
        assert!(split.d_p.iter().all(|i| !dv.contains(i)));
        split.validate(ds.num_train, ds.images.shape()[0]).unwrap();
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = synth10();
        let a = split_dataset(&ds, 7, 0.5).unwrap();
        let b = split_dataset(&ds, 7, 0.5).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&ds, 8, 0.5).unwrap();
        assert_ne!(a.d_v, c.d_v);
    }

    #[test]
    fn stratification_keeps_class_balance() {
        let ds = synth10();
        let split = split_dataset(&ds, 3, 0.5).unwrap();
        for class in 0..ds.num_classes {
            let class_size = ds.labels[..ds.num_train]
                .iter()
                .filter(|&&l| l == class)
                .count();
            let in_v = split.d_v.iter().filter(|&&i| ds.labels[i] == class).count();
            let in_p = split.d_p.iter().filter(|&&i| ds.labels[i] == class).count();
            let dev = in_v.abs_diff(in_p) as f64;
            assert!(dev <= 0.02 * class_size as f64, "class {class}: {in_v} vs {in_p}");
        }
    }

    #[test]
    fn bad_fraction_is_a_validation_error() {
        let ds = synth10();
        for f in [0.0, 1.0, -0.3, 1.5] {
            assert!(matches!(
                split_dataset(&ds, 0, f),
                Err(Error::Validation(_))
            ));
        }
    }

    #[test]
    fn unknown_tag_is_a_configuration_error() {
        assert!(matches!(
            Dataset::load("imagenet", None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth10();
        let split = split_dataset(&ds, 5, 0.5).unwrap();
        let path = dir.path().join("split.json");
        persist_split(&split, &path).unwrap();
        assert_eq!(load_split(&path).unwrap(), split);

        // overlapping indices
        let mut bad = split.clone();
        bad.d_p[0] = bad.d_v[0];
        persist_split(&bad, &path).unwrap();
        assert!(matches!(load_split(&path), Err(Error::Integrity { field, .. }) if field == "d_p"));

        // missing seed field
        let mut v: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&split).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(load_split(&path), Err(Error::Integrity { field, .. }) if field == "seed"));
    }
}
