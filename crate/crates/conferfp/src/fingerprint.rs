//! Fingerprint pairs and their on-disk container.
//!
//! A fingerprint is a pair `(x, x')`: an original example the victim labels
//! correctly and its perturbed counterpart the victim misclassifies. The
//! pair invariant `y_v_xp != y_v_x` is enforced at construction and on
//! load, which is what makes forged "fingerprints" built from unmodified
//! originals (`x' = x`) unrepresentable.
//!
//! On disk a set is a binary tensor container (`pairs.bin`) plus a JSON
//! sidecar with labels, norms, the generator config hash, and provenance.
//! Both are specified bit-exactly in docs/FORMATS.md.

use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::nn::Tensor;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PAIRS_MAGIC: &[u8; 4] = b"CFPF";

#[derive(Clone, Debug)]
pub struct FingerprintPair {
    pub x: Tensor,
    pub x_prime: Tensor,
    /// Victim label on `x`; equals ground truth by construction.
    pub y_v_x: usize,
    /// Victim label on `x'`; must differ from `y_v_x`.
    pub y_v_xp: usize,
    /// L2 norm of `x' - x`.
    pub perturbation_norm: f64,
}

impl FingerprintPair {
    pub fn new(x: Tensor, x_prime: Tensor, y_v_x: usize, y_v_xp: usize) -> Result<Self> {
        if y_v_xp == y_v_x {
            return Err(Error::Validation(format!(
                "fingerprint pair must be adversarial for the victim: \
                 label {y_v_x} unchanged on the perturbed example"
            )));
        }
        if x.shape() != x_prime.shape() {
            return Err(Error::Validation("pair tensors differ in shape".into()));
        }
        if x_prime.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation(
                "perturbed example outside the [0, 1] input domain".into(),
            ));
        }
        let perturbation_norm = l2_distance(&x, &x_prime);
        Ok(FingerprintPair {
            x,
            x_prime,
            y_v_x,
            y_v_xp,
            perturbation_norm,
        })
    }
}

pub fn l2_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct FingerprintSet {
    pub pairs: Vec<FingerprintPair>,
    pub victim_id: String,
    pub gan_config: GanConfig,
    /// Unix seconds at creation.
    pub created_at: u64,
    /// Relative path of the stored generator weights, when kept.
    pub generator_ref: Option<String>,
}

impl FingerprintSet {
    pub fn new(
        pairs: Vec<FingerprintPair>,
        victim_id: &str,
        gan_config: GanConfig,
        generator_ref: Option<String>,
    ) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.y_v_xp == p.y_v_x {
                return Err(Error::Validation(format!(
                    "pair {i} violates the adversarial-label invariant"
                )));
            }
        }
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(FingerprintSet {
            pairs,
            victim_id: victim_id.to_string(),
            gan_config,
            created_at,
            generator_ref,
        })
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn victim_x_labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.y_v_x).collect()
    }

    pub fn victim_xp_labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.y_v_xp).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    victim_id: String,
    created_at: u64,
    gan_config: GanConfig,
    config_hash: String,
    generator_ref: Option<String>,
    pairs: Vec<SidecarPair>,
}

#[derive(Serialize, Deserialize)]
struct SidecarPair {
    y_v_x: usize,
    y_v_xp: usize,
    perturbation_norm: f64,
}

/// FNV-1a over the canonical JSON encoding of the config.
pub fn config_hash(cfg: &GanConfig) -> String {
    let json = serde_json::to_string(cfg).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Write `<stem>.bin` (tensors) and `<stem>.json` (sidecar).
pub fn save_set(set: &FingerprintSet, stem: &Path) -> Result<()> {
    let k = set.pairs.len();
    let shape: Vec<usize> = if k > 0 {
        set.pairs[0].x.shape().to_vec()
    } else {
        vec![]
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PAIRS_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in &shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for pair in &set.pairs {
        for &v in pair.x.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in pair.x_prime.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(stem.with_extension("bin"), &buf)?;
    let sidecar = Sidecar {
        victim_id: set.victim_id.clone(),
        created_at: set.created_at,
        gan_config: set.gan_config.clone(),
        config_hash: config_hash(&set.gan_config),
        generator_ref: set.generator_ref.clone(),
        pairs: set
            .pairs
            .iter()
            .map(|p| SidecarPair {
                y_v_x: p.y_v_x,
                y_v_xp: p.y_v_xp,
                perturbation_norm: p.perturbation_norm,
            })
            .collect(),
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Load a set saved by `save_set`, re-validating every pair invariant.
pub fn load_set(stem: &Path) -> Result<FingerprintSet> {
    let bin_path = stem.with_extension("bin");
    let bytes = std::fs::read(&bin_path)?;
    let integrity = |field: &str, reason: String| Error::Integrity {
        path: bin_path.display().to_string(),
        field: field.to_string(),
        reason,
    };
    if bytes.len() < 16 || &bytes[0..4] != PAIRS_MAGIC {
        return Err(integrity("magic", "not a fingerprint container".into()));
    }
    let read_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = read_u32(4);
    if version != 1 {
        return Err(integrity("version", format!("unsupported version {version}")));
    }
    let k = read_u32(8) as usize;
    let ndim = read_u32(12) as usize;
    let mut off = 16;
    if bytes.len() < off + 8 * ndim {
        return Err(integrity("dims", "truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let per_tensor: usize = shape.iter().product();
    if bytes.len() != off + k * 2 * per_tensor * 4 {
        return Err(integrity(
            "data",
            format!("expected {} bytes, found {}", off + k * 2 * per_tensor * 4, bytes.len()),
        ));
    }
    let read_tensor = |off: &mut usize| -> Tensor {
        let mut data = Vec::with_capacity(per_tensor);
        for i in 0..per_tensor {
            data.push(f32::from_le_bytes(
                bytes[*off + 4 * i..*off + 4 * i + 4].try_into().unwrap(),
            ));
        }
        *off += 4 * per_tensor;
        Tensor::from_shape_vec(IxDyn(&shape), data).unwrap()
    };

    let json_path = stem.with_extension("json");
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
        .map_err(|e| Error::Integrity {
            path: json_path.display().to_string(),
            field: "sidecar".to_string(),
            reason: e.to_string(),
        })?;
    if sidecar.pairs.len() != k {
        return Err(integrity(
            "pairs",
            format!("sidecar lists {} pairs, container holds {k}", sidecar.pairs.len()),
        ));
    }
    if sidecar.config_hash != config_hash(&sidecar.gan_config) {
        return Err(Error::Integrity {
            path: json_path.display().to_string(),
            field: "config_hash".to_string(),
            reason: "hash does not match the stored config".to_string(),
        });
    }

    let mut pairs = Vec::with_capacity(k);
    for (i, sp) in sidecar.pairs.iter().enumerate() {
        let x = read_tensor(&mut off);
        let x_prime = read_tensor(&mut off);
        let pair =
            FingerprintPair::new(x, x_prime, sp.y_v_x, sp.y_v_xp).map_err(|e| Error::Integrity {
                path: json_path.display().to_string(),
                field: format!("pairs[{i}]"),
                reason: e.to_string(),
            })?;
        if (pair.perturbation_norm - sp.perturbation_norm).abs() > 1e-6 {
            return Err(Error::Integrity {
                path: json_path.display().to_string(),
                field: format!("pairs[{i}].perturbation_norm"),
                reason: format!(
                    "stored {} vs recomputed {}",
                    sp.perturbation_norm, pair.perturbation_norm
                ),
            });
        }
        pairs.push(pair);
    }
    Ok(FingerprintSet {
        pairs,
        victim_id: sidecar.victim_id,
        gan_config: sidecar.gan_config,
        created_at: sidecar.created_at,
        generator_ref: sidecar.generator_ref,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_pair(y: usize, yp: usize) -> Result<FingerprintPair> {
        let x = Tensor::from_elem(IxDyn(&[1, 4, 4]), 0.5);
        let mut xp = x.clone();
        xp[[0, 0, 0]] = 0.75;
        FingerprintPair::new(x, xp, y, yp)
    }

    #[test]
    fn pair_rejects_unchanged_label() {
        assert!(matches!(toy_pair(3, 3), Err(Error::Validation(_))));
        assert!(toy_pair(3, 4).is_ok());
    }

    #[test]
    fn pair_rejects_out_of_domain() {
        let x = Tensor::from_elem(IxDyn(&[1, 2, 2]), 0.5);
        let xp = Tensor::from_elem(IxDyn(&[1, 2, 2]), 1.5);
        assert!(matches!(
            FingerprintPair::new(x, xp, 0, 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn norm_is_recomputed_from_tensors() {
        let p = toy_pair(0, 1).unwrap();
        assert!((p.perturbation_norm - 0.25).abs() < 1e-9);
    }

    #[test]
    fn set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![toy_pair(0, 1).unwrap(), toy_pair(2, 5).unwrap()];
        let set = FingerprintSet::new(pairs, "victim", GanConfig::default(), None).unwrap();
        let stem = dir.path().join("fp");
        save_set(&set, &stem).unwrap();
        let loaded = load_set(&stem).unwrap();
        assert_eq!(loaded.k(), 2);
        assert_eq!(loaded.victim_id, "victim");
        assert_eq!(loaded.victim_x_labels(), vec![0, 2]);
        assert_eq!(loaded.victim_xp_labels(), vec![1, 5]);
        assert_eq!(loaded.pairs[0].x, set.pairs[0].x);
        assert_eq!(loaded.pairs[1].x_prime, set.pairs[1].x_prime);
    }

    #[test]
    fn forged_set_with_identical_tensors_is_unrepresentable() {
        let x = Tensor::from_elem(IxDyn(&[1, 2, 2]), 0.5);
        // x' = x forces the victim label to be unchanged, so construction
        // must fail regardless of the labels supplied
        let err = FingerprintPair::new(x.clone(), x, 7, 7).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn tampered_sidecar_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let set = FingerprintSet::new(
            vec![toy_pair(0, 1).unwrap()],
            "v",
            GanConfig::default(),
            None,
        )
        .unwrap();
        let stem = dir.path().join("fp");
        save_set(&set, &stem).unwrap();
        let json_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&json_path).unwrap();
        std::fs::write(&json_path, text.replace("\"y_v_xp\": 1", "\"y_v_xp\": 0")).unwrap();
        assert!(matches!(load_set(&stem), Err(Error::Integrity { .. })));
    }
}
