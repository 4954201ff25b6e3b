//! Checkpoint directories: a JSON manifest plus one raw little-endian f64
//! blob per named tensor. Round-trips are bit-exact.
//!
//! Layout:
//!
//! ```text
//! <dir>/
//!   manifest.json        model config, counters, tensor index
//!   tensors/<name>.bin   row-major f64, little endian
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::pruning::{CouplingGroup, GroupId, MaskSet};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Counters {
    pub iteration: usize,
    pub adam_step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    model: ModelConfig,
    counters: Counters,
    tensors: BTreeMap<String, TensorEntry>,
}

/// In-memory checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub counters: Counters,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, counters: Counters) -> Checkpoint {
        Checkpoint { config, counters, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {} shape/data mismatch",
            name
        );
        self.tensors.insert(name, (shape, data));
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert(name, t.shape(), t.to_vec());
    }

    pub fn insert_model(&mut self, model: &TransformerModel) {
        for (name, t) in model.named_params() {
            self.insert_tensor(name.clone(), t);
        }
    }

    pub fn insert_masks(&mut self, masks: &MaskSet) {
        for (id, mask) in masks.iter() {
            self.insert(format!("mask.{}", id.name()), vec![mask.len()], mask.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", name)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Tensors under a dotted prefix, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let full = format!("{}.", prefix);
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&full).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Rebuild the model from this checkpoint's weights.
    pub fn build_model(&self) -> Result<TransformerModel> {
        let mut tensors = BTreeMap::new();
        for (name, shape) in TransformerModel::expected_shapes(&self.config) {
            let (got_shape, data) = self.get(&name)?;
            if *got_shape != shape {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?}, config wants {:?}",
                    name, got_shape, shape
                )));
            }
            tensors.insert(name, Tensor::param(&shape, data.clone()));
        }
        TransformerModel::from_tensors(self.config.clone(), tensors)
    }

    /// Rebuild the mask set, verifying widths against the group table.
    /// Returns None when the checkpoint stores no masks (plain teacher).
    pub fn build_masks(&self, groups: &[CouplingGroup]) -> Result<Option<MaskSet>> {
        let stored = self.with_prefix("mask");
        if stored.is_empty() {
            return Ok(None);
        }
        let mut masks = BTreeMap::new();
        for group in groups {
            let key = group.id.name();
            let (shape, data) = stored.get(&key).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing mask.{}", key))
            })?;
            if shape != &vec![group.width] {
                return Err(Error::Shape(format!(
                    "mask.{} has shape {:?}, group width is {}",
                    key, shape, group.width
                )));
            }
            for v in data {
                if *v != 0.0 && *v != 1.0 {
                    return Err(Error::Checkpoint(format!(
                        "mask.{} holds non-binary value {}",
                        key, v
                    )));
                }
            }
            masks.insert(group.id, data.clone());
        }
        // Reject stray masks that match no group.
        for key in stored.keys() {
            if GroupId::parse(key).is_none() {
                return Err(Error::Checkpoint(format!("unrecognized mask name mask.{}", key)));
            }
        }
        Ok(Some(MaskSet::from_parts(masks)))
    }

    /// Write the checkpoint directory (manifest plus blobs), replacing any
    /// existing content.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensor_dir = dir.join(TENSOR_DIR);
        std::fs::create_dir_all(&tensor_dir)?;
        let mut index = BTreeMap::new();
        for (name, (shape, data)) in &self.tensors {
            let file = format!("{}/{}.bin", TENSOR_DIR, name);
            let path = dir.join(&file);
            let mut writer = std::io::BufWriter::new(std::fs::File::create(&path)?);
            for v in data {
                writer.write_all(&v.to_le_bytes())?;
            }
            writer.flush()?;
            index.insert(name.clone(), TensorEntry { shape: shape.clone(), file });
        }
        let manifest = Manifest {
            format: "taper-checkpoint".to_string(),
            version: 1,
            model: self.config.clone(),
            counters: self.counters.clone(),
            tensors: index,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Serialize(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest_path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Input(format!("cannot read checkpoint {}: {}", manifest_path.display(), e))
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Serialize(e.to_string()))?;
        if manifest.format != "taper-checkpoint" {
            return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
        }
        let mut tensors = BTreeMap::new();
        for (name, entry) in manifest.tensors {
            let path = dir.join(&entry.file);
            let mut bytes = Vec::new();
            std::fs::File::open(&path)
                .map_err(|e| Error::Checkpoint(format!("missing blob {}: {}", entry.file, e)))?
                .read_to_end(&mut bytes)?;
            let numel: usize = entry.shape.iter().product();
            if bytes.len() != numel * 8 {
                return Err(Error::Checkpoint(format!(
                    "blob {} holds {} bytes, shape {:?} wants {}",
                    entry.file,
                    bytes.len(),
                    entry.shape,
                    numel * 8
                )));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (entry.shape, data));
        }
        Ok(Checkpoint { config: manifest.model, counters: manifest.counters, tensors })
    }
}

/// Canonical path of a run's checkpoint directory.
pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    use crate::pruning::coupling_groups;

    fn toy_model(seed: u64) -> TransformerModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        TransformerModel::new(ModelConfig::new(32, 16, 2, 8, 16, 2), &mut rng)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = toy_model(1);
        let mut ckpt = Checkpoint::new(model.config.clone(), Counters { iteration: 7, adam_step: 7 });
        ckpt.insert_model(&model);
        let groups = coupling_groups(&model.config);
        ckpt.insert_masks(&MaskSet::all_ones(&groups));

        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();

        assert_eq!(loaded.counters.iteration, 7);
        assert_eq!(loaded.config, model.config);
        for (name, (shape, data)) in &ckpt.tensors {
            let (ls, ld) = loaded.get(name).unwrap();
            assert_eq!(ls, shape);
            let bits: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            let lbits: Vec<u64> = ld.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, lbits, "tensor {} not bit-exact", name);
        }

        let rebuilt = loaded.build_model().unwrap();
        let out_a = model.forward(&[1, 2, 3], &[true; 3]).logits.data_bits();
        let out_b = rebuilt.forward(&[1, 2, 3], &[true; 3]).logits.data_bits();
        assert_eq!(out_a, out_b);

        let masks = loaded.build_masks(&groups).unwrap().unwrap();
        for g in &groups {
            assert_eq!(masks.kept(g.id), g.width);
        }
    }

    #[test]
    fn shape_mismatch_detected_on_build() {
        let model = toy_model(2);
        let mut ckpt = Checkpoint::new(model.config.clone(), Counters::default());
        ckpt.insert_model(&model);
        let mut wrong = model.config.clone();
        wrong.hidden_dim = 16;
        wrong.ffn_dim = 32;
        let bad = Checkpoint { config: wrong, counters: Counters::default(), tensors: ckpt.tensors };
        let err = bad.build_model().unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn missing_blob_is_checkpoint_error() {
        let model = toy_model(3);
        let mut ckpt = Checkpoint::new(model.config.clone(), Counters::default());
        ckpt.insert_model(&model);
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("tensors/embed.tok.bin")).unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let model = toy_model(4);
        let mut ckpt = Checkpoint::new(model.config.clone(), Counters::default());
        ckpt.insert_model(&model);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        ckpt.save(a.path()).unwrap();
        ckpt.save(b.path()).unwrap();
        let read = |d: &Path| {
            let mut all = Vec::new();
            let manifest = std::fs::read(d.join(MANIFEST)).unwrap();
            all.push(manifest);
            let mut names: Vec<_> = std::fs::read_dir(d.join(TENSOR_DIR))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            names.sort();
            for p in names {
                all.push(std::fs::read(p).unwrap());
            }
            all
        };
        assert_eq!(read(a.path()), read(b.path()));
    }
}
