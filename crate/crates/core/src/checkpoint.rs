//! On-disk checkpoints: `manifest.json` describing every tensor plus
//! `tensors.bin` holding their values back to back as little-endian floats
//! (f64 for double precision, f32 for single).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, Parameters};
use crate::numerics::{Matrix, Precision};
use crate::swiftkv::{rewire_with_scope, StudentParameters, SwiftKvConfig, TrainScope};

pub const FORMAT: &str = "swiftkv-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub precision: Precision,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length in the blob.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    /// Present for rewired students.
    pub swiftkv: Option<SwiftKvConfig>,
    pub scope: Option<TrainScope>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Model(Parameters),
    Student(StudentParameters),
}

impl Checkpoint {
    /// The teacher weights (the model itself, or a student's frozen base).
    pub fn base(&self) -> &Parameters {
        match self {
            Checkpoint::Model(p) => p,
            Checkpoint::Student(s) => &s.base,
        }
    }
}

fn write(
    dir: &Path,
    model: &ModelConfig,
    swift: Option<(&SwiftKvConfig, TrainScope)>,
    tensors: Vec<(String, &Matrix)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let offset = blob.len() as u64;
        for &x in m.data() {
            match m.precision() {
                Precision::Double => blob.extend_from_slice(&x.to_le_bytes()),
                Precision::Single => blob.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
        entries.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            precision: m.precision(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        model: model.clone(),
        swiftkv: swift.map(|s| s.0.clone()),
        scope: swift.map(|s| s.1),
        tensors: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn save_model(dir: impl AsRef<Path>, params: &Parameters) -> Result<()> {
    write(dir.as_ref(), &params.config, None, params.named_tensors())
}

/// Saves the frozen base followed by the trainable tensors.
pub fn save_student(dir: impl AsRef<Path>, student: &StudentParameters) -> Result<()> {
    let mut tensors = student.base.named_tensors();
    tensors.extend(student.trainable_tensors());
    write(dir.as_ref(), &student.base.config, Some((&student.config, student.scope)), tensors)
}

pub fn save(dir: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    match checkpoint {
        Checkpoint::Model(p) => save_model(dir, p),
        Checkpoint::Student(s) => save_student(dir, s),
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn decode_tensors(manifest: &Manifest, blob: &[u8]) -> Result<BTreeMap<String, Matrix>> {
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        let [rows, cols] = e.shape;
        let width = e.precision.bytes();
        if e.len != (rows * cols * width) as u64 {
            return Err(bad(format!("tensor `{}`: length {} does not match shape {rows}x{cols}", e.name, e.len)));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        let bytes =
            blob.get(start..end).ok_or_else(|| bad(format!("tensor `{}` runs past the end of {BLOB_FILE}", e.name)))?;
        let data = match e.precision {
            Precision::Double => {
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
            }
            Precision::Single => {
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
            }
        };
        if out.insert(e.name.clone(), Matrix::from_vec(rows, cols, data, e.precision)?).is_some() {
            return Err(bad(format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok(out)
}

fn take(map: &mut BTreeMap<String, Matrix>, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let m = map.remove(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
    if m.shape() != (rows, cols) {
        return Err(bad(format!("tensor `{name}` has shape {:?}, expected ({rows}, {cols})", m.shape())));
    }
    Ok(m)
}

fn assemble_model(c: &ModelConfig, map: &mut BTreeMap<String, Matrix>) -> Result<Parameters> {
    let (d, dkv, ff, v) = (c.d_model, c.d_kv(), c.d_ff, c.vocab_size);
    let q = c.num_heads * c.head_dim;
    let mut layers = Vec::with_capacity(c.num_layers);
    for i in 0..c.num_layers {
        let mut t = |name: &str, r, k| take(map, &format!("layers.{i}.{name}"), r, k);
        layers.push(LayerWeights {
            attn_norm: t("attn_norm", 1, d)?,
            wq: t("wq", d, q)?,
            wk: t("wk", d, dkv)?,
            wv: t("wv", d, dkv)?,
            wo: t("wo", q, d)?,
            mlp_norm: t("mlp_norm", 1, d)?,
            w_gate: t("w_gate", d, ff)?,
            w_up: t("w_up", d, ff)?,
            w_down: t("w_down", ff, d)?,
        });
    }
    Ok(Parameters {
        config: c.clone(),
        embedding: take(map, "embedding", v, d)?,
        layers,
        final_norm: take(map, "final_norm", 1, d)?,
        lm_head: take(map, "lm_head", d, v)?,
    })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(format!("malformed {MANIFEST_FILE}: {e}")))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format `{}`", manifest.format)));
    }
    Ok(manifest)
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest.model.validate()?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| bad(format!("cannot read {}: {e}", blob_path.display())))?;
    let mut map = decode_tensors(&manifest, &blob)?;
    let base = assemble_model(&manifest.model, &mut map)?;
    let checkpoint = match &manifest.swiftkv {
        None => Checkpoint::Model(base),
        Some(cfg) => {
            let mut student = rewire_with_scope(&base, cfg, manifest.scope.unwrap_or_default())?;
            let mut failure = None;
            student.visit_trainable_mut(|name, m| {
                if failure.is_some() {
                    return;
                }
                match take(&mut map, name, m.rows(), m.cols()) {
                    Ok(t) => *m = t,
                    Err(e) => failure = Some(e),
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            Checkpoint::Student(student)
        }
    };
    if let Some(name) = map.keys().next() {
        return Err(bad(format!("unexpected tensor `{name}`")));
    }
    Ok(checkpoint)
}
