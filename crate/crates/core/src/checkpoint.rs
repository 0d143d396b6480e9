//! Model checkpoints: a JSON manifest plus a little-endian `f64` blob.
//!
//! The blob holds, layer by layer, the row-major weights followed by the
//! biases. Thresholds live in the manifest; infinite values (gates held open
//! or shut) are written as the strings `"inf"` and `"-inf"`.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::compression::CompressionConfig;
use crate::costmodel::LayerSpec;
use crate::error::{Error, Result};
use crate::gates::GateThresholds;
use crate::model::{Layer, Mlp};
use crate::quantizer::{BitLadder, QuantInterval};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// A model together with the search state needed to resume or report.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Mlp,
    pub ladder: BitLadder,
    pub group_size: usize,
    /// Empty for checkpoints taken outside the search.
    pub thresholds: Vec<GateThresholds>,
    pub config: Option<CompressionConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Real(f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            v if v.is_finite() => s.serialize_f64(v),
            v if v == f64::INFINITY => s.serialize_str("inf"),
            v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
            _ => s.serialize_str("nan"),
        }
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Real(v)),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(Real(f64::INFINITY)),
                "-inf" => Ok(Real(f64::NEG_INFINITY)),
                "nan" => Ok(Real(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("not a number: `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdRecord {
    prune: Real,
    bits_w: Vec<Real>,
    bits_x: Vec<Real>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    spec: LayerSpec,
    /// `[out, in]`.
    weight_shape: [usize; 2],
    /// Position of the first weight in the blob, in values.
    offset: usize,
    interval: QuantInterval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    blob: String,
    blob_values: usize,
    weight_normalization: bool,
    ladder: BitLadder,
    group_size: usize,
    layers: Vec<LayerRecord>,
    thresholds: Vec<ThresholdRecord>,
    config: Option<CompressionConfig>,
}

impl Checkpoint {
    /// Manifest text and blob bytes; `blob_name` is recorded in the manifest.
    pub fn to_parts(&self, blob_name: &str) -> Result<(String, Vec<u8>)> {
        let mut values = Vec::new();
        let mut layers = Vec::with_capacity(self.model.layers.len());
        for (l, spec) in self.model.layers.iter().zip(&self.model.specs) {
            layers.push(LayerRecord {
                spec: spec.clone(),
                weight_shape: [l.w.rows(), l.w.cols()],
                offset: values.len(),
                interval: l.interval,
            });
            values.extend_from_slice(l.w.data());
            values.extend_from_slice(l.b.data());
        }
        let thresholds = self
            .thresholds
            .iter()
            .map(|t| ThresholdRecord {
                prune: Real(t.prune),
                bits_w: t.bits_w.iter().map(|&v| Real(v)).collect(),
                bits_x: t.bits_x.iter().map(|&v| Real(v)).collect(),
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            blob: blob_name.to_string(),
            blob_values: values.len(),
            weight_normalization: self.model.weight_norm,
            ladder: self.ladder.clone(),
            group_size: self.group_size,
            layers,
            thresholds,
            config: self.config.clone(),
        };
        let blob = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok((serde_json::to_string_pretty(&manifest)? + "\n", blob))
    }

    pub fn from_parts(manifest: &str, blob: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_str(manifest)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                m.format_version
            )));
        }
        if blob.len() != m.blob_values * 8 {
            return Err(Error::Format(format!(
                "blob holds {} bytes, manifest expects {} values",
                blob.len(),
                m.blob_values
            )));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut layers = Vec::with_capacity(m.layers.len());
        let mut specs = Vec::with_capacity(m.layers.len());
        for rec in m.layers {
            let [rows, cols] = rec.weight_shape;
            let end = rec.offset + rows * cols + rows;
            if end > values.len() || rows != rec.spec.out_channels || cols != rec.spec.in_channels {
                return Err(Error::Format(format!(
                    "layer `{}` does not fit the blob",
                    rec.spec.name
                )));
            }
            let w = Tensor::matrix(
                rows,
                cols,
                values[rec.offset..rec.offset + rows * cols].to_vec(),
            )?;
            let b = Tensor::vector(values[rec.offset + rows * cols..end].to_vec());
            layers.push(Layer {
                name: rec.spec.name.clone(),
                w,
                b,
                interval: rec.interval,
            });
            specs.push(rec.spec);
        }
        if layers.is_empty() {
            return Err(Error::Format("checkpoint has no layers".into()));
        }
        if !m.thresholds.is_empty() && m.thresholds.len() != layers.len() {
            return Err(Error::Format(format!(
                "{} threshold sets for {} layers",
                m.thresholds.len(),
                layers.len()
            )));
        }
        let thresholds = m
            .thresholds
            .into_iter()
            .map(|t| GateThresholds {
                prune: t.prune.0,
                bits_w: t.bits_w.into_iter().map(|r| r.0).collect(),
                bits_x: t.bits_x.into_iter().map(|r| r.0).collect(),
            })
            .collect();
        Ok(Self {
            model: Mlp {
                layers,
                specs,
                weight_norm: m.weight_normalization,
            },
            ladder: m.ladder,
            group_size: m.group_size,
            thresholds,
            config: m.config,
        })
    }

    /// Write `manifest` and its blob next to it.
    pub fn save(&self, manifest: &Path, blob: &Path) -> Result<()> {
        let name = blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Format(format!("bad blob path {}", blob.display())))?;
        let (text, bytes) = self.to_parts(name)?;
        std::fs::write(blob, bytes)?;
        std::fs::write(manifest, text)?;
        Ok(())
    }

    /// Read a manifest and the blob it names, resolved against its directory.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest)?;
        #[derive(Deserialize)]
        struct BlobName {
            blob: String,
        }
        let name: BlobName = serde_json::from_str(&text)?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let bytes = std::fs::read(dir.join(name.blob))?;
        Self::from_parts(&text, &bytes)
    }
}
