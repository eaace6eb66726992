//! Head checkpoints: safetensors payload plus a JSON configuration
//! fingerprint in the file metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::correlation::MatcherConfig;
use crate::error::{Error, Result};
use crate::features::BackboneSpec;
use crate::head::{DensityHeadParams, HEAD_VERSION};

const META_KEY: &str = "famcount";

/// Everything a checkpoint's parameters depend on. Two checkpoints are
/// interchangeable only if their fingerprints are equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub head_version: u32,
    /// How to rebuild the backbone.
    pub backbone: BackboneSpec,
    /// Identifier reported by the backbone the head was trained on.
    pub backbone_id: String,
    pub matcher: MatcherConfig,
    pub channel_order: Vec<String>,
    pub resize_height: u32,
}

impl ModelFingerprint {
    pub fn new(backbone: BackboneSpec, backbone_id: String, matcher: MatcherConfig, resize_height: u32) -> Self {
        Self {
            head_version: HEAD_VERSION,
            channel_order: matcher.channel_labels(),
            backbone,
            backbone_id,
            matcher,
            resize_height,
        }
    }

    /// Short stable digest for logs and health reports.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("fingerprint serializes");
        let hash = Sha256::digest(json);
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub iteration: Option<usize>,
    pub train_loss: Option<f64>,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DensityHeadParams,
    pub fingerprint: ModelFingerprint,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: ModelFingerprint,
    meta: CheckpointMeta,
    #[serde(default = "unit_scale")]
    output_scale: f32,
}

fn unit_scale() -> f32 {
    1.0
}

fn tensor_name(i: usize) -> String {
    format!("layer{}.{}", i / 2, if i % 2 == 0 { "weight" } else { "bias" })
}

impl Checkpoint {
    pub fn new(params: DensityHeadParams, fingerprint: ModelFingerprint, meta: CheckpointMeta) -> Result<Self> {
        let ckpt = Self {
            params,
            fingerprint,
            meta,
        };
        ckpt.check_consistent()?;
        Ok(ckpt)
    }

    fn check_consistent(&self) -> Result<()> {
        if self.fingerprint.head_version != HEAD_VERSION {
            return Err(Error::Checkpoint(format!(
                "head version {} is not supported (expected {HEAD_VERSION})",
                self.fingerprint.head_version
            )));
        }
        if self.fingerprint.channel_order != self.fingerprint.matcher.channel_labels() {
            return Err(Error::Checkpoint("channel order disagrees with matcher configuration".into()));
        }
        if self.fingerprint.matcher.channels() != self.params.in_channels() {
            return Err(Error::Checkpoint(format!(
                "matcher produces {} channels, head expects {}",
                self.fingerprint.matcher.channels(),
                self.params.in_channels()
            )));
        }
        Ok(())
    }

    /// Errors unless `expected` equals this checkpoint's fingerprint.
    pub fn ensure_compatible(&self, expected: &ModelFingerprint) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::Checkpoint(format!(
                "fingerprint {} does not match the running configuration {}",
                self.fingerprint.digest(),
                expected.digest()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shapes = self.params.tensor_shapes();
        let tensors = self.params.tensors();
        let bytes: Vec<Vec<u8>> = tensors
            .iter()
            .map(|t| t.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = bytes
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (b, shape))| {
                TensorView::new(Dtype::F32, shape, b)
                    .map(|v| (tensor_name(i), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            meta: self.meta.clone(),
            output_scale: self.params.output_scale(),
        };
        let metadata = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
        safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: String| Error::Checkpoint(e);
        let (_, st_meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let header_json = st_meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing configuration fingerprint".into()))?;
        let header: Header = serde_json::from_str(header_json).map_err(|e| bad(format!("bad fingerprint: {e}")))?;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let in_channels = header.fingerprint.matcher.channels();
        let expected = DensityHeadParams::zeros(in_channels).tensor_shapes();
        let mut flat = Vec::with_capacity(expected.len());
        for (i, shape) in expected.iter().enumerate() {
            let name = tensor_name(i);
            let view = tensors
                .tensor(&name)
                .map_err(|_| bad(format!("missing tensor `{name}`")))?;
            if view.dtype() != Dtype::F32 || view.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "tensor `{name}` is {:?} {:?}, expected F32 {shape:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            flat.push(
                view.data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        let params = DensityHeadParams::from_tensors(in_channels, flat)?
            .with_output_scale(header.output_scale)
            .map_err(|e| bad(e.to_string()))?;
        Self::new(params, header.fingerprint, header.meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        // Write-then-rename so readers never see a partial file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
