//! Binary model checkpoints.
//!
//! Layout: the 7-byte magic `DPROTO1`, a little-endian `u64` header length,
//! a JSON header, then the payload of little-endian `f64` tensor blobs. The
//! header carries the model configuration, class names, the tensor
//! directory (name, shape, byte offset and length within the payload) and
//! prototype provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ProtoLayerConfig};
use crate::protolayer::{ClassifierHead, MaskPool, Prototype, PrototypeSet, PrototypeSource};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"DPROTO1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PrototypeMeta {
    id: usize,
    class_id: usize,
    source: Option<PrototypeSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    backbone: BackboneConfig,
    protolayer: ProtoLayerConfig,
    class_names: Vec<String>,
    trained_epochs: usize,
    prototypes: Vec<PrototypeMeta>,
    tensors: Vec<TensorEntry>,
    /// Free-form run configuration echoed by the caller.
    run_config: Option<serde_json::Value>,
}

fn source_image_name(j: usize) -> String {
    format!("prototype.{j}.source_image")
}

pub fn to_bytes(model: &Model, run_config: Option<&serde_json::Value>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, Tensor)> = model
        .backbone
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let [h1, w1, d1] = model.masks.shape();
    named.push((
        "masks".into(),
        Tensor::new(vec![model.masks.len(), h1, w1, d1], model.masks.data().to_vec())?,
    ));
    named.push(("prototypes".into(), model.prototypes.matrix()));
    named.push(("head".into(), model.head.weights.clone()));
    for (j, p) in model.prototypes.prototypes.iter().enumerate() {
        if let Some(img) = p.source.as_ref().and_then(|s| s.source_image.as_ref()) {
            named.push((source_image_name(j), img.clone()));
        }
    }

    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    }
    let header = Header {
        version: FORMAT_VERSION,
        backbone: model.backbone.config().clone(),
        protolayer: model.proto_config.clone(),
        class_names: model.class_names.clone(),
        trained_epochs: model.trained_epochs,
        prototypes: model
            .prototypes
            .prototypes
            .iter()
            .map(|p| PrototypeMeta {
                id: p.id,
                class_id: p.class_id,
                source: p.source.clone(),
            })
            .collect(),
        tensors,
        run_config: run_config.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub run_config: Option<serde_json::Value>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing DPROTO1 magic".into()));
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let start = MAGIC.len() + 8;
    let header_end = start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[start..header_end])
        .map_err(|e| bad(format!("invalid header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let payload = &bytes[header_end..];
    let tensor = |name: &str| -> Result<Tensor> {
        let e = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let numel: usize = e.shape.iter().product();
        if e.length != numel * 8 || e.offset + e.length > payload.len() {
            return Err(bad(format!("tensor {name} has an inconsistent directory entry")));
        }
        let data = payload[e.offset..e.offset + e.length]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(e.shape.clone(), data)
    };

    let mut backbone = Backbone::new(&header.backbone, 0)?;
    let names: Vec<String> = backbone.parameters().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(backbone.parameters_mut()) {
        let t = tensor(name)?;
        if t.shape() != slot.shape() {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    let masks_t = tensor("masks")?;
    let ms = masks_t.shape();
    if ms.len() != 4 || ms[1..] != backbone.feature_shape() {
        return Err(bad(format!("mask pool shape {ms:?} does not match the feature map")));
    }
    let masks = MaskPool::from_data([ms[1], ms[2], ms[3]], masks_t.into_data())?;
    let matrix = tensor("prototypes")?;
    let d = backbone.feature_shape()[2];
    if matrix.shape() != [header.prototypes.len(), d] {
        return Err(bad(format!("prototype matrix shape {:?}", matrix.shape())));
    }
    let mut protos = Vec::with_capacity(header.prototypes.len());
    for (j, (meta, row)) in header.prototypes.iter().zip(matrix.data().chunks(d)).enumerate() {
        let mut source = meta.source.clone();
        if let Some(s) = source.as_mut() {
            s.source_image = match header.tensors.iter().any(|t| t.name == source_image_name(j)) {
                true => Some(tensor(&source_image_name(j))?),
                false => None,
            };
        }
        protos.push(Prototype {
            id: meta.id,
            vector: row.to_vec(),
            class_id: meta.class_id,
            source,
        });
    }
    let head = ClassifierHead { weights: tensor("head")? };
    if head.weights.shape() != [header.class_names.len(), protos.len()] {
        return Err(bad(format!("head shape {:?}", head.weights.shape())));
    }
    if protos.iter().any(|p| p.class_id >= header.class_names.len()) {
        return Err(bad("prototype class id out of range".into()));
    }
    Ok(Checkpoint {
        model: Model {
            backbone,
            masks,
            prototypes: PrototypeSet::from_prototypes(protos)?,
            head,
            proto_config: header.protolayer,
            class_names: header.class_names,
            trained_epochs: header.trained_epochs,
        },
        run_config: header.run_config,
    })
}

pub fn save(model: &Model, path: &Path, run_config: Option<&serde_json::Value>) -> Result<()> {
    let bytes = to_bytes(model, run_config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let proto = ProtoLayerConfig { prototypes_per_class: 2, feature_masks: 3, epsilon: 1e-12 };
        let mut model = Model::new(&BackboneConfig::default(), &proto, vec!["a".into(), "b".into()], 5).unwrap();
        model.prototypes.prototypes[1].source = Some(PrototypeSource {
            image_index: 3,
            image_id: "images/00003.ppm".into(),
            epoch: 10,
            mask_ids: vec![1, 2],
            augmentations: 2,
            source_vectors: vec![vec![0.1; 32], vec![0.30000000000000004; 32]],
            source_image: Some(Tensor::full(&[56, 56, 3], 0.25)),
        });
        let a = to_bytes(&model, Some(&serde_json::json!({"seed": 5}))).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(to_bytes(&back.model, back.run_config.as_ref()).unwrap(), a);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(from_bytes(b"NOTPROTO00000000"), Err(Error::Checkpoint(_))));
        let model = Model::new(
            &BackboneConfig::default(),
            &ProtoLayerConfig { prototypes_per_class: 1, feature_masks: 1, epsilon: 1e-12 },
            vec!["a".into()],
            0,
        )
        .unwrap();
        let bytes = to_bytes(&model, None).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
