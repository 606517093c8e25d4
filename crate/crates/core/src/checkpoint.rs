//! Self-describing model archive.
//!
//! Layout: magic `MTPK`, a format version, a JSON header (configs, task
//! specs, parameter names/shapes/offsets, dtype, caller extras) and a raw
//! little-endian payload of parameter values. Loading rebuilds the model
//! from the embedded configs and overwrites every parameter bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{build_backbone, BackboneConfig};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::mtl::{build_multitask_model, LossWeighting, MultiTaskModel};
use crate::peft::{inject_peft, AdaptedModel, PeftConfig};
use crate::tensor::{Dtype, Element};

const MAGIC: &[u8; 4] = b"MTPK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    /// Offset into the payload, in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: Dtype,
    pub backbone: BackboneConfig,
    pub peft: Option<PeftConfig>,
    pub loss_weighting: LossWeighting,
    pub retrieval_temperature: f64,
    pub head_dropout: f64,
    pub tasks: Vec<TaskSpec>,
    pub params: Vec<ParamEntry>,
    /// Caller-owned extras (e.g. the experiment config the run came from).
    #[serde(default)]
    pub extra: Value,
}

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Serialize a multi-task model with its configs.
pub fn save_multitask<F: Element>(
    model: &MultiTaskModel<F>,
    path: &Path,
    extra: Value,
) -> Result<()> {
    let mut params = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for p in model.registry().iter() {
        let data = p.tensor().data();
        params.push(ParamEntry {
            name: p.name().to_string(),
            shape: p.tensor().shape().to_vec(),
            frozen: p.frozen(),
            offset,
            len: data.len(),
        });
        for &v in data.iter() {
            v.write_le(&mut payload);
        }
        offset += data.len();
    }

    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE,
        backbone: model.adapted().backbone().config().clone(),
        peft: model.adapted().peft_config().cloned(),
        loss_weighting: model.weighting(),
        retrieval_temperature: model.temperature(),
        head_dropout: model.head_dropout(),
        tasks: model.tasks().to_vec(),
        params,
        extra,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

/// Parse only the header; lets callers dispatch on the stored dtype.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(checkpoint_err(path, "not a model checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(checkpoint_err(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(checkpoint_err(path, "truncated header"));
    }
    Ok(serde_json::from_slice(&bytes[16..16 + header_len])?)
}

/// Rebuild the model from a checkpoint. The element type must match the
/// stored dtype for a bit-exact restore.
pub fn load_multitask<F: Element>(path: &Path) -> Result<(MultiTaskModel<F>, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(checkpoint_err(path, "not a model checkpoint"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.dtype != F::DTYPE {
        return Err(checkpoint_err(
            path,
            format!(
                "stored dtype {} does not match requested {}",
                header.dtype.as_str(),
                F::DTYPE.as_str()
            ),
        ));
    }
    let payload = &bytes[16 + header_len..];

    let backbone = build_backbone::<F>(&header.backbone, 0)?;
    let adapted = match &header.peft {
        Some(peft) => inject_peft(backbone, peft, 0)?,
        None => AdaptedModel::full(backbone)?,
    };
    let model = build_multitask_model(
        adapted,
        &header.tasks,
        header.loss_weighting,
        header.retrieval_temperature,
        header.head_dropout,
        0,
    )?;

    if header.params.len() != model.registry().len() {
        return Err(checkpoint_err(
            path,
            format!(
                "{} stored parameters for a model with {}",
                header.params.len(),
                model.registry().len()
            ),
        ));
    }
    let width = F::BYTE_WIDTH;
    for entry in &header.params {
        let param = model
            .registry()
            .get(&entry.name)
            .ok_or_else(|| checkpoint_err(path, format!("unknown parameter {}", entry.name)))?;
        if param.tensor().shape() != entry.shape.as_slice() {
            return Err(checkpoint_err(
                path,
                format!("shape mismatch on {}", entry.name),
            ));
        }
        let start = entry.offset * width;
        let end = start + entry.len * width;
        if end > payload.len() {
            return Err(checkpoint_err(path, "truncated payload"));
        }
        let mut data = param.tensor().data_mut();
        for (i, slot) in data.iter_mut().enumerate() {
            *slot = F::read_le(&payload[start + i * width..start + (i + 1) * width]);
        }
        param.set_frozen(entry.frozen);
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Architecture;
    use crate::data::{Metric, TaskKind};
    use crate::peft::PeftMethod;
    use crate::rng::rng_for;
    use crate::trainer::{build_model, TrainConfig, TrainMode};
    use rand::Rng;

    fn small_model() -> (MultiTaskModel<f64>, Vec<TaskSpec>, TrainConfig) {
        let backbone = BackboneConfig {
            architecture: Architecture::EncoderOnly,
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 300,
            max_seq_len: 16,
            dropout: 0.0,
        };
        let tasks = vec![
            TaskSpec::new(0, "defect", TaskKind::BinaryClassification, Metric::Accuracy),
            TaskSpec::new(1, "search", TaskKind::Retrieval, Metric::Mrr),
        ];
        let mut config = TrainConfig::new(TrainMode::Peft);
        config.peft = Some(PeftConfig::new(PeftMethod::SerialAdapter));
        config.max_seq_len = 16;
        let model = build_model::<f64>(&backbone, &config, &tasks).unwrap();
        (model, tasks, config)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, _, _) = small_model();
        // Perturb a few values so the archive carries non-init state.
        let mut rng = rng_for(3, "seed");
        for p in model.registry().iter().take(4) {
            for v in p.tensor().data_mut().iter_mut() {
                *v += rng.gen::<f64>() * 0.1;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_multitask(&model, &path, serde_json::json!({"note": "test"})).unwrap();

        let (loaded, header) = load_multitask::<f64>(&path).unwrap();
        assert_eq!(header.extra["note"], "test");
        assert_eq!(header.tasks.len(), 2);
        for (a, b) in model.registry().iter().zip(loaded.registry().iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.frozen(), b.frozen());
            let da = a.tensor().data();
            let db = b.tensor().data();
            assert!(da.iter().zip(db.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn dtype_mismatch_is_detected() {
        let (model, _, _) = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_multitask(&model, &path, Value::Null).unwrap();
        assert!(load_multitask::<f32>(&path).is_err());
        assert!(read_header(&path).is_ok());
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            read_header(&path),
            Err(Error::Checkpoint { .. })
        ));
    }
}
