//! Versioned JSON checkpoints. Parameters are written as shortest
//! round-trip decimals, so load(save(m)) is bit-exact.

use serde::{Deserialize, Serialize};

use super::model::CnnModel;
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: CnnModel,
}

pub fn save_checkpoint(model: &CnnModel) -> String {
    let ckpt = Checkpoint {
        format: "widur-cnn".into(),
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    serde_json::to_string(&ckpt).expect("model serializes")
}

pub fn load_checkpoint(text: &str) -> Result<CnnModel, NnError> {
    let ckpt: Checkpoint =
        serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if ckpt.format != "widur-cnn" || ckpt.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ckpt.format, ckpt.version
        )));
    }
    let m = ckpt.model;
    let consistent = m.convs.iter().all(|c| {
        c.weight.len() == c.out_ch * c.in_ch * c.kernel && c.bias.len() == c.out_ch
    }) && m
        .dense
        .iter()
        .all(|d| d.weight.len() == d.inputs * d.outputs && d.bias.len() == d.outputs);
    if !consistent || m.dense.is_empty() {
        return Err(NnError::Checkpoint("inconsistent layer shapes".into()));
    }
    Ok(m)
}
