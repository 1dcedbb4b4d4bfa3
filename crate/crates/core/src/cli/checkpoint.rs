use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::model::GkgModel;
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Base64 of little-endian values, 4 or 8 bytes each per `Checkpoint::dtype`.
    pub data: String,
}

/// Shuffle generator position, enough to resume the batch order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub dtype: Precision,
    pub step: u64,
    pub epoch: usize,
    pub rng: RngState,
    pub params: Vec<TensorRecord>,
}

fn encode(t: &Tensor, dtype: Precision, name: &str) -> Result<String> {
    let mut bytes = Vec::new();
    match dtype {
        Precision::F32 => {
            for &v in t.data() {
                let f = v as f32;
                if f as f64 != v {
                    return Err(Error::Contract(format!(
                        "parameter {name} holds {v}, not representable in f32; round before saving"
                    )));
                }
                bytes.extend_from_slice(&f.to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(STANDARD.encode(bytes))
}

fn decode(rec: &TensorRecord, dtype: Precision) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&rec.data)
        .map_err(|e| Error::Format(format!("parameter {}: {e}", rec.name)))?;
    let data: Vec<f64> = match dtype {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let width = if dtype == Precision::F32 { 4 } else { 8 };
    if bytes.len() % width != 0 {
        return Err(Error::Format(format!("parameter {}: truncated payload", rec.name)));
    }
    Tensor::new(&rec.shape, data)
        .map_err(|_| Error::Format(format!("parameter {}: payload does not match shape", rec.name)))
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        store: &ParamStore,
        step: u64,
        epoch: usize,
        rng: RngState,
    ) -> Result<Self> {
        let dtype = config.precision;
        let params = store
            .iter()
            .map(|(_, p)| {
                Ok(TensorRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: encode(&p.value, dtype, &p.name)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            version: FORMAT_VERSION,
            config: config.clone(),
            dtype,
            step,
            epoch,
            rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {FORMAT_VERSION})",
                ck.version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    /// Overwrites every parameter of `store` by name; names and shapes must match one to one.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store
                .id_of(&rec.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", rec.name)))?;
            let value = decode(rec, self.dtype)?;
            let p = store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::shape("checkpoint restore", p.value.shape(), value.shape()));
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<GkgModel> {
        let mut model = GkgModel::new(self.config.model.clone(), self.config.seed)?;
        self.restore_into(&mut model.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn rng() -> RngState {
        RngState {
            seed: 0,
            word_pos: "0".into(),
        }
    }

    #[test]
    fn f32_requires_rounded_values() {
        let cfg = RunConfig {
            model: ModelConfig::micro(),
            ..RunConfig::default()
        };
        let mut model = GkgModel::new(cfg.model.clone(), 3).unwrap();
        assert!(Checkpoint::capture(&cfg, &model.params, 0, 0, rng()).is_err());
        model.params.round_to_f32();
        let ck = Checkpoint::capture(&cfg, &model.params, 0, 0, rng()).unwrap();
        let back = ck.build_model().unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let cfg = RunConfig {
            model: ModelConfig::micro(),
            precision: Precision::F64,
            ..RunConfig::default()
        };
        let model = GkgModel::new(cfg.model.clone(), 9).unwrap();
        let ck = Checkpoint::capture(&cfg, &model.params, 5, 1, rng()).unwrap();
        let json = serde_json::to_string(&ck).unwrap();
        let ck2: Checkpoint = serde_json::from_str(&json).unwrap();
        let back = ck2.build_model().unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_model_rejected() {
        let cfg = RunConfig {
            model: ModelConfig::micro(),
            precision: Precision::F64,
            ..RunConfig::default()
        };
        let model = GkgModel::new(cfg.model.clone(), 9).unwrap();
        let ck = Checkpoint::capture(&cfg, &model.params, 0, 0, rng()).unwrap();
        let mut other = GkgModel::new(ModelConfig::desk(), 9).unwrap();
        assert!(ck.restore_into(&mut other.params).is_err());
    }
}
