use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Layout, LstmModel, LstmParams, Normalizer, Tensor, TrainConfig};
use crate::error::{Error, Result};
use crate::textfmt::to_toml_string;

pub const MODEL_FORMAT: &str = "lrtbench-lstm/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: [usize; 2],
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    n_h: usize,
    m_z: usize,
    config: TrainConfig,
    normalizer: Normalizer,
    tensors: BTreeMap<String, TensorRecord>,
}

impl LstmModel {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let layout = self.params.layout;
        let tensors = Tensor::ALL
            .into_iter()
            .map(|t| {
                let (rows, cols) = layout.shape(t);
                (t.name().to_string(), TensorRecord { shape: [rows, cols], data: self.params.tensor(t).to_vec() })
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            n_h: layout.n_h,
            m_z: layout.m_z,
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            tensors,
        };
        out.write_all(to_toml_string(&file)?.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let file: ModelFile = toml::from_str(&text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unsupported model format {:?}", file.format)));
        }
        if file.normalizer.mean.len() != file.m_z || file.normalizer.std.len() != file.m_z {
            return Err(Error::Format("normalizer does not match m_z".into()));
        }
        let mut params = LstmParams::zeros(file.n_h, file.m_z);
        let layout: Layout = params.layout;
        for (name, rec) in &file.tensors {
            let t = Tensor::from_name(name).ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
            let (rows, cols) = layout.shape(t);
            if rec.shape != [rows, cols] || rec.data.len() != rows * cols {
                return Err(Error::Format(format!("tensor {name} has the wrong shape")));
            }
            params.tensor_mut(t).copy_from_slice(&rec.data);
        }
        if file.tensors.len() != Tensor::ALL.len() {
            return Err(Error::Format("model file is missing tensors".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model weights".into()));
        }
        file.config.validate()?;
        Ok(LstmModel { params, normalizer: file.normalizer, config: file.config })
    }
}
