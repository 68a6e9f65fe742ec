//! Checkpoint files.
//!
//! Layout (little-endian): `b"RFCK"`, `u32` format version, `u64` byte
//! length of a JSON header, the header, then a tensor table holding the
//! model parameters under their own names and the Adam moments under
//! `adam.m.<name>` / `adam.v.<name>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rainforge_tensor::{io, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Derainer;
use crate::nn::Module;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const VERSION: u32 = 1;

/// Training progress. Every random stream is derived from the configured
/// seeds and the iteration counter, so these fields are the complete
/// random state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub adam_step: u64,
    pub best_val_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    state: TrainState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub params: Vec<(String, Tensor<f32>)>,
    /// First and second Adam moments, in parameter order.
    pub moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &Derainer<f32>, adam: Option<&AdamState<f32>>, state: TrainState) -> Self {
        Checkpoint {
            config: config.clone(),
            state,
            params: model.state(),
            moments: adam.filter(|a| !a.m.is_empty()).map(|a| (a.m.clone(), a.v.clone())),
        }
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn model(&self) -> Result<Derainer<f32>> {
        let mut model = Derainer::new(&self.config.model)?;
        model.load_state(&self.params)?;
        Ok(model)
    }

    pub fn adam(&self) -> AdamState<f32> {
        let mut adam = AdamState::new(self.config.adam.clone());
        adam.step = self.state.adam_step;
        if let Some((m, v)) = &self.moments {
            adam.m = m.clone();
            adam.v = v.clone();
        }
        adam
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&Header { config: self.config.clone(), state: self.state.clone() })?;
        let io_err = |e| Error::from(rainforge_tensor::TensorError::Io(e));
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&header).map_err(io_err)?;
        let mut table = self.params.clone();
        if let Some((m, v)) = &self.moments {
            if m.len() != self.params.len() || v.len() != self.params.len() {
                return Err(Error::Checkpoint("moment count differs from parameter count".into()));
            }
            for ((name, _), t) in self.params.iter().zip(m) {
                table.push((format!("adam.m.{name}"), t.clone()));
            }
            for ((name, _), t) in self.params.iter().zip(v) {
                table.push((format!("adam.v.{name}"), t.clone()));
            }
        }
        io::write_table(w, &table)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let io_err = |e: std::io::Error| Error::Checkpoint(format!("truncated file: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io_err)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io_err)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 24 {
            return Err(Error::Checkpoint(format!("header length {len} is implausible")));
        }
        let mut text = vec![0u8; len as usize];
        r.read_exact(&mut text).map_err(io_err)?;
        let header: Header =
            serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let table: Vec<(String, Tensor<f32>)> = io::read_table(r)?;

        let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (name, t) in table {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let ordered = |moments: Vec<(String, Tensor<f32>)>, kind: &str| -> Result<Vec<Tensor<f32>>> {
            if moments.len() != params.len() || moments.iter().zip(&params).any(|((a, _), (b, _))| a != b) {
                return Err(Error::Checkpoint(format!("adam.{kind} tensors do not match the parameters")));
            }
            Ok(moments.into_iter().map(|(_, t)| t).collect())
        };
        let moments = if m.is_empty() && v.is_empty() {
            None
        } else {
            Some((ordered(m, "m")?, ordered(v, "v")?))
        };
        Ok(Checkpoint { config: header.config, state: header.state, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.write(&mut w)?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(&mut BufReader::new(file))
    }
}

/// Parameter count of the model a configuration describes.
pub fn param_count(config: &RunConfig) -> Result<usize> {
    Ok(Derainer::<f32>::new(&config.model)?.param_count())
}
