//! Checkpoint files.
//!
//! Layout (little-endian): `"IFCK"`, u32 version, u32 config length and
//! the UTF-8 JSON config, u32 tensor count, then per tensor a u16 name
//! length, the name, a u8 rank, u32 dims and f32 data; then one u8
//! frozen flag per tensor and a final u8 training phase.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::PipelineModel;
use crate::synthdata::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub model: PipelineModel<f32>,
    /// Last completed training phase (0, 1 or 2).
    pub phase: u8,
}

impl Checkpoint {
    /// A fresh, untrained model built from `config`.
    pub fn initial(config: &Config) -> Result<PipelineModel<f32>> {
        let mut m = PipelineModel::new(&config.model, &config.flow, config.data)?;
        m.use_icl = !config.ablation.no_icl;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = self.config.to_json();
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(json.as_bytes());
        let tensors = self.model.named_tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t, _) in &tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(2);
            buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        for (_, _, frozen) in &tensors {
            buf.push(*frozen as u8);
        }
        buf.push(self.phase);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(format!("config echo: {e}")))?;
        let config = Config::from_json(json).map_err(|e| Error::Format(format!("config echo: {e}")))?;

        let mut model = Self::initial(&config)?;
        let count = r.u32()? as usize;
        let expected: Vec<(String, (usize, usize))> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t, _)| (n, t.dim()))
            .collect();
        if count != expected.len() {
            return Err(Error::Format(format!("{count} tensors, model needs {}", expected.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (want_name, want_dim) in &expected {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
            if name != want_name {
                return Err(Error::Format(format!("tensor '{name}' where '{want_name}' was expected")));
            }
            let rank = r.u8()?;
            if rank != 2 {
                return Err(Error::Format(format!("tensor '{name}' has rank {rank}")));
            }
            let dim = (r.u32()? as usize, r.u32()? as usize);
            if dim != *want_dim {
                return Err(Error::Format(format!("tensor '{name}' has shape {dim:?}, expected {want_dim:?}")));
            }
            tensors.push(r.f32_matrix(dim.0, dim.1)?);
        }
        let mut flags = Vec::with_capacity(count);
        for _ in 0..count {
            match r.u8()? {
                0 => flags.push(false),
                1 => flags.push(true),
                f => return Err(Error::Format(format!("bad frozen flag {f}"))),
            }
        }
        let phase = r.u8()?;
        if phase > 2 {
            return Err(Error::Format(format!("bad phase {phase}")));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut tensors = tensors.into_iter();
        let mut flags = flags.into_iter();
        for net in model.networks_mut() {
            let mut frozen = None;
            for layer in net.layers_mut() {
                layer.weight = tensors.next().expect("counted");
                layer.bias = tensors.next().expect("counted");
                for f in [flags.next().expect("counted"), flags.next().expect("counted")] {
                    if *frozen.get_or_insert(f) != f {
                        return Err(Error::Format("mixed frozen flags within one network".into()));
                    }
                }
            }
            net.frozen = frozen.unwrap_or(false);
        }
        Ok(Self { config, model, phase })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Total number of scalar parameters.
pub fn parameter_count(model: &PipelineModel<f32>) -> usize {
    model.named_tensors().iter().map(|(_, t, _)| t.len()).sum()
}

/// `true` when every tensor of `a` equals the same-named tensor of `b` bit for bit.
pub fn tensors_bitwise_equal(a: &Array2<f32>, b: &Array2<f32>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthdata::DataDims;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.model = ModelConfig {
            d_z: 8,
            d_k: 4,
            m: 2,
            d_w: 4,
            e_id_hidden: [8, 8],
            e_attr_hidden: 8,
            mapping_hidden: 8,
            generator_hidden: 8,
            seed: 5,
            ..ModelConfig::default()
        };
        c.flow.n_blocks = 2;
        c.data = DataDims { d_id: 4, d_attr: 4, height: 8, width: 8 };
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let config = tiny_config();
        let mut model = Checkpoint::initial(&config).unwrap();
        model.e_id.frozen = true;
        model.icl.layers_mut()[0].weight[[0, 0]] = 0.123;
        let ck = Checkpoint { config, model, phase: 1 };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let config = tiny_config();
        let ck = Checkpoint { model: Checkpoint::initial(&config).unwrap(), config, phase: 0 };
        let bytes = ck.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { found: 9, expected: 1 })));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn no_icl_flag_survives_reload() {
        let mut config = tiny_config();
        config.ablation.no_icl = true;
        let ck = Checkpoint { model: Checkpoint::initial(&config).unwrap(), config, phase: 2 };
        assert!(!Checkpoint::from_bytes(&ck.to_bytes()).unwrap().model.use_icl);
    }
}
