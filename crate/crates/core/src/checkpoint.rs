//! `HFSC` checkpoints: magic `"HFSC"`, `u32` version, 32-byte config hash,
//! `u64` step, the config as length-prefixed JSON, then named tensors.
//!
//! Each tensor is stored as a `u32` name length, the UTF-8 name, a `u32` rank,
//! one `u64` per dimension and the values as little-endian `f64`. Model
//! parameters come first in store order, followed by `adam.m/<name>` and
//! `adam.v/<name>` for every parameter.

use std::path::Path;

use crate::config::TrainConfig;
use crate::diffmath::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::HfsModel;
use crate::trainer::OptimizerState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HFSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters plus optimizer state, enough to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn new(model: &HfsModel, optimizer: &OptimizerState) -> Self {
        Self {
            config: model.config.clone(),
            params: model.store.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn into_parts(self) -> Result<(HfsModel, OptimizerState)> {
        let model = HfsModel::with_params(&self.config, self.params)?;
        Ok((model, self.optimizer))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.hash());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let json = serde_json::to_string(&self.config).expect("config serializes");
        put_bytes(&mut out, json.as_bytes());
        let count = 3 * self.params.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        for (prefix, moments) in [("adam.m/", &self.optimizer.m), ("adam.v/", &self.optimizer.v)] {
            for ((_, name, _), t) in self.params.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        let step = r.u64("step")?;
        let json_len = r.u32("config length")? as usize;
        let json = std::str::from_utf8(r.take(json_len, "config")?).map_err(|e| Error::Malformed {
            location: "checkpoint config".into(),
            detail: e.to_string(),
        })?;
        let config: TrainConfig = serde_json::from_str(json)?;
        config.validate()?;
        if config.hash() != hash {
            return Err(Error::Malformed {
                location: "checkpoint header".into(),
                detail: "config hash does not match the embedded config".into(),
            });
        }

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed {
                location: format!("byte {}", r.pos),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        if !count.is_multiple_of(3) {
            return Err(Error::Malformed {
                location: "tensor table".into(),
                detail: format!("{count} tensors cannot hold parameters and two moment sets"),
            });
        }
        let n = count / 3;
        let mut rest = tensors.split_off(n);
        let v_part = rest.split_off(n);
        let mut params = ParamStore::new();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for ((name, t), ((m_name, m_t), (v_name, v_t))) in tensors.into_iter().zip(rest.into_iter().zip(v_part)) {
            for (prefix, got) in [("adam.m/", &m_name), ("adam.v/", &v_name)] {
                if *got != format!("{prefix}{name}") {
                    return Err(Error::Malformed {
                        location: format!("tensor {got}"),
                        detail: format!("expected {prefix}{name}"),
                    });
                }
            }
            if m_t.shape() != t.shape() || v_t.shape() != t.shape() {
                return Err(Error::Malformed {
                    location: format!("tensor {name}"),
                    detail: "moment shapes differ from the parameter".into(),
                });
            }
            params.insert(name, t);
            m.push(m_t);
            v.push(v_t);
        }
        Ok(Self {
            config,
            params,
            optimizer: OptimizerState { m, v, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.bytes.len() as u64,
                detail: format!("{what} needs {n} bytes at offset {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|e| Error::Malformed {
                location: format!("byte {}", self.pos),
                detail: e.to_string(),
            })?
            .to_string();
        let rank = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64("tensor dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Malformed {
                location: format!("tensor {name}"),
                detail: format!("shape {shape:?} overflows"),
            })?;
        let data = self
            .take(numel, &format!("tensor {name}"))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Malformed {
            location: format!("tensor {name}"),
            detail: e.to_string(),
        })?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let config = TrainConfig {
            n_frames: 8,
            k_sel: 2,
            dim: 4,
            scorer_hidden: 5,
            teacher_hidden: 4,
            teacher_mlp_hidden: 3,
            encoder_mlp_hidden: 5,
            vocab_size: 6,
            prompt_len: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let model = HfsModel::init(&config).unwrap();
        let mut opt = OptimizerState::new(&model.store);
        for (i, t) in opt.m.iter_mut().chain(opt.v.iter_mut()).enumerate() {
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                *x = (i as f64 + 0.1) * (j as f64).sin();
            }
        }
        opt.step = 37;
        Checkpoint::new(&model, &opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = small();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.step(), 37);
        assert_eq!(back.optimizer, ck.optimizer);
        for ((_, n1, t1), (_, n2, t2)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        assert_eq!(back.encode(), bytes);
        back.into_parts().unwrap();
    }

    #[test]
    fn header_checks() {
        let bytes = small().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadVersion { found: 2, .. })));
        let mut bad = bytes.clone();
        bad[8] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Malformed { .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Malformed { .. })));
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = small().encode();
        for cut in (4..bytes.len()).step_by(7) {
            match Checkpoint::decode(&bytes[..cut]) {
                Err(Error::Truncated { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }
}
