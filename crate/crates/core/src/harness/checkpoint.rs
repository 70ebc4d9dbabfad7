//! `CPSC` checkpoints: named tensors, a trailing optimizer block and a config hash.

use std::path::Path;

use crate::arch::{ModelParams, NetworkSpec};
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, NamedTensors, OptimizerState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CPSC";
const VERSION: u32 = 1;
const BUFFER_PREFIX: &str = "buffer/";

/// Element encodings; `F64` keeps resumed runs bit-identical.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Number of completed training iterations.
    pub iteration: u64,
    pub config_hash: [u8; 8],
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor, dtype: Dtype) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype as u8);
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

fn write_block(out: &mut Vec<u8>, entries: &[(String, &Tensor)], dtype: Dtype) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        write_entry(out, name, t, dtype);
    }
}

fn read_block(r: &mut Reader<'_>) -> Result<NamedTensors> {
    let count = r.u32("entry count")?;
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.offset();
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => {
                return Err(Error::Format { offset: at as u64, reason: "entry name is not UTF-8".into() })
            }
        };
        let code_at = r.offset();
        let code = r.u8("dtype")?;
        let shape = r.extents()?;
        let data: Vec<f64> = match code {
            0 => r
                .payload(&shape, 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            2 => r
                .payload(&shape, 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(Error::Format { offset: code_at as u64, reason: format!("unknown dtype code {other}") })
            }
        };
        if out.contains_key(&name) {
            return Err(Error::Format { offset: at as u64, reason: format!("duplicate entry {name:?}") });
        }
        out.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(out)
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(&[1], vec![v]).unwrap()
}

impl Checkpoint {
    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let model: Vec<(String, &Tensor)> = self
            .params
            .params
            .iter()
            .map(|(k, t)| (k.clone(), t))
            .chain(self.params.buffers.iter().map(|(k, t)| (format!("{BUFFER_PREFIX}{k}"), t)))
            .collect();
        write_block(&mut out, &model, dtype);

        let o = &self.optimizer;
        let scalars = [
            ("iteration", self.iteration as f64),
            ("step", o.step as f64),
            ("lr", o.lr),
            ("base_lr", o.config.learning_rate),
            ("beta1", o.config.beta1),
            ("beta2", o.config.beta2),
            ("eps", o.config.eps),
            ("best_metric", o.best_metric),
            ("since_improvement", o.since_improvement as f64),
            ("since_best", o.since_best as f64),
        ]
        .map(|(k, v)| (k.to_string(), scalar(v)));
        let mut opt: Vec<(String, &Tensor)> = scalars.iter().map(|(k, t)| (k.clone(), t)).collect();
        opt.extend(o.first_moment.iter().map(|(k, t)| (format!("m/{k}"), t)));
        opt.extend(o.second_moment.iter().map(|(k, t)| (format!("v/{k}"), t)));
        // optimizer state stays in double precision so a resume is exact
        write_block(&mut out, &opt, Dtype::F64);
        out.extend_from_slice(&self.config_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC, VERSION)?;
        let model = read_block(&mut r)?;
        let opt_at = r.offset();
        let mut opt = read_block(&mut r)?;
        let hash: [u8; 8] = r.take(8, "config hash")?.try_into().unwrap();
        if !r.is_done() {
            return r.fail("trailing bytes after config hash");
        }

        let mut params = ModelParams { params: NamedTensors::new(), buffers: NamedTensors::new() };
        for (k, t) in model {
            match k.strip_prefix(BUFFER_PREFIX) {
                Some(b) => params.buffers.insert(b.to_string(), t),
                None => params.params.insert(k, t),
            };
        }
        let mut take = |key: &str| -> Result<f64> {
            match opt.shift_remove(key) {
                Some(t) if t.numel() == 1 => Ok(t.data()[0]),
                _ => Err(Error::Format { offset: opt_at as u64, reason: format!("optimizer block lacks {key:?}") }),
            }
        };
        let iteration = take("iteration")? as u64;
        let step = take("step")? as u64;
        let lr = take("lr")?;
        let config = AdamConfig {
            learning_rate: take("base_lr")?,
            beta1: take("beta1")?,
            beta2: take("beta2")?,
            eps: take("eps")?,
        };
        let best_metric = take("best_metric")?;
        let since_improvement = take("since_improvement")? as u64;
        let since_best = take("since_best")? as u64;
        let mut first_moment = NamedTensors::new();
        let mut second_moment = NamedTensors::new();
        for (k, t) in opt {
            if let Some(n) = k.strip_prefix("m/") {
                first_moment.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("v/") {
                second_moment.insert(n.to_string(), t);
            } else {
                return Err(Error::Format { offset: opt_at as u64, reason: format!("unexpected optimizer entry {k:?}") });
            }
        }
        Ok(Checkpoint {
            params,
            optimizer: OptimizerState {
                config,
                lr,
                step,
                first_moment,
                second_moment,
                best_metric,
                since_improvement,
                since_best,
            },
            iteration,
            config_hash: hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(Dtype::F64)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Refuses a checkpoint written for a different model, listing the differences.
    pub fn verify(&self, spec: &NetworkSpec, config_hash: [u8; 8]) -> Result<()> {
        self.params.verify(spec)?;
        if self.config_hash != config_hash {
            return Err(Error::ManifestMismatch(format!(
                "config hash {} does not match the current model {}",
                hex(&self.config_hash),
                hex(&config_hash)
            )));
        }
        Ok(())
    }
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_segcaps2d, SegCapsConfig};

    fn sample() -> (NetworkSpec, Checkpoint) {
        let spec = build_segcaps2d(16, 2, &SegCapsConfig::toy()).unwrap();
        let params = ModelParams::init(&spec, 3).unwrap();
        let mut optimizer = OptimizerState::new(AdamConfig::default(), &params.params);
        optimizer.best_metric = f64::NEG_INFINITY;
        optimizer.step = 7;
        let ck = Checkpoint { params, optimizer, iteration: 7, config_hash: *b"abcdefgh" };
        (spec, ck)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes(Dtype::F64);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(Dtype::F64), bytes);
    }

    #[test]
    fn single_precision_round_trip_is_stable_after_first_save() {
        let (_, ck) = sample();
        let once = Checkpoint::from_bytes(&ck.to_bytes(Dtype::F32)).unwrap();
        assert_eq!(once.to_bytes(Dtype::F32), ck.to_bytes(Dtype::F32));
    }

    #[test]
    fn tampered_extent_is_a_manifest_mismatch() {
        let (spec, ck) = sample();
        let mut bytes = ck.to_bytes(Dtype::F64);
        // first entry: magic+version+count, u16 len, name, dtype, rank, then extents
        let name_len = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        let ext = 14 + name_len + 2;
        let first = u32::from_le_bytes(bytes[ext..ext + 4].try_into().unwrap());
        let second_ext = ext + 4;
        let second = u32::from_le_bytes(bytes[second_ext..second_ext + 4].try_into().unwrap());
        // swap two extents so the byte count is unchanged but the shape is wrong
        bytes[ext..ext + 4].copy_from_slice(&second.to_le_bytes());
        bytes[second_ext..second_ext + 4].copy_from_slice(&first.to_le_bytes());
        assert_ne!(first, second);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let err = back.verify(&spec, ck.config_hash).unwrap_err();
        assert!(matches!(err, Error::ManifestMismatch(_)), "{err}");
    }

    #[test]
    fn wrong_hash_is_refused() {
        let (spec, ck) = sample();
        assert!(matches!(ck.verify(&spec, *b"xxxxxxxx"), Err(Error::ManifestMismatch(_))));
        ck.verify(&spec, ck.config_hash).unwrap();
    }

    #[test]
    fn truncations_and_bad_magic_are_format_errors() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes(Dtype::F64);
        for cut in [0, 3, 8, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
