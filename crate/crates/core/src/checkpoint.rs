//! Versioned checkpoint container: a JSON descriptor followed by named
//! little-endian f32 tensors. Identical contents always encode to identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Params};

const MAGIC: &[u8; 4] = b"PPCK";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    A2e,
    Renderer,
    /// A fitted person mapping for a new target.
    Mapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub stage: Stage,
    pub architecture: serde_json::Value,
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    /// Lowest validation loss seen so far, when the run tracks one.
    #[serde(default)]
    pub best_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: Descriptor,
    pub tensors: Vec<Tensor>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(descriptor: Descriptor) -> Self {
        Self {
            descriptor,
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Appends every parameter tensor under its visiting name.
    pub fn push_params<P: Params<f32>>(&mut self, params: &P, prefix: &str) {
        params.visit(prefix, &mut |name, shape, data| {
            self.tensors.push(Tensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            });
        });
    }

    /// Overwrites `params` from tensors with matching names and shapes.
    pub fn load_params<P: Params<f32>>(&self, params: &mut P, prefix: &str) -> Result<()> {
        let mut err = None;
        params.visit_mut(prefix, &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match self.tensor(name) {
                Some(t) if t.shape == shape && t.data.len() == data.len() => {
                    data.copy_from_slice(&t.data)
                }
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Stores Adam moments split per parameter tensor.
    pub fn push_adam<P: Params<f32>>(&mut self, params: &P, state: &AdamState<f32>) {
        let mut at = 0;
        let mut out = Vec::new();
        params.visit("", &mut |name, shape, data| {
            let n = data.len();
            for (tag, src) in [(ADAM_M, &state.m), (ADAM_V, &state.v)] {
                out.push(Tensor {
                    name: format!("{tag}{name}"),
                    shape: shape.to_vec(),
                    data: src[at..at + n].to_vec(),
                });
            }
            at += n;
        });
        self.tensors.extend(out);
    }

    pub fn load_adam<P: Params<f32>>(&self, params: &P) -> Result<AdamState<f32>> {
        let mut m = Vec::with_capacity(params.param_count());
        let mut v = Vec::with_capacity(params.param_count());
        let mut err = None;
        params.visit("", &mut |name, _, data| {
            for (tag, dst) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                match self.tensor(&format!("{tag}{name}")) {
                    Some(t) if t.data.len() == data.len() => dst.extend_from_slice(&t.data),
                    _ => {
                        err.get_or_insert_with(|| {
                            Error::Checkpoint(format!("missing optimizer state for {name}"))
                        });
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(AdamState {
            step: self.descriptor.adam_step,
            m,
            v,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.descriptor).expect("descriptor serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, at: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = c.u32()? as usize;
        let descriptor: Descriptor = serde_json::from_slice(c.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad descriptor: {e}")))?;
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = c.u32()? as usize;
            let name = String::from_utf8(c.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = c.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(c.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = c.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if c.at != bytes.len() {
            return Err(Error::Checkpoint(
                "trailing bytes after the last tensor".into(),
            ));
        }
        Ok(Self {
            descriptor,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a2e::ExpressionNet;
    use crate::nn::{Adam, AdamSettings};
    use rand::SeedableRng;

    fn sample() -> (ExpressionNet<f32>, Checkpoint) {
        let net = ExpressionNet::<f32>::xavier(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let mut adam = Adam::new(AdamSettings::default(), &net);
        let grads = net.clone();
        adam.step(&mut net.clone(), &grads, 1e-3);
        let mut ck = Checkpoint::new(Descriptor {
            stage: Stage::A2e,
            architecture: serde_json::json!({"sequences": 2}),
            epoch: 3,
            adam_step: adam.state.step,
            best_validation_loss: None,
        });
        ck.push_params(&net, "net");
        ck.push_adam(&net, &adam.state);
        (net, ck)
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let (net, ck) = sample();
        let bytes = ck.to_bytes();
        assert_eq!(bytes, sample().1.to_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut restored = ExpressionNet::<f32>::zeros();
        back.load_params(&mut restored, "net").unwrap();
        assert_eq!(restored, net);
        let state = back.load_adam(&net).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(state.m.len(), net.param_count());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut wrong = crate::a2e::PerFrameNet::<f32>::zeros();
        assert!(ck.load_params(&mut wrong, "other").is_err());
    }
}
