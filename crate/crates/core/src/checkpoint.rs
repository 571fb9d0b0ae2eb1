//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "PDAC" | u32 version | u8 head (0 prototypical, 1 traditional)
//! u32 proto_dim | u32 classes | u32 tensor count
//! per tensor: u32 rank, rank × u32 dims
//! every parameter value as f64, tensors in declaration order
//! u8 optimizer present
//!   f64 rho | f64 epsilon | u64 epochs completed | u32 slot count
//!   per slot: u64 length
//!   squared-gradient averages, then squared-update averages, as f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Architecture, HeadKind, ModelParams};
use crate::optim::AdaDelta;
use crate::pipeline::TrainState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDAC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelParams,
    /// Present when the file can resume training.
    pub optimizer: Option<AdaDelta>,
    pub epochs_completed: usize,
}

impl Checkpoint {
    pub fn model_only(model: ModelParams) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epochs_completed: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.model.arch;
        let tensors = self.model.tensors();
        let mut out = Vec::with_capacity(64 + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(match arch.head {
            HeadKind::Prototypical => 0,
            HeadKind::Traditional => 1,
        });
        put_u32(&mut out, arch.proto_dim as u32);
        put_u32(&mut out, arch.classes as u32);
        put_u32(&mut out, tensors.len() as u32);
        for t in &tensors {
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
        }
        for t in &tensors {
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_f64s(&mut out, &[opt.rho(), opt.epsilon()]);
                out.extend_from_slice(&(self.epochs_completed as u64).to_le_bytes());
                put_u32(&mut out, opt.acc_grad().len() as u32);
                for slot in opt.acc_grad() {
                    out.extend_from_slice(&(slot.len() as u64).to_le_bytes());
                }
                for slot in opt.acc_grad().iter().chain(opt.acc_delta()) {
                    put_f64s(&mut out, slot);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let head = match r.u8()? {
            0 => HeadKind::Prototypical,
            1 => HeadKind::Traditional,
            other => return Err(Error::Checkpoint(format!("unknown head tag {other}"))),
        };
        let arch = Architecture {
            head,
            proto_dim: r.u32()? as usize,
            classes: r.u32()? as usize,
        };
        arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = arch.param_shapes();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, file has {count}",
                expected.len()
            )));
        }
        let mut shapes = Vec::with_capacity(count);
        for want in &expected {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &shape != want {
                return Err(Error::Checkpoint(format!("layer shape {shape:?} does not match {want:?}")));
            }
            shapes.push(shape);
        }
        let tensors = shapes
            .into_iter()
            .map(|s| {
                let data = r.f64s(s.iter().product())?;
                Tensor::new(s, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = ModelParams::from_tensors(arch, tensors)?;
        let (optimizer, epochs_completed) = match r.u8()? {
            0 => (None, 0),
            1 => {
                let rho = r.f64()?;
                let epsilon = r.f64()?;
                let epochs = r.u64()? as usize;
                let slots = r.u32()? as usize;
                let lengths = (0..slots).map(|_| r.u64().map(|n| n as usize)).collect::<Result<Vec<_>>>()?;
                let acc_grad = lengths.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let acc_delta = lengths.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let opt = AdaDelta::from_parts(rho, epsilon, acc_grad, acc_delta)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                (Some(opt), epochs)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            epochs_completed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Training state to resume from; errors if the file holds no optimizer.
    pub fn into_state(self) -> Result<TrainState> {
        let optimizer = self
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let lengths: Vec<usize> = self.model.tensors().iter().map(|t| t.len()).collect();
        if optimizer.acc_grad().iter().map(Vec::len).ne(lengths.iter().copied()) {
            return Err(Error::Checkpoint("optimizer state does not cover the model".into()));
        }
        Ok(TrainState {
            model: self.model,
            optimizer,
            epochs_completed: self.epochs_completed,
        })
    }
}

impl From<TrainState> for Checkpoint {
    fn from(state: TrainState) -> Self {
        Checkpoint {
            model: state.model,
            optimizer: Some(state.optimizer),
            epochs_completed: state.epochs_completed,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length 4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length 8")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("length 8")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("length 8")))
            .collect())
    }
}
