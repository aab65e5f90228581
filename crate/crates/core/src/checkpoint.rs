//! Full-model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "AFCK" | version u16 (1)
//! spec:  num_layers, hidden, heads, ffn_dim, vocab, seqlen, num_labels (u32 each)
//!        activation u8 (0 relu, 1 tanh) | layer_norm_eps f64
//! mode:  kind u8 (0 adapter, 1 layer-freeze, 2 full) | frozen u32
//! adapters: depth u32 | width u32 | step u32 (0 = monolithic)
//! count u32, then per parameter in canonical order:
//!        name_len u16 | name utf-8 | trainable u8 | ndim u8 | dims u32* | values f64*
//! ```
//!
//! Values are stored at full 64-bit width, so a round trip is bit-exact.

use std::io::{Read, Write};

use crate::adapter::{insert_zeroed, AdapterConfig, Stacking};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelSpec, ModelState, TuningMode};
use crate::nn::Activation;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &ModelState) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        spec.num_layers,
        spec.hidden,
        spec.heads,
        spec.ffn_dim,
        spec.vocab,
        spec.seqlen,
        spec.num_labels,
    ] {
        put_u32(&mut out, v);
    }
    out.push(match spec.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    out.extend_from_slice(&spec.layer_norm_eps.to_le_bytes());
    let (kind, frozen) = match model.mode() {
        TuningMode::Adapter => (0u8, 0),
        TuningMode::LayerFreeze { frozen } => (1, frozen),
        TuningMode::Full => (2, 0),
    };
    out.push(kind);
    put_u32(&mut out, frozen);
    let cfg = model.adapter_config();
    put_u32(&mut out, cfg.depth);
    put_u32(&mut out, cfg.width);
    put_u32(
        &mut out,
        match model.stacking() {
            Stacking::Vertical { step } => step,
            Stacking::Monolithic => 0,
        },
    );
    let params: Vec<_> = model.parameters().collect();
    put_u32(&mut out, params.len());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Codec(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Codec("checkpoint: bad magic".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Codec(format!("checkpoint: unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = c.u32()?;
    }
    let activation = match c.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        a => return Err(Error::Codec(format!("checkpoint: unknown activation {a}"))),
    };
    let spec = ModelSpec {
        num_layers: dims[0],
        hidden: dims[1],
        heads: dims[2],
        ffn_dim: dims[3],
        vocab: dims[4],
        seqlen: dims[5],
        num_labels: dims[6],
        activation,
        layer_norm_eps: c.f64()?,
    };
    let mode = match (c.u8()?, c.u32()?) {
        (0, _) => TuningMode::Adapter,
        (1, frozen) => TuningMode::LayerFreeze { frozen },
        (2, _) => TuningMode::Full,
        (k, _) => return Err(Error::Codec(format!("checkpoint: unknown mode {k}"))),
    };
    let config = AdapterConfig::new(c.u32()?, c.u32()?);
    let stacking = match c.u32()? {
        0 => Stacking::Monolithic,
        step => Stacking::Vertical { step },
    };
    let mut model = build_model(&spec, 0)?;
    model.set_tuning_mode(mode)?;
    if config.depth > 0 || stacking != model.stacking() {
        model = insert_zeroed(&model, config, stacking)?;
    }
    let count = c.u32()?;
    let expected = model.parameters().count();
    if count != expected {
        return Err(Error::Codec(format!(
            "checkpoint lists {count} parameters, layout has {expected}"
        )));
    }
    for p in model.parameters_mut() {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Codec(e.to_string()))?;
        if name != p.name {
            return Err(Error::Codec(format!(
                "checkpoint parameter `{name}` where `{}` was expected",
                p.name
            )));
        }
        let trainable = c.u8()? != 0;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()?);
        }
        if shape != p.value.shape() {
            return Err(Error::Codec(format!(
                "checkpoint parameter `{name}` has shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        for v in p.value.data_mut() {
            *v = c.f64()?;
        }
        if trainable != p.trainable {
            return Err(Error::Codec(format!(
                "checkpoint parameter `{name}` trainable flag disagrees with its mode"
            )));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Codec("checkpoint has trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<W: Write>(model: &ModelState, mut out: W) -> Result<()> {
    out.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<ModelState> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
