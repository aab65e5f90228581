//! The trainable payload clients exchange with the server, and its wire
//! format.
//!
//! Wire layout (little-endian, 32-byte header):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "AFAP"
//!      4     2  format version (1)
//!      6     1  scalar width in bytes (4 or 8)
//!      7     1  kind: 0 adapter, 1 layer-freeze, 2 full
//!      8     4  adapter depth (0 unless kind = 0)
//!     12     4  adapter width
//!     16     4  meta-adapter step width (0 = monolithic)
//!     20     4  frozen layers (kind = 1)
//!     24     8  scalar count
//!     32     -  scalars in canonical parameter order
//! ```

use serde::{Deserialize, Serialize};

use crate::adapter::{insert_zeroed, AdapterConfig, Stacking};
use crate::error::{Error, Result};
use crate::model::{ModelState, TuningMode};

pub const PAYLOAD_MAGIC: &[u8; 4] = b"AFAP";
pub const PAYLOAD_VERSION: u16 = 1;
pub const PAYLOAD_HEADER_BYTES: usize = 32;

/// What the payload's values parameterize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadKind {
    Adapter {
        config: AdapterConfig,
        stacking: Stacking,
    },
    LayerFreeze {
        frozen: usize,
    },
    Full,
}

impl PayloadKind {
    pub fn of(model: &ModelState) -> Self {
        match model.mode() {
            TuningMode::Adapter => PayloadKind::Adapter {
                config: model.adapter_config(),
                stacking: model.stacking(),
            },
            TuningMode::LayerFreeze { frozen } => PayloadKind::LayerFreeze { frozen },
            TuningMode::Full => PayloadKind::Full,
        }
    }
}

/// Trainable values of one model plus what they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPayload {
    pub kind: PayloadKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F32,
    F64,
}

impl ScalarWidth {
    pub fn bytes(self) -> usize {
        match self {
            ScalarWidth::F32 => 4,
            ScalarWidth::F64 => 8,
        }
    }
}

impl AdapterPayload {
    pub fn from_model(model: &ModelState) -> Self {
        Self {
            kind: PayloadKind::of(model),
            values: model.trainable_values(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn wire_bytes(&self, width: ScalarWidth) -> usize {
        PAYLOAD_HEADER_BYTES + self.values.len() * width.bytes()
    }

    /// Install this payload onto a client's copy of the backbone.
    ///
    /// `backbone` may be a model without adapters or one already laid out for
    /// the same payload kind.
    pub fn materialize(&self, backbone: &ModelState) -> Result<ModelState> {
        let current = PayloadKind::of(backbone);
        let mut model = if current == self.kind {
            backbone.clone()
        } else if backbone.adapter_config().depth == 0 {
            match self.kind {
                PayloadKind::Adapter { config, stacking } => {
                    let mut m = backbone.clone();
                    m.set_tuning_mode(TuningMode::Adapter)?;
                    insert_zeroed(&m, config, stacking)?
                }
                PayloadKind::LayerFreeze { frozen } => {
                    let mut m = backbone.clone();
                    m.set_tuning_mode(TuningMode::LayerFreeze { frozen })?;
                    m
                }
                PayloadKind::Full => {
                    let mut m = backbone.clone();
                    m.set_tuning_mode(TuningMode::Full)?;
                    m
                }
            }
        } else {
            return Err(Error::Protocol(format!(
                "payload {:?} does not fit a model laid out as {:?}",
                self.kind, current
            )));
        };
        model.load_trainable_values(&self.values)?;
        Ok(model)
    }

    pub fn encode(&self, width: ScalarWidth) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_bytes(width));
        out.extend_from_slice(PAYLOAD_MAGIC);
        out.extend_from_slice(&PAYLOAD_VERSION.to_le_bytes());
        out.push(width.bytes() as u8);
        let (kind, depth, w, step, frozen) = match self.kind {
            PayloadKind::Adapter { config, stacking } => {
                let step = match stacking {
                    Stacking::Vertical { step } => step,
                    Stacking::Monolithic => 0,
                };
                (0u8, config.depth, config.width, step, 0)
            }
            PayloadKind::LayerFreeze { frozen } => (1, 0, 0, 0, frozen),
            PayloadKind::Full => (2, 0, 0, 0, 0),
        };
        out.push(kind);
        for v in [depth, w, step, frozen] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        debug_assert_eq!(out.len(), PAYLOAD_HEADER_BYTES);
        for &v in &self.values {
            match width {
                ScalarWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                ScalarWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Codec(format!("payload: {m}"));
        if bytes.len() < PAYLOAD_HEADER_BYTES {
            return Err(err("truncated header"));
        }
        if &bytes[0..4] != PAYLOAD_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PAYLOAD_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let width = match bytes[6] {
            4 => ScalarWidth::F32,
            8 => ScalarWidth::F64,
            w => return Err(err(&format!("unsupported scalar width {w}"))),
        };
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (depth, w, step, frozen) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let kind = match bytes[7] {
            0 => PayloadKind::Adapter {
                config: AdapterConfig::new(depth, w),
                stacking: if step == 0 {
                    Stacking::Monolithic
                } else {
                    Stacking::Vertical { step }
                },
            },
            1 => PayloadKind::LayerFreeze { frozen },
            2 => PayloadKind::Full,
            k => return Err(err(&format!("unknown kind {k}"))),
        };
        let count = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes")) as usize;
        let body = &bytes[PAYLOAD_HEADER_BYTES..];
        if body.len() != count * width.bytes() {
            return Err(err(&format!(
                "expected {count} scalars, found {} bytes",
                body.len()
            )));
        }
        let values = match width {
            ScalarWidth::F32 => body
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            ScalarWidth::F64 => body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok(Self { kind, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{insert_adapters, trainable_param_count};
    use crate::costmodel::payload_bytes;
    use crate::model::{build_model, ModelSpec};
    use crate::rng::SeededRng;

    fn adapted() -> ModelState {
        let spec = ModelSpec {
            num_layers: 3,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 10,
            seqlen: 4,
            num_labels: 3,
            ..ModelSpec::default()
        };
        let base = build_model(&spec, 1).unwrap();
        insert_adapters(
            &base,
            AdapterConfig::new(2, 16),
            Stacking::Vertical { step: 8 },
            &mut SeededRng::new(2),
        )
        .unwrap()
    }

    #[test]
    fn wire_size_matches_cost_model() {
        let m = adapted();
        let p = AdapterPayload::from_model(&m);
        assert_eq!(p.len(), trainable_param_count(&m));
        assert_eq!(p.encode(ScalarWidth::F32).len(), payload_bytes(&m));
    }

    #[test]
    fn f64_wire_is_exact() {
        let p = AdapterPayload::from_model(&adapted());
        let back = AdapterPayload::decode(&p.encode(ScalarWidth::F64)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn materialize_onto_bare_backbone() {
        let m = adapted();
        let p = AdapterPayload::from_model(&m);
        let spec = m.spec().clone();
        let bare = build_model(&spec, 1).unwrap();
        let restored = p.materialize(&bare).unwrap();
        assert_eq!(restored.trainable_values(), m.trainable_values());
        let toks = vec![vec![1, 2, 3, 4]];
        assert!(restored.forward(&toks).unwrap().bit_eq(&m.forward(&toks).unwrap()));
    }

    #[test]
    fn mismatched_payload_is_a_protocol_error() {
        let m = adapted();
        let mut p = AdapterPayload::from_model(&m);
        p.values.pop();
        assert!(matches!(p.materialize(&m), Err(Error::Protocol(_))));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let p = AdapterPayload::from_model(&adapted());
        let mut bytes = p.encode(ScalarWidth::F32);
        bytes.pop();
        assert!(AdapterPayload::decode(&bytes).is_err());
        bytes[0] = b'X';
        assert!(AdapterPayload::decode(&bytes).is_err());
    }
}
