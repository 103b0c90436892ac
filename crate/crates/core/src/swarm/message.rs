use crate::params::ParameterSet;

use super::{Result, SwarmError};

pub const MAGIC: [u8; 4] = *b"SWRM";
pub const WIRE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// One center's contribution to a round: the global-part parameters and its
/// training-set size.
///
/// Wire format: `magic[4] | version u32 | center_id u32 | round u32 |
/// n_k u64` (little-endian, 24 bytes) followed by the parameter blob.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub center_id: u32,
    pub round: u32,
    pub n_k: u64,
    pub params: ParameterSet,
}

impl RoundMessage {
    pub fn encode(&self) -> Vec<u8> {
        let body = self.params.to_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.center_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.n_k.to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decodes and checks the blob against the schema every center shares.
    pub fn decode(bytes: &[u8], schema: &ParameterSet) -> Result<Self> {
        let bad = |m: String| SwarmError::Message(m);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != WIRE_VERSION {
            return Err(bad(format!("wire version {version} != {WIRE_VERSION}")));
        }
        let params = ParameterSet::from_bytes(&bytes[HEADER_LEN..]).map_err(|e| bad(e.to_string()))?;
        if !params.same_schema(schema) {
            return Err(bad("parameter schema differs from the shared schema".into()));
        }
        if bytes.len() != HEADER_LEN + schema.to_bytes().len() {
            return Err(bad("byte length does not match the shared schema".into()));
        }
        Ok(Self {
            center_id: u32_at(8),
            round: u32_at(12),
            n_k: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("seg.a", Tensor::from_vec(vec![v, 2.0 * v])).unwrap();
        p
    }

    #[test]
    fn round_trip_and_header_layout() {
        let m = RoundMessage {
            center_id: 3,
            round: 7,
            n_k: 12,
            params: set(1.5),
        };
        let bytes = m.encode();
        assert_eq!(&bytes[..4], b"SWRM");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 12);
        assert_eq!(RoundMessage::decode(&bytes, &set(0.0)).unwrap(), m);
    }

    #[test]
    fn rejects_foreign_schema_and_truncation() {
        let bytes = RoundMessage {
            center_id: 0,
            round: 0,
            n_k: 1,
            params: set(1.0),
        }
        .encode();
        let mut other = ParameterSet::new();
        other.insert("seg.b", Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        assert!(RoundMessage::decode(&bytes, &other).is_err());
        assert!(RoundMessage::decode(&bytes[..bytes.len() - 8], &set(0.0)).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RoundMessage::decode(&bad, &set(0.0)).is_err());
    }
}
