//! Binary model checkpoints.
//!
//! ```text
//! "ECKL"  u32 LE version (1)
//! repeated until EOF:
//!   u16 LE name length, UTF-8 name, u8 rank, rank × u64 LE dims, f64 LE payload
//! ```
//!
//! Besides the parameters (`encoder.{i}.weight`, `encoder.{i}.bias`,
//! `classifier.weight`, `classifier.bias`) a checkpoint stores two scalars,
//! `classifier.temperature` and `classifier.normalize` (0 or 1), so the
//! architecture can be rebuilt from the file alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ecacl_core::model::{ClassifierSpec, EncoderSpec, Linear, Model};
use ecacl_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ECKL";
pub const VERSION: u32 = 1;

const TEMPERATURE: &str = "classifier.temperature";
const NORMALIZE: &str = "classifier.normalize";

fn push_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    for (name, _, t) in model.parameters() {
        push_array(&mut out, &name, t.shape(), t.data());
    }
    let spec = model.classifier_spec();
    push_array(&mut out, TEMPERATURE, &[], &[spec.temperature]);
    push_array(&mut out, NORMALIZE, &[], &[if spec.normalize { 1.0 } else { 0.0 }]);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, what: &str) -> Result<&'a [u8]> {
        let available = (self.bytes.len() - self.at) as u64;
        if n > available {
            return Err(Error::Length {
                what: what.into(),
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.at..self.at + n as usize];
        self.at += n as usize;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

/// Every named array of a checkpoint, checked for framing but not for meaning.
pub fn decode_arrays(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("not a checkpoint: magic {magic:02x?}")));
    }
    let version = LittleEndian::read_u32(r.take(4, "version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut arrays = BTreeMap::new();
    while !r.done() {
        let len = LittleEndian::read_u16(r.take(2, "name length")?);
        let name = std::str::from_utf8(r.take(u64::from(len), "name")?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_owned();
        let rank = r.take(1, "rank")?[0];
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(LittleEndian::read_u64(r.take(8, "dimension")?));
        }
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Length {
                what: format!("payload of `{name}`"),
                needed: u64::MAX,
                available: (bytes.len() - r.at) as u64,
            })?;
        let payload = r.take(count, &format!("payload of `{name}`"))?;
        let mut data = vec![0.0; payload.len() / 8];
        LittleEndian::read_f64_into(payload, &mut data);
        let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
        let tensor = if shape.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("array `{name}`: {e}")))?
        };
        if arrays.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate array `{name}`")));
        }
    }
    Ok(arrays)
}

/// Rebuilds a model from checkpoint bytes. Nothing is returned unless the
/// whole file parses and every shape agrees.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut arrays = decode_arrays(bytes)?;
    let mut take = |name: &str| {
        arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
    };
    let temperature = take(TEMPERATURE)?.item()?;
    let normalize = take(NORMALIZE)?.item()? != 0.0;
    let mut encoder = Vec::new();
    while let Ok(weight) = take(&format!("encoder.{}.weight", encoder.len())) {
        let bias = take(&format!("encoder.{}.bias", encoder.len()))?;
        encoder.push(Linear { weight, bias: Some(bias) });
    }
    let weight = take("classifier.weight")?;
    let bias = if normalize { None } else { Some(take("classifier.bias")?) };
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format(format!("unexpected array `{extra}`")));
    }
    if encoder.is_empty() || weight.rank() != 2 || encoder.iter().any(|l| l.weight.rank() != 2) {
        return Err(Error::Format("malformed layer shapes".into()));
    }
    let dims: Vec<usize> = encoder.iter().map(|l| l.weight.cols()).collect();
    let encoder_spec = EncoderSpec {
        input_dim: encoder[0].weight.rows(),
        hidden_dims: dims[..dims.len() - 1].to_vec(),
        embed_dim: dims[dims.len() - 1],
    };
    let classifier_spec = ClassifierSpec {
        embed_dim: weight.rows(),
        num_classes: weight.cols(),
        normalize,
        temperature,
    };
    Model::from_layers(encoder_spec, classifier_spec, encoder, Linear { weight, bias })
        .map_err(|e| Error::Format(format!("inconsistent checkpoint: {e}")))
}

/// Writes through a temporary sibling and renames, so a failed save never
/// leaves a truncated checkpoint behind.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecacl_core::seed::rng_for;

    fn model(normalize: bool) -> Model {
        let enc = EncoderSpec {
            input_dim: 6,
            hidden_dims: vec![5, 4],
            embed_dim: 3,
        };
        let cls = ClassifierSpec {
            embed_dim: 3,
            num_classes: 4,
            normalize,
            temperature: 0.05,
        };
        Model::new(enc, cls, &mut rng_for([1, 2, 3, 4])).unwrap()
    }

    #[test]
    fn round_trip_restores_the_model() {
        for normalize in [true, false] {
            let m = model(normalize);
            let back = decode(&encode(&m)).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode(&back), encode(&m));
        }
    }

    #[test]
    fn header_is_checked() {
        let mut bytes = encode(&model(true));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = encode(&model(true));
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn corrupted_length_fails_without_a_model() {
        let good = encode(&model(true));
        // first array: name length at 8..10, name, rank, then the first dimension
        let name_len = u16::from_le_bytes([good[8], good[9]]) as usize;
        let dim_at = 10 + name_len + 1;
        let mut bad = good.clone();
        bad[dim_at..dim_at + 8].copy_from_slice(&1_000_000u64.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Length { .. })));
        let mut bad = good.clone();
        bad[8..10].copy_from_slice(&u16::MAX.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Length { .. })));
        let mut bad = good.clone();
        bad[dim_at..dim_at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Length { .. })));
        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Length { .. })));
    }

    #[test]
    fn missing_meta_is_a_format_error() {
        let m = model(true);
        let mut bytes = MAGIC.to_vec();
        bytes.extend(VERSION.to_le_bytes());
        for (name, _, t) in m.parameters() {
            push_array(&mut bytes, &name, t.shape(), t.data());
        }
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("temperature")));
    }
}
