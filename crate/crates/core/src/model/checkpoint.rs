//! Binary checkpoint format.
//!
//! ```text
//! FAIRNVT-CKPT v1\n
//! <name>\t<rank>\t<dim_0>\t…\t<dim_{rank-1}>\t<product(dims) little-endian f64>   (repeated)
//! <CRC-64/XZ of every preceding byte, little-endian u64>
//! ```
//!
//! Records appear in lexicographic name order. Model settings that are not
//! weights (noise, variant, encoder activation and seed) are stored as rank-0
//! records under `config.`.

use std::collections::BTreeMap;

use crc::{Crc, CRC_64_XZ};
use thiserror::Error;

use super::{
    Activation, Adapter, AdapterLayer, Architecture, ClassifierInput, EncoderConfig, FrozenEncoder, Head, Linear,
    Model, ModelParams, NoiseConfig,
};
use crate::autodiff::Tensor;

pub const CHECKPOINT_MAGIC: &str = "FAIRNVT-CKPT";
const VERSION: &str = "v1";
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad header line")]
    BadHeader,
    #[error("unsupported checkpoint version `{0}` (expected {VERSION})")]
    UnsupportedVersion(String),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed record at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("missing record `{0}`")]
    Missing(String),
    #[error("record `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid config record `{name}` = {value}")]
    Config { name: String, value: f64 },
}

/// Serialises a name → tensor map.
pub fn encode_records(records: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = format!("{CHECKPOINT_MAGIC} {VERSION}\n").into_bytes();
    for (name, t) in records {
        out.extend_from_slice(name.as_bytes());
        out.push(b'\t');
        out.extend_from_slice(t.rank().to_string().as_bytes());
        out.push(b'\t');
        for d in t.shape() {
            out.extend_from_slice(d.to_string().as_bytes());
            out.push(b'\t');
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn field(&mut self) -> Result<&str, CheckpointError> {
        let start = self.pos;
        let rel = self.bytes[start..]
            .iter()
            .position(|&b| b == b'\t')
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        self.pos = start + rel + 1;
        std::str::from_utf8(&self.bytes[start..start + rel]).map_err(|_| CheckpointError::Malformed {
            offset: start,
            reason: "field is not UTF-8".into(),
        })
    }

    fn number(&mut self) -> Result<usize, CheckpointError> {
        let offset = self.pos;
        let f = self.field()?;
        f.parse().map_err(|_| CheckpointError::Malformed {
            offset,
            reason: format!("expected an integer, found `{f}`"),
        })
    }
}

/// Parses a byte stream into a name → tensor map, verifying the checksum.
pub fn decode_records(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(CheckpointError::BadHeader)?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| CheckpointError::BadHeader)?;
    let version = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or(CheckpointError::BadHeader)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version.to_string()));
    }
    if bytes.len() < newline + 1 + 8 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = CRC64.checksum(&bytes[..body_end]);

    let mut reader = Reader {
        bytes: &bytes[..body_end],
        pos: newline + 1,
    };
    let mut records = BTreeMap::new();
    let mut last: Option<String> = None;
    while reader.pos < body_end {
        let offset = reader.pos;
        let name = reader.field()?.to_string();
        if last.as_ref().is_some_and(|prev| *prev >= name) {
            return Err(CheckpointError::Malformed {
                offset,
                reason: format!("record `{name}` out of order"),
            });
        }
        let rank = reader.number()?;
        let dims = (0..rank).map(|_| reader.number()).collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed {
                offset,
                reason: "shape overflows".into(),
            })?;
        let nbytes = count.checked_mul(8).ok_or(CheckpointError::Truncated(body_end))?;
        if reader.pos + nbytes > body_end {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let data = reader.bytes[reader.pos..reader.pos + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        reader.pos += nbytes;
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed {
            offset,
            reason: e.to_string(),
        })?;
        records.insert(name.clone(), t);
        last = Some(name);
    }
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(records)
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_parts(vec![], vec![v])
}

/// Serialises a model (weights plus settings) to the checkpoint format.
pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let mut records: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in model
        .params
        .named_frozen()
        .into_iter()
        .chain(model.params.named_trainable())
    {
        records.insert(name, t.clone());
    }
    let seed = model.arch.encoder.seed;
    let config = [
        ("config.activation", model.arch.encoder.activation.code()),
        ("config.encoder_seed_hi", (seed >> 32) as f64),
        ("config.encoder_seed_lo", (seed & 0xFFFF_FFFF) as f64),
        ("config.noise.clip", model.noise.clip),
        ("config.noise.enabled", if model.noise.enabled { 1.0 } else { 0.0 }),
        ("config.noise.sigma", model.noise.sigma),
        ("config.variant", model.arch.variant.code()),
    ];
    for (name, v) in config {
        records.insert(name.to_string(), scalar(v));
    }
    encode_records(&records)
}

struct Records(BTreeMap<String, Tensor>);

impl Records {
    fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        self.0
            .remove(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    fn take_shaped(&mut self, name: &str, expected: &[usize]) -> Result<Tensor, CheckpointError> {
        let t = self.take(name)?;
        if t.shape() != expected {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    fn config(&mut self, name: &str) -> Result<f64, CheckpointError> {
        let full = format!("config.{name}");
        self.take_shaped(&full, &[]).map(|t| t.data()[0])
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Linear, CheckpointError> {
        Ok(Linear {
            weight: self.take_shaped(&format!("{prefix}.weight"), &[fan_in, fan_out])?,
            bias: self.take_shaped(&format!("{prefix}.bias"), &[fan_out])?,
        })
    }

    fn count(&self, prefix: &str) -> usize {
        (0..)
            .take_while(|i| self.0.contains_key(&format!("{prefix}{i}.weight")))
            .count()
    }

    fn adapter(&mut self, prefix: &str, d: usize, layers: usize) -> Result<Adapter, CheckpointError> {
        let probe = format!("{prefix}.layer0.down.weight");
        let bottleneck = self
            .0
            .get(&probe)
            .ok_or_else(|| CheckpointError::Missing(probe.clone()))?
            .shape()
            .get(1)
            .copied()
            .unwrap_or(0);
        if bottleneck == 0 || !d.is_multiple_of(bottleneck) {
            return Err(CheckpointError::Shape {
                name: probe,
                expected: vec![d, d / 2],
                got: vec![d, bottleneck],
            });
        }
        let layers = (0..layers)
            .map(|i| {
                Ok(AdapterLayer {
                    down: self.linear(&format!("{prefix}.layer{i}.down"), d, bottleneck)?,
                    up: self.linear(&format!("{prefix}.layer{i}.up"), bottleneck, d)?,
                })
            })
            .collect::<Result<_, CheckpointError>>()?;
        Ok(Adapter {
            reduction: d / bottleneck,
            layers,
        })
    }

    fn head(&mut self, prefix: &str, in_dim: usize) -> Result<Head, CheckpointError> {
        let hidden_layers = self.count(&format!("{prefix}.hidden"));
        let hidden = (0..hidden_layers)
            .map(|i| self.linear(&format!("{prefix}.hidden{i}"), in_dim, in_dim))
            .collect::<Result<_, _>>()?;
        let out_name = format!("{prefix}.output.weight");
        let classes = self
            .0
            .get(&out_name)
            .ok_or_else(|| CheckpointError::Missing(out_name.clone()))?
            .shape()
            .get(1)
            .copied()
            .unwrap_or(0);
        Ok(Head {
            hidden,
            output: self.linear(&format!("{prefix}.output"), in_dim, classes)?,
        })
    }
}

/// Parses a checkpoint produced by [`save_checkpoint`]. Nothing is returned
/// unless every record is present, well-shaped and the checksum matches.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Records(decode_records(bytes)?);
    let bad = |name: &str, value: f64| CheckpointError::Config {
        name: name.to_string(),
        value,
    };

    let act_code = r.config("activation")?;
    let activation = Activation::from_code(act_code).ok_or_else(|| bad("activation", act_code))?;
    let variant_code = r.config("variant")?;
    let variant = ClassifierInput::from_code(variant_code).ok_or_else(|| bad("variant", variant_code))?;
    let hi = r.config("encoder_seed_hi")?;
    let lo = r.config("encoder_seed_lo")?;
    let noise = NoiseConfig {
        sigma: r.config("noise.sigma")?,
        clip: r.config("noise.clip")?,
        enabled: r.config("noise.enabled")? != 0.0,
    };
    noise.validate().map_err(|_| bad("noise.clip", noise.clip))?;

    let num_layers = r.count("encoder.layer");
    let first =
        r.0.get("encoder.layer0.weight")
            .ok_or_else(|| CheckpointError::Missing("encoder.layer0.weight".into()))?;
    let (input_dim, hidden_dim) = match first.shape() {
        [i, h] => (*i, *h),
        other => {
            return Err(CheckpointError::Shape {
                name: "encoder.layer0.weight".into(),
                expected: vec![0, 0],
                got: other.to_vec(),
            })
        }
    };
    let layers = (0..num_layers)
        .map(|i| {
            let fan_in = if i == 0 { input_dim } else { hidden_dim };
            r.linear(&format!("encoder.layer{i}"), fan_in, hidden_dim)
        })
        .collect::<Result<_, _>>()?;
    let encoder = FrozenEncoder { activation, layers };
    let task_adapter = r.adapter("task_adapter", hidden_dim, num_layers)?;
    let sens_adapter = r.adapter("sens_adapter", hidden_dim, num_layers)?;
    let task_head = r.head("task_head", variant.fused_width(hidden_dim))?;
    let sens_head = r.head("sens_head", hidden_dim)?;
    if task_head.hidden.len() != sens_head.hidden.len() {
        return Err(CheckpointError::Malformed {
            offset: 0,
            reason: "task and sensitive heads differ in depth".into(),
        });
    }
    if let Some(extra) = r.0.keys().next() {
        return Err(CheckpointError::Malformed {
            offset: 0,
            reason: format!("unexpected record `{extra}`"),
        });
    }

    let arch = Architecture {
        encoder: EncoderConfig {
            input_dim,
            hidden_dim,
            num_layers,
            activation,
            seed: ((hi as u64) << 32) | lo as u64,
        },
        task_reduction: task_adapter.reduction,
        sens_reduction: sens_adapter.reduction,
        head_hidden_layers: task_head.hidden.len(),
        task_classes: task_head.classes(),
        sens_classes: sens_head.classes(),
        variant,
    };
    arch.validate().map_err(|e| CheckpointError::Malformed {
        offset: 0,
        reason: e.to_string(),
    })?;
    Ok(Model {
        arch,
        noise,
        params: ModelParams {
            encoder,
            task_adapter,
            sens_adapter,
            task_head,
            sens_head,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_arch;
    use crate::model::NoiseConfig;

    fn model() -> Model {
        let mut arch = small_arch(ClassifierInput::FairNvt);
        arch.encoder.seed = u64::MAX - 12345;
        Model::init(arch, NoiseConfig::default(), 9).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let m = model();
        let bytes = save_checkpoint(&m);
        assert!(bytes.starts_with(b"FAIRNVT-CKPT v1\n"));
        assert_eq!(load_checkpoint(&bytes).unwrap(), m);
        for variant in ClassifierInput::ALL {
            let m = Model::init(small_arch(variant), NoiseConfig::default(), 1).unwrap();
            assert_eq!(load_checkpoint(&save_checkpoint(&m)).unwrap(), m);
        }
    }

    #[test]
    fn records_are_sorted_by_name() {
        let bytes = save_checkpoint(&model());
        let names: Vec<String> = decode_records(&bytes).unwrap().into_keys().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        // first record immediately follows the header
        let first = &bytes[16..16 + names[0].len()];
        assert_eq!(first, names[0].as_bytes());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = save_checkpoint(&model());
        for cut in [0, 10, 17, bytes.len() / 2, bytes.len() - 1] {
            assert!(load_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = save_checkpoint(&model());
        bytes[14] = b'2';
        assert_eq!(
            load_checkpoint(&bytes),
            Err(CheckpointError::UnsupportedVersion("v2".into()))
        );
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = save_checkpoint(&model());
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(
            load_checkpoint(&bytes),
            Err(CheckpointError::Checksum { .. } | CheckpointError::Malformed { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = model();
        let mut records = BTreeMap::new();
        for (name, t) in m.params.named_frozen().into_iter().chain(m.params.named_trainable()) {
            records.insert(name, t.clone());
        }
        let bytes = save_checkpoint(&m);
        for (k, v) in decode_records(&bytes).unwrap() {
            records.entry(k).or_insert(v);
        }
        records.insert("sens_head.output.bias".into(), Tensor::zeros(&[3]));
        assert!(matches!(
            load_checkpoint(&encode_records(&records)),
            Err(CheckpointError::Shape { .. })
        ));
    }
}
