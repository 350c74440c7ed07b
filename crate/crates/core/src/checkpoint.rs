//! Versioned checkpoint: a text header carrying the network configuration
//! and array table, followed by the arrays as raw little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::ndtensor::Tensor;
use crate::net::{NetConfig, NetParams, Network};

pub const CHECKPOINT_TAG: &str = "fghash-checkpoint v1";
const RAW_A: &str = "loss.raw_a";
const RAW_B: &str = "loss.raw_b";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub weights: LossWeights,
    /// Completed training epochs.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays: Vec<(&str, &Tensor)> = self
            .network
            .params
            .entries()
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let (ra, rb) = (
            Tensor::scalar(self.weights.raw_a),
            Tensor::scalar(self.weights.raw_b),
        );
        arrays.push((RAW_A, &ra));
        arrays.push((RAW_B, &rb));

        let mut head = format!("{CHECKPOINT_TAG}\nepoch={}\n", self.epoch);
        head.push_str(&self.network.config.to_text());
        head.push_str(&format!("arrays={}\n", arrays.len()));
        for (name, t) in &arrays {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("array {name} {}\n", dims.join("x")));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for (_, t) in &arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let err = |field: &str, msg: String| Error::format(source, field, msg);
        let marker = b"\ndata\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| err("data", "missing `data` line".into()))?;
        let head = std::str::from_utf8(&bytes[..split])
            .map_err(|_| err("header", "header is not UTF-8".into()))?;
        let mut body = &bytes[split + marker.len()..];

        let mut lines = head.lines();
        if lines.next() != Some(CHECKPOINT_TAG) {
            return Err(err(
                "schema",
                format!("first line must be `{CHECKPOINT_TAG}`"),
            ));
        }
        let mut fields = BTreeMap::new();
        let mut table = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("array ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| err("array", format!("bad array line `{line}`")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err("array", format!("bad shape in `{line}`")))?;
                table.push((name.to_string(), shape));
            } else if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            } else {
                return Err(err("header", format!("unrecognised line `{line}`")));
            }
        }
        let count: usize = fields
            .get("arrays")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("arrays", "missing or bad array count".into()))?;
        if count != table.len() {
            return Err(err(
                "arrays",
                format!("header says {count}, table has {}", table.len()),
            ));
        }
        let epoch: usize = fields
            .get("epoch")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("epoch", "missing or bad epoch".into()))?;
        let config = NetConfig::from_fields(&fields).map_err(|e| err("config", e.to_string()))?;

        let mut arrays = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            if body.len() < 8 * n {
                return Err(err("data", format!("array `{name}` truncated")));
            }
            let data = body[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            body = &body[8 * n..];
            let t = Tensor::new(shape, data).map_err(|e| err("array", format!("`{name}`: {e}")))?;
            arrays.push((name, t));
        }
        if !body.is_empty() {
            return Err(err("data", format!("{} trailing bytes", body.len())));
        }
        let raw = |name: &str, arrays: &mut Vec<(String, Tensor)>| -> Result<f64> {
            let i = arrays
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| err(name, "missing".into()))?;
            Ok(arrays.remove(i).1.data()[0])
        };
        let weights = LossWeights {
            raw_a: raw(RAW_A, &mut arrays)?,
            raw_b: raw(RAW_B, &mut arrays)?,
        };
        let params =
            NetParams::from_entries(&config, arrays).map_err(|e| err("array", e.to_string()))?;
        Ok(Checkpoint {
            network: Network { config, params },
            weights,
            epoch,
        })
    }

    /// Writes through a temporary file so an interrupted save leaves the old file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}
