//! Versioned binary checkpoint format.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic        4 bytes  "MDNC"
//! version      u32      FORMAT_VERSION
//! config_len   u32      followed by config_len bytes of UTF-8 `key=value` lines
//! seed         u64
//! epochs       u32
//! final_loss   f64
//! n_tensors    u32
//! n_tensors ×  { name_len u32, name bytes, ndim u32, ndim × u32 dims }
//! data         f32 values of every tensor, in table order
//! ```
//!
//! Nothing may follow the last tensor.

use std::path::Path;

use super::{AdamConfig, ConvBlock, Network, NetworkConfig, TensorShape};
use crate::error::{Error, Result};
use crate::mixture::RawHeadOutput;

pub const MAGIC: &[u8; 4] = b"MDNC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    /// Mean patch loss of the last epoch (NaN when untrained).
    pub final_loss: f64,
    pub epochs: u32,
    pub seed: u64,
}

/// Trained weights plus the configuration needed to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    network: Network<f32>,
    meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, meta: TrainingMeta) -> Self {
        Self { network, meta }
    }

    /// Wraps an untrained network.
    pub fn untrained(network: Network<f32>) -> Self {
        let seed = network.config().seed;
        Self::new(
            network,
            TrainingMeta {
                final_loss: f64::NAN,
                epochs: 0,
                seed,
            },
        )
    }

    pub fn config(&self) -> &NetworkConfig {
        self.network.config()
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn forward(&self, patch: &[f32]) -> Result<RawHeadOutput> {
        self.network.forward(patch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = encode_config(self.config());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.epochs.to_le_bytes());
        out.extend_from_slice(&self.meta.final_loss.to_le_bytes());
        let shapes = self.network.shapes();
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for s in shapes {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        for p in self.network.params() {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})"),
            ));
        }
        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::format(path, "config block is not UTF-8"))?;
        let config = decode_config(config_text).map_err(|msg| Error::format(path, msg))?;
        let seed = r.u64()?;
        let epochs = r.u32()?;
        let final_loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));

        let n = r.u32()? as usize;
        if n > 4096 {
            return Err(Error::format(path, format!("implausible tensor count {n}")));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has {ndim} dimensions"),
                ));
            }
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            shapes.push(TensorShape { name, dims });
        }
        let mut params = Vec::with_capacity(n);
        for s in &shapes {
            let raw = r.take(
                s.len()
                    .checked_mul(4)
                    .ok_or_else(|| Error::format(path, "tensor too large"))?,
            )?;
            params.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                format!(
                    "{} trailing bytes after the last tensor",
                    bytes.len() - r.pos
                ),
            ));
        }
        let network = Network::from_parts(config, shapes, params)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self::new(
            network,
            TrainingMeta {
                final_loss,
                epochs,
                seed,
            },
        ))
    }
}

pub fn save(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                format!(
                    "truncated checkpoint: needed {n} bytes at offset {}",
                    self.pos
                ),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn encode_config(c: &NetworkConfig) -> String {
    let blocks: Vec<String> = c
        .conv_blocks
        .iter()
        .map(|b| format!("{}x{}s{}", b.channels, b.kernel, b.stride))
        .collect();
    let clip = c.grad_clip.map_or("none".to_string(), |v| v.to_string());
    format!(
        "k={}\npatch_size={}\nin_channels={}\nconv_blocks={}\nfc_hidden={}\nseed={}\n\
         learning_rate={}\nbeta1={}\nbeta2={}\nepsilon={}\nbatch_size={}\nepochs={}\ngrad_clip={}\naugment={}\ncosine_decay={}\n",
        c.k,
        c.patch_size,
        c.in_channels,
        blocks.join(","),
        c.fc_hidden,
        c.seed,
        c.adam.learning_rate,
        c.adam.beta1,
        c.adam.beta2,
        c.adam.epsilon,
        c.batch_size,
        c.epochs,
        clip,
        c.augment,
        c.cosine_decay
    )
}

fn decode_config(text: &str) -> std::result::Result<NetworkConfig, String> {
    let mut config = NetworkConfig {
        conv_blocks: Vec::new(),
        adam: AdamConfig::default(),
        ..NetworkConfig::default()
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
        v.parse()
            .map_err(|_| format!("bad value {v:?} for config key {key}"))
    }
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed config line {line:?}"))?;
        match key {
            "k" => config.k = num(key, value)?,
            "patch_size" => config.patch_size = num(key, value)?,
            "in_channels" => config.in_channels = num(key, value)?,
            "conv_blocks" => {
                config.conv_blocks = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(parse_block)
                    .collect::<std::result::Result<_, _>>()?
            }
            "fc_hidden" => config.fc_hidden = num(key, value)?,
            "seed" => config.seed = num(key, value)?,
            "learning_rate" => config.adam.learning_rate = num(key, value)?,
            "beta1" => config.adam.beta1 = num(key, value)?,
            "beta2" => config.adam.beta2 = num(key, value)?,
            "epsilon" => config.adam.epsilon = num(key, value)?,
            "batch_size" => config.batch_size = num(key, value)?,
            "epochs" => config.epochs = num(key, value)?,
            "grad_clip" => {
                config.grad_clip = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "augment" => config.augment = num(key, value)?,
            "cosine_decay" => config.cosine_decay = num(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
    }
    Ok(config)
}

fn parse_block(s: &str) -> std::result::Result<ConvBlock, String> {
    let bad = || format!("bad conv block {s:?}");
    let (channels, rest) = s.split_once('x').ok_or_else(bad)?;
    let (kernel, stride) = rest.split_once('s').ok_or_else(bad)?;
    Ok(ConvBlock::new(
        channels.parse().map_err(|_| bad())?,
        kernel.parse().map_err(|_| bad())?,
        stride.parse().map_err(|_| bad())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let config = NetworkConfig {
            k: 2,
            patch_size: 8,
            conv_blocks: vec![ConvBlock::new(2, 3, 2)],
            fc_hidden: 4,
            seed: 3,
            grad_clip: None,
            ..NetworkConfig::default()
        };
        Checkpoint::untrained(Network::new(config).unwrap())
    }

    #[test]
    fn bytes_round_trip() {
        let ck = tiny();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.network(), ck.network());
        assert_eq!(back.meta().seed, 3);
        assert!(back.meta().final_loss.is_nan());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = tiny().to_bytes();
        for cut in [0, 3, 4, 7, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("cut.mdnc")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = tiny().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("weird.bin")).unwrap_err();
        assert!(err.to_string().contains("weird.bin") && err.to_string().contains("magic"));

        let mut bytes = tiny().to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes, Path::new("v9.bin")).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = tiny().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = NetworkConfig::default();
        c.adam.learning_rate = 3.3e-4;
        c.grad_clip = Some(12.5);
        assert_eq!(decode_config(&encode_config(&c)).unwrap(), c);
        c.grad_clip = None;
        assert_eq!(decode_config(&encode_config(&c)).unwrap(), c);
    }
}
