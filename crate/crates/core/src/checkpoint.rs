//! Model checkpoint file.
//!
//! Layout: the 6 magic bytes `IDCAP1`, a little-endian `u32` header length,
//! a UTF-8 `key=value` header, then every parameter tensor as little-endian
//! `f64` in layer order (trunk, then heads). When the header carries an
//! `adam=` line, the first-moment and second-moment blocks follow in the
//! same order.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adam::AdamState;
use crate::nn::{Layer, LayerSpec, Network, NnError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"IDCAP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint payload")]
    Trailing(usize),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Network(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub role: String,
    pub seed: u64,
    pub step: u64,
    pub network: Network,
    pub adam: Option<AdamState>,
}

fn encode_layers(layers: &[Layer]) -> String {
    layers.iter().map(|l| l.spec.encode()).collect::<Vec<_>>().join(";")
}

fn decode_layers(s: &str) -> Result<Vec<LayerSpec>, CheckpointError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|t| LayerSpec::decode(t).ok_or_else(|| CheckpointError::Header(format!("layer `{t}`"))))
        .collect()
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl ModelCheckpoint {
    pub fn new(role: &str, seed: u64, network: Network) -> Self {
        Self { role: role.to_string(), seed, step: 0, network, adam: None }
    }

    fn header(&self) -> String {
        let mut h = String::new();
        let _ = writeln!(h, "role={}", self.role);
        let _ = writeln!(h, "seed={}", self.seed);
        let _ = writeln!(h, "step={}", self.step);
        let _ = writeln!(h, "trunk={}", encode_layers(&self.network.trunk));
        for head in &self.network.heads {
            let _ = writeln!(h, "head={}", encode_layers(head));
        }
        let shapes: Vec<String> = self.network.params().iter().map(|p| shape_str(p.shape())).collect();
        let _ = writeln!(h, "params={}", shapes.join(" "));
        if let Some(a) = &self.adam {
            let _ = writeln!(h, "adam={} {} {} {} {}", a.lr, a.beta1, a.beta2, a.eps, a.step);
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(10 + header.len() + 8 * self.network.num_params() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let mut blocks: Vec<&Tensor> = self.network.params();
        if let Some(a) = &self.adam {
            blocks.extend(a.m.iter());
            blocks.extend(a.v.iter());
        }
        for t in blocks {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 4] = bytes.get(6..10).ok_or(CheckpointError::Truncated)?.try_into().unwrap();
        let hlen = u32::from_le_bytes(len_bytes) as usize;
        let header = bytes.get(10..10 + hlen).ok_or(CheckpointError::Truncated)?;
        let header =
            std::str::from_utf8(header).map_err(|_| CheckpointError::Header("not utf-8".into()))?;

        let mut role = None;
        let mut seed = None;
        let mut step = None;
        let mut trunk = None;
        let mut heads = Vec::new();
        let mut shapes = None;
        let mut adam_line = None;
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(format!("line `{line}`")))?;
            let bad = |what: &str| CheckpointError::Header(format!("{what} `{v}`"));
            match k {
                "role" => role = Some(v.to_string()),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
                "step" => step = Some(v.parse::<u64>().map_err(|_| bad("step"))?),
                "trunk" => trunk = Some(decode_layers(v)?),
                "head" => heads.push(decode_layers(v)?),
                "params" => shapes = Some(v.to_string()),
                "adam" => adam_line = Some(v.to_string()),
                _ => return Err(CheckpointError::Header(format!("unknown key `{k}`"))),
            }
        }
        let missing = |k: &str| CheckpointError::Header(format!("missing `{k}`"));
        let trunk = trunk.ok_or_else(|| missing("trunk"))?;
        let shapes = shapes.ok_or_else(|| missing("params"))?;

        let mut reader = F64Reader { bytes, pos: 10 + hlen };
        let mk = |specs: &[LayerSpec], reader: &mut F64Reader| -> Result<Vec<Layer>, CheckpointError> {
            specs
                .iter()
                .map(|s| {
                    let params = s
                        .param_shapes()
                        .iter()
                        .map(|sh| reader.tensor(sh))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(Layer { spec: *s, params })
                })
                .collect()
        };
        let trunk_layers = mk(&trunk, &mut reader)?;
        let head_layers = heads.iter().map(|h| mk(h, &mut reader)).collect::<Result<Vec<_>, _>>()?;
        let network = Network { trunk: trunk_layers, heads: head_layers };
        network.validate()?;
        let declared: Vec<String> = network.params().iter().map(|p| shape_str(p.shape())).collect();
        if declared.join(" ") != shapes {
            return Err(CheckpointError::Header("parameter shapes disagree with layers".into()));
        }

        let adam = match adam_line {
            None => None,
            Some(line) => {
                let f: Vec<&str> = line.split(' ').collect();
                if f.len() != 5 {
                    return Err(CheckpointError::Header(format!("adam `{line}`")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| CheckpointError::Header(format!("adam `{line}`")));
                let param_shapes: Vec<Vec<usize>> =
                    network.params().iter().map(|p| p.shape().to_vec()).collect();
                let m = param_shapes.iter().map(|s| reader.tensor(s)).collect::<Result<Vec<_>, _>>()?;
                let v = param_shapes.iter().map(|s| reader.tensor(s)).collect::<Result<Vec<_>, _>>()?;
                Some(AdamState {
                    lr: num(f[0])?,
                    beta1: num(f[1])?,
                    beta2: num(f[2])?,
                    eps: num(f[3])?,
                    step: f[4].parse().map_err(|_| CheckpointError::Header(format!("adam `{line}`")))?,
                    m,
                    v,
                })
            }
        };
        if reader.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - reader.pos));
        }
        Ok(Self {
            role: role.ok_or_else(|| missing("role"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            step: step.ok_or_else(|| missing("step"))?,
            network,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// SHA-256 over the raw parameter bits, hex encoded.
pub fn params_digest(net: &Network) -> String {
    let mut h = Sha256::new();
    for p in net.params() {
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct F64Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F64Reader<'_> {
    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        let end = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(self.pos))
            .ok_or(CheckpointError::Truncated)?;
        let raw = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| CheckpointError::Network(e.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_ckpt(with_adam: bool) -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Network::new(
            &[LayerSpec::Conv3x3 { in_ch: 1, out_ch: 4 }, LayerSpec::LeakyRelu { slope: 0.1 }],
            &[
                vec![LayerSpec::Conv1x1 { in_ch: 4, out_ch: 1 }],
                vec![LayerSpec::Conv1x1 { in_ch: 4, out_ch: 1 }, LayerSpec::Exp],
            ],
            &mut rng,
        )
        .unwrap();
        let mut ck = ModelCheckpoint::new("cap", 11, net);
        if with_adam {
            let mut st = AdamState::new(&ck.network.params(), 1e-3);
            let grads: Vec<Tensor> = ck.network.params().iter().map(|p| p.map(|v| v * 0.5 + 0.1)).collect();
            st.step(&mut ck.network.params_mut(), &grads).unwrap();
            ck.step = st.step;
            ck.adam = Some(st);
        }
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_adam in [false, true] {
            let ck = sample_ckpt(with_adam);
            let bytes = ck.to_bytes();
            let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample_ckpt(true).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(ModelCheckpoint::from_bytes(&long), Err(CheckpointError::Trailing(1))));
    }

    #[test]
    fn digest_tracks_parameters() {
        let ck = sample_ckpt(false);
        let d0 = params_digest(&ck.network);
        let mut net = ck.network.clone();
        assert_eq!(params_digest(&net), d0);
        net.params_mut()[0].data_mut()[0] += 1e-12;
        assert_ne!(params_digest(&net), d0);
    }
}
