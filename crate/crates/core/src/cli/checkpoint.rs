//! Binary checkpoint container.
//!
//! Layout (little endian): magic `MGRL`, `u16` version, `u32` block count, then
//! blocks of `u8` kind, `u16` name length, name bytes, `u32` rank, `u64` per
//! dimension, `u64` payload length and the payload (`f64` values for tensors,
//! UTF-8 for text).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{write_atomic, BenchmarkSpec};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::metalearn::{MetaConfig, Snapshot};
use crate::models::{Architecture, Finder, LeakyGenerator, MainModel};

const MAGIC: &[u8; 4] = b"MGRL";
pub const FORMAT_VERSION: u16 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;

/// Scalar generator settings stored next to its tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct GeneratorMeta {
    spread: f64,
    tau: f64,
    alpha: f64,
    latent_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunMeta {
    epoch: usize,
    seed: u64,
    benchmark: BenchmarkSpec,
    arch: Architecture,
    config: MetaConfig,
}

/// Model, finder and generator state with the settings that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub seed: u64,
    pub benchmark: BenchmarkSpec,
    pub config: MetaConfig,
    pub model: MainModel,
    pub finder: Finder,
    pub generator: LeakyGenerator,
}

enum Block {
    Tensor(String, Tensor),
    Text(String, String),
}

impl Checkpoint {
    pub fn new(
        snapshot: &Snapshot,
        generator: &LeakyGenerator,
        benchmark: &BenchmarkSpec,
        config: &MetaConfig,
        seed: u64,
    ) -> Self {
        Checkpoint {
            epoch: snapshot.epoch,
            seed,
            benchmark: benchmark.clone(),
            config: config.clone(),
            model: snapshot.model.clone(),
            finder: snapshot.finder.clone(),
            generator: generator.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = RunMeta {
            epoch: self.epoch,
            seed: self.seed,
            benchmark: self.benchmark.clone(),
            arch: self.model.architecture(),
            config: self.config.clone(),
        };
        let gen = GeneratorMeta {
            spread: self.generator.spread(),
            tau: self.generator.tau(),
            alpha: self.generator.alpha(),
            latent_dim: self.generator.latent_dim(),
        };
        let mut blocks = vec![
            Block::Text("run".into(), serde_json::to_string(&meta)?),
            Block::Text("generator".into(), serde_json::to_string(&gen)?),
            Block::Tensor("generator/modes".into(), self.generator.modes().clone()),
        ];
        for (i, p) in self.generator.projections().iter().enumerate() {
            blocks.push(Block::Tensor(format!("generator/projection/{i}"), p.clone()));
        }
        for (i, p) in self.model.params().into_iter().enumerate() {
            blocks.push(Block::Tensor(format!("model/{i}"), p));
        }
        for (i, p) in self.finder.params().iter().enumerate() {
            blocks.push(Block::Tensor(format!("finder/{i}"), p.clone()));
        }
        encode(&blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let blocks = decode(bytes)?;
        let text = |name: &str| {
            blocks.iter().find_map(|b| match b {
                Block::Text(n, t) if n == name => Some(t.as_str()),
                _ => None,
            })
        };
        let tensors = |prefix: &str| -> Vec<Tensor> {
            blocks
                .iter()
                .filter_map(|b| match b {
                    Block::Tensor(n, t) if n.strip_prefix(prefix).is_some_and(|r| r.parse::<usize>().is_ok()) => {
                        Some(t.clone())
                    }
                    _ => None,
                })
                .collect()
        };
        let missing = |what: &str| Error::Checkpoint(format!("missing block {what:?}"));
        let meta: RunMeta = serde_json::from_str(text("run").ok_or_else(|| missing("run"))?)?;
        let gen: GeneratorMeta = serde_json::from_str(text("generator").ok_or_else(|| missing("generator"))?)?;
        let modes = blocks
            .iter()
            .find_map(|b| match b {
                Block::Tensor(n, t) if n == "generator/modes" => Some(t.clone()),
                _ => None,
            })
            .ok_or_else(|| missing("generator/modes"))?;
        let generator = LeakyGenerator::from_parts(
            modes,
            gen.spread,
            gen.tau,
            gen.alpha,
            gen.latent_dim,
            tensors("generator/projection/"),
        )?;
        let model = MainModel::from_params(&meta.arch, tensors("model/"))?;
        let finder = Finder::from_params(meta.config.effective_finder(), gen.latent_dim, tensors("finder/"))?;
        Ok(Checkpoint {
            epoch: meta.epoch,
            seed: meta.seed,
            benchmark: meta.benchmark,
            config: meta.config,
            model,
            finder,
            generator,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn encode(blocks: &[Block]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        let (kind, name, dims, payload): (u8, &str, &[usize], Vec<u8>) = match b {
            Block::Tensor(n, t) => (
                KIND_TENSOR,
                n,
                t.shape(),
                t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            Block::Text(n, s) => (KIND_TEXT, n, &[], s.as_bytes().to_vec()),
        };
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("block name too long: {name}")))?;
        out.push(kind);
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<Block>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut blocks = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let kind = r.u8()?;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        blocks.push(match kind {
            KIND_TENSOR => {
                if !len.is_multiple_of(8) {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name:?} payload is not a multiple of 8 bytes"
                    )));
                }
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Block::Tensor(
                    name,
                    Tensor::new(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
                )
            }
            KIND_TEXT => Block::Text(
                name,
                String::from_utf8(payload.to_vec()).map_err(|_| Error::Checkpoint("text block is not UTF-8".into()))?,
            ),
            k => return Err(Error::Checkpoint(format!("unknown block kind {k}"))),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(blocks)
}
