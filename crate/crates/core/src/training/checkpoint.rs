//! Single-file checkpoint archive.
//!
//! ```text
//! magic      8 bytes  "ANRCKPT\0"
//! length     u64 LE   manifest byte count
//! manifest   JSON     format version, config text and hash, step, RNG
//!                     state, identities, keyframes, proxy geometry, and the
//!                     name and shape of every array
//! arrays     f64 LE   concatenated in manifest order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::scene::{CoarseMesh, Skeleton};
use crate::tensor::{hex_string, Tensor};
use crate::texture::NeuralTexture;

pub const MAGIC: &[u8; 8] = b"ANRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal; the counter does not fit JSON numbers.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex_string(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::format("checkpoint", "malformed rng state");
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: String,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_type: String,
    config: String,
    config_hash: String,
    step: u64,
    rng: RngState,
    identities: Vec<IdentityEntry>,
    keyframes: Vec<Vec<usize>>,
    counters: Vec<(String, u64)>,
    skeleton: Skeleton,
    mesh: CoarseMesh,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_type: String,
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub identities: Vec<IdentityEntry>,
    /// Per identity, in selection order.
    pub keyframes: Vec<Vec<usize>>,
    /// Named integer state such as optimizer step counts.
    pub counters: Vec<(String, u64)>,
    pub skeleton: Skeleton,
    pub mesh: CoarseMesh,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn identity_ids(&self) -> Vec<String> {
        self.identities.iter().map(|i| i.id.clone()).collect()
    }

    pub fn texture(&self, id: &str) -> Result<NeuralTexture> {
        let entry = self
            .identities
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::UnknownIdentity {
                requested: id.to_string(),
                available: self.identity_ids(),
            })?;
        let data = self
            .array(&format!("texture/{id}"))
            .ok_or_else(|| Error::format("checkpoint", format!("texture for `{id}` missing")))?
            .clone();
        Ok(NeuralTexture {
            data,
            identity_id: id.to_string(),
            init_seed: entry.init_seed,
        })
    }

    /// Register a new identity with the given texture.
    pub fn add_identity(&mut self, texture: NeuralTexture) -> Result<()> {
        if self.identities.iter().any(|e| e.id == texture.identity_id) {
            return Err(Error::invalid(format!("identity `{}` already exists", texture.identity_id)));
        }
        if let Some(first) = self.identities.first() {
            let reference = self.texture(&first.id)?;
            crate::error::ensure_shape("new identity texture", reference.data.shape(), texture.data.shape())?;
        }
        self.arrays
            .push((format!("texture/{}", texture.identity_id), texture.data));
        self.identities.push(IdentityEntry {
            id: texture.identity_id,
            init_seed: texture.init_seed,
        });
        self.keyframes.push(Vec::new());
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_type: self.model_type.clone(),
            config: self.config.to_text(),
            config_hash: self.config_hash(),
            step: self.step,
            rng: self.rng.clone(),
            identities: self.identities.clone(),
            keyframes: self.keyframes.clone(),
            counters: self.counters.clone(),
            skeleton: self.skeleton.clone(),
            mesh: self.mesh.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let payload: usize = self.arrays.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", m.format_version)));
        }
        let config = TrainConfig::from_text(&m.config)?;
        if config.hash() != m.config_hash {
            return Err(bad("config hash mismatch"));
        }
        let mut data = &bytes[16 + len..];
        let mut arrays = Vec::with_capacity(m.arrays.len());
        for a in m.arrays {
            let n: usize = a.shape.iter().product();
            if data.len() < n * 8 {
                return Err(bad(&format!("array `{}` truncated", a.name)));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            arrays.push((a.name, Tensor::from_vec(&a.shape, values)?));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after arrays"));
        }
        Ok(Checkpoint {
            model_type: m.model_type,
            config,
            step: m.step,
            rng: m.rng,
            identities: m.identities,
            keyframes: m.keyframes,
            counters: m.counters,
            skeleton: m.skeleton,
            mesh: m.mesh,
            arrays,
        })
    }

    /// Write atomically: a partial write never replaces an existing file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
