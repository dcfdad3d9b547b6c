//! Versioned binary container for trained models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "LDCKPT\0\0"
//! version   u32      FORMAT_VERSION
//! kind      u32      1 = VAE, 2 = GAN
//! n_meta    u32
//!   key     u32 length + UTF-8 bytes
//!   value   u32 length + UTF-8 bytes
//! n_tensor  u32
//!   name    u32 length + UTF-8 bytes
//!   role    u8       0 = parameter, 1 = buffer
//!   ndim    u32
//!   dims    ndim x u64
//!   data    prod(dims) x f64
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! Metadata and tensors are written in sorted key order, so a model always
//! serializes to the same bytes. The hex digest is the checkpoint hash.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::params::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gan::{GanConfig, LatentGan};
use crate::vae::{VaeConfig, VaeModel};

pub const MAGIC: &[u8; 8] = b"LDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

const KEY_CONFIG: &str = "config";
const KEY_SEED: &str = "seed";
const KEY_VOCAB_HASH: &str = "vocab_hash";
const KEY_VOCAB_SIZE: &str = "vocab_size";
const KEY_VAE_HASH: &str = "vae_hash";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Vae,
    Gan,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Vae => 1,
            CheckpointKind::Gan => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(CheckpointKind::Vae),
            2 => Ok(CheckpointKind::Gan),
            other => Err(Error::Checkpoint(format!(
                "unknown checkpoint kind {other}"
            ))),
        }
    }
}

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub metadata: BTreeMap<String, String>,
    pub store: ParamStore,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, role: u8, t: &Tensor) {
    put_str(out, name);
    out.push(role);
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(self.kind.code().to_le_bytes());
        out.extend((self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let (params, buffers) = (self.store.params(), self.store.buffers());
        out.extend(((params.len() + buffers.len()) as u32).to_le_bytes());
        for (name, t) in params {
            put_tensor(&mut out, name, 0, t);
        }
        for (name, t) in buffers {
            put_tensor(&mut out, name, 1, t);
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint(
                "content digest mismatch (file corrupted)".into(),
            ));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let kind = CheckpointKind::from_code(r.u32()?)?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            metadata.insert(k, r.string()?);
        }
        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let role = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            match role {
                0 => store.insert(name, t),
                1 => store.insert_buffer(name, t),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has unknown role {other}"
                    )))
                }
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            metadata,
            store,
        })
    }

    /// Hex SHA-256 digest, as stored in the file trailer.
    pub fn hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn parse_seed(ckpt: &Checkpoint) -> Result<u64> {
    ckpt.meta(KEY_SEED)?
        .parse()
        .map_err(|_| Error::Checkpoint("seed is not an integer".into()))
}

/// A loaded VAE with the provenance recorded alongside it.
#[derive(Clone, Debug)]
pub struct VaeCheckpoint {
    pub model: VaeModel,
    pub vocab_hash: String,
    pub seed: u64,
    pub hash: String,
}

impl VaeCheckpoint {
    pub fn new(model: VaeModel, vocab_hash: impl Into<String>, seed: u64) -> Self {
        let mut c = VaeCheckpoint {
            model,
            vocab_hash: vocab_hash.into(),
            seed,
            hash: String::new(),
        };
        c.hash = c.container().expect("configs serialize").hash();
        c
    }

    fn container(&self) -> Result<Checkpoint> {
        let config =
            toml::to_string(self.model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata = BTreeMap::from([
            (KEY_CONFIG.to_string(), config),
            (KEY_SEED.to_string(), self.seed.to_string()),
            (KEY_VOCAB_HASH.to_string(), self.vocab_hash.clone()),
            (
                KEY_VOCAB_SIZE.to_string(),
                self.model.vocab_size().to_string(),
            ),
        ]);
        Ok(Checkpoint {
            kind: CheckpointKind::Vae,
            metadata,
            store: self.model.store().clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        self.container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Checkpoint::load(path)?)
    }

    pub fn from_container(ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Vae)?;
        let hash = ckpt.hash();
        let config: VaeConfig = toml::from_str(ckpt.meta(KEY_CONFIG)?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let vocab_size = ckpt
            .meta(KEY_VOCAB_SIZE)?
            .parse()
            .map_err(|_| Error::Checkpoint("vocab_size is not an integer".into()))?;
        let seed = parse_seed(&ckpt)?;
        let vocab_hash = ckpt.meta(KEY_VOCAB_HASH)?.to_string();
        let model = VaeModel::from_store(&config, vocab_size, ckpt.store)?;
        Ok(VaeCheckpoint {
            model,
            vocab_hash,
            seed,
            hash,
        })
    }

    /// Errors unless the checkpoint was trained with the vocabulary whose
    /// hash is given.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::Incompatible {
                what: "vocabulary hash",
                expected: self.vocab_hash.clone(),
                found: vocab_hash.to_string(),
            });
        }
        Ok(())
    }
}

/// A loaded GAN (context encoder included) and the VAE it was trained on.
#[derive(Clone, Debug)]
pub struct GanCheckpoint {
    pub gan: LatentGan,
    pub vae_hash: String,
    pub seed: u64,
    pub hash: String,
}

impl GanCheckpoint {
    pub fn new(gan: LatentGan, vae_hash: impl Into<String>, seed: u64) -> Self {
        let mut c = GanCheckpoint {
            gan,
            vae_hash: vae_hash.into(),
            seed,
            hash: String::new(),
        };
        c.hash = c.container().expect("configs serialize").hash();
        c
    }

    fn container(&self) -> Result<Checkpoint> {
        let config =
            toml::to_string(self.gan.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata = BTreeMap::from([
            (KEY_CONFIG.to_string(), config),
            (KEY_SEED.to_string(), self.seed.to_string()),
            (KEY_VAE_HASH.to_string(), self.vae_hash.clone()),
        ]);
        Ok(Checkpoint {
            kind: CheckpointKind::Gan,
            metadata,
            store: self.gan.store().clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        self.container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Checkpoint::load(path)?)
    }

    pub fn from_container(ckpt: Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::Gan)?;
        let hash = ckpt.hash();
        let config: GanConfig = toml::from_str(ckpt.meta(KEY_CONFIG)?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let seed = parse_seed(&ckpt)?;
        let vae_hash = ckpt.meta(KEY_VAE_HASH)?.to_string();
        let gan = LatentGan::from_store(&config, ckpt.store)?;
        Ok(GanCheckpoint {
            gan,
            vae_hash,
            seed,
            hash,
        })
    }

    /// Errors unless this GAN was trained against `vae` and their latent
    /// sizes agree.
    pub fn check_compatible(&self, vae: &VaeCheckpoint) -> Result<()> {
        if self.vae_hash != vae.hash {
            return Err(Error::Incompatible {
                what: "VAE checkpoint hash",
                expected: self.vae_hash.clone(),
                found: vae.hash.clone(),
            });
        }
        if self.gan.config().latent != vae.model.latent_dim() {
            return Err(Error::Incompatible {
                what: "latent dimension",
                expected: self.gan.config().latent.to_string(),
                found: vae.model.latent_dim().to_string(),
            });
        }
        Ok(())
    }
}
