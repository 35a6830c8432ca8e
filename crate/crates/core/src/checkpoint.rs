//! Binary checkpoints and the per-scene registry of global-branch weights.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NormStats};
use crate::nn::{Adam, ParamStore, Tensor};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"FUSEVOCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    norm: NormStats,
    state: Option<TrainState>,
    blocks: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub norm: NormStats,
    pub state: Option<TrainState>,
    /// Keyed `param/…`, `buffer/…`, `adam_m/…`, `adam_v/…`.
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot of parameters and buffers whose names start with `prefix`
    /// (`""` for everything), plus optimizer moments when given.
    pub fn capture(
        model: &ModelConfig,
        norm: &NormStats,
        store: &ParamStore,
        prefix: &str,
        adam: Option<&Adam>,
        state: Option<TrainState>,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (i, p) in store.params().iter().enumerate() {
            if !p.name.starts_with(prefix) {
                continue;
            }
            tensors.insert(format!("param/{}", p.name), p.value.clone());
            if let Some(adam) = adam {
                tensors.insert(format!("adam_m/{}", p.name), adam.m[i].clone());
                tensors.insert(format!("adam_v/{}", p.name), adam.v[i].clone());
            }
        }
        for (name, b) in store.buffers().iter().filter(|(n, _)| n.starts_with(prefix)) {
            tensors.insert(format!("buffer/{name}"), b.clone());
        }
        Checkpoint { model: model.clone(), norm: norm.clone(), state, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            model: self.model.clone(),
            norm: self.norm.clone(),
            state: self.state.clone(),
            blocks: self.tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut out = std::io::BufWriter::new(fs::File::create(&tmp)?);
            out.write_all(MAGIC)?;
            out.write_all(&FORMAT_VERSION.to_le_bytes())?;
            out.write_all(&(json.len() as u64).to_le_bytes())?;
            out.write_all(&json)?;
            for t in self.tensors.values() {
                for v in t.data() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            out.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bad = |m: &str| Error::CheckpointMismatch(format!("{}: {m}", path.display()));
        let mut input = std::io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32b = [0u8; 4];
        input.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let mut u64b = [0u8; 8];
        input.read_exact(&mut u64b)?;
        let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for (name, shape) in header.blocks {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        if input.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { model: header.model, norm: header.norm, state: header.state, tensors })
    }

    /// Fails unless `cfg` equals the configuration the checkpoint was made with.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.model != cfg {
            let what = if self.model.k != cfg.k {
                format!("checkpoint has K={}, configuration has K={}", self.model.k, cfg.k)
            } else {
                "model configuration differs from the checkpoint".to_string()
            };
            return Err(Error::CheckpointMismatch(what));
        }
        Ok(())
    }

    /// Copies the stored parameters and buffers into `store`; every stored
    /// tensor must exist there with the same shape. Returns how many were set.
    pub fn restore(&self, store: &mut ParamStore) -> Result<usize> {
        let mut n = 0;
        for (key, t) in &self.tensors {
            if let Some(name) = key.strip_prefix("param/") {
                let id = store.id(name).ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter {name}")))?;
                let p = store.get_mut(id);
                if p.value.shape() != t.shape() {
                    return Err(Error::CheckpointMismatch(format!("{name}: {:?} vs {:?}", p.value.shape(), t.shape())));
                }
                p.value = t.clone();
                n += 1;
            } else if let Some(name) = key.strip_prefix("buffer/") {
                if !store.buffers().contains_key(name) {
                    return Err(Error::CheckpointMismatch(format!("unknown buffer {name}")));
                }
                let b = store.buffer_mut(name);
                if b.shape() != t.shape() {
                    return Err(Error::CheckpointMismatch(format!("buffer {name}: shape differs")));
                }
                *b = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Restores optimizer moments saved by [`Checkpoint::capture`].
    pub fn restore_adam(&self, store: &ParamStore, adam: &mut Adam) -> Result<()> {
        for (i, p) in store.params().iter().enumerate() {
            if let (Some(m), Some(v)) = (self.tensors.get(&format!("adam_m/{}", p.name)), self.tensors.get(&format!("adam_v/{}", p.name))) {
                if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                    return Err(Error::CheckpointMismatch(format!("optimizer state of {}", p.name)));
                }
                adam.m[i] = m.clone();
                adam.v[i] = v.clone();
            }
        }
        Ok(())
    }
}

/// Directory of per-scene global-branch weights (`<scene>.ckpt`).
#[derive(Clone, Debug)]
pub struct SceneRegistry {
    dir: PathBuf,
}

impl SceneRegistry {
    pub const PREFIX: &'static str = "glob.";

    pub fn open(dir: impl Into<PathBuf>) -> Result<SceneRegistry> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(SceneRegistry { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, scene: &str) -> Result<PathBuf> {
        let ok = !scene.is_empty() && scene.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !scene.starts_with('.');
        if !ok {
            return Err(Error::Config(format!("invalid scene id `{scene}`")));
        }
        Ok(self.dir.join(format!("{scene}.ckpt")))
    }

    pub fn contains(&self, scene: &str) -> bool {
        self.path(scene).is_ok_and(|p| p.exists())
    }

    pub fn scenes(&self) -> Result<Vec<String>> {
        let mut out: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".ckpt")).map(str::to_string))
            .collect();
        out.sort();
        Ok(out)
    }

    /// Stores the global branch of `store` under `scene`.
    pub fn register(&self, scene: &str, model: &ModelConfig, norm: &NormStats, store: &ParamStore, overwrite: bool) -> Result<()> {
        let path = self.path(scene)?;
        if path.exists() && !overwrite {
            return Err(Error::SceneExists(scene.to_string()));
        }
        Checkpoint::capture(model, norm, store, Self::PREFIX, None, None).save(&path)
    }

    pub fn load(&self, scene: &str) -> Result<Checkpoint> {
        let path = self.path(scene)?;
        if !path.exists() {
            return Err(Error::UnknownScene(scene.to_string()));
        }
        Checkpoint::load(&path)
    }

    /// Loads `scene` into `store` after checking it was trained for `model`.
    pub fn apply(&self, scene: &str, model: &ModelConfig, store: &mut ParamStore) -> Result<Checkpoint> {
        let ckpt = self.load(scene)?;
        ckpt.check_model(model)?;
        ckpt.restore(store)?;
        Ok(ckpt)
    }
}
