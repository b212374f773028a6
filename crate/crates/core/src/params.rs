//! Named parameter storage, tape binding, and the checkpoint container.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.name(*id).starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// FNV-1a over names and payload bits of every parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for id in self.ids_with_prefix(prefix) {
            for b in self.name(id).bytes() {
                eat(b);
            }
            for v in self.get(id).data() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrite values from a map; every parameter must be present with a
    /// matching shape.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// Seeded parameter construction under a name prefix.
pub struct ParamBuilder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'s> ParamBuilder<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64, prefix: &str) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: prefix.to_string(),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform in ±1/sqrt(fan_in).
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        let path = self.path(name);
        self.store.add(path, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let path = self.path(name);
        self.store.add(path, Tensor::full(shape, value))
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let seed = self.rng.random::<u64>();
        ParamBuilder {
            prefix: self.path(name),
            store: self.store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Parameters bound as leaves of one tape.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    store: &'s ParamStore,
    trainable: Option<&'s [bool]>,
    cache: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Ctx<'t, 's> {
    /// `trainable[i]` marks whether parameter `i` should receive a gradient;
    /// `None` binds everything as constants.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: Option<&'s [bool]>) -> Self {
        Self {
            tape,
            store,
            trainable,
            cache: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Bind existing tape variables, one per parameter in store order.
    /// Used to finite-difference whole modules.
    pub fn bound(tape: &'t Tape, store: &'s ParamStore, vars: &[Var<'t>]) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Self {
            tape,
            store,
            trainable: None,
            cache: RefCell::new(vars.iter().map(|v| Some(*v)).collect()),
        }
    }

    pub fn inference(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, None)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.cache.borrow()[id.0] {
            return v;
        }
        let req = self.trainable.map(|t| t[id.0]).unwrap_or(false);
        let v = self.tape.leaf(self.store.get(id).clone(), req);
        self.cache.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients of bound trainable parameters after `tape.backward`.
    /// Parameters never touched by the forward pass get no entry.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.cache
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !v.requires_grad() {
                    return None;
                }
                Some((ParamId(i), v.grad().unwrap_or_else(|| Tensor::zeros(self.store.get(ParamId(i)).shape()))))
            })
            .collect()
    }
}

const MAGIC: &[u8; 8] = b"SVLACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing container: named tensors (shape + little-endian f64
/// payload) plus string metadata, preceded by a magic and version.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 name".into()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            ..Default::default()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, self.version);
        put_u32(&mut w, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut w, name);
            put_u32(&mut w, t.shape().len() as u32);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut w, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut w, k);
            put_str(&mut w, v);
        }
        w
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let m = r.u32()?;
        let mut meta = BTreeMap::new();
        for _ in 0..m {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        Ok(Self {
            version,
            tensors,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
