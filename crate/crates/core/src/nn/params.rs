use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{read_exact, read_u16, read_u64, read_u8, Tensor};

use super::models;

pub const DFCK_MAGIC: &[u8; 4] = b"DFCK";
pub const DFCK_VERSION: u16 = 1;

/// Default width of the first fully connected layer of student and assistant.
pub const DEFAULT_HIDDEN_FC: usize = 256;
/// Smallest teacher depth accepted by [`models::build_teacher`].
pub const MIN_TEACHER_DEPTH: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Student,
    Assistant,
    Teacher,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Student => 0,
            ModelKind::Assistant => 1,
            ModelKind::Teacher => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Student),
            1 => Some(ModelKind::Assistant),
            2 => Some(ModelKind::Teacher),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Student => "student",
            ModelKind::Assistant => "assistant",
            ModelKind::Teacher => "teacher",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Square input side in pixels; must be divisible by 16.
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Conv block count; only meaningful for the teacher.
    pub teacher_depth: usize,
    pub hidden_fc: usize,
}

impl ModelConfig {
    pub fn student(input_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Student,
            input_size,
            in_channels: 1,
            num_classes,
            teacher_depth: 0,
            hidden_fc: DEFAULT_HIDDEN_FC,
        }
    }

    pub fn assistant(input_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Assistant,
            ..Self::student(input_size, num_classes)
        }
    }

    /// Teacher with the default depth: at least 8 blocks, and deep enough to
    /// out-size the assistant at this input size.
    pub fn teacher(input_size: usize, num_classes: usize) -> Self {
        let mut cfg = ModelConfig {
            kind: ModelKind::Teacher,
            teacher_depth: 8,
            ..Self::student(input_size, num_classes)
        };
        if let Ok(min) = models::min_teacher_depth(&cfg) {
            cfg.teacher_depth = cfg.teacher_depth.max(min);
        }
        cfg
    }

    pub fn for_kind(kind: ModelKind, input_size: usize, num_classes: usize) -> Self {
        match kind {
            ModelKind::Student => Self::student(input_size, num_classes),
            ModelKind::Assistant => Self::assistant(input_size, num_classes),
            ModelKind::Teacher => Self::teacher(input_size, num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::contract(format!(
                "input size {} is not a positive multiple of 16 (four 2x pools)",
                self.input_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::contract(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 || self.hidden_fc == 0 {
            return Err(Error::contract("in_channels and hidden_fc must be positive"));
        }
        Ok(())
    }
}

/// Named, ordered trainable tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    config: ModelConfig,
    entries: IndexMap<String, Tensor>,
}

/// A [`ParamStore`] registered as leaves of a [`Graph`].
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let idx = self
            .store
            .entries
            .get_index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[idx]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.store.config
    }

    /// Leaf variables in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub(crate) fn from_entries(config: ModelConfig, entries: IndexMap<String, Tensor>) -> Self {
        ParamStore { config, entries }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self.entries.values().map(|t| g.leaf(t.clone(), trainable)).collect();
        Bound { store: self, vars }
    }

    pub fn write_dfck<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(DFCK_MAGIC)?;
        w.write_all(&DFCK_VERSION.to_le_bytes())?;
        w.write_all(&[c.kind.tag()])?;
        for v in [c.input_size, c.in_channels, c.num_classes, c.teacher_depth, c.hidden_fc] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_dftn(w)?;
        }
        Ok(())
    }

    pub fn read_dfck<R: Read>(r: &mut R) -> Result<ParamStore> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "DFCK")?;
        if &magic != DFCK_MAGIC {
            return Err(Error::format("DFCK", format!("bad magic {magic:?}")));
        }
        let version = read_u16(r, "DFCK")?;
        if version != DFCK_VERSION {
            return Err(Error::format("DFCK", format!("unsupported version {version}")));
        }
        let tag = read_u8(r, "DFCK")?;
        let kind =
            ModelKind::from_tag(tag).ok_or_else(|| Error::format("DFCK", format!("unknown model kind tag {tag}")))?;
        let mut fields = [0usize; 5];
        for f in &mut fields {
            *f = read_u64(r, "DFCK")? as usize;
        }
        let config = ModelConfig {
            kind,
            input_size: fields[0],
            in_channels: fields[1],
            num_classes: fields[2],
            teacher_depth: fields[3],
            hidden_fc: fields[4],
        };
        let count = read_u64(r, "DFCK")? as usize;
        let mut entries = IndexMap::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = read_u16(r, "DFCK")? as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name, "DFCK")?;
            let name = String::from_utf8(name).map_err(|_| Error::format("DFCK", "entry name is not UTF-8"))?;
            let t = Tensor::read_dftn(r)?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(Error::format("DFCK", format!("duplicate entry {name}")));
            }
        }
        let store = ParamStore { config, entries };
        store.check_layout()?;
        Ok(store)
    }

    /// The entries must be exactly those the architecture defines.
    fn check_layout(&self) -> Result<()> {
        self.config
            .validate()
            .map_err(|e| Error::format("DFCK", e.to_string()))?;
        let expected = models::param_shapes(&self.config)?;
        let matches = expected.len() == self.entries.len()
            && expected
                .iter()
                .zip(&self.entries)
                .all(|((en, es), (n, t))| en == n && es.as_slice() == t.shape());
        if !matches {
            return Err(Error::format(
                "DFCK",
                format!("entries do not match a {} architecture", self.config.kind),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_dfck(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<ParamStore> {
        let store = Self::read_dfck(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::format("DFCK", format!("{} trailing bytes", bytes.len())));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_dfck(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_dfck(&mut BufReader::new(file))
    }

    /// 64-bit digest of the serialized checkpoint (leading bytes of SHA-256).
    pub fn content_hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
