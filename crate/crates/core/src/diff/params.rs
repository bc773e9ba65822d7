//! Named parameter collections and the versioned checkpoint format.
//!
//! Checkpoints store a JSON metadata blob plus named sections of
//! name → shape → row-major float64 payloads, little-endian. Save/load
//! round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::diff::graph::{Graph, Var};
use crate::diff::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, so downstream consumers (optimizer, checkpoints, gradient checks)
/// are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter name `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor<F>) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(slot.shape(), value.shape(), "shape change for `{name}`");
        *slot = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Registers every parameter as a gradient-carrying leaf on `graph`.
    pub fn bind(&self, graph: &Graph<F>) -> BoundParams<F> {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), graph.leaf(value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Registers every parameter as a constant (no gradient flow); used for
    /// inference-style evaluation.
    pub fn bind_frozen(&self, graph: &Graph<F>) -> BoundParams<F> {
        let vars = self
            .params
            .iter()
            .map(|(name, value)| (name.clone(), graph.constant(value.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Graph-bound view of a [`ParameterSet`].
pub struct BoundParams<F> {
    vars: BTreeMap<String, Var<F>>,
}

impl<F: Scalar> BoundParams<F> {
    pub fn get(&self, name: &str) -> &Var<F> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<F>)> {
        self.vars.iter()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TNCP";
const CHECKPOINT_VERSION: u32 = 1;

/// In-memory form of a checkpoint file: a metadata string (JSON by
/// convention) plus named tensor sections.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub sections: BTreeMap<String, BTreeMap<String, (Vec<usize>, Vec<f64>)>>,
}

impl Checkpoint {
    pub fn insert_params<F: Scalar>(&mut self, section: &str, params: &ParameterSet<F>) {
        let mut map = BTreeMap::new();
        for (name, tensor) in params.iter() {
            map.insert(
                name.clone(),
                (
                    tensor.shape().to_vec(),
                    tensor.data().iter().map(|x| x.to_f64_lossy()).collect(),
                ),
            );
        }
        self.sections.insert(section.to_string(), map);
    }

    pub fn extract_params<F: Scalar>(&self, section: &str) -> Result<ParameterSet<F>> {
        let map = self
            .sections
            .get(section)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{section}`")))?;
        let mut params = ParameterSet::new();
        for (name, (shape, data)) in map {
            params.insert(
                name.clone(),
                Tensor::from_vec(shape.clone(), data.iter().map(|&x| F::cast(x)).collect()),
            );
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = self.meta.as_bytes();
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        for (section, entries) in &self.sections {
            write_str(&mut buf, section);
            buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
            for (name, (shape, data)) in entries {
                write_str(&mut buf, name);
                buf.push(shape.len() as u8);
                for &d in shape {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &x in data {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = cur.take_u64()? as usize;
        let meta = String::from_utf8(cur.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not utf-8".into()))?;
        let n_sections = cur.take_u64()? as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..n_sections {
            let section = cur.take_str()?;
            let n_entries = cur.take_u64()? as usize;
            let mut entries = BTreeMap::new();
            for _ in 0..n_entries {
                let name = cur.take_str()?;
                let ndim = cur.take(1)?[0] as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(cur.take_u64()? as usize);
                }
                let count: usize = shape.iter().product();
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
                }
                entries.insert(name, (shape, data));
            }
            sections.insert(section, entries);
        }
        Ok(Checkpoint { meta, sections })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_str(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))
    }
}
