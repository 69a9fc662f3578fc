//! Named parameter storage, binding onto a graph, and a binary archive format.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IMGARCH1";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("archive i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter archive (bad magic)")]
    BadMagic,
    #[error("corrupt archive: {0}")]
    Corrupt(String),
}

/// Parameters keyed by hierarchical name (`"decoder/stack1/conv2/w"`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every entry of `other` in, renaming prefix `from` to `to`.
    pub fn copy_renamed(&mut self, other: &ParamStore, from: &str, to: &str) {
        for (k, v) in other.iter() {
            if let Some(rest) = k.strip_prefix(from) {
                self.insert(format!("{to}{rest}"), v.clone());
            }
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in &self.params {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in t.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            if len > 4096 {
                return Err(ArchiveError::Corrupt(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ArchiveError::Corrupt(format!("name not utf-8: {e}")))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            if ndim > 8 {
                return Err(ArchiveError::Corrupt(format!("{name}: {ndim} axes")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(Self { params })
    }
}

/// Read-only view of a [`ParamStore`] on a graph. Each parameter becomes one
/// leaf the first time it is used; trainable bindings make gradient-carrying
/// leaves, frozen bindings make constants.
pub struct Binding<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Binding<'g> {
    pub fn trainable(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self::new(graph, store, true)
    }

    pub fn frozen(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self::new(graph, store, false)
    }

    fn new(graph: &'g Graph, store: &'g ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Leaf for parameter `name`. Panics if the name is unknown: every caller
    /// names parameters it registered itself.
    pub fn param(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Names of the parameters touched so far.
    pub fn used(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Gradients of every touched parameter (zeros where nothing flowed).
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut s = ParamStore::new();
        s.insert("a/w", Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., -6.5]));
        s.insert("b", Tensor::scalar(0.25));
        s.save(&path).unwrap();
        assert_eq!(ParamStore::load(&path).unwrap(), s);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        std::fs::write(&path, b"notanarchive").unwrap();
        assert!(matches!(ParamStore::load(&path), Err(ArchiveError::BadMagic)));
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let g = Graph::new();
        let b = Binding::frozen(&g, &s);
        let x = g.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let loss = (b.param("w") * x).sum();
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(b.param("w")).is_none());
        assert_eq!(b.gradients(&grads)["w"].data(), &[0.0, 0.0]);
    }
}
