//! Named parameter storage and the `ECDW` weight file.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "ECDW" | u32 count | count × ( u16 name_len | name | u8 rank | rank × u32 extent | f64 values )
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ECDW";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Inserts every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Like [`ParamStore::bind`] but without gradients.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Bound> {
        let vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::config(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Parses an `ECDW` stream into `(name, tensor)` pairs in file order.
    pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected ECDW".into() });
        }
        let count = cur.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_at = cur.pos;
            let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format { offset: name_at as u64, msg: "parameter name is not utf-8".into() })?
                .to_string();
            let rank = cur.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data_at = cur.pos;
            let raw = cur.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format { offset: data_at as u64, msg: format!("{name}: {e}") })?;
            out.push((name, t));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format { offset: cur.pos as u64, msg: "trailing bytes".into() });
        }
        Ok(out)
    }

    /// Overwrites parameters from a weight file. Every stored name must be
    /// present with an identical shape.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = Self::read_entries(std::fs::File::open(path)?)?;
        self.assign(entries)
    }

    pub fn assign(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::config(format!(
                "weight file has {} parameters, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, t) in entries {
            let id = self.id(&name).ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {name}: file shape {:?}, model shape {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            self.tensors[id.0] = t;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Graph variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes the variable used for one parameter.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Kaiming-uniform bound for a leaky-ReLU layer with the given fan-in.
pub fn kaiming_bound(fan_in: usize, slope: f64) -> f64 {
    (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, slope: f64, rng: &mut R) -> Tensor {
    let b = kaiming_bound(fan_in, slope);
    Tensor::uniform(shape, -b, b, rng)
}
