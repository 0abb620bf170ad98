//! Named parameter storage and the `SGW1` binary format.
//!
//! Layout (little-endian): magic `SGW1`, u32 count, then per tensor a u16
//! name length, the UTF-8 name, u8 rank, `rank` u32 dims and the f32 payload.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};

const MAGIC: &[u8; 4] = b"SGW1";

/// Ordered name -> tensor map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bindings { index: self.index.clone(), vars }
    }

    /// Bindings over leaves that were created elsewhere, in store order.
    pub fn bindings_from(&self, vars: &[Var]) -> Bindings {
        Bindings { index: self.index.clone(), vars: vars.to_vec() }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                bail!(Format, "parameter '{}' cannot be encoded", name);
            }
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "bad parameter block magic {:?}", magic);
        }
        let count = read_u32(r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(r, &mut rank)?;
            let shape = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            if store.get(&name).is_some() {
                bail!(Format, "duplicate parameter '{}'", name);
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated parameter data".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameter name -> tape leaf.
#[derive(Debug, Clone)]
pub struct Bindings {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' not bound")))
    }

    /// Leaves in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("stem.w", Tensor::from_fn(&[2, 1, 3], |i| i as f64 * 0.5 - 1.0));
        s.insert("stem.b", Tensor::zeros(&[3]));
        s.insert("scalar", Tensor::scalar(2.25));
        s
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.names(), s.names());
    }

    #[test]
    fn truncation_and_magic() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        for cut in [3, 10, buf.len() - 1] {
            assert!(matches!(ParamStore::read_from(&mut &buf[..cut]), Err(Error::Format(_))));
        }
        buf[0] = b'X';
        assert!(matches!(ParamStore::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn insert_replaces() {
        let mut s = sample();
        s.insert("stem.b", Tensor::filled(&[3], 1.0));
        assert_eq!(s.len(), 3);
        assert_eq!(s.get("stem.b").unwrap().data(), &[1.0, 1.0, 1.0]);
    }
}
