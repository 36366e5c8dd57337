//! Named, ordered parameter collections and their binary weight format.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "IPTV2WTS" | u32 version = 1 | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype (0 = f64, 1 = f32)
//!            | 4 × u64 dims (n, c, h, w) | raw values
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{DType, Dims, Scalar, Tensor4};

pub const MAGIC: &[u8; 8] = b"IPTV2WTS";
pub const FORMAT_VERSION: u32 = 1;

/// Insertion-ordered map of parameter name → tensor. Values are held in
/// f64; `dtype` selects the on-disk precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor4<f64>>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            entries: IndexMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn set_dtype(&mut self, dtype: DType) {
        self.dtype = dtype;
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4<f64>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replaces an existing entry, keeping its position.
    pub fn set(&mut self, name: &str, value: Tensor4<f64>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.dims() != value.dims() {
            return Err(shape_err!("set `{name}`: {} → {}", slot.dims(), value.dims()));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor4<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total learnable scalars.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor4::len).sum()
    }

    /// Registers every entry on `tape` and returns the name → var map.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.cast(), requires_grad)))
            .collect();
        Bound { vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(self.dtype.code());
            for d in t.dims().to_array() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match self.dtype {
                DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t
                    .data()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad magic, not a weight file".into(),
            });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: version_at,
                msg: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("entry count")? as usize;
        let mut store = ParamStore::new(DType::F64);
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Parse {
                    offset: name_at,
                    msg: "name is not UTF-8".into(),
                })?
                .to_string();
            let dtype_at = r.pos;
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Parse {
                offset: dtype_at,
                msg: format!("unknown dtype code {code}"),
            })?;
            if i == 0 {
                store.dtype = dtype;
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = usize::try_from(r.u64("dims")?).map_err(|_| Error::Parse {
                    offset: r.pos - 8,
                    msg: "dimension overflows usize".into(),
                })?;
            }
            let dims = Dims::from_array(dims);
            let nbytes = dims
                .len()
                .checked_mul(dtype.size_of())
                .ok_or_else(|| Error::Parse {
                    offset: r.pos,
                    msg: "entry size overflows".into(),
                })?;
            let raw = r.take(nbytes, "values")?;
            let data: Vec<f64> = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            if store.contains(&name) {
                return Err(Error::Parse {
                    offset: name_at,
                    msg: format!("duplicate entry `{name}`"),
                });
            }
            store.entries.insert(name, Tensor4::from_vec(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parameters registered on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Prefix-qualified view into a [`Bound`] map.
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.bound.get(&join(&self.prefix, name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.contains(&join(&self.prefix, name))
    }

    pub fn child(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Uniform in ±1/√fan_in, for weights and biases alike.
pub fn fan_in_uniform<R: rand::Rng + ?Sized>(dims: Dims, fan_in: usize, rng: &mut R) -> Tensor4<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor4::uniform(dims, -bound, bound, rng)
}

/// Dotted name join that tolerates an empty prefix.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
