//! Named trainable parameters and the binary checkpoint format.
//!
//! A checkpoint is the magic `CBA1`, a little-endian `u32` format version, a
//! `u32` parameter count, then one record per parameter: `u32` name length,
//! UTF-8 name, `u32` rank, `u64` per dimension, and the values as
//! little-endian `f64` in row-major order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CBA1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Ordered collection of parameters. Order is registration order, which is
/// also the checkpoint record order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        id
    }

    /// Registers a `rows x cols` parameter initialized from
    /// `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Matrix::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (i, g) in grads.slots.iter().enumerate() {
            if let Some(g) = g {
                for (a, b) in self.params[i].grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_filtered(path, |_| true)
    }

    /// Writes only the parameters whose name passes `keep`.
    pub fn save_filtered(&self, path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
        let records: Vec<(&str, &Matrix)> = self
            .params
            .iter()
            .filter(|p| keep(&p.name))
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        write_checkpoint(path, &records)
    }

    /// Loads matching parameters from a checkpoint.
    ///
    /// Every checkpoint record must name a registered parameter of identical
    /// shape. Registered parameters absent from the file are left untouched
    /// when `allow_missing` accepts their name, otherwise loading fails.
    pub fn load(&mut self, path: &Path, allow_missing: impl Fn(&str) -> bool) -> Result<()> {
        let records = read_checkpoint(path)?;
        let mut problems = Vec::new();
        let mut seen = vec![false; self.params.len()];
        for (name, value) in records {
            match self.by_name.get(&name) {
                Some(&id) => {
                    let p = &mut self.params[id.0];
                    if p.value.shape() != value.shape() {
                        problems.push(format!(
                            "{name}: checkpoint {:?} vs model {:?}",
                            value.shape(),
                            p.value.shape()
                        ));
                    } else {
                        p.value = value;
                        seen[id.0] = true;
                    }
                }
                None => problems.push(format!("{name}: not a model parameter")),
            }
        }
        for (i, p) in self.params.iter().enumerate() {
            if !seen[i] && !allow_missing(&p.name) && !problems.iter().any(|s| s.starts_with(&p.name)) {
                problems.push(format!("{}: missing from checkpoint", p.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(problems.join("; ")))
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    pub(crate) fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots[id.0].as_ref()
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    /// Drops every gradient whose parameter fails `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *slot = None;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

pub fn write_checkpoint(path: &Path, records: &[(&str, &Matrix)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, value) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(value.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(value.cols() as u64).to_le_bytes());
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected CBA1"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::format(path, format!("{name}: rank {rank} unsupported"))),
        };
        let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if !r.is_done() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(out)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
