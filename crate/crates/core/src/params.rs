//! Named parameter sets, the `CTK1` checkpoint format, and the AdamW optimizer.
//!
//! `CTK1` layout (all integers little-endian `u32`):
//!
//! ```text
//! "CTK1"
//! repeated until EOF:
//!     name_len, name bytes (UTF-8), rows, cols, rows*cols f64 (little-endian)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::DataError;
use crate::tensor::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTK1";

/// Ordered collection of named matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, DenseMatrix)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn values(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.entries.iter_mut().map(|(_, v)| v)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn write_ctk1<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, value) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(value.rows() as u32).to_le_bytes())?;
            w.write_all(&(value.cols() as u32).to_le_bytes())?;
            for v in value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_ctk1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_ctk1(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_ctk1_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err("missing CTK1 magic".into());
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8], String> {
            if pos + n > bytes.len() {
                return Err(format!("truncated record at byte {pos}"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let mut set = ParamSet::new();
        loop {
            // Peek for EOF before reading a record.
            let head = match take(4) {
                Ok(h) => h,
                Err(_) => break,
            };
            let name_len = u32::from_le_bytes(head.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|e| format!("parameter name is not UTF-8: {e}"))?
                .to_string();
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = DenseMatrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
            set.insert(name, m);
        }
        Ok(set)
    }

    /// Pushes every parameter onto `tape` as a differentiable leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars: self.entries.iter().map(|(_, v)| tape.param(v.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let f = File::create(path).map_err(|e| DataError::io(path, e))?;
        self.write_ctk1(BufWriter::new(f)).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| DataError::io(path, e))?;
        Self::from_ctk1_bytes(&bytes).map_err(|msg| DataError::format(path, msg))
    }
}

/// Tape handles for a bound [`ParamSet`], aligned with its order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    /// Pairs names with existing tape leaves (used by gradient checks that create their own leaves).
    pub fn from_parts(names: Vec<String>, vars: Vec<Var>) -> Self {
        assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    /// Panics if `name` was not bound; parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> Var {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros: Vec<DenseMatrix> = params.values().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; `grads` is aligned with `params` order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[DenseMatrix], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.values_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
    }
}
