//! Named parameter storage, initialization, and the checkpoint format.
//!
//! Checkpoint byte layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"AFCKPT01"
//! count   u32
//! entry*  count times:
//!   path_len u32, path utf-8 bytes
//!   flags    u8   (bit0 = trainable, bit1 = weight-decay eligible)
//!   ndim     u32, dims u64 * ndim
//!   values   f64 * prod(dims), row-major
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AfError, Result};
use crate::tensor::{Tape, Tensor, TensorId};

const MAGIC: &[u8; 8] = b"AFCKPT01";

#[derive(Clone, Debug)]
pub struct Param {
    pub data: RefCell<Vec<f64>>,
    pub shape: Vec<usize>,
    /// Participates in gradient-based updates.
    pub trainable: bool,
    /// Eligible for decoupled weight decay (weights yes, biases/norms no).
    pub decay: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat map from parameter path (e.g. `encoder.stage1.block0.attn.qkv.weight`)
/// to its value. Insertion order is deterministic and drives checkpoint and
/// optimizer ordering.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Truncated normal, resampled outside ±2σ.
    TruncNormal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        path: &str,
        shape: Vec<usize>,
        init: Init,
        trainable: bool,
        decay: bool,
        rng: &mut impl Rng,
    ) {
        assert!(
            !self.entries.contains_key(path),
            "duplicate parameter path {path}"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).unwrap();
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        self.entries.insert(
            path.to_string(),
            Param {
                data: RefCell::new(data),
                shape,
                trainable,
                decay,
            },
        );
    }

    pub fn get(&self, path: &str) -> &Param {
        self.entries
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"))
    }

    pub fn set_data(&self, path: &str, data: Vec<f64>) {
        let p = self.get(path);
        assert_eq!(data.len(), p.numel());
        *p.data.borrow_mut() = data;
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|p| p.numel()).sum()
    }

    /// Parameter count grouped by the first path segment.
    pub fn itemized(&self) -> IndexMap<String, usize> {
        let mut out: IndexMap<String, usize> = IndexMap::new();
        for (path, p) in &self.entries {
            let group = path.split('.').next().unwrap_or("").to_string();
            *out.entry(group).or_insert(0) += p.numel();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            let flags = (p.trainable as u8) | ((p.decay as u8) << 1);
            f.write_all(&[flags])?;
            f.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                f.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.data.borrow().iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrite this store's values from a checkpoint file. Every entry in
    /// the file must exist here with an identical shape, and vice versa.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AfError::Checkpoint(format!(
                "{}: bad magic, not a checkpoint",
                path.display()
            )));
        }
        let count = read_u32(&mut f)? as usize;
        let mut seen = 0usize;
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| AfError::Checkpoint(format!("invalid path: {e}")))?;
            let mut flags = [0u8; 1];
            f.read_exact(&mut flags)?;
            let ndim = read_u32(&mut f)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                f.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let p = self.entries.get(&name).ok_or_else(|| {
                AfError::Checkpoint(format!("checkpoint entry {name} not in model"))
            })?;
            if p.shape != shape {
                return Err(AfError::Checkpoint(format!(
                    "shape mismatch for {name}: model {:?} vs checkpoint {shape:?}",
                    p.shape
                )));
            }
            *p.data.borrow_mut() = data;
            seen += 1;
        }
        if seen != self.entries.len() {
            return Err(AfError::Checkpoint(format!(
                "checkpoint has {seen} entries, model expects {}",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Per-forward cache binding parameter paths to tape leaves, so each
/// parameter appears exactly once on the tape and gradient accumulation
/// across multiple uses works.
pub struct Binder<'t> {
    tape: &'t Tape,
    ids: RefCell<HashMap<String, TensorId>>,
    order: RefCell<Vec<String>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Binder {
            tape,
            ids: RefCell::new(HashMap::new()),
            order: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, store: &ParamStore, path: &str) -> Tensor<'t> {
        if let Some(&id) = self.ids.borrow().get(path) {
            return Tensor { tape: self.tape, id };
        }
        let p = store.get(path);
        let t = if p.trainable {
            self.tape.leaf(p.data.borrow().clone(), p.shape.clone())
        } else {
            self.tape.constant(p.data.borrow().clone(), p.shape.clone())
        };
        self.ids.borrow_mut().insert(path.to_string(), t.id);
        self.order.borrow_mut().push(path.to_string());
        t
    }

    /// Gradients of every bound trainable parameter after a backward pass.
    /// Missing gradients (parameters unused by the loss) come back as `None`.
    pub fn grads(&self) -> HashMap<String, Option<Vec<f64>>> {
        let ids = self.ids.borrow();
        let mut out = HashMap::with_capacity(ids.len());
        for (path, &id) in ids.iter() {
            let t = Tensor { tape: self.tape, id };
            out.insert(path.clone(), t.grad());
        }
        out
    }
}

/// Shared RNG helper for deterministic model construction.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Convenience wrapper used by layers that build gather index maps once.
pub type IndexMapRc = Rc<Vec<usize>>;
