use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "poisid-params v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            first_moment: Tensor::zeros(r, c),
            second_moment: Tensor::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replaces a parameter's value and resets its optimizer moments.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        p.value.same_shape(&value, "set_value")?;
        p.value = value;
        p.first_moment = Tensor::zeros(p.value.rows(), p.value.cols());
        p.second_moment = Tensor::zeros(p.value.rows(), p.value.cols());
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Writes names, shapes and values. Values use Rust's shortest
    /// round-trip formatting, so a reload is bit-exact.
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "tensors {}", self.params.len())?;
        for p in &self.params {
            writeln!(w, "{} {} {}", p.name, p.value.rows(), p.value.cols())?;
            let values: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", values.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: impl BufRead) -> Result<Self> {
        let bad = |msg: String| Error::Parse(format!("checkpoint: {msg}"));
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(|e| Error::Parse(e.to_string()))
        };
        let magic = next()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("unsupported header `{magic}`")));
        }
        let count: usize = next()?
            .strip_prefix("tensors ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing tensor count".into()))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let header = next()?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(bad(format!("bad tensor header `{header}`")));
            };
            let rows: usize = rows.parse().map_err(|_| bad("bad rows".into()))?;
            let cols: usize = cols.parse().map_err(|_| bad("bad cols".into()))?;
            let values = next()?
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            store.add(name, Tensor::from_vec(rows, cols, values)?);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter in the store.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut store.params {
        let grads = p.grad.data();
        let m = p.first_moment.data_mut();
        for (m, &g) in m.iter_mut().zip(grads) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = p.second_moment.data_mut();
        for (v, &g) in v.iter_mut().zip(grads) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (p.first_moment.data(), p.second_moment.data());
        for ((w, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            *w -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
    }
}
