//! Run configuration as flat `key = value` text.
//!
//! Keys: `kind`, `L`, `dk`, `dv`, `seed`, `gate_floor`, `chunk`, `policy`,
//! `form`, `tol`, `grad_tol`, `eps`. Blank lines and `#` comments are
//! ignored; missing keys keep their defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::cost::ChunkPolicy;
use crate::error::{GlaError, Result};
use crate::fixtures::ModelKind;
use crate::recurrent::DEFAULT_FD_EPS;
use crate::verify::{DEFAULT_EQUIV_TOL, DEFAULT_GRAD_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    Recurrent,
    Parallel,
    Chunkwise,
}

impl Form {
    pub fn as_str(self) -> &'static str {
        match self {
            Form::Recurrent => "recurrent",
            Form::Parallel => "parallel",
            Form::Chunkwise => "chunkwise",
        }
    }
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Form {
    type Err = GlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Form::Recurrent),
            "parallel" => Ok(Form::Parallel),
            "chunkwise" => Ok(Form::Chunkwise),
            other => Err(GlaError::InvalidConfig(format!(
                "unknown form {other:?} (expected recurrent, parallel or chunkwise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub len: usize,
    pub dk: usize,
    pub dv: usize,
    pub seed: u64,
    pub gate_floor: f64,
    pub chunk: usize,
    pub policy: ChunkPolicy,
    pub form: Form,
    pub tol: f64,
    pub grad_tol: f64,
    pub eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ModelKind::General,
            len: 64,
            dk: 4,
            dv: 4,
            seed: 0,
            gate_floor: 0.5,
            chunk: 16,
            policy: ChunkPolicy::Materialize,
            form: Form::Chunkwise,
            tol: DEFAULT_EQUIV_TOL,
            grad_tol: DEFAULT_GRAD_TOL,
            eps: DEFAULT_FD_EPS,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| GlaError::InvalidConfig(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 12] = [
        "kind",
        "L",
        "dk",
        "dv",
        "seed",
        "gate_floor",
        "chunk",
        "policy",
        "form",
        "tol",
        "grad_tol",
        "eps",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "kind" => self.kind = value.parse()?,
            "L" => self.len = parse(key, value)?,
            "dk" => self.dk = parse(key, value)?,
            "dv" => self.dv = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "gate_floor" => self.gate_floor = parse(key, value)?,
            "chunk" => self.chunk = parse(key, value)?,
            "policy" => self.policy = value.parse()?,
            "form" => self.form = value.parse()?,
            "tol" => self.tol = parse(key, value)?,
            "grad_tol" => self.grad_tol = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            other => return Err(GlaError::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults and validates.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GlaError::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GlaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::parse_text(&text).map_err(|e| GlaError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        let bad = |msg: String| Err(GlaError::InvalidConfig(msg));
        if self.len == 0 || self.dk == 0 || self.dv == 0 {
            return bad(format!(
                "L, dk, dv must be >= 1 (got {}, {}, {})",
                self.len, self.dk, self.dv
            ));
        }
        if !(self.gate_floor > 0.0 && self.gate_floor <= 1.0) {
            return bad(format!("gate_floor must lie in (0, 1], got {}", self.gate_floor));
        }
        if self.chunk == 0 {
            return bad("chunk must be >= 1".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.tol >= 0.0 && self.grad_tol >= 0.0) {
            return bad("tolerances must be >= 0".into());
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kind = {}", self.kind)?;
        writeln!(f, "L = {}", self.len)?;
        writeln!(f, "dk = {}", self.dk)?;
        writeln!(f, "dv = {}", self.dv)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "gate_floor = {:?}", self.gate_floor)?;
        writeln!(f, "chunk = {}", self.chunk)?;
        writeln!(f, "policy = {}", self.policy)?;
        writeln!(f, "form = {}", self.form)?;
        writeln!(f, "tol = {:?}", self.tol)?;
        writeln!(f, "grad_tol = {:?}", self.grad_tol)?;
        writeln!(f, "eps = {:?}", self.eps)
    }
}
