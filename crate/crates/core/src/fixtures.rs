//! Named model configurations and seeded instance generation.
//!
//! Random draws come from a SplitMix64 stream seeded with the caller's seed.
//! Each draw maps a 64-bit output `x` to `u = (x >> 11) * 2^-53` in `[0, 1)`,
//! then to `lo + (hi - lo) * u`. Tensors are filled row-major in the order
//! Q, K, V, log-alpha (if sampled), log-beta (if sampled), so any
//! implementation of the same stream reproduces the instances exactly.

use std::fmt;
use std::str::FromStr;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{GlaError, Result};
use crate::gates::GateSeq;
use crate::recurrent::GlaInstance;
use crate::tensor::SeqTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// All gates one: plain causal linear attention.
    Vanilla,
    /// Constant key gate `gamma` in `(0, 1)`, value gates one.
    RetNet { gamma: f64 },
    /// Sampled key gates, value gates one.
    GlaBetaOne,
    /// Both gates sampled.
    General,
}

impl ModelKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelKind::RetNet { gamma } if !(gamma > 0.0 && gamma < 1.0) => Err(GlaError::InvalidConfig(
                format!("retnet gamma must lie in (0, 1), got {gamma}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Vanilla => f.write_str("vanilla"),
            ModelKind::RetNet { gamma } => write!(f, "retnet:{gamma}"),
            ModelKind::GlaBetaOne => f.write_str("gla_beta_one"),
            ModelKind::General => f.write_str("general"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = GlaError;

    /// Accepts `vanilla`, `retnet:<gamma>`, `gla_beta_one`, `general`.
    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim() {
            "vanilla" => ModelKind::Vanilla,
            "gla_beta_one" => ModelKind::GlaBetaOne,
            "general" => ModelKind::General,
            other => {
                let gamma = other
                    .strip_prefix("retnet:")
                    .ok_or_else(|| GlaError::InvalidConfig(format!("unknown model kind {other:?}")))?;
                let gamma = gamma
                    .parse::<f64>()
                    .map_err(|e| GlaError::InvalidConfig(format!("retnet gamma {gamma:?}: {e}")))?;
                ModelKind::RetNet { gamma }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// SplitMix64 stream with the documented `[lo, hi)` mapping.
pub struct SeededStream(SplitMix64);

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        SeededStream(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn tensor(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> SeqTensor {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        SeqTensor::new(rows, cols, data).expect("finite draws")
    }

    /// Log-gates uniform in `(ln floor, 0]`.
    pub fn log_gates(&mut self, rows: usize, cols: usize, floor: f64) -> SeqTensor {
        let ln_floor = floor.ln();
        let data = (0..rows * cols).map(|_| ln_floor * self.next_unit()).collect();
        SeqTensor::new(rows, cols, data).expect("finite draws")
    }
}

pub fn make_instance(
    kind: ModelKind,
    len: usize,
    dk: usize,
    dv: usize,
    seed: u64,
    gate_floor: f64,
) -> Result<GlaInstance> {
    kind.validate()?;
    if len == 0 || dk == 0 || dv == 0 {
        return Err(GlaError::InvalidConfig(format!(
            "dimensions must be >= 1 (L={len}, dk={dk}, dv={dv})"
        )));
    }
    if !(gate_floor > 0.0 && gate_floor <= 1.0) {
        return Err(GlaError::InvalidConfig(format!(
            "gate_floor must lie in (0, 1], got {gate_floor}"
        )));
    }
    let mut rng = SeededStream::new(seed);
    let q = rng.tensor(len, dk, -1.0, 1.0);
    let k = rng.tensor(len, dk, -1.0, 1.0);
    let v = rng.tensor(len, dv, -1.0, 1.0);
    let (log_alpha, log_beta) = match kind {
        ModelKind::Vanilla => (SeqTensor::zeros(len, dk), SeqTensor::zeros(len, dv)),
        ModelKind::RetNet { gamma } => (SeqTensor::filled(len, dk, gamma.ln())?, SeqTensor::zeros(len, dv)),
        ModelKind::GlaBetaOne => (rng.log_gates(len, dk, gate_floor), SeqTensor::zeros(len, dv)),
        ModelKind::General => {
            let a = rng.log_gates(len, dk, gate_floor);
            (a, rng.log_gates(len, dv, gate_floor))
        }
    };
    GlaInstance::new(q, k, v, GateSeq::new(log_alpha, log_beta)?)
}

/// Cotangent `dO` in `[-1, 1)` from a stream independent of the instance's.
pub fn make_cotangent(len: usize, dv: usize, seed: u64) -> SeqTensor {
    SeededStream::new(seed ^ 0xC0DE_C0DE_C0DE_C0DE).tensor(len, dv, -1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::cumulative_log_decay;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0.
        let mut s = SeededStream::new(0);
        assert_eq!(s.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(s.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn vanilla_has_zero_decay() {
        for seed in [0, 1, 99] {
            let inst = make_instance(ModelKind::Vanilla, 6, 2, 3, seed, 0.5).unwrap();
            let cd = cumulative_log_decay(inst.gates());
            assert_eq!(cd.log_b().max_abs(), 0.0);
            assert_eq!(cd.log_d().max_abs(), 0.0);
        }
    }

    #[test]
    fn retnet_decay_is_geometric() {
        let inst = make_instance(ModelKind::RetNet { gamma: 0.9 }, 3, 2, 2, 4, 0.5).unwrap();
        let cd = cumulative_log_decay(inst.gates());
        for (t, want) in [0.9, 0.81, 0.729].into_iter().enumerate() {
            for c in 0..2 {
                assert!((cd.log_b().get(t, c).exp() - want).abs() < 1e-15);
            }
        }
        assert_eq!(cd.log_d().max_abs(), 0.0);
    }

    #[test]
    fn same_seed_same_instance() {
        for kind in [ModelKind::General, ModelKind::GlaBetaOne] {
            let a = make_instance(kind, 9, 3, 2, 7, 0.5).unwrap();
            let b = make_instance(kind, 9, 3, 2, 7, 0.5).unwrap();
            assert_eq!(a, b);
            let c = make_instance(kind, 9, 3, 2, 8, 0.5).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn gates_respect_floor() {
        let inst = make_instance(ModelKind::General, 50, 3, 3, 1, 0.9).unwrap();
        let ln_floor = 0.9f64.ln();
        for x in inst
            .gates()
            .log_alpha()
            .as_slice()
            .iter()
            .chain(inst.gates().log_beta().as_slice())
        {
            assert!(*x <= 0.0 && *x > ln_floor);
        }
        let g1 = make_instance(ModelKind::GlaBetaOne, 5, 2, 2, 1, 0.5).unwrap();
        assert_eq!(g1.gates().log_beta().max_abs(), 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_instance(ModelKind::RetNet { gamma: 1.0 }, 3, 1, 1, 0, 0.5).is_err());
        assert!(make_instance(ModelKind::General, 3, 1, 1, 0, 0.0).is_err());
        assert!(make_instance(ModelKind::General, 3, 1, 1, 0, 1.5).is_err());
        assert!(make_instance(ModelKind::General, 0, 1, 1, 0, 0.5).is_err());
    }

    #[test]
    fn kind_text_round_trip() {
        for k in [
            ModelKind::Vanilla,
            ModelKind::RetNet { gamma: 0.9 },
            ModelKind::GlaBetaOne,
            ModelKind::General,
        ] {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        assert!("retnet:1.2".parse::<ModelKind>().is_err());
        assert!("softmax".parse::<ModelKind>().is_err());
    }
}
