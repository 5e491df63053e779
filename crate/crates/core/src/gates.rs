//! Log-space gates and the decay factors derived from them.
//!
//! Gates `alpha` (key side) and `beta` (value side) live in `(0, 1]` and are
//! stored as their logarithms. Cumulative products become prefix sums, and
//! every ratio of cumulative products is formed as `exp` of a difference of
//! prefix sums, never as a quotient of two products.

use crate::error::{GlaError, Result};
use crate::tensor::{fmt_shape, SeqTensor};

/// Per-position log-gates: `log_alpha` is `L x dk`, `log_beta` is `L x dv`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSeq {
    log_alpha: SeqTensor,
    log_beta: SeqTensor,
}

fn check_nonpositive(t: &SeqTensor) -> Result<()> {
    for r in 0..t.rows() {
        for (c, &value) in t.row(r).iter().enumerate() {
            if value > 0.0 {
                return Err(GlaError::GateAboveOne {
                    row: r,
                    col: c,
                    value,
                });
            }
        }
    }
    Ok(())
}

impl GateSeq {
    pub fn new(log_alpha: SeqTensor, log_beta: SeqTensor) -> Result<Self> {
        if log_alpha.rows() != log_beta.rows() {
            return Err(GlaError::shape(
                "GateSeq::new",
                format!("{} rows in log_beta", log_alpha.rows()),
                log_beta.rows(),
            ));
        }
        check_nonpositive(&log_alpha)?;
        check_nonpositive(&log_beta)?;
        Ok(GateSeq { log_alpha, log_beta })
    }

    /// All gates equal to one.
    pub fn ones(len: usize, dk: usize, dv: usize) -> Self {
        GateSeq {
            log_alpha: SeqTensor::zeros(len, dk),
            log_beta: SeqTensor::zeros(len, dv),
        }
    }

    pub fn len(&self) -> usize {
        self.log_alpha.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dk(&self) -> usize {
        self.log_alpha.cols()
    }

    pub fn dv(&self) -> usize {
        self.log_beta.cols()
    }

    pub fn log_alpha(&self) -> &SeqTensor {
        &self.log_alpha
    }

    pub fn log_beta(&self) -> &SeqTensor {
        &self.log_beta
    }
}

/// Running log-products `log_b[t] = sum_{j <= t} log_alpha[j]` and the same
/// for `log_d` over `log_beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeDecay {
    log_b: SeqTensor,
    log_d: SeqTensor,
}

impl CumulativeDecay {
    pub fn log_b(&self) -> &SeqTensor {
        &self.log_b
    }

    pub fn log_d(&self) -> &SeqTensor {
        &self.log_d
    }

    pub fn len(&self) -> usize {
        self.log_b.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest `|log_b|` or `|log_d|` entry: the exponent range of the
    /// globally rescaled (parallel) form.
    pub fn dynamic_range(&self) -> f64 {
        self.log_b.max_abs().max(self.log_d.max_abs())
    }
}

fn prefix_sum(x: &SeqTensor, flops: &mut u64) -> SeqTensor {
    let c = x.cols();
    let mut out = vec![0.0; x.rows() * c];
    let mut acc = vec![0.0; c];
    for t in 0..x.rows() {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += x.get(t, j);
        }
        out[t * c..(t + 1) * c].copy_from_slice(&acc);
    }
    *flops += (x.rows() * c) as u64;
    SeqTensor::from_vec_unchecked(x.rows(), c, out)
}

pub(crate) fn cumulative_log_decay_counted(g: &GateSeq, flops: &mut u64) -> CumulativeDecay {
    CumulativeDecay {
        log_b: prefix_sum(&g.log_alpha, flops),
        log_d: prefix_sum(&g.log_beta, flops),
    }
}

pub fn cumulative_log_decay(g: &GateSeq) -> CumulativeDecay {
    let mut flops = 0;
    cumulative_log_decay_counted(g, &mut flops)
}

/// Contiguous partition of `[0, len)` into chunks of nominal length `chunk`;
/// the final chunk may be shorter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    len: usize,
    chunk: usize,
    boundaries: Vec<(usize, usize)>,
}

impl ChunkPlan {
    pub fn new(len: usize, chunk: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(GlaError::InvalidConfig("chunk length must be >= 1".into()));
        }
        if len == 0 {
            return Err(GlaError::Empty("ChunkPlan::new"));
        }
        let boundaries = (0..len)
            .step_by(chunk)
            .map(|s| (s, (s + chunk).min(len)))
            .collect();
        Ok(ChunkPlan {
            len,
            chunk,
            boundaries,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    pub fn num_chunks(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }
}

/// Chunk-relative decay factors for chunk `[start, end)`.
///
/// With `log_b[start - 1]` taken as `0` for the first chunk:
/// - `b_dagger[j] = exp(log_b[start + j] - log_b[start - 1])`, decay since the chunk began;
/// - `b_prime[j]  = exp(log_b[end - 1] - log_b[start + j])`, decay until the chunk's last position;
/// - `gamma_b     = exp(log_b[end - 1] - log_b[start - 1])`, decay across the whole chunk.
///
/// `b_prime[j] * b_dagger[j] == gamma_b` up to rounding. The `d` factors are
/// the same construction over `log_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDecays {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub b_prime: SeqTensor,
    pub b_dagger: SeqTensor,
    pub d_prime: SeqTensor,
    pub d_dagger: SeqTensor,
    pub gamma_b: Vec<f64>,
    pub gamma_d: Vec<f64>,
}

impl ChunkDecays {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Dagger, prime and whole-chunk factors for one side (keys or values).
struct Side {
    dagger: Vec<f64>,
    prime: Vec<f64>,
    gamma: Vec<f64>,
}

fn side(log: &SeqTensor, start: usize, end: usize, flops: &mut u64) -> Side {
    let c = log.cols();
    let n = end - start;
    let zeros = vec![0.0; c];
    let base = if start == 0 {
        &zeros[..]
    } else {
        log.row(start - 1)
    };
    let last = log.row(end - 1);
    let mut dagger = Vec::with_capacity(n * c);
    let mut prime = Vec::with_capacity(n * c);
    for t in start..end {
        let row = log.row(t);
        dagger.extend(row.iter().zip(base).map(|(&x, &b)| (x - b).exp()));
        prime.extend(last.iter().zip(row).map(|(&e, &x)| (e - x).exp()));
    }
    let gamma = last.iter().zip(base).map(|(&e, &b)| (e - b).exp()).collect();
    // one subtraction and one exp per factor
    *flops += (2 * (2 * n * c + c)) as u64;
    Side { dagger, prime, gamma }
}

pub(crate) fn chunk_decays_counted(
    cd: &CumulativeDecay,
    index: usize,
    (start, end): (usize, usize),
    flops: &mut u64,
) -> ChunkDecays {
    let n = end - start;
    let b = side(&cd.log_b, start, end, flops);
    let d = side(&cd.log_d, start, end, flops);
    ChunkDecays {
        index,
        start,
        end,
        b_prime: SeqTensor::from_vec_unchecked(n, cd.log_b.cols(), b.prime),
        b_dagger: SeqTensor::from_vec_unchecked(n, cd.log_b.cols(), b.dagger),
        d_prime: SeqTensor::from_vec_unchecked(n, cd.log_d.cols(), d.prime),
        d_dagger: SeqTensor::from_vec_unchecked(n, cd.log_d.cols(), d.dagger),
        gamma_b: b.gamma,
        gamma_d: d.gamma,
    }
}

pub fn chunk_relative_decays(cd: &CumulativeDecay, plan: &ChunkPlan) -> Result<Vec<ChunkDecays>> {
    if plan.len() != cd.len() {
        return Err(GlaError::PlanMismatch {
            plan: plan.len(),
            seq: cd.len(),
        });
    }
    let mut flops = 0;
    Ok(plan
        .boundaries()
        .iter()
        .enumerate()
        .map(|(i, &bounds)| chunk_decays_counted(cd, i, bounds, &mut flops))
        .collect())
}

pub(crate) fn check_gate_dims(g: &GateSeq, len: usize, dk: usize, dv: usize) -> Result<()> {
    let want = (len, dk, dv);
    let got = (g.len(), g.dk(), g.dv());
    if want != got {
        return Err(GlaError::shape(
            "gates",
            format!(
                "log_alpha {}, log_beta {}",
                fmt_shape((len, dk)),
                fmt_shape((len, dv))
            ),
            format!(
                "log_alpha {}, log_beta {}",
                fmt_shape(g.log_alpha.shape()),
                fmt_shape(g.log_beta.shape())
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gates_from(alpha: &[f64], dk: usize, beta: &[f64], dv: usize) -> GateSeq {
        let len = alpha.len() / dk;
        GateSeq::new(
            SeqTensor::new(len, dk, alpha.iter().map(|a| a.ln()).collect()).unwrap(),
            SeqTensor::new(len, dv, beta.iter().map(|b| b.ln()).collect()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_gates_give_zero_log_decay() {
        let cd = cumulative_log_decay(&GateSeq::ones(5, 3, 2));
        assert!(cd.log_b().as_slice().iter().all(|&x| x == 0.0));
        assert!(cd.log_d().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn halving_gates_accumulate() {
        let g = gates_from(&[0.5, 0.5, 0.5], 1, &[1.0, 1.0, 1.0], 1);
        let cd = cumulative_log_decay(&g);
        let ln_half = 0.5f64.ln();
        assert_eq!(cd.log_b().as_slice(), &[ln_half, 2.0 * ln_half, 3.0 * ln_half]);
        let b: Vec<f64> = cd.log_b().as_slice().iter().map(|x| x.exp()).collect();
        for (got, want) in b.iter().zip([0.5, 0.25, 0.125]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_gates_above_one() {
        let la = SeqTensor::new(1, 1, vec![1e-3]).unwrap();
        let lb = SeqTensor::zeros(1, 1);
        assert!(matches!(GateSeq::new(la, lb), Err(GlaError::GateAboveOne { .. })));
    }

    #[test]
    fn plan_shapes() {
        let p = ChunkPlan::new(8, 3).unwrap();
        assert_eq!(p.boundaries(), &[(0, 3), (3, 6), (6, 8)]);
        assert_eq!(ChunkPlan::new(5, 9).unwrap().num_chunks(), 1);
        assert_eq!(ChunkPlan::new(5, 1).unwrap().num_chunks(), 5);
        assert!(ChunkPlan::new(5, 0).is_err());
    }

    #[test]
    fn identity_gates_give_unit_factors() {
        let cd = cumulative_log_decay(&GateSeq::ones(7, 2, 3));
        for ch in chunk_relative_decays(&cd, &ChunkPlan::new(7, 3).unwrap()).unwrap() {
            for t in [&ch.b_prime, &ch.b_dagger, &ch.d_prime, &ch.d_dagger] {
                assert!(t.as_slice().iter().all(|&x| x == 1.0));
            }
            assert!(ch.gamma_b.iter().chain(&ch.gamma_d).all(|&x| x == 1.0));
        }
    }

    #[test]
    fn constant_gate_two_step_chunk() {
        // log_b = (ln g, 2 ln g): dagger = (g, g^2), prime = (g, 1), gamma = g^2.
        let gamma: f64 = 0.7;
        let g = gates_from(&[gamma, gamma], 1, &[1.0, 1.0], 1);
        let cd = cumulative_log_decay(&g);
        let ch = &chunk_relative_decays(&cd, &ChunkPlan::new(2, 2).unwrap()).unwrap()[0];
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(ch.b_dagger.get(0, 0), gamma));
        assert!(close(ch.b_dagger.get(1, 0), gamma * gamma));
        assert!(close(ch.b_prime.get(0, 0), gamma));
        assert!(close(ch.b_prime.get(1, 0), 1.0));
        assert!(close(ch.gamma_b[0], gamma * gamma));
    }

    #[test]
    fn plan_length_mismatch() {
        let cd = cumulative_log_decay(&GateSeq::ones(4, 1, 1));
        assert!(matches!(
            chunk_relative_decays(&cd, &ChunkPlan::new(5, 2).unwrap()),
            Err(GlaError::PlanMismatch { .. })
        ));
    }

    fn arb_gates() -> impl Strategy<Value = GateSeq> {
        (1usize..24, 1usize..4, 1usize..4).prop_flat_map(|(len, dk, dv)| {
            (
                proptest::collection::vec(0.5f64.ln()..=0.0, len * dk),
                proptest::collection::vec(0.5f64.ln()..=0.0, len * dv),
            )
                .prop_map(move |(a, b)| {
                    GateSeq::new(
                        SeqTensor::new(len, dk, a).unwrap(),
                        SeqTensor::new(len, dv, b).unwrap(),
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn telescoping_recovers_gates(g in arb_gates()) {
            let cd = cumulative_log_decay(&g);
            for t in 0..g.len() {
                for c in 0..g.dk() {
                    let prev = if t == 0 { 0.0 } else { cd.log_b().get(t - 1, c) };
                    let ratio = (cd.log_b().get(t, c) - prev).exp();
                    prop_assert!((ratio - g.log_alpha().get(t, c).exp()).abs() <= 1e-14);
                    if t > 0 {
                        prop_assert!(cd.log_b().get(t, c) <= prev);
                    }
                }
            }
            prop_assert_eq!(cd.log_b().row(0), g.log_alpha().row(0));
            prop_assert_eq!(cd.log_d().row(0), g.log_beta().row(0));
        }

        #[test]
        fn chunk_factors_span_the_chunk(g in arb_gates(), chunk in 1usize..9) {
            let cd = cumulative_log_decay(&g);
            let plan = ChunkPlan::new(g.len(), chunk).unwrap();
            for ch in chunk_relative_decays(&cd, &plan).unwrap() {
                for j in 0..ch.len() {
                    for c in 0..g.dk() {
                        let p = ch.b_prime.get(j, c) * ch.b_dagger.get(j, c);
                        prop_assert!((p - ch.gamma_b[c]).abs() <= 1e-12);
                    }
                    for c in 0..g.dv() {
                        let p = ch.d_prime.get(j, c) * ch.d_dagger.get(j, c);
                        prop_assert!((p - ch.gamma_d[c]).abs() <= 1e-12);
                    }
                }
                for t in [&ch.b_prime, &ch.b_dagger, &ch.d_prime, &ch.d_dagger] {
                    prop_assert!(t.as_slice().iter().all(|&x| x > 0.0 && x <= 1.0 + 1e-15));
                }
            }
        }
    }
}
