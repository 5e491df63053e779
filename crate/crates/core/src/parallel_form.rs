//! Quadratic parallel form.
//!
//! Queries are scaled by the cumulative key decay `b_t`, keys and values are
//! divided by `b_i` and `d_i`, the causal product is formed, and the result is
//! scaled back by `d_t`:
//!
//! ```text
//! o_t = sum_{i <= t} <q_t * b_t, k_i / b_i> (v_i / d_i) * d_t
//! ```
//!
//! Rescaling by global cumulative products needs `exp(|log b|)` to stay
//! representable, so the form refuses inputs whose log-decay range exceeds a
//! bound. The causal mask is the loop bound `i <= t`.

use crate::cost::CostReport;
use crate::error::{GlaError, Result};
use crate::exec;
use crate::gates::{cumulative_log_decay_counted, CumulativeDecay};
use crate::recurrent::{GlaInstance, GradBundle};
use crate::tensor::{suffix_sum, SeqTensor};

pub const DEFAULT_MAX_EXPONENT: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallelOptions {
    /// Largest `|log b|` / `|log d|` accepted before refusing.
    pub max_exponent: f64,
}

impl Default for ParallelOptions {
    fn default() -> Self {
        ParallelOptions {
            max_exponent: DEFAULT_MAX_EXPONENT,
        }
    }
}

/// Sign convention for the key-decay gradient `dlog_b`.
///
/// `QueryMinusKey` (`q * dq - k * dk`) is the correct one: `b_t` multiplies
/// the query path and `1 / b_i` divides the key path. `KeyMinusQuery` exists
/// only so checks can demonstrate that finite differences reject it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GateGradSign {
    #[default]
    QueryMinusKey,
    KeyMinusQuery,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn scaled(x: &SeqTensor, scale: &[f64]) -> Vec<f64> {
    x.as_slice().iter().zip(scale).map(|(a, b)| a * b).collect()
}

fn exp_all(log: &SeqTensor, sign: f64) -> Vec<f64> {
    log.as_slice().iter().map(|&x| (sign * x).exp()).collect()
}

/// Globally rescaled operands.
struct Rescaled {
    len: usize,
    dk: usize,
    dv: usize,
    d: Vec<f64>,
    b: Vec<f64>,
    b_inv: Vec<f64>,
    d_inv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn rescale(inst: &GlaInstance, opts: ParallelOptions, flops: &mut u64) -> Result<Rescaled> {
    let cd: CumulativeDecay = cumulative_log_decay_counted(inst.gates(), flops);
    let range = cd.dynamic_range();
    if range > opts.max_exponent {
        return Err(GlaError::DecayRange {
            exponent: range,
            bound: opts.max_exponent,
        });
    }
    let (len, dk, dv) = (inst.len(), inst.dk(), inst.dv());
    let b = exp_all(cd.log_b(), 1.0);
    let b_inv = exp_all(cd.log_b(), -1.0);
    let d = exp_all(cd.log_d(), 1.0);
    let d_inv = exp_all(cd.log_d(), -1.0);
    let q = scaled(inst.q(), &b);
    let k = scaled(inst.k(), &b_inv);
    let v = scaled(inst.v(), &d_inv);
    *flops += (2 * len * dk + 2 * len * dv + 2 * len * dk + len * dv) as u64;
    Ok(Rescaled {
        len,
        dk,
        dv,
        d,
        b,
        b_inv,
        d_inv,
        q,
        k,
        v,
    })
}

impl Rescaled {
    fn q(&self, t: usize) -> &[f64] {
        &self.q[t * self.dk..(t + 1) * self.dk]
    }

    fn k(&self, t: usize) -> &[f64] {
        &self.k[t * self.dk..(t + 1) * self.dk]
    }

    fn v(&self, t: usize) -> &[f64] {
        &self.v[t * self.dv..(t + 1) * self.dv]
    }

    fn output(&self) -> Vec<f64> {
        let dv = self.dv;
        let rows = exec::map_indices(self.len, |t| {
            let mut acc = vec![0.0; dv];
            for i in 0..=t {
                axpy(dot(self.q(t), self.k(i)), self.v(i), &mut acc);
            }
            for (a, &dt) in acc.iter_mut().zip(&self.d[t * dv..(t + 1) * dv]) {
                *a *= dt;
            }
            acc
        });
        rows.concat()
    }

    fn output_flops(&self) -> u64 {
        let pairs = self.len * (self.len + 1);
        (pairs * (self.dk + self.dv) + self.len * self.dv) as u64
    }
}

pub fn forward_parallel(inst: &GlaInstance) -> Result<SeqTensor> {
    forward_parallel_with(inst, ParallelOptions::default()).map(|(o, _)| o)
}

pub fn forward_parallel_with(inst: &GlaInstance, opts: ParallelOptions) -> Result<(SeqTensor, CostReport)> {
    let mut flops = 0;
    let r = rescale(inst, opts, &mut flops)?;
    let o = r.output();
    flops += r.output_flops();
    Ok((SeqTensor::new(r.len, r.dv, o)?, CostReport::flops(flops)))
}

/// Gate gradients from the position-wise closed forms
/// `dlog_b = q * dq - k * dk`, `dlog_d = o * do - v * dv`, followed by suffix
/// sums over positions.
pub(crate) struct GateGrads {
    pub dlog_b: SeqTensor,
    pub dlog_d: SeqTensor,
    pub dlog_alpha: SeqTensor,
    pub dlog_beta: SeqTensor,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gate_grads(
    inst: &GlaInstance,
    o: &[f64],
    d_o: &SeqTensor,
    dq: &[f64],
    dk: &[f64],
    dv: &[f64],
    sign: GateGradSign,
    flops: &mut u64,
) -> Result<GateGrads> {
    let (len, kd, vd) = (inst.len(), inst.dk(), inst.dv());
    let q = inst.q().as_slice();
    let k = inst.k().as_slice();
    let v = inst.v().as_slice();
    let dob = d_o.as_slice();
    let dlog_b: Vec<f64> = (0..len * kd)
        .map(|i| match sign {
            GateGradSign::QueryMinusKey => q[i] * dq[i] - k[i] * dk[i],
            GateGradSign::KeyMinusQuery => k[i] * dk[i] - q[i] * dq[i],
        })
        .collect();
    let dlog_d: Vec<f64> = (0..len * vd).map(|i| o[i] * dob[i] - v[i] * dv[i]).collect();
    let dlog_b = SeqTensor::new(len, kd, dlog_b)?;
    let dlog_d = SeqTensor::new(len, vd, dlog_d)?;
    let dlog_alpha = suffix_sum(&dlog_b)?;
    let dlog_beta = suffix_sum(&dlog_d)?;
    *flops += (3 * len * (kd + vd) + (len - 1) * (kd + vd)) as u64;
    Ok(GateGrads {
        dlog_b,
        dlog_d,
        dlog_alpha,
        dlog_beta,
    })
}

pub fn backward_parallel(inst: &GlaInstance, d_o: &SeqTensor) -> Result<GradBundle> {
    backward_parallel_with(inst, d_o, ParallelOptions::default(), GateGradSign::default())
}

pub fn backward_parallel_with(
    inst: &GlaInstance,
    d_o: &SeqTensor,
    opts: ParallelOptions,
    sign: GateGradSign,
) -> Result<GradBundle> {
    inst.check_cotangent(d_o)?;
    let mut flops = 0;
    let r = rescale(inst, opts, &mut flops)?;
    let o = r.output();
    let (len, dk, dv) = (r.len, r.dk, r.dv);

    let do_t: Vec<f64> = d_o.as_slice().iter().zip(&r.d).map(|(a, b)| a * b).collect();
    let dot_row = |t: usize| &do_t[t * dv..(t + 1) * dv];

    // rows: dq_t gathers i <= t
    let dq_rows = exec::map_indices(len, |t| {
        let mut acc = vec![0.0; dk];
        for i in 0..=t {
            axpy(dot(dot_row(t), r.v(i)), r.k(i), &mut acc);
        }
        for (a, &bt) in acc.iter_mut().zip(&r.b[t * dk..(t + 1) * dk]) {
            *a *= bt;
        }
        acc
    });
    // columns: dk_i and dv_i gather t >= i
    let col_rows = exec::map_indices(len, |i| {
        let mut dk_acc = vec![0.0; dk];
        let mut dv_acc = vec![0.0; dv];
        for t in i..len {
            axpy(dot(dot_row(t), r.v(i)), r.q(t), &mut dk_acc);
            axpy(dot(r.q(t), r.k(i)), dot_row(t), &mut dv_acc);
        }
        for (a, &bi) in dk_acc.iter_mut().zip(&r.b_inv[i * dk..(i + 1) * dk]) {
            *a *= bi;
        }
        for (a, &di) in dv_acc.iter_mut().zip(&r.d_inv[i * dv..(i + 1) * dv]) {
            *a *= di;
        }
        (dk_acc, dv_acc)
    });
    let dq = dq_rows.concat();
    let (dk_rows, dv_rows): (Vec<_>, Vec<_>) = col_rows.into_iter().unzip();
    let dkk = dk_rows.concat();
    let dvv = dv_rows.concat();

    let g = gate_grads(inst, &o, d_o, &dq, &dkk, &dvv, sign, &mut flops)?;
    Ok(GradBundle {
        dq: SeqTensor::new(len, dk, dq)?,
        dk: SeqTensor::new(len, dk, dkk)?,
        dv: SeqTensor::new(len, dv, dvv)?,
        dlog_alpha: g.dlog_alpha,
        dlog_beta: g.dlog_beta,
        dlog_b: Some(g.dlog_b),
        dlog_d: Some(g.dlog_d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::GateSeq;
    use crate::recurrent::{backward_recurrent_exact, forward_recurrent};

    fn lcg(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(17);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect()
    }

    fn instance(seed: u64, len: usize, dk: usize, dv: usize, floor: f64) -> GlaInstance {
        let t = |s, r, c, lo, hi| SeqTensor::new(r, c, lcg(s, r * c, lo, hi)).unwrap();
        GlaInstance::new(
            t(seed, len, dk, -1.0, 1.0),
            t(seed + 1, len, dk, -1.0, 1.0),
            t(seed + 2, len, dv, -1.0, 1.0),
            GateSeq::new(
                t(seed + 3, len, dk, floor.ln(), 0.0),
                t(seed + 4, len, dv, floor.ln(), 0.0),
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn rel(a: &SeqTensor, b: &SeqTensor) -> f64 {
        a.sub(b).unwrap().max_abs() / a.max_abs().max(b.max_abs()).max(1e-8)
    }

    #[test]
    fn matches_recurrence() {
        for seed in 0..5 {
            let inst = instance(seed * 10, 32, 4, 4, 0.5);
            let want = forward_recurrent(&inst, false).o;
            let got = forward_parallel(&inst).unwrap();
            assert!(rel(&got, &want) <= 1e-9, "seed {seed}: {:e}", rel(&got, &want));
        }
    }

    #[test]
    fn single_step() {
        let inst = instance(3, 1, 3, 2, 0.5);
        let o = forward_parallel(&inst).unwrap();
        let qk = dot(inst.q().row(0), inst.k().row(0));
        for j in 0..2 {
            assert!((o.get(0, j) - qk * inst.v().get(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn guard_trips_on_wide_decay_range() {
        let len = 1000;
        let inst = GlaInstance::new(
            SeqTensor::zeros(len, 1),
            SeqTensor::zeros(len, 1),
            SeqTensor::zeros(len, 1),
            GateSeq::new(
                SeqTensor::filled(len, 1, 0.5f64.ln()).unwrap(),
                SeqTensor::zeros(len, 1),
            )
            .unwrap(),
        )
        .unwrap();
        let err = forward_parallel(&inst).unwrap_err();
        assert!(err.to_string().contains("use chunkwise"), "{err}");
        let loose = ParallelOptions { max_exponent: 700.0 };
        assert!(forward_parallel_with(&inst, loose).is_ok());
    }

    #[test]
    fn counted_flops_match_prediction() {
        let inst = instance(1, 9, 3, 2, 0.5);
        let (_, cost) = forward_parallel_with(&inst, ParallelOptions::default()).unwrap();
        assert_eq!(cost, crate::cost::predict_parallel_cost(9, 3, 2));
    }

    #[test]
    fn closed_form_matches_exact_reverse_mode() {
        let inst = instance(77, 8, 3, 3, 0.5);
        let d_o = SeqTensor::new(8, 3, lcg(5, 24, -1.0, 1.0)).unwrap();
        let closed = backward_parallel(&inst, &d_o).unwrap();
        let exact = backward_recurrent_exact(&inst, &d_o).unwrap();
        for ((name, a), (_, b)) in closed.tensors().into_iter().zip(exact.tensors()) {
            assert!(rel(a, b) <= 1e-10, "{name}: {:e}", rel(a, b));
        }
    }

    #[test]
    fn returned_dlog_b_is_the_definitional_identity() {
        let inst = instance(8, 6, 2, 3, 0.5);
        let d_o = SeqTensor::new(6, 3, lcg(9, 18, -1.0, 1.0)).unwrap();
        let g = backward_parallel(&inst, &d_o).unwrap();
        let dlog_b = g.dlog_b.as_ref().unwrap();
        for t in 0..6 {
            for c in 0..2 {
                let want = inst.q().get(t, c) * g.dq.get(t, c) - inst.k().get(t, c) * g.dk.get(t, c);
                assert_eq!(dlog_b.get(t, c), want);
            }
        }
        let o = forward_parallel(&inst).unwrap();
        let dlog_d = g.dlog_d.as_ref().unwrap();
        for t in 0..6 {
            for c in 0..3 {
                let want = o.get(t, c) * d_o.get(t, c) - inst.v().get(t, c) * g.dv.get(t, c);
                assert_eq!(dlog_d.get(t, c), want);
            }
        }
    }

    #[test]
    fn flipped_sign_disagrees_with_reverse_mode() {
        let inst = instance(12, 6, 2, 2, 0.5);
        let d_o = SeqTensor::new(6, 2, lcg(2, 12, -1.0, 1.0)).unwrap();
        let flipped = backward_parallel_with(
            &inst,
            &d_o,
            ParallelOptions::default(),
            GateGradSign::KeyMinusQuery,
        )
        .unwrap();
        let exact = backward_recurrent_exact(&inst, &d_o).unwrap();
        assert!(rel(&flipped.dlog_alpha, &exact.dlog_alpha) > 1e-3);
        assert!(rel(&flipped.dlog_beta, &exact.dlog_beta) <= 1e-10);
    }

    #[test]
    fn value_gradient_ignores_earlier_cotangent_rows() {
        let inst = instance(4, 7, 2, 2, 0.5);
        let d_o = SeqTensor::new(7, 2, lcg(1, 14, -1.0, 1.0)).unwrap();
        let base = backward_parallel(&inst, &d_o).unwrap();
        let changed = d_o.with_element(1, 0, 5.0).unwrap();
        let g = backward_parallel(&inst, &changed).unwrap();
        assert_eq!(g.dv.rows_slice(2, 7), base.dv.rows_slice(2, 7));
    }

    #[test]
    fn zero_cotangent() {
        let inst = instance(6, 5, 2, 2, 0.5);
        let g = backward_parallel(&inst, &SeqTensor::zeros(5, 2)).unwrap();
        for (_, x) in g.tensors() {
            assert_eq!(x.max_abs(), 0.0);
        }
    }
}
