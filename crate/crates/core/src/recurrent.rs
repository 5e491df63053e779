//! Step-by-step recurrence, its exact reverse pass, and the central
//! finite-difference gradient. This is the reference every other form is
//! checked against.
//!
//! ```text
//! S_0 = 0
//! S_t = (alpha_t^T beta_t) * S_{t-1} + k_t^T v_t
//! o_t = q_t S_t
//! ```
//!
//! Gradients are of the scalar loss `sum(O * dO)` for a caller-supplied
//! cotangent `dO`.

use crate::cost::{predict_recurrent_cost, CostReport};
use crate::error::{GlaError, Result};
use crate::exec;
use crate::gates::{check_gate_dims, GateSeq};
use crate::tensor::{fmt_shape, SeqTensor, State};

/// Inputs to one attention evaluation: `q`, `k` are `L x dk`, `v` is
/// `L x dv`, gates match.
#[derive(Debug, Clone, PartialEq)]
pub struct GlaInstance {
    q: SeqTensor,
    k: SeqTensor,
    v: SeqTensor,
    gates: GateSeq,
}

impl GlaInstance {
    pub fn new(q: SeqTensor, k: SeqTensor, v: SeqTensor, gates: GateSeq) -> Result<Self> {
        let len = q.rows();
        if len == 0 {
            return Err(GlaError::Empty("GlaInstance::new"));
        }
        if k.shape() != q.shape() {
            return Err(GlaError::shape(
                "GlaInstance k",
                fmt_shape(q.shape()),
                fmt_shape(k.shape()),
            ));
        }
        if v.rows() != len {
            return Err(GlaError::shape("GlaInstance v rows", len, v.rows()));
        }
        check_gate_dims(&gates, len, q.cols(), v.cols())?;
        Ok(GlaInstance { q, k, v, gates })
    }

    pub fn q(&self) -> &SeqTensor {
        &self.q
    }

    pub fn k(&self) -> &SeqTensor {
        &self.k
    }

    pub fn v(&self) -> &SeqTensor {
        &self.v
    }

    pub fn gates(&self) -> &GateSeq {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dk(&self) -> usize {
        self.q.cols()
    }

    pub fn dv(&self) -> usize {
        self.v.cols()
    }

    pub(crate) fn check_cotangent(&self, d_o: &SeqTensor) -> Result<()> {
        if d_o.shape() != (self.len(), self.dv()) {
            return Err(GlaError::shape(
                "cotangent",
                fmt_shape((self.len(), self.dv())),
                fmt_shape(d_o.shape()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub o: SeqTensor,
    /// `S_1 ..= S_L` when requested.
    pub states: Option<Vec<State>>,
    pub cost: CostReport,
}

/// Gradients of `sum(O * dO)`. The closed-form passes also return the
/// per-position log-cumulative-decay gradients they suffix-sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub dq: SeqTensor,
    pub dk: SeqTensor,
    pub dv: SeqTensor,
    pub dlog_alpha: SeqTensor,
    pub dlog_beta: SeqTensor,
    pub dlog_b: Option<SeqTensor>,
    pub dlog_d: Option<SeqTensor>,
}

impl GradBundle {
    /// `(name, tensor)` pairs in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &SeqTensor); 5] {
        [
            ("dQ", &self.dq),
            ("dK", &self.dk),
            ("dV", &self.dv),
            ("dlog_alpha", &self.dlog_alpha),
            ("dlog_beta", &self.dlog_beta),
        ]
    }
}

/// Borrowed raw inputs; log-gates are unchecked so finite-difference probes
/// may step slightly past zero.
#[derive(Clone, Copy)]
struct Raw<'a> {
    len: usize,
    dk: usize,
    dv: usize,
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    log_alpha: &'a [f64],
    log_beta: &'a [f64],
}

impl<'a> Raw<'a> {
    fn of(inst: &'a GlaInstance) -> Self {
        Raw {
            len: inst.len(),
            dk: inst.dk(),
            dv: inst.dv(),
            q: inst.q.as_slice(),
            k: inst.k.as_slice(),
            v: inst.v.as_slice(),
            log_alpha: inst.gates.log_alpha().as_slice(),
            log_beta: inst.gates.log_beta().as_slice(),
        }
    }
}

/// Forms `G_t = alpha_t^T beta_t` into `g`.
fn decay_matrix(raw: &Raw, t: usize, alpha: &mut [f64], beta: &mut [f64], g: &mut [f64]) {
    let (dk, dv) = (raw.dk, raw.dv);
    for (a, &la) in alpha.iter_mut().zip(&raw.log_alpha[t * dk..(t + 1) * dk]) {
        *a = la.exp();
    }
    for (b, &lb) in beta.iter_mut().zip(&raw.log_beta[t * dv..(t + 1) * dv]) {
        *b = lb.exp();
    }
    for i in 0..dk {
        for j in 0..dv {
            g[i * dv + j] = alpha[i] * beta[j];
        }
    }
}

/// Runs the recurrence, handing each `(t, S_t)` to `visit`.
fn run(raw: &Raw, mut visit: impl FnMut(usize, &[f64])) -> Vec<f64> {
    let (dk, dv) = (raw.dk, raw.dv);
    let mut s = vec![0.0; dk * dv];
    let mut g = vec![0.0; dk * dv];
    let mut alpha = vec![0.0; dk];
    let mut beta = vec![0.0; dv];
    let mut out = vec![0.0; raw.len * dv];
    for t in 0..raw.len {
        decay_matrix(raw, t, &mut alpha, &mut beta, &mut g);
        let kt = &raw.k[t * dk..(t + 1) * dk];
        let vt = &raw.v[t * dv..(t + 1) * dv];
        for i in 0..dk {
            for j in 0..dv {
                let idx = i * dv + j;
                s[idx] = g[idx] * s[idx] + kt[i] * vt[j];
            }
        }
        let qt = &raw.q[t * dk..(t + 1) * dk];
        let ot = &mut out[t * dv..(t + 1) * dv];
        for i in 0..dk {
            for (o, &sij) in ot.iter_mut().zip(&s[i * dv..(i + 1) * dv]) {
                *o += qt[i] * sij;
            }
        }
        visit(t, &s);
    }
    out
}

fn loss(raw: &Raw, d_o: &[f64]) -> f64 {
    run(raw, |_, _| {}).iter().zip(d_o).map(|(o, g)| o * g).sum()
}

pub fn forward_recurrent(inst: &GlaInstance, keep_states: bool) -> ForwardTrace {
    let raw = Raw::of(inst);
    let mut states = keep_states.then(|| Vec::with_capacity(raw.len));
    let o = run(&raw, |_, s| {
        if let Some(st) = states.as_mut() {
            st.push(State::from_vec_unchecked(raw.dk, raw.dv, s.to_vec()));
        }
    });
    ForwardTrace {
        o: SeqTensor::from_vec_unchecked(raw.len, raw.dv, o),
        states,
        cost: predict_recurrent_cost(raw.len, raw.dk, raw.dv),
    }
}

/// Exact reverse-mode gradient through the stored-state recurrence.
pub fn backward_recurrent_exact(inst: &GlaInstance, d_o: &SeqTensor) -> Result<GradBundle> {
    inst.check_cotangent(d_o)?;
    let raw = Raw::of(inst);
    let (len, dk, dv) = (raw.len, raw.dk, raw.dv);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(len);
    run(&raw, |_, s| states.push(s.to_vec()));

    let mut dq = vec![0.0; len * dk];
    let mut dkk = vec![0.0; len * dk];
    let mut dvv = vec![0.0; len * dv];
    let mut dla = vec![0.0; len * dk];
    let mut dlb = vec![0.0; len * dv];

    let zero = vec![0.0; dk * dv];
    let mut ds = vec![0.0; dk * dv];
    let mut g_next = vec![0.0; dk * dv];
    let mut g = vec![0.0; dk * dv];
    let mut alpha = vec![0.0; dk];
    let mut beta = vec![0.0; dv];
    let d_o = d_o.as_slice();

    for t in (0..len).rev() {
        let qt = &raw.q[t * dk..(t + 1) * dk];
        let kt = &raw.k[t * dk..(t + 1) * dk];
        let vt = &raw.v[t * dv..(t + 1) * dv];
        let dot = &d_o[t * dv..(t + 1) * dv];
        let s_t = &states[t];
        let s_prev = if t == 0 { &zero } else { &states[t - 1] };

        // dS_t = G_{t+1} * dS_{t+1} + q_t^T do_t
        for i in 0..dk {
            for j in 0..dv {
                let idx = i * dv + j;
                let carried = if t + 1 < len { g_next[idx] * ds[idx] } else { 0.0 };
                ds[idx] = carried + qt[i] * dot[j];
            }
        }
        for i in 0..dk {
            dq[t * dk + i] = (0..dv).map(|j| s_t[i * dv + j] * dot[j]).sum();
            dkk[t * dk + i] = (0..dv).map(|j| ds[i * dv + j] * vt[j]).sum();
        }
        for j in 0..dv {
            dvv[t * dv + j] = (0..dk).map(|i| kt[i] * ds[i * dv + j]).sum();
        }
        // d log G_t[i][j] = G_t[i][j] * S_{t-1}[i][j] * dS_t[i][j], then
        // log G = log alpha_i + log beta_j fans out to rows and columns.
        decay_matrix(&raw, t, &mut alpha, &mut beta, &mut g);
        for i in 0..dk {
            for j in 0..dv {
                let idx = i * dv + j;
                let dlog_g = g[idx] * s_prev[idx] * ds[idx];
                dla[t * dk + i] += dlog_g;
                dlb[t * dv + j] += dlog_g;
            }
        }
        std::mem::swap(&mut g_next, &mut g);
    }

    Ok(GradBundle {
        dq: SeqTensor::new(len, dk, dq)?,
        dk: SeqTensor::new(len, dk, dkk)?,
        dv: SeqTensor::new(len, dv, dvv)?,
        dlog_alpha: SeqTensor::new(len, dk, dla)?,
        dlog_beta: SeqTensor::new(len, dv, dlb)?,
        dlog_b: None,
        dlog_d: None,
    })
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central finite differences of `sum(O * dO)`, one scalar at a time.
/// Log-gates are perturbed directly, so no chain-rule conversion is involved.
pub fn backward_recurrent_fd(inst: &GlaInstance, d_o: &SeqTensor, eps: f64) -> Result<GradBundle> {
    inst.check_cotangent(d_o)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(GlaError::InvalidConfig(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let base = Raw::of(inst);
    let d_o = d_o.as_slice();

    let probe = |which: usize| {
        let src: &[f64] = match which {
            0 => base.q,
            1 => base.k,
            2 => base.v,
            3 => base.log_alpha,
            _ => base.log_beta,
        };
        exec::map_indices(src.len(), |idx| {
            let mut plus = src.to_vec();
            let mut minus = src.to_vec();
            plus[idx] += eps;
            minus[idx] -= eps;
            let eval = |buf: &[f64]| {
                let mut raw = base;
                match which {
                    0 => raw.q = buf,
                    1 => raw.k = buf,
                    2 => raw.v = buf,
                    3 => raw.log_alpha = buf,
                    _ => raw.log_beta = buf,
                }
                loss(&raw, d_o)
            };
            (eval(&plus) - eval(&minus)) / (2.0 * eps)
        })
    };

    let (len, dk, dv) = (base.len, base.dk, base.dv);
    Ok(GradBundle {
        dq: SeqTensor::new(len, dk, probe(0))?,
        dk: SeqTensor::new(len, dk, probe(1))?,
        dv: SeqTensor::new(len, dv, probe(2))?,
        dlog_alpha: SeqTensor::new(len, dk, probe(3))?,
        dlog_beta: SeqTensor::new(len, dv, probe(4))?,
        dlog_b: None,
        dlog_d: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    fn t(rows: usize, cols: usize, data: &[f64]) -> SeqTensor {
        SeqTensor::new(rows, cols, data.to_vec()).unwrap()
    }

    fn lcg(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect()
    }

    fn random_instance(seed: u64, len: usize, dk: usize, dv: usize) -> GlaInstance {
        let ln_half = 0.5f64.ln();
        GlaInstance::new(
            t(len, dk, &lcg(seed, len * dk, -1.0, 1.0)),
            t(len, dk, &lcg(seed + 1, len * dk, -1.0, 1.0)),
            t(len, dv, &lcg(seed + 2, len * dv, -1.0, 1.0)),
            GateSeq::new(
                t(len, dk, &lcg(seed + 3, len * dk, ln_half, 0.0)),
                t(len, dv, &lcg(seed + 4, len * dv, ln_half, 0.0)),
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn max_rel(a: &SeqTensor, b: &SeqTensor) -> f64 {
        let diff = a.sub(b).unwrap().max_abs();
        diff / a.max_abs().max(b.max_abs()).max(1e-8)
    }

    #[test]
    fn single_step_output() {
        let q = t(1, 2, &[0.5, -1.0]);
        let k = t(1, 2, &[2.0, 3.0]);
        let v = t(1, 3, &[1.0, 2.0, -1.0]);
        let gates = GateSeq::new(t(1, 2, &[-0.3, -0.1]), t(1, 3, &[-0.2, 0.0, -0.4])).unwrap();
        let inst = GlaInstance::new(q, k, v, gates).unwrap();
        let o = forward_recurrent(&inst, false).o;
        // <q, k> = 1 - 3 = -2
        assert_eq!(o.as_slice(), &[-2.0, -4.0, 2.0]);
    }

    #[test]
    fn hand_unrolled_two_steps() {
        let inst = GlaInstance::new(
            t(2, 1, &[1.0, 1.0]),
            t(2, 1, &[1.0, 1.0]),
            t(2, 1, &[1.0, 2.0]),
            GateSeq::new(t(2, 1, &[0.0, 0.5f64.ln()]), t(2, 1, &[0.0, 0.0])).unwrap(),
        )
        .unwrap();
        let tr = forward_recurrent(&inst, true);
        assert_eq!(tr.o.as_slice(), &[1.0, 2.5]);
        let states = tr.states.unwrap();
        assert_eq!(states[0].as_slice(), &[1.0]);
        assert_eq!(states[1].as_slice(), &[2.5]);
    }

    #[test]
    fn unit_gates_match_masked_matmul() {
        let mut inst = random_instance(11, 9, 3, 2);
        inst.gates = GateSeq::ones(9, 3, 2);
        let o = forward_recurrent(&inst, false).o;
        let mut scores = matmul(inst.q(), &inst.k().transpose()).unwrap().into_vec();
        for r in 0..9 {
            for c in r + 1..9 {
                scores[r * 9 + c] = 0.0;
            }
        }
        let direct = matmul(&t(9, 9, &scores), inst.v()).unwrap();
        assert!(max_rel(&o, &direct) <= 1e-12);
    }

    #[test]
    fn stored_states_satisfy_the_recurrence() {
        let inst = random_instance(5, 7, 3, 4);
        let states = forward_recurrent(&inst, true).states.unwrap();
        let (dk, dv) = (3, 4);
        for tt in 1..7 {
            for i in 0..dk {
                for j in 0..dv {
                    let g =
                        (inst.gates.log_alpha().get(tt, i).exp()) * (inst.gates.log_beta().get(tt, j).exp());
                    let want = g * states[tt - 1].get(i, j) + inst.k().get(tt, i) * inst.v().get(tt, j);
                    assert_eq!(states[tt].get(i, j), want);
                }
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let inst = random_instance(3, 5, 2, 3);
        let zero = SeqTensor::zeros(5, 3);
        let g = backward_recurrent_exact(&inst, &zero).unwrap();
        for (_, x) in g.tensors() {
            assert_eq!(x.max_abs(), 0.0);
        }
        let fd = backward_recurrent_fd(&inst, &zero, DEFAULT_FD_EPS).unwrap();
        for (_, x) in fd.tensors() {
            assert!(x.max_abs() <= 1e-12);
        }
    }

    #[test]
    fn single_step_gradients() {
        let inst = random_instance(21, 1, 3, 2);
        let d_o = t(1, 2, &[0.7, -1.3]);
        let g = backward_recurrent_exact(&inst, &d_o).unwrap();
        let (q, k, v) = (inst.q().row(0), inst.k().row(0), inst.v().row(0));
        let do_v: f64 = d_o.row(0).iter().zip(v).map(|(a, b)| a * b).sum();
        let q_k: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
        for i in 0..3 {
            assert!((g.dq.get(0, i) - do_v * k[i]).abs() < 1e-15);
        }
        for j in 0..2 {
            assert!((g.dv.get(0, j) - q_k * d_o.get(0, j)).abs() < 1e-15);
        }
        assert_eq!(g.dlog_alpha.max_abs(), 0.0);
        assert_eq!(g.dlog_beta.max_abs(), 0.0);
    }

    #[test]
    fn exact_backward_matches_finite_differences() {
        for seed in 0..4 {
            let inst = random_instance(100 + seed, 6, 3, 3);
            let d_o = t(6, 3, &lcg(seed, 18, -1.0, 1.0));
            let exact = backward_recurrent_exact(&inst, &d_o).unwrap();
            let fd = backward_recurrent_fd(&inst, &d_o, DEFAULT_FD_EPS).unwrap();
            for ((name, a), (_, b)) in exact.tensors().into_iter().zip(fd.tensors()) {
                let err = max_rel(a, b);
                assert!(err <= 1e-6, "{name}: {err:e}");
            }
        }
    }

    #[test]
    fn fd_is_near_exact_for_linear_inputs() {
        // The loss is linear in Q, so central differences only see rounding.
        for seed in 0..3 {
            let inst = random_instance(300 + seed, 4, 3, 2);
            let d_o = t(4, 2, &lcg(seed + 7, 8, -1.0, 1.0));
            let exact = backward_recurrent_exact(&inst, &d_o).unwrap();
            let fd = backward_recurrent_fd(&inst, &d_o, DEFAULT_FD_EPS).unwrap();
            assert!(exact.dq.sub(&fd.dq).unwrap().max_abs() <= 1e-8);
        }
    }

    #[test]
    fn causal_prefix_is_bitwise_stable() {
        let inst = random_instance(9, 8, 2, 2);
        let base = forward_recurrent(&inst, false).o;
        let mut changed = inst.clone();
        changed.q = inst.q.with_element(5, 1, 9.0).unwrap();
        changed.v = inst.v.with_element(6, 0, -4.0).unwrap();
        let o = forward_recurrent(&changed, false).o;
        assert_eq!(o.rows_slice(0, 5), base.rows_slice(0, 5));
        assert_ne!(o.row(5), base.row(5));
    }

    #[test]
    fn output_is_linear_in_queries_and_values() {
        let a = random_instance(40, 6, 3, 2);
        let b = random_instance(41, 6, 3, 2);
        let mut sum = a.clone();
        sum.q = a.q.add(&b.q).unwrap();
        let mut other = a.clone();
        other.q = b.q.clone();
        let lhs = forward_recurrent(&sum, false).o;
        let rhs = forward_recurrent(&a, false)
            .o
            .add(&forward_recurrent(&other, false).o)
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);

        let mut sum = a.clone();
        sum.v = a.v.add(&b.v).unwrap();
        let mut other = a.clone();
        other.v = b.v.clone();
        let lhs = forward_recurrent(&sum, false).o;
        let rhs = forward_recurrent(&a, false)
            .o
            .add(&forward_recurrent(&other, false).o)
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let inst = random_instance(1, 3, 2, 2);
        assert!(backward_recurrent_exact(&inst, &SeqTensor::zeros(3, 3)).is_err());
        assert!(GlaInstance::new(
            SeqTensor::zeros(3, 2),
            SeqTensor::zeros(3, 3),
            SeqTensor::zeros(3, 2),
            GateSeq::ones(3, 2, 2)
        )
        .is_err());
        assert!(backward_recurrent_fd(&inst, &SeqTensor::zeros(3, 2), 0.0).is_err());
    }
}
