//! Reusable checks comparing the forms against each other and against the
//! finite-difference oracle. Checks never return errors; a failure to run a
//! form is reported as a failing check with a note.

use std::fmt;
use std::time::{Duration, Instant};

use crate::chunkwise::{backward_chunkwise_with, forward_chunkwise};
use crate::cost::ChunkPolicy;
use crate::error::Result;
use crate::fixtures::SeededStream;
use crate::gates::{ChunkPlan, GateSeq};
use crate::parallel_form::{backward_parallel_with, forward_parallel, GateGradSign, ParallelOptions};
use crate::recurrent::{
    backward_recurrent_exact, backward_recurrent_fd, forward_recurrent, GlaInstance, GradBundle,
};
use crate::tensor::{suffix_sum, SeqTensor};

pub const DEFAULT_EQUIV_TOL: f64 = 1e-9;
pub const DEFAULT_GRAD_TOL: f64 = 1e-6;
pub const CAUSALITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub elapsed: Duration,
    pub note: Option<String>,
}

impl CheckReport {
    /// Compares `got` against `want`; mismatched shapes fail with a note.
    pub fn compare(
        name: impl Into<String>,
        got: &SeqTensor,
        want: &SeqTensor,
        tol: f64,
        elapsed: Duration,
    ) -> Self {
        let name = name.into();
        if got.shape() != want.shape() {
            let note = format!("shape {:?} vs {:?}", got.shape(), want.shape());
            return CheckReport::failed(name, tol, note);
        }
        let (abs, rel) = errors(got.as_slice(), want.as_slice());
        CheckReport {
            name,
            max_abs_err: abs,
            max_rel_err: rel,
            tolerance: tol,
            pass: rel <= tol,
            elapsed,
            note: None,
        }
    }

    pub fn failed(name: impl Into<String>, tol: f64, note: impl Into<String>) -> Self {
        CheckReport {
            name: name.into(),
            max_abs_err: f64::NAN,
            max_rel_err: f64::NAN,
            tolerance: tol,
            pass: false,
            elapsed: Duration::ZERO,
            note: Some(note.into()),
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} tol={:.1e} {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        if let Some(note) = &self.note {
            write!(f, " ({note})")?;
        }
        Ok(())
    }
}

/// `(max |a - b|, max |a - b| / max(1e-8, max |a|, max |b|))`.
pub fn errors(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut abs = 0.0f64;
    let mut scale = 1e-8f64;
    for (x, y) in a.iter().zip(b) {
        abs = abs.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    (abs, abs / scale)
}

pub fn rel_err(a: &SeqTensor, b: &SeqTensor) -> f64 {
    errors(a.as_slice(), b.as_slice()).1
}

/// Chunk sizes 1, 3, the smallest size above 3 not dividing `len`, `len / 2`
/// and `len`, clamped to `[1, len]` and deduplicated.
pub fn default_chunk_sweep(len: usize) -> Vec<usize> {
    let mut sweep = vec![1, 3.min(len), (len / 2).max(1), len];
    if let Some(c) = (4..len).find(|c| !len.is_multiple_of(*c)) {
        sweep.push(c);
    }
    sweep.sort_unstable();
    sweep.dedup();
    sweep
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn report_result(
    name: String,
    got: Result<SeqTensor>,
    want: &SeqTensor,
    tol: f64,
    elapsed: Duration,
) -> CheckReport {
    match got {
        Ok(t) => CheckReport::compare(name, &t, want, tol, elapsed),
        Err(e) => CheckReport::failed(name, tol, e.to_string()),
    }
}

/// Parallel vs. recurrent, chunkwise (both policies) vs. recurrent for every
/// chunk size in `chunks`, and materialize vs. recompute.
pub fn check_equivalence(inst: &GlaInstance, chunks: &[usize], tol: f64) -> Vec<CheckReport> {
    let reference = forward_recurrent(inst, false).o;
    let mut out = Vec::new();
    let (par, el) = timed(|| forward_parallel(inst));
    out.push(report_result(
        "parallel-vs-recurrent".into(),
        par,
        &reference,
        tol,
        el,
    ));
    for &c in chunks {
        let plan = match ChunkPlan::new(inst.len(), c) {
            Ok(p) => p,
            Err(e) => {
                out.push(CheckReport::failed(
                    format!("chunkwise[C={c}]"),
                    tol,
                    e.to_string(),
                ));
                continue;
            }
        };
        let mut by_policy = Vec::new();
        for policy in [ChunkPolicy::Materialize, ChunkPolicy::Recompute] {
            let (res, el) = timed(|| forward_chunkwise(inst, &plan, policy).map(|r| r.o));
            let name = format!("chunkwise[C={c},{policy}]-vs-recurrent");
            match res {
                Ok(o) => {
                    out.push(CheckReport::compare(name, &o, &reference, tol, el));
                    by_policy.push(Some(o));
                }
                Err(e) => {
                    out.push(CheckReport::failed(name, tol, e.to_string()));
                    by_policy.push(None);
                }
            }
        }
        let name = format!("chunkwise[C={c}]-materialize-vs-recompute");
        match (&by_policy[0], &by_policy[1]) {
            (Some(m), Some(r)) => out.push(CheckReport::compare(name, m, r, tol, Duration::ZERO)),
            _ => out.push(CheckReport::failed(name, tol, "a policy failed to run")),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub chunks: Vec<usize>,
    pub sign: GateGradSign,
}

impl GradCheckOptions {
    pub fn new(eps: f64, tol: f64, chunks: Vec<usize>) -> Self {
        GradCheckOptions {
            eps,
            tol,
            chunks,
            sign: GateGradSign::default(),
        }
    }
}

/// Moves every log-gate above `-2 eps` down to `-2 eps` so central
/// differences stay inside the valid gate domain.
pub fn shift_gates_interior(inst: &GlaInstance, eps: f64) -> Result<GlaInstance> {
    let cap = -2.0 * eps;
    let g = inst.gates();
    let gates = GateSeq::new(
        g.log_alpha().map(|x| x.min(cap))?,
        g.log_beta().map(|x| x.min(cap))?,
    )?;
    GlaInstance::new(inst.q().clone(), inst.k().clone(), inst.v().clone(), gates)
}

fn grad_reports(
    label: &str,
    got: Result<GradBundle>,
    want: &GradBundle,
    tol: f64,
    el: Duration,
) -> Vec<CheckReport> {
    match got {
        Ok(g) => g
            .tensors()
            .iter()
            .zip(want.tensors())
            .map(|((name, t), (_, w))| CheckReport::compare(format!("{label}/{name}"), t, w, tol, el))
            .collect(),
        Err(e) => vec![CheckReport::failed(label.to_string(), tol, e.to_string())],
    }
}

/// Every analytic backward pass against central finite differences of the
/// recurrent form, per gradient tensor, at the shifted base point.
pub fn check_gradients(inst: &GlaInstance, d_o: &SeqTensor, opts: &GradCheckOptions) -> Vec<CheckReport> {
    let tol = opts.tol;
    if !opts.eps.is_finite() || opts.eps <= 0.0 {
        return vec![CheckReport::failed("gradcheck", tol, "eps must be positive")];
    }
    let shifted = match shift_gates_interior(inst, opts.eps) {
        Ok(s) => s,
        Err(e) => return vec![CheckReport::failed("gradcheck", tol, e.to_string())],
    };
    let fd = match backward_recurrent_fd(&shifted, d_o, opts.eps) {
        Ok(g) => g,
        Err(e) => return vec![CheckReport::failed("gradcheck", tol, e.to_string())],
    };
    let mut out = Vec::new();
    let (g, el) = timed(|| backward_recurrent_exact(&shifted, d_o));
    out.extend(grad_reports("recurrent-exact", g, &fd, tol, el));
    let (g, el) = timed(|| backward_parallel_with(&shifted, d_o, ParallelOptions::default(), opts.sign));
    out.extend(grad_reports("parallel", g, &fd, tol, el));
    for &c in &opts.chunks {
        for policy in [ChunkPolicy::Materialize, ChunkPolicy::Recompute] {
            let (g, el) = timed(|| {
                let plan = ChunkPlan::new(shifted.len(), c)?;
                backward_chunkwise_with(&shifted, d_o, &plan, policy, opts.sign).map(|(g, _)| g)
            });
            out.extend(grad_reports(
                &format!("chunkwise[C={c},{policy}]"),
                g,
                &fd,
                tol,
                el,
            ));
        }
    }
    out
}

/// Closed-form gate gradients are the suffix sums of
/// `dlog_b = q * dq - k * dk` and `dlog_d = o * do - v * dv`, built from the
/// same pass's `dq`, `dk`, `dv`.
pub fn check_gate_identities(
    label: &str,
    inst: &GlaInstance,
    d_o: &SeqTensor,
    g: &GradBundle,
    tol: f64,
) -> Vec<CheckReport> {
    let (Some(dlog_b), Some(dlog_d)) = (&g.dlog_b, &g.dlog_d) else {
        return vec![CheckReport::failed(
            label.to_string(),
            tol,
            "pass returns no log-decay gradients",
        )];
    };
    let o = forward_recurrent(inst, false).o;
    let identity = |x: &SeqTensor, dx: &SeqTensor, y: &SeqTensor, dy: &SeqTensor| -> Result<SeqTensor> {
        let data = (0..x.as_slice().len())
            .map(|i| x.as_slice()[i] * dx.as_slice()[i] - y.as_slice()[i] * dy.as_slice()[i])
            .collect();
        SeqTensor::new(x.rows(), x.cols(), data)
    };
    let checks = [
        (
            "dlog_b=q*dq-k*dk",
            identity(inst.q(), &g.dq, inst.k(), &g.dk),
            dlog_b,
        ),
        ("dlog_d=o*do-v*dv", identity(&o, d_o, inst.v(), &g.dv), dlog_d),
        ("dlog_alpha=suffix_sum(dlog_b)", suffix_sum(dlog_b), &g.dlog_alpha),
        ("dlog_beta=suffix_sum(dlog_d)", suffix_sum(dlog_d), &g.dlog_beta),
    ];
    checks
        .into_iter()
        .map(|(name, want, got)| {
            let name = format!("{label}/{name}");
            match want {
                Ok(w) => CheckReport::compare(name, got, &w, tol, Duration::ZERO),
                Err(e) => CheckReport::failed(name, tol, e.to_string()),
            }
        })
        .collect()
}

/// Replaces every input row at positions `>= t` with fresh draws.
pub fn perturb_future(inst: &GlaInstance, t: usize, seed: u64) -> Result<GlaInstance> {
    let mut rng = SeededStream::new(seed);
    let mut redraw = |x: &SeqTensor, gate: bool| -> Result<SeqTensor> {
        let cols = x.cols();
        let mut data = x.as_slice().to_vec();
        for v in &mut data[t * cols..] {
            *v = if gate {
                0.5f64.ln() * rng.next_unit()
            } else {
                rng.uniform(-1.0, 1.0)
            };
        }
        SeqTensor::new(x.rows(), cols, data)
    };
    let q = redraw(inst.q(), false)?;
    let k = redraw(inst.k(), false)?;
    let v = redraw(inst.v(), false)?;
    let gates = GateSeq::new(
        redraw(inst.gates().log_alpha(), true)?,
        redraw(inst.gates().log_beta(), true)?,
    )?;
    GlaInstance::new(q, k, v, gates)
}

fn prefix(x: &SeqTensor, t: usize) -> SeqTensor {
    SeqTensor::new(t, x.cols(), x.rows_slice(0, t).to_vec()).expect("prefix of a valid tensor")
}

/// Perturbs all inputs at positions `>= t` (`1 <= t < L`) and compares the
/// first `t` outputs of each form before and after.
pub fn check_causality(inst: &GlaInstance, t: usize, seed: u64, chunk: usize) -> Vec<CheckReport> {
    let name = format!("causality[t={t}]");
    if inst.len() < 2 || t == 0 || t >= inst.len() {
        return vec![CheckReport::failed(
            name,
            0.0,
            format!("need 1 <= t < L = {}", inst.len()),
        )];
    }
    let other = match perturb_future(inst, t, seed) {
        Ok(o) => o,
        Err(e) => return vec![CheckReport::failed(name, 0.0, e.to_string())],
    };
    type Form = Box<dyn Fn(&GlaInstance) -> Result<SeqTensor>>;
    let forms: Vec<(String, f64, Form)> = vec![
        (
            "recurrent".into(),
            0.0,
            Box::new(|i| Ok(forward_recurrent(i, false).o)),
        ),
        ("parallel".into(), CAUSALITY_TOL, Box::new(forward_parallel)),
        (
            format!("chunkwise[C={chunk}]"),
            CAUSALITY_TOL,
            Box::new(move |i| {
                forward_chunkwise(i, &ChunkPlan::new(i.len(), chunk)?, ChunkPolicy::Materialize).map(|r| r.o)
            }),
        ),
    ];
    forms
        .into_iter()
        .map(|(form, tol, f)| {
            let name = format!("{name}/{form}");
            let start = Instant::now();
            match (f(inst), f(&other)) {
                (Ok(a), Ok(b)) => {
                    CheckReport::compare(name, &prefix(&b, t), &prefix(&a, t), tol, start.elapsed())
                }
                (Err(e), _) | (_, Err(e)) => CheckReport::failed(name, tol, e.to_string()),
            }
        })
        .collect()
}

/// `o_t = sum_{i <= t} gamma^(t - i) <q_t, k_i> v_i`, evaluated directly.
pub fn decayed_attention_oracle(inst: &GlaInstance, gamma: f64) -> SeqTensor {
    let (len, dv) = (inst.len(), inst.dv());
    let mut out = vec![0.0; len * dv];
    for t in 0..len {
        for i in 0..=t {
            let score: f64 = inst
                .q()
                .row(t)
                .iter()
                .zip(inst.k().row(i))
                .map(|(a, b)| a * b)
                .sum();
            let w = gamma.powi((t - i) as i32) * score;
            for (o, v) in out[t * dv..(t + 1) * dv].iter_mut().zip(inst.v().row(i)) {
                *o += w * v;
            }
        }
    }
    SeqTensor::new(len, dv, out).expect("finite oracle output")
}

/// `(Q K^T * M) V` with the causal mask `M`.
pub fn masked_attention_oracle(inst: &GlaInstance) -> SeqTensor {
    let scores = crate::tensor::matmul(inst.q(), &inst.k().transpose()).expect("matching key dims");
    let len = inst.len();
    let masked: Vec<f64> = (0..len * len)
        .map(|idx| {
            if idx % len <= idx / len {
                scores.as_slice()[idx]
            } else {
                0.0
            }
        })
        .collect();
    let masked = SeqTensor::new(len, len, masked).expect("finite scores");
    crate::tensor::matmul(&masked, inst.v()).expect("matching lengths")
}

pub fn all_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}
