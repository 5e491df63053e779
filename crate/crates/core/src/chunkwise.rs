//! Chunkwise-parallel form.
//!
//! The sequence is cut into chunks. A chunk-level state is carried across
//! boundaries recurrently,
//!
//! ```text
//! S_[c] = (gamma_b^T gamma_d) * S_[c-1] + (B' * K_[c])^T (D' * V_[c])
//! ```
//!
//! and within a chunk outputs are computed in parallel from chunk-relative
//! decays only:
//!
//! ```text
//! O_[c] = ( (Q~ S_[c-1]) + (Q~ K~^T masked) V~ ) * D_dag
//! Q~ = Q * B_dag,  K~ = K / B_dag,  V~ = V / D_dag
//! ```
//!
//! Every exponent is a within-chunk log-decay difference, so the form is
//! stable for any sequence length.
//!
//! With [`ChunkPolicy::Materialize`] all chunk states are stored, which lets
//! the per-chunk output and gradient work run in parallel after a short
//! sequential scan. With [`ChunkPolicy::Recompute`] only the running state is
//! kept and the backward pass replays the state recurrence instead of reading
//! stored states. Both policies execute identical arithmetic per chunk, so
//! their results agree bitwise.

use crate::cost::{ChunkPolicy, CostReport};
use crate::error::{GlaError, Result};
use crate::exec;
use crate::gates::{
    chunk_decays_counted, cumulative_log_decay_counted, ChunkDecays, ChunkPlan, CumulativeDecay,
};
use crate::parallel_form::{gate_grads, GateGradSign};
use crate::recurrent::{GlaInstance, GradBundle};
use crate::tensor::{SeqTensor, State};

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkwiseOutput {
    pub o: SeqTensor,
    /// `S_[1] ..= S_[N]`, present under the materialize policy.
    pub states: Option<Vec<State>>,
    pub cost: CostReport,
}

// Counted kernels. Each adds the flops it executes to `f`.

fn dot(a: &[f64], b: &[f64], f: &mut u64) -> f64 {
    *f += 2 * a.len() as u64;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64], f: &mut u64) {
    *f += 2 * y.len() as u64;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn mul(a: &[f64], b: &[f64], f: &mut u64) -> Vec<f64> {
    *f += a.len() as u64;
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn mul_in_place(a: &mut [f64], b: &[f64], f: &mut u64) {
    *f += a.len() as u64;
    for (x, y) in a.iter_mut().zip(b) {
        *x *= y;
    }
}

fn add_in_place(a: &mut [f64], b: &[f64], f: &mut u64) {
    *f += a.len() as u64;
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// `exp(base - x)` for every row of `log[start..end]`: the reciprocal of the
/// dagger factor, formed without a division.
fn inverse_dagger(log: &SeqTensor, start: usize, end: usize, f: &mut u64) -> Vec<f64> {
    let c = log.cols();
    let zeros = vec![0.0; c];
    let base = if start == 0 {
        &zeros[..]
    } else {
        log.row(start - 1)
    };
    let mut out = Vec::with_capacity((end - start) * c);
    for t in start..end {
        out.extend(log.row(t).iter().zip(base).map(|(&x, &b)| (b - x).exp()));
        *f += 2 * c as u64;
    }
    out
}

/// `C = A B` with `A[r][p] = a[r * a_rs + p * a_cs]` (`m x kk`) and row-major
/// `B` (`kk x cols`). Every entry sums over `p` in ascending order starting
/// from zero, the same order as a sequence of `axpy` calls, so blocking does
/// not change results.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    kk: usize,
    cols: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    f: &mut u64,
) -> Vec<f64> {
    const MR: usize = 4;
    const NR: usize = 4;
    *f += 2 * (m * kk * cols) as u64;
    let mut c = vec![0.0; m * cols];
    let full_rows = m - m % MR;
    let full_cols = cols - cols % NR;
    for r0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..kk {
                let brow: &[f64; NR] = b[p * cols + j0..p * cols + j0 + NR]
                    .try_into()
                    .expect("NR columns");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(r0 + r) * a_rs + p * a_cs];
                    for (x, &bv) in acc_r.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                c[(r0 + r) * cols + j0..(r0 + r) * cols + j0 + NR].copy_from_slice(acc_r);
            }
        }
    }
    // edges: remaining columns of the blocked rows, then the remaining rows
    let edge = |r: usize, j_range: std::ops::Range<usize>, c: &mut [f64]| {
        for p in 0..kk {
            let av = a[r * a_rs + p * a_cs];
            for j in j_range.clone() {
                c[r * cols + j] += av * b[p * cols + j];
            }
        }
    };
    for r in 0..full_rows {
        edge(r, full_cols..cols, &mut c);
    }
    for r in full_rows..m {
        edge(r, 0..cols, &mut c);
    }
    c
}

/// Everything about a chunk that does not depend on the carried state.
struct ChunkPrep {
    start: usize,
    n: usize,
    dk: usize,
    dv: usize,
    decays: ChunkDecays,
    inv_b: Vec<f64>,
    inv_d: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    k_prime: Vec<f64>,
    v_prime: Vec<f64>,
    /// `gamma_b^T gamma_d`; absent for the first chunk, whose incoming state is zero.
    gamma: Option<Vec<f64>>,
    /// `scores[t * n + i] = <q~_t, k~_i>` for `i <= t`.
    scores: Vec<f64>,
    flops: u64,
}

impl ChunkPrep {
    fn new(inst: &GlaInstance, cd: &CumulativeDecay, index: usize, (start, end): (usize, usize)) -> Self {
        let mut f = 0;
        let (dk, dv) = (inst.dk(), inst.dv());
        let n = end - start;
        let decays = chunk_decays_counted(cd, index, (start, end), &mut f);
        let inv_b = inverse_dagger(cd.log_b(), start, end, &mut f);
        let inv_d = inverse_dagger(cd.log_d(), start, end, &mut f);
        let q = mul(
            inst.q().rows_slice(start, end),
            decays.b_dagger.as_slice(),
            &mut f,
        );
        let k = mul(inst.k().rows_slice(start, end), &inv_b, &mut f);
        let v = mul(inst.v().rows_slice(start, end), &inv_d, &mut f);
        let k_prime = mul(inst.k().rows_slice(start, end), decays.b_prime.as_slice(), &mut f);
        let v_prime = mul(inst.v().rows_slice(start, end), decays.d_prime.as_slice(), &mut f);
        let gamma = (index > 0).then(|| {
            f += (dk * dv) as u64;
            let mut g = Vec::with_capacity(dk * dv);
            for &gb in &decays.gamma_b {
                g.extend(decays.gamma_d.iter().map(|&gd| gb * gd));
            }
            g
        });
        // row-wise axpy over K~^T; each score still sums in ascending feature order
        let mut k_t = vec![0.0; dk * n];
        for i in 0..n {
            for a in 0..dk {
                k_t[a * n + i] = k[i * dk + a];
            }
        }
        let mut scores = vec![0.0; n * n];
        for t in 0..n {
            let row = &mut scores[t * n..t * n + t + 1];
            for (a, &qa) in q[t * dk..(t + 1) * dk].iter().enumerate() {
                axpy(qa, &k_t[a * n..a * n + t + 1], row, &mut f);
            }
        }
        ChunkPrep {
            start,
            n,
            dk,
            dv,
            decays,
            inv_b,
            inv_d,
            q,
            k,
            v,
            k_prime,
            v_prime,
            gamma,
            scores,
            flops: f,
        }
    }

    fn q_row(&self, t: usize) -> &[f64] {
        &self.q[t * self.dk..(t + 1) * self.dk]
    }

    fn k_row(&self, t: usize) -> &[f64] {
        &self.k[t * self.dk..(t + 1) * self.dk]
    }

    fn v_row(&self, t: usize) -> &[f64] {
        &self.v[t * self.dv..(t + 1) * self.dv]
    }

    fn first(&self) -> bool {
        self.gamma.is_none()
    }

    /// `(B' * K)^T (D' * V)`, the chunk's contribution to its end state.
    fn update(&self, f: &mut u64) -> Vec<f64> {
        let (n, dk, dv) = (self.n, self.dk, self.dv);
        gemm(dk, n, dv, &self.k_prime, 1, dk, &self.v_prime, f)
    }

    /// End state of this chunk from the incoming state and the update term.
    fn scan(&self, s_prev: Option<&[f64]>, u: Vec<f64>, f: &mut u64) -> Vec<f64> {
        match (s_prev, &self.gamma) {
            (Some(s), Some(g)) => {
                let mut out = mul(g, s, f);
                add_in_place(&mut out, &u, f);
                out
            }
            _ => u,
        }
    }

    fn output(&self, s_prev: Option<&[f64]>, f: &mut u64) -> Vec<f64> {
        let (n, dk, dv) = (self.n, self.dk, self.dv);
        let inter = match (s_prev, self.first()) {
            (Some(s), false) => Some(gemm(n, dk, dv, &self.q, dk, 1, s, f)),
            _ => None,
        };
        let mut out = vec![0.0; n * dv];
        for t in 0..n {
            let row = &mut out[t * dv..(t + 1) * dv];
            for i in 0..=t {
                axpy(self.scores[t * n + i], self.v_row(i), row, f);
            }
            if let Some(inter) = &inter {
                add_in_place(row, &inter[t * dv..(t + 1) * dv], f);
            }
            mul_in_place(row, self.decays.d_dagger.row(t), f);
        }
        out
    }
}

/// Rescaled cotangent of a chunk and, after the first chunk, its
/// contribution `Q~^T dO~` to the gradient of the incoming state.
struct ChunkCotangent {
    d_o: Vec<f64>,
    w: Option<Vec<f64>>,
    flops: u64,
}

impl ChunkCotangent {
    fn new(prep: &ChunkPrep, d_o: &SeqTensor) -> Self {
        let mut f = 0;
        let (n, dk, dv) = (prep.n, prep.dk, prep.dv);
        let d_o = mul(
            d_o.rows_slice(prep.start, prep.start + n),
            prep.decays.d_dagger.as_slice(),
            &mut f,
        );
        let w = (!prep.first()).then(|| gemm(dk, n, dv, &prep.q, 1, dk, &d_o, &mut f));
        ChunkCotangent { d_o, w, flops: f }
    }

    fn row(&self, t: usize, dv: usize) -> &[f64] {
        &self.d_o[t * dv..(t + 1) * dv]
    }
}

/// Gradient of the state entering the chunk from the gradient of the state
/// leaving it.
fn reverse_scan(prep: &ChunkPrep, cot: &ChunkCotangent, ds: Option<&[f64]>, f: &mut u64) -> Vec<f64> {
    let w = cot
        .w
        .as_ref()
        .expect("reverse scan only runs for chunks after the first");
    let g = prep.gamma.as_ref().expect("chunks after the first carry a decay");
    match ds {
        Some(ds) => {
            let mut out = mul(g, ds, f);
            add_in_place(&mut out, w, f);
            out
        }
        None => w.clone(),
    }
}

/// Key and value gradients, plus the intra-chunk part of the rescaled query
/// gradient. Needs the gradient of the chunk's end state but not the state.
struct KeyValueGrads {
    dk: Vec<f64>,
    dv: Vec<f64>,
    dq_intra: Vec<f64>,
}

fn key_value_grads(prep: &ChunkPrep, cot: &ChunkCotangent, ds: Option<&[f64]>, f: &mut u64) -> KeyValueGrads {
    let (n, dk, dv) = (prep.n, prep.dk, prep.dv);
    let mut p = vec![0.0; n * n];
    for t in 0..n {
        for i in 0..=t {
            p[t * n + i] = dot(cot.row(t, dv), prep.v_row(i), f);
        }
    }
    let mut dq_intra = vec![0.0; n * dk];
    for t in 0..n {
        let row = &mut dq_intra[t * dk..(t + 1) * dk];
        for i in 0..=t {
            axpy(p[t * n + i], prep.k_row(i), row, f);
        }
    }
    let mut dk_out = vec![0.0; n * dk];
    let mut dv_out = vec![0.0; n * dv];
    for i in 0..n {
        let dk_row = &mut dk_out[i * dk..(i + 1) * dk];
        for t in i..n {
            axpy(p[t * n + i], prep.q_row(t), dk_row, f);
        }
        mul_in_place(dk_row, &prep.inv_b[i * dk..(i + 1) * dk], f);

        let dv_row = &mut dv_out[i * dv..(i + 1) * dv];
        for t in i..n {
            axpy(prep.scores[t * n + i], cot.row(t, dv), dv_row, f);
        }
        mul_in_place(dv_row, &prep.inv_d[i * dv..(i + 1) * dv], f);

        if let Some(ds) = ds {
            let vp = &prep.v_prime[i * dv..(i + 1) * dv];
            let kp = &prep.k_prime[i * dk..(i + 1) * dk];
            let hk: Vec<f64> = (0..dk).map(|a| dot(&ds[a * dv..(a + 1) * dv], vp, f)).collect();
            let hk = mul(&hk, prep.decays.b_prime.row(i), f);
            add_in_place(dk_row, &hk, f);

            let mut hv = vec![0.0; dv];
            for (a, &ka) in kp.iter().enumerate() {
                axpy(ka, &ds[a * dv..(a + 1) * dv], &mut hv, f);
            }
            mul_in_place(&mut hv, prep.decays.d_prime.row(i), f);
            add_in_place(dv_row, &hv, f);
        }
    }
    KeyValueGrads {
        dk: dk_out,
        dv: dv_out,
        dq_intra,
    }
}

/// Query gradient: the inter-chunk term through the incoming state plus the
/// intra-chunk term, scaled back by the dagger decay.
fn query_grads(
    prep: &ChunkPrep,
    cot: &ChunkCotangent,
    dq_intra: &[f64],
    s_prev: Option<&[f64]>,
    f: &mut u64,
) -> Vec<f64> {
    let (n, dk, dv) = (prep.n, prep.dk, prep.dv);
    let mut out = Vec::with_capacity(n * dk);
    for t in 0..n {
        let intra = &dq_intra[t * dk..(t + 1) * dk];
        let mut row = match (s_prev, prep.first()) {
            (Some(s), false) => {
                let mut inter: Vec<f64> = (0..dk)
                    .map(|a| dot(&s[a * dv..(a + 1) * dv], cot.row(t, dv), f))
                    .collect();
                add_in_place(&mut inter, intra, f);
                inter
            }
            _ => intra.to_vec(),
        };
        mul_in_place(&mut row, prep.decays.b_dagger.row(t), f);
        out.extend(row);
    }
    out
}

fn check_plan(inst: &GlaInstance, plan: &ChunkPlan) -> Result<()> {
    if plan.len() != inst.len() {
        return Err(GlaError::PlanMismatch {
            plan: plan.len(),
            seq: inst.len(),
        });
    }
    Ok(())
}

fn prepare(inst: &GlaInstance, plan: &ChunkPlan, flops: &mut u64) -> Vec<ChunkPrep> {
    let cd = cumulative_log_decay_counted(inst.gates(), flops);
    let bounds: Vec<(usize, (usize, usize))> = plan.boundaries().iter().copied().enumerate().collect();
    let preps = exec::map_slice(&bounds, |&(i, b)| ChunkPrep::new(inst, &cd, i, b));
    *flops += preps.iter().map(|p| p.flops).sum::<u64>();
    preps
}

/// Sequential state scan over precomputed update terms; returns `S_[1..=N]`.
fn scan_states(preps: &[ChunkPrep], f: &mut u64) -> Vec<Vec<f64>> {
    let updates = exec::map_slice(preps, |p| {
        let mut g = 0;
        let u = p.update(&mut g);
        (u, g)
    });
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(preps.len());
    for (p, (u, g)) in preps.iter().zip(updates) {
        *f += g;
        let s = p.scan(states.last().map(Vec::as_slice), u, f);
        states.push(s);
    }
    states
}

/// Outputs of all chunks given stored states, in parallel.
fn outputs_from_states(preps: &[ChunkPrep], states: &[Vec<f64>], f: &mut u64) -> Vec<f64> {
    let idx: Vec<usize> = (0..preps.len()).collect();
    let rows = exec::map_slice(&idx, |&c| {
        let mut g = 0;
        let s_prev = (c > 0).then(|| states[c - 1].as_slice());
        (preps[c].output(s_prev, &mut g), g)
    });
    let mut out = Vec::new();
    for (r, g) in rows {
        *f += g;
        out.extend(r);
    }
    out
}

struct ForwardParts {
    o: Vec<f64>,
    states: Option<Vec<Vec<f64>>>,
    cost: CostReport,
}

fn forward_parts(preps: &[ChunkPrep], policy: ChunkPolicy, flops: &mut u64) -> ForwardParts {
    let n = preps.len() as u64;
    match policy {
        ChunkPolicy::Materialize => {
            let states = scan_states(preps, flops);
            let o = outputs_from_states(preps, &states, flops);
            ForwardParts {
                o,
                states: Some(states),
                cost: CostReport {
                    state_writes: n,
                    state_reads: n - 1,
                    ..Default::default()
                },
            }
        }
        ChunkPolicy::Recompute => {
            let mut s: Option<Vec<f64>> = None;
            let mut o = Vec::new();
            for p in preps {
                o.extend(p.output(s.as_deref(), flops));
                let u = p.update(flops);
                s = Some(p.scan(s.as_deref(), u, flops));
            }
            ForwardParts {
                o,
                states: None,
                cost: CostReport::default(),
            }
        }
    }
}

pub fn forward_chunkwise(
    inst: &GlaInstance,
    plan: &ChunkPlan,
    policy: ChunkPolicy,
) -> Result<ChunkwiseOutput> {
    check_plan(inst, plan)?;
    let mut flops = 0;
    let preps = prepare(inst, plan, &mut flops);
    let parts = forward_parts(&preps, policy, &mut flops);
    let (dk, dv) = (inst.dk(), inst.dv());
    Ok(ChunkwiseOutput {
        o: SeqTensor::new(inst.len(), dv, parts.o)?,
        states: parts.states.map(|ss| {
            ss.into_iter()
                .map(|s| State::from_vec_unchecked(dk, dv, s))
                .collect()
        }),
        cost: CostReport { flops, ..parts.cost },
    })
}

pub fn backward_chunkwise(
    inst: &GlaInstance,
    d_o: &SeqTensor,
    plan: &ChunkPlan,
    policy: ChunkPolicy,
) -> Result<(GradBundle, CostReport)> {
    backward_chunkwise_with(inst, d_o, plan, policy, GateGradSign::default())
}

pub fn backward_chunkwise_with(
    inst: &GlaInstance,
    d_o: &SeqTensor,
    plan: &ChunkPlan,
    policy: ChunkPolicy,
    sign: GateGradSign,
) -> Result<(GradBundle, CostReport)> {
    check_plan(inst, plan)?;
    inst.check_cotangent(d_o)?;
    let (len, dk, dv) = (inst.len(), inst.dk(), inst.dv());
    let mut flops = 0;
    let preps = prepare(inst, plan, &mut flops);
    let n_chunks = preps.len();
    let cots = exec::map_slice(&preps, |p| ChunkCotangent::new(p, d_o));
    flops += cots.iter().map(|c| c.flops).sum::<u64>();

    let mut o = Vec::with_capacity(len * dv);
    let mut dq = Vec::with_capacity(len * dk);
    let mut dkk = Vec::with_capacity(len * dk);
    let mut dvv = Vec::with_capacity(len * dv);
    let mut traffic = CostReport::default();

    match policy {
        ChunkPolicy::Materialize => {
            let fwd = forward_parts(&preps, policy, &mut flops);
            traffic += fwd.cost;
            let states = fwd.states.expect("materialize keeps states");
            o = fwd.o;

            // ds[c] is the gradient of S_[c+1], the state leaving chunk c.
            let mut ds: Vec<Option<Vec<f64>>> = vec![None; n_chunks];
            for c in (1..n_chunks).rev() {
                let prev = reverse_scan(&preps[c], &cots[c], ds[c].as_deref(), &mut flops);
                ds[c - 1] = Some(prev);
                traffic.state_writes += 1;
            }

            let idx: Vec<usize> = (0..n_chunks).collect();
            let grads = exec::map_slice(&idx, |&c| {
                let mut g = 0;
                let kv = key_value_grads(&preps[c], &cots[c], ds[c].as_deref(), &mut g);
                let s_prev = (c > 0).then(|| states[c - 1].as_slice());
                let q = query_grads(&preps[c], &cots[c], &kv.dq_intra, s_prev, &mut g);
                (q, kv.dk, kv.dv, g)
            });
            for (c, (q, k, v, g)) in grads.into_iter().enumerate() {
                flops += g;
                traffic.state_reads += u64::from(c > 0) + u64::from(ds[c].is_some());
                dq.extend(q);
                dkk.extend(k);
                dvv.extend(v);
            }
        }
        ChunkPolicy::Recompute => {
            // Reverse sweep: state gradients need no states.
            let mut kv_grads: Vec<Option<KeyValueGrads>> = (0..n_chunks).map(|_| None).collect();
            let mut ds: Option<Vec<f64>> = None;
            for c in (0..n_chunks).rev() {
                kv_grads[c] = Some(key_value_grads(&preps[c], &cots[c], ds.as_deref(), &mut flops));
                if c > 0 {
                    ds = Some(reverse_scan(&preps[c], &cots[c], ds.as_deref(), &mut flops));
                }
            }
            // Forward replay regenerates each incoming state.
            let mut s: Option<Vec<f64>> = None;
            for (c, p) in preps.iter().enumerate() {
                let kv = kv_grads[c].take().expect("filled by the reverse sweep");
                o.extend(p.output(s.as_deref(), &mut flops));
                dq.extend(query_grads(p, &cots[c], &kv.dq_intra, s.as_deref(), &mut flops));
                let u = p.update(&mut flops);
                s = Some(p.scan(s.as_deref(), u, &mut flops));
                traffic.recompute_passes += 1;
                dkk.extend(kv.dk);
                dvv.extend(kv.dv);
            }
        }
    }

    let g = gate_grads(inst, &o, d_o, &dq, &dkk, &dvv, sign, &mut flops)?;
    let bundle = GradBundle {
        dq: SeqTensor::new(len, dk, dq)?,
        dk: SeqTensor::new(len, dk, dkk)?,
        dv: SeqTensor::new(len, dv, dvv)?,
        dlog_alpha: g.dlog_alpha,
        dlog_beta: g.dlog_beta,
        dlog_b: Some(g.dlog_b),
        dlog_d: Some(g.dlog_d),
    };
    Ok((bundle, CostReport { flops, ..traffic }))
}
