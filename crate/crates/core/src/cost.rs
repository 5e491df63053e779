//! Operation and state-traffic accounting.
//!
//! Counting convention: every floating-point multiply, add/subtract and `exp`
//! is one flop. A dot product or accumulation of `n` terms starting from zero
//! costs `2n`. Copies, sign flips and comparisons are free.
//!
//! State traffic counts whole `dk x dv` matrices (chunk states and their
//! gradients) moved to or from the modeled slow memory. The live running
//! state is never counted.
//!
//! The kernels increment these counters as they execute; the `predict_*`
//! functions reproduce the same totals in closed form.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use crate::error::GlaError;
use crate::gates::ChunkPlan;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CostReport {
    pub flops: u64,
    pub state_writes: u64,
    pub state_reads: u64,
    pub recompute_passes: u64,
}

impl CostReport {
    pub fn flops(flops: u64) -> Self {
        CostReport {
            flops,
            ..Default::default()
        }
    }

    /// Total state matrices moved in either direction.
    pub fn state_traffic(&self) -> u64 {
        self.state_writes + self.state_reads
    }
}

impl Add for CostReport {
    type Output = CostReport;

    fn add(self, rhs: CostReport) -> CostReport {
        CostReport {
            flops: self.flops + rhs.flops,
            state_writes: self.state_writes + rhs.state_writes,
            state_reads: self.state_reads + rhs.state_reads,
            recompute_passes: self.recompute_passes + rhs.recompute_passes,
        }
    }
}

impl AddAssign for CostReport {
    fn add_assign(&mut self, rhs: CostReport) {
        *self = *self + rhs;
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "flops = {}", self.flops)?;
        writeln!(f, "state_writes = {}", self.state_writes)?;
        writeln!(f, "state_reads = {}", self.state_reads)?;
        write!(f, "recompute_passes = {}", self.recompute_passes)
    }
}

/// Whether chunk-boundary states are stored for reuse or regenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkPolicy {
    Materialize,
    Recompute,
}

impl ChunkPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ChunkPolicy::Materialize => "materialize",
            ChunkPolicy::Recompute => "recompute",
        }
    }
}

impl fmt::Display for ChunkPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChunkPolicy {
    type Err = GlaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "materialize" => Ok(ChunkPolicy::Materialize),
            "recompute" => Ok(ChunkPolicy::Recompute),
            other => Err(GlaError::InvalidConfig(format!(
                "unknown policy {other:?} (expected materialize or recompute)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Recurrent form, forward only: per step, `dk + dv` gate exps, the outer
/// product of the gates, the decay-and-add state update and the readout.
pub fn predict_recurrent_cost(len: usize, dk: usize, dv: usize) -> CostReport {
    let per_step = dk + dv + dk * dv + 3 * dk * dv + 2 * dk * dv;
    CostReport::flops(u(len * per_step))
}

/// Parallel form, forward only.
pub fn predict_parallel_cost(len: usize, dk: usize, dv: usize) -> CostReport {
    let cumsum = len * (dk + dv);
    let scales = 2 * len * dk + 2 * len * dv;
    let tilde = 2 * len * dk + len * dv;
    let pairs = len * (len + 1);
    let out = pairs * dk + pairs * dv + len * dv;
    CostReport::flops(u(cumsum + scales + tilde + out))
}

/// Per-chunk preparation shared by forward and backward: decay factors,
/// their inverses, rescaled Q/K/V, key/value terms of the state update,
/// the gate outer product (all but the first chunk) and causal scores.
pub(crate) fn chunk_prep_flops(n: usize, dk: usize, dv: usize, first: bool) -> u64 {
    let decays = 4 * n * dk + 2 * dk + 4 * n * dv + 2 * dv;
    let inverses = 2 * n * dk + 2 * n * dv;
    let tilde = 2 * n * dk + n * dv;
    let primed = n * dk + n * dv;
    let gamma = if first { 0 } else { dk * dv };
    let scores = n * (n + 1) * dk;
    u(decays + inverses + tilde + primed + gamma + scores)
}

pub(crate) fn chunk_output_flops(n: usize, dk: usize, dv: usize, first: bool) -> u64 {
    let intra = n * (n + 1) * dv;
    let inter = if first { 0 } else { 2 * n * dk * dv + n * dv };
    u(intra + inter + n * dv)
}

pub(crate) fn chunk_update_flops(n: usize, dk: usize, dv: usize) -> u64 {
    u(2 * n * dk * dv)
}

pub(crate) fn chunk_scan_flops(dk: usize, dv: usize, first: bool) -> u64 {
    if first {
        0
    } else {
        u(2 * dk * dv)
    }
}

/// Cotangent rescale for every chunk plus the query-side state-gradient
/// term for chunks after the first.
pub(crate) fn chunk_cotangent_flops(n: usize, dk: usize, dv: usize, first: bool) -> u64 {
    let scale = n * dv;
    let w = if first { 0 } else { 2 * n * dk * dv };
    u(scale + w)
}

/// Reverse state-gradient scan step producing the gradient of the state
/// entering chunk `c`; the last chunk's contribution is a copy.
pub(crate) fn chunk_rscan_flops(dk: usize, dv: usize, last: bool) -> u64 {
    if last {
        0
    } else {
        u(2 * dk * dv)
    }
}

pub(crate) fn chunk_grad_flops(n: usize, dk: usize, dv: usize, first: bool, last: bool) -> u64 {
    let pairs = n * (n + 1);
    let intra = pairs * dv + pairs * dk + pairs * dk + pairs * dv;
    // inter-chunk terms exist only with a previous state (query side) or a
    // downstream state gradient (key and value side)
    let dq = n * dk + if first { 0 } else { 2 * n * dk * dv + n * dk };
    let dk_ = n * dk + if last { 0 } else { 2 * n * dk * dv + 2 * n * dk };
    let dv_ = n * dv + if last { 0 } else { 2 * n * dk * dv + 2 * n * dv };
    u(intra + dq + dk_ + dv_)
}

/// Closed-form counters for the chunkwise form.
///
/// Flops do not depend on the policy; only state traffic and recompute
/// passes do.
pub fn predict_cost(
    len: usize,
    dk: usize,
    dv: usize,
    plan: &ChunkPlan,
    policy: ChunkPolicy,
    pass: Pass,
) -> CostReport {
    debug_assert_eq!(plan.len(), len);
    let n_chunks = plan.num_chunks();
    let mut flops = u(len * (dk + dv));
    for (c, &(s, e)) in plan.boundaries().iter().enumerate() {
        let n = e - s;
        let first = c == 0;
        flops += chunk_prep_flops(n, dk, dv, first)
            + chunk_update_flops(n, dk, dv)
            + chunk_scan_flops(dk, dv, first)
            + chunk_output_flops(n, dk, dv, first);
        if pass == Pass::Backward {
            let last = c + 1 == n_chunks;
            flops += chunk_cotangent_flops(n, dk, dv, first) + chunk_grad_flops(n, dk, dv, first, last);
            if c >= 1 {
                flops += chunk_rscan_flops(dk, dv, last);
            }
        }
    }
    if pass == Pass::Backward {
        // gate-gradient assembly and suffix sums
        flops += u(3 * len * (dk + dv) + (len - 1) * (dk + dv));
    }

    let n = u(n_chunks);
    let (state_writes, state_reads, recompute_passes) = match (policy, pass) {
        (ChunkPolicy::Materialize, Pass::Forward) => (n, n - 1, 0),
        (ChunkPolicy::Materialize, Pass::Backward) => (n + (n - 1), 3 * (n - 1), 0),
        (ChunkPolicy::Recompute, Pass::Forward) => (0, 0, 0),
        (ChunkPolicy::Recompute, Pass::Backward) => (0, 0, n),
    };
    CostReport {
        flops,
        state_writes,
        state_reads,
        recompute_passes,
    }
}
