//! Loopy Gaussian belief propagation: message kernels, schedules, damping,
//! dropout, and convergence bookkeeping.
//!
//! One inference **iteration** expands the configured [`Schedule`] into a
//! sequence of layer passes; each pass runs two phases over one layer:
//!
//! 1. **Factor phase** (Jacobi within the layer): every factor recomputes its
//!    outgoing messages from a snapshot of its neighbors' beliefs, taking each
//!    incoming message by the reuse rule `incoming = belief ÷ out_msg` (the
//!    unary prior is part of the belief, so it is included automatically).
//!    New messages are damped in natural parameters and their belief deltas
//!    accumulated.
//! 2. **Variable phase**: the layer's variables fold the accumulated deltas
//!    into their beliefs and move their linearization points to the new
//!    posterior means (Gauss–Seidel across layers).
//!
//! # Message kernels
//!
//! [`factor_to_vars_fast`] marginalizes a factor towards all V neighbors in
//! O(V·M³) using the Woodbury identity on the implicit factor precision
//! `Λ^(φ) = Jᵀ Λ_y^eff J`; [`factor_to_vars_naive`] is the dense (V−1)×(V−1)
//! reference, used by the validation suites and as an automatic fallback
//! whenever an incoming message carries non-positive precision or a fast-path
//! subsystem resists factorization. If the fallback fails too, the factor's
//! messages are left unchanged for that pass rather than poisoning the graph.
//!
//! # Fixed-point skipping
//!
//! A message within `~1e-11` (relative) of its recomputed target is written
//! **undamped**; the factor then records the sum of its neighbors' version
//! counters and skips all work until some neighbor belief actually moves.
//! Near convergence entire layers reduce to version scans, which is what
//! keeps desk-scale training within its wall-clock budget on one core. The
//! skip is exact — a factor whose neighborhood is bitwise unchanged would
//! recompute bitwise-identical messages — and can be disabled per run via
//! [`EngineConfig::fixed_point_skip`] (the equivalence is under test).

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::factor::{FactorDef, LinScratch};
use crate::gaussian::GaussianInfo;
use crate::graph::FactorGraph;
use crate::linalg::{cholesky_in_place, chol_solve_in_place, DenseMat};
use crate::metrics::{IterRecord, MetricsSink};
use crate::real::{real, Real};

/// Layer-visit order within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Forward sweep through the schedulable layers, then backward: layers
    /// `[0, 1, …, L−1, L−1, …, 1, 0]` — 2L passes per iteration.
    Sweep,
    /// L layer indices drawn uniformly **with replacement** per iteration
    /// from the engine's seeded RNG.
    RandomLayers,
}

impl std::str::FromStr for Schedule {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sweep" => Ok(Schedule::Sweep),
            "random_layers" => Ok(Schedule::RandomLayers),
            other => Err(CoreError::InvalidParameter(format!(
                "unknown schedule {other:?} (expected \"sweep\" or \"random_layers\")"
            ))),
        }
    }
}

/// Knobs for one inference run.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Maximum number of iterations (schedule expansions).
    pub iters: usize,
    /// Damping β ∈ [0, 1): `msg_new = (1−β)·target + β·msg_old` in natural
    /// parameters. 0 disables damping.
    pub damping: f64,
    /// Probability ∈ [0, 1) of skipping a factor's entire outgoing message
    /// update for one pass. Decided per (seed, pass, factor) by a stateless
    /// hash, so it is deterministic and independent of visit order.
    pub msg_dropout: f64,
    /// Relinearize (move `x₀` to the belief mean) every k-th iteration; 1
    /// relinearizes on every variable update.
    pub relinearize_every: usize,
    /// Seed for the schedule RNG and the dropout hash.
    pub seed: u64,
    pub schedule: Schedule,
    /// Declare convergence when an iteration's `max_belief_delta` falls below
    /// this value (only on relinearizing iterations). `None` runs all
    /// `iters`.
    pub convergence_tol: Option<f64>,
    /// Recompute all beliefs from the message arena every k-th iteration to
    /// cancel incremental-update float drift. 0 disables refresh.
    pub refresh_every: usize,
    /// Enable the exact fixed-point skip (see module docs). On by default;
    /// disabling forces every factor to recompute every pass.
    pub fixed_point_skip: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            damping: 0.0,
            msg_dropout: 0.0,
            relinearize_every: 1,
            seed: 0,
            schedule: Schedule::Sweep,
            convergence_tol: None,
            refresh_every: 8,
            fixed_point_skip: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(CoreError::InvalidParameter(format!(
                "damping must be in [0, 1), got {}",
                self.damping
            )));
        }
        if !(0.0..1.0).contains(&self.msg_dropout) {
            return Err(CoreError::InvalidParameter(format!(
                "msg_dropout must be in [0, 1), got {}",
                self.msg_dropout
            )));
        }
        if self.relinearize_every == 0 {
            return Err(CoreError::InvalidParameter(
                "relinearize_every must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Work counters for one run; useful for tests and performance triage.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EngineStats {
    /// Full factor updates performed.
    pub updates: u64,
    /// Updates skipped because the factor sat at its exact fixed point.
    pub skipped_fixed: u64,
    /// Updates skipped by message dropout.
    pub dropped: u64,
    /// Updates that fell back to the dense reference marginalization.
    pub naive_fallbacks: u64,
    /// Updates abandoned (messages left unchanged) after both paths failed.
    pub singular_skips: u64,
}

/// Outcome of [`run_inference`].
#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// Iterations actually executed (≤ `cfg.iters` with early convergence).
    pub iterations_run: usize,
    /// Total energy `Σ_j E_j(x₀) + E_prior(x₀)` after the last iteration.
    pub final_energy: f64,
    pub converged: bool,
    /// `max_belief_delta` of the last iteration.
    pub max_belief_delta: f64,
    pub stats: EngineStats,
}

const NOT_FIXED: u64 = u64::MAX;

/// Uniform draw in [0, 1) from a stateless splitmix-style hash of
/// `(seed, pass, factor)`; replayable regardless of update order.
#[inline]
fn dropout_roll(seed: u64, pass: u64, factor: u64) -> f64 {
    let mut z = seed
        ^ pass.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ factor.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Scratch buffers for [`factor_to_vars_fast`]; reuse across calls to keep
/// the hot path allocation-free.
#[derive(Debug, Default)]
pub struct FastScratch<T> {
    lin: LinScratch<T>,
    dinv: Vec<T>,
    e: Vec<T>,
    // General-M (Woodbury) workspace.
    q: Vec<T>,
    s: Vec<T>,
    t: Vec<T>,
    u_mat: Vec<T>,
    g: Vec<T>,
    col: Vec<T>,
    uvec: Vec<T>,
    tvec: Vec<T>,
    z1: Vec<T>,
    z2: Vec<T>,
}

/// All factor→variable messages of one factor in O(V·M³).
///
/// Writes the V outgoing messages into `out` and returns the factor energy at
/// `x0`. Marginalization of neighbor `i` uses the Woodbury identity on
/// `(D_{\i\i} + Λ^(φ)_{\i\i})⁻¹` with the Gram kernel
/// `G_i = Λ_y⁻¹ + J_{\i} D_{\i}⁻¹ J_{\i}ᵀ` (M×M), so nothing of size V×V is
/// ever formed:
///
/// `Λ_msg_i = λ‖J_i‖² − λ²·J_iᵀU_iJ_i + λ²·uᵀG_i⁻¹u`,
/// `η_msg_i = λ·J_iᵀc − λ·J_iᵀT_i + λ·uᵀG_i⁻¹T_i`,
///
/// with `U_i = S − J_iJ_iᵀ/D_i`, `S = JD⁻¹Jᵀ`, `u = U_iJ_i`,
/// `T_i = t − J_i·q_i/D_i`, `t = JD⁻¹q`, `q_k = λ·J_kᵀc + e_k`. For M = 1
/// everything collapses to scalars (the dominant path: unit-decomposed dense
/// and conv layers all have M = 1).
///
/// Errors with [`CoreError::ZeroIncomingPrecision`] if any incoming precision
/// is not strictly positive (V > 1), and [`CoreError::SingularSubsystem`] if
/// a Gram kernel resists factorization; callers fall back to
/// [`factor_to_vars_naive`].
pub fn factor_to_vars_fast<T: Real>(
    def: &FactorDef<T>,
    x0: &[T],
    incoming: &[GaussianInfo<T>],
    factor_id: usize,
    scratch: &mut FastScratch<T>,
    out: &mut Vec<GaussianInfo<T>>,
) -> Result<T> {
    let v = def.arity();
    let m = def.m_dim();
    debug_assert_eq!(x0.len(), v);
    debug_assert_eq!(incoming.len(), v);

    let meta = def.linearize_into(x0, factor_id, &mut scratch.lin)?;
    let lam = meta.lam_y_eff;
    out.clear();

    // A zero effective precision (robust flat region with eps_flat = 0)
    // contributes nothing in any direction.
    if lam <= T::zero() {
        out.resize(v, GaussianInfo::zero());
        return Ok(meta.energy);
    }

    // Unary factors have nothing to marginalize: the message is the factor's
    // own linearization, independent of the incoming message.
    if v == 1 {
        let mut eta = T::zero();
        let mut lam_m = T::zero();
        for r in 0..m {
            let j = scratch.lin.j[r];
            eta += lam * j * scratch.lin.c[r];
            lam_m += lam * j * j;
        }
        out.push(GaussianInfo::new(eta, lam_m));
        return Ok(meta.energy);
    }

    // Incoming precisions must be strictly positive for D⁻¹ to exist.
    scratch.dinv.clear();
    scratch.e.clear();
    for msg in incoming {
        if !(msg.lam > T::zero()) || !msg.lam.is_finite() || !msg.eta.is_finite() {
            return Err(CoreError::ZeroIncomingPrecision(factor_id));
        }
        scratch.dinv.push(msg.lam.recip());
        scratch.e.push(msg.eta);
    }

    let j = &scratch.lin.j;
    if m == 1 {
        // Scalar collapse: S → s1, t → λ·c·s1 + se.
        let c0 = scratch.lin.c[0];
        let mut s1 = T::zero();
        let mut se = T::zero();
        for k in 0..v {
            let jk = j[k];
            s1 += jk * jk * scratch.dinv[k];
            se += jk * scratch.e[k] * scratch.dinv[k];
        }
        for i in 0..v {
            let ji = j[i];
            if ji == T::zero() {
                // Slot outside the linearization's support (e.g. non-argmax
                // maxpool inputs): no constraint, no message.
                out.push(GaussianInfo::zero());
                continue;
            }
            // U_i = Σ_{k≠i} j_k²/D_k ≥ 0; clamp float cancellation.
            let u_i = (s1 - ji * ji * scratch.dinv[i]).max(T::zero());
            let ecomp = se - ji * scratch.e[i] * scratch.dinv[i];
            let denom = T::one() + lam * u_i; // ≥ 1: never singular
            out.push(GaussianInfo::new(
                lam * ji * (c0 - ecomp) / denom,
                lam * ji * ji / denom,
            ));
        }
        return Ok(meta.energy);
    }

    // General M. Precompute q, S, t once per factor.
    let c = &scratch.lin.c;
    scratch.q.clear();
    for k in 0..v {
        let mut jc = T::zero();
        for r in 0..m {
            jc += j[r * v + k] * c[r];
        }
        scratch.q.push(lam * jc + scratch.e[k]);
    }
    scratch.s.clear();
    scratch.s.resize(m * m, T::zero());
    scratch.t.clear();
    scratch.t.resize(m, T::zero());
    for k in 0..v {
        let dk = scratch.dinv[k];
        let qk = scratch.q[k];
        for a in 0..m {
            let ja = j[a * v + k] * dk;
            scratch.t[a] += ja * qk;
            for b in a..m {
                scratch.s[a * m + b] += ja * j[b * v + k];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            scratch.s[a * m + b] = scratch.s[b * m + a];
        }
    }

    let lam_inv = lam.recip();
    scratch.col.resize(m, T::zero());
    scratch.u_mat.resize(m * m, T::zero());
    scratch.g.resize(m * m, T::zero());
    scratch.uvec.resize(m, T::zero());
    scratch.tvec.resize(m, T::zero());
    scratch.z1.resize(m, T::zero());
    scratch.z2.resize(m, T::zero());
    for i in 0..v {
        let di = scratch.dinv[i];
        let qi = scratch.q[i];
        for r in 0..m {
            scratch.col[r] = j[r * v + i];
        }
        // U_i = S − J_iJ_iᵀ/D_i, T_i = t − J_i q_i/D_i, u = U_i J_i.
        for a in 0..m {
            let ca = scratch.col[a] * di;
            for b in 0..m {
                scratch.u_mat[a * m + b] = scratch.s[a * m + b] - ca * scratch.col[b];
            }
            scratch.tvec[a] = scratch.t[a] - ca * qi;
        }
        let mut jj = T::zero();
        let mut jtc = T::zero();
        let mut j_u = T::zero();
        let mut j_t = T::zero();
        for a in 0..m {
            let ca = scratch.col[a];
            jj += ca * ca;
            jtc += ca * c[a];
            let mut ua = T::zero();
            for b in 0..m {
                ua += scratch.u_mat[a * m + b] * scratch.col[b];
            }
            scratch.uvec[a] = ua;
            j_u += ca * ua;
            j_t += ca * scratch.tvec[a];
        }
        // G_i = Λ_y⁻¹ + U_i.
        scratch.g.copy_from_slice(&scratch.u_mat);
        for a in 0..m {
            scratch.g[a * m + a] += lam_inv;
        }
        if !cholesky_in_place(&mut scratch.g, m) {
            return Err(CoreError::SingularSubsystem(factor_id));
        }
        scratch.z1.copy_from_slice(&scratch.uvec);
        chol_solve_in_place(&scratch.g, m, &mut scratch.z1);
        scratch.z2.copy_from_slice(&scratch.tvec);
        chol_solve_in_place(&scratch.g, m, &mut scratch.z2);
        let mut u_g_u = T::zero();
        let mut u_g_t = T::zero();
        for a in 0..m {
            u_g_u += scratch.uvec[a] * scratch.z1[a];
            u_g_t += scratch.uvec[a] * scratch.z2[a];
        }
        let lam_msg = lam * jj - lam * lam * j_u + lam * lam * u_g_u;
        let eta_msg = lam * jtc - lam * j_t + lam * u_g_t;
        out.push(GaussianInfo::new(eta_msg, lam_msg.max(T::zero())));
    }
    Ok(meta.energy)
}

/// All factor→variable messages by explicit (V−1)×(V−1) marginalization —
/// the reference the Woodbury fast path must match to 1e-8, and the fallback
/// when the fast path's preconditions fail.
///
/// For neighbor `i`:
/// `Λ_msg = Λ^(φ)_ii − Λ^(φ)_{i,\i}(Λ^(φ)_{\i\i}+D_{\i\i})⁻¹Λ^(φ)_{\i,i}`,
/// `η_msg = η^(φ)_i − Λ^(φ)_{i,\i}(Λ^(φ)_{\i\i}+D_{\i\i})⁻¹(η^(φ)+e)_{\i}`,
/// where `D`, `e` are the incoming message precisions/informations.
///
/// A unary factor (V = 1) has nothing to marginalize: the message is
/// `(η^(φ), Λ^(φ))` itself. Returns `SingularSubsystem` if a subsystem cannot
/// be factorized even with jitter.
pub fn factor_to_vars_naive<T: Real>(
    def: &FactorDef<T>,
    x0: &[T],
    incoming: &[GaussianInfo<T>],
    factor_id: usize,
) -> Result<Vec<GaussianInfo<T>>> {
    let v = def.arity();
    debug_assert_eq!(incoming.len(), v);
    let lin = def.linearize(x0, factor_id)?;
    let m = def.m_dim();

    // Materialize Λ^(φ) = Jᵀ Λ_y J (fine at reference-path scale).
    let mut lam_f = DenseMat::zeros(v, v);
    for a in 0..v {
        for b in 0..v {
            let mut s = T::zero();
            for r in 0..m {
                s += lin.j[(r, a)] * lin.j[(r, b)];
            }
            lam_f[(a, b)] = lin.lam_y_eff * s;
        }
    }

    let mut out = vec![GaussianInfo::zero(); v];
    if v == 1 {
        out[0] = GaussianInfo::new(lin.eta_f[0], lam_f[(0, 0)]);
        return Ok(out);
    }

    for i in 0..v {
        // Assemble the (V−1) subsystem.
        let others: Vec<usize> = (0..v).filter(|&k| k != i).collect();
        let nn = v - 1;
        let mut a = DenseMat::zeros(nn, nn);
        let mut col = vec![T::zero(); nn];
        let mut rhs = vec![T::zero(); nn];
        for (p, &kp) in others.iter().enumerate() {
            for (q, &kq) in others.iter().enumerate() {
                a[(p, q)] = lam_f[(kp, kq)];
            }
            a[(p, p)] += incoming[kp].lam;
            col[p] = lam_f[(kp, i)];
            rhs[p] = lin.eta_f[kp] + incoming[kp].eta;
        }
        let chol = crate::linalg::Cholesky::new(&a)
            .map_err(|_| CoreError::SingularSubsystem(factor_id))?;
        let sol_col = chol.solve(&col);
        let sol_rhs = chol.solve(&rhs);
        let mut lam_msg = lam_f[(i, i)];
        let mut eta_msg = lin.eta_f[i];
        for p in 0..nn {
            lam_msg -= col[p] * sol_col[p];
            eta_msg -= col[p] * sol_rhs[p];
        }
        out[i] = GaussianInfo::new(eta_msg, lam_msg);
    }
    Ok(out)
}

/// Per-run engine state (buffers sized to the graph, never reallocated in
/// the iteration loop).
struct State<T> {
    rng: ChaCha8Rng,
    pass_counter: u64,
    /// Neighbor-version sum at the factor's last write-through; `NOT_FIXED`
    /// when the factor is not known to sit at its fixed point.
    fixed_vers: Vec<u64>,
    f_energy: Vec<T>,
    is_static: Vec<bool>,
    static_ids: Vec<u32>,
    /// Indices of layers containing at least one non-static factor.
    schedulable: Vec<u32>,
    sched: Vec<u32>,
    /// Per-variable belief-delta accumulators; nonzero only between a factor
    /// phase and the matching variable phase.
    delta: Vec<GaussianInfo<T>>,
    x0: Vec<T>,
    inc: Vec<GaussianInfo<T>>,
    targets: Vec<GaussianInfo<T>>,
    fast: FastScratch<T>,
    scratch_e: Vec<T>,
    wt_tol: T,
    stats: EngineStats,
    iter_max_delta: T,
    iter_dropped: u64,
    iter_singular: u64,
}

impl<T: Real> State<T> {
    fn new(graph: &FactorGraph<T>, cfg: &EngineConfig) -> Self {
        let nf = graph.num_factors();
        let mut is_static = vec![false; nf];
        let mut static_ids = Vec::new();
        for f in 0..nf {
            let def = graph.factor_def(f);
            // Static: fully determined at build time — unary (no incoming
            // dependence), linear (no linearization-point dependence), and
            // non-robust (no residual-dependent reweighting).
            if def.arity() == 1 && def.is_linear() && def.robust.is_none() {
                is_static[f] = true;
                static_ids.push(f as u32);
            }
        }
        let mut schedulable = Vec::new();
        for (li, layer) in graph.layers().iter().enumerate() {
            if layer.factors.clone().any(|f| !is_static[f]) {
                schedulable.push(li as u32);
            }
        }
        let wt_tol = real::<T>(1e-11).max(T::epsilon() * real::<T>(10.0));
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            pass_counter: 0,
            fixed_vers: vec![NOT_FIXED; nf],
            f_energy: vec![T::zero(); nf],
            is_static,
            static_ids,
            schedulable,
            sched: Vec::new(),
            delta: vec![GaussianInfo::zero(); graph.num_variables()],
            x0: Vec::new(),
            inc: Vec::new(),
            targets: Vec::new(),
            fast: FastScratch::default(),
            scratch_e: Vec::new(),
            wt_tol,
            stats: EngineStats::default(),
            iter_max_delta: T::zero(),
            iter_dropped: 0,
            iter_singular: 0,
        }
    }

    fn fill_schedule(&mut self, cfg: &EngineConfig) {
        let State { sched, schedulable, rng, .. } = self;
        sched.clear();
        match cfg.schedule {
            Schedule::Sweep => {
                sched.extend(schedulable.iter());
                sched.extend(schedulable.iter().rev());
            }
            Schedule::RandomLayers => {
                let l = schedulable.len();
                for _ in 0..l {
                    sched.push(schedulable[rng.gen_range(0..l)]);
                }
            }
        }
    }

    /// Static factors: compute and apply their messages exactly once.
    fn static_init(&mut self, graph: &mut FactorGraph<T>) -> Result<()> {
        for si in 0..self.static_ids.len() {
            let f = self.static_ids[si] as usize;
            let es = graph.edge_start[f] as usize;
            let vu = graph.edge_var[es] as usize;
            self.x0.clear();
            self.x0.push(graph.v_lin[vu]);
            self.inc.clear();
            self.inc.push(graph.v_belief[vu].divide(graph.edge_out[es]));
            let energy = {
                let def = &graph.f_def[f];
                factor_to_vars_fast(def, &self.x0, &self.inc, f, &mut self.fast, &mut self.targets)?
            };
            self.f_energy[f] = energy;
            let cur = graph.edge_out[es];
            let new = self.targets[0];
            if new != cur {
                graph.edge_out[es] = new;
                let b = graph.v_belief[vu].divide(cur).product(new);
                graph.v_belief[vu] = b;
                graph.v_version[vu] = graph.v_version[vu].wrapping_add(1);
                if b.lam > T::zero() && graph.v_observed[vu].is_none() {
                    graph.v_lin[vu] = b.eta / b.lam;
                }
            }
        }
        Ok(())
    }

    fn factor_phase(
        &mut self,
        graph: &mut FactorGraph<T>,
        cfg: &EngineConfig,
        range: std::ops::Range<usize>,
    ) -> Result<()> {
        self.pass_counter += 1;
        let beta = real::<T>(cfg.damping);
        let one_m_beta = T::one() - beta;
        for f in range {
            if self.is_static[f] {
                continue;
            }
            let es = graph.edge_start[f] as usize;
            let ee = graph.edge_start[f + 1] as usize;

            // Exact fixed-point skip: versions are monotonic, so an equal sum
            // means no neighbor belief or linearization point has moved.
            let mut vers_sum: u64 = 0;
            for &vv in &graph.edge_var[es..ee] {
                vers_sum += graph.v_version[vv as usize] as u64;
            }
            if cfg.fixed_point_skip && self.fixed_vers[f] == vers_sum {
                self.stats.skipped_fixed += 1;
                continue;
            }

            if cfg.msg_dropout > 0.0
                && dropout_roll(cfg.seed, self.pass_counter, f as u64) < cfg.msg_dropout
            {
                self.stats.dropped += 1;
                self.iter_dropped += 1;
                continue;
            }

            // Snapshot the neighborhood (Jacobi within the layer).
            self.x0.clear();
            self.inc.clear();
            for (k, &vv) in graph.edge_var[es..ee].iter().enumerate() {
                let vu = vv as usize;
                self.x0.push(graph.v_lin[vu]);
                self.inc.push(graph.v_belief[vu].divide(graph.edge_out[es + k]));
            }

            let def = &graph.f_def[f];
            let energy = match factor_to_vars_fast(
                def,
                &self.x0,
                &self.inc,
                f,
                &mut self.fast,
                &mut self.targets,
            ) {
                Ok(e) => e,
                Err(CoreError::ZeroIncomingPrecision(_)) | Err(CoreError::SingularSubsystem(_)) => {
                    self.stats.naive_fallbacks += 1;
                    log::debug!("factor {f}: fast path unavailable, using reference marginalization");
                    match factor_to_vars_naive(def, &self.x0, &self.inc, f) {
                        Ok(msgs) => {
                            self.targets.clear();
                            self.targets.extend(msgs);
                            def.energy(&self.x0)
                        }
                        Err(CoreError::SingularSubsystem(_)) | Err(CoreError::NotSpd { .. }) => {
                            self.stats.singular_skips += 1;
                            self.iter_singular += 1;
                            self.fixed_vers[f] = NOT_FIXED;
                            continue;
                        }
                        Err(e) => return Err(e),
                    }
                }
                Err(e) => return Err(e),
            };

            if self.targets.iter().any(|t| !t.is_finite()) {
                self.stats.singular_skips += 1;
                self.iter_singular += 1;
                self.fixed_vers[f] = NOT_FIXED;
                continue;
            }
            self.f_energy[f] = energy;

            // Factor-level gap between targets and current messages decides
            // between a damped write and an exact (undamped) write-through.
            let mut gap = T::zero();
            let mut scale = T::one();
            for (k, tgt) in self.targets.iter().enumerate() {
                let cur = graph.edge_out[es + k];
                gap = gap.max((tgt.eta - cur.eta).abs()).max((tgt.lam - cur.lam).abs());
                scale = scale.max(tgt.eta.abs()).max(tgt.lam.abs());
            }
            let through = cfg.fixed_point_skip && gap <= self.wt_tol * scale;
            self.fixed_vers[f] = if through { vers_sum } else { NOT_FIXED };

            for (k, tgt) in self.targets.iter().enumerate() {
                let cur = graph.edge_out[es + k];
                let new = if through || cfg.damping == 0.0 {
                    *tgt
                } else {
                    GaussianInfo::new(
                        one_m_beta * tgt.eta + beta * cur.eta,
                        one_m_beta * tgt.lam + beta * cur.lam,
                    )
                };
                graph.edge_out[es + k] = new;
                let d = &mut self.delta[graph.edge_var[es + k] as usize];
                d.eta += new.eta - cur.eta;
                d.lam += new.lam - cur.lam;
            }
            self.stats.updates += 1;
        }
        Ok(())
    }

    fn variable_phase(&mut self, graph: &mut FactorGraph<T>, layer_idx: usize, relin: bool) {
        let vars = &graph.layers[layer_idx].vars;
        for &vv in vars {
            let vu = vv as usize;
            let d = self.delta[vu];
            let mut bumped = false;
            if d.eta != T::zero() || d.lam != T::zero() {
                self.delta[vu] = GaussianInfo::zero();
                let old = graph.v_belief[vu];
                let new = old.product(d);
                graph.v_belief[vu] = new;
                bumped = true;
                if new.lam > T::zero() {
                    // Track the mean movement; a belief materializing from a
                    // zero-precision prior is measured against its previous
                    // linearization point.
                    let old_mean = if old.lam > T::zero() { old.eta / old.lam } else { graph.v_lin[vu] };
                    let dm = (new.eta / new.lam - old_mean).abs();
                    if dm > self.iter_max_delta {
                        self.iter_max_delta = dm;
                    }
                }
            }
            if relin && graph.v_observed[vu].is_none() {
                let b = graph.v_belief[vu];
                if b.lam > T::zero() {
                    let mean = b.eta / b.lam;
                    if mean != graph.v_lin[vu] {
                        graph.v_lin[vu] = mean;
                        bumped = true;
                    }
                }
            }
            if bumped {
                graph.v_version[vu] = graph.v_version[vu].wrapping_add(1);
            }
        }
    }

    /// Total energy at the current linearization points: cached per-factor
    /// energies (statics refreshed here — their `x₀` tracks the beliefs even
    /// though their messages never change) plus the prior energy.
    fn energy_metric(&mut self, graph: &FactorGraph<T>) -> f64 {
        for si in 0..self.static_ids.len() {
            let f = self.static_ids[si] as usize;
            self.f_energy[f] = graph.factor_energy(f, &mut self.scratch_e);
        }
        let mut e = graph.prior_energy().to_f64_c();
        for fe in &self.f_energy {
            e += fe.to_f64_c();
        }
        e
    }
}

/// Run loopy GBP over a finalized graph, reporting one [`IterRecord`] per
/// iteration to `sink`.
///
/// The graph is left holding the final beliefs, messages, and linearization
/// points (the MAP estimate), so posterior extraction and warm restarts both
/// read straight off the graph. Deterministic: identical inputs and
/// configuration produce bitwise-identical beliefs, message arenas, and
/// metric streams (modulo `wall_ms`).
pub fn run_inference<T: Real>(
    graph: &mut FactorGraph<T>,
    cfg: &EngineConfig,
    sink: &mut dyn MetricsSink,
) -> Result<InferenceResult> {
    cfg.validate()?;
    if !graph.is_finalized() {
        return Err(CoreError::InvalidParameter(
            "run_inference requires a finalized graph".into(),
        ));
    }

    let mut st = State::new(graph, cfg);
    graph.recompute_beliefs();
    st.static_init(graph)?;
    for f in 0..graph.num_factors() {
        if !st.is_static[f] {
            st.f_energy[f] = graph.factor_energy(f, &mut st.scratch_e);
        }
    }

    let mut iterations_run = 0;
    let mut converged = false;
    let mut last_delta = 0.0f64;
    let mut last_energy = st.energy_metric(graph);

    for iter in 0..cfg.iters {
        let t0 = Instant::now();
        st.iter_max_delta = T::zero();
        st.iter_dropped = 0;
        st.iter_singular = 0;
        let relin = iter % cfg.relinearize_every == 0;

        st.fill_schedule(cfg);
        for si in 0..st.sched.len() {
            let l = st.sched[si] as usize;
            let range = graph.layers()[l].factors.clone();
            st.factor_phase(graph, cfg, range)?;
            st.variable_phase(graph, l, relin);
        }

        if cfg.refresh_every > 0 && (iter + 1) % cfg.refresh_every == 0 {
            // Cancel incremental float drift; sub-tolerance by construction,
            // so versions are deliberately not bumped.
            graph.recompute_beliefs();
        }

        last_energy = st.energy_metric(graph);
        last_delta = st.iter_max_delta.to_f64_c();
        iterations_run = iter + 1;
        sink.iteration(IterRecord {
            iteration: iter,
            energy: last_energy,
            max_belief_delta: last_delta,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        if relin {
            if let Some(tol) = cfg.convergence_tol {
                if last_delta < tol {
                    converged = true;
                }
            }
            // A sweep iteration that moved nothing and skipped nothing
            // randomly cannot change anything ever again.
            if cfg.schedule == Schedule::Sweep
                && last_delta == 0.0
                && st.iter_dropped == 0
                && st.iter_singular == 0
            {
                converged = true;
            }
        }
        if converged {
            log::debug!("converged after {iterations_run} iterations (max_belief_delta {last_delta:.3e})");
            break;
        }
    }

    Ok(InferenceResult {
        iterations_run,
        final_energy: last_energy,
        converged,
        max_belief_delta: last_delta,
        stats: st.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::{Activation, FixedBias, Measurement, Robust};
    use crate::graph::{FactorGraph, VarKind};
    use crate::metrics::{NullSink, VecSink};
    use crate::oracle::joint_marginals;

    fn cfg_plain(iters: usize) -> EngineConfig {
        EngineConfig { iters, ..EngineConfig::default() }
    }

    /// Random loopy grid with proper priors on every variable; difference
    /// factors along rows and columns, optionally split into two layers.
    fn grid_graph(h: usize, w: usize, seed: u64, two_layers: bool) -> FactorGraph<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = FactorGraph::new();
        let mut ids = vec![vec![0usize; w]; h];
        for row in ids.iter_mut() {
            for id in row.iter_mut() {
                *id = g.add_variable(
                    VarKind::Activation,
                    GaussianInfo::from_moments(rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0)),
                );
            }
        }
        if two_layers {
            g.begin_layer("horizontal");
        }
        for r in 0..h {
            for c in 0..w - 1 {
                g.add_factor(
                    FactorDef::new(
                        Measurement::Difference,
                        vec![rng.gen_range(-0.5..0.5)],
                        rng.gen_range(0.5..1.5),
                    )
                    .unwrap(),
                    &[ids[r][c + 1], ids[r][c]],
                )
                .unwrap();
            }
        }
        if two_layers {
            g.begin_layer("vertical");
        }
        for r in 0..h - 1 {
            for c in 0..w {
                g.add_factor(
                    FactorDef::new(
                        Measurement::Difference,
                        vec![rng.gen_range(-0.5..0.5)],
                        rng.gen_range(0.5..1.5),
                    )
                    .unwrap(),
                    &[ids[r + 1][c], ids[r][c]],
                )
                .unwrap();
            }
        }
        g.finalize();
        g
    }

    #[test]
    fn unary_static_factor_folds_into_belief() {
        // Prior N(0,1) × message N(2,1) → belief (η=2, Λ=2): mean 1, var ½.
        let mut g = FactorGraph::<f64>::new();
        let x = g.add_variable(VarKind::Parameter, GaussianInfo::from_moments(0.0, 1.0));
        g.add_factor(FactorDef::new(Measurement::Identity, vec![2.0], 1.0).unwrap(), &[x])
            .unwrap();
        g.finalize();
        let res = run_inference(&mut g, &cfg_plain(10), &mut NullSink).unwrap();
        let (mean, var) = g.belief(x).unwrap().to_moments().unwrap();
        assert!((mean - 1.0).abs() < 1e-14);
        assert!((var - 0.5).abs() < 1e-14);
        // Static-only graph: no schedulable layer, first iteration detects
        // the fixed point.
        assert!(res.converged);
        assert_eq!(res.iterations_run, 1);
        assert_eq!(res.stats.updates, 0);
    }

    #[test]
    fn naive_messages_match_two_variable_elimination() {
        // Linear factor h = x₁ − x₂, y = 0, σ = 1, incoming N(3, 1) on x₂ →
        // message to x₁ has mean 3, precision 0.5.
        let def = FactorDef::new(Measurement::<f64>::Difference, vec![0.0], 1.0).unwrap();
        let incoming = [GaussianInfo::zero(), GaussianInfo::from_moments(3.0, 1.0)];
        let msgs = factor_to_vars_naive(&def, &[0.0, 0.0], &incoming, 0).unwrap();
        let (mean, var) = msgs[0].to_moments().unwrap();
        assert!((mean - 3.0).abs() < 1e-12);
        assert!((var - 2.0).abs() < 1e-12, "precision 0.5 = variance 2");
    }

    #[test]
    fn unary_factor_message_is_its_own_linearization() {
        let def = FactorDef::new(Measurement::<f64>::Identity, vec![1.5], 0.5).unwrap();
        let msgs = factor_to_vars_naive(&def, &[0.0], &[GaussianInfo::zero()], 0).unwrap();
        // Λ^(φ) = 1/σ² = 4, η^(φ) = 4·1.5 = 6.
        assert!((msgs[0].lam - 4.0).abs() < 1e-12);
        assert!((msgs[0].eta - 6.0).abs() < 1e-12);
    }

    #[test]
    fn two_variable_chain_matches_joint_solve() {
        let mut g = FactorGraph::<f64>::new();
        let a = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(0.0, 100.0));
        let b = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(3.0, 1.0));
        g.add_factor(FactorDef::new(Measurement::Difference, vec![0.0], 1.0).unwrap(), &[a, b])
            .unwrap();
        g.finalize();
        let oracle = joint_marginals(&g).unwrap();
        let res = run_inference(&mut g, &cfg_plain(4), &mut NullSink).unwrap();
        assert!(res.stats.updates > 0);
        for v in [a, b] {
            let (mean, var) = g.belief(v).unwrap().to_moments().unwrap();
            assert!((mean - oracle[v].0).abs() < 1e-12, "var {v} mean");
            assert!((var - oracle[v].1).abs() < 1e-12, "var {v} variance");
        }
    }

    /// GBP is exact on trees: after 2·depth sweep iterations both means and
    /// variances match the dense joint solve to 1e-9.
    #[test]
    fn random_trees_are_exact_after_two_depth_sweeps() {
        for seed in [11u64, 12, 13] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(20..=50);
            let mut g = FactorGraph::<f64>::new();
            let mut depth_of = vec![0usize; n];
            for i in 0..n {
                g.add_variable(
                    VarKind::Activation,
                    GaussianInfo::from_moments(rng.gen_range(-2.0..2.0), rng.gen_range(0.5..2.0)),
                );
                if i > 0 {
                    let parent = rng.gen_range(0..i);
                    depth_of[i] = depth_of[parent] + 1;
                    g.add_factor(
                        FactorDef::new(
                            Measurement::Difference,
                            vec![rng.gen_range(-1.0..1.0)],
                            rng.gen_range(0.4..1.5),
                        )
                        .unwrap(),
                        &[i, parent],
                    )
                    .unwrap();
                }
            }
            g.finalize();
            let depth = depth_of.iter().copied().max().unwrap().max(1);
            let oracle = joint_marginals(&g).unwrap();
            run_inference(&mut g, &cfg_plain(2 * depth), &mut NullSink).unwrap();
            for v in 0..n {
                let (mean, var) = g.belief(v).unwrap().to_moments().unwrap();
                assert!(
                    (mean - oracle[v].0).abs() < 1e-9,
                    "seed {seed} var {v}: mean {mean} vs {}",
                    oracle[v].0
                );
                assert!(
                    (var - oracle[v].1).abs() < 1e-9,
                    "seed {seed} var {v}: var {var} vs {}",
                    oracle[v].1
                );
            }
        }
    }

    /// On loopy Gaussian graphs converged GBP means are exact (variances are
    /// not — they come out overconfident and are deliberately not compared).
    #[test]
    fn loopy_grid_means_match_joint_solve() {
        let mut g = grid_graph(4, 4, 21, false);
        let oracle = joint_marginals(&g).unwrap();
        let cfg = EngineConfig {
            iters: 400,
            damping: 0.3,
            convergence_tol: Some(1e-13),
            ..EngineConfig::default()
        };
        let res = run_inference(&mut g, &cfg, &mut NullSink).unwrap();
        assert!(res.converged, "grid should converge, delta {}", res.max_belief_delta);
        for v in 0..g.num_variables() {
            let (mean, _) = g.belief(v).unwrap().to_moments().unwrap();
            assert!((mean - oracle[v].0).abs() < 1e-6, "var {v}: {mean} vs {}", oracle[v].0);
        }
    }

    /// The Woodbury fast path must reproduce the dense reference across the
    /// whole measurement catalog, mixed arities, robust weights, and a wide
    /// range of incoming precisions.
    #[test]
    fn fast_kernel_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut scratch = FastScratch::default();
        let mut fast = Vec::new();
        let acts = [
            Activation::Identity,
            Activation::LeakyRelu { slope: 0.1 },
            Activation::Sigmoid,
        ];
        for case in 0..60 {
            let meas: Measurement<f64> = match case % 9 {
                0 => Measurement::Identity,
                1 => Measurement::Difference,
                2 => {
                    let m = rng.gen_range(1..=4);
                    let v = rng.gen_range(2..=7);
                    let data = (0..m * v).map(|_| rng.gen_range(-1.5..1.5)).collect();
                    Measurement::Linear { a: DenseMat::from_rows(m, v, data).unwrap() }
                }
                3 => Measurement::AffineUnit {
                    n: rng.gen_range(1..=4),
                    act: acts[rng.gen_range(0..3)],
                    has_bias: rng.gen_bool(0.5),
                },
                4 => {
                    let n = rng.gen_range(1..=4);
                    Measurement::AffineFixedCoeff {
                        coeffs: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        act: acts[rng.gen_range(0..3)],
                        bias: if rng.gen_bool(0.5) {
                            FixedBias::Variable
                        } else {
                            FixedBias::Constant(rng.gen_range(-0.5..0.5))
                        },
                    }
                }
                5 => Measurement::Upsample { k2: 4 },
                6 => Measurement::MaxPool { k2: 4 },
                7 => Measurement::Softmax { c: rng.gen_range(2..=5) },
                _ => Measurement::DenseJoint { d: 2, c: 2, act: acts[rng.gen_range(0..3)] },
            };
            let v = meas.arity();
            let m = meas.m_dim();
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sigma = 10f64.powf(rng.gen_range(-1.5..1.0));
            let mut def = FactorDef::new(meas, y, sigma).unwrap();
            if rng.gen_bool(0.3) {
                def = def.with_robust(Robust {
                    n_rob: rng.gen_range(0.5..3.0),
                    eps_flat: if rng.gen_bool(0.5) { 0.0 } else { 0.05 },
                });
            }
            let x0: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let incoming: Vec<GaussianInfo<f64>> = (0..v)
                .map(|_| {
                    let lam = 10f64.powf(rng.gen_range(-1.3..1.3));
                    GaussianInfo::new(rng.gen_range(-3.0..3.0), lam)
                })
                .collect();
            let naive = factor_to_vars_naive(&def, &x0, &incoming, case).unwrap();
            factor_to_vars_fast(&def, &x0, &incoming, case, &mut scratch, &mut fast).unwrap();
            assert_eq!(fast.len(), v);
            for i in 0..v {
                let scale = 1.0 + naive[i].eta.abs().max(naive[i].lam.abs());
                assert!(
                    (fast[i].eta - naive[i].eta).abs() / scale < 1e-8,
                    "case {case} slot {i} eta: {} vs {}",
                    fast[i].eta,
                    naive[i].eta
                );
                assert!(
                    (fast[i].lam - naive[i].lam).abs() / scale < 1e-8,
                    "case {case} slot {i} lam: {} vs {}",
                    fast[i].lam,
                    naive[i].lam
                );
            }
        }
    }

    /// Damping blends in natural parameters with β weighting the old message.
    /// A robust unary factor has a constant target t, so after one iteration
    /// (the single layer is visited twice by the sweep):
    /// msg = (1−β)t + β(1−β)t = 0.75·t for β = 0.5.
    #[test]
    fn damping_blends_messages_in_natural_params() {
        let mut g = FactorGraph::<f64>::new();
        let x = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(0.0, 1.0));
        let def = FactorDef::new(Measurement::Identity, vec![2.0], 1.0)
            .unwrap()
            .with_robust(Robust { n_rob: 100.0, eps_flat: 0.0 });
        g.add_factor(def, &[x]).unwrap();
        g.finalize();
        let cfg = EngineConfig { iters: 1, damping: 0.5, ..EngineConfig::default() };
        run_inference(&mut g, &cfg, &mut NullSink).unwrap();
        let msg = g.out_msg(0, 0);
        assert!((msg.eta - 0.75 * 2.0).abs() < 1e-15, "eta {}", msg.eta);
        assert!((msg.lam - 0.75).abs() < 1e-15, "lam {}", msg.lam);
    }

    #[test]
    fn dropout_skips_expected_fraction_deterministically() {
        let build = || {
            let mut g = FactorGraph::<f64>::new();
            for i in 0..400 {
                let x = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(0.0, 1.0));
                g.add_factor(
                    FactorDef::new(Measurement::Identity, vec![i as f64 * 0.01], 1.0)
                        .unwrap()
                        .with_robust(Robust { n_rob: 1e6, eps_flat: 0.0 }),
                    &[x],
                )
                .unwrap();
            }
            g.finalize();
            g
        };
        let cfg = EngineConfig {
            iters: 1,
            msg_dropout: 0.3,
            seed: 5,
            fixed_point_skip: false,
            ..EngineConfig::default()
        };
        let mut g1 = build();
        let r1 = run_inference(&mut g1, &cfg, &mut NullSink).unwrap();
        // 800 attempts (400 factors × 2 passes) at p = 0.3: mean 240, σ ≈ 13.
        assert!(
            (189..=291).contains(&(r1.stats.dropped as i64)),
            "dropped {} out of 800",
            r1.stats.dropped
        );
        let mut g2 = build();
        let r2 = run_inference(&mut g2, &cfg, &mut NullSink).unwrap();
        assert_eq!(r1.stats, r2.stats, "same seed must replay identically");
        let cfg_other = EngineConfig { seed: 6, ..cfg.clone() };
        let mut g3 = build();
        let r3 = run_inference(&mut g3, &cfg_other, &mut NullSink).unwrap();
        assert!(r3.stats.dropped > 0);
    }

    /// The fixed-point skip is an optimization, not an approximation: beliefs
    /// with and without it agree to the write-through tolerance, and once a
    /// run has converged, running further iterations changes nothing bitwise.
    #[test]
    fn fixed_point_skip_preserves_beliefs() {
        let cfg_on = EngineConfig { iters: 60, damping: 0.2, ..EngineConfig::default() };
        let cfg_off = EngineConfig { fixed_point_skip: false, ..cfg_on.clone() };
        let mut ga = grid_graph(5, 5, 77, false);
        let mut gb = grid_graph(5, 5, 77, false);
        let ra = run_inference(&mut ga, &cfg_on, &mut NullSink).unwrap();
        run_inference(&mut gb, &cfg_off, &mut NullSink).unwrap();
        assert!(ra.stats.skipped_fixed > 0, "skip should engage on a converged grid");
        for v in 0..ga.num_variables() {
            let a = ga.belief(v).unwrap();
            let b = gb.belief(v).unwrap();
            assert!((a.eta - b.eta).abs() < 1e-9, "var {v} eta {} vs {}", a.eta, b.eta);
            assert!((a.lam - b.lam).abs() < 1e-9, "var {v} lam {} vs {}", a.lam, b.lam);
        }
        // Idempotence at the fixed point: a fresh run over the converged
        // graph re-derives beliefs from the message arena (different
        // summation order), so agreement is to rounding, not bitwise.
        let before: Vec<GaussianInfo<f64>> = ga.beliefs().to_vec();
        run_inference(&mut ga, &EngineConfig { iters: 20, ..cfg_on }, &mut NullSink).unwrap();
        for (v, (x, y)) in before.iter().zip(ga.beliefs()).enumerate() {
            assert!((x.eta - y.eta).abs() < 1e-12 * (1.0 + x.eta.abs()), "var {v} eta");
            assert!((x.lam - y.lam).abs() < 1e-12 * (1.0 + x.lam.abs()), "var {v} lam");
        }
    }

    /// Incremental belief deltas must stay consistent with a from-scratch
    /// recomputation over the message arena.
    #[test]
    fn delta_bookkeeping_matches_full_recompute() {
        let mut g = grid_graph(6, 6, 3, true);
        let cfg = EngineConfig { iters: 37, damping: 0.15, ..EngineConfig::default() };
        run_inference(&mut g, &cfg, &mut NullSink).unwrap();
        let before: Vec<GaussianInfo<f64>> = g.beliefs().to_vec();
        g.recompute_beliefs();
        for (v, (a, b)) in before.iter().zip(g.beliefs()).enumerate() {
            let se = 1e-12 * (1.0 + a.eta.abs());
            let sl = 1e-12 * (1.0 + a.lam.abs());
            assert!((a.eta - b.eta).abs() < se, "var {v} eta drift {} vs {}", a.eta, b.eta);
            assert!((a.lam - b.lam).abs() < sl, "var {v} lam drift {} vs {}", a.lam, b.lam);
        }
    }

    #[test]
    fn determinism_is_bitwise_under_dropout_and_random_layers() {
        let cfg = EngineConfig {
            iters: 25,
            damping: 0.2,
            msg_dropout: 0.4,
            seed: 7,
            schedule: Schedule::RandomLayers,
            ..EngineConfig::default()
        };
        let mut results = Vec::new();
        for _ in 0..2 {
            let mut g = grid_graph(5, 5, 42, true);
            let mut sink = VecSink::default();
            let res = run_inference(&mut g, &cfg, &mut sink).unwrap();
            results.push((res.final_energy, res.max_belief_delta, sink.records, g.beliefs().to_vec()));
        }
        let (e1, d1, rec1, b1) = &results[0];
        let (e2, d2, rec2, b2) = &results[1];
        assert_eq!(e1.to_bits(), e2.to_bits());
        assert_eq!(d1.to_bits(), d2.to_bits());
        assert_eq!(rec1.len(), rec2.len());
        for ((bi1, r1), (bi2, r2)) in rec1.iter().zip(rec2.iter()) {
            assert_eq!(bi1, bi2);
            assert_eq!(r1.iteration, r2.iteration);
            assert_eq!(r1.energy.to_bits(), r2.energy.to_bits());
            assert_eq!(r1.max_belief_delta.to_bits(), r2.max_belief_delta.to_bits());
            // wall_ms deliberately not compared.
        }
        assert_eq!(b1, b2);
    }

    /// A zero-precision prior forces D = 0 on the first pass; the engine must
    /// fall back to the dense reference and still land on the joint solution.
    #[test]
    fn zero_prior_variable_triggers_naive_fallback() {
        let mut g = FactorGraph::<f64>::new();
        let a = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(1.0, 1.0));
        let b = g.add_variable(VarKind::Activation, GaussianInfo::zero());
        let c = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(-1.0, 2.0));
        g.add_factor(FactorDef::new(Measurement::Difference, vec![0.5], 1.0).unwrap(), &[b, a])
            .unwrap();
        g.add_factor(FactorDef::new(Measurement::Difference, vec![-0.25], 0.8).unwrap(), &[c, b])
            .unwrap();
        g.finalize();
        let oracle = joint_marginals(&g).unwrap();
        let res = run_inference(&mut g, &cfg_plain(30), &mut NullSink).unwrap();
        assert!(res.stats.naive_fallbacks > 0);
        for v in [a, b, c] {
            let (mean, var) = g.belief(v).unwrap().to_moments().unwrap();
            assert!((mean - oracle[v].0).abs() < 1e-9, "var {v} mean");
            assert!((var - oracle[v].1).abs() < 1e-9, "var {v} variance");
        }
    }

    #[test]
    fn convergence_tolerance_stops_early() {
        let mut g = grid_graph(3, 3, 9, false);
        let cfg = EngineConfig {
            iters: 500,
            convergence_tol: Some(1e-12),
            ..EngineConfig::default()
        };
        let res = run_inference(&mut g, &cfg, &mut NullSink).unwrap();
        assert!(res.converged);
        assert!(res.iterations_run < 500, "ran {}", res.iterations_run);
        assert!(res.max_belief_delta < 1e-12);
    }

    #[test]
    fn schedule_parses_from_config_strings() {
        assert_eq!("sweep".parse::<Schedule>().unwrap(), Schedule::Sweep);
        assert_eq!("random_layers".parse::<Schedule>().unwrap(), Schedule::RandomLayers);
        assert!("zigzag".parse::<Schedule>().is_err());
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let bad = EngineConfig { damping: 1.0, ..EngineConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EngineConfig { msg_dropout: -0.1, ..EngineConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EngineConfig { relinearize_every: 0, ..EngineConfig::default() };
        assert!(bad.validate().is_err());
    }
}
