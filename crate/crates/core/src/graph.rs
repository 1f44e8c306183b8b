//! Factor graph topology, message storage, and beliefs.
//!
//! The graph is bipartite: scalar variable nodes and factor nodes, with the
//! factor→variable message of every edge stored persistently (supporting
//! asynchronous schedules) and variable→factor messages derived on demand in
//! the message-reuse form `belief ÷ stored out-message`.
//!
//! Storage is struct-of-arrays with one flattened edge arena: graphs at desk
//! scale carry ~10⁷ edges, and the engine streams them once or twice per
//! iteration, so per-node heap allocations would dominate the run time.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::factor::FactorDef;
use crate::gaussian::GaussianInfo;
use crate::real::Real;

pub type VarId = usize;
pub type FactorId = usize;

/// Role of a variable in the model; affects initialization and extraction,
/// never the message math.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Input,
    Activation,
    Parameter,
    /// Last-layer outputs (logits / regression outputs / reconstructed pixels).
    Output,
}

/// A named group of factors updated together by one schedule step.
#[derive(Clone, Debug)]
pub struct LayerGroup {
    pub name: String,
    /// Contiguous factor-id range (factors are added layer by layer).
    pub factors: std::ops::Range<usize>,
    /// Unique variables adjacent to this layer, in first-touch order.
    /// Computed by `finalize`; drives the belief-update phase.
    pub vars: Vec<u32>,
}

/// Bipartite factor graph with per-edge message storage.
pub struct FactorGraph<T> {
    // Variables (struct-of-arrays).
    pub(crate) v_kind: Vec<VarKind>,
    pub(crate) v_prior: Vec<GaussianInfo<T>>,
    pub(crate) v_belief: Vec<GaussianInfo<T>>,
    pub(crate) v_lin: Vec<T>,
    pub(crate) v_observed: Vec<Option<T>>,
    /// Monotonic change counter; bumps whenever the belief moves. Factor
    /// updates store the sum over their neighbors to detect "nothing changed".
    pub(crate) v_version: Vec<u32>,

    // Factors, with one flattened edge arena.
    pub(crate) f_def: Vec<FactorDef<T>>,
    pub(crate) f_layer: Vec<u32>,
    /// Prefix offsets into `edge_var`/`edge_out`; length `factors+1`.
    pub(crate) edge_start: Vec<u32>,
    pub(crate) edge_var: Vec<u32>,
    pub(crate) edge_out: Vec<GaussianInfo<T>>,

    pub(crate) layers: Vec<LayerGroup>,
    finalized: bool,
}

impl<T: Real> Default for FactorGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> FactorGraph<T> {
    pub fn new() -> Self {
        Self {
            v_kind: Vec::new(),
            v_prior: Vec::new(),
            v_belief: Vec::new(),
            v_lin: Vec::new(),
            v_observed: Vec::new(),
            v_version: Vec::new(),
            f_def: Vec::new(),
            f_layer: Vec::new(),
            edge_start: vec![0],
            edge_var: Vec::new(),
            edge_out: Vec::new(),
            layers: vec![LayerGroup { name: "all".into(), factors: 0..0, vars: Vec::new() }],
            finalized: false,
        }
    }

    /// Register a variable with its unary prior (`Λ ≥ 0`; a zero-precision
    /// prior is valid). The belief starts at the prior; the linearization
    /// point starts at the prior mean (0 for zero-information priors).
    pub fn add_variable(&mut self, kind: VarKind, prior: GaussianInfo<T>) -> VarId {
        debug_assert!(prior.lam >= T::zero(), "prior precision must be ≥ 0");
        let id = self.v_kind.len();
        self.v_kind.push(kind);
        self.v_prior.push(prior);
        self.v_belief.push(prior);
        self.v_lin.push(if prior.lam > T::zero() { prior.mean() } else { T::zero() });
        self.v_observed.push(None);
        self.v_version.push(1);
        id
    }

    /// Pin a variable to an observed value with observation noise `σ_obs`.
    ///
    /// The observation enters the belief as a unary Gaussian (folded into the
    /// prior — exactly the "unary observation factor" of the model, which for
    /// a linear unary measurement has a constant message), and the
    /// linearization point is fixed at the value: incoming updates never move
    /// it.
    pub fn observe(&mut self, var: VarId, value: T, sigma_obs: T) -> Result<()> {
        if var >= self.v_kind.len() {
            return Err(CoreError::UnknownVariable(var));
        }
        let obs = GaussianInfo::from_mean_sigma(value, sigma_obs);
        self.v_prior[var] = self.v_prior[var].product(obs);
        self.v_belief[var] = self.v_belief[var].product(obs);
        self.v_lin[var] = value;
        self.v_observed[var] = Some(value);
        Ok(())
    }

    /// Override the linearization point (parameter init sampling).
    pub fn set_lin_point(&mut self, var: VarId, x0: T) {
        if self.v_observed[var].is_none() {
            self.v_lin[var] = x0;
        }
    }

    /// Open a new schedulable layer; subsequent `add_factor` calls join it.
    /// Returns the layer index. The implicit layer 0 collects factors added
    /// before the first explicit layer.
    pub fn begin_layer(&mut self, name: &str) -> usize {
        let next_factor = self.f_def.len();
        // Close the current layer's range.
        if let Some(last) = self.layers.last_mut() {
            last.factors.end = next_factor;
        }
        // Reuse the implicit empty head layer instead of leaving a hole.
        if self.layers.len() == 1 && self.layers[0].factors.is_empty() && self.f_def.is_empty() {
            self.layers[0].name = name.to_string();
            return 0;
        }
        self.layers.push(LayerGroup { name: name.to_string(), factors: next_factor..next_factor, vars: Vec::new() });
        self.layers.len() - 1
    }

    /// Register a factor; all edge messages start at zero information.
    pub fn add_factor(&mut self, def: FactorDef<T>, neighbors: &[VarId]) -> Result<FactorId> {
        if neighbors.len() != def.arity() {
            return Err(CoreError::ArityMismatch { expected: def.arity(), got: neighbors.len() });
        }
        for &v in neighbors {
            if v >= self.v_kind.len() {
                return Err(CoreError::UnknownVariable(v));
            }
        }
        debug_assert!(!self.finalized, "no topology edits after finalize");
        let id = self.f_def.len();
        self.f_def.push(def);
        self.f_layer.push((self.layers.len() - 1) as u32);
        self.edge_var.extend(neighbors.iter().map(|&v| v as u32));
        self.edge_out.extend(std::iter::repeat(GaussianInfo::zero()).take(neighbors.len()));
        self.edge_start.push(self.edge_var.len() as u32);
        self.layers.last_mut().unwrap().factors.end = id + 1;
        Ok(id)
    }

    /// Freeze topology: close layer ranges and collect each layer's unique
    /// adjacent variables (first-touch order) for the belief-update phase.
    pub fn finalize(&mut self) {
        if self.finalized {
            return;
        }
        self.layers.last_mut().unwrap().factors.end = self.f_def.len();
        let mut seen = vec![u32::MAX; self.v_kind.len()];
        for (li, layer) in self.layers.iter_mut().enumerate() {
            layer.vars.clear();
            for f in layer.factors.clone() {
                let es = self.edge_start[f] as usize..self.edge_start[f + 1] as usize;
                for &v in &self.edge_var[es] {
                    if seen[v as usize] != li as u32 {
                        seen[v as usize] = li as u32;
                        layer.vars.push(v);
                    }
                }
            }
        }
        self.finalized = true;
    }

    #[inline]
    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    #[inline]
    pub fn num_variables(&self) -> usize {
        self.v_kind.len()
    }

    #[inline]
    pub fn num_factors(&self) -> usize {
        self.f_def.len()
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.edge_var.len()
    }

    pub fn layers(&self) -> &[LayerGroup] {
        &self.layers
    }

    #[inline]
    pub fn var_kind(&self, var: VarId) -> VarKind {
        self.v_kind[var]
    }

    #[inline]
    pub fn prior(&self, var: VarId) -> GaussianInfo<T> {
        self.v_prior[var]
    }

    #[inline]
    pub fn observed(&self, var: VarId) -> Option<T> {
        self.v_observed[var]
    }

    #[inline]
    pub fn lin_point(&self, var: VarId) -> T {
        self.v_lin[var]
    }

    /// Current belief: the product of the unary prior and all incoming
    /// factor messages, maintained incrementally by the engine.
    pub fn belief(&self, var: VarId) -> Result<GaussianInfo<T>> {
        self.v_belief.get(var).copied().ok_or(CoreError::UnknownVariable(var))
    }

    #[inline]
    pub fn beliefs(&self) -> &[GaussianInfo<T>] {
        &self.v_belief
    }

    /// Stored factor→variable message for edge `slot` of `factor`.
    pub fn out_msg(&self, factor: FactorId, slot: usize) -> GaussianInfo<T> {
        let base = self.edge_start[factor] as usize;
        debug_assert!(base + slot < self.edge_start[factor + 1] as usize);
        self.edge_out[base + slot]
    }

    /// Neighbor ids of `factor` in slot order (the row/column order of J).
    pub fn neighbors(&self, factor: FactorId) -> &[u32] {
        let es = self.edge_start[factor] as usize..self.edge_start[factor + 1] as usize;
        &self.edge_var[es]
    }

    pub fn factor_def(&self, factor: FactorId) -> &FactorDef<T> {
        &self.f_def[factor]
    }

    /// Variable→factor message in the message-reuse form:
    /// `belief ÷ out_msg(factor → var)` — includes the unary prior.
    pub fn var_to_factor(&self, factor: FactorId, slot: usize) -> GaussianInfo<T> {
        let base = self.edge_start[factor] as usize;
        let v = self.edge_var[base + slot] as usize;
        self.v_belief[v].divide(self.edge_out[base + slot])
    }

    /// Recompute every belief from scratch (`prior + Σ out_msgs`), replacing
    /// the incrementally maintained values. One pass over the edge arena.
    pub fn recompute_beliefs(&mut self) {
        for (b, p) in self.v_belief.iter_mut().zip(&self.v_prior) {
            *b = *p;
        }
        for (i, &v) in self.edge_var.iter().enumerate() {
            let b = &mut self.v_belief[v as usize];
            *b = b.product(self.edge_out[i]);
        }
    }

    /// Belief means as the MAP estimate; writes them into the linearization
    /// points of every unobserved variable. Errors on degenerate beliefs.
    pub fn map_estimate(&mut self) -> Result<Vec<T>> {
        let mut means = Vec::with_capacity(self.v_kind.len());
        for v in 0..self.v_kind.len() {
            let b = self.v_belief[v];
            match self.v_observed[v] {
                Some(obs) => means.push(obs),
                None => {
                    if b.lam <= T::zero() {
                        return Err(CoreError::DegenerateBelief(v));
                    }
                    let m = b.mean();
                    self.v_lin[v] = m;
                    means.push(m);
                }
            }
        }
        Ok(means)
    }

    /// Total graph energy at the current linearization points: the sum of
    /// factor energies plus the unary prior energies `½Λ_p(x₀−μ_p)²`.
    pub fn energy_total(&self) -> T {
        let mut scratch = Vec::new();
        let mut e = self.prior_energy();
        for f in 0..self.f_def.len() {
            e += self.factor_energy(f, &mut scratch);
        }
        e
    }

    /// Energy of one factor at the current lin points.
    pub fn factor_energy(&self, f: FactorId, scratch: &mut Vec<T>) -> T {
        let es = self.edge_start[f] as usize..self.edge_start[f + 1] as usize;
        scratch.clear();
        scratch.extend(self.edge_var[es].iter().map(|&v| self.v_lin[v as usize]));
        self.f_def[f].energy(scratch)
    }

    /// Σ over variables with proper priors of `½Λ_p (x₀ − μ_p)²`.
    pub fn prior_energy(&self) -> T {
        let half = T::from_f64_c(0.5);
        let mut e = T::zero();
        for v in 0..self.v_kind.len() {
            let p = self.v_prior[v];
            if p.lam > T::zero() {
                let d = self.v_lin[v] - p.mean();
                e += half * p.lam * d * d;
            }
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::Measurement;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unary(y: f64, sigma: f64) -> FactorDef<f64> {
        FactorDef::new(Measurement::Identity, vec![y], sigma).unwrap()
    }

    #[test]
    fn prior_sigma_three_gives_variance_nine() {
        let mut g = FactorGraph::<f64>::new();
        let v = g.add_variable(VarKind::Parameter, GaussianInfo::from_mean_sigma(0.0, 3.0));
        let (mean, var) = g.belief(v).unwrap().to_moments().unwrap();
        assert_eq!(mean, 0.0);
        assert!((var - 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_prior_belief_is_zero_information() {
        let mut g = FactorGraph::<f64>::new();
        let v = g.add_variable(VarKind::Input, GaussianInfo::zero());
        assert_eq!(g.belief(v).unwrap(), GaussianInfo::zero());
    }

    #[test]
    fn ids_are_dense_from_zero() {
        let mut g = FactorGraph::<f64>::new();
        let ids: Vec<_> = (0..100).map(|_| g.add_variable(VarKind::Activation, GaussianInfo::zero())).collect();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn add_factor_validates_neighbors() {
        let mut g = FactorGraph::<f64>::new();
        let v = g.add_variable(VarKind::Input, GaussianInfo::zero());
        assert!(matches!(
            g.add_factor(unary(0.0, 1.0), &[v, v]),
            Err(CoreError::ArityMismatch { .. })
        ));
        assert!(matches!(
            g.add_factor(unary(0.0, 1.0), &[7]),
            Err(CoreError::UnknownVariable(7))
        ));
        let f = g.add_factor(unary(0.0, 1.0), &[v]).unwrap();
        assert_eq!(f, 0);
        assert_eq!(g.neighbors(f), &[0]);
    }

    #[test]
    fn belief_is_product_of_prior_and_messages() {
        // Two unary factors N(0,1), N(2,1) → belief (η=2, Λ=2).
        let mut g = FactorGraph::<f64>::new();
        let v = g.add_variable(VarKind::Activation, GaussianInfo::zero());
        let f0 = g.add_factor(unary(0.0, 1.0), &[v]).unwrap();
        let f1 = g.add_factor(unary(2.0, 1.0), &[v]).unwrap();
        g.finalize();
        // Hand-place the (constant) unary messages and recompute.
        let b0 = g.edge_start[f0] as usize;
        let b1 = g.edge_start[f1] as usize;
        g.edge_out[b0] = GaussianInfo::new(0.0, 1.0);
        g.edge_out[b1] = GaussianInfo::new(2.0, 1.0);
        g.recompute_beliefs();
        assert_eq!(g.belief(v).unwrap(), GaussianInfo::new(2.0, 2.0));
    }

    #[test]
    fn star_graph_belief_matches_brute_force_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = FactorGraph::<f64>::new();
        let prior = GaussianInfo::from_mean_sigma(0.3, 2.0);
        let v = g.add_variable(VarKind::Activation, prior);
        let mut msgs = Vec::new();
        for _ in 0..6 {
            let f = g.add_factor(unary(rng.gen_range(-1.0..1.0), 1.0), &[v]).unwrap();
            let m = GaussianInfo::new(rng.gen_range(-2.0..2.0), rng.gen_range(0.1..2.0));
            let base = g.edge_start[f] as usize;
            g.edge_out[base] = m;
            msgs.push(m);
        }
        g.finalize();
        g.recompute_beliefs();
        let brute = msgs.iter().fold(prior, |acc, &m| acc.product(m));
        let b = g.belief(v).unwrap();
        assert!((b.eta - brute.eta).abs() < 1e-12);
        assert!((b.lam - brute.lam).abs() < 1e-12);
        // Message reuse: belief ÷ one message equals the product of the rest.
        for (slot, _) in msgs.iter().enumerate() {
            let reuse = g.var_to_factor(slot, 0);
            let rest = msgs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != slot)
                .fold(prior, |acc, (_, &m)| acc.product(m));
            assert!((reuse.eta - rest.eta).abs() < 1e-9);
            assert!((reuse.lam - rest.lam).abs() < 1e-9);
        }
    }

    #[test]
    fn map_estimate_returns_means_and_pins_observed() {
        let mut g = FactorGraph::<f64>::new();
        let a = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(1.5, 4.0));
        let b = g.add_variable(VarKind::Input, GaussianInfo::zero());
        g.observe(b, 0.7, 1e-4).unwrap();
        let est = g.map_estimate().unwrap();
        assert!((est[a] - 1.5).abs() < 1e-12);
        assert_eq!(est[b], 0.7);
        assert_eq!(g.lin_point(a), est[a]);
        assert_eq!(g.lin_point(b), 0.7);
    }

    #[test]
    fn map_estimate_rejects_degenerate_beliefs() {
        let mut g = FactorGraph::<f64>::new();
        g.add_variable(VarKind::Activation, GaussianInfo::zero());
        assert!(matches!(g.map_estimate(), Err(CoreError::DegenerateBelief(0))));
    }

    #[test]
    fn layers_partition_factors_and_collect_unique_vars() {
        let mut g = FactorGraph::<f64>::new();
        let v0 = g.add_variable(VarKind::Activation, GaussianInfo::from_mean_sigma(0.0, 1.0));
        let v1 = g.add_variable(VarKind::Activation, GaussianInfo::from_mean_sigma(0.0, 1.0));
        g.begin_layer("obs");
        g.add_factor(unary(0.0, 1.0), &[v0]).unwrap();
        g.add_factor(unary(1.0, 1.0), &[v0]).unwrap();
        g.begin_layer("smooth");
        g.add_factor(
            FactorDef::new(Measurement::Difference, vec![0.0], 1.3).unwrap(),
            &[v0, v1],
        )
        .unwrap();
        g.finalize();
        let layers = g.layers();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].name, "obs");
        assert_eq!(layers[0].factors, 0..2);
        assert_eq!(layers[0].vars, vec![0]);
        assert_eq!(layers[1].factors, 2..3);
        assert_eq!(layers[1].vars, vec![0, 1]);
    }

    #[test]
    fn energy_total_is_sum_of_factor_and_prior_terms() {
        let mut g = FactorGraph::<f64>::new();
        let v = g.add_variable(VarKind::Activation, GaussianInfo::from_mean_sigma(0.0, 1.0));
        g.add_factor(unary(2.0, 1.0), &[v]).unwrap();
        g.finalize();
        g.set_lin_point(v, 0.5);
        // Factor: ½(2−0.5)² = 1.125; prior: ½(0.5)² = 0.125.
        assert!((g.energy_total() - 1.25).abs() < 1e-12);
    }
}
