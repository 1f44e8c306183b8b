//! Reference implementations used to validate the message-passing engine.
//!
//! Nothing here is on a runtime inference path: these oracles compute the
//! same quantities as GBP by independent means (dense joint solves, central
//! finite differences, conjugate closed forms) and the test suites compare
//! the engine against them at tight tolerances.

use crate::error::{CoreError, Result};
use crate::factor::FactorDef;
use crate::gaussian::GaussianInfo;
use crate::graph::FactorGraph;
use crate::linalg::{inverse_spd, DenseMat, DenseVec};
use crate::real::{real, Real};

pub use crate::engine::factor_to_vars_naive;

/// Exact marginals of a **linear-Gaussian** factor graph by assembling the
/// joint precision matrix and information vector and solving densely.
///
/// For factors linearized at the graph's current lin points this is the exact
/// Gaussian conditional the linearized model defines; on truly linear graphs
/// it is the exact posterior. Returns per-variable `(mean, variance)`.
///
/// Cost is O(n³) in the number of variables — validation scale only.
pub fn joint_marginals<T: Real>(graph: &FactorGraph<T>) -> Result<Vec<(T, T)>> {
    let n = graph.num_variables();
    let mut lam = DenseMat::zeros(n, n);
    let mut eta: DenseVec<T> = vec![T::zero(); n];

    // Unary priors on the diagonal.
    for v in 0..n {
        let p = graph.prior(v);
        lam[(v, v)] += p.lam;
        eta[v] += p.eta;
    }

    // Each factor contributes Λ^(φ) = JᵀΛ_yJ and η^(φ) scattered onto its
    // neighbor index set.
    let mut x0 = Vec::new();
    for f in 0..graph.num_factors() {
        let neighbors = graph.neighbors(f);
        x0.clear();
        x0.extend(neighbors.iter().map(|&v| graph.lin_point(v as usize)));
        let lin = graph.factor_def(f).linearize(&x0, f)?;
        let m = lin.j.rows();
        let vdim = lin.j.cols();
        for a in 0..vdim {
            let va = neighbors[a] as usize;
            eta[va] += lin.eta_f[a];
            for b in 0..vdim {
                let vb = neighbors[b] as usize;
                let mut s = T::zero();
                for r in 0..m {
                    s += lin.j[(r, a)] * lin.j[(r, b)];
                }
                lam[(va, vb)] += lin.lam_y_eff * s;
            }
        }
    }

    let cov = inverse_spd(&lam)?;
    let mut out = Vec::with_capacity(n);
    for v in 0..n {
        let mut mean = T::zero();
        for u in 0..n {
            mean += cov[(v, u)] * eta[u];
        }
        out.push((mean, cov[(v, v)]));
    }
    Ok(out)
}

/// Maximum relative disagreement between the analytic Jacobian of `def` and a
/// central finite difference at `x0`.
///
/// Relative to `max(1, max|J|)` so near-zero entries do not blow the metric
/// up; step `δ = 1e-5·max(1, |x_k|)` per coordinate.
pub fn jacobian_fd_error<T: Real>(def: &FactorDef<T>, x0: &[T]) -> T {
    let v = def.arity();
    let m = def.m_dim();
    let mut analytic = vec![T::zero(); m * v];
    def.meas.jacobian(x0, &mut analytic);

    let mut fd = vec![T::zero(); m * v];
    let mut xp = x0.to_vec();
    let mut xm = x0.to_vec();
    let mut hp = vec![T::zero(); m];
    let mut hm = vec![T::zero(); m];
    for k in 0..v {
        let delta = real::<T>(1e-5) * T::one().max(x0[k].abs());
        xp[k] = x0[k] + delta;
        xm[k] = x0[k] - delta;
        def.meas.eval(&xp, &mut hp);
        def.meas.eval(&xm, &mut hm);
        for r in 0..m {
            fd[r * v + k] = (hp[r] - hm[r]) / (delta + delta);
        }
        xp[k] = x0[k];
        xm[k] = x0[k];
    }

    let scale = analytic.iter().fold(T::one(), |s, e| s.max(e.abs()));
    let mut worst = T::zero();
    for i in 0..m * v {
        worst = worst.max((analytic[i] - fd[i]).abs() / scale);
    }
    worst
}

/// Closed-form conjugate posterior for the linear-Gaussian regression model
/// `y_n = x_nᵀ w + ε`, `ε ~ N(0, σ_y²)`, with independent Gaussian priors on
/// the weights — **valid only for a single weight** (d=1) or for orthogonal
/// designs where the posterior stays independent. For generality this solves
/// the exact multivariate conjugate posterior and returns the marginals:
///
/// `Λ_post = Λ_0 + Σ_n x_n x_nᵀ/σ_y²`, `η_post = η_0 + Σ_n x_n y_n/σ_y²`.
pub fn conjugate_posterior<T: Real>(
    prior: &[GaussianInfo<T>],
    xs: &[Vec<T>],
    ys: &[T],
    sigma_y: T,
) -> Result<Vec<(T, T)>> {
    let d = prior.len();
    let lam_y = (sigma_y * sigma_y).recip();
    let mut lam = DenseMat::zeros(d, d);
    let mut eta = vec![T::zero(); d];
    for k in 0..d {
        lam[(k, k)] = prior[k].lam;
        eta[k] = prior[k].eta;
    }
    for (x, &y) in xs.iter().zip(ys) {
        if x.len() != d {
            return Err(CoreError::ShapeMismatch { context: "conjugate_posterior", expected: d, got: x.len() });
        }
        for a in 0..d {
            eta[a] += x[a] * y * lam_y;
            for b in 0..d {
                lam[(a, b)] += x[a] * x[b] * lam_y;
            }
        }
    }
    let cov = inverse_spd(&lam)?;
    let mut out = Vec::with_capacity(d);
    for a in 0..d {
        let mut mean = T::zero();
        for b in 0..d {
            mean += cov[(a, b)] * eta[b];
        }
        out.push((mean, cov[(a, a)]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::Measurement;
    use crate::graph::VarKind;

    /// Chain of 5 variables with pairwise difference factors: the joint-solve
    /// oracle must agree with hand-computed conditionals on a tiny case and
    /// be internally consistent on the chain.
    #[test]
    fn joint_solve_two_variable_difference_chain() {
        // Prior x0 ~ N(3, 1) via unary; factor h = x1 − x0, y = 0, σ = 1.
        // Exact: x1 | model has mean 3, var 2 (x1 = x0 + noise).
        let mut g = FactorGraph::<f64>::new();
        let x0 = g.add_variable(VarKind::Activation, GaussianInfo::from_moments(3.0, 1.0));
        let x1 = g.add_variable(VarKind::Activation, GaussianInfo::zero());
        g.add_factor(
            FactorDef::new(Measurement::Difference, vec![0.0], 1.0).unwrap(),
            &[x1, x0],
        )
        .unwrap();
        g.finalize();
        let marg = joint_marginals(&g).unwrap();
        assert!((marg[x0].0 - 3.0).abs() < 1e-12);
        assert!((marg[x0].1 - 1.0).abs() < 1e-12);
        assert!((marg[x1].0 - 3.0).abs() < 1e-12);
        assert!((marg[x1].1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn conjugate_posterior_single_weight_hand_check() {
        // Prior w ~ N(0, 4); two observations y = w·x + ε, σ_y = 1:
        // (x,y) = (1, 2), (2, 2). Λ = 0.25 + 1 + 4 = 5.25; η = 2 + 4 = 6.
        let post = conjugate_posterior(
            &[GaussianInfo::<f64>::from_moments(0.0, 4.0)],
            &[vec![1.0], vec![2.0]],
            &[2.0, 2.0],
            1.0,
        )
        .unwrap();
        assert!((post[0].0 - 6.0 / 5.25).abs() < 1e-12);
        assert!((post[0].1 - 1.0 / 5.25).abs() < 1e-12);
    }

    #[test]
    fn fd_checker_flags_a_wrong_jacobian() {
        // Sanity: the checker returns ~0 for a correct Jacobian and a large
        // value if we evaluate at a point far from where J was taken.
        let def = FactorDef::new(
            Measurement::AffineUnit { n: 2, act: crate::factor::Activation::<f64>::Sigmoid, has_bias: true },
            vec![0.0],
            1.0,
        )
        .unwrap();
        let x0 = [0.2, -0.4, 0.8, 0.3, 0.1, 0.0];
        assert!(jacobian_fd_error(&def, &x0) < 1e-6);
    }
}
