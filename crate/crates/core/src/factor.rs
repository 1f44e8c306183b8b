//! Factor energy definitions.
//!
//! Every factor carries a Gaussian quadratic energy
//! `E_j(x) = ½ (y − h(x))ᵀ Λ_y (y − h(x))` over its connected variables,
//! with an optional robust (Tukey-style) flat region beyond a Mahalanobis
//! radius `N_rob`. Nonlinear measurement functions are linearized around the
//! current variable estimates `x₀`:
//!
//! ```text
//! Λ^(φ) = Jᵀ Λ_y J          η^(φ) = Jᵀ Λ_y (J x₀ + y − h(x₀))
//! ```
//!
//! `Λ^(φ)` is never materialized as V×V; the engine keeps `(J, Λ_y)` and
//! applies the Woodbury fast path. Jacobians are analytic per measurement
//! kind (no autodiff) — finite-difference checking lives in the validation
//! oracle, not on any runtime path.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{DenseMat, DenseVec};
use crate::real::{real, Real};

/// Pointwise nonlinearity `g(·)` applied inside layer measurement functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation<T> {
    Identity,
    /// Negative slope applies for `pre < 0`; the kink at exactly 0 takes the
    /// positive branch (measure-zero, tie broken deterministically).
    LeakyRelu { slope: T },
    Sigmoid,
}

impl<T: Real> Activation<T> {
    /// Default leaky-ReLU slope (the paper never states it).
    pub fn leaky_relu_default() -> Self {
        Activation::LeakyRelu { slope: real(0.1) }
    }

    #[inline]
    pub fn g(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x >= T::zero() {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => (T::one() + (-x).exp()).recip(),
        }
    }

    #[inline]
    pub fn dg(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::LeakyRelu { slope } => {
                if x >= T::zero() {
                    T::one()
                } else {
                    slope
                }
            }
            Activation::Sigmoid => {
                let s = (T::one() + (-x).exp()).recip();
                s * (T::one() - s)
            }
        }
    }

    pub fn is_identity(self) -> bool {
        matches!(self, Activation::Identity)
    }
}

/// Bias term of a fixed-coefficient affine unit: either one more connected
/// variable or a folded constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FixedBias<T> {
    Variable,
    Constant(T),
}

/// Measurement function catalogue: `h: R^V → R^M` with analytic Jacobian.
///
/// Variable slot orderings are fixed here and define the row/column order of
/// `J` for the lifetime of a factor.
#[derive(Clone, Debug)]
pub enum Measurement<T> {
    /// `h(x) = x` — unary observation. V=1, M=1.
    Identity,
    /// `h(x) = x_a − x_b` — pairwise smoothness. Slots `[a, b]`. V=2, M=1.
    Difference,
    /// `h(x) = A·x` — general linear map (validation graphs). V=cols, M=rows.
    Linear { a: DenseMat<T> },
    /// `h(x) = g(Σ in_k·w_k + b) − out` — dense/conv/transposed-conv unit.
    /// Slots `[inputs(n), weights(n), bias?, out]`. V = 2n+1(+1), M=1.
    AffineUnit { n: usize, act: Activation<T>, has_bias: bool },
    /// `h(x) = g(Σ c_k·z_k + b) − out` with folded constant coefficients
    /// (observed pixels at training, fixed weights at hard prediction).
    /// Slots `[free(n), bias?, out]`. V = n+1(+1), M=1.
    AffineFixedCoeff { coeffs: Vec<T>, act: Activation<T>, bias: FixedBias<T> },
    /// `h_m(x) = fine_m − coarse` — upsampling. Slots `[coarse, fine(K²)]`.
    /// V = K²+1, M = K².
    Upsample { k2: usize },
    /// `h(x) = max(patch) − out`. Slots `[patch(K²), out]`. V = K²+1, M=1.
    /// Jacobian is 1 on the argmax (ties → lowest flat index), −1 on out.
    MaxPool { k2: usize },
    /// `h(x) = softmax(x)` against a one-hot `y`. Slots = logits. V = M = C.
    Softmax { c: usize },
    /// Monolithic dense factor `h_c(x) = g(w_c·in + b_c) − out_c` (M = C_L),
    /// kept for the §3.3 decomposition-equivalence check.
    /// Slots `[in(d), w(d·c, output-major), b(c), out(c)]`.
    DenseJoint { d: usize, c: usize, act: Activation<T> },
}

impl<T: Real> Measurement<T> {
    /// Number of connected variables V.
    pub fn arity(&self) -> usize {
        match self {
            Measurement::Identity => 1,
            Measurement::Difference => 2,
            Measurement::Linear { a } => a.cols(),
            Measurement::AffineUnit { n, has_bias, .. } => 2 * n + 1 + usize::from(*has_bias),
            Measurement::AffineFixedCoeff { coeffs, bias, .. } => {
                coeffs.len() + 1 + usize::from(matches!(bias, FixedBias::Variable))
            }
            Measurement::Upsample { k2 } => k2 + 1,
            Measurement::MaxPool { k2 } => k2 + 1,
            Measurement::Softmax { c } => *c,
            Measurement::DenseJoint { d, c, .. } => d + d * c + c + c,
        }
    }

    /// Measurement dimension M (≤ V for every catalogued kind).
    pub fn m_dim(&self) -> usize {
        match self {
            Measurement::Linear { a } => a.rows(),
            Measurement::Upsample { k2 } => *k2,
            Measurement::Softmax { c } => *c,
            Measurement::DenseJoint { c, .. } => *c,
            _ => 1,
        }
    }

    /// True when `h` is affine in x, so one linearization is exact forever.
    pub fn is_linear(&self) -> bool {
        match self {
            Measurement::Identity | Measurement::Difference | Measurement::Linear { .. } | Measurement::Upsample { .. } => true,
            Measurement::AffineFixedCoeff { act, .. } => act.is_identity(),
            // The affine unit is bilinear in (inputs, weights) — not linear —
            // even with an identity activation.
            Measurement::AffineUnit { .. } | Measurement::MaxPool { .. } | Measurement::Softmax { .. } | Measurement::DenseJoint { .. } => false,
        }
    }

    /// Evaluate `h(x)` into `out` (length M).
    pub fn eval(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.arity());
        debug_assert_eq!(out.len(), self.m_dim());
        match self {
            Measurement::Identity => out[0] = x[0],
            Measurement::Difference => out[0] = x[0] - x[1],
            Measurement::Linear { a } => {
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let mut acc = T::zero();
                    for c in 0..a.cols() {
                        acc += row[c] * x[c];
                    }
                    out[r] = acc;
                }
            }
            Measurement::AffineUnit { n, act, has_bias } => {
                let (inputs, rest) = x.split_at(*n);
                let (weights, tail) = rest.split_at(*n);
                let mut pre = T::zero();
                for k in 0..*n {
                    pre += inputs[k] * weights[k];
                }
                if *has_bias {
                    pre += tail[0];
                }
                let out_var = tail[usize::from(*has_bias)];
                out[0] = act.g(pre) - out_var;
            }
            Measurement::AffineFixedCoeff { coeffs, act, bias } => {
                let n = coeffs.len();
                let mut pre = T::zero();
                for k in 0..n {
                    pre += coeffs[k] * x[k];
                }
                let out_var = match bias {
                    FixedBias::Variable => {
                        pre += x[n];
                        x[n + 1]
                    }
                    FixedBias::Constant(b) => {
                        pre += *b;
                        x[n]
                    }
                };
                out[0] = act.g(pre) - out_var;
            }
            Measurement::Upsample { k2 } => {
                for m in 0..*k2 {
                    out[m] = x[1 + m] - x[0];
                }
            }
            Measurement::MaxPool { k2 } => {
                let mut best = x[0];
                for k in 1..*k2 {
                    if x[k] > best {
                        best = x[k];
                    }
                }
                out[0] = best - x[*k2];
            }
            Measurement::Softmax { c } => {
                softmax(&x[..*c], out);
            }
            Measurement::DenseJoint { d, c, act } => {
                let (inputs, rest) = x.split_at(*d);
                let (weights, rest) = rest.split_at(d * c);
                let (biases, outs) = rest.split_at(*c);
                for j in 0..*c {
                    let w = &weights[j * d..(j + 1) * d];
                    let mut pre = biases[j];
                    for k in 0..*d {
                        pre += inputs[k] * w[k];
                    }
                    out[j] = act.g(pre) - outs[j];
                }
            }
        }
    }

    /// Analytic Jacobian `J = ∂h/∂x` at `x`, written row-major into `j`
    /// (length M·V). Entries not written are zeroed first.
    pub fn jacobian(&self, x: &[T], j: &mut [T]) {
        let v = self.arity();
        let m = self.m_dim();
        debug_assert_eq!(x.len(), v);
        debug_assert_eq!(j.len(), m * v);
        match self {
            Measurement::Identity => j[0] = T::one(),
            Measurement::Difference => {
                j[0] = T::one();
                j[1] = -T::one();
            }
            Measurement::Linear { a } => j.copy_from_slice(a.as_slice()),
            Measurement::AffineUnit { n, act, has_bias } => {
                let (inputs, rest) = x.split_at(*n);
                let (weights, tail) = rest.split_at(*n);
                let mut pre = T::zero();
                for k in 0..*n {
                    pre += inputs[k] * weights[k];
                }
                if *has_bias {
                    pre += tail[0];
                }
                let dg = act.dg(pre);
                for k in 0..*n {
                    j[k] = dg * weights[k];
                    j[n + k] = dg * inputs[k];
                }
                if *has_bias {
                    j[2 * n] = dg;
                }
                j[2 * n + usize::from(*has_bias)] = -T::one();
            }
            Measurement::AffineFixedCoeff { coeffs, act, bias } => {
                let n = coeffs.len();
                let mut pre = T::zero();
                for k in 0..n {
                    pre += coeffs[k] * x[k];
                }
                match bias {
                    FixedBias::Variable => pre += x[n],
                    FixedBias::Constant(b) => pre += *b,
                }
                let dg = act.dg(pre);
                for k in 0..n {
                    j[k] = dg * coeffs[k];
                }
                if matches!(bias, FixedBias::Variable) {
                    j[n] = dg;
                    j[n + 1] = -T::one();
                } else {
                    j[n] = -T::one();
                }
            }
            Measurement::Upsample { k2 } => {
                for e in j.iter_mut() {
                    *e = T::zero();
                }
                for m in 0..*k2 {
                    j[m * v] = -T::one();
                    j[m * v + 1 + m] = T::one();
                }
            }
            Measurement::MaxPool { k2 } => {
                for e in j.iter_mut() {
                    *e = T::zero();
                }
                let mut arg = 0;
                let mut best = x[0];
                for k in 1..*k2 {
                    if x[k] > best {
                        best = x[k];
                        arg = k;
                    }
                }
                j[arg] = T::one();
                j[*k2] = -T::one();
            }
            Measurement::Softmax { c } => {
                let mut s = vec![T::zero(); *c];
                softmax(&x[..*c], &mut s);
                // J = diag(s) − s sᵀ; rows sum to 0 at any x₀.
                for r in 0..*c {
                    for q in 0..*c {
                        let kron = if r == q { T::one() } else { T::zero() };
                        j[r * c + q] = s[r] * (kron - s[q]);
                    }
                }
            }
            Measurement::DenseJoint { d, c, act } => {
                for e in j.iter_mut() {
                    *e = T::zero();
                }
                let (inputs, rest) = x.split_at(*d);
                let (weights, rest) = rest.split_at(d * c);
                let biases = &rest[..*c];
                for r in 0..*c {
                    let w = &weights[r * d..(r + 1) * d];
                    let mut pre = biases[r];
                    for k in 0..*d {
                        pre += inputs[k] * w[k];
                    }
                    let dg = act.dg(pre);
                    let row = &mut j[r * v..(r + 1) * v];
                    for k in 0..*d {
                        row[k] = dg * w[k];
                        row[d + r * d + k] = dg * inputs[k];
                    }
                    row[d + d * c + r] = dg;
                    row[d + d * c + c + r] = -T::one();
                }
            }
        }
    }
}

/// Numerically stable softmax.
fn softmax<T: Real>(x: &[T], out: &mut [T]) {
    let mut mx = x[0];
    for &v in &x[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Robust (Tukey-style) energy description: quadratic within Mahalanobis
/// radius `n_rob`, flat outside. Realized in GBP by scaling `Λ_y` with the
/// weight `w ∈ {1, eps_flat}` at linearization time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Robust<T> {
    pub n_rob: T,
    /// Weight in the flat region; 0 by default, configurable small positive
    /// value for conditioning.
    #[serde(default)]
    pub eps_flat: T,
}

impl<T: Real> Robust<T> {
    pub fn new(n_rob: T) -> Self {
        Self { n_rob, eps_flat: T::zero() }
    }
}

/// A factor's full energy definition: measurement, pseudo-observation `y`,
/// isotropic observation precision `Λ_y = I/σ²`, and optional robustness.
#[derive(Clone, Debug)]
pub struct FactorDef<T> {
    pub meas: Measurement<T>,
    /// Pseudo-observation, length M.
    pub y: DenseVec<T>,
    /// Scalar observation precision `1/σ²` (isotropic `Λ_y`).
    pub lam_y: T,
    pub robust: Option<Robust<T>>,
}

impl<T: Real> FactorDef<T> {
    /// Construct from the σ quoted in configs/tables; `Λ_y = 1/σ²`.
    pub fn new(meas: Measurement<T>, y: DenseVec<T>, sigma: T) -> Result<Self> {
        if y.len() != meas.m_dim() {
            return Err(CoreError::ShapeMismatch {
                context: "FactorDef observation length",
                expected: meas.m_dim(),
                got: y.len(),
            });
        }
        if !(sigma > T::zero()) {
            return Err(CoreError::InvalidParameter(format!("factor sigma must be > 0, got {sigma}")));
        }
        Ok(Self { meas, y, lam_y: (sigma * sigma).recip(), robust: None })
    }

    pub fn with_robust(mut self, robust: Robust<T>) -> Self {
        self.robust = Some(robust);
        self
    }

    #[inline]
    pub fn arity(&self) -> usize {
        self.meas.arity()
    }

    #[inline]
    pub fn m_dim(&self) -> usize {
        self.meas.m_dim()
    }

    #[inline]
    pub fn is_linear(&self) -> bool {
        self.meas.is_linear()
    }

    /// Residual Mahalanobis norm `‖y − h(x₀)‖_{Λ_y}` at `x0`.
    pub fn mahalanobis(&self, x0: &[T]) -> T {
        let m = self.m_dim();
        let mut h0 = vec![T::zero(); m];
        self.meas.eval(x0, &mut h0);
        let mut ss = T::zero();
        for k in 0..m {
            let r = self.y[k] - h0[k];
            ss += r * r;
        }
        (ss * self.lam_y).sqrt()
    }

    /// Robust reweight `w ∈ [0,1]`: 1 inside the quadratic region, `eps_flat`
    /// beyond `N_rob`. Returns 1 when no robust threshold is set.
    pub fn robust_weight(&self, x0: &[T]) -> T {
        match self.robust {
            None => T::one(),
            Some(rb) => {
                if self.mahalanobis(x0) <= rb.n_rob {
                    T::one()
                } else {
                    rb.eps_flat
                }
            }
        }
    }

    /// Factor energy `½ (y−h(x))ᵀ Λ_y (y−h(x))`, capped at `½ N_rob²` in the
    /// robust flat region.
    pub fn energy(&self, x: &[T]) -> T {
        let r = self.mahalanobis(x);
        let half = real::<T>(0.5);
        match self.robust {
            Some(rb) if r > rb.n_rob => half * rb.n_rob * rb.n_rob,
            _ => half * r * r,
        }
    }

    /// Linearize around `x0`:
    /// `J = ∂h/∂x |_{x0}`, `η^(φ) = Jᵀ Λ_y^eff (J x₀ + y − h(x₀))`,
    /// `Λ_y^eff = w·Λ_y` after robust reweighting.
    ///
    /// For linear measurements the result is independent of `x0` (idempotent
    /// linearization); callers may cache it. This variant allocates; the
    /// message-passing hot path uses [`FactorDef::linearize_into`].
    pub fn linearize(&self, x0: &[T], factor_id: usize) -> Result<LinearizedFactor<T>> {
        let mut scratch = LinScratch::default();
        let meta = self.linearize_into(x0, factor_id, &mut scratch)?;
        let m = self.m_dim();
        let v = self.arity();
        let j = DenseMat::from_rows(m, v, scratch.j.clone())?;
        let mut scaled = scratch.c.clone();
        for s in scaled.iter_mut() {
            *s *= meta.lam_y_eff;
        }
        let eta_f = j.matvec_t(&scaled)?;
        Ok(LinearizedFactor {
            j,
            c: scratch.c,
            eta_f,
            lam_y_eff: meta.lam_y_eff,
            energy: meta.energy,
        })
    }

    /// Allocation-free linearization into caller-owned scratch buffers.
    ///
    /// Fills `scratch.j` (row-major M×V Jacobian) and `scratch.c`
    /// (`c = J x₀ + y − h(x₀)`), and returns the effective precision and the
    /// (robust-capped) factor energy at `x0` — all products of the single
    /// measurement evaluation this performs.
    pub fn linearize_into(
        &self,
        x0: &[T],
        factor_id: usize,
        scratch: &mut LinScratch<T>,
    ) -> Result<LinMeta<T>> {
        let v = self.arity();
        let m = self.m_dim();
        debug_assert_eq!(x0.len(), v);
        scratch.h.clear();
        scratch.h.resize(m, T::zero());
        self.meas.eval(x0, &mut scratch.h);
        scratch.j.clear();
        scratch.j.resize(m * v, T::zero());
        self.meas.jacobian(x0, &mut scratch.j);

        // Residual (y − h), Mahalanobis norm, robust weight, capped energy.
        let mut ss = T::zero();
        for k in 0..m {
            let r = self.y[k] - scratch.h[k];
            ss += r * r;
        }
        let r2 = ss * self.lam_y;
        let half = real::<T>(0.5);
        let (weight, energy) = match self.robust {
            Some(rb) if r2 > rb.n_rob * rb.n_rob => (rb.eps_flat, half * rb.n_rob * rb.n_rob),
            _ => (T::one(), half * r2),
        };
        let lam_y_eff = self.lam_y * weight;

        // c = J x₀ + y − h(x₀), reusing h as the residual store.
        scratch.c.clear();
        scratch.c.resize(m, T::zero());
        let mut finite = T::zero();
        for r in 0..m {
            let row = &scratch.j[r * v..(r + 1) * v];
            let mut acc = self.y[r] - scratch.h[r];
            for (jk, xk) in row.iter().zip(x0) {
                acc += *jk * *xk;
                finite += *jk;
            }
            scratch.c[r] = acc;
            finite += acc;
        }
        if !finite.is_finite() {
            return Err(CoreError::NonFiniteJacobian(factor_id));
        }
        Ok(LinMeta { lam_y_eff, energy })
    }
}

/// Reusable buffers for [`FactorDef::linearize_into`].
#[derive(Clone, Debug, Default)]
pub struct LinScratch<T> {
    /// Row-major M×V Jacobian.
    pub j: Vec<T>,
    /// h(x₀) evaluation buffer.
    pub h: Vec<T>,
    /// `c = J x₀ + y − h(x₀)`.
    pub c: Vec<T>,
}

/// Scalars produced by [`FactorDef::linearize_into`].
#[derive(Clone, Copy, Debug)]
pub struct LinMeta<T> {
    /// `w·Λ_y` after robust reweighting.
    pub lam_y_eff: T,
    /// Factor energy at the linearization point (robust-capped).
    pub energy: T,
}

/// A factor linearized at some `x₀`.
///
/// The factor precision `Λ^(φ) = Jᵀ Λ_y^eff J` is represented implicitly by
/// `(J, lam_y_eff)` — never materialized as V×V (the Appendix-B fast path
/// needs only products with J).
#[derive(Clone, Debug)]
pub struct LinearizedFactor<T> {
    /// M×V Jacobian at the linearization point.
    pub j: DenseMat<T>,
    /// `c = J x₀ + y − h(x₀)` (length M); `η^(φ) = Jᵀ Λ_y^eff c`.
    pub c: DenseVec<T>,
    /// `η^(φ)` (length V), with the effective precision already applied.
    pub eta_f: DenseVec<T>,
    /// `w·Λ_y` after robust reweighting.
    pub lam_y_eff: T,
    /// Factor energy at the linearization point (robust-capped).
    pub energy: T,
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn identity_factor_linearization_is_trivial() {
        // h(x)=x, y=0, σ=1: J=I₁, eta_f = 0 at x0=0; at any x0, eta_f = λ(y)·J = 0.
        let def = FactorDef::new(Measurement::<f64>::Identity, vec![0.0], 1.0).unwrap();
        let lin = def.linearize(&[3.7], 0).unwrap();
        assert_eq!(lin.j[(0, 0)], 1.0);
        // c = J x0 + y − h(x0) = 3.7 + 0 − 3.7 = 0 (linear: exact).
        assert!(lin.eta_f[0].abs() < TOL);
    }

    /// The energy reported by `linearize`/`linearize_into` must equal the
    /// standalone `energy()` evaluation — the engine caches the former as the
    /// per-iteration energy metric.
    #[test]
    fn linearize_energy_matches_energy_eval() {
        let defs: Vec<FactorDef<f64>> = vec![
            FactorDef::new(Measurement::Identity, vec![0.8], 0.5).unwrap(),
            FactorDef::new(
                Measurement::AffineUnit { n: 2, act: Activation::LeakyRelu { slope: 0.1 }, has_bias: true },
                vec![0.0],
                0.7,
            )
            .unwrap()
            .with_robust(Robust { n_rob: 0.9, eps_flat: 0.0 }),
            FactorDef::new(Measurement::Softmax { c: 3 }, vec![1.0, 0.0, 0.0], 0.3).unwrap(),
        ];
        let xs: Vec<Vec<f64>> = vec![
            vec![2.0],
            vec![0.3, -1.2, 0.5, 0.9, -0.2, 0.4],
            vec![0.2, -0.4, 1.1],
        ];
        for (def, x0) in defs.iter().zip(&xs) {
            let lin = def.linearize(x0, 0).unwrap();
            assert!(
                (lin.energy - def.energy(x0)).abs() < TOL,
                "linearize energy {} vs energy() {}",
                lin.energy,
                def.energy(x0)
            );
        }
    }

    #[test]
    fn linear_factor_linearization_is_idempotent() {
        let a = DenseMat::<f64>::from_rows(2, 3, vec![1.0, -2.0, 0.5, 0.0, 1.0, 1.0]).unwrap();
        let def = FactorDef::new(Measurement::Linear { a }, vec![0.3, -0.1], 0.7).unwrap();
        let l1 = def.linearize(&[0.0, 0.0, 0.0], 0).unwrap();
        let l2 = def.linearize(&[5.0, -2.0, 9.0], 0).unwrap();
        assert_eq!(l1.j, l2.j);
        for k in 0..3 {
            assert!((l1.eta_f[k] - l2.eta_f[k]).abs() < TOL);
        }
    }

    #[test]
    fn scalar_energy_example() {
        // y=1, h(x)=x=0, σ=0.5 → ½·1²·4 = 2.
        let def = FactorDef::new(Measurement::<f64>::Identity, vec![1.0], 0.5).unwrap();
        assert!((def.energy(&[0.0]) - 2.0).abs() < TOL);
    }

    #[test]
    fn robust_energy_caps_at_flat_region() {
        // Residual beyond N_rob=1.4 → energy = ½·1.4² = 0.98.
        let def = FactorDef::new(Measurement::<f64>::Identity, vec![0.0], 1.0)
            .unwrap()
            .with_robust(Robust::new(1.4));
        assert!((def.energy(&[10.0]) - 0.98).abs() < TOL);
        // Inside the quadratic region the cap does not apply.
        assert!((def.energy(&[1.0]) - 0.5).abs() < TOL);
    }

    #[test]
    fn robust_weight_thresholds() {
        let def = FactorDef::new(Measurement::<f64>::Identity, vec![0.0], 0.2)
            .unwrap()
            .with_robust(Robust::new(0.2));
        // r = |x|/0.2; at x=0 → w=1; at r = 2·N_rob → w=0.
        assert_eq!(def.robust_weight(&[0.0]), 1.0);
        let x_outlier = 0.2 * 0.2 * 2.0; // r = 0.4 = 2·N_rob
        assert_eq!(def.robust_weight(&[x_outlier]), 0.0);
        // Denoising config: pixel 0.5 away from its observation is
        // down-weighted (r = 0.5/0.2 = 2.5 > 0.2).
        assert_eq!(def.robust_weight(&[0.5]), 0.0);
    }

    #[test]
    fn affine_unit_energy_matches_formula() {
        // E = ½λ (g(x·w + b) − out)², identity g.
        let meas = Measurement::AffineUnit { n: 2, act: Activation::<f64>::Identity, has_bias: true };
        let def = FactorDef::new(meas, vec![0.0], 0.1).unwrap();
        // x=[1,2], w=[0.5,−1], b=0.25, out=−1 → pre = 0.5−2+0.25 = −1.25; resid = −1.25−(−1) = −0.25.
        let x = [1.0, 2.0, 0.5, -1.0, 0.25, -1.0];
        let expect = 0.5 * (0.25f64 * 0.25) / (0.1 * 0.1);
        assert!((def.energy(&x) - expect).abs() < 1e-9);
    }

    #[test]
    fn maxpool_tie_breaks_to_lowest_index() {
        let meas = Measurement::<f64>::MaxPool { k2: 4 };
        let x = [0.5, 0.5, 0.1, 0.2, 0.5];
        let mut j = vec![0.0; 5];
        meas.jacobian(&x, &mut j);
        assert_eq!(j, vec![1.0, 0.0, 0.0, 0.0, -1.0]);
        let mut h = [0.0];
        meas.eval(&x, &mut h);
        assert!(h[0].abs() < TOL);
    }

    #[test]
    fn maxpool_spec_example_selects_second_element() {
        let meas = Measurement::<f64>::MaxPool { k2: 4 };
        let x = [0.2, 0.7, -0.1, 0.3, 0.7];
        let mut h = [f64::NAN];
        meas.eval(&x, &mut h);
        assert!(h[0].abs() < TOL, "energy 0 when output equals patch max");
        let mut j = vec![0.0; 5];
        meas.jacobian(&x, &mut j);
        assert_eq!(j, vec![0.0, 1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_zero_and_h_is_uniform_on_equal_logits() {
        let meas = Measurement::<f64>::Softmax { c: 10 };
        let x = vec![0.3; 10];
        let mut h = vec![0.0; 10];
        meas.eval(&x, &mut h);
        for &p in &h {
            assert!((p - 0.1).abs() < TOL);
        }
        let mut j = vec![0.0; 100];
        meas.jacobian(&x, &mut j);
        for r in 0..10 {
            let s: f64 = j[r * 10..(r + 1) * 10].iter().sum();
            assert!(s.abs() < TOL, "softmax Jacobian rows sum to 0");
        }
    }

    #[test]
    fn upsample_energy_matches_table_example() {
        // K=2, coarse 0, fine (1,1,1,1), σ=0.03 → 4·1/(2·0.03²).
        let meas = Measurement::<f64>::Upsample { k2: 4 };
        let def = FactorDef::new(meas, vec![0.0; 4], 0.03).unwrap();
        let e = def.energy(&[0.0, 1.0, 1.0, 1.0, 1.0]);
        let expect = 4.0 / (2.0 * 0.03 * 0.03);
        assert!((e - expect).abs() < 1e-6 * expect);
        // Coarse equal to fine → zero energy.
        assert!(def.energy(&[0.4, 0.4, 0.4, 0.4, 0.4]).abs() < TOL);
    }

    #[test]
    fn linearized_eta_matches_construction_invariant() {
        // η^(φ) = Jᵀ Λ_y (J x₀ + y − h(x₀)) — checked explicitly for a
        // nonlinear unit.
        let meas = Measurement::AffineUnit { n: 2, act: Activation::<f64>::leaky_relu_default(), has_bias: true };
        let def = FactorDef::new(meas.clone(), vec![0.0], 0.5).unwrap();
        let x0 = [0.3, -0.7, 1.1, 0.4, -0.2, 0.6];
        let lin = def.linearize(&x0, 0).unwrap();
        let mut h0 = [0.0];
        meas.eval(&x0, &mut h0);
        let jx0 = lin.j.matvec(&x0).unwrap();
        let c = jx0[0] - h0[0];
        for k in 0..6 {
            let expect = lin.j[(0, k)] * (1.0 / 0.25) * c;
            assert!((lin.eta_f[k] - expect).abs() < 1e-12);
        }
    }
}
