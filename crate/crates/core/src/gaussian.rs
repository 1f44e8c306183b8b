//! Natural-parameter Gaussian algebra for scalar variables.
//!
//! Every message and belief in the factor graph is a univariate Gaussian in
//! natural (information) form: information `η = μ/σ²` and precision
//! `Λ = 1/σ²`. In this parameterization the product of Gaussians — the core
//! operation of belief propagation — is plain addition, and the message-reuse
//! division (`belief ÷ incoming message`) is subtraction.

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// A univariate Gaussian in natural parameters `(η, Λ)`.
///
/// `Λ ≥ 0` for every stored message or belief; `Λ = 0` is the valid
/// "no information" message (the multiplicative identity), so no separate
/// uninitialized sentinel exists. Moment conversion is defined only for
/// `Λ > 0`: `mean = η/Λ`, `var = 1/Λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianInfo<T> {
    /// Information scalar `η = μ/σ²`.
    pub eta: T,
    /// Precision scalar `Λ = 1/σ²` (units 1/variance).
    pub lam: T,
}

impl<T: Real> GaussianInfo<T> {
    /// The zero-information message `(0, 0)`.
    #[inline]
    pub fn zero() -> Self {
        Self { eta: T::zero(), lam: T::zero() }
    }

    #[inline]
    pub fn new(eta: T, lam: T) -> Self {
        Self { eta, lam }
    }

    /// From moment parameters `(mean, var)`, `var > 0`.
    #[inline]
    pub fn from_moments(mean: T, var: T) -> Self {
        debug_assert!(var > T::zero(), "variance must be positive");
        let lam = var.recip();
        Self { eta: mean * lam, lam }
    }

    /// From `(mean, σ)`; convenience for config values quoted as σ.
    #[inline]
    pub fn from_mean_sigma(mean: T, sigma: T) -> Self {
        Self::from_moments(mean, sigma * sigma)
    }

    /// `(mean, var)` if `Λ > 0`, else `None` (degenerate belief).
    #[inline]
    pub fn to_moments(self) -> Option<(T, T)> {
        if self.lam > T::zero() {
            Some((self.eta / self.lam, self.lam.recip()))
        } else {
            None
        }
    }

    /// Mean `η/Λ`; requires `Λ > 0`.
    #[inline]
    pub fn mean(self) -> T {
        debug_assert!(self.lam > T::zero(), "mean of a zero-precision Gaussian");
        self.eta / self.lam
    }

    /// Variance `1/Λ`; requires `Λ > 0`.
    #[inline]
    pub fn var(self) -> T {
        debug_assert!(self.lam > T::zero(), "variance of a zero-precision Gaussian");
        self.lam.recip()
    }

    /// Gaussian product: `(η_a + η_b, Λ_a + Λ_b)`.
    ///
    /// Exactly the "products in the variable to factor" update — commutative
    /// and associative because it is addition in natural parameters.
    #[inline]
    pub fn product(self, other: Self) -> Self {
        Self { eta: self.eta + other.eta, lam: self.lam + other.lam }
    }

    /// Gaussian division: `(η_a − η_b, Λ_a − Λ_b)`.
    ///
    /// The message-reuse form "computing the belief once and then
    /// subtracting" one incoming message. May yield `Λ < 0` transiently;
    /// callers decide validity.
    #[inline]
    pub fn divide(self, other: Self) -> Self {
        Self { eta: self.eta - other.eta, lam: self.lam - other.lam }
    }

    /// True when both parameters are finite.
    #[inline]
    pub fn is_finite(self) -> bool {
        self.eta.is_finite() && self.lam.is_finite()
    }
}

impl<T: Real> Default for GaussianInfo<T> {
    fn default() -> Self {
        Self::zero()
    }
}
