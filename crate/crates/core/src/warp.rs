//! Sinh-arcsinh likelihood warp.
//!
//! Forward map `z = sinh(δ·asinh(y) − ε)` with `δ = exp(log_delta)`, so the
//! tail parameter stays positive for every real `log_delta`. The inverse is
//! `y = sinh((asinh(z) + ε)/δ)`. `ε = 0, log_delta = 0` is the identity.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpParams<T> {
    /// Skew parameter.
    pub epsilon: T,
    /// Log of the tail parameter.
    pub log_delta: T,
}

/// Derivatives of the warped value and of the log-Jacobian with respect to
/// `(epsilon, log_delta)` at one response value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpPartials<T> {
    pub z: T,
    pub log_jacobian: T,
    pub dz_depsilon: T,
    pub dz_dlog_delta: T,
    pub dlogjac_depsilon: T,
    pub dlogjac_dlog_delta: T,
}

impl<T: Scalar> Default for WarpParams<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> WarpParams<T> {
    pub fn new(epsilon: T, log_delta: T) -> Self {
        WarpParams { epsilon, log_delta }
    }

    pub fn identity() -> Self {
        WarpParams { epsilon: T::zero(), log_delta: T::zero() }
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon == T::zero() && self.log_delta == T::zero()
    }

    pub fn delta(&self) -> T {
        self.log_delta.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.epsilon.is_finite() && self.log_delta.is_finite()
    }

    #[inline]
    fn inner(&self, y: T) -> T {
        self.delta() * y.asinh() - self.epsilon
    }

    pub fn forward(&self, y: T) -> T {
        if self.is_identity() {
            return y;
        }
        self.inner(y).sinh()
    }

    pub fn inverse(&self, z: T) -> T {
        if self.is_identity() {
            return z;
        }
        ((z.asinh() + self.epsilon) / self.delta()).sinh()
    }

    /// `dz/dy`, strictly positive.
    pub fn derivative(&self, y: T) -> T {
        if self.is_identity() {
            return T::one();
        }
        self.delta() * self.inner(y).cosh() / T::one().hypot(y)
    }

    /// `ln(dz/dy)`, evaluated in log space so it stays finite where `cosh` overflows.
    pub fn log_jacobian(&self, y: T) -> T {
        if self.is_identity() {
            return T::zero();
        }
        self.log_delta + self.inner(y).ln_cosh() - T::one().hypot(y).ln()
    }

    pub fn partials(&self, y: T) -> WarpPartials<T> {
        let delta = self.delta();
        let a = y.asinh();
        let u = delta * a - self.epsilon;
        let c = u.cosh();
        let t = u.tanh();
        WarpPartials {
            z: u.sinh(),
            log_jacobian: self.log_delta + u.ln_cosh() - T::one().hypot(y).ln(),
            dz_depsilon: -c,
            dz_dlog_delta: c * delta * a,
            dlogjac_depsilon: -t,
            dlogjac_dlog_delta: T::one() + t * delta * a,
        }
    }

    pub fn forward_all(&self, ys: &[T]) -> Vec<T> {
        ys.iter().map(|&y| self.forward(y)).collect()
    }

    pub fn inverse_all(&self, zs: &[T]) -> Vec<T> {
        zs.iter().map(|&z| self.inverse(z)).collect()
    }
}
