//! Closed-form solution family for `n = 4` with a doubled minimum and a
//! doubled maximum on the `A0 = k rho0` surface.

use std::f64::consts::FRAC_PI_2;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{RepParams, SpectralInitialData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExampleFamily {
    params: RepParams,
    lambda_lo: f64,
    lambda_hi: f64,
    /// half gap `(lambda_hi - lambda_lo) / 2`
    p: f64,
    rho0: f64,
    s: f64,
    phi: f64,
    t_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExampleValues {
    pub lambda1: f64,
    /// `lambda_3 = lambda_4`
    pub lambda4: f64,
    pub rho: f64,
    pub u1u4: f64,
}

impl ExampleFamily {
    /// Builds the family from `(k, c_b)` and the two initial eigenvalues; the
    /// density is derived so that the data lie exactly on `A0 = k rho0`.
    pub fn new(k: f64, c_b: f64, lambda_lo: f64, lambda_hi: f64) -> Result<Self> {
        if !lambda_lo.is_finite() || !lambda_hi.is_finite() {
            return Err(Error::NonFiniteInput("lambda0"));
        }
        if !(lambda_lo < lambda_hi) {
            return Err(Error::InvalidFamily("need lambda_lo < lambda_hi"));
        }
        let params = RepParams::new(4, k, c_b)?;
        let w = params.omega();
        let gap = lambda_hi - lambda_lo;
        let s = (lambda_lo + lambda_hi) / (2.0 * w);
        let phi = s.atan();
        Ok(Self {
            params,
            lambda_lo,
            lambda_hi,
            p: gap / 2.0,
            rho0: gap * gap / k,
            s,
            phi,
            t_b: (FRAC_PI_2 + phi) / w,
        })
    }

    /// `k = 4`, `c_b = 1`, `lambda0 = (-1, -1, 1, 1)`, `rho0 = 1`.
    pub fn standard() -> Self {
        Self::new(4.0, 1.0, -1.0, 1.0).expect("valid family")
    }

    pub fn params(&self) -> RepParams {
        self.params
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn init(&self) -> SpectralInitialData {
        SpectralInitialData::new(
            self.rho0,
            vec![
                self.lambda_lo,
                self.lambda_lo,
                self.lambda_hi,
                self.lambda_hi,
            ],
        )
        .expect("family data are valid")
    }

    pub fn t_b(&self) -> f64 {
        self.t_b
    }

    /// `C` in `(t_B - t)^2 lambda_1 -> -C` and `(t_B - t)^2 lambda_4 -> C`.
    pub fn pole_coefficient(&self) -> f64 {
        let w2 = self.params.omega().powi(2);
        self.p / ((self.s * self.s + 1.0) * w2)
    }

    /// Limit of `(t_B - t)^4 rho`, equal to `4 C^2 / k`.
    pub fn density_coefficient(&self) -> f64 {
        let w2 = self.params.omega().powi(2);
        self.rho0 / ((self.s * self.s + 1.0) * w2).powi(2)
    }

    pub fn eval(&self, t: f64) -> Result<ExampleValues> {
        if !(t >= 0.0 && t < self.t_b) {
            return Err(Error::OutOfDomain { t, t_b: self.t_b });
        }
        let w = self.params.omega();
        let x = w * t - self.phi;
        let (sin, cos) = x.sin_cos();
        let sec2 = 1.0 / (cos * cos);
        let tan = sin / cos;
        let s1 = self.s * self.s + 1.0;
        let a = self.p / s1 * sec2;
        Ok(ExampleValues {
            lambda1: -a - w * tan,
            lambda4: a - w * tan,
            rho: self.rho0 * sec2 * sec2 / (s1 * s1),
            u1u4: s1 * cos * cos,
        })
    }
}

/// `t_B` of the family: `(pi/2 + arctan((lambda_lo + lambda_hi) / (2 omega))) / omega`.
pub fn example_t_b(family: &ExampleFamily) -> f64 {
    family.t_b()
}
