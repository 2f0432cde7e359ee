//! Timestep tables for the Brownian bridge process and the Gaussian baseline.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Precomputed bridge quantities for `t = 0..=T`.
///
/// `m_t = t/T` moves the mean from the target latent (`t = 0`) to the source
/// latent (`t = T`); `delta_t = 2 (m_t - m_t^2)` peaks at 1/2 mid-path.
/// Per-step tables (`delta_cond`, `delta_tilde`, `c_eps`) are indexed by `t`
/// with slot 0 unused (zero).
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    horizon: usize,
    m: Vec<f64>,
    delta: Vec<f64>,
    delta_cond: Vec<f64>,
    delta_tilde: Vec<f64>,
    c_eps: Vec<f64>,
}

impl BridgeSchedule {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::invalid(format!("bridge schedule needs T >= 2, got {horizon}")));
        }
        let m: Vec<f64> = (0..=horizon).map(|t| t as f64 / horizon as f64).collect();
        let delta: Vec<f64> = m.iter().map(|&m| 2.0 * (m - m * m)).collect();
        let mut delta_cond = vec![0.0; horizon + 1];
        let mut delta_tilde = vec![0.0; horizon + 1];
        let mut c_eps = vec![0.0; horizon + 1];
        for t in 1..=horizon {
            let ratio = (1.0 - m[t]) / (1.0 - m[t - 1]);
            // Rounding can push the t = 1 difference a hair below zero.
            delta_cond[t] = (delta[t] - delta[t - 1] * ratio * ratio).max(0.0);
            if t < horizon {
                delta_tilde[t] = delta_cond[t] * delta[t - 1] / delta[t];
                c_eps[t] = (1.0 - m[t - 1]) * delta_cond[t] / delta[t];
            }
        }
        // The last reverse step has no likelihood term: its posterior is the
        // forward marginal at T-1. The ELBO weight there is taken as zero.
        delta_tilde[horizon] = delta[horizon - 1];
        c_eps[horizon] = 0.0;
        Ok(BridgeSchedule { horizon, m, delta, delta_cond, delta_tilde, c_eps })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    /// Transition variance `delta_{t|t-1}`, `1 <= t <= T`.
    pub fn delta_cond(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.delta_cond[t]
    }

    /// Reverse-step variance, `1 <= t <= T`.
    pub fn delta_tilde(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.delta_tilde[t]
    }

    /// ELBO loss weight, `1 <= t <= T`.
    pub fn c_eps(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.c_eps[t]
    }

    pub fn m_table(&self) -> &[f64] {
        &self.m
    }

    pub fn delta_table(&self) -> &[f64] {
        &self.delta
    }

    /// Coefficients `(a, b)` of the transition mean `a x_s + b y` from step
    /// `s` to step `t > s`, and its variance.
    pub fn transition(&self, s: usize, t: usize) -> (f64, f64, f64) {
        debug_assert!(s < t && t <= self.horizon);
        let a = (1.0 - self.m[t]) / (1.0 - self.m[s]);
        let b = self.m[t] - a * self.m[s];
        let var = (self.delta[t] - a * a * self.delta[s]).max(0.0);
        (a, b, var)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.horizon {
            return Err(Error::TimestepOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon {
            return Err(Error::TimestepOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// Full table as CSV: `t,m,delta,delta_cond,delta_tilde,c_eps`.
    /// Per-step columns are empty at `t = 0`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,m,delta,delta_cond,delta_tilde,c_eps\n");
        for t in 0..=self.horizon {
            if t == 0 {
                let _ = writeln!(out, "0,{},{},,,", self.m[0], self.delta[0]);
            } else {
                let _ = writeln!(
                    out,
                    "{t},{},{},{},{},{}",
                    self.m[t], self.delta[t], self.delta_cond[t], self.delta_tilde[t], self.c_eps[t]
                );
            }
        }
        out
    }
}

/// Linear-beta Gaussian diffusion schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSchedule {
    horizon: usize,
    /// Slot 0 unused.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl GaussianSchedule {
    pub fn new(horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::invalid("gaussian schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "gaussian schedule needs 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut beta = vec![0.0; horizon + 1];
        let mut alpha_bar = vec![1.0; horizon + 1];
        for t in 1..=horizon {
            beta[t] = if horizon == 1 {
                beta_start
            } else {
                beta_start + (t - 1) as f64 * (beta_end - beta_start) / (horizon - 1) as f64
            };
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(GaussianSchedule { horizon, beta, alpha_bar })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon {
            return Err(Error::TimestepOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }
}
