//! Noise schedules, the piecewise regularizer weight, and the sinusoidal
//! time embedding. Steps are 1-based: `t` runs over `1..=T`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Per-step sampling noise scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaChoice {
    /// `sigma_t = sqrt(beta_t)`.
    #[default]
    Large,
    /// `sigma_t = sqrt(beta_t * (1 - abar_{t-1}) / (1 - abar_t))`.
    Posterior,
}

impl std::str::FromStr for SigmaChoice {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large" => Ok(Self::Large),
            "posterior" => Ok(Self::Posterior),
            other => Err(invalid(format!("unknown sigma choice `{other}` (large|posterior)"))),
        }
    }
}

impl std::fmt::Display for SigmaChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Large => "large",
            Self::Posterior => "posterior",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t` interpolated linearly between `beta_1` and `beta_T`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64, sigma: SigmaChoice) -> Result<Self> {
        if steps < 2 {
            return Err(invalid(format!("a schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_1 < beta_T < 1, got beta_1={beta_1}, beta_T={beta_t}"
            )));
        }
        let span = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_1 + i as f64 / span * (beta_t - beta_1))
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                if i == 0 {
                    return 0.0;
                }
                match sigma {
                    SigmaChoice::Large => betas[i].sqrt(),
                    SigmaChoice::Posterior => {
                        (betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])).sqrt()
                    }
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    // The accessors below panic on a step outside `1..=T`; callers validate
    // with `check_step` at their boundary.

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Regularizer weight: 1 at `t = 1`, then 0.75 / 0.5 / 0.25 / 0 on the four
/// quarters of `(1, T]`, each quarter closed at its upper end.
pub fn lambda_weight(t: usize, steps: usize) -> Result<f64> {
    if t == 0 || t > steps {
        return Err(invalid(format!("step {t} outside 1..={steps}")));
    }
    // Integer comparisons keep the boundaries exact for any T.
    Ok(if t == 1 {
        1.0
    } else if 4 * t <= steps {
        0.75
    } else if 2 * t <= steps {
        0.5
    } else if 4 * t <= 3 * steps {
        0.25
    } else {
        0.0
    })
}

/// `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with `w_i = 10000^(-2i/d)`.
pub fn sinusoidal_embedding(t: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(invalid(format!("embedding dimension must be even and positive, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02, SigmaChoice::Large).unwrap()
    }

    #[test]
    fn endpoints_and_first_alpha_bar() {
        let s = base();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-17);
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert_eq!(s.sigma(1), 0.0);
        assert_eq!(s.sigma(2), s.beta(2).sqrt());
    }

    #[test]
    fn monotone_and_recursive() {
        let s = base();
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
        }
        assert!(1.0 - s.alpha_bar(1000) > 0.99);
    }

    #[test]
    fn variance_recursion_matches() {
        let s = base();
        let mut v = 0.0;
        for t in 1..=1000 {
            v = s.alpha(t) * v + s.beta(t);
            assert!((v - (1.0 - s.alpha_bar(t))).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_sigma_is_smaller() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2, SigmaChoice::Posterior).unwrap();
        let l = NoiseSchedule::linear(100, 1e-3, 0.2, SigmaChoice::Large).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        for t in 2..=100 {
            assert!(s.sigma(t) < l.sigma(t));
        }
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02, SigmaChoice::Large).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4, SigmaChoice::Large).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.5, SigmaChoice::Large).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0, SigmaChoice::Large).is_err());
        assert!(base().check_step(0).is_err());
        assert!(base().check_step(1001).is_err());
    }

    #[test]
    fn lambda_table() {
        let ts = [1, 2, 250, 251, 500, 501, 750, 751, 1000];
        let expected = [1.0, 0.75, 0.75, 0.5, 0.5, 0.25, 0.25, 0.0, 0.0];
        for (t, e) in ts.iter().zip(expected) {
            assert_eq!(lambda_weight(*t, 1000).unwrap(), e, "t={t}");
        }
        assert!(lambda_weight(0, 1000).is_err());
        assert!(lambda_weight(1001, 1000).is_err());
    }

    #[test]
    fn lambda_nonincreasing_with_five_plateaus() {
        for steps in [2usize, 7, 100, 1000] {
            let vals: Vec<f64> = (1..=steps).map(|t| lambda_weight(t, steps).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(vals[0], 1.0);
            assert_eq!(*vals.last().unwrap(), 0.0);
        }
        let mut distinct: Vec<f64> = (1..=1000).map(|t| lambda_weight(t, 1000).unwrap()).collect();
        distinct.dedup();
        assert_eq!(distinct, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn embedding_properties() {
        let e0 = sinusoidal_embedding(0.0, 8).unwrap();
        assert_eq!(e0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_embedding(1.0, 7).is_err());
        let mut prev = sinusoidal_embedding(0.0, 128).unwrap();
        for t in 1..=1000 {
            let e = sinusoidal_embedding(t as f64, 128).unwrap();
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
            let diff: f64 = e.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(diff > 0.0);
            prev = e;
        }
    }
}
