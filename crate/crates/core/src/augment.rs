//! Stochastic time-series augmentations on channel-major `H x L` buffers.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Independent per-channel magnitude factor.
    Rescale,
    /// Smooth monotone re-timing with fixed endpoints.
    TimeWarp,
    /// One global magnitude factor.
    Scaling,
}

/// Random multipliers are drawn from `Normal(1, sigma)` and clipped to `clip`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub sigma: f64,
    pub clip: [f64; 2],
    /// Interior knots of the warp speed profile (time warp only).
    #[serde(default = "default_knots")]
    pub knots: usize,
}

fn default_knots() -> usize {
    4
}

/// Windows shorter than this are passed through `time_warp` unchanged.
pub const MIN_WARP_LEN: usize = 8;

impl AugmentSpec {
    pub fn rescale() -> Self {
        Self {
            kind: AugmentKind::Rescale,
            sigma: 0.1,
            clip: [0.7, 1.3],
            knots: default_knots(),
        }
    }

    pub fn time_warp() -> Self {
        Self {
            kind: AugmentKind::TimeWarp,
            sigma: 0.2,
            clip: [0.5, 2.0],
            knots: default_knots(),
        }
    }

    pub fn scaling() -> Self {
        Self {
            kind: AugmentKind::Scaling,
            sigma: 0.1,
            clip: [0.7, 1.3],
            knots: default_knots(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.clip;
        if !(self.sigma >= 0.0 && lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::Config(alloc::format!(
                "augmentation {:?}: need sigma >= 0 and 0 < clip_lo <= 1 <= clip_hi",
                self.kind
            )));
        }
        if self.kind == AugmentKind::TimeWarp && self.knots == 0 {
            return Err(Error::Config("time warp needs at least one knot".into()));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return 1.0;
        }
        let normal = Normal::new(1.0, self.sigma).expect("sigma validated");
        normal.sample(rng).clamp(self.clip[0], self.clip[1])
    }

    /// Samples this augmentation's parameters and applies them.
    pub fn apply<R: Rng + ?Sized>(&self, values: &[f64], channels: usize, len: usize, rng: &mut R) -> Vec<f64> {
        match self.kind {
            AugmentKind::Rescale => {
                let factors: Vec<f64> = (0..channels).map(|_| self.draw(rng)).collect();
                rescale_with(values, len, &factors)
            }
            AugmentKind::TimeWarp => {
                if len < MIN_WARP_LEN {
                    log::debug!("time warp skipped for window of length {len}");
                    return values.to_vec();
                }
                let speeds: Vec<f64> = (0..self.knots).map(|_| self.draw(rng)).collect();
                time_warp_with(values, len, &speeds)
            }
            AugmentKind::Scaling => scaling_with(values, self.draw(rng)),
        }
    }
}

/// Multiplies channel `h` by `factors[h]`.
pub fn rescale_with(values: &[f64], len: usize, factors: &[f64]) -> Vec<f64> {
    values
        .chunks(len)
        .zip(factors)
        .flat_map(|(ch, f)| ch.iter().map(move |v| v * f))
        .collect()
}

pub fn scaling_with(values: &[f64], factor: f64) -> Vec<f64> {
    values.iter().map(|v| v * factor).collect()
}

/// Warped sample positions for a window of `len` samples: the speed profile
/// is piecewise linear through evenly spaced interior knots, integrated with
/// the trapezoid rule and rescaled onto `[0, len-1]`.
pub fn warp_positions(len: usize, speeds: &[f64]) -> Vec<f64> {
    let k = speeds.len();
    let last = (len - 1) as f64;
    let knot_pos: Vec<f64> = (0..k).map(|j| (j + 1) as f64 * last / (k + 1) as f64).collect();
    let speed_at = |x: f64| -> f64 {
        if x <= knot_pos[0] {
            return speeds[0];
        }
        if x >= knot_pos[k - 1] {
            return speeds[k - 1];
        }
        let j = knot_pos.iter().position(|&p| p >= x).unwrap();
        let (x0, x1) = (knot_pos[j - 1], knot_pos[j]);
        let f = (x - x0) / (x1 - x0);
        speeds[j - 1] * (1.0 - f) + speeds[j] * f
    };
    let profile: Vec<f64> = (0..len).map(|i| speed_at(i as f64)).collect();
    let mut pos = Vec::with_capacity(len);
    pos.push(0.0);
    for i in 1..len {
        let prev = pos[i - 1];
        pos.push(prev + 0.5 * (profile[i - 1] + profile[i]));
    }
    let scale = last / pos[len - 1];
    for p in pos.iter_mut() {
        *p *= scale;
    }
    pos[len - 1] = last;
    pos
}

/// Resamples every channel at the warped positions by linear interpolation.
pub fn time_warp_with(values: &[f64], len: usize, speeds: &[f64]) -> Vec<f64> {
    if len < MIN_WARP_LEN || speeds.is_empty() {
        return values.to_vec();
    }
    let pos = warp_positions(len, speeds);
    let mut out = Vec::with_capacity(values.len());
    for ch in values.chunks(len) {
        for &x in &pos {
            let i0 = (libm::floor(x) as usize).min(len - 2);
            let frac = x - i0 as f64;
            out.push(ch[i0] * (1.0 - frac) + ch[i0 + 1] * frac);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;

    #[test]
    fn warp_with_unit_speeds_is_identity() {
        let x: Vec<f64> = (0..60).map(|i| libm::sin(i as f64 * 0.37)).collect();
        let y = time_warp_with(&x, 30, &[1.0; 4]);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_keeps_endpoints_and_is_strictly_increasing() {
        let mut rng = seeded(5);
        for _ in 0..200 {
            let pos = {
                let spec = AugmentSpec::time_warp();
                let s: Vec<f64> = (0..4).map(|_| spec.draw(&mut rng)).collect();
                warp_positions(25, &s)
            };
            assert_eq!(pos[0], 0.0);
            assert_eq!(pos[24], 24.0);
            assert!(pos.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn short_windows_skip_warping() {
        let mut rng = seeded(1);
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(AugmentSpec::time_warp().apply(&x, 1, 7, &mut rng), x);
    }

    #[test]
    fn zero_sigma_draws_the_mean() {
        let mut rng = seeded(2);
        let x: Vec<f64> = (0..40).map(|i| i as f64 - 3.5).collect();
        for kind in [AugmentKind::Rescale, AugmentKind::TimeWarp, AugmentKind::Scaling] {
            let spec = AugmentSpec { kind, sigma: 0.0, clip: [0.5, 2.0], knots: 4 };
            let y = spec.apply(&x, 2, 20, &mut rng);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn factors_respect_clip_range() {
        let mut rng = seeded(3);
        let spec = AugmentSpec { sigma: 5.0, ..AugmentSpec::rescale() };
        for _ in 0..1000 {
            let f = spec.draw(&mut rng);
            assert!((0.7..=1.3).contains(&f));
        }
    }
}
