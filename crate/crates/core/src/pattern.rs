//! Screen patterns: crossed fringes, phase-shifted sinusoids and arbitrary
//! images.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ScreenModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FringeAxis {
    X,
    Y,
}

/// Mean and modulation of every phase-shift frame.
pub const PHASE_SHIFT_BIAS: f64 = 0.5;
pub const PHASE_SHIFT_AMPLITUDE: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub enum PatternSpec {
    /// `bias + amp_x·cos(2πu/period_x) + amp_y·cos(2πv/period_y)`.
    CrossedFringe { period_x: f64, period_y: f64, amp_x: f64, amp_y: f64, bias: f64 },
    /// `0.5 + 0.4·cos(2π·coord/period + 2π·k/n_shifts)` for shift `k`.
    PhaseShiftSet { period: f64, n_shifts: usize, direction: FringeAxis },
    /// Row-major intensities, bilinearly sampled at pixel centers.
    ImagePattern { width: usize, height: usize, data: Vec<f64> },
}

impl PatternSpec {
    pub fn crossed(period_x: f64, period_y: f64) -> Self {
        PatternSpec::CrossedFringe { period_x, period_y, amp_x: 0.25, amp_y: 0.25, bias: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPattern(m));
        match *self {
            PatternSpec::CrossedFringe { period_x, period_y, amp_x, amp_y, bias } => {
                if !(period_x >= 4.0 && period_y >= 4.0) {
                    return bad(format!("periods must be >= 4 px (got {period_x}, {period_y})"));
                }
                if !((0.0..=0.25).contains(&amp_x) && (0.0..=0.25).contains(&amp_y)) {
                    return bad("amplitudes must lie in [0, 0.25]".into());
                }
                if !(0.0..=1.0).contains(&bias) {
                    return bad("bias must lie in [0, 1]".into());
                }
                if bias + amp_x + amp_y > 1.0 || bias - amp_x - amp_y < 0.0 {
                    return bad("bias ± amplitudes must stay within [0, 1]".into());
                }
            }
            PatternSpec::PhaseShiftSet { period, n_shifts, .. } => {
                if !(period >= 4.0) {
                    return bad(format!("period must be >= 4 px (got {period})"));
                }
                if n_shifts < 3 {
                    return bad(format!("need at least 3 shifts (got {n_shifts})"));
                }
            }
            PatternSpec::ImagePattern { width, height, ref data } => {
                if data.len() != width * height || width == 0 || height == 0 {
                    return bad("image pattern size mismatch".into());
                }
                if data.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return bad("image pattern values must lie in [0, 1]".into());
                }
            }
        }
        Ok(())
    }

    /// Number of frames this pattern produces.
    pub fn n_frames(&self) -> usize {
        match self {
            PatternSpec::PhaseShiftSet { n_shifts, .. } => *n_shifts,
            _ => 1,
        }
    }

    /// Intensity without range checks; callers guarantee `(u, v)` is on the
    /// screen.
    #[inline]
    pub(crate) fn sample(&self, u: f64, v: f64, shift_index: usize) -> f64 {
        match *self {
            PatternSpec::CrossedFringe { period_x, period_y, amp_x, amp_y, bias } => {
                bias + amp_x * (TAU * u / period_x).cos() + amp_y * (TAU * v / period_y).cos()
            }
            PatternSpec::PhaseShiftSet { period, n_shifts, direction } => {
                let coord = match direction {
                    FringeAxis::X => u,
                    FringeAxis::Y => v,
                };
                PHASE_SHIFT_BIAS
                    + PHASE_SHIFT_AMPLITUDE
                        * (TAU * coord / period + TAU * shift_index as f64 / n_shifts as f64).cos()
            }
            PatternSpec::ImagePattern { width, height, ref data } => {
                bilinear(data, width, height, u, v)
            }
        }
    }
}

fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |xx: usize, yy: usize| data[yy * width + xx];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
        + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

/// Pattern intensity at screen pixel coordinates `(u, v)`.
pub fn pattern_value(
    pattern: &PatternSpec,
    screen: &ScreenModel,
    u: f64,
    v: f64,
    shift_index: usize,
) -> Result<f64> {
    if !screen.contains(u, v) {
        return Err(Error::PatternOutOfRange { u, v });
    }
    if shift_index >= pattern.n_frames() {
        return Err(Error::InvalidPattern(format!(
            "shift index {shift_index} out of range for {} frame(s)",
            pattern.n_frames()
        )));
    }
    Ok(pattern.sample(u, v, shift_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneConfig;
    use approx::assert_abs_diff_eq;

    fn screen() -> ScreenModel {
        SceneConfig::default_scene().screen
    }

    #[test]
    fn crossed_fringe_values() {
        let p = PatternSpec::crossed(16.0, 16.0);
        p.validate().unwrap();
        assert_abs_diff_eq!(pattern_value(&p, &screen(), 0.0, 0.0, 0).unwrap(), 1.0);
        assert_abs_diff_eq!(pattern_value(&p, &screen(), 8.0, 0.0, 0).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn phase_shift_values() {
        let p = PatternSpec::PhaseShiftSet { period: 32.0, n_shifts: 4, direction: FringeAxis::X };
        let got: Vec<f64> =
            (0..4).map(|k| pattern_value(&p, &screen(), 8.0, 3.0, k).unwrap()).collect();
        for (g, e) in got.iter().zip([0.5, 0.1, 0.5, 0.9]) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
        }
        assert!(pattern_value(&p, &screen(), 8.0, 3.0, 4).is_err());
    }

    #[test]
    fn image_pattern_is_bilinear() {
        let p = PatternSpec::ImagePattern { width: 2, height: 2, data: vec![0.0, 1.0, 0.5, 0.5] };
        p.validate().unwrap();
        assert_abs_diff_eq!(p.sample(0.5, 0.0, 0), 0.5);
        assert_abs_diff_eq!(p.sample(0.5, 0.5, 0), 0.5);
        assert_abs_diff_eq!(p.sample(0.0, 0.5, 0), 0.25);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let p = PatternSpec::crossed(16.0, 16.0);
        assert!(matches!(
            pattern_value(&p, &screen(), -0.1, 3.0, 0),
            Err(Error::PatternOutOfRange { .. })
        ));
        assert!(pattern_value(&p, &screen(), 600.0, 3.0, 0).is_err());
    }

    #[test]
    fn validation_rejects_clipping_and_short_periods() {
        let clip = PatternSpec::CrossedFringe {
            period_x: 16.0,
            period_y: 16.0,
            amp_x: 0.25,
            amp_y: 0.25,
            bias: 0.8,
        };
        assert!(clip.validate().is_err());
        assert!(PatternSpec::crossed(3.0, 16.0).validate().is_err());
        let few = PatternSpec::PhaseShiftSet { period: 32.0, n_shifts: 2, direction: FringeAxis::Y };
        assert!(few.validate().is_err());
    }
}
