use crate::error::{Error, Result};

/// Radar intensities above this (mm/h) saturate the normalized scale.
pub const RADAR_CLIP_MM_H: f64 = 128.0;
/// PWV in mm that maps to 1.0.
pub const PWV_SCALE_MM: f64 = 80.0;
pub const PWV_CLIP: f64 = 1.5;

/// `log(1 + min(x, 128)) / log(129)`.
pub fn normalize_radar(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radar intensity must be non-negative, got {x}"
        )));
    }
    Ok(x.min(RADAR_CLIP_MM_H).ln_1p() / RADAR_CLIP_MM_H.ln_1p())
}

/// Inverse of [`normalize_radar`] below the clip.
pub fn denormalize_radar(y: f64) -> f64 {
    (y * RADAR_CLIP_MM_H.ln_1p()).exp_m1()
}

pub fn normalize_pwv(x: f64) -> f64 {
    (x / PWV_SCALE_MM).clamp(0.0, PWV_CLIP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radar_endpoints() {
        assert_eq!(normalize_radar(0.0).unwrap(), 0.0);
        assert_eq!(normalize_radar(128.0).unwrap(), 1.0);
        assert_eq!(normalize_radar(500.0).unwrap(), 1.0);
        assert!(normalize_radar(-0.1).is_err());
        assert!(normalize_radar(f64::NAN).is_err());
    }

    #[test]
    fn radar_inverse() {
        for i in 0..=1280 {
            let x = i as f64 * 0.1;
            assert!(
                (denormalize_radar(normalize_radar(x).unwrap()) - x).abs() < 1e-12,
                "{x}"
            );
        }
    }

    #[test]
    fn pwv_scale_and_clip() {
        assert_eq!(normalize_pwv(0.0), 0.0);
        assert_eq!(normalize_pwv(40.0), 0.5);
        assert_eq!(normalize_pwv(200.0), 1.5);
    }
}
