//! Stokes parameters and the Degree of Linear Polarization from
//! polarizer-filtered intensity measurements.
//!
//! Intensities are captured through linear polarizers at 0, 90, 45 and
//! -45 degrees, plus optional right/left circular filters. The `difference`
//! convention computes S2 = I45 - I-45 and S3 = IR - IL, which keeps DoLP
//! inside [0,1] for physical inputs. The `as_written` convention keeps the
//! sum form for both and is retained behind an explicit flag.

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-pixel polarizer-filtered intensities. Linear channels are required,
/// circular channels are optional (passive LWIR imaging carries essentially
/// no circular polarization).
#[derive(Debug, Clone)]
pub struct IntensityMeasurements {
    pub i0: Image,
    pub i90: Image,
    pub i45: Image,
    pub i_neg45: Image,
    pub i_right: Option<Image>,
    pub i_left: Option<Image>,
}

impl IntensityMeasurements {
    pub fn validate(&self) -> Result<()> {
        let mut channels: Vec<(&str, &Image)> = vec![
            ("i0", &self.i0),
            ("i90", &self.i90),
            ("i45", &self.i45),
            ("i_neg45", &self.i_neg45),
        ];
        if let Some(ir) = &self.i_right {
            channels.push(("i_right", ir));
        }
        if let Some(il) = &self.i_left {
            channels.push(("i_left", il));
        }
        let (h, w) = (self.i0.height, self.i0.width);
        for (name, img) in &channels {
            if img.height != h || img.width != w {
                return Err(Error::ShapeMismatch(format!(
                    "channel {name} is {}x{}, expected {h}x{w}",
                    img.height, img.width
                )));
            }
            for &v in &img.data {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "channel {name} contains non-finite or negative intensity {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sign convention for S2/S3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StokesConvention {
    /// S2 = I45 - I-45, S3 = IR - IL. Default; keeps DoLP a degree in [0,1].
    Difference,
    /// S2 = I45 + I-45, S3 = IR + IL, exactly as the sum form reads.
    AsWritten,
}

impl std::str::FromStr for StokesConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "difference" => Ok(StokesConvention::Difference),
            "as_written" => Ok(StokesConvention::AsWritten),
            other => Err(Error::Config(format!("unknown convention `{other}`"))),
        }
    }
}

/// Multi-channel Stokes image. `s3` is identically zero unless circular
/// channels were supplied.
#[derive(Debug, Clone)]
pub struct StokesImage {
    pub s0: Image,
    pub s1: Image,
    pub s2: Image,
    pub s3: Image,
}

pub fn stokes_from_intensities(
    m: &IntensityMeasurements,
    convention: StokesConvention,
) -> Result<StokesImage> {
    m.validate()?;
    let s0 = m.i0.zip(&m.i90, |a, b| a + b)?;
    let s1 = m.i0.zip(&m.i90, |a, b| a - b)?;
    let s2 = match convention {
        StokesConvention::Difference => m.i45.zip(&m.i_neg45, |a, b| a - b)?,
        StokesConvention::AsWritten => m.i45.zip(&m.i_neg45, |a, b| a + b)?,
    };
    let s3 = match (&m.i_right, &m.i_left) {
        (Some(ir), Some(il)) => match convention {
            StokesConvention::Difference => ir.zip(il, |a, b| a - b)?,
            StokesConvention::AsWritten => ir.zip(il, |a, b| a + b)?,
        },
        // no circular measurement: S3 taken as zero
        _ => Image::zeros(s0.height, s0.width),
    };
    Ok(StokesImage { s0, s1, s2, s3 })
}

/// DoLP = sqrt(S1^2 + S2^2) / max(S0, epsilon), pixelwise.
pub fn dolp(s: &StokesImage, epsilon: f64) -> Result<Image> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let num = s.s1.zip(&s.s2, |a, b| (a * a + b * b).sqrt())?;
    num.zip(&s.s0, |n, d| n / d.max(epsilon))
}

pub const DEFAULT_DOLP_EPSILON: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Image {
        Image::constant(1, 1, v)
    }

    fn meas(i0: f64, i90: f64, i45: f64, i_neg45: f64) -> IntensityMeasurements {
        IntensityMeasurements {
            i0: single(i0),
            i90: single(i90),
            i45: single(i45),
            i_neg45: single(i_neg45),
            i_right: None,
            i_left: None,
        }
    }

    #[test]
    fn unpolarized_symmetry() {
        let m = meas(1.0, 1.0, 1.0, 1.0);
        let s = stokes_from_intensities(&m, StokesConvention::Difference).unwrap();
        assert_eq!(s.s0.at(0, 0), 2.0);
        assert_eq!(s.s1.at(0, 0), 0.0);
        assert_eq!(s.s2.at(0, 0), 0.0);
        assert_eq!(s.s3.at(0, 0), 0.0);
    }

    #[test]
    fn hand_evaluated_difference() {
        let m = meas(3.0, 1.0, 2.0, 2.0);
        let s = stokes_from_intensities(&m, StokesConvention::Difference).unwrap();
        assert_eq!(s.s0.at(0, 0), 4.0);
        assert_eq!(s.s1.at(0, 0), 2.0);
        assert_eq!(s.s2.at(0, 0), 0.0);
    }

    #[test]
    fn hand_evaluated_as_written() {
        let m = meas(3.0, 1.0, 2.0, 2.0);
        let s = stokes_from_intensities(&m, StokesConvention::AsWritten).unwrap();
        assert_eq!(s.s2.at(0, 0), 4.0);
    }

    #[test]
    fn dolp_zero_numerator() {
        let s = StokesImage {
            s0: single(5.0),
            s1: single(0.0),
            s2: single(0.0),
            s3: single(0.0),
        };
        assert_eq!(dolp(&s, DEFAULT_DOLP_EPSILON).unwrap().at(0, 0), 0.0);
    }

    #[test]
    fn dolp_hand_evaluated() {
        let s = StokesImage {
            s0: single(4.0),
            s1: single(2.0),
            s2: single(0.0),
            s3: single(0.0),
        };
        assert_eq!(dolp(&s, DEFAULT_DOLP_EPSILON).unwrap().at(0, 0), 0.5);
    }

    #[test]
    fn dolp_scale_invariant() {
        let m = meas(3.0, 1.0, 2.5, 1.5);
        let c = 7.25;
        let scaled = meas(3.0 * c, 1.0 * c, 2.5 * c, 1.5 * c);
        let d1 = dolp(
            &stokes_from_intensities(&m, StokesConvention::Difference).unwrap(),
            DEFAULT_DOLP_EPSILON,
        )
        .unwrap();
        let d2 = dolp(
            &stokes_from_intensities(&scaled, StokesConvention::Difference).unwrap(),
            DEFAULT_DOLP_EPSILON,
        )
        .unwrap();
        assert!((d1.at(0, 0) - d2.at(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn round_trip_linear_identities() {
        let m = meas(3.0, 1.25, 2.0, 0.5);
        let s = stokes_from_intensities(&m, StokesConvention::Difference).unwrap();
        assert_eq!(s.s0.at(0, 0) + s.s1.at(0, 0), 2.0 * 3.0);
        assert_eq!(s.s0.at(0, 0) - s.s1.at(0, 0), 2.0 * 1.25);
    }

    #[test]
    fn rejects_negative_intensity() {
        let m = meas(-1.0, 1.0, 1.0, 1.0);
        assert!(stokes_from_intensities(&m, StokesConvention::Difference).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let m = IntensityMeasurements {
            i0: Image::zeros(2, 2),
            i90: Image::zeros(2, 3),
            i45: Image::zeros(2, 2),
            i_neg45: Image::zeros(2, 2),
            i_right: None,
            i_left: None,
        };
        assert!(stokes_from_intensities(&m, StokesConvention::Difference).is_err());
    }

    #[test]
    fn s3_from_circular_channels() {
        let mut m = meas(1.0, 1.0, 1.0, 1.0);
        m.i_right = Some(single(0.75));
        m.i_left = Some(single(0.25));
        let s = stokes_from_intensities(&m, StokesConvention::Difference).unwrap();
        assert_eq!(s.s3.at(0, 0), 0.5);
    }
}
