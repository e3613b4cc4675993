//! Physical constants and the complex refractive index `n = 1 - δ + iβ`.
//!
//! Every module converts photon energy to a wavenumber through
//! [`wavenumber`], so rendered and measured contrasts agree on `k`.

use serde::{Deserialize, Serialize};

/// Planck constant, J·s (exact, SI 2019).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Speed of light in vacuum, m/s (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Elementary charge, C (exact); converts eV to J.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Wavenumber `k = 2πE/(hc)` in 1/m for a photon energy in keV.
///
/// At 18 keV this is 9.12192e10 m⁻¹.
pub fn wavenumber(energy_kev: f64) -> f64 {
    let joules = energy_kev * 1e3 * ELEMENTARY_CHARGE;
    2.0 * std::f64::consts::PI * joules / (PLANCK * SPEED_OF_LIGHT)
}

/// Contrast channel of a projection image.
///
/// Attenuation is `k∫β dz`, phase is `k∫δ dz`. The complex log of the exit
/// wave ratio is `-attenuation - i·phase`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Attenuation,
    Phase,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Attenuation, Channel::Phase];
}

/// A homogeneous material at a single photon energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub delta: f64,
    pub beta: f64,
    pub energy_kev: f64,
}

impl Material {
    /// Pure aluminum at 18 keV.
    pub const fn aluminum_18kev() -> Self {
        Material {
            delta: 1.6741e-7,
            beta: 6.4088e-9,
            energy_kev: 18.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.delta >= 0.0
            && self.beta >= 0.0
            && self.delta.is_finite()
            && self.beta.is_finite()
            && self.energy_kev > 0.0
    }
}

impl Default for Material {
    fn default() -> Self {
        Material::aluminum_18kev()
    }
}

/// Attenuation contrast from a raw intensity and its flat field,
/// `-ln(I/I0)`. Used when ingesting detector frames.
pub fn attenuation_from_intensity(intensity: f64, flat: f64) -> f64 {
    -(intensity / flat).ln()
}

/// Applies [`attenuation_from_intensity`] pixelwise.
pub fn attenuation_image(intensity: &[f64], flat: &[f64]) -> Vec<f64> {
    intensity
        .iter()
        .zip(flat)
        .map(|(&i, &f)| attenuation_from_intensity(i, f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wavenumber_at_18kev() {
        // hc = 1.239841984 keV·nm, so λ(18 keV) = 0.0688801 nm.
        let lambda = 1.239_841_984e-9 / 18.0;
        let k = 2.0 * std::f64::consts::PI / lambda;
        assert!((wavenumber(18.0) - k).abs() / k < 1e-9);
        assert!((wavenumber(18.0) - 9.12192e10).abs() < 1e5);
    }

    #[test]
    fn intensity_conversion() {
        assert_eq!(attenuation_from_intensity(1.0, 1.0), 0.0);
        let a = attenuation_from_intensity((-0.25f64).exp(), 1.0);
        assert!((a - 0.25).abs() < 1e-15);
        assert_eq!(attenuation_image(&[2.0, 2.0], &[2.0, 2.0]), vec![0.0, 0.0]);
    }
}
