//! Physical constants and model-wide defaults.

use num_complex::Complex64;

/// Spherical Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Density of liquid water in g/µm³ (1 g/cm³).
pub const WATER_DENSITY_G_PER_UM3: f64 = 1.0e-12;

/// Planck constant in J·s.
pub const PLANCK_J_S: f64 = 6.626_070_15e-34;

/// Speed of light in m/s.
pub const LIGHT_SPEED_M_S: f64 = 299_792_458.0;

/// Smallest effective radius the optics tables and retrieval support, in µm.
pub const RE_MIN_UM: f64 = 2.5;

/// Largest effective radius the optics tables and retrieval support, in µm.
pub const RE_MAX_UM: f64 = 40.0;

/// Liquid water content at cloud base for monotonic profiles, in g/m³.
pub const LWC_MIN_G_M3: f64 = 1.0e-4;

/// Centre wavelength of the red imaging band, in nm.
pub const BAND_CENTER_NM: f64 = 645.0;

/// Refractive index of liquid water in the red band.
pub const WATER_REFRACTIVE_INDEX: Complex64 = Complex64::new(1.331, 1.64e-8);
