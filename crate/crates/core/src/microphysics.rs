//! Gamma droplet-size-distribution model and voxelised cloud fields.
//!
//! A droplet population is described by the gamma law
//!
//! ```text
//! n(r) = N · C · r^(1/vₑ − 3) · exp[−r / (rₑ·vₑ)],
//! C    = (rₑ·vₑ)^(2 − 1/vₑ) / Γ(1/vₑ − 2),
//! ```
//!
//! where N is the droplet number concentration per m³, rₑ the area-weighted
//! effective radius in µm and vₑ the unitless effective variance. The
//! normalization requires 1/vₑ − 2 > 0, i.e. vₑ < 0.5. Liquid water content
//! follows from the third moment,
//!
//! ```text
//! LWC = (4/3)·π·ρ_w·∫ r³ n(r) dr = (4/3)·π·ρ_w·N·rₑ³·(1−vₑ)(1−2vₑ),
//! ```
//!
//! with ρ_w = 1 g/cm³. The closed forms used here are validated against
//! adaptive quadrature of the integrals in the test suite.

use ndarray::Array3;
use statrs::function::gamma::ln_gamma;

use crate::constants::{LWC_MIN_G_M3, RE_MAX_UM, RE_MIN_UM, WATER_DENSITY_G_PER_UM3};
use crate::error::CoreError;

/// Volume of a sphere per unit r³, times water density, in g/µm³.
const SPHERE_MASS_FACTOR: f64 = 4.0 / 3.0 * std::f64::consts::PI * WATER_DENSITY_G_PER_UM3;

/// Gamma size-distribution parameters of one droplet population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropletDistribution {
    number_concentration: f64,
    effective_radius: f64,
    effective_variance: f64,
    /// Cached ln C of the normalization constant.
    ln_norm: f64,
}

fn validate_shape(r_e: f64, v_e: f64) -> Result<(), CoreError> {
    if !(r_e.is_finite() && r_e > 0.0) {
        return Err(CoreError::invalid(format!(
            "effective radius must be positive, got {r_e}"
        )));
    }
    if !(v_e.is_finite() && v_e > 0.0 && v_e < 0.5) {
        return Err(CoreError::invalid(format!(
            "effective variance must lie in (0, 0.5), got {v_e}"
        )));
    }
    Ok(())
}

impl DropletDistribution {
    /// Builds a distribution from number concentration (per m³), effective
    /// radius (µm) and effective variance.
    pub fn new(
        number_concentration: f64,
        effective_radius: f64,
        effective_variance: f64,
    ) -> Result<Self, CoreError> {
        if !(number_concentration.is_finite() && number_concentration >= 0.0) {
            return Err(CoreError::invalid(format!(
                "number concentration must be nonnegative, got {number_concentration}"
            )));
        }
        validate_shape(effective_radius, effective_variance)?;
        let a = 1.0 / effective_variance - 2.0;
        let scale = effective_radius * effective_variance;
        let ln_norm = -a * scale.ln() - ln_gamma(a);
        Ok(DropletDistribution {
            number_concentration,
            effective_radius,
            effective_variance,
            ln_norm,
        })
    }

    /// Builds the distribution whose liquid water content is `lwc` g/m³.
    pub fn from_lwc(lwc: f64, effective_radius: f64, effective_variance: f64) -> Result<Self, CoreError> {
        if !(lwc.is_finite() && lwc >= 0.0) {
            return Err(CoreError::invalid(format!(
                "liquid water content must be nonnegative, got {lwc}"
            )));
        }
        let n = number_concentration(lwc, effective_radius, effective_variance)?;
        DropletDistribution::new(n, effective_radius, effective_variance)
    }

    pub fn number_concentration(&self) -> f64 {
        self.number_concentration
    }

    pub fn effective_radius(&self) -> f64 {
        self.effective_radius
    }

    pub fn effective_variance(&self) -> f64 {
        self.effective_variance
    }

    /// Density n(r) in droplets per µm of radius per m³ of air.
    ///
    /// Always finite and nonnegative for r ≥ 0; at exactly r = 0 the value
    /// 0 is returned (for vₑ > 1/3 the power law diverges there, but the
    /// origin carries no measure).
    pub fn density(&self, r: f64) -> f64 {
        if r <= 0.0 || self.number_concentration == 0.0 {
            return 0.0;
        }
        let exponent = 1.0 / self.effective_variance - 3.0;
        let scale = self.effective_radius * self.effective_variance;
        let ln_density = self.ln_norm + exponent * r.ln() - r / scale;
        self.number_concentration * ln_density.exp()
    }

    /// Liquid water content in g/m³ via the closed-form third moment.
    pub fn lwc(&self) -> f64 {
        let ve = self.effective_variance;
        SPHERE_MASS_FACTOR
            * self.number_concentration
            * self.effective_radius.powi(3)
            * (1.0 - ve)
            * (1.0 - 2.0 * ve)
    }

    /// Upper radius of the numerically significant support, rₑ(1 + 20·vₑ).
    pub fn support_radius(&self) -> f64 {
        self.effective_radius * (1.0 + 20.0 * self.effective_variance)
    }

    /// Fraction of the r³-weighted mass beyond `r_max`, from the
    /// regularized upper incomplete gamma function.
    pub fn mass_tail_beyond(&self, r_max: f64) -> f64 {
        let a = 1.0 / self.effective_variance - 2.0;
        let scale = self.effective_radius * self.effective_variance;
        statrs::function::gamma::gamma_ur(a + 3.0, r_max / scale)
    }
}

/// The unique number concentration whose gamma law carries `lwc` g/m³ at
/// the given shape parameters.
pub fn number_concentration(lwc: f64, r_e: f64, v_e: f64) -> Result<f64, CoreError> {
    validate_shape(r_e, v_e)?;
    if !(lwc.is_finite() && lwc >= 0.0) {
        return Err(CoreError::invalid(format!(
            "liquid water content must be nonnegative, got {lwc}"
        )));
    }
    Ok(lwc / (SPHERE_MASS_FACTOR * r_e.powi(3) * (1.0 - v_e) * (1.0 - 2.0 * v_e)))
}

/// Area-weighted effective radius (µm) and effective variance from a
/// tabulated density, integrating with trapezoid weights:
///
/// ```text
/// rₑ = ∫ r³ n dr / ∫ r² n dr,
/// vₑ = ∫ (r − rₑ)² r² n dr / (rₑ² ∫ r² n dr).
/// ```
pub fn effective_moments(radii: &[f64], density: &[f64]) -> Result<(f64, f64), CoreError> {
    if radii.len() != density.len() {
        return Err(CoreError::shape(format!(
            "{} radii vs {} density samples",
            radii.len(),
            density.len()
        )));
    }
    if radii.is_empty() {
        return Err(CoreError::invalid("empty radius grid"));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::invalid("radius grid must be strictly increasing"));
    }
    if density.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(CoreError::invalid("density samples must be finite and nonnegative"));
    }

    let n = radii.len();
    let weight = |k: usize| -> f64 {
        if n == 1 {
            1.0
        } else if k == 0 {
            (radii[1] - radii[0]) / 2.0
        } else if k == n - 1 {
            (radii[n - 1] - radii[n - 2]) / 2.0
        } else {
            (radii[k + 1] - radii[k - 1]) / 2.0
        }
    };

    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for k in 0..n {
        let w = weight(k) * density[k];
        let r = radii[k];
        m2 += w * r * r;
        m3 += w * r * r * r;
        m4 += w * r * r * r * r;
    }
    if m2 <= 0.0 {
        return Err(CoreError::invalid("second moment of the density vanishes"));
    }
    let r_e = m3 / m2;
    // ∫ (r − rₑ)² r² n dr = m4 − 2·rₑ·m3 + rₑ²·m2.
    let v_e = (m4 - 2.0 * r_e * m3 + r_e * r_e * m2) / (r_e * r_e * m2);
    Ok((r_e, v_e.max(0.0)))
}

/// Relative L1 retrieval errors per field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub eps_lwc: f64,
    pub eps_re: f64,
}

/// ε = ‖x̂ − x‖₁ / ‖x‖₁ per field over the union of both masks.
///
/// The union support penalizes spurious cloud mass in the estimate while
/// never dividing by values outside either cloud.
pub fn epsilon_errors(estimate: &VoxelCloud, truth: &VoxelCloud) -> Result<ErrorReport, CoreError> {
    if estimate.dim() != truth.dim() {
        return Err(CoreError::shape(format!(
            "estimate {:?} vs truth {:?}",
            estimate.dim(),
            truth.dim()
        )));
    }
    let mut num_lwc = 0.0;
    let mut den_lwc = 0.0;
    let mut num_re = 0.0;
    let mut den_re = 0.0;
    let mut support = 0usize;
    for ((e_m, t_m), idx) in estimate
        .mask()
        .iter()
        .zip(truth.mask().iter())
        .zip(ndarray::indices(estimate.dim()))
    {
        if !(*e_m || *t_m) {
            continue;
        }
        support += 1;
        let (i, j, k) = (idx.0, idx.1, idx.2);
        num_lwc += (estimate.lwc()[[i, j, k]] - truth.lwc()[[i, j, k]]).abs();
        den_lwc += truth.lwc()[[i, j, k]].abs();
        num_re += (estimate.r_e()[[i, j, k]] - truth.r_e()[[i, j, k]]).abs();
        den_re += truth.r_e()[[i, j, k]].abs();
    }
    if support == 0 {
        return Err(CoreError::invalid("union of masks is empty"));
    }
    if den_lwc == 0.0 || den_re == 0.0 {
        return Err(CoreError::invalid(
            "truth field is identically zero on the comparison support",
        ));
    }
    Ok(ErrorReport {
        eps_lwc: num_lwc / den_lwc,
        eps_re: num_re / den_re,
    })
}

/// A cloud sampled on a regular voxel grid.
///
/// Grids are indexed `[ix, iy, iz]` with x north, y east, z up. Voxel
/// `(i, j, k)` occupies the box `[i·dx, (i+1)·dx] × [j·dy, (j+1)·dy] ×
/// [z₀ + k·dz, z₀ + (k+1)·dz]` in metres, where z₀ is the base height.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCloud {
    lwc: Array3<f64>,
    r_e: Array3<f64>,
    mask: Array3<bool>,
    v_e: f64,
    voxel_size: [f64; 3],
    base_height: f64,
}

impl VoxelCloud {
    /// Builds a cloud, canonicalising both fields to exactly zero outside
    /// the mask and validating all invariants inside it: finite LWC ≥ 0 and
    /// rₑ within [2.5, 40] µm.
    pub fn new(
        mut lwc: Array3<f64>,
        mut r_e: Array3<f64>,
        mask: Array3<bool>,
        v_e: f64,
        voxel_size: [f64; 3],
        base_height: f64,
    ) -> Result<Self, CoreError> {
        if lwc.dim() != mask.dim() || r_e.dim() != mask.dim() {
            return Err(CoreError::shape(format!(
                "lwc {:?}, r_e {:?}, mask {:?}",
                lwc.dim(),
                r_e.dim(),
                mask.dim()
            )));
        }
        if !(v_e.is_finite() && v_e > 0.0 && v_e < 0.5) {
            return Err(CoreError::invalid(format!(
                "effective variance must lie in (0, 0.5), got {v_e}"
            )));
        }
        if voxel_size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CoreError::invalid(format!("voxel size must be positive, got {voxel_size:?}")));
        }
        if !base_height.is_finite() {
            return Err(CoreError::NonFinite("base height".into()));
        }
        for ((l, r), m) in lwc.iter_mut().zip(r_e.iter_mut()).zip(mask.iter()) {
            if *m {
                if !(l.is_finite() && *l >= 0.0) {
                    return Err(CoreError::invalid(format!("masked LWC must be nonnegative, got {l}")));
                }
                if !(r.is_finite() && *r >= RE_MIN_UM && *r <= RE_MAX_UM) {
                    return Err(CoreError::invalid(format!(
                        "masked r_e must lie in [{RE_MIN_UM}, {RE_MAX_UM}] µm, got {r}"
                    )));
                }
            } else {
                *l = 0.0;
                *r = 0.0;
            }
        }
        Ok(VoxelCloud {
            lwc,
            r_e,
            mask,
            v_e,
            voxel_size,
            base_height,
        })
    }

    pub fn lwc(&self) -> &Array3<f64> {
        &self.lwc
    }

    pub fn r_e(&self) -> &Array3<f64> {
        &self.r_e
    }

    pub fn mask(&self) -> &Array3<bool> {
        &self.mask
    }

    pub fn v_e(&self) -> f64 {
        self.v_e
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn base_height(&self) -> f64 {
        self.base_height
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.lwc.dim()
    }

    /// Lower corner of the grid box in metres.
    pub fn origin(&self) -> [f64; 3] {
        [0.0, 0.0, self.base_height]
    }

    /// Upper corner of the grid box in metres.
    pub fn upper_corner(&self) -> [f64; 3] {
        let (nx, ny, nz) = self.dim();
        [
            nx as f64 * self.voxel_size[0],
            ny as f64 * self.voxel_size[1],
            self.base_height + nz as f64 * self.voxel_size[2],
        ]
    }

    /// Geometric centre of the grid box in metres.
    pub fn center(&self) -> [f64; 3] {
        let lo = self.origin();
        let hi = self.upper_corner();
        [
            (lo[0] + hi[0]) / 2.0,
            (lo[1] + hi[1]) / 2.0,
            (lo[2] + hi[2]) / 2.0,
        ]
    }

    /// Height of the bottom face of grid layer `k`, in metres.
    pub fn layer_base_height(&self, k: usize) -> f64 {
        self.base_height + k as f64 * self.voxel_size[2]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Masked voxel indices in lexicographic (ix, iy, iz) order.
    pub fn masked_indices(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.masked_count());
        for (idx, m) in self.mask.indexed_iter() {
            if *m {
                out.push([idx.0, idx.1, idx.2]);
            }
        }
        out
    }

    /// Overwrites the fields of the masked voxels listed by
    /// [`VoxelCloud::masked_indices`], re-validating invariants.
    pub fn set_masked_fields(&mut self, lwc: &[f64], r_e: &[f64]) -> Result<(), CoreError> {
        let indices = self.masked_indices();
        if lwc.len() != indices.len() || r_e.len() != indices.len() {
            return Err(CoreError::shape(format!(
                "{} masked voxels, got {} LWC and {} r_e values",
                indices.len(),
                lwc.len(),
                r_e.len()
            )));
        }
        for (n, idx) in indices.iter().enumerate() {
            if !(lwc[n].is_finite() && lwc[n] >= 0.0) {
                return Err(CoreError::invalid(format!("masked LWC must be nonnegative, got {}", lwc[n])));
            }
            if !(r_e[n].is_finite() && r_e[n] >= RE_MIN_UM && r_e[n] <= RE_MAX_UM) {
                return Err(CoreError::invalid(format!(
                    "masked r_e must lie in [{RE_MIN_UM}, {RE_MAX_UM}] µm, got {}",
                    r_e[n]
                )));
            }
            self.lwc[[idx[0], idx[1], idx[2]]] = lwc[n];
            self.r_e[[idx[0], idx[1], idx[2]]] = r_e[n];
        }
        Ok(())
    }
}

/// Minimum LWC used at the base of monotonic profiles, g/m³.
pub const PROFILE_LWC_MIN: f64 = LWC_MIN_G_M3;

/// Minimum effective radius used at the base of monotonic profiles, µm.
pub const PROFILE_RE_MIN: f64 = RE_MIN_UM;
