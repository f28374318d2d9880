//! Radiometric sensor model and the four-channel polarimetric measurement
//! pipeline.
//!
//! A division-of-focal-plane camera records each Stokes pixel through four
//! on-chip wire-grid polarizers at 90°, 45°, 135° and 0°. The measurement
//! chain implemented here is:
//!
//! 1. rotate the meridian-frame Stokes vector into the camera frame,
//! 2. split it into four channel radiances through the polarizer matrix G,
//! 3. convert each radiance to expected photoelectrons,
//! 4. draw shot, dark, read and quantization noise,
//! 5. invert the radiometry, solve the 4x3 polarizer system by least
//!    squares, and rotate the result back to the meridian frame.
//!
//! Noise draws come from counter-addressed streams keyed by
//! `(master seed, noise stage, view, 4*pixel + channel)`, so results never
//! depend on pixel evaluation order.

use nalgebra::Vector3;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::constants::{BAND_CENTER_NM, LIGHT_SPEED_M_S, PLANCK_J_S};
use crate::error::CoreError;
use crate::geometry::{meridian_frame, Camera};
use crate::rng::{stream, STREAM_NOISE};
use crate::stokes::{frame_rotation, StokesImage, StokesVec};

/// A tabulated spectral quantity, linearly interpolated between knots and
/// held constant outside them. Wavelengths are in nanometres.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCurve {
    knots: Vec<(f64, f64)>,
}

impl SpectralCurve {
    /// A wavelength-independent curve.
    pub fn flat(value: f64) -> Self {
        SpectralCurve {
            knots: vec![(BAND_CENTER_NM, value)],
        }
    }

    /// Builds a curve from `(wavelength_nm, value)` knots.
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, CoreError> {
        if knots.is_empty() {
            return Err(CoreError::invalid("spectral curve needs at least one knot"));
        }
        if knots.iter().any(|k| !(k.0.is_finite() && k.1.is_finite())) {
            return Err(CoreError::invalid("spectral curve knots must be finite"));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(CoreError::invalid(
                "spectral curve wavelengths must be strictly increasing",
            ));
        }
        Ok(SpectralCurve { knots })
    }

    pub fn eval(&self, lambda_nm: f64) -> f64 {
        let k = &self.knots;
        if lambda_nm <= k[0].0 {
            return k[0].1;
        }
        let last = k.len() - 1;
        if lambda_nm >= k[last].0 {
            return k[last].1;
        }
        let j = k.partition_point(|p| p.0 <= lambda_nm);
        let (x0, y0) = k[j - 1];
        let (x1, y1) = k[j];
        y0 + (y1 - y0) * (lambda_nm - x0) / (x1 - x0)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    fn values_within(&self, lo: f64, hi: f64) -> bool {
        self.knots.iter().all(|k| k.1 >= lo && k.1 <= hi)
    }
}

/// Optics plus detector description of one polarization imager.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSpec {
    /// Pixel pitch, metres.
    pub pixel_pitch: f64,
    /// Quantum efficiency, electrons per photon.
    pub qe: SpectralCurve,
    /// Transmission of the optics.
    pub optics_efficiency: SpectralCurve,
    /// Aperture diameter, metres.
    pub aperture: f64,
    /// Focal length, metres.
    pub focal_length: f64,
    /// Full-well capacity, electrons.
    pub full_well: f64,
    /// Read noise RMS, electrons.
    pub read_noise: f64,
    /// Dark current, electrons per second.
    pub dark_current: f64,
    /// Quantization depth, bits.
    pub bits: u32,
}

impl SensorSpec {
    /// The Sony IMX250MYR detector behind an f/2, 86.25 mm lens, with flat
    /// default efficiency curves.
    pub fn imx250() -> Self {
        SensorSpec {
            pixel_pitch: 3.45e-6,
            qe: SpectralCurve::flat(0.45),
            optics_efficiency: SpectralCurve::flat(0.9),
            aperture: 0.043125,
            focal_length: 0.08625,
            full_well: 10_500.0,
            read_noise: 2.31,
            dark_current: 3.51,
            bits: 10,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let positive = [
            (self.pixel_pitch, "pixel pitch"),
            (self.aperture, "aperture"),
            (self.focal_length, "focal length"),
            (self.full_well, "full well"),
        ];
        for (v, name) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::invalid(format!("{name} must be positive")));
            }
        }
        let nonnegative = [
            (self.read_noise, "read noise"),
            (self.dark_current, "dark current"),
        ];
        for (v, name) in nonnegative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::invalid(format!("{name} must be nonnegative")));
            }
        }
        if self.bits == 0 || self.bits > 60 {
            return Err(CoreError::invalid("quantization depth must be 1..=60 bits"));
        }
        if !self.qe.values_within(0.0, 1.0) {
            return Err(CoreError::invalid("quantum efficiency must lie in [0, 1]"));
        }
        if !self.optics_efficiency.values_within(0.0, 1.0) {
            return Err(CoreError::invalid("optics efficiency must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Width of one quantization step, electrons.
    pub fn lsb(&self) -> f64 {
        self.full_well / 2f64.powi(self.bits as i32)
    }

    /// RMS quantization noise, LSB divided by sqrt(12).
    pub fn quant_noise(&self) -> f64 {
        self.lsb() / 12f64.sqrt()
    }
}

/// One spectral band with its top-of-atmosphere irradiance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    /// Lower band edge, nanometres.
    pub lambda_min_nm: f64,
    /// Upper band edge, nanometres.
    pub lambda_max_nm: f64,
    /// Unitless solar irradiance scale across the band.
    pub toa_scale: SpectralCurve,
}

impl BandSpec {
    /// The red band, 620 to 670 nm with unit irradiance scale.
    pub fn red_default() -> Self {
        BandSpec {
            lambda_min_nm: 620.0,
            lambda_max_nm: 670.0,
            toa_scale: SpectralCurve::flat(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.lambda_min_nm > 0.0 && self.lambda_max_nm > self.lambda_min_nm) {
            return Err(CoreError::invalid(
                "band edges must satisfy 0 < lambda_min < lambda_max",
            ));
        }
        if !self.toa_scale.values_within(0.0, f64::INFINITY) {
            return Err(CoreError::invalid("irradiance scale must be nonnegative"));
        }
        Ok(())
    }
}

/// Spectral conversion gain at one wavelength, in electrons·m²·sr/J:
///
/// ```text
/// Γ_λ = π · τ_λ · (D / 2f)² · QE_λ · λ/(hc) · p²
/// ```
pub fn gamma_lambda(sensor: &SensorSpec, lambda_nm: f64) -> f64 {
    let lambda_m = lambda_nm * 1e-9;
    let half_cone = sensor.aperture / (2.0 * sensor.focal_length);
    std::f64::consts::PI
        * sensor.optics_efficiency.eval(lambda_nm)
        * half_cone
        * half_cone
        * sensor.qe.eval(lambda_nm)
        * (lambda_m / (PLANCK_J_S * LIGHT_SPEED_M_S))
        * sensor.pixel_pitch
        * sensor.pixel_pitch
}

/// Band-integrated conversion gain, `∫ Γ_λ L_λ dλ`, by the trapezoid rule
/// over the union of the curves' knots. Electrons per (radiance · second)
/// with radiance in W/(m²·sr·nm).
pub fn band_gain(sensor: &SensorSpec, band: &BandSpec) -> Result<f64, CoreError> {
    sensor.validate()?;
    band.validate()?;
    let mut grid = vec![band.lambda_min_nm, band.lambda_max_nm];
    for curve in [&sensor.qe, &sensor.optics_efficiency, &band.toa_scale] {
        grid.extend(
            curve
                .knots()
                .iter()
                .map(|k| k.0)
                .filter(|&l| l > band.lambda_min_nm && l < band.lambda_max_nm),
        );
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let f = |l: f64| gamma_lambda(sensor, l) * band.toa_scale.eval(l);
    let mut sum = 0.0;
    for w in grid.windows(2) {
        sum += 0.5 * (w[1] - w[0]) * (f(w[0]) + f(w[1]));
    }
    Ok(sum)
}

/// Expected photoelectron count for one channel radiance over one exposure.
pub fn electrons_expected(
    radiance: f64,
    exposure_s: f64,
    sensor: &SensorSpec,
    band: &BandSpec,
) -> Result<f64, CoreError> {
    if !(radiance >= 0.0 && radiance.is_finite()) {
        return Err(CoreError::invalid("radiance must be nonnegative and finite"));
    }
    if !(exposure_s > 0.0 && exposure_s.is_finite()) {
        return Err(CoreError::invalid("exposure must be positive and finite"));
    }
    Ok(exposure_s * radiance * band_gain(sensor, band)?)
}

/// Exposure time that fills 90% of the well at the brightest channel
/// radiance of the scene.
pub fn choose_exposure(
    scene_max_radiance: f64,
    sensor: &SensorSpec,
    band: &BandSpec,
) -> Result<f64, CoreError> {
    if !(scene_max_radiance > 0.0 && scene_max_radiance.is_finite()) {
        return Err(CoreError::invalid(
            "exposure metering needs a positive scene maximum",
        ));
    }
    let gain = band_gain(sensor, band)?;
    Ok(0.9 * sensor.full_well / (scene_max_radiance * gain))
}

/// Brightest polarizer-channel radiance any camera roll could see across a
/// set of views: the pixel-wise maximum of I + sqrt(Q² + U²).
pub fn metering_radiance(images: &[StokesImage]) -> f64 {
    let mut best = 0.0f64;
    for img in images {
        for ((i, q), u) in img.i.iter().zip(&img.q).zip(&img.u) {
            best = best.max(i + q.hypot(*u));
        }
    }
    best
}

/// One digitized pixel-channel readout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyReadout {
    /// Quantized signal, electrons.
    pub electrons: f64,
    /// True when the pre-quantization signal reached the full well.
    pub saturated: bool,
}

/// Draws one noisy readout: Poisson shot noise around the expected signal
/// plus dark charge, Gaussian read noise rounded to whole electrons, a clip
/// to the well capacity, and uniform quantization.
pub fn apply_noise(
    expected: f64,
    exposure_s: f64,
    sensor: &SensorSpec,
    rng: &mut ChaCha8Rng,
) -> Result<NoisyReadout, CoreError> {
    if !(expected >= 0.0 && expected.is_finite()) {
        return Err(CoreError::invalid(
            "expected electrons must be nonnegative and finite",
        ));
    }
    if !(exposure_s > 0.0 && exposure_s.is_finite()) {
        return Err(CoreError::invalid("exposure must be positive and finite"));
    }
    let rate = expected + sensor.dark_current * exposure_s;
    let shot = if rate > 0.0 {
        Poisson::new(rate)
            .map_err(|e| CoreError::invalid(format!("shot noise rate: {e}")))?
            .sample(rng)
    } else {
        0.0
    };
    let read = if sensor.read_noise > 0.0 {
        Normal::new(0.0, sensor.read_noise)
            .map_err(|e| CoreError::invalid(format!("read noise: {e}")))?
            .sample(rng)
            .round()
    } else {
        0.0
    };
    let raw = shot + read;
    let clipped = raw.clamp(0.0, sensor.full_well);
    let lsb = sensor.lsb();
    Ok(NoisyReadout {
        electrons: ((clipped / lsb).round() * lsb).min(sensor.full_well),
        saturated: raw >= sensor.full_well,
    })
}

/// Signal-to-noise ratio of a readout:
///
/// ```text
/// SNR = N / sqrt(N + D_T·Δt + ρ_read² + ρ_digit²)
/// ```
pub fn snr(measured: f64, exposure_s: f64, sensor: &SensorSpec) -> f64 {
    if measured <= 0.0 {
        return 0.0;
    }
    let var = measured
        + sensor.dark_current * exposure_s
        + sensor.read_noise * sensor.read_noise
        + sensor.quant_noise() * sensor.quant_noise();
    measured / var.sqrt()
}

/// The fixed block of four wire-grid polarizers on the focal plane.
pub struct PolarizerBlock;

impl PolarizerBlock {
    /// Filter orientations in the camera frame, degrees.
    pub const ANGLES_DEG: [f64; 4] = [90.0, 45.0, 135.0, 0.0];

    /// Analysis matrix: row k is `[1, cos 2ψ_k, sin 2ψ_k]`.
    pub const G: [[f64; 3]; 4] = [
        [1.0, -1.0, 0.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.0, -1.0],
        [1.0, 1.0, 0.0],
    ];

    /// Least-squares inverse of G, the closed form of (GᵀG)⁻¹Gᵀ.
    pub const PINV: [[f64; 4]; 3] = [
        [0.25, 0.25, 0.25, 0.25],
        [-0.5, 0.0, 0.0, 0.5],
        [0.0, 0.5, -0.5, 0.0],
    ];

    /// Radiances transmitted by the four filters for a camera-frame pixel.
    pub fn channel_radiances(s_camera: &StokesVec) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(Self::G) {
            *o = row[0] * s_camera.i + row[1] * s_camera.q + row[2] * s_camera.u;
        }
        out
    }

    /// Least-squares camera-frame Stokes vector from four channel radiances.
    pub fn solve(channels: &[f64; 4]) -> StokesVec {
        let mut s = [0.0; 3];
        for (o, row) in s.iter_mut().zip(Self::PINV) {
            *o = row.iter().zip(channels).map(|(a, b)| a * b).sum();
        }
        StokesVec::new(s[0], s[1], s[2])
    }
}

/// Rotation `(cos 2α, sin 2α)` taking meridian-frame Stokes components into
/// the camera frame, where α is the angle from the pixel's meridian l axis
/// to the 0° polarizer direction projected orthogonal to the ray,
/// anticlockwise looking along the propagation direction `omega`.
pub fn camera_rotation(
    omega: &Vector3<f64>,
    polarizer_axis: &Vector3<f64>,
) -> Result<(f64, f64), CoreError> {
    let mf = meridian_frame(omega);
    let in_plane = polarizer_axis - omega * polarizer_axis.dot(omega);
    let norm = in_plane.norm();
    if norm < 1e-12 {
        return Err(CoreError::Infeasible(
            "polarizer axis is parallel to the pixel ray".into(),
        ));
    }
    Ok(frame_rotation(mf.l, in_plane / norm, *omega))
}

/// Noise-stream coordinates of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewNoise {
    pub master_seed: u64,
    pub view: u64,
}

/// Noise-stream coordinates of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseAddress {
    pub master_seed: u64,
    pub view: u64,
    pub pixel: u64,
}

/// One measured meridian-frame Stokes pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub stokes: StokesVec,
    pub saturated: bool,
}

/// Pushes one meridian-frame Stokes pixel through the full measurement
/// chain. `omega` is the light propagation direction of the pixel ray
/// (pointing from scene to camera) and must be a unit vector. With
/// `noise: None` the chain is noiseless and inverts exactly.
pub fn measure_stokes(
    s_meridian: &StokesVec,
    omega: &Vector3<f64>,
    polarizer_axis: &Vector3<f64>,
    exposure_s: f64,
    sensor: &SensorSpec,
    band: &BandSpec,
    noise: Option<NoiseAddress>,
) -> Result<Measurement, CoreError> {
    let gain = band_gain(sensor, band)?;
    measure_pixel(
        s_meridian,
        omega,
        polarizer_axis,
        exposure_s,
        sensor,
        gain,
        noise,
    )
}

fn measure_pixel(
    s_meridian: &StokesVec,
    omega: &Vector3<f64>,
    polarizer_axis: &Vector3<f64>,
    exposure_s: f64,
    sensor: &SensorSpec,
    gain: f64,
    noise: Option<NoiseAddress>,
) -> Result<Measurement, CoreError> {
    if !(exposure_s > 0.0 && exposure_s.is_finite()) {
        return Err(CoreError::invalid("exposure must be positive and finite"));
    }
    let (c2, s2) = camera_rotation(omega, polarizer_axis)?;
    let s_cam = s_meridian.rotate(c2, s2);
    let channels = PolarizerBlock::channel_radiances(&s_cam);
    let scale = exposure_s * gain;
    let mut recovered = [0.0; 4];
    let mut saturated = false;
    for (k, (out, ch)) in recovered.iter_mut().zip(channels).enumerate() {
        let expected = scale * ch.max(0.0);
        *out = match noise {
            Some(addr) => {
                let mut rng = stream(
                    addr.master_seed,
                    STREAM_NOISE,
                    addr.view,
                    addr.pixel * 4 + k as u64,
                );
                let readout = apply_noise(expected, exposure_s, sensor, &mut rng)?;
                saturated |= readout.saturated;
                readout.electrons
            }
            None => expected,
        } / scale;
    }
    let s_meas = PolarizerBlock::solve(&recovered);
    Ok(Measurement {
        stokes: s_meas.rotate(c2, -s2),
        saturated,
    })
}

/// A measured view: recovered Stokes planes plus per-pixel saturation.
#[derive(Debug, Clone)]
pub struct MeasuredImage {
    pub stokes: StokesImage,
    pub saturated: Array2<bool>,
}

impl MeasuredImage {
    pub fn any_saturated(&self) -> bool {
        self.saturated.iter().any(|&s| s)
    }
}

/// Measures every pixel of one rendered view. Pixels are processed in
/// parallel; each draws from its own noise stream, so the result is
/// independent of scheduling.
pub fn measure_image(
    image: &StokesImage,
    camera: &Camera,
    exposure_s: f64,
    sensor: &SensorSpec,
    band: &BandSpec,
    noise: Option<ViewNoise>,
) -> Result<MeasuredImage, CoreError> {
    let (rows, cols) = image.i.dim();
    if rows != camera.resolution || cols != camera.resolution {
        return Err(CoreError::shape(format!(
            "image is {rows}x{cols} but the camera detector is {0}x{0}",
            camera.resolution
        )));
    }
    let gain = band_gain(sensor, band)?;
    let axis = camera.polarizer_axis();
    let measured = (0..rows * cols)
        .into_par_iter()
        .map(|p| {
            let (r, c) = (p / cols, p % cols);
            let omega = -camera.pixel_ray(r, c);
            let addr = noise.map(|n| NoiseAddress {
                master_seed: n.master_seed,
                view: n.view,
                pixel: p as u64,
            });
            measure_pixel(
                &image.pixel(r, c),
                &omega,
                &axis,
                exposure_s,
                sensor,
                gain,
                addr,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut i = Array2::zeros((rows, cols));
    let mut q = Array2::zeros((rows, cols));
    let mut u = Array2::zeros((rows, cols));
    let mut saturated = Array2::from_elem((rows, cols), false);
    for (p, m) in measured.iter().enumerate() {
        let rc = (p / cols, p % cols);
        i[rc] = m.stokes.i;
        q[rc] = m.stokes.q;
        u[rc] = m.stokes.u;
        saturated[rc] = m.saturated;
    }
    Ok(MeasuredImage {
        stokes: StokesImage::from_measured(i, q, u)?,
        saturated,
    })
}
