//! Stokes vectors, Stokes images and Mueller rotations.
//!
//! Polarization state is carried as the linear Stokes triple [I, Q, U] in
//! W/(m²·sr·nm); circular polarization is negligible for water clouds and
//! is dropped throughout. A triple is always tied to a reference basis
//! {b, l, ω} that is right-handed and orthonormal (b × l = ω), with
//! Q = I_l − I_b and U = 2·Re⟨E_l·E_b*⟩.
//!
//! Changing the reference basis by a right-handed rotation of angle α about
//! the propagation direction ω transforms the triple by the rotation
//! Mueller matrix M(α):
//!
//! ```text
//! I' = I,   Q' = cos2α·Q − sin2α·U,   U' = sin2α·Q + cos2α·U
//! ```

use ndarray::Array2;

use crate::error::CoreError;

/// A single linear-polarization Stokes triple.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StokesVec {
    pub i: f64,
    pub q: f64,
    pub u: f64,
}

impl StokesVec {
    pub fn new(i: f64, q: f64, u: f64) -> Self {
        StokesVec { i, q, u }
    }

    pub fn zero() -> Self {
        StokesVec::default()
    }

    /// Degree of linear polarization, √(Q²+U²)/I; zero for non-positive I.
    pub fn dolp(&self) -> f64 {
        if self.i > 0.0 {
            (self.q * self.q + self.u * self.u).sqrt() / self.i
        } else {
            0.0
        }
    }

    /// Applies the rotation Mueller matrix M(α) given cos 2α and sin 2α.
    pub fn rotate(&self, cos2a: f64, sin2a: f64) -> Self {
        StokesVec {
            i: self.i,
            q: cos2a * self.q - sin2a * self.u,
            u: sin2a * self.q + cos2a * self.u,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        StokesVec {
            i: self.i * k,
            q: self.q * k,
            u: self.u * k,
        }
    }

    pub fn add_assign(&mut self, other: StokesVec) {
        self.i += other.i;
        self.q += other.q;
        self.u += other.u;
    }
}

/// Returns (cos 2α, sin 2α) for the right-handed rotation α about `omega`
/// that takes reference axis `l_from` onto `l_to`.
///
/// Both axes must be unit vectors orthogonal to the unit propagation
/// direction `omega`. The sign convention matches [`StokesVec::rotate`]:
/// a triple expressed in the `l_from` basis, rotated by the returned
/// angles, is expressed in the `l_to` basis.
pub fn frame_rotation(
    l_from: nalgebra::Vector3<f64>,
    l_to: nalgebra::Vector3<f64>,
    omega: nalgebra::Vector3<f64>,
) -> (f64, f64) {
    let c = l_from.dot(&l_to);
    let s = l_from.cross(&l_to).dot(&omega);
    (c * c - s * s, 2.0 * c * s)
}

/// One view's Stokes radiances as three co-registered image planes.
///
/// Pixel [row, col] of each plane holds one component of the meridian-frame
/// Stokes triple of that pixel's ray.
#[derive(Debug, Clone, PartialEq)]
pub struct StokesImage {
    pub i: Array2<f64>,
    pub q: Array2<f64>,
    pub u: Array2<f64>,
}

impl StokesImage {
    /// Builds an image after checking shapes, finiteness, nonnegative I and
    /// the polarization cone √(Q²+U²) ≤ I (with 1e-9 absolute slack).
    ///
    /// Use [`StokesImage::from_measured`] for sensor outputs, where noise
    /// can push pixels slightly outside the cone.
    pub fn new(i: Array2<f64>, q: Array2<f64>, u: Array2<f64>) -> Result<Self, CoreError> {
        let img = StokesImage::from_measured(i, q, u)?;
        for ((iv, qv), uv) in img.i.iter().zip(img.q.iter()).zip(img.u.iter()) {
            if *iv < 0.0 {
                return Err(CoreError::invalid(format!("negative intensity {iv}")));
            }
            if (qv * qv + uv * uv).sqrt() > *iv + 1e-9 {
                return Err(CoreError::invalid(format!(
                    "Stokes cone violated: I={iv}, Q={qv}, U={uv}"
                )));
            }
        }
        Ok(img)
    }

    /// Builds an image checking only shapes and finiteness.
    pub fn from_measured(
        i: Array2<f64>,
        q: Array2<f64>,
        u: Array2<f64>,
    ) -> Result<Self, CoreError> {
        if i.dim() != q.dim() || i.dim() != u.dim() {
            return Err(CoreError::shape(format!(
                "I {:?}, Q {:?}, U {:?}",
                i.dim(),
                q.dim(),
                u.dim()
            )));
        }
        for plane in [&i, &q, &u] {
            if plane.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite("Stokes image plane".into()));
            }
        }
        Ok(StokesImage { i, q, u })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        StokesImage {
            i: Array2::zeros((rows, cols)),
            q: Array2::zeros((rows, cols)),
            u: Array2::zeros((rows, cols)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.i.dim()
    }

    pub fn pixel(&self, row: usize, col: usize) -> StokesVec {
        StokesVec {
            i: self.i[[row, col]],
            q: self.q[[row, col]],
            u: self.u[[row, col]],
        }
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, s: StokesVec) {
        self.i[[row, col]] = s.i;
        self.q[[row, col]] = s.q;
        self.u[[row, col]] = s.u;
    }

    /// Per-pixel degree of linear polarization.
    pub fn dolp(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.dim());
        for ((o, iv), (qv, uv)) in out
            .iter_mut()
            .zip(self.i.iter())
            .zip(self.q.iter().zip(self.u.iter()))
        {
            *o = StokesVec::new(*iv, *qv, *uv).dolp();
        }
        out
    }
}
