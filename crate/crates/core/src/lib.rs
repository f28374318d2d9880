//! Desk-scale polarimetric scattering tomography of warm clouds.
//!
//! The crate models the full measurement-to-retrieval chain for a small
//! constellation of polarization imagers flying over a liquid-water cloud:
//!
//! * [`microphysics`] — gamma droplet size distributions, voxelised cloud
//!   fields and retrieval error metrics,
//! * [`optics`] — Lorenz–Mie single-sphere solutions and bulk optical
//!   property tables averaged over the size distribution,
//! * [`geometry`] — camera models, string-of-pearls constellations,
//!   meridian frames and cloudbow scan planning,
//! * [`stokes`] — Stokes vectors, images and Mueller rotations,
//! * [`render`] — a single-scattering vector forward model with analytic
//!   gradients,
//! * [`imager`] — a division-of-focal-plane polarization sensor model with
//!   photon, dark, read and quantization noise,
//! * [`retrieval`] — cost functions, profile initialisation and projected
//!   gradient descent over voxel microphysics.
//!
//! Coordinates are right-handed with `x` pointing north, `y` east and `z`
//! towards the zenith; lengths are metres unless a field says otherwise.

pub mod constants;
pub mod error;
pub mod geometry;
pub mod imager;
pub mod microphysics;
pub mod optics;
pub mod render;
pub mod retrieval;
pub mod rng;
#[cfg(test)]
pub(crate) mod testkit;
pub mod stokes;

pub use error::CoreError;
pub use geometry::{Camera, CameraIntrinsics, Constellation, MeridianFrame, Sun};
pub use microphysics::{DropletDistribution, ErrorReport, VoxelCloud};
pub use imager::{
    measure_image, measure_stokes, BandSpec, MeasuredImage, PolarizerBlock, SensorSpec,
    SpectralCurve,
};
pub use optics::{BulkOpticsTable, MieSolution, TableSpec};
pub use render::{
    optical_depth, AdjointWeights, ForwardModel, RayleighLayer, RenderSettings, SingleScatter,
};
pub use retrieval::{
    cost_dolp, cost_radiance, cost_stokes, grid_search_init, homogeneous_profile,
    monotonic_profile, retrieve, InitConfig, InitMethod, InitResult, MeasurementSet,
    Preconditioner, ProfileScaffold, RetrievalAbort, RetrievalMode, RetrievalOptions,
    RetrievalResult, View,
};
pub use stokes::{StokesImage, StokesVec};
