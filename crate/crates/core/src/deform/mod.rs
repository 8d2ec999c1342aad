//! Velocity network, diffeomorphic integration, warping and point sampling.

pub mod field;
pub(crate) mod kernels;
pub mod net;
pub mod ops;

pub use field::{
    integrate, jacobian_determinant, max_displacement, positive_jacobian_fraction, sample_at, warp,
    warp_array, warp_vjp, DeformationField, VelocityField,
};
pub use net::{predict_velocity, DeformNet, DeformNetConfig};
