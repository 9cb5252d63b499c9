//! Rate-distortion inner region for federated model aggregation with
//! modified Berger-Tung coding: region evaluation, two MM optimizers for the
//! auxiliary-noise parameters, a noise-addition aggregation simulator, and a
//! quadratic federated-training harness.

pub mod barrier;
pub mod error;
pub mod fl;
pub mod io;
pub(crate) mod linalg;
pub mod mm_general;
pub mod mm_symmetric;
pub mod model;
pub mod region;
pub mod seed;
pub mod sim;
pub mod transform;

pub use error::{Error, Result};
pub use model::{
    empirical_covariance, symmetric_covariance, validate_psd, DeviceGroup, GaussianSourceModel, MbtcParams,
    RateBudget, RdTuple, SymmetricSourceModel,
};
pub use seed::{rng_for, seed_stream, Label};

#[cfg(test)]
pub(crate) mod test_util {
    pub fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }
}
