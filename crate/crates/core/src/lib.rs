//! Calibration of wheeled-robot odometry and exteroceptive-sensor mounting.
//!
//! Two parametric calibrators recover wheel radii, axle geometry and the
//! sensor pose on the chassis: [`cam::cam_calibrate`] alternates between scan
//! correspondences and closed-form parameter updates, and
//! [`cirls::cirls_calibrate`] fits displacement observations by robust
//! iteratively reweighted least squares. [`modelfree`] learns the motion model
//! directly from data when the kinematics are not trusted.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cam;
pub mod cirls;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod modelfree;
pub mod odometry;
pub mod optim;
pub mod quadratic;
pub mod scanmatch;
pub mod simulate;

pub use error::{Error, Result};
