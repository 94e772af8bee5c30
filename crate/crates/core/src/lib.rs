//! Data-driven synthesis of event-triggered controllers with ISS Lyapunov certificates.
//!
//! The pipeline runs from noisy samples of an input-affine polynomial system to a
//! matrix ellipsoid of consistent dynamics, then to a sum-of-squares program whose
//! solution is a controller, a Lyapunov function and class-K-infinity bounds valid
//! for every member of the ellipsoid.
//!
//! Everything here works without `std` (an allocator is required).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod linalg;
pub mod poly;
pub mod sdp;
pub mod sos;
pub mod consistency;
pub mod simulate;
pub mod synthesis;
pub mod verify;

pub use error::{Error, Result};
