//! Registration of continuous connectivity densities.
//!
//! A continuous connectivity function is a symmetric probability density
//! f(x,y) on Ω×Ω describing connection strength between points of a domain
//! Ω, for Ω = [0,1], Ω = S², or a disjoint union of two spheres. This crate
//! aligns such densities by finding diffeomorphic reparameterizations of Ω
//! via gradient descent on the square-root (half-density) representation,
//! builds population templates through Karcher means of orbits, and ships a
//! simulation harness for end-to-end evaluation.

pub mod basis;
pub mod density;
pub mod error;
pub mod geometry;
pub mod interp;
pub mod io;
pub mod register;
pub mod simulate;
pub mod template;

pub use error::{Error, Result};
