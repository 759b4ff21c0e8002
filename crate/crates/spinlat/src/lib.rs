//! Ensembles of one-dimensional lattices of real-valued spins.
//!
//! The model is a chain of N unbounded spins with Hamiltonian
//! H(x) = sum_i [psi_b(x_i) + s_i x_i] + x' M x / 2, unit-diagonal banded
//! symmetric M, and a bounded perturbation psi_b. The grand canonical
//! ensemble weights configurations by exp(sigma sum_i x_i - H); the
//! canonical ensemble is its conditional law on the mean-spin hyperplane.
//!
//! Four backends compute the same quantities along independent routes so
//! they can certify each other: exact Gaussian linear algebra
//! ([`gaussian`]), brute-force quadrature at tiny N ([`quadrature`]),
//! transfer-operator contraction with Fourier inversion ([`transfer`]), and
//! MCMC ([`samplers`]). [`ensemble`] couples sigma and the mean spin,
//! [`estimators`] reduces outputs to fitted quantities, and [`experiments`]
//! packages the scaling studies behind the CLI.

pub mod config;
pub mod ensemble;
pub mod estimators;
pub mod experiments;
pub mod gaussian;
pub mod model;
pub mod quad;
pub mod quadrature;
pub mod rng;
pub mod samplers;
pub mod transfer;
