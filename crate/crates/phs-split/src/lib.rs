pub mod benchmarks;
pub mod error;
pub mod integrators;
pub mod krylov;
pub mod phs;
pub mod quadrature;
pub mod splitting;
