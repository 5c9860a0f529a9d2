//! Regular Lagrangian flows for Sobolev vector fields, Lagrangian solutions
//! of the continuity equation and the directional-Lipschitz test-function
//! machinery used to compare them with weak Eulerian solutions.

pub mod error;
pub mod extension;
pub mod flow;
pub mod geometry;
pub mod metric;
pub mod spatial;
pub mod transport;
pub mod vectorfield;
pub mod weakform;

pub use error::{Error, ErrorClass, Result};
pub use flow::{build_flow_grid, FlowGrid, Integrator, LusinSet};
pub use geometry::{BoxRegion, Lattice};
pub use metric::{build_graph, SpaceTimeGraph, D0};
pub use transport::{DensityField, SpaceTimeDensity};
pub use vectorfield::VectorField;
pub use weakform::{Quadrature, Residual, TestFunction};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
