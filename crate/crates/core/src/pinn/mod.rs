//! Partially-interpretable parameter surfaces: intercept plus linear,
//! thin-plate spline and neural-network components under a link.

pub mod model;
pub mod spec;
pub mod spline;
pub mod standardize;

pub use model::{pad_domain, Design, Forward, ParamInfo, PinnModel, PredictorCube, SurfacePrep, Theta};
pub use spec::{comparison_model, count_params, Activation, Form, LayerSpec, Link, ModelSpec, PredictorPartition, SharedSpec, SurfaceSpec};
pub use spline::{penalty_value, place_knots, psi, SplineTerm};
pub use standardize::{standardize, ColumnStats};
