//! Parameter and data types, plus the centralized EM mathematics.
//!
//! The response `y` lives with the first client (index 0). Covariates are
//! split column-wise into `K` blocks, one per client, and a sample is either
//! fully observed or fully missing on a given client.

mod data;
mod em;
mod moments;
mod params;

pub use data::{BlockLayout, ClientView, MissingMask, VerticalDataset};
pub use em::{
    closed_form_m_step, first_order_step, observed_loglik, observed_loss, ols, q_gradient_beta,
    q_gradient_beta_at, q_value, EmStatistics,
};
pub use moments::{conditional_moments, e_step, ConditionalMoments, PseudoComplete};
pub use params::ModelParameters;

/// Threshold below which `d_i` is treated as a collapsed variance.
pub const MIN_VARIANCE: f64 = 1e-12;
