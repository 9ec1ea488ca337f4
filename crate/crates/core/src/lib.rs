//! Network model, air-to-ground channels, RSMA finite-blocklength rates and
//! SCA-based beamforming for multi-AeBS deployments.

pub mod channel;
pub mod config;
pub mod error;
pub mod layout;
pub mod model;
pub mod rates;
pub mod sca;

pub use channel::{realize_channels, ChannelRealization, Fading};
pub use config::NetworkConfig;
pub use error::{Error, Result};
pub use layout::{place_gus, GuLayout};
pub use model::{audit_constraints, coverage, distance, utility, serviceable_association, Association, ConstraintReport, Placement, Point2};
pub use rates::{rate_report, sdma_rate_report, RateReport, ResourceSolution};
