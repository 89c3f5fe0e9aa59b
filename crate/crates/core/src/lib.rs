//! Event-camera object recognition without labels: an event-to-image
//! network is trained against a frozen image-text encoder using its own
//! pseudo-labels, filtered for reliability.

pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod events_io;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod prototypes;
pub mod reconstruction;
pub mod representation;
pub mod sampling;
pub mod synthetic;

pub use error::{Error, Result};
