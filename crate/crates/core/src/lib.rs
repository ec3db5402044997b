//! Core of a human-and-model-in-the-loop adversarial data collection service.

pub mod anonymize;
pub mod api;
pub mod config;
pub mod error;
pub mod export;
pub mod fooling;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod reference;
pub mod storage;
pub mod validation;

pub use error::{Error, GatewayError, Result};
