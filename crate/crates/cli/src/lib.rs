//! Configuration-driven experiment runner for the equalizer study.

pub mod commands;
pub mod config;
pub mod engine;
pub mod error;
pub mod plot;
