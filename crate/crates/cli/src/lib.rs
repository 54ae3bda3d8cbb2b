//! Command line entry points and the HTTP retrieval service.

pub mod commands;
pub mod config;
pub mod search;
pub mod service;
