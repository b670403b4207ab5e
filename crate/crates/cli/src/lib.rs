//! Command-line front end and HTTP service for the `gridprompt` library.

pub mod commands;
pub mod models;
pub mod service;
