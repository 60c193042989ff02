//! Command implementations and the `/v1` HTTP service behind the
//! `skysearch` binary.

pub mod commands;
pub mod service;
