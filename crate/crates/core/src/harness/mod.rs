pub mod config;
pub mod manifest;

pub use config::Config;
pub use manifest::{digest_bytes, digest_file, Manifest};
