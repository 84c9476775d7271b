//! Command-line driver for the EEG encoder and conditional latent diffusion
//! experiments. The binary is a thin wrapper around these modules.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;

pub use config::RunConfig;

use std::io::Write;

/// Line-oriented `key=value` logs on stderr; `RUST_LOG` sets the level.
pub fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, rec| writeln!(buf, "level={} target={} {}", rec.level().as_str().to_lowercase(), rec.target(), rec.args()))
        .try_init();
}
