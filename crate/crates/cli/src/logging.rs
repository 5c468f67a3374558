//! Line-oriented logs: `<RFC 3339 UTC timestamp> <LEVEL> <component> <message>`.
//!
//! The component is the emitting module path, e.g. `deskmt::training`.

use std::io::Write;

use env_logger::{Builder, Env};

pub fn init(default_level: &str) {
    Builder::from_env(Env::default().default_filter_or(default_level))
        .format(|buf, record| {
            writeln!(
                buf,
                "{} {:<5} {} {}",
                buf.timestamp_millis(),
                record.level(),
                record.target(),
                record.args()
            )
        })
        .try_init()
        .ok();
}
