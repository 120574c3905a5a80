//! Command implementations behind the `forgetkit` binary.

pub mod commands;
pub mod config;
pub mod csvio;

use std::fmt;

/// Problem with the user's input: config, paths, or arguments.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// Exit status for an error: 2 for input problems, 3 for broken internal
/// invariants.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use forgetkit::Error as E;
    for cause in err.chain() {
        if cause.is::<UserError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
            || cause.is::<csv::Error>()
        {
            return EXIT_USER;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_)
                | E::Io { .. }
                | E::Format { .. }
                | E::Conflict(_)
                | E::EmptySelection(_)
                | E::MissingPrototype(_) => EXIT_USER,
                E::Shape { .. } | E::NoGraph(_) | E::MissingGradient(_) | E::NoTrainable => EXIT_INTERNAL,
            };
        }
    }
    EXIT_INTERNAL
}
