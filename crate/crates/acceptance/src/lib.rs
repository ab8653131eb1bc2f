//! Acceptance checks. Each check returns a short summary on success or the
//! first violated condition on failure; the `acceptance` test target runs
//! them all and prints one verdict line per check.

use std::fmt;

pub mod durability;
pub mod end_to_end;
pub mod ensemble;
pub mod metrics;
pub mod optim;
pub mod shapley;

#[derive(Debug)]
pub struct Failure(pub String);

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<crs_core::Error> for Failure {
    fn from(e: crs_core::Error) -> Self {
        Failure(format!("core error: {e}"))
    }
}

impl From<crs_serve::ServeError> for Failure {
    fn from(e: crs_serve::ServeError) -> Self {
        Failure(format!("service error: {e}"))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(format!("io error: {e}"))
    }
}

pub type Outcome = Result<String, Failure>;

/// Returns a [`Failure`] built from the format arguments unless `cond` holds.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Failure(format!($($arg)+)));
        }
    };
}

pub struct Verdict {
    pub name: &'static str,
    pub outcome: Outcome,
    pub seconds: f64,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(s) => format!("PASS {} ({:.1}s): {s}", self.name, self.seconds),
            Err(e) => format!("FAIL {} ({:.1}s): {e}", self.name, self.seconds),
        }
    }
}

/// Runs `f`, timing it and turning a panic into a failure.
pub fn run(name: &'static str, f: impl FnOnce() -> Outcome) -> Verdict {
    let start = std::time::Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(Failure(format!("panicked: {}", msg.unwrap_or_default())))
        });
    Verdict { name, outcome, seconds: start.elapsed().as_secs_f64() }
}
