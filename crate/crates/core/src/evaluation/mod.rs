mod metrics;
mod run;

pub use metrics::*;
pub use run::*;
