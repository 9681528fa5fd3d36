//! Exploitation case studies on synthetic substrates: locating the branch
//! that guards a model's output, racing for a short-lived key page, and
//! fingerprinting leaked weights.

pub mod code;
pub mod fingerprint;
pub mod oracle;
pub mod race;
pub mod search;

pub use code::{synthesize, CodeError, CodeImage, ImageSpec, Instr};
pub use fingerprint::{fingerprint, Corpus, FingerprintError, LayerFingerprint, LayerStats};
pub use oracle::{AccuracyOracle, RunResult, TamperSet};
pub use race::{find_candidates, race_probability, run_key_race, RaceError, RaceParams, RaceProbability};
pub use search::{filter_pipeline, run_bound, SearchError, SearchResult};
