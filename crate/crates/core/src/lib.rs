//! Text-to-SQL over CTE-structured query sketches.
//!
//! Logs and documents are distilled into a versioned knowledge set
//! ([`knowledge`]). A request is reformulated and routed to an intent
//! partition ([`retrieval`]), turned into a plan and a candidate query
//! ([`generation`]), executed and repaired ([`correction`]), and user
//! verdicts feed back into the set ([`adaptation`]). [`pipeline::Engine`]
//! ties the stages together.

pub mod adaptation;
pub mod correction;
pub mod db;
pub mod decomposer;
pub mod example;
pub mod generation;
pub mod knowledge;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod sample_data;
pub mod schema;
pub mod sql;
