//! Core of the assessment sandbox configurator.
//!
//! The modules follow the life of a sandbox engagement: a provider triages
//! its system ([`triage`]), a configuration is written in the sandbox
//! language ([`dsl`]), objectives and controls are mapped to test types and
//! control types ([`mapping`]) and bound to registered assessment modules
//! ([`catalogue`]), the result is assembled into a deterministic execution
//! plan ([`planner`]) that the [`engine`] runs through the plug-in protocol.
//! Every step is recorded in a hash-chained [`audit`] log and persisted by
//! the [`store`]; [`rbac`] gates access and [`report`] produces the exit
//! report. [`workspace`] ties these together on disk.

pub mod audit;
pub mod catalogue;
pub mod digest;
pub mod dsl;
pub mod engine;
pub mod mapping;
pub mod planner;
pub mod rbac;
pub mod report;
pub mod store;
pub mod triage;
pub mod vocab;
pub mod workspace;
