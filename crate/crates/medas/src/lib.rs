//! Pipeline platform: artifact store, tool runtime, execution engine, task
//! service and command-line client built on `medas-core`.

pub mod client;
pub mod csvio;
pub mod engine;
pub mod logging;
pub mod pngio;
pub mod service;
pub mod store;
pub mod study;
pub mod tools;
