pub mod config;
pub mod domain;
pub mod evaluator;
pub mod exec;
pub mod gateway;
pub mod io;
pub mod manifest;
pub mod overlap;
pub mod pipeline;
pub mod prompting;
pub mod stub;
