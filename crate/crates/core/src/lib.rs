pub mod model;
pub mod store;
pub mod registry;
pub mod install;
pub mod pipeline;
pub mod config;
pub mod cli;
