pub mod eval;
pub mod geometry;
pub mod labels;
pub mod model;
pub mod phantom;
pub mod toolkit;
pub mod trace;
pub mod verify;
pub mod agents;
pub mod controller;
pub mod config;
pub mod pipeline;
pub mod synth;
pub mod vrag;
