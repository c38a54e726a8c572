//! Command-line front end for the sparse mask head: synthetic scene
//! generation, demo inference, randomized verification and the
//! sparse-vs-dense compute benchmark.

pub mod bench;
pub mod commands;
pub mod scene;
pub mod verify;
