//! Execute-only memory for ARM M-profile microcontrollers.
//!
//! The crate models the protection hardware (MPU regions and DWT watchpoint
//! comparators), plans a configuration that makes firmware code fetchable but
//! neither readable nor writable as data, rewrites Thumb-2 assembly so that it
//! never reads constants out of its own code, and replays access traces to
//! check the result.

pub mod addr;
pub mod config;
pub mod dwt;
pub mod mpu;
pub mod planner;
pub mod rewriter;
pub mod sim;
