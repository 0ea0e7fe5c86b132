//! Autonomous racing stack: offline race-line planning, real-time NMPC
//! tracking on a kinematic model, moving-horizon state estimation and
//! Gaussian-process correction of the prediction model, run in closed loop
//! against a dynamic bicycle-model plant.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod control;
pub mod dynamics;
pub mod estimation;
pub mod learning;
pub mod nlp;
pub mod planner;
pub mod raceline;
pub mod registry;
pub mod sim;
pub mod spline;
pub mod track;
