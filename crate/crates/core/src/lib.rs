//! Centroidal walking-control stack for a desk-scale biped.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod control;
pub mod estimation;
pub mod gaitgen;
pub mod kinematics;
pub mod model;
pub mod ocp;
pub mod qpsolver;
pub mod sim;
