//! Augmented Lagrangian policy optimization for tabular constrained MDPs.

pub mod cmdp;
pub mod convex;
pub mod al;
pub mod pqa;
pub mod ppqa;
pub mod lp;
pub mod envs;
pub mod harness;
