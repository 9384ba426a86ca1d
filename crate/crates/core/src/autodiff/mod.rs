//! Reverse-mode differentiation: scalar interface, tape, parameter registry
//! and finite-difference verification.

pub mod gradcheck;
pub mod kink;
pub mod registry;
pub mod scalar;
pub mod tape;

pub use registry::{
    GradBuffer, GradBuffers, GradLog, GradSink, GroupId, NullSink, ParamGroup, ParamStore, Part,
    Role, RoleSet,
};
pub use scalar::Scalar;
pub use tape::{forward_record, Adjoints, BlockOp, TVar, Tape};
