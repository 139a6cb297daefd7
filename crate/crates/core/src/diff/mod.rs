//! Differentiation: forward-mode tangents, a reverse-mode tape, finite
//! differences, and the subject-to-object map whose Jacobian the relational
//! operators are built from.

pub mod dual;
pub mod fd;
pub mod map;
pub mod ops;
pub mod tape;

pub use dual::{Dual, DualOps};
pub use map::{jacobian, jvp, taylor_remainder, JacobianMethod, JacobianResult, SubjectObjectMap, VectorMap};
pub use tape::{value_and_grad, Tape, Var};
