//! Dense arrays, the differentiation tape, and MAC instrumentation.

mod array;
pub mod gradcheck;
mod ops;
mod tape;

pub use array::Tensor;
pub use ops::{BinaryKind, UnaryKind};
pub use tape::{BackwardCtx, BackwardOp, OpCounter, Tape, Var};
