//! Dense arrays and the reverse-mode tape everything else trains through.

mod array;
mod tape;

pub use array::{argmax, softmax_into, softmax_rows, DenseArray, MAX_RANK};
pub use tape::{BackwardFn, ElementwiseOp, Gradients, Tape, Var};
