//! Helpers shared by the parameter containers.
//!
//! Parameter structs are generic over their leaf type `P`: `Tensor` for
//! stored weights, [`Var`](crate::Var) once bound onto a tape. Each container
//! exposes `map`, which walks the leaves in a fixed order and hands every leaf
//! its dotted path name (`sttm.layer0.spatial.head1.u_query`).

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers a tensor leaf on the tape.
pub fn bind(tape: &mut Tape) -> impl FnMut(&str, &Tensor) -> Var + '_ {
    move |_, t| tape.leaf(t.clone())
}
