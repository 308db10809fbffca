//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)
//! values.
//!
//! A [`Tape`] evaluates every primitive eagerly and records it. Calling
//! [`Tape::backward`] walks the record in reverse, so each node's adjoint is
//! complete (all consumers were recorded later) before it is propagated to
//! its inputs. Parameters enter the tape by copy through [`Tape::param`] and
//! receive their adjoints in a [`Gradients`] buffer, which keeps concurrent
//! workers from touching shared state.

mod cell;
mod gradcheck;
mod param;
mod segments;
mod tape;

pub use cell::{CellSource, CellSpec};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use segments::Segments;
pub use tape::{Tape, Var};
