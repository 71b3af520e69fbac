// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collective;
pub mod constellation;
pub mod deployment;
pub mod interorbit;
pub mod msdag;
pub mod orchestration;
pub mod scenario;
pub mod sgl_flow;
pub mod simkernel;
