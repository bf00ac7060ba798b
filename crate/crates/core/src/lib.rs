//! Kernel-filtering linear overparameterization (KFLO).
//!
//! Each filtering layer is trained as a base kernel followed by a cascade of
//! pointwise linear maps applied to the kernel itself. After training the
//! cascade is folded into a single kernel of the original shape, so the
//! deployed network is exactly the vanilla architecture.

pub mod tensor;
pub mod autodiff;
pub mod kflo;
pub mod model;
pub mod train;
pub mod cli;
