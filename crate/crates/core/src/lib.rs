//! Ground-truth stability domains for droop-controlled inverter networks
//! via a polynomial eigenvalue oracle, and generative models that
//! synthesize those regions orders of magnitude faster.

pub(crate) mod binio;
pub mod dataset;
pub mod evalbench;
pub mod gan;
pub mod netmodel;
pub mod nnkernel;
pub mod oracle;
pub(crate) mod seeding;
pub mod smallsignal;
