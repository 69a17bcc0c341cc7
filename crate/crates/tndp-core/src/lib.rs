//! Decision-aware amortized experimental design.
//!
//! A dual-head transformer proposes the next experimental design and
//! approximates outcome predictive distributions for downstream decisions.
//! Training uses policy gradients on decision-utility-gain rewards; exact
//! Gaussian-process machinery provides synthetic tasks and the non-amortized
//! baselines it is benchmarked against.

pub mod bench;
pub mod envs;
pub mod gp;
pub mod model;
pub mod nn;
pub mod seeded;
pub mod task;
pub mod train;
