//! Comparison models: TF-IDF + SVM and small neural regressors.

pub mod neural;
pub mod svm;

pub use neural::{AnnBaseline, BaselineConfig, LstmBaseline, SimpleRnn};
pub use svm::{rbf_kernel, smo_solve, svm_train, BinaryMachine, SmoSolution, SvmConfig, SvmModel};
