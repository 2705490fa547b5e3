//! Two-view (CC/MLO) mammogram classification with domain-generalisation
//! components, built on a small reverse-mode autodiff core.

pub mod backbone;
pub mod cli;
pub mod cve;
pub mod fusion;
pub mod metrics;
pub mod micl;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod trainkit;

/// Whether stochastic training-only components run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    Cc,
    Mlo,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Cc => "cc",
            View::Mlo => "mlo",
        }
    }
}
