pub mod eval;
pub mod fit;
pub mod select;
pub mod sweep;
pub mod synth;

/// How a command finished once its outputs were written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Outputs were written but at least one solver run failed.
    SolverFailure,
}
