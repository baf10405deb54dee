//! Fixtures shared by the criterion benches.

use splineop_core::functional::{sample_input, GridSpec, Head, InputField, Model, ModelConfig, OutputSpec};
use splineop_core::stochastic::random_sine_dynamics;
use splineop_core::{Interval, ProblemKind};

/// Recovery model at the case-study size with its input for one system.
pub fn recovery_model(width: usize) -> (Model, InputField) {
    let cfg = ModelConfig {
        in_channels: 1,
        grid: vec![32, 32],
        width,
        blocks: 3,
        modes: 8,
        readout_hidden: 0,
        output: OutputSpec::Spline { counts: vec![24, 24], degree: 3, head: Head::Monotone },
        kind: ProblemKind::Recovery,
        faces: vec![[false, true]],
    };
    let model = Model::new(cfg).expect("valid model");
    let system = random_sine_dynamics(3);
    let grid = GridSpec { domain: vec![Interval { lo: -10.0, hi: 4.0 }, Interval { lo: 0.0, hi: 10.0 }], nodes: vec![32, 32] };
    let input = sample_input(&system, &grid, &[]).expect("finite drift");
    (model, input)
}
