#![allow(dead_code)]

use delaymark::linalg::{Matrix, SolverOptions};
use delaymark::synthesis::{DelayDistribution, LoopDesign, LqgCost, LtiPlant, NoiseModel, Watermark};

pub fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, data)
}

/// Two-state, one-input, one-output loop that is small enough for dense
/// cross-checks.
pub fn small_design(wm: Watermark) -> LoopDesign {
    let plant = LtiPlant::new(mat(2, 2, &[0.9, 0.2, 0.0, 0.7]), mat(2, 1, &[0.0, 1.0]), mat(1, 2, &[1.0, 0.0])).unwrap();
    let noise = NoiseModel::new(Matrix::identity(2, 2) * 0.3, Matrix::identity(1, 1) * 0.1).unwrap();
    let cost = LqgCost::new(Matrix::identity(2, 2), Matrix::identity(1, 1)).unwrap();
    LoopDesign::new(plant, noise, cost, wm, &SolverOptions::default()).unwrap()
}

pub fn small_delay_watermark(gain: f64, max_delay: usize) -> Watermark {
    Watermark::DelayFeedback {
        gain: mat(1, 2, &[gain, 0.5 * gain]),
        delays: DelayDistribution::uniform(1, max_delay).unwrap(),
    }
}
