// Certificate for the three-tank loop, then noise-free rollouts under a few
// hand-picked delay sequences.

use delaymark::config::ExperimentConfig;
use delaymark::stability::{mean_dynamics_rollout, stability_certificate, MatrixNorm};
use delaymark::{Matrix, SolverOptions, Vector};

pub fn run_example() -> delaymark::Result<()> {
    let design = ExperimentConfig::three_tank().design()?;
    let aug = design.augmented();
    let n = aug.current.nrows();
    for norm in [MatrixNorm::Spectral, MatrixNorm::Frobenius] {
        let c = stability_certificate(&aug, &Matrix::identity(n, n), norm, &SolverOptions::default())?;
        println!("{norm:?}: alpha {:.4} beta {:.4} passes {}", c.alpha, c.beta, c.passes);
    }

    let x0 = Vector::from_element(n, 1.0);
    let sequences: [(&str, Vec<usize>); 3] = [
        ("shortest", vec![50; 3000]),
        ("longest", vec![200; 3000]),
        ("alternating", (0..3000).map(|t| if (t / 100) % 2 == 0 { 50 } else { 200 }).collect()),
    ];
    for (name, delays) in sequences {
        let r = mean_dynamics_rollout(&aug, &delays, &x0)?;
        println!("{name:<12} fitted rate {:.4}, final sup-norm {:.2e}", r.rate, r.sup_norms.last().unwrap());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
