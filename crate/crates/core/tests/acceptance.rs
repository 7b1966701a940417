//! Acceptance gate: runs every reproduction criterion at its stated
//! tolerance and prints one PASS/FAIL line per criterion.

use std::process::ExitCode;

use delaymark::checks::{run_all, ReproductionOptions};

fn main() -> ExitCode {
    let opts = ReproductionOptions::default();
    let outcomes = match run_all(&opts, |o| println!("{}", o.line())) {
        Ok((outcomes, _)) => outcomes,
        Err(e) => {
            println!("FAIL acceptance run aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!();
    for o in &outcomes {
        print!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("\n{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
