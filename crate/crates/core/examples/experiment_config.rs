// Loads an experiment from TOML and runs the attack command into a
// temporary directory.

use delaymark::config::ExperimentConfig;
use delaymark::experiment::cmd_attack;

const CONFIG: &str = r#"
name = "scalar-recorded-replay"

[plant]
a = { rows = 1, cols = 1, data = [0.95] }
b = { scale = 1.0 }
c = { scale = 1.0 }

[noise]
sigma_w = { scale = 0.2 }
sigma_v = { scale = 0.05 }

[cost]
q = { scale = 1.0 }
r = { scale = 0.5 }

[watermark]
variant = "delay"
k_tau = { scale = 0.3 }
tau_min = 2
tau_max = 8

[detector]
window = 20
false_alarm_rate = 0.01

[sim]
horizon = 4000
seed = 99

[attack]
t_start = 2000
t_end = 2500
t_prime = 3000
mode = "recorded"
"#;

pub fn run_example() -> delaymark::Result<()> {
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let out = std::env::temp_dir().join("delaymark_config_example");
    let (summary, manifest) = cmd_attack(&cfg, &out, None)?;
    print!("{summary}");
    println!("files: {}", manifest.files.join(", "));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
