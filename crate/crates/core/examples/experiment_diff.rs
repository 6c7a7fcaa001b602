//! Config-driven runs written to disk, then compared field by field.

use lqsg::experiment::{diff_files, run, ExperimentConfig};

const CONFIG: &str = r#"{
  "mode": "oracle",
  "seed": 1,
  "spec": {
    "players": 2, "horizon": 1.0, "steps": 20,
    "a": [1.0, 1.0], "b": [0.0, 0.0], "sigma": [0.0, 0.0], "x0": [0.0, 0.0],
    "c_plus": [0.5, 0.5], "c_minus": [0.5, 0.5],
    "Q": [[[2.0, 0.5], [0.5, 0.0]], [[0.0, 0.5], [0.5, 2.0]]]
  },
  "solver": { "paths": 1 }
}"#;

fn main() -> lqsg::Result<()> {
    let dir = std::env::temp_dir().join("lqsg-experiment-diff");
    let mut cfg = ExperimentConfig::from_json_str(CONFIG)?;
    let first = run(&cfg, &dir.join("seed1"))?;
    cfg.seed = 2;
    let second = run(&cfg, &dir.join("seed2"))?;
    println!("exit codes {} and {}", first.status.exit_code(), second.status.exit_code());
    let diff = diff_files(&dir.join("seed1/oracle.json"), &dir.join("seed2/oracle.json"), 1e-9)?;
    println!("seeds differ: {}", diff.seeds_differ);
    for d in &diff.diffs {
        println!("{}: {} -> {} (expected {})", d.path, d.a, d.b, d.expected);
    }
    Ok(())
}
