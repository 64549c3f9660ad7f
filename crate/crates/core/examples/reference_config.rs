//! Prints the reference experiment as a run config:
//! `cargo run --example reference_config > experiment.json`
use circuitscope::pipeline::RunConfig;

fn main() {
    let config = RunConfig::reference(0);
    println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
}
