//! Per-prompt optimization against single-pass generation.
//!
//! ```text
//! cargo run --release --example speed_contrast -- [checkpoint.tpd] [prompt] [iterations]
//! ```
//!
//! Without a checkpoint a freshly initialized generator from the default
//! config is timed; the cost of a forward pass does not depend on training.

use std::path::Path;

use tpd_core::autodiff::Precision;
use tpd_core::commands::{load_generator, speed_contrast};
use tpd_core::config::Config;
use tpd_core::train::Lab;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (config, gen) = match args.first().filter(|a| a.ends_with(".tpd")) {
        Some(p) => load_generator(Path::new(p), Precision::F32)?,
        None => {
            let config = Config::default();
            let gen = Lab::new(&config)?.new_generator();
            (config, gen)
        }
    };
    let rest: Vec<&String> = args.iter().filter(|a| !a.ends_with(".tpd")).collect();
    let prompt = rest.first().map(|s| s.as_str()).unwrap_or("an old woman with blue hair, bespectacled");
    let iterations = rest.get(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let lab = Lab::new(&config)?;
    let r = speed_contrast(&lab, &gen, prompt, iterations)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    println!(
        "generation takes {:.3}% of {} optimization steps",
        100.0 * r.ratio,
        r.iterations
    );
    Ok(())
}
