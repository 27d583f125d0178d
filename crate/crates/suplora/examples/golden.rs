//! Runs the default pipeline and prints the golden-run metrics as JSON.
//!
//! ```text
//! cargo run --release --example golden -- <workdir> > golden/seed42.json
//! ```

use std::time::Instant;

use serde_json::json;
use suplora::config::RunConfig;
use suplora::eval::group_mass_ratios;
use suplora::pipeline::Pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let workdir = std::env::args().nth(1).ok_or("usage: golden <workdir>")?;
    let config = RunConfig::default();
    let pipeline = Pipeline::new(config.clone(), &workdir);
    let start = Instant::now();
    let pre = pipeline.pretrain()?;
    pipeline.hierarchy()?;
    pipeline.erase()?;
    let fusion = pipeline.fuse()?;
    let eval = pipeline.eval()?;
    let seconds = start.elapsed().as_secs_f64();
    let world = pipeline.world()?;
    let s = &eval.fused.summary;
    let out = json!({
        "seed": config.world.seed,
        "config_hash": config.hash(),
        "thresholds": {
            "masked_mass_ratio_max": 0.3,
            "erased_error_ratio_min": 3.0,
            "supertype_drift_ratio_max": 1.5,
        },
        "measured": {
            "masked_mass_ratio": s.masked_attention_after / s.masked_attention_before,
            "erased_error_ratio": s.erased_error_after / s.erased_error_before,
            "supertype_drift_ratio": s.supertype_drift_after / s.supertype_drift_before,
            "preserved_error_ratio": s.preserved_error_after / s.preserved_error_before,
            "group_mass_ratios": group_mass_ratios(&eval.fused, &world.registry)?,
            "pretrain_trailing_loss": pre.trailing_loss,
            "general_consistency": [fusion.key.general_consistency, fusion.value.general_consistency],
            "target_alignment": [fusion.key.mean_target_alignment(), fusion.value.mean_target_alignment()],
        },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    eprintln!("pipeline took {seconds:.1} s");
    Ok(())
}
