//! Compare the pipeline variants on the fixed-seed desk benchmark: the
//! plain visual baseline, the shared-prompt variant, prompts without
//! fusion, and the full three-stage pipeline.
//!
//! This trains five models at the full desk settings, so expect a few
//! minutes of wall time (progress prints as each mode finishes).

use vireid::config::RunConfig;
use vireid::dataset::{generate_synthetic, LoadedDataset, Split};
use vireid::evaluation::evaluate;
use vireid::trainer::train;

fn main() -> vireid::Result<()> {
    let mut cfg = RunConfig::desk();

    let train_ds = LoadedDataset::load(generate_synthetic(&cfg.synthetic_spec(Split::Train)?)?, None)?;
    let test_ds = LoadedDataset::load(generate_synthetic(&cfg.synthetic_spec(Split::Test)?)?, None)?;
    let protocol = cfg.protocol()?;

    println!("mode             stages                 R1      mAP");
    let mut rows = Vec::new();
    for mode in ["baseline", "clip_pretrained", "clip_vireid", "csdn_mspl_only", "csdn_full"] {
        cfg.train.mode = mode.into();
        let settings = cfg.train_settings(train_ds.manifest.num_identities)?;
        let outcome = train(&settings, &train_ds, None, None, None)?;
        let report = evaluate(&outcome.model, &test_ds, &protocol, cfg.eval.trials)?;
        let stages: Vec<&str> = settings.mode.stages().iter().map(|s| s.name()).collect();
        println!(
            "{mode:<16} {:<22} {:.4}  {:.4}",
            stages.join("+"),
            report.rank_k(1),
            report.map
        );
        rows.push((mode, report.map));
    }

    let map_of = |m: &str| rows.iter().find(|(mode, _)| *mode == m).unwrap().1;
    println!(
        "\ntrend: mAP(csdn_full) = {:.4} vs mAP(baseline) = {:.4}",
        map_of("csdn_full"),
        map_of("baseline")
    );
    Ok(())
}
