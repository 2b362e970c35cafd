//! Sweep one loss-balance weight: the stages before visual training run
//! once, then stage 3 retrains per value from that shared checkpoint and
//! each model is evaluated. Emits the per-value table plus a bar-chart SVG.

use vireid::cli::{cmd_generate_data, cmd_sweep};
use vireid::config::RunConfig;

fn main() -> vireid::Result<()> {
    let out = std::env::temp_dir().join("vireid_examples").join("sweep");
    let _ = std::fs::remove_dir_all(&out);

    // desk dataset, with stage 3 kept short so the sweep finishes quickly;
    // the mid-training operating point makes the λ sensitivity visible
    let mut cfg = RunConfig::desk();
    cfg.output.dir = out.clone();
    cfg.train.epochs_mspl = 2;
    cfg.train.epochs_sii = 2;
    cfg.train.epochs_hse = 8;
    cfg.train.batches_per_epoch = Some(16);

    cmd_generate_data(&cfg, true)?;
    let rows = cmd_sweep(&cfg, "lambda3", &[0.0, 0.05, 0.1, 0.2], true)?;

    println!("\nvalue   R1      mAP");
    for (value, r1, map) in rows {
        println!("{value:<7} {r1:.4}  {map:.4}");
    }
    println!(
        "table: {}  chart: {}",
        out.join("sweep_lambda3.tsv").display(),
        out.join("sweep_lambda3.svg").display()
    );
    Ok(())
}
