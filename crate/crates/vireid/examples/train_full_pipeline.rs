//! The full three-stage pipeline on a small synthetic benchmark: prompt
//! learning, fusion training, semantic-guided visual training, then
//! cross-modality retrieval evaluation.
//!
//! Takes roughly twenty seconds; the per-epoch metrics, the freezing audit
//! and the final retrieval report are printed as they appear.

use vireid::config::RunConfig;
use vireid::dataset::{generate_synthetic, LoadedDataset, Split};
use vireid::evaluation::{evaluate, RetrievalReport};
use vireid::trainer::train;

fn main() -> vireid::Result<()> {
    // the desk preset, shrunk for a quick demonstration
    let mut cfg = RunConfig::desk();
    cfg.dataset.num_identities = 8;
    cfg.dataset.train_images_per_id_per_modality = 6;
    cfg.dataset.test_images_per_id_per_modality = 3;
    cfg.train.epochs_mspl = 3;
    cfg.train.epochs_sii = 3;
    cfg.train.epochs_hse = 8;
    cfg.train.batches_per_epoch = Some(24);
    cfg.train.batch_identities = 8;

    let train_ds = LoadedDataset::load(generate_synthetic(&cfg.synthetic_spec(Split::Train)?)?, None)?;
    let test_ds = LoadedDataset::load(generate_synthetic(&cfg.synthetic_spec(Split::Test)?)?, None)?;
    println!(
        "train: {} records / test: {} records over {} identities",
        train_ds.len(),
        test_ds.len(),
        train_ds.manifest.num_identities
    );

    let settings = cfg.train_settings(train_ds.manifest.num_identities)?;
    let outcome = train(&settings, &train_ds, None, None, None)?;

    println!("\nper-epoch loss trajectory:");
    for r in &outcome.records {
        let comps: Vec<String> = r.components.iter().map(|(k, v)| format!("{k}={v:.3}")).collect();
        println!(
            "  {:>4} epoch {:>2}  lr {:.2e}  loss {:.4}  [{}]",
            r.stage.name(),
            r.epoch,
            r.lr,
            r.loss,
            comps.join(", ")
        );
    }

    println!("\nfreezing audit (changed parameter groups per stage):");
    for audit in &outcome.audits {
        println!("  {:>4}: {}", audit.stage.name(), audit.changed.join(", "));
    }

    let protocol = cfg.protocol()?;
    let report = evaluate(&outcome.model, &test_ds, &protocol, cfg.eval.trials)?;
    println!("\n{}", RetrievalReport::FLAT_HEADER);
    println!("{}", report.flat_row());
    Ok(())
}
