//! Save a trained model to a checkpoint archive, load it back, and evaluate
//! it under several retrieval protocols (search mode x gallery mode x
//! direction), ten seeded gallery trials each.

use vireid::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
use vireid::config::RunConfig;
use vireid::dataset::{
    generate_synthetic, Direction, GalleryMode, LoadedDataset, ProtocolSpec, SearchMode, Split,
};
use vireid::evaluation::{evaluate, RetrievalReport};
use vireid::trainer::train;

fn main() -> vireid::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.dataset.num_identities = 8;
    cfg.dataset.train_images_per_id_per_modality = 6;
    cfg.dataset.test_images_per_id_per_modality = 3;
    cfg.train.mode = "baseline".into();
    cfg.train.epochs_hse = 6;
    cfg.train.batches_per_epoch = Some(24);
    cfg.train.batch_identities = 4;

    let train_ds = LoadedDataset::load(generate_synthetic(&cfg.synthetic_spec(Split::Train)?)?, None)?;
    let test_ds = LoadedDataset::load(generate_synthetic(&cfg.synthetic_spec(Split::Test)?)?, None)?;
    let settings = cfg.train_settings(train_ds.manifest.num_identities)?;
    let outcome = train(&settings, &train_ds, None, None, None)?;

    // round-trip through the archive: all parameter groups restore bitwise
    let dir = std::env::temp_dir().join("vireid_examples");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("baseline_checkpoint.json");
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        mode: settings.mode,
        fusion_direction: settings.fusion_direction,
        model: settings.model,
        completed_stages: outcome.audits.iter().map(|a| a.stage).collect(),
        current_stage: None,
        epochs_done: 0,
        train_seed: settings.seed,
    };
    Checkpoint::from_model(&outcome.model, meta, None, None)?.save(&path)?;
    let restored = Checkpoint::load(&path)?.restore_model()?;
    assert_eq!(outcome.model.all_hashes(), restored.all_hashes());
    println!("checkpoint round-trip through {} is bitwise exact", path.display());

    println!("\n{}", RetrievalReport::FLAT_HEADER);
    for search_mode in [SearchMode::All, SearchMode::Indoor] {
        for gallery_mode in [GalleryMode::SingleShot, GalleryMode::MultiShot] {
            let protocol = ProtocolSpec {
                search_mode,
                gallery_mode,
                direction: Direction::InfraredToVisible,
                trial_seed: 500,
            };
            let report = evaluate(&restored, &test_ds, &protocol, 10)?;
            println!("{}", report.flat_row());
        }
    }
    // the reverse retrieval direction is equally supported
    let reverse = ProtocolSpec {
        search_mode: SearchMode::All,
        gallery_mode: GalleryMode::SingleShot,
        direction: Direction::VisibleToInfrared,
        trial_seed: 500,
    };
    let report = evaluate(&restored, &test_ds, &reverse, 10)?;
    println!("{}", report.flat_row());
    Ok(())
}
