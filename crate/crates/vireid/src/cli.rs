//! Command-line wiring: `generate-data`, `train`, `evaluate`, `sweep`.
//!
//! Every command reads one TOML config (falling back to the desk preset
//! when `--config` is omitted) and applies flag overrides one-to-one. All
//! outputs land under the configured output directory. Exit codes:
//! 0 success, 2 config error, 3 data error, 4 checkpoint error.

use crate::checkpoint::Checkpoint;
use crate::config::{parse_gallery_mode, DatasetKind, RunConfig};
use crate::dataset::{generate_synthetic, DatasetManifest, LoadedDataset, ProtocolSpec, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RetrievalReport};
use crate::model::{AblationMode, Stage};
use crate::plot::{cmc_curve_svg, sweep_bars_svg};
use crate::trainer::{train, trainable_groups, TrainOutcome, TrainSettings};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "vireid",
    version,
    about = "Visible-infrared person re-identification: synthetic data, staged training, retrieval evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file; omitted = the built-in desk-scale preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test manifests.
    #[command(name = "generate-data")]
    GenerateData {
        #[command(flatten)]
        common: CommonArgs,
        /// Overwrite existing manifest files.
        #[arg(long)]
        force: bool,
    },
    /// Run the staged training procedure for the configured mode.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the ablation mode
        /// (baseline|clip_pretrained|clip_vireid|csdn_mspl_only|csdn_full).
        #[arg(long)]
        mode: Option<String>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint under one or more retrieval protocols.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint path; defaults to <output>/checkpoint_final.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Gallery protocol (single-shot|multi-shot); repeatable, one report
        /// row per value.
        #[arg(long = "protocol")]
        protocols: Vec<String>,
        /// Override search mode (all|indoor).
        #[arg(long)]
        search_mode: Option<String>,
        /// Override retrieval direction (ir_to_vis|vis_to_ir).
        #[arg(long)]
        direction: Option<String>,
        /// Override the number of gallery-sampling trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Emit static CMC curve plots (SVG).
        #[arg(long)]
        plots: bool,
    },
    /// Grid-sweep one λ weight: retrains stage 3 per value and evaluates.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Which weight to sweep (lambda1|lambda2|lambda3).
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. "0,0.05,0.1,0.15,0.2,0.25,0.3".
        #[arg(long)]
        values: String,
        /// Override the number of gallery-sampling trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Emit a bar-chart plot (SVG).
        #[arg(long)]
        plots: bool,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::desk(),
    };
    if let Some(out) = &common.output {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common, force } => {
            let cfg = load_config(&common)?;
            cmd_generate_data(&cfg, force)
        }
        Command::Train { common, mode, resume } => {
            let mut cfg = load_config(&common)?;
            if let Some(mode) = mode {
                cfg.train.mode = mode;
            }
            cfg.validate()?;
            cmd_train(&cfg, resume).map(|_| ())
        }
        Command::Evaluate { common, checkpoint, protocols, search_mode, direction, trials, plots } => {
            let mut cfg = load_config(&common)?;
            if let Some(sm) = search_mode {
                cfg.eval.search_mode = sm;
            }
            if let Some(d) = direction {
                cfg.eval.direction = d;
            }
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            cfg.validate()?;
            cmd_evaluate(&cfg, checkpoint.as_deref(), &protocols, plots).map(|_| ())
        }
        Command::Sweep { common, param, values, trials, plots } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            cfg.validate()?;
            let parsed: Result<Vec<f64>> = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad sweep value '{v}': {e}")))
                })
                .collect();
            cmd_sweep(&cfg, &param, &parsed?, plots).map(|_| ())
        }
    }
}

/// Write the synthetic train/test manifests configured in `[dataset]`.
pub fn cmd_generate_data(cfg: &RunConfig, force: bool) -> Result<()> {
    if cfg.dataset.kind == DatasetKind::Manifest {
        return Err(Error::Config(
            "dataset.kind = 'manifest': nothing to generate (manifests are user-supplied)".into(),
        ));
    }
    let (train_path, test_path) = cfg.manifest_paths();
    for path in [&train_path, &test_path] {
        if path.exists() && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    for (split, path) in [(Split::Train, &train_path), (Split::Test, &test_path)] {
        let manifest = generate_synthetic(&cfg.synthetic_spec(split)?)?;
        manifest.write_file(path)?;
        println!(
            "wrote {} ({} records, {} identities, {:?} images)",
            path.display(),
            manifest.records.len(),
            manifest.num_identities,
            manifest.image_shape
        );
    }
    Ok(())
}

fn load_split(path: &Path, expected: Split) -> Result<LoadedDataset> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "manifest {} not found (run generate-data first)",
            path.display()
        )));
    }
    let manifest = DatasetManifest::read_file(path)?;
    if manifest.split != expected {
        return Err(Error::Data(format!(
            "{} is a {:?}-split manifest, expected {:?}",
            path.display(),
            manifest.split,
            expected
        )));
    }
    let base = path.parent().map(Path::to_path_buf);
    LoadedDataset::load(manifest, base.as_deref())
}

fn parameter_count_report(settings: &TrainSettings, outcome: &TrainOutcome) -> String {
    let model = &outcome.model;
    let mut lines = vec![format!("mode: {}", settings.mode.name())];
    let mut per_stage = Vec::new();
    for stage in settings.mode.stages() {
        let groups = trainable_groups(model, stage);
        let count: usize = groups
            .iter()
            .flat_map(|&g| model.group_tensors(g))
            .map(|(_, t)| t.len())
            .sum();
        per_stage.push(count);
        lines.push(format!(
            "stage {}: {} trainable parameters ({})",
            stage.name(),
            count,
            groups.iter().map(|g| g.name()).collect::<Vec<_>>().join(", ")
        ));
    }
    lines.push(format!("total trainable across stages: {}", per_stage.iter().sum::<usize>()));
    lines.push(format!("total parameters (all groups): {}", model.parameter_count()));
    lines.join("\n")
}

/// Run the configured training stages; returns the outcome for callers that
/// keep working with the trained model (sweep, tests).
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let (train_path, _) = cfg.manifest_paths();
    let dataset = load_split(&train_path, Split::Train)?;
    let settings = cfg.train_settings(dataset.manifest.num_identities)?;
    let out_dir = cfg.output.dir.clone();
    let resume_ckpt = if resume {
        let latest = out_dir.join("checkpoint_latest.json");
        if !latest.exists() {
            return Err(Error::Checkpoint(format!(
                "--resume given but {} does not exist",
                latest.display()
            )));
        }
        Some(Checkpoint::load(&latest)?)
    } else {
        None
    };
    let outcome = train(&settings, &dataset, Some(&out_dir), None, resume_ckpt.as_ref())?;
    for audit in &outcome.audits {
        println!(
            "stage {}: trained [{}], changed [{}]",
            audit.stage.name(),
            audit.trainable.join(", "),
            audit.changed.join(", ")
        );
    }
    let report = parameter_count_report(&settings, &outcome);
    std::fs::write(out_dir.join("parameter_counts.txt"), format!("{report}\n"))?;
    println!("{report}");
    println!(
        "checkpoints and logs under {} (final: checkpoint_final.json)",
        out_dir.display()
    );
    Ok(outcome)
}

fn protocol_tag(p: &ProtocolSpec) -> String {
    use crate::dataset::{Direction, GalleryMode, SearchMode};
    format!(
        "{}_{}_{}",
        match p.search_mode {
            SearchMode::All => "all",
            SearchMode::Indoor => "indoor",
        },
        match p.gallery_mode {
            GalleryMode::SingleShot => "single",
            GalleryMode::MultiShot => "multi",
        },
        match p.direction {
            Direction::InfraredToVisible => "ir2vis",
            Direction::VisibleToInfrared => "vis2ir",
        }
    )
}

fn append_results_row(dir: &Path, report: &RetrievalReport) -> Result<()> {
    let path = dir.join("results.tsv");
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{}", RetrievalReport::FLAT_HEADER)?;
    }
    writeln!(f, "{}", report.flat_row())?;
    Ok(())
}

/// Evaluate a checkpoint under the configured protocol(s).
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    protocol_flags: &[String],
    plots: bool,
) -> Result<Vec<RetrievalReport>> {
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join("checkpoint_final.json"));
    if !ckpt_path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", ckpt_path.display())));
    }
    let model = Checkpoint::load(&ckpt_path)?.restore_model()?;
    let (_, test_path) = cfg.manifest_paths();
    let dataset = load_split(&test_path, Split::Test)?;

    let base_protocol = cfg.protocol()?;
    let protocols: Vec<ProtocolSpec> = if protocol_flags.is_empty() {
        vec![base_protocol]
    } else {
        protocol_flags
            .iter()
            .map(|flag| {
                parse_gallery_mode(flag).map(|gm| ProtocolSpec { gallery_mode: gm, ..base_protocol })
            })
            .collect::<Result<Vec<_>>>()?
    };

    std::fs::create_dir_all(&cfg.output.dir)?;
    let mut reports = Vec::new();
    println!("{}", RetrievalReport::FLAT_HEADER);
    for protocol in protocols {
        let report = evaluate(&model, &dataset, &protocol, cfg.eval.trials)?;
        let tag = protocol_tag(&protocol);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(cfg.output.dir.join(format!("report_{tag}.json")), json)?;
        append_results_row(&cfg.output.dir, &report)?;
        println!("{}", report.flat_row());
        if plots {
            let svg = cmc_curve_svg(&[(tag.as_str(), &report)]);
            std::fs::write(cfg.output.dir.join(format!("cmc_{tag}.svg")), svg)?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Sweep one λ weight: the pre-HSE stages run once, then stage 3 retrains
/// per value from that shared checkpoint.
pub fn cmd_sweep(cfg: &RunConfig, param: &str, values: &[f64], plots: bool) -> Result<Vec<(f64, f64, f64)>> {
    if !matches!(param, "lambda1" | "lambda2" | "lambda3") {
        return Err(Error::Config(format!(
            "sweep param must be lambda1, lambda2 or lambda3, got '{param}'"
        )));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let (train_path, _) = cfg.manifest_paths();
    let train_ds = load_split(&train_path, Split::Train)?;
    let (_, test_path) = cfg.manifest_paths();
    let test_ds = load_split(&test_path, Split::Test)?;
    let settings = cfg.train_settings(train_ds.manifest.num_identities)?;
    let protocol = cfg.protocol()?;

    // train everything before HSE once; per-value runs resume from here
    let pre_hse_epochs: usize = settings
        .mode
        .stages()
        .iter()
        .filter(|s| **s != Stage::Hse)
        .map(|&s| settings.stage(s).epochs)
        .sum();
    let base_dir = cfg.output.dir.join(format!("sweep_{param}")).join("base");
    let base = train(&settings, &train_ds, Some(&base_dir), Some(pre_hse_epochs), None)?;
    debug_assert!(!base.completed || pre_hse_epochs == 0 && settings.mode == AblationMode::Baseline || settings.hse.epochs == 0);
    let base_ckpt = Checkpoint::load(&base_dir.join("checkpoint_latest.json"))?;

    let mut rows = Vec::new();
    for &value in values {
        let mut s = settings.clone();
        match param {
            "lambda1" => s.weights.lambda1 = value,
            "lambda2" => s.weights.lambda2 = value,
            _ => s.weights.lambda3 = value,
        }
        let run_dir = cfg.output.dir.join(format!("sweep_{param}")).join(format!("{value}"));
        let outcome = train(&s, &train_ds, Some(&run_dir), None, Some(&base_ckpt))?;
        let report = evaluate(&outcome.model, &test_ds, &protocol, cfg.eval.trials)?;
        println!("{param} = {value}: R1 = {:.4}, mAP = {:.4}", report.rank_k(1), report.map);
        rows.push((value, report.rank_k(1), report.map));
    }

    let mut table = String::from("value\tR1\tmAP\n");
    for (value, r1, map) in &rows {
        table.push_str(&format!("{value}\t{r1:.4}\t{map:.4}\n"));
    }
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(cfg.output.dir.join(format!("sweep_{param}.tsv")), table)?;
    if plots {
        let svg = sweep_bars_svg(param, &rows);
        std::fs::write(cfg.output.dir.join(format!("sweep_{param}.svg")), svg)?;
    }
    Ok(rows)
}
