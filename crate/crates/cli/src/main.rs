//! Operator surface for the mmx pipeline: data generation, embedding
//! precaching, two-stage training, evaluation protocols, gradient
//! verification, and feature export.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 runtime numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmx_core::config::TrainConfig;
use mmx_core::dataset::{build_split, class_counts, read_mmpd, write_mmpd};
use mmx_core::error::Error;
use mmx_core::eval::{export_features, linear_probe, retrieval, zero_shot, EvalReport};
use mmx_core::frozen::{build_model, load_cache, precache, save_cache, Modality};
use mmx_core::geometry::PointCloud;
use mmx_core::gradcheck::run_gradcheck;
use mmx_core::linalg::Mat;
use mmx_core::rng;
use mmx_core::trainer::{
    encode_dataset_features, load_checkpoint_expecting, save_checkpoint, train_one_stage,
    train_stage1, train_stage2, StageOutput, TrainInputs,
};

#[derive(Parser)]
#[command(name = "mmx", version, about = "Multi-modal mixing alignment pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheModality {
    Text,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
    OneStage,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Zeroshot,
    Linear,
    Retrieval,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrievalMode {
    #[value(name = "pc2pc")]
    PcToPc,
    #[value(name = "text2pc")]
    TextToPc,
    #[value(name = "image2pc")]
    ImageToPc,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/eval MMPD datasets from the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for train.mmpd and eval.mmpd.
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute frozen-modality embeddings into an MMEC cache.
    Precache {
        #[arg(long)]
        config: PathBuf,
        /// One or more MMPD files whose samples get embedded.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        modality: CacheModality,
        /// Output MMEC path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1, stage 2, both, or the one-stage ablation.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training MMPD file.
        #[arg(long)]
        data: PathBuf,
        /// Directory holding text.mmec and image.mmec.
        #[arg(long)]
        caches: PathBuf,
        #[arg(long)]
        stage: StageArg,
        /// Output directory for checkpoints and CSV logs.
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint, required when --stage 2.
        #[arg(long)]
        stage1_checkpoint: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run an evaluation protocol against a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation MMPD file (gallery / test split).
        #[arg(long)]
        data: PathBuf,
        /// Train MMPD file; required for the linear protocol.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Caches directory; required for image2pc retrieval.
        #[arg(long)]
        caches: Option<PathBuf>,
        /// Output directory for the report JSON and per-sample CSV.
        #[arg(long)]
        out: PathBuf,
        /// FC layers for the linear probe.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
        layers: u8,
        #[arg(long, default_value_t = 300)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        probe_lr: f64,
        /// Retrieval neighborhood size.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        k: u32,
        #[arg(long, default_value = "pc2pc")]
        mode: RetrievalMode,
        /// Skip the query itself when it appears in the gallery.
        #[arg(long, default_value_t = false)]
        exclude_self: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Verify every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export encoder features for a dataset as CSV.
    ExportFeatures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn threads_from(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("MMX_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn load_config(path: &Path) -> Result<TrainConfig, Error> {
    let cfg = TrainConfig::from_file(path)?;
    print!("{}", cfg.resolved_text());
    println!("resolved seed = {}", cfg.seed);
    Ok(cfg)
}


fn labels_and_ids(clouds: &[PointCloud]) -> (Vec<u16>, Vec<u64>) {
    (
        clouds.iter().map(|pc| pc.class_id).collect(),
        clouds.iter().map(|pc| pc.id).collect(),
    )
}

fn image_instance_seeds(cfg: &TrainConfig, clouds: &[PointCloud]) -> Vec<u64> {
    clouds
        .iter()
        .map(|pc| rng::sub_seed(cfg.seed, "image-instance", &[pc.id]))
        .collect()
}

fn eval_ks(num_classes: u16) -> Vec<usize> {
    [1usize, 3, 5]
        .into_iter()
        .filter(|&k| k <= num_classes as usize)
        .collect()
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let train = build_split(
        cfg.seed,
        cfg.num_classes,
        cfg.points_per_cloud,
        cfg.jitter,
        cfg.train_size,
        0,
    )?;
    let eval = build_split(
        cfg.seed,
        cfg.num_classes,
        cfg.points_per_cloud,
        cfg.jitter,
        cfg.eval_size,
        cfg.train_size as u64,
    )?;
    for (name, split) in [("train.mmpd", &train), ("eval.mmpd", &eval)] {
        let path = out.join(name);
        write_mmpd(&path, split)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {} ({} records)", path.display(), split.len());
        for (class, count) in class_counts(split) {
            println!("  class {class}: {count}");
        }
    }
    Ok(())
}

fn cmd_precache(
    config: &Path,
    data: &[PathBuf],
    modality: CacheModality,
    out: &Path,
) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let mut clouds = Vec::new();
    for path in data {
        clouds.extend(read_mmpd(path)?);
    }
    let model = build_model(cfg.seed, cfg.num_classes, cfg.dim, cfg.sigma_image)?;
    let pairs: Vec<(u64, u16)> = clouds.iter().map(|pc| (pc.id, pc.class_id)).collect();
    let cache = match modality {
        CacheModality::Text => precache(&pairs, &model, Modality::Text, &[])?,
        CacheModality::Image => {
            let seeds = image_instance_seeds(&cfg, &clouds);
            precache(&pairs, &model, Modality::Image, &seeds)?
        }
    };
    save_cache(&cache, out)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "wrote {} ({} entries, dim {}, modality {})",
        out.display(),
        cache.len(),
        cache.dim,
        cache.modality.name()
    );
    Ok(())
}

fn save_stage(out_dir: &Path, name: &str, stage: &StageOutput) -> Result<(), Error> {
    let ck_path = out_dir.join(format!("{name}.mmck"));
    save_checkpoint(&stage.checkpoint(), &ck_path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", ck_path.display())))?;
    let steps = out_dir.join(format!("{name}_steps.csv"));
    let pairs = out_dir.join(format!("{name}_pairs.csv"));
    stage.log.write_csvs(&steps, &pairs)?;
    let last_loss = stage.log.steps.last().map(|s| s.loss);
    println!(
        "wrote {} ({} steps, final loss {:?}, tau {:.6})",
        ck_path.display(),
        stage.steps,
        last_loss,
        stage.temperature.tau()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    data: &Path,
    caches: &Path,
    stage: StageArg,
    out: &Path,
    stage1_checkpoint: Option<&Path>,
    threads: Option<usize>,
) -> Result<(), Error> {
    let mut cfg = load_config(config)?;
    cfg.threads = threads_from(threads);
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let dataset = read_mmpd(data)?;
    let text_cache = load_cache(&caches.join("text.mmec"))?;
    let image_cache = load_cache(&caches.join("image.mmec"))?;
    let inputs = TrainInputs {
        dataset: &dataset,
        text_cache: &text_cache,
        image_cache: &image_cache,
    };

    match stage {
        StageArg::One => {
            let s1 = train_stage1(&cfg, &inputs)?;
            save_stage(out, "stage1", &s1)?;
        }
        StageArg::Two => {
            let ck_path = stage1_checkpoint.ok_or_else(|| {
                Error::Config("--stage 2 requires --stage1-checkpoint".to_string())
            })?;
            let ck = load_checkpoint_expecting(ck_path, cfg.hidden, cfg.dim)?;
            let s2 = train_stage2(&cfg, &inputs, &ck.params)?;
            save_stage(out, "stage2", &s2)?;
        }
        StageArg::Both => {
            let s1 = train_stage1(&cfg, &inputs)?;
            save_stage(out, "stage1", &s1)?;
            let s2 = train_stage2(&cfg, &inputs, &s1.params)?;
            save_stage(out, "stage2", &s2)?;
        }
        StageArg::OneStage => {
            let both = train_one_stage(&cfg, &inputs)?;
            save_stage(out, "stage1", &both.stage1)?;
            save_stage(out, "stage2", &both.stage2)?;
        }
    }
    Ok(())
}

fn report_summary(report: &EvalReport) {
    for (k, v) in &report.overall {
        println!("{} @{}: {:.4}", report.protocol, k, v);
    }
}

fn write_report(report: &EvalReport, out: &Path, name: &str) -> Result<(), Error> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
    let json = out.join(format!("{name}.json"));
    let csv = out.join(format!("{name}_samples.csv"));
    report.write(&json, &csv)?;
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &Path,
    protocol: Protocol,
    checkpoint: &Path,
    data: &Path,
    train_data: Option<&Path>,
    caches: Option<&Path>,
    out: &Path,
    layers: u8,
    probe_epochs: usize,
    probe_lr: f64,
    k: u32,
    mode: RetrievalMode,
    exclude_self: bool,
    threads: Option<usize>,
) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let threads = threads_from(threads);
    let ck = load_checkpoint_expecting(checkpoint, cfg.hidden, cfg.dim)?;
    let eval_set = read_mmpd(data)?;
    let (labels, ids) = labels_and_ids(&eval_set);
    let feats = Mat::from_rows(encode_dataset_features(&ck.params, &eval_set, threads)?)?;
    let model = build_model(cfg.seed, cfg.num_classes, cfg.dim, cfg.sigma_image)?;
    let anchors = Mat::from_rows(model.anchors.clone())?;
    let ks = eval_ks(cfg.num_classes);

    match protocol {
        Protocol::Zeroshot => {
            let report = zero_shot(&feats, &labels, &ids, &anchors, &ks)?;
            report_summary(&report);
            write_report(&report, out, "zeroshot")?;
        }
        Protocol::Linear => {
            let train_path = train_data.ok_or_else(|| {
                Error::Config("--protocol linear requires --train-data".to_string())
            })?;
            let train_set = read_mmpd(train_path)?;
            let (train_labels, _) = labels_and_ids(&train_set);
            let train_feats =
                Mat::from_rows(encode_dataset_features(&ck.params, &train_set, threads)?)?;
            let probe_seed = rng::sub_seed(cfg.seed, "probe", &[u64::from(layers)]);
            let outcome = linear_probe(
                &train_feats,
                &train_labels,
                &feats,
                &labels,
                &ids,
                cfg.num_classes,
                usize::from(layers),
                probe_epochs,
                probe_lr,
                probe_seed,
                &ks,
            )?;
            println!(
                "probe loss: first epoch {:.6}, final epoch {:.6}",
                outcome.first_epoch_loss, outcome.final_epoch_loss
            );
            report_summary(&outcome.report);
            write_report(&outcome.report, out, &format!("linear{layers}"))?;
        }
        Protocol::Retrieval => {
            let k = k as usize;
            let (name, report) = match mode {
                RetrievalMode::PcToPc => {
                    let report = retrieval(
                        &feats, &labels, &ids, &feats, &labels, &ids, k, exclude_self,
                    )?;
                    ("retrieval_pc2pc", report)
                }
                RetrievalMode::TextToPc => {
                    let q_labels: Vec<u16> = (0..cfg.num_classes).collect();
                    // synthetic query ids outside the gallery id space
                    let q_ids: Vec<u64> = q_labels.iter().map(|&c| u64::MAX - u64::from(c)).collect();
                    let report = retrieval(
                        &anchors, &q_labels, &q_ids, &feats, &labels, &ids, k, exclude_self,
                    )?;
                    ("retrieval_text2pc", report)
                }
                RetrievalMode::ImageToPc => {
                    let caches_dir = caches.ok_or_else(|| {
                        Error::Config("image2pc retrieval requires --caches".to_string())
                    })?;
                    let image_cache = load_cache(&caches_dir.join("image.mmec"))?;
                    let rows: Result<Vec<Vec<f64>>, Error> = eval_set
                        .iter()
                        .map(|pc| image_cache.get(pc.id).map(<[f64]>::to_vec))
                        .collect();
                    let queries = Mat::from_rows(rows?)?;
                    // image queries share ids with their gallery clouds, so
                    // exclude_self removes the paired cloud, not the class
                    let report = retrieval(
                        &queries, &labels, &ids, &feats, &labels, &ids, k, exclude_self,
                    )?;
                    ("retrieval_image2pc", report)
                }
            };
            report_summary(&report);
            write_report(&report, out, name)?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>) -> Result<bool, Error> {
    let cfg = match config {
        Some(path) => load_config(path)?,
        None => {
            let cfg = TrainConfig::default();
            print!("{}", cfg.resolved_text());
            println!("resolved seed = {}", cfg.seed);
            cfg
        }
    };
    let report = run_gradcheck(50, cfg.seed)?;
    print!("{}", report.render());
    Ok(report.passed())
}

fn cmd_export(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    threads: Option<usize>,
) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let ck = load_checkpoint_expecting(checkpoint, cfg.hidden, cfg.dim)?;
    let dataset = read_mmpd(data)?;
    export_features(&dataset, &ck.params, out, threads_from(threads))
        .map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot write {}: {io}", out.display())),
            other => other,
        })?;
    println!("wrote {} ({} rows)", out.display(), dataset.len());
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.cmd {
        Cmd::GenData { config, out } => cmd_gen_data(&config, &out).map(|()| true),
        Cmd::Precache {
            config,
            data,
            modality,
            out,
        } => cmd_precache(&config, &data, modality, &out).map(|()| true),
        Cmd::Train {
            config,
            data,
            caches,
            stage,
            out,
            stage1_checkpoint,
            threads,
        } => cmd_train(
            &config,
            &data,
            &caches,
            stage,
            &out,
            stage1_checkpoint.as_deref(),
            threads,
        )
        .map(|()| true),
        Cmd::Eval {
            config,
            protocol,
            checkpoint,
            data,
            train_data,
            caches,
            out,
            layers,
            probe_epochs,
            probe_lr,
            k,
            mode,
            exclude_self,
            threads,
        } => cmd_eval(
            &config,
            protocol,
            &checkpoint,
            &data,
            train_data.as_deref(),
            caches.as_deref(),
            &out,
            layers,
            probe_epochs,
            probe_lr,
            k,
            mode,
            exclude_self,
            threads,
        )
        .map(|()| true),
        Cmd::Gradcheck { config } => cmd_gradcheck(config.as_deref()),
        Cmd::ExportFeatures {
            config,
            checkpoint,
            data,
            out,
            threads,
        } => cmd_export(&config, &checkpoint, &data, &out, threads).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
