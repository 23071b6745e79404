//! The two-stage training pipeline: stage 1 aligns the trainable point
//! encoder against frozen text/image embeddings under feature-level mixing;
//! stage 2 trains a fresh encoder on input-level mixed clouds against
//! feature-mixed frozen targets. A one-stage mode trains both encoders
//! simultaneously for ablation comparisons.
//!
//! Every random draw comes from a named sub-stream of the config seed, all
//! reductions run in a fixed order, and batch fan-out across worker threads
//! never changes results.

pub mod checkpoint;
pub mod log;
pub mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting,
    save_checkpoint, Checkpoint,
};
pub use log::{MixRecord, MixUse, StepLog, StepRecord};
pub use optim::{adamw_step, lr_at, AdamWState};

use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::encoder::{self, EncoderParams, ForwardTape};
use crate::error::{Error, Result};
use crate::frozen::EmbeddingCache;
use crate::geometry::{fps, PointCloud};
use crate::linalg::{self, Mat};
use crate::losses::{
    loss_stage1_backward, loss_stage1_literal_backward, loss_stage2_backward,
    loss_stage2_literal_backward, StageGrads, Temperature,
};
use crate::mixing::{build_mask, input_mix, make_pairing, sample_lambda};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub dataset: &'a [PointCloud],
    pub text_cache: &'a EmbeddingCache,
    pub image_cache: &'a EmbeddingCache,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub params: EncoderParams,
    pub temperature: Temperature,
    pub log: StepLog,
    pub steps: u64,
}

impl StageOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step: self.steps,
            rho: self.temperature.rho,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stage1: StageOutput,
    pub stage2: StageOutput,
}

/// Deterministic init seed for a stage's encoder.
pub fn stage_init_seed(master_seed: u64, stage: u64) -> u64 {
    rng::sub_seed(master_seed, "stage-init", &[stage])
}

fn make_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

fn par_try_map<T, R, F>(pool: &rayon::ThreadPool, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    pool.install(|| items.par_iter().map(&f).collect())
}

fn validate_inputs(cfg: &TrainConfig, data: &TrainInputs) -> Result<()> {
    cfg.validate()?;
    if data.dataset.is_empty() {
        return Err(Error::domain("dataset is empty"));
    }
    if data.text_cache.dim != cfg.dim || data.image_cache.dim != cfg.dim {
        return Err(Error::shape(
            format!("caches of dim {}", cfg.dim),
            format!("text {}, image {}", data.text_cache.dim, data.image_cache.dim),
        ));
    }
    for pc in data.dataset {
        data.text_cache.get(pc.id)?;
        data.image_cache.get(pc.id)?;
        if cfg.mix_mode.input_level() && pc.len() < cfg.fps_points {
            return Err(Error::domain(format!(
                "fps_points {} exceeds cloud {} size {}",
                cfg.fps_points,
                pc.id,
                pc.len()
            )));
        }
    }
    Ok(())
}

fn shuffled_indices(seed: u64, stage: u64, epoch: usize, len: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    let mut stream = rng::stream(seed, "shuffle", &[stage, epoch as u64]);
    order.shuffle(&mut stream);
    order
}

fn rows_to_mat(rows: Vec<Vec<f64>>) -> Result<Mat> {
    Mat::from_rows(rows)
}

fn cache_rows(cache: &EmbeddingCache, dataset: &[PointCloud], batch: &[usize]) -> Result<Mat> {
    let rows: Result<Vec<Vec<f64>>> = batch
        .iter()
        .map(|&idx| cache.get(dataset[idx].id).map(<[f64]>::to_vec))
        .collect();
    rows_to_mat(rows?)
}

/// Feature-level mixing of a whole batch with one shared pairing: row i
/// becomes lambda_i * src_i + (1 - lambda_i) * src_pi(i), optionally
/// renormalized. Returns the mixed rows and pre-normalization norms.
fn mix_feature_rows(
    src: &Mat,
    pairing: &[usize],
    lambdas: &[f64],
    renormalize: bool,
) -> Result<(Mat, Option<Vec<f64>>)> {
    let n = src.rows;
    let mut out = Mat::zeros(n, src.cols);
    let mut norms = renormalize.then(|| vec![0.0; n]);
    for i in 0..n {
        let j = pairing[i];
        let lam = lambdas[i];
        let a = src.row(i);
        let b = src.row(j);
        let row = out.row_mut(i);
        for c in 0..a.len() {
            row[c] = lam * a[c] + (1.0 - lam) * b[c];
        }
        if let Some(norms) = norms.as_mut() {
            let norm = linalg::norm(row);
            if norm <= 1e-300 {
                return Err(Error::DegenerateMix);
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms[i] = norm;
        }
    }
    Ok((out, norms))
}

/// Pull gradients on mixed rows back onto the source rows.
fn mix_feature_rows_backward(
    d_mixed: &Mat,
    mixed: &Mat,
    norms: &Option<Vec<f64>>,
    pairing: &[usize],
    lambdas: &[f64],
) -> Mat {
    let n = d_mixed.rows;
    let mut d_src = Mat::zeros(n, d_mixed.cols);
    for i in 0..n {
        let g = d_mixed.row(i);
        // through the optional renormalization: (I - mm^T) g / |u|
        let du: Vec<f64> = match norms {
            Some(norms) => {
                let m = mixed.row(i);
                let mg = linalg::dot(m, g);
                g.iter().zip(m).map(|(gv, mv)| (gv - mv * mg) / norms[i]).collect()
            }
            None => g.to_vec(),
        };
        let j = pairing[i];
        let lam = lambdas[i];
        linalg::axpy(d_src.row_mut(i), lam, &du);
        linalg::axpy(d_src.row_mut(j), 1.0 - lam, &du);
    }
    d_src
}

/// Sum per-sample encoder gradients in ascending batch order.
fn accumulate_encoder_grads(parts: Vec<EncoderParams>) -> Option<EncoderParams> {
    let mut iter = parts.into_iter();
    let mut total = iter.next()?;
    for part in iter {
        add_params(&mut total, &part);
    }
    Some(total)
}

fn add_params(acc: &mut EncoderParams, other: &EncoderParams) {
    for (a, b) in acc.w1.data.iter_mut().zip(&other.w1.data) {
        *a += b;
    }
    for (a, b) in acc.b1.iter_mut().zip(&other.b1) {
        *a += b;
    }
    for (a, b) in acc.w2.data.iter_mut().zip(&other.w2.data) {
        *a += b;
    }
    for (a, b) in acc.b2.iter_mut().zip(&other.b2) {
        *a += b;
    }
    for (a, b) in acc.w3.data.iter_mut().zip(&other.w3.data) {
        *a += b;
    }
    for (a, b) in acc.b3.iter_mut().zip(&other.b3) {
        *a += b;
    }
}

struct BatchGrads {
    params: EncoderParams,
    d_rho: f64,
    loss: f64,
    tau_used: f64,
}

fn check_finite_loss(loss: f64, stage: u8, step: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("stage-{stage} loss at step {step} (last good step {})", step - 1),
        });
    }
    Ok(())
}

/// One stage-1 minibatch: forwards, optional feature mixing, loss, and
/// exact gradients for the encoder and rho.
#[allow(clippy::too_many_arguments)]
fn stage1_minibatch(
    cfg: &TrainConfig,
    params: &EncoderParams,
    temp: &Temperature,
    data: &TrainInputs,
    batch: &[usize],
    epoch: usize,
    step: u64,
    pool: &rayon::ThreadPool,
    log: &mut StepLog,
) -> Result<BatchGrads> {
    let n = batch.len();
    let forwards: Vec<(Vec<f64>, ForwardTape)> = par_try_map(pool, batch, |&idx| {
        encoder::forward(&data.dataset[idx].points, params)
    })?;
    let src_p = rows_to_mat(forwards.iter().map(|(f, _)| f.clone()).collect())?;
    let src_i = cache_rows(data.image_cache, data.dataset, batch)?;
    let src_t = cache_rows(data.text_cache, data.dataset, batch)?;

    let fm = cfg.mix_mode.feature_level();
    let (m_p, norms_p, m_i, m_t, pairing, lambdas) = if fm {
        let mut pair_rng = rng::stream(cfg.seed, "pairing", &[1, epoch as u64, step]);
        let pairing = make_pairing(n, &mut pair_rng)?;
        let mut lam_rng = rng::stream(cfg.seed, "lambda", &[1, epoch as u64, step]);
        let lambdas: Vec<f64> = (0..n)
            .map(|_| sample_lambda(cfg.beta, &mut lam_rng))
            .collect::<Result<_>>()?;
        let (m_p, norms_p) = mix_feature_rows(&src_p, &pairing, &lambdas, cfg.renormalize_mixed)?;
        let (m_i, _) = mix_feature_rows(&src_i, &pairing, &lambdas, cfg.renormalize_mixed)?;
        let (m_t, _) = mix_feature_rows(&src_t, &pairing, &lambdas, cfg.renormalize_mixed)?;
        for (i, (&j, &lam)) in pairing.iter().zip(&lambdas).enumerate() {
            for used_for in [MixUse::Point, MixUse::Image, MixUse::Text] {
                log.mixes.push(MixRecord {
                    step,
                    used_for,
                    i,
                    j,
                    lambda: lam,
                    mask: None,
                });
            }
        }
        (m_p, norms_p, m_i, m_t, pairing, lambdas)
    } else {
        (src_p.clone(), None, src_i, src_t, Vec::new(), Vec::new())
    };

    let tau_used = temp.tau();
    let grads: StageGrads = if cfg.literal_eq4 {
        loss_stage1_literal_backward(&m_p, &m_i, &m_t, temp, cfg.loss_terms)?
    } else {
        loss_stage1_backward(&m_p, &m_i, &m_t, temp, cfg.loss_terms)?
    };
    check_finite_loss(grads.loss, 1, step)?;

    let d_src_p = if fm {
        mix_feature_rows_backward(&grads.d_point, &m_p, &norms_p, &pairing, &lambdas)
    } else {
        grads.d_point
    };

    let work: Vec<usize> = (0..n).collect();
    let parts: Vec<EncoderParams> = par_try_map(pool, &work, |&i| {
        encoder::backward(&forwards[i].1, params, d_src_p.row(i), false).map(|(g, _)| g)
    })?;
    let total = accumulate_encoder_grads(parts).expect("nonempty batch");

    Ok(BatchGrads {
        params: total,
        d_rho: grads.d_rho,
        loss: grads.loss,
        tau_used,
    })
}

struct Stage2Batch {
    grads: BatchGrads,
}

/// One stage-2 minibatch: input-level mixing (when enabled), the trainable
/// encoder on mixed clouds, feature-mixed frozen targets, loss, gradients.
#[allow(clippy::too_many_arguments)]
fn stage2_minibatch(
    cfg: &TrainConfig,
    theta2: &EncoderParams,
    temp: &Temperature,
    theta1_feats: &[Vec<f64>],
    data: &TrainInputs,
    batch: &[usize],
    epoch: usize,
    step: u64,
    pool: &rayon::ThreadPool,
    log: &mut StepLog,
) -> Result<Stage2Batch> {
    let n = batch.len();
    let im = cfg.mix_mode.input_level();

    // all randomness drawn sequentially up front so the heavy work can fan
    // out without touching RNG state
    let (pairing, masks, fps_starts) = if im {
        let mut pair_rng = rng::stream(cfg.seed, "pairing", &[2, epoch as u64, step]);
        let pairing = make_pairing(n, &mut pair_rng)?;
        let mut lam_rng = rng::stream(cfg.seed, "lambda", &[2, epoch as u64, step]);
        let mut mask_rng = rng::stream(cfg.seed, "masks", &[2, epoch as u64, step]);
        let mut fps_rng = rng::stream(cfg.seed, "fps", &[2, epoch as u64, step]);
        let mut masks = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        for i in 0..n {
            let lam = sample_lambda(cfg.beta, &mut lam_rng)?;
            masks.push(build_mask(cfg.fps_points, lam, &mut mask_rng)?);
            use rand::Rng;
            let ni = data.dataset[batch[i]].len();
            let nj = data.dataset[batch[pairing[i]]].len();
            starts.push((fps_rng.random_range(0..ni), fps_rng.random_range(0..nj)));
        }
        (pairing, masks, starts)
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    // trainable forward on the (mixed) clouds
    let work: Vec<usize> = (0..n).collect();
    let forwards: Vec<(Vec<f64>, ForwardTape)> = par_try_map(pool, &work, |&i| {
        if im {
            let ci = &data.dataset[batch[i]];
            let cj = &data.dataset[batch[pairing[i]]];
            let sub_i = ci.select(&fps(ci, cfg.fps_points, fps_starts[i].0)?);
            let sub_j = cj.select(&fps(cj, cfg.fps_points, fps_starts[i].1)?);
            let mixed = input_mix(&sub_i, &sub_j, &masks[i])?;
            encoder::forward(&mixed.points, theta2)
        } else {
            encoder::forward(&data.dataset[batch[i]].points, theta2)
        }
    })?;
    let m_m = rows_to_mat(forwards.iter().map(|(f, _)| f.clone()).collect())?;

    // frozen targets, feature-mixed with the realized lambda of the same pair
    let (m_p, m_i, m_t) = if im {
        let realized: Vec<f64> = masks.iter().map(|m| m.realized_lambda()).collect();
        let src_p = rows_to_mat(batch.iter().map(|&idx| theta1_feats[idx].clone()).collect())?;
        let src_i = cache_rows(data.image_cache, data.dataset, batch)?;
        let src_t = cache_rows(data.text_cache, data.dataset, batch)?;
        let (m_p, _) = mix_feature_rows(&src_p, &pairing, &realized, cfg.renormalize_mixed)?;
        let (m_i, _) = mix_feature_rows(&src_i, &pairing, &realized, cfg.renormalize_mixed)?;
        let (m_t, _) = mix_feature_rows(&src_t, &pairing, &realized, cfg.renormalize_mixed)?;
        for i in 0..n {
            let mask = &masks[i];
            log.mixes.push(MixRecord {
                step,
                used_for: MixUse::MixedCloud,
                i,
                j: pairing[i],
                lambda: realized[i],
                mask: Some((mask.n_from_first, mask.len())),
            });
            for used_for in [MixUse::Point, MixUse::Image, MixUse::Text] {
                log.mixes.push(MixRecord {
                    step,
                    used_for,
                    i,
                    j: pairing[i],
                    lambda: realized[i],
                    mask: None,
                });
            }
        }
        (m_p, m_i, m_t)
    } else {
        let src_p = rows_to_mat(batch.iter().map(|&idx| theta1_feats[idx].clone()).collect())?;
        let src_i = cache_rows(data.image_cache, data.dataset, batch)?;
        let src_t = cache_rows(data.text_cache, data.dataset, batch)?;
        (src_p, src_i, src_t)
    };

    let tau_used = temp.tau();
    let grads: StageGrads = if cfg.literal_eq4 {
        loss_stage2_literal_backward(&m_m, &m_p, &m_i, &m_t, temp, cfg.loss_terms)?
    } else {
        loss_stage2_backward(&m_m, &m_p, &m_i, &m_t, temp, cfg.loss_terms)?
    };
    check_finite_loss(grads.loss, 2, step)?;

    // target-side gradients exist in `grads` but the targets are frozen;
    // only the mixed-cloud rows reach the optimizer
    let d_mixed = grads.d_mixed.as_ref().expect("stage-2 gradients");
    let parts: Vec<EncoderParams> = par_try_map(pool, &work, |&i| {
        encoder::backward(&forwards[i].1, theta2, d_mixed.row(i), false).map(|(g, _)| g)
    })?;
    let total = accumulate_encoder_grads(parts).expect("nonempty batch");

    Ok(Stage2Batch {
        grads: BatchGrads {
            params: total,
            d_rho: grads.d_rho,
            loss: grads.loss,
            tau_used,
        },
    })
}

struct OptimizerPair {
    flat: AdamWState,
    rho: AdamWState,
}

impl OptimizerPair {
    fn new(param_count: usize) -> Self {
        OptimizerPair {
            flat: AdamWState::new(param_count),
            rho: AdamWState::new(1),
        }
    }

    fn apply(
        &mut self,
        params: &mut EncoderParams,
        temp: &mut Temperature,
        batch: &BatchGrads,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let mut flat = params.flatten();
        adamw_step(&mut flat, &batch.params.flatten(), &mut self.flat, lr, weight_decay)?;
        params.assign_from_flat(&flat)?;
        let mut rho = [temp.rho];
        adamw_step(&mut rho, &[batch.d_rho], &mut self.rho, lr, 0.0)?;
        temp.rho = rho[0];
        temp.clamp_rho();
        Ok(())
    }
}

/// Stage 1: train the point encoder against the frozen caches.
pub fn train_stage1(cfg: &TrainConfig, data: &TrainInputs) -> Result<StageOutput> {
    validate_inputs(cfg, data)?;
    let pool = make_pool(cfg.threads)?;
    let mut params = encoder::init_params(stage_init_seed(cfg.seed, 1), cfg.hidden, cfg.dim)?;
    let mut temp = Temperature::from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)?;
    let mut opt = OptimizerPair::new(params.num_params());
    let mut log = StepLog::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs_stage1 {
        let lr = lr_at(epoch, cfg.lr0, cfg.lr_gamma);
        let order = shuffled_indices(cfg.seed, 1, epoch, data.dataset.len());
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                break;
            }
            step += 1;
            let grads = stage1_minibatch(cfg, &params, &temp, data, batch, epoch, step, &pool, &mut log)?;
            opt.apply(&mut params, &mut temp, &grads, lr, cfg.weight_decay)?;
            log.steps.push(StepRecord {
                epoch,
                step,
                stage: 1,
                loss: grads.loss,
                tau: grads.tau_used,
                lr,
            });
        }
    }

    Ok(StageOutput {
        params,
        temperature: temp,
        log,
        steps: step,
    })
}

/// Encode every dataset cloud with a frozen encoder.
pub fn encode_dataset_features(
    params: &EncoderParams,
    dataset: &[PointCloud],
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let pool = make_pool(threads)?;
    par_try_map(&pool, dataset, |pc| encoder::forward_feature(&pc.points, params))
}

/// Stage 2: train a fresh encoder on mixed clouds against frozen targets.
/// `theta1` stays untouched (immutably borrowed) for the whole run.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &TrainInputs,
    theta1: &EncoderParams,
) -> Result<StageOutput> {
    validate_inputs(cfg, data)?;
    if theta1.hidden() != cfg.hidden || theta1.dim() != cfg.dim {
        return Err(Error::shape(
            format!("stage-1 encoder h={}, d={}", cfg.hidden, cfg.dim),
            format!("h={}, d={}", theta1.hidden(), theta1.dim()),
        ));
    }
    let pool = make_pool(cfg.threads)?;
    // theta1 is frozen, so its features are constants of the whole stage
    let theta1_feats = par_try_map(&pool, data.dataset, |pc| {
        encoder::forward_feature(&pc.points, theta1)
    })?;

    let mut params = encoder::init_params(stage_init_seed(cfg.seed, 2), cfg.hidden, cfg.dim)?;
    let mut temp = Temperature::from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)?;
    let mut opt = OptimizerPair::new(params.num_params());
    let mut log = StepLog::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs_stage2 {
        let lr = lr_at(epoch, cfg.lr0, cfg.lr_gamma);
        let order = shuffled_indices(cfg.seed, 2, epoch, data.dataset.len());
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                break;
            }
            step += 1;
            let out = stage2_minibatch(
                cfg, &params, &temp, &theta1_feats, data, batch, epoch, step, &pool, &mut log,
            )?;
            opt.apply(&mut params, &mut temp, &out.grads, lr, cfg.weight_decay)?;
            log.steps.push(StepRecord {
                epoch,
                step,
                stage: 2,
                loss: out.grads.loss,
                tau: out.grads.tau_used,
                lr,
            });
        }
    }

    Ok(StageOutput {
        params,
        temperature: temp,
        log,
        steps: step,
    })
}

/// One-stage ablation: both encoders update every batch for the combined
/// epoch budget. The stage-2 targets use the live (current-batch) theta1
/// features, detached: no gradient flows from the stage-2 loss into theta1.
pub fn train_one_stage(cfg: &TrainConfig, data: &TrainInputs) -> Result<PipelineOutput> {
    validate_inputs(cfg, data)?;
    let pool = make_pool(cfg.threads)?;
    let mut params1 = encoder::init_params(stage_init_seed(cfg.seed, 1), cfg.hidden, cfg.dim)?;
    let mut params2 = encoder::init_params(stage_init_seed(cfg.seed, 2), cfg.hidden, cfg.dim)?;
    let mut temp1 = Temperature::from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)?;
    let mut temp2 = Temperature::from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)?;
    let mut opt1 = OptimizerPair::new(params1.num_params());
    let mut opt2 = OptimizerPair::new(params2.num_params());
    let mut log1 = StepLog::new();
    let mut log2 = StepLog::new();
    let mut step: u64 = 0;

    let epochs = cfg.epochs_stage1 + cfg.epochs_stage2;
    for epoch in 0..epochs {
        let lr = lr_at(epoch, cfg.lr0, cfg.lr_gamma);
        let order = shuffled_indices(cfg.seed, 1, epoch, data.dataset.len());
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                break;
            }
            // both losses see the same pre-update theta1 snapshot
            step += 1;
            let g1 = stage1_minibatch(cfg, &params1, &temp1, data, batch, epoch, step, &pool, &mut log1)?;
            let live_feats: Vec<Vec<f64>> = {
                // live targets from the current theta1, full clouds
                let mut feats = vec![Vec::new(); data.dataset.len()];
                let batch_feats = par_try_map(&pool, batch, |&idx| {
                    encoder::forward_feature(&data.dataset[idx].points, &params1)
                })?;
                for (&idx, f) in batch.iter().zip(batch_feats) {
                    feats[idx] = f;
                }
                feats
            };
            let g2 = stage2_minibatch(
                cfg, &params2, &temp2, &live_feats, data, batch, epoch, step, &pool, &mut log2,
            )?;
            opt1.apply(&mut params1, &mut temp1, &g1, lr, cfg.weight_decay)?;
            opt2.apply(&mut params2, &mut temp2, &g2.grads, lr, cfg.weight_decay)?;
            log1.steps.push(StepRecord {
                epoch,
                step,
                stage: 1,
                loss: g1.loss,
                tau: g1.tau_used,
                lr,
            });
            log2.steps.push(StepRecord {
                epoch,
                step,
                stage: 2,
                loss: g2.grads.loss,
                tau: g2.grads.tau_used,
                lr,
            });
        }
    }

    Ok(PipelineOutput {
        stage1: StageOutput {
            params: params1,
            temperature: temp1,
            log: log1,
            steps: step,
        },
        stage2: StageOutput {
            params: params2,
            temperature: temp2,
            log: log2,
            steps: step,
        },
    })
}

/// Loss and exact gradients of one stage-1 batch under the fixed RNG draws
/// of (epoch 0, step 1). The gradient verification harness differentiates
/// exactly the production minibatch path through this wrapper.
pub fn stage1_loss_and_grads(
    cfg: &TrainConfig,
    params: &EncoderParams,
    temp: &Temperature,
    data: &TrainInputs,
    batch: &[usize],
) -> Result<(f64, EncoderParams, f64)> {
    let pool = make_pool(1)?;
    let mut scratch = StepLog::new();
    let g = stage1_minibatch(cfg, params, temp, data, batch, 0, 1, &pool, &mut scratch)?;
    Ok((g.loss, g.params, g.d_rho))
}

/// Stage-2 counterpart of [`stage1_loss_and_grads`].
pub fn stage2_loss_and_grads(
    cfg: &TrainConfig,
    theta2: &EncoderParams,
    temp: &Temperature,
    theta1_feats: &[Vec<f64>],
    data: &TrainInputs,
    batch: &[usize],
) -> Result<(f64, EncoderParams, f64)> {
    let pool = make_pool(1)?;
    let mut scratch = StepLog::new();
    let out = stage2_minibatch(
        cfg, theta2, temp, theta1_feats, data, batch, 0, 1, &pool, &mut scratch,
    )?;
    Ok((out.grads.loss, out.grads.params, out.grads.d_rho))
}

/// Run the configured pipeline (two-stage or one-stage).
pub fn train_pipeline(cfg: &TrainConfig, data: &TrainInputs) -> Result<PipelineOutput> {
    match cfg.stage_mode {
        crate::config::StageMode::Two => {
            let stage1 = train_stage1(cfg, data)?;
            let stage2 = train_stage2(cfg, data, &stage1.params)?;
            Ok(PipelineOutput { stage1, stage2 })
        }
        crate::config::StageMode::One => train_one_stage(cfg, data),
    }
}
