//! Finite-difference verification of every analytic gradient path.
//!
//! The oracle side is central differences over loss evaluations that only
//! use the forward code, so it stays independent of the backward
//! implementations it checks. Comparison is relative above a magnitude
//! floor and absolute below it (finite differences bottom out near 1e-10
//! for O(1) losses, so tiny true gradients cannot be compared relatively).

use std::time::Instant;

use crate::config::{MixMode, TrainConfig};
use crate::dataset::build_split;
use crate::encoder::{self, EncoderParams};
use crate::error::Result;
use crate::frozen::{build_model, precache, EmbeddingCache, Modality};
use crate::linalg;
use crate::losses::Temperature;
use crate::rng;
use crate::trainer::{stage1_loss_and_grads, stage2_loss_and_grads, TrainInputs};

pub const FD_STEP: f64 = 1e-6;

/// He-init weights with small random biases. Zero biases put every dead
/// point exactly on the ReLU kink (z1 = 0 makes a2 = b2 = 0), where central
/// differences straddle the corner; generic biases make that measure-zero.
fn generic_params(seed: u64, hidden: usize, dim: usize) -> Result<EncoderParams> {
    use rand_distr::{Distribution, StandardNormal};
    let mut params = encoder::init_params(seed, hidden, dim)?;
    let mut stream = rng::stream(seed, "bias-jitter", &[]);
    for b in [&mut params.b1, &mut params.b2, &mut params.b3] {
        for v in b.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut stream);
            *v = 0.05 * g;
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy)]
pub struct GradTolerance {
    /// Relative tolerance applied where max(|a|, |b|) >= rel_floor.
    pub rel_tol: f64,
    pub rel_floor: f64,
    /// Absolute tolerance for coordinates below the floor.
    pub abs_tol: f64,
}

pub const ENCODER_TOL: GradTolerance = GradTolerance {
    rel_tol: 1e-6,
    rel_floor: 1e-3,
    abs_tol: 1e-9,
};

pub const E2E_TOL: GradTolerance = GradTolerance {
    rel_tol: 1e-4,
    rel_floor: 1e-4,
    abs_tol: 1e-9,
};

#[derive(Debug, Clone)]
pub struct GradCompare {
    pub max_rel: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

/// Compare analytic gradients against a finite-difference oracle.
pub fn compare_flat_grads<F: Fn(usize) -> String>(
    analytic: &[f64],
    fd: &[f64],
    tol: &GradTolerance,
    locate: F,
) -> GradCompare {
    let mut max_rel = 0.0_f64;
    let mut worst = String::from("none");
    let mut failures = Vec::new();
    for k in 0..analytic.len() {
        let (a, b) = (analytic[k], fd[k]);
        let diff = (a - b).abs();
        let mag = a.abs().max(b.abs());
        if mag >= tol.rel_floor {
            let rel = diff / mag;
            if rel > max_rel {
                max_rel = rel;
                worst = locate(k);
            }
            if rel > tol.rel_tol {
                failures.push(format!(
                    "{}: analytic {a:.12e} vs fd {b:.12e} (rel {rel:.3e})",
                    locate(k)
                ));
            }
        } else if diff > tol.abs_tol {
            failures.push(format!(
                "{}: analytic {a:.12e} vs fd {b:.12e} (abs {diff:.3e})",
                locate(k)
            ));
        }
    }
    GradCompare { max_rel, worst, failures }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub coords_checked: usize,
    pub max_rel: f64,
    pub worst: String,
    pub failures: Vec<String>,
    pub elapsed_secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Encoder-only suite: dL/dparams of L = upstream . feature for random
/// clouds, parameters, and unit upstream vectors.
pub fn encoder_grad_suite(num_cases: usize, master_seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let (hidden, dim, n_points) = (8usize, 8usize, 16usize);
    let mut max_rel = 0.0_f64;
    let mut worst = String::from("none");
    let mut failures = Vec::new();
    let mut coords = 0usize;

    for case in 0..num_cases {
        let case_seed = rng::sub_seed(master_seed, "gradcheck-encoder", &[case as u64]);
        let pc = crate::geometry::gen_shape((case % 8) as u16, n_points, case_seed, 0.02)?;
        let params = generic_params(case_seed ^ 0x5a5a, hidden, dim)?;
        let upstream = {
            use rand_distr::{Distribution, StandardNormal};
            let mut stream = rng::stream(case_seed, "upstream", &[]);
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut stream)).collect();
            linalg::normalize(&v)?
        };

        let (_, tape) = encoder::forward(&pc.points, &params)?;
        let (grads, _) = encoder::backward(&tape, &params, &upstream, false)?;
        let analytic = grads.flatten();

        let flat = params.flatten();
        let mut fd = vec![0.0; flat.len()];
        let mut scratch = params.clone();
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += FD_STEP;
            scratch.assign_from_flat(&plus)?;
            let lp = linalg::dot(&upstream, &encoder::forward(&pc.points, &scratch)?.0);
            let mut minus = flat.clone();
            minus[k] -= FD_STEP;
            scratch.assign_from_flat(&minus)?;
            let lm = linalg::dot(&upstream, &encoder::forward(&pc.points, &scratch)?.0);
            fd[k] = (lp - lm) / (2.0 * FD_STEP);
        }

        let cmp = compare_flat_grads(&analytic, &fd, &ENCODER_TOL, |k| {
            format!("case {case}: {}", params.locate(k))
        });
        coords += flat.len();
        if cmp.max_rel > max_rel {
            max_rel = cmp.max_rel;
            worst = cmp.worst.clone();
        }
        failures.extend(cmp.failures);
    }

    Ok(SuiteReport {
        name: "encoder".to_string(),
        cases: num_cases,
        coords_checked: coords,
        max_rel,
        worst,
        failures,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

struct E2eFixture {
    cfg: TrainConfig,
    dataset: Vec<crate::geometry::PointCloud>,
    text: EmbeddingCache,
    image: EmbeddingCache,
    theta1_feats: Vec<Vec<f64>>,
}

fn e2e_fixture(seed: u64, mix_mode: MixMode) -> Result<E2eFixture> {
    let cfg = TrainConfig {
        seed,
        num_classes: 4,
        points_per_cloud: 16,
        fps_points: 16,
        train_size: 4,
        eval_size: 0,
        dim: 8,
        hidden: 8,
        batch_size: 4,
        jitter: 0.02,
        mix_mode,
        ..TrainConfig::default()
    };
    let dataset = build_split(
        cfg.seed,
        cfg.num_classes,
        cfg.points_per_cloud,
        cfg.jitter,
        cfg.train_size,
        0,
    )?;
    let model = build_model(cfg.seed, cfg.num_classes, cfg.dim, cfg.sigma_image)?;
    let pairs: Vec<(u64, u16)> = dataset.iter().map(|pc| (pc.id, pc.class_id)).collect();
    let seeds: Vec<u64> = dataset
        .iter()
        .map(|pc| rng::sub_seed(cfg.seed, "image-instance", &[pc.id]))
        .collect();
    let text = precache(&pairs, &model, Modality::Text, &[])?;
    let image = precache(&pairs, &model, Modality::Image, &seeds)?;

    let theta1 = encoder::init_params(rng::sub_seed(seed, "gradcheck-theta1", &[]), cfg.hidden, cfg.dim)?;
    let theta1_feats = dataset
        .iter()
        .map(|pc| encoder::forward_feature(&pc.points, &theta1))
        .collect::<Result<Vec<_>>>()?;
    Ok(E2eFixture {
        cfg,
        dataset,
        text,
        image,
        theta1_feats,
    })
}

/// End-to-end suite: dL/dparams and dL/drho of the full stage losses
/// (mixing chain included) against central differences.
pub fn loss_grad_suite(master_seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut max_rel = 0.0_f64;
    let mut worst = String::from("none");
    let mut failures = Vec::new();
    let mut coords = 0usize;
    let mut cases = 0usize;

    let modes = [
        (1u8, MixMode::None),
        (1, MixMode::Fm),
        (2, MixMode::None),
        (2, MixMode::Im),
        (2, MixMode::FmIm),
    ];
    for (case_idx, &(stage, mix_mode)) in modes.iter().enumerate() {
        let fixture = e2e_fixture(
            rng::sub_seed(master_seed, "gradcheck-e2e", &[case_idx as u64]),
            mix_mode,
        )?;
        let cfg = &fixture.cfg;
        let data = TrainInputs {
            dataset: &fixture.dataset,
            text_cache: &fixture.text,
            image_cache: &fixture.image,
        };
        let batch: Vec<usize> = (0..cfg.batch_size).collect();
        let params = generic_params(
            rng::sub_seed(cfg.seed, "gradcheck-trainable", &[stage as u64]),
            cfg.hidden,
            cfg.dim,
        )?;
        let temp = Temperature::from_tau(cfg.tau_init, cfg.tau_min, cfg.tau_max)?;

        let eval_loss = |p: &EncoderParams, t: &Temperature| -> Result<f64> {
            Ok(match stage {
                1 => stage1_loss_and_grads(cfg, p, t, &data, &batch)?.0,
                _ => stage2_loss_and_grads(cfg, p, t, &fixture.theta1_feats, &data, &batch)?.0,
            })
        };
        let (_, grads, d_rho) = match stage {
            1 => stage1_loss_and_grads(cfg, &params, &temp, &data, &batch)?,
            _ => stage2_loss_and_grads(cfg, &params, &temp, &fixture.theta1_feats, &data, &batch)?,
        };
        let analytic = grads.flatten();

        let flat = params.flatten();
        let mut fd = vec![0.0; flat.len()];
        let mut scratch = params.clone();
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += FD_STEP;
            scratch.assign_from_flat(&plus)?;
            let lp = eval_loss(&scratch, &temp)?;
            let mut minus = flat.clone();
            minus[k] -= FD_STEP;
            scratch.assign_from_flat(&minus)?;
            let lm = eval_loss(&scratch, &temp)?;
            fd[k] = (lp - lm) / (2.0 * FD_STEP);
        }

        let label = format!("stage{stage}/{}", mix_mode.as_str());
        let cmp = compare_flat_grads(&analytic, &fd, &E2E_TOL, |k| {
            format!("{label}: {}", params.locate(k))
        });
        coords += flat.len();
        if cmp.max_rel > max_rel {
            max_rel = cmp.max_rel;
            worst = cmp.worst.clone();
        }
        failures.extend(cmp.failures);

        // rho through tau = exp(rho)
        let mut tp = temp.clone();
        tp.rho += FD_STEP;
        let mut tm = temp.clone();
        tm.rho -= FD_STEP;
        let fd_rho = (eval_loss(&params, &tp)? - eval_loss(&params, &tm)?) / (2.0 * FD_STEP);
        let cmp_rho = compare_flat_grads(&[d_rho], &[fd_rho], &E2E_TOL, |_| format!("{label}: rho"));
        coords += 1;
        if cmp_rho.max_rel > max_rel {
            max_rel = cmp_rho.max_rel;
            worst = cmp_rho.worst.clone();
        }
        failures.extend(cmp_rho.failures);
        cases += 1;
    }

    Ok(SuiteReport {
        name: "end-to-end".to_string(),
        cases,
        coords_checked: coords,
        max_rel,
        worst,
        failures,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteReport>,
    pub elapsed_secs: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{}: {} cases, {} coordinates, max rel err {:.3e} (worst at {}), {} failures, {:.2}s -> {}\n",
                s.name,
                s.cases,
                s.coords_checked,
                s.max_rel,
                s.worst,
                s.failures.len(),
                s.elapsed_secs,
                if s.passed() { "PASS" } else { "FAIL" },
            ));
            for f in s.failures.iter().take(10) {
                out.push_str(&format!("  {f}\n"));
            }
        }
        out.push_str(&format!(
            "gradcheck: {} in {:.2}s\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed_secs
        ));
        out
    }
}

/// The full verification gate: encoder suite plus end-to-end loss suites.
pub fn run_gradcheck(encoder_cases: usize, master_seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let suites = vec![
        encoder_grad_suite(encoder_cases, master_seed)?,
        loss_grad_suite(master_seed)?,
    ];
    Ok(GradcheckReport {
        suites,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
