//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Heavy training fixtures are shared and built once.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::sync::OnceLock;
use std::time::Instant;

use mmx_core::config::{MixMode, TrainConfig};
use mmx_core::dataset::{build_split, decode_mmpd, encode_mmpd};
use mmx_core::encoder;
use mmx_core::error::Error;
use mmx_core::eval::{linear_probe, retrieval, zero_shot};
use mmx_core::frozen::{
    build_model, decode_cache, encode_cache, precache, EmbeddingCache, Modality,
};
use mmx_core::geometry::{fps, gen_shape, normalize_unit_sphere, PointCloud};
use mmx_core::gradcheck::{run_gradcheck, E2E_TOL, ENCODER_TOL};
use mmx_core::linalg::{self, Mat};
use mmx_core::losses::{info_nce_dir, loss_stage1, loss_stage2};
use mmx_core::mixing::{build_mask, input_mix, sample_lambda};
use mmx_core::rng;
use mmx_core::trainer::{
    encode_checkpoint, encode_dataset_features, train_pipeline, PipelineOutput, TrainInputs,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------------------
// shared sanity-scale fixture
// ---------------------------------------------------------------------------

fn sanity_config(seed: u64, mix_mode: MixMode) -> TrainConfig {
    TrainConfig {
        seed,
        num_classes: 8,
        points_per_cloud: 256,
        fps_points: 256,
        train_size: 800,
        eval_size: 200,
        dim: 32,
        hidden: 64,
        batch_size: 50,
        epochs_stage1: 30,
        epochs_stage2: 30,
        mix_mode,
        ..TrainConfig::default()
    }
}

struct SanityData {
    train: Vec<PointCloud>,
    eval: Vec<PointCloud>,
    text: EmbeddingCache,
    image: EmbeddingCache,
    anchors: Mat,
}

fn sanity_data(cfg: &TrainConfig) -> SanityData {
    let train = build_split(
        cfg.seed,
        cfg.num_classes,
        cfg.points_per_cloud,
        cfg.jitter,
        cfg.train_size,
        0,
    )
    .unwrap();
    let eval = build_split(
        cfg.seed,
        cfg.num_classes,
        cfg.points_per_cloud,
        cfg.jitter,
        cfg.eval_size,
        cfg.train_size as u64,
    )
    .unwrap();
    let model = build_model(cfg.seed, cfg.num_classes, cfg.dim, cfg.sigma_image).unwrap();
    let pairs: Vec<(u64, u16)> = train.iter().map(|pc| (pc.id, pc.class_id)).collect();
    let seeds: Vec<u64> = train
        .iter()
        .map(|pc| rng::sub_seed(cfg.seed, "image-instance", &[pc.id]))
        .collect();
    let text = precache(&pairs, &model, Modality::Text, &[]).unwrap();
    let image = precache(&pairs, &model, Modality::Image, &seeds).unwrap();
    let anchors = Mat::from_rows(model.anchors.clone()).unwrap();
    SanityData {
        train,
        eval,
        text,
        image,
        anchors,
    }
}

struct TrainedRun {
    seed: u64,
    mix_mode: MixMode,
    zero_shot_top1: f64,
    elapsed_secs: f64,
    pipeline: PipelineOutput,
}

struct SanityFixture {
    data: SanityData,
    runs: Vec<TrainedRun>,
}

impl SanityFixture {
    fn run(&self, seed: u64, mode: MixMode) -> &TrainedRun {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.mix_mode == mode)
            .expect("run present")
    }
}

fn eval_zero_shot_top1(data: &SanityData, pipeline: &PipelineOutput, cfg: &TrainConfig) -> f64 {
    let feats = Mat::from_rows(
        encode_dataset_features(&pipeline.stage2.params, &data.eval, cfg.threads).unwrap(),
    )
    .unwrap();
    let labels: Vec<u16> = data.eval.iter().map(|pc| pc.class_id).collect();
    let ids: Vec<u64> = data.eval.iter().map(|pc| pc.id).collect();
    let report = zero_shot(&feats, &labels, &ids, &data.anchors, &[1, 3, 5]).unwrap();
    report.overall_at(1).unwrap()
}

static SANITY: OnceLock<SanityFixture> = OnceLock::new();

fn sanity() -> &'static SanityFixture {
    SANITY.get_or_init(|| {
        let base_cfg = sanity_config(42, MixMode::FmIm);
        let data = sanity_data(&base_cfg);
        let mut runs = Vec::new();
        for seed in [42u64, 43, 44] {
            for mode in [MixMode::FmIm, MixMode::None] {
                let cfg = sanity_config(seed, mode);
                // the generated data and caches are seed-42 artifacts on
                // purpose: the training seed varies shuffling, pairing,
                // masks, and init, over a fixed dataset
                let inputs = TrainInputs {
                    dataset: &data.train,
                    text_cache: &data.text,
                    image_cache: &data.image,
                };
                let start = Instant::now();
                let pipeline = train_pipeline(&cfg, &inputs).unwrap();
                let elapsed_secs = start.elapsed().as_secs_f64();
                let zero_shot_top1 = eval_zero_shot_top1(&data, &pipeline, &cfg);
                eprintln!(
                    "[sanity fixture] seed {seed} mode {} trained in {elapsed_secs:.1}s, zero-shot top-1 {zero_shot_top1:.4}",
                    mode.as_str(),
                );
                runs.push(TrainedRun {
                    seed,
                    mix_mode: mode,
                    zero_shot_top1,
                    elapsed_secs,
                    pipeline,
                });
            }
        }
        SanityFixture { data, runs }
    })
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

#[test]
fn acceptance_gradient_correctness() {
    let report = run_gradcheck(50, 42).unwrap();
    let encoder_suite = &report.suites[0];
    let e2e_suite = &report.suites[1];
    let pass = report.passed()
        && encoder_suite.max_rel <= ENCODER_TOL.rel_tol
        && e2e_suite.max_rel <= E2E_TOL.rel_tol
        && report.elapsed_secs < 60.0;
    verdict(
        "gradient-correctness",
        pass,
        &format!(
            "encoder max rel {:.3e} (tol 1e-6), end-to-end max rel {:.3e} (tol 1e-4), {:.1}s < 60s",
            encoder_suite.max_rel, e2e_suite.max_rel, report.elapsed_secs
        ),
    );
}

#[test]
fn acceptance_loss_oracles() {
    // naive nested-loop reference, written independently of the library path
    fn naive(pairs: &[(&Mat, &Mat)], tau: f64) -> f64 {
        let n = pairs[0].0.rows;
        let mut total = 0.0;
        for (x, y) in pairs {
            for i in 0..n {
                let mut den = 0.0;
                for k in 0..n {
                    den += (linalg::dot(x.row(i), y.row(k)) / tau).exp();
                }
                let num = (linalg::dot(x.row(i), y.row(i)) / tau).exp();
                total -= (num / den).ln();
            }
        }
        total / (pairs.len() as f64 * n as f64)
    }
    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
        let rows = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                linalg::normalize(&v).unwrap()
            })
            .collect();
        Mat::from_rows(rows).unwrap()
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut max_diff = 0.0_f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=16usize);
        let d = rng.random_range(4..=16usize);
        let tau = rng.random_range(0.05..=3.0);
        let mp = unit_rows(n, d, &mut rng);
        let mi = unit_rows(n, d, &mut rng);
        let mt = unit_rows(n, d, &mut rng);
        let mm = unit_rows(n, d, &mut rng);
        let d1 = (loss_stage1(&mp, &mi, &mt, tau).unwrap()
            - naive(&[(&mp, &mi), (&mi, &mp), (&mp, &mt), (&mt, &mp)], tau))
        .abs();
        let d2 = (loss_stage2(&mm, &mp, &mi, &mt, tau).unwrap()
            - naive(
                &[(&mm, &mi), (&mi, &mm), (&mm, &mt), (&mt, &mm), (&mm, &mp), (&mp, &mm)],
                tau,
            ))
        .abs();
        max_diff = max_diff.max(d1).max(d2);
    }

    let mut max_uniform_err = 0.0_f64;
    for n in [2usize, 3, 8, 16] {
        let s = Mat {
            rows: n,
            cols: n,
            data: vec![0.23; n * n],
        };
        max_uniform_err = max_uniform_err
            .max((info_nce_dir(&s, 0.07).unwrap() - (n as f64).ln()).abs());
    }

    let m = {
        let mut m = Mat::zeros(4, 8);
        for i in 0..4 {
            *m.at_mut(i, i) = 1.0;
        }
        m
    };
    let tau_limit_err = (loss_stage1(&m, &m, &m, 1e6).unwrap() - 4.0_f64.ln()).abs();

    let pass = max_diff <= 1e-10 && max_uniform_err <= 1e-12 && tau_limit_err <= 1e-3;
    verdict(
        "loss-oracles",
        pass,
        &format!(
            "oracle diff {max_diff:.3e} <= 1e-10, uniform err {max_uniform_err:.3e} <= 1e-12, tau-limit err {tau_limit_err:.3e} <= 1e-3"
        ),
    );
}

#[test]
fn acceptance_fps_oracle() {
    fn oracle(pc: &PointCloud, m: usize, start: usize) -> Vec<usize> {
        let d2 = |a: &[f64; 3], b: &[f64; 3]| {
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
        };
        let mut selected = vec![start];
        while selected.len() < m {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for k in 0..pc.points.len() {
                if selected.contains(&k) {
                    continue;
                }
                let dist = selected
                    .iter()
                    .map(|&s| d2(&pc.points[k], &pc.points[s]))
                    .fold(f64::INFINITY, f64::min);
                if dist > best_d {
                    best_d = dist;
                    best = k;
                }
            }
            selected.push(best);
        }
        selected
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut mismatches = 0usize;
    for case in 0..500u64 {
        let n = rng.random_range(2..=64usize);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let pc = PointCloud::new(case, 0, points).unwrap();
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        if fps(&pc, m, start).unwrap() != oracle(&pc, m, start) {
            mismatches += 1;
        }
    }
    verdict(
        "fps-oracle",
        mismatches == 0,
        &format!("{mismatches}/500 mismatches against the brute-force greedy oracle"),
    );
}

#[test]
fn acceptance_mixing_invariants() {
    let mut rng = rng::stream(7, "acceptance-mixing", &[]);
    let mut bad = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..=256usize);
        let lambda = rng.random::<f64>();
        let mask = build_mask(n, lambda, &mut rng).unwrap();
        let expected_ones = ((lambda * n as f64).floor() as usize).min(n);
        if mask.n_from_first != expected_ones {
            bad += 1;
            continue;
        }
        if mask.realized_lambda() != mask.n_from_first as f64 / n as f64 {
            bad += 1;
            continue;
        }
        let p1 = PointCloud::new(
            1,
            0,
            (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap();
        let p2 = PointCloud::new(
            2,
            1,
            (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap();
        let mixed = input_mix(&p1, &p2, &mask).unwrap();
        let mut from_first = 0usize;
        let mut sourced = true;
        for k in 0..n {
            if mask.s[k] {
                sourced &= mixed.points[k] == p1.points[k];
                from_first += 1;
            } else {
                sourced &= mixed.points[k] == p2.points[k];
            }
        }
        if !sourced || from_first != mask.n_from_first {
            bad += 1;
        }
    }

    // shared (i, j, lambda) across all modality records in every logged step
    let cfg = TrainConfig {
        seed: 5,
        num_classes: 4,
        points_per_cloud: 32,
        fps_points: 24,
        train_size: 16,
        eval_size: 0,
        dim: 8,
        hidden: 8,
        batch_size: 4,
        epochs_stage1: 2,
        epochs_stage2: 2,
        ..TrainConfig::default()
    };
    let data = sanity_data_small(&cfg);
    let out = train_pipeline(
        &cfg,
        &TrainInputs {
            dataset: &data.0,
            text_cache: &data.1,
            image_cache: &data.2,
        },
    )
    .unwrap();
    let shared1 = out.stage1.log.check_shared_pairs();
    let shared2 = out.stage2.log.check_shared_pairs();
    let groups_ok = shared1.is_ok() && shared2.is_ok();
    let s2_records = out.stage2.log.mixes.len();

    let pass = bad == 0 && groups_ok && s2_records > 0;
    verdict(
        "mixing-invariants",
        pass,
        &format!(
            "{bad}/1000 mask/splice violations, shared-pair contract stage1 {:?} stage2 {:?}",
            shared1.map(|g| format!("{g} groups")),
            shared2.map(|g| format!("{g} groups")),
        ),
    );
}

fn sanity_data_small(cfg: &TrainConfig) -> (Vec<PointCloud>, EmbeddingCache, EmbeddingCache) {
    let dataset = build_split(
        cfg.seed,
        cfg.num_classes,
        cfg.points_per_cloud,
        cfg.jitter,
        cfg.train_size,
        0,
    )
    .unwrap();
    let model = build_model(cfg.seed, cfg.num_classes, cfg.dim, cfg.sigma_image).unwrap();
    let pairs: Vec<(u64, u16)> = dataset.iter().map(|pc| (pc.id, pc.class_id)).collect();
    let seeds: Vec<u64> = dataset
        .iter()
        .map(|pc| rng::sub_seed(cfg.seed, "image-instance", &[pc.id]))
        .collect();
    let text = precache(&pairs, &model, Modality::Text, &[]).unwrap();
    let image = precache(&pairs, &model, Modality::Image, &seeds).unwrap();
    (dataset, text, image)
}

#[test]
fn acceptance_learning_sanity() {
    let fixture = sanity();
    let full = fixture.run(42, MixMode::FmIm);

    // (a) full pipeline reaches 0.90 zero-shot top-1 within the time budget
    let a_pass = full.zero_shot_top1 >= 0.90 && full.elapsed_secs <= 600.0;

    // (b) mixing never hurts beyond tolerance, and the baseline itself works
    let mut b_pass = true;
    let mut b_detail = String::new();
    for seed in [42u64, 43, 44] {
        let mixed = fixture.run(seed, MixMode::FmIm);
        let baseline = fixture.run(seed, MixMode::None);
        b_pass &= mixed.zero_shot_top1 >= baseline.zero_shot_top1 - 0.02;
        b_pass &= baseline.zero_shot_top1 >= 0.80;
        b_detail.push_str(&format!(
            "seed {seed}: fm_im {:.4} vs none {:.4}; ",
            mixed.zero_shot_top1, baseline.zero_shot_top1
        ));
    }

    verdict(
        "learning-sanity",
        a_pass && b_pass,
        &format!(
            "full top-1 {:.4} >= 0.90 in {:.1}s <= 600s; {b_detail}",
            full.zero_shot_top1, full.elapsed_secs
        ),
    );
}

#[test]
fn acceptance_linear_probe() {
    let fixture = sanity();
    let full = fixture.run(42, MixMode::FmIm);
    let cfg = sanity_config(42, MixMode::FmIm);

    let train_feats = Mat::from_rows(
        encode_dataset_features(&full.pipeline.stage2.params, &fixture.data.train, 1).unwrap(),
    )
    .unwrap();
    let test_feats = Mat::from_rows(
        encode_dataset_features(&full.pipeline.stage2.params, &fixture.data.eval, 1).unwrap(),
    )
    .unwrap();
    let train_labels: Vec<u16> = fixture.data.train.iter().map(|pc| pc.class_id).collect();
    let test_labels: Vec<u16> = fixture.data.eval.iter().map(|pc| pc.class_id).collect();
    let test_ids: Vec<u64> = fixture.data.eval.iter().map(|pc| pc.id).collect();

    let mut accs = Vec::new();
    for layers in 1..=3usize {
        let outcome = linear_probe(
            &train_feats,
            &train_labels,
            &test_feats,
            &test_labels,
            &test_ids,
            cfg.num_classes,
            layers,
            300,
            1e-2,
            rng::sub_seed(cfg.seed, "probe", &[layers as u64]),
            &[1, 3, 5],
        )
        .unwrap();
        accs.push(outcome.report.overall_at(1).unwrap());
    }

    let one_layer = accs[0];
    let pass = one_layer >= full.zero_shot_top1 - 0.05 && one_layer >= 0.90;
    verdict(
        "linear-probe",
        pass,
        &format!(
            "1-layer {one_layer:.4} (zero-shot {:.4}), 2-layer {:.4}, 3-layer {:.4}",
            full.zero_shot_top1, accs[1], accs[2]
        ),
    );
}

#[test]
fn acceptance_retrieval() {
    let fixture = sanity();
    let full = fixture.run(42, MixMode::FmIm);

    let gallery = Mat::from_rows(
        encode_dataset_features(&full.pipeline.stage2.params, &fixture.data.eval, 1).unwrap(),
    )
    .unwrap();
    let labels: Vec<u16> = fixture.data.eval.iter().map(|pc| pc.class_id).collect();
    let ids: Vec<u64> = fixture.data.eval.iter().map(|pc| pc.id).collect();

    // text -> PC: one anchor query per class
    let q_labels: Vec<u16> = (0..8).collect();
    let q_ids: Vec<u64> = (0..8).map(|c| u64::MAX - c).collect();
    let text_report = retrieval(
        &fixture.data.anchors,
        &q_labels,
        &q_ids,
        &gallery,
        &labels,
        &ids,
        5,
        false,
    )
    .unwrap();
    let text_r1 = text_report.overall_at(1).unwrap();

    // PC -> PC with self-exclusion
    let pc_report = retrieval(&gallery, &labels, &ids, &gallery, &labels, &ids, 5, true).unwrap();
    let pc_r1 = pc_report.overall_at(1).unwrap();

    // exhaustive sort oracle over the whole gallery
    let mut oracle_ok = true;
    for (q, sample) in pc_report.samples.iter().enumerate() {
        let mut pairs: Vec<(u64, f64)> = (0..gallery.rows)
            .filter(|&g| ids[g] != ids[q])
            .map(|g| (ids[g], linalg::dot(gallery.row(q), gallery.row(g))))
            .collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<u64> = pairs.iter().take(5).map(|p| p.0).collect();
        oracle_ok &= sample.top_ids.as_ref().unwrap() == &expect;
    }
    for (q, sample) in text_report.samples.iter().enumerate() {
        let mut pairs: Vec<(u64, f64)> = (0..gallery.rows)
            .map(|g| (ids[g], linalg::dot(fixture.data.anchors.row(q), gallery.row(g))))
            .collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<u64> = pairs.iter().take(5).map(|p| p.0).collect();
        oracle_ok &= sample.top_ids.as_ref().unwrap() == &expect;
    }

    let pass = text_r1 >= 0.90 && pc_r1 >= 0.90 && oracle_ok;
    verdict(
        "retrieval",
        pass,
        &format!(
            "text->PC recall@1 {text_r1:.4}, PC->PC recall@1 {pc_r1:.4}, oracle rankings {}",
            if oracle_ok { "exact" } else { "MISMATCH" }
        ),
    );
}

#[test]
fn acceptance_determinism_and_formats() {
    // datasets
    let a = encode_mmpd(&build_split(9, 4, 32, 0.01, 20, 0).unwrap()).unwrap();
    let b = encode_mmpd(&build_split(9, 4, 32, 0.01, 20, 0).unwrap()).unwrap();
    let gen_ok = a == b;
    let roundtrip_ok = encode_mmpd(&decode_mmpd(&a).unwrap()).unwrap() == a;

    // caches
    let cfg = TrainConfig {
        seed: 9,
        num_classes: 4,
        dim: 16,
        ..TrainConfig::default()
    };
    let model = build_model(cfg.seed, cfg.num_classes, cfg.dim, cfg.sigma_image).unwrap();
    let dataset: Vec<(u64, u16)> = (0..24).map(|i| (i, (i % 4) as u16)).collect();
    let seeds: Vec<u64> = (0..24).collect();
    let c1 = encode_cache(&precache(&dataset, &model, Modality::Image, &seeds).unwrap()).unwrap();
    let c2 = encode_cache(&precache(&dataset, &model, Modality::Image, &seeds).unwrap()).unwrap();
    let cache_ok = c1 == c2 && encode_cache(&decode_cache(&c1).unwrap()).unwrap() == c1;

    // training determinism at tiny scale (full-scale checked via sanity runs)
    let tiny = TrainConfig {
        seed: 3,
        num_classes: 4,
        points_per_cloud: 24,
        fps_points: 16,
        train_size: 12,
        eval_size: 0,
        dim: 8,
        hidden: 8,
        batch_size: 4,
        epochs_stage1: 1,
        epochs_stage2: 1,
        ..TrainConfig::default()
    };
    let (ds, text, image) = sanity_data_small(&tiny);
    let inputs = TrainInputs {
        dataset: &ds,
        text_cache: &text,
        image_cache: &image,
    };
    let r1 = train_pipeline(&tiny, &inputs).unwrap();
    let r2 = train_pipeline(&tiny, &inputs).unwrap();
    let ck1 = encode_checkpoint(&r2.stage2.checkpoint());
    let train_ok = encode_checkpoint(&r1.stage2.checkpoint()) == ck1
        && encode_checkpoint(&r1.stage1.checkpoint()) == encode_checkpoint(&r2.stage1.checkpoint());

    // checkpoint roundtrip + corruption rejection with located errors
    let ck_rt =
        encode_checkpoint(&mmx_core::trainer::decode_checkpoint(&ck1).unwrap()) == ck1;
    let mut corrupt = a.clone();
    corrupt[0] = b'X';
    let mmpd_rejects = matches!(decode_mmpd(&corrupt), Err(Error::Format { offset: 0, .. }));
    let mut corrupt_cache = c1.clone();
    corrupt_cache[4] = 99;
    let cache_rejects = matches!(decode_cache(&corrupt_cache), Err(Error::Format { offset: 4, .. }));
    let truncated = &ck1[..ck1.len() - 2];
    let ck_rejects = matches!(
        mmx_core::trainer::decode_checkpoint(truncated),
        Err(Error::Format { .. })
    );

    let pass =
        gen_ok && roundtrip_ok && cache_ok && train_ok && ck_rt && mmpd_rejects && cache_rejects && ck_rejects;
    verdict(
        "determinism-and-formats",
        pass,
        &format!(
            "gen {gen_ok}, mmpd roundtrip {roundtrip_ok}, cache {cache_ok}, train {train_ok}, mmck roundtrip {ck_rt}, corrupt rejection {}/{}/{}",
            mmpd_rejects, cache_rejects, ck_rejects
        ),
    );
}

#[test]
fn acceptance_encoder_invariants() {
    use rand::seq::SliceRandom;

    let mut max_perm_diff = 0.0_f64;
    let mut max_norm_err = 0.0_f64;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for case in 0..50u64 {
        let pc = gen_shape((case % 8) as u16, 64, 100 + case, 0.02).unwrap();
        let params = encoder::init_params(case, 16, 8).unwrap();
        let (f, _) = encoder::forward(&pc.points, &params).unwrap();
        max_norm_err = max_norm_err.max((linalg::norm(&f) - 1.0).abs());
        let mut shuffled = pc.points.clone();
        shuffled.shuffle(&mut rng);
        let (g, _) = encoder::forward(&shuffled, &params).unwrap();
        for (a, b) in f.iter().zip(&g) {
            max_perm_diff = max_perm_diff.max((a - b).abs());
        }
    }

    // pooling tie-break: duplicated points all tie, winner is index 0
    let params = encoder::init_params(77, 8, 8).unwrap();
    let (_, tape) = encoder::forward(&[[0.4, -0.1, 0.8]; 6], &params).unwrap();
    let tie_ok = tape.winners.iter().all(|&w| w == 0);

    // all-equal-logits classification tie-break: ranking is 0,1,2,...
    let class_embeds = {
        let mut m = Mat::zeros(4, 8);
        for c in 0..4 {
            *m.at_mut(c, c) = 1.0;
        }
        m
    };
    let mut feats = Mat::zeros(3, 8);
    for r in 0..3 {
        *feats.at_mut(r, 5 + r % 3) = 1.0;
    }
    let report = zero_shot(&feats, &[1, 2, 0], &[0, 1, 2], &class_embeds, &[1, 3]).unwrap();
    let tie_rank_ok = report
        .samples
        .iter()
        .all(|s| s.top_classes == vec![0, 1, 2][..]);

    let pass = max_perm_diff <= 1e-12 && max_norm_err <= 1e-12 && tie_ok && tie_rank_ok;
    verdict(
        "encoder-invariants",
        pass,
        &format!(
            "permutation diff {max_perm_diff:.3e} <= 1e-12, norm err {max_norm_err:.3e} <= 1e-12, pool ties {tie_ok}, ranking ties {tie_rank_ok}"
        ),
    );
}

#[test]
fn acceptance_sanity_mixing_logs_share_pairs() {
    // the full-scale runs also honor the shared-pair contract end to end
    let fixture = sanity();
    let full = fixture.run(42, MixMode::FmIm);
    let s1 = full.pipeline.stage1.log.check_shared_pairs();
    let s2 = full.pipeline.stage2.log.check_shared_pairs();
    verdict(
        "sanity-shared-pairs",
        s1.is_ok() && s2.is_ok(),
        &format!("stage1 {s1:?}, stage2 {s2:?}"),
    );
}

// normalize_unit_sphere is exercised indirectly everywhere; keep one direct
// end-to-end check here so the suite stands alone
#[test]
fn acceptance_geometry_normalization_contract() {
    let pc = gen_shape(4, 500, 8, 0.05).unwrap();
    let again = normalize_unit_sphere(&pc).unwrap();
    let mut max_diff = 0.0_f64;
    for (a, b) in pc.points.iter().zip(&again.points) {
        for k in 0..3 {
            max_diff = max_diff.max((a[k] - b[k]).abs());
        }
    }
    let centroid: [f64; 3] = pc.points.iter().fold([0.0; 3], |mut acc, p| {
        for k in 0..3 {
            acc[k] += p[k] / pc.points.len() as f64;
        }
        acc
    });
    let centroid_norm = (centroid[0].powi(2) + centroid[1].powi(2) + centroid[2].powi(2)).sqrt();
    let lambda_draws_ok = {
        let mut rng = rng::stream(1, "acceptance-lambda", &[]);
        (0..1000).all(|_| {
            let l = sample_lambda(1.0, &mut rng).unwrap();
            (0.0..1.0).contains(&l) && l > 0.0
        })
    };
    verdict(
        "geometry-normalization",
        max_diff <= 1e-9 && centroid_norm <= 1e-9 && lambda_draws_ok,
        &format!("idempotence diff {max_diff:.3e}, centroid {centroid_norm:.3e}, lambda range ok {lambda_draws_ok}"),
    );
}
