//! Acceptance gates. Each test checks one headline guarantee end to end
//! and prints a single `criterion N PASS/SKIP` line (visible with
//! `cargo test --test acceptance -- --nocapture`); failures carry a
//! `criterion N FAIL` message in the panic.
//!
//! Criteria 6 and 7 share one five-seed training fixture behind a
//! `OnceLock`, so the networks train once no matter which test runs
//! first. All randomness is ChaCha8-derived; every number here is
//! reproducible bit for bit.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bindmix::bindnet::{
    backward, forward, forward_cached, loss_stage1, loss_stage2, phantom_mass, train_plain,
    train_stage1, train_stage2, BindNetParams, FeatMap, PredictionMaps, StageTarget, TrainConfig,
    TrainSet,
};
use bindmix::blend::{
    blend_batch_cm, blend_pair, BlendConfig, BlendStrategy, BlendedSample, DeltaSampler,
};
use bindmix::cooccur::{
    accumulate_image, compute_cooccurrence, CooccurrenceMatrix, CooccurrenceMode,
};
use bindmix::dataset::{
    unique_categories_with, write_label_png, DatasetManifest, ManifestEntry, SegSample,
};
use bindmix::eval::{miou, predict_label, subset_by_cooccurrence_threshold, ConfusionMatrix};
use bindmix::grid::{ImageGrid, LabelMap, CHANNELS, IGNORE_INDEX};
use bindmix::rng::{rng_from_seed, Rng};
use bindmix::synth::{generate_dataset, SynthConfig, SYNTH_CLASSES};
use rand::Rng as _;

fn random_image(h: usize, w: usize, rng: &mut Rng) -> ImageGrid {
    let data = (0..h * w * CHANNELS).map(|_| rng.gen::<f64>()).collect();
    ImageGrid::from_data(h, w, data).unwrap()
}

// --- criterion 1: co-occurrence vs brute force -------------------------

/// Independent enumeration: how many images contain both foreground
/// classes, scanning raw pixels.
fn brute_force_count(labels: &[LabelMap], i: u8, j: u8) -> u64 {
    labels
        .iter()
        .filter(|l| {
            let has = |c: u8| l.data().iter().any(|&v| v == c);
            has(i) && has(j)
        })
        .count() as u64
}

#[test]
fn criterion_1_cooccurrence_matches_brute_force() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_from_seed(101);
    let mut total_images = 0usize;
    for d in 0..100 {
        let n_classes: usize = rng.gen_range(2..=8);
        let n_images: usize = rng.gen_range(1..=20);
        total_images += n_images;
        let mut entries = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n_images {
            let h = rng.gen_range(1..=16);
            let w = rng.gen_range(1..=16);
            let data: Vec<u8> = (0..h * w)
                .map(|_| {
                    if rng.gen::<f64>() < 0.05 {
                        IGNORE_INDEX
                    } else {
                        rng.gen_range(0..n_classes as u8)
                    }
                })
                .collect();
            let label = LabelMap::from_data(h, w, data).unwrap();
            let path = dir.path().join(format!("{d}_{i}.png"));
            write_label_png(&path, &label).unwrap();
            entries.push(ManifestEntry {
                id: format!("{d}_{i}"),
                image_path: path.clone(),
                label_path: path,
            });
            labels.push(label);
        }
        let manifest = DatasetManifest::new(entries, n_classes);
        let matrix = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();
        for i in 0..n_classes {
            for j in 0..n_classes {
                let expected = if i == 0 || j == 0 {
                    0 // background never counts
                } else {
                    brute_force_count(&labels, i as u8, j as u8)
                };
                assert_eq!(
                    matrix.get(i, j),
                    expected,
                    "criterion 1 FAIL: dataset {d} entry ({i}, {j})"
                );
                assert_eq!(
                    matrix.get(i, j),
                    matrix.get(j, i),
                    "criterion 1 FAIL: asymmetry at ({i}, {j}) in dataset {d}"
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "criterion 1 FAIL: {elapsed:?} exceeds the 5 s budget"
    );
    println!(
        "criterion 1 PASS: image-count matrices over 100 random datasets ({total_images} images) \
         match brute-force enumeration exactly and are symmetric; {elapsed:.2?} < 5 s"
    );
}

// --- criterion 2: pairwise blend vs per-pixel oracle -------------------

#[test]
fn criterion_2_blend_matches_pixel_oracle() {
    let mut rng = rng_from_seed(202);
    for t in 0..1000 {
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let label = |rng: &mut Rng| {
            LabelMap::from_data(h, w, (0..h * w).map(|_| rng.gen_range(0..5)).collect()).unwrap()
        };
        let a = SegSample::new(
            format!("a{t}"),
            random_image(h, w, &mut rng),
            label(&mut rng),
        )
        .unwrap();
        let b = SegSample::new(
            format!("b{t}"),
            random_image(h, w, &mut rng),
            label(&mut rng),
        )
        .unwrap();
        let delta: f64 = rng.gen();
        let out = blend_pair(&a, &b, delta).unwrap();
        for idx in 0..h * w * CHANNELS {
            let expect = delta * a.image.data()[idx] + (1.0 - delta) * b.image.data()[idx];
            assert!(
                (out.image.data()[idx] - expect).abs() <= 1e-12,
                "criterion 2 FAIL: pair {t} pixel {idx}: got {}, oracle {expect}",
                out.image.data()[idx]
            );
        }
        // Labels stay unmixed: dominant ground truth is a's, phantom is b's.
        assert_eq!(out.gt_dominant.data(), a.label.data(), "criterion 2 FAIL");
        assert_eq!(out.gt_phantom.data(), b.label.data(), "criterion 2 FAIL");

        let pure = blend_pair(&a, &b, 1.0).unwrap();
        for (o, e) in pure.image.data().iter().zip(a.image.data()) {
            assert_eq!(
                o.to_bits(),
                e.to_bits(),
                "criterion 2 FAIL: δ=1 blend of pair {t} is not bit-identical to the dominant image"
            );
        }
    }
    println!(
        "criterion 2 PASS: 1000 random pairs within 1e-12 of the per-pixel oracle; \
         δ=1 reproduces the dominant image bit for bit"
    );
}

// --- criterion 3: batch mixing vs exhaustive argmax --------------------

#[test]
fn criterion_3_batch_mixing_follows_cooccurrence_argmax() {
    let mut rng = rng_from_seed(303);
    let (mut plain, mut overridden, mut passed) = (0usize, 0usize, 0usize);
    for t in 0..50u64 {
        let n = 8usize;
        let batch_len = rng.gen_range(2..=6);
        let batch: Vec<SegSample> = (0..batch_len)
            .map(|k| {
                let n_cats = rng.gen_range(0..=4usize);
                let palette: Vec<u8> = (0..n_cats).map(|_| rng.gen_range(1..n as u8)).collect();
                let data: Vec<u8> = (0..16)
                    .map(|p| {
                        if palette.is_empty() {
                            0
                        } else if p < palette.len() {
                            palette[p] // guarantee every palette class appears
                        } else if rng.gen::<f64>() < 0.3 {
                            0
                        } else {
                            palette[rng.gen_range(0..palette.len())]
                        }
                    })
                    .collect();
                SegSample::new(
                    format!("s{t}_{k}"),
                    random_image(4, 4, &mut rng),
                    LabelMap::from_data(4, 4, data).unwrap(),
                )
                .unwrap()
            })
            .collect();

        let mut matrix = CooccurrenceMatrix::zeros(n, CooccurrenceMode::ImageCount);
        for i in 1..n {
            for j in i..n {
                if rng.gen::<f64>() < 0.5 {
                    let v = rng.gen_range(1..20u64);
                    matrix.add(i, j, v);
                    if i != j {
                        matrix.add(j, i, v);
                    }
                }
            }
        }
        let gamma = rng.gen_range(2..=5);
        let config = BlendConfig {
            delta_sampler: DeltaSampler::Uniform { lo: 0.3, hi: 0.7 },
            max_unique_categories: gamma,
            ..BlendConfig::default()
        };

        let mut call_rng = rng_from_seed(5000 + t);
        // The batch draws one δ up front; replay that draw on a clone so the
        // oracle knows it without peeking at the output.
        let expected_delta = config.delta_sampler.sample(&mut call_rng.clone());
        let out = blend_batch_cm(&batch, &matrix, &config, &mut call_rng).unwrap();
        assert_eq!(out.len(), batch.len(), "criterion 3 FAIL: output length");

        for k in 0..batch_len {
            let cats_k = unique_categories_with(&batch[k].label, 0, IGNORE_INDEX);
            let mut best: Option<(usize, u64)> = None;
            for (m, other) in batch.iter().enumerate() {
                if m == k {
                    continue;
                }
                let cats_m = unique_categories_with(&other.label, 0, IGNORE_INDEX);
                let score = if cats_k.is_empty() || cats_m.is_empty() {
                    0
                } else {
                    let mut s = 0u64;
                    for &i in &cats_m {
                        for &j in &cats_k {
                            s += matrix.get(usize::from(i), usize::from(j));
                        }
                    }
                    s
                };
                match best {
                    Some((_, bs)) if score <= bs => {} // keep the earlier (lower) index on ties
                    _ => best = Some((m, score)),
                }
            }
            let (m, score) = best.unwrap();
            let got = &out[k];
            if score == 0 {
                passed += 1;
                assert_eq!(
                    (got.dominant_id.as_str(), got.phantom_id.as_str(), got.delta),
                    (batch[k].id.as_str(), batch[k].id.as_str(), 1.0),
                    "criterion 3 FAIL: batch {t} sample {k} should pass through unblended"
                );
                assert_eq!(got.image.data(), batch[k].image.data(), "criterion 3 FAIL");
            } else {
                assert_eq!(
                    got.phantom_id, batch[m].id,
                    "criterion 3 FAIL: batch {t} sample {k} partner != exhaustive argmax"
                );
                let cats_m = unique_categories_with(&batch[m].label, 0, IGNORE_INDEX);
                let union = cats_k.union(&cats_m).count();
                let want = if union > gamma {
                    overridden += 1;
                    config.delta_override
                } else {
                    plain += 1;
                    expected_delta
                };
                assert_eq!(
                    got.delta, want,
                    "criterion 3 FAIL: batch {t} sample {k}: union {union}, γ {gamma}"
                );
            }
        }
    }
    assert!(
        plain > 0 && overridden > 0 && passed > 0,
        "criterion 3 FAIL: not all branches exercised (plain {plain}, override {overridden}, pass {passed})"
    );
    println!(
        "criterion 3 PASS: 50 crafted batches match the exhaustive-argmax oracle with \
         lowest-index ties; δ override fires exactly when the category union exceeds γ \
         ({plain} plain blends, {overridden} overrides, {passed} pass-throughs)"
    );
}

// --- criterion 4: gradients vs central differences ---------------------

fn fd_fixture(n: usize, seed: u64) -> (BindNetParams, BlendedSample) {
    let params = BindNetParams::init_with_hidden(n, 4, 4, &mut rng_from_seed(seed));
    let image = random_image(4, 4, &mut rng_from_seed(seed + 1));
    let label = |s: u64| {
        let mut rng = rng_from_seed(s);
        LabelMap::from_data(4, 4, (0..16).map(|_| rng.gen_range(0..n as u8)).collect()).unwrap()
    };
    let mut gt_dominant = label(seed + 2);
    let gt_phantom = label(seed + 3);
    gt_dominant.set(0, 0, IGNORE_INDEX); // exercise the ignore path
    let sample = BlendedSample {
        image,
        gt_dominant,
        gt_phantom,
        delta: 0.8,
        dominant_id: "a".into(),
        phantom_id: "b".into(),
    };
    (params, sample)
}

/// Central differences are only meaningful where the loss is smooth: a
/// ReLU pre-activation within the FD step of zero flips sides under the
/// perturbation, and a phantom branch without positive mass parks the
/// suppression log at its kink. Scan forward from `base_seed` for a
/// fixture clear of both.
fn smooth_fd_fixture(n: usize, base_seed: u64, stage2: bool) -> (BindNetParams, BlendedSample) {
    const MARGIN: f64 = 1e-2;
    for seed in base_seed.. {
        let (params, sample) = fd_fixture(n, seed);
        let cache = forward_cached(&params, &sample.image).unwrap();
        let mut clear = cache
            .enc_pre
            .iter()
            .chain(std::iter::once(&cache.fb_pre))
            .flat_map(|m| m.data())
            .all(|&v| v.abs() > MARGIN);
        if stage2 {
            clear = clear
                && phantom_mass(&cache.s_p) > 0.2
                && cache.s_p.data().iter().all(|&v| v.abs() > MARGIN);
        }
        if clear {
            return (params, sample);
        }
        assert!(
            seed - base_seed < 200,
            "criterion 4 FAIL: no smooth fixture near seed {base_seed}"
        );
    }
    unreachable!()
}

fn stage_loss(params: &BindNetParams, sample: &BlendedSample, stage2: bool) -> f64 {
    let preds = forward(params, &sample.image).unwrap();
    if stage2 {
        loss_stage2(&preds, &sample.gt_dominant, 255).unwrap().total
    } else {
        loss_stage1(&preds, sample, 255).unwrap().total
    }
}

/// Check every parameter of a 4×4 fixture against central differences
/// with step 1e-3 at relative tolerance 1e-4. Returns (parameter count,
/// worst relative error).
fn check_against_fd(n: usize, base_seed: u64, stage2: bool) -> (usize, f64) {
    let (params, sample) = smooth_fd_fixture(n, base_seed, stage2);
    let target = if stage2 {
        StageTarget::Stage2(&sample.gt_dominant)
    } else {
        StageTarget::Stage1(&sample)
    };
    let (_, grads) = backward(&params, &sample.image, target, 255).unwrap();

    let step = 1e-3;
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for (t_idx, name) in names.iter().enumerate() {
        let len = params.tensors()[t_idx].1.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t_idx].1[i] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[t_idx].1[i] -= step;
            let fd =
                (stage_loss(&plus, &sample, stage2) - stage_loss(&minus, &sample, stage2))
                    / (2.0 * step);
            let analytic = grads.tensors()[t_idx].1[i];
            let rel = (analytic - fd).abs() / fd.abs().max(1e-6);
            worst = worst.max(rel);
            count += 1;
            assert!(
                rel < 1e-4,
                "criterion 4 FAIL: {name}[{i}] (n={n}, stage2={stage2}): \
                 analytic {analytic}, fd {fd}, rel {rel}"
            );
        }
    }
    (count, worst)
}

#[test]
fn criterion_4_gradients_match_finite_differences() {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (n, base_seed, stage2) in [(2, 500, false), (3, 510, false), (2, 520, true), (3, 530, true)]
    {
        let (count, w) = check_against_fd(n, base_seed, stage2);
        checked += count;
        worst = worst.max(w);
    }
    println!(
        "criterion 4 PASS: {checked} parameters across stage-1/stage-2 losses at n=2 and n=3 \
         match central differences (step 1e-3); worst relative error {worst:.2e} < 1e-4"
    );
}

// --- criterion 5: loss algebra -----------------------------------------

#[test]
fn criterion_5_stage1_loss_affine_in_delta() {
    let mut rng = rng_from_seed(505);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..=5);
        let (h, w) = (3, 5);
        let logits = |rng: &mut Rng| {
            let data = (0..h * w * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            FeatMap::from_data(h, w, n, data).unwrap()
        };
        let preds = PredictionMaps {
            s_t: logits(&mut rng),
            s_p: logits(&mut rng),
            s_fb: logits(&mut rng),
        };
        let label = |rng: &mut Rng| {
            let data = (0..h * w)
                .map(|_| {
                    if rng.gen::<f64>() < 0.1 {
                        IGNORE_INDEX
                    } else {
                        rng.gen_range(0..n as u8)
                    }
                })
                .collect();
            LabelMap::from_data(h, w, data).unwrap()
        };
        let (gt_dominant, gt_phantom) = (label(&mut rng), label(&mut rng));
        let at = |delta: f64| {
            let sample = BlendedSample {
                image: ImageGrid::zeros(h, w),
                gt_dominant: gt_dominant.clone(),
                gt_phantom: gt_phantom.clone(),
                delta,
                dominant_id: "a".into(),
                phantom_id: "b".into(),
            };
            loss_stage1(&preds, &sample, 255).unwrap().total
        };
        let (l0, l1) = (at(0.0), at(1.0));
        let mid = (at(0.5) - 0.5 * (l0 + l1)).abs();
        let d: f64 = rng.gen();
        let interp = (at(d) - (l0 + d * (l1 - l0))).abs();
        worst = worst.max(mid).max(interp);
        assert!(
            mid <= 1e-9 && interp <= 1e-9,
            "criterion 5 FAIL: loss not affine in δ (midpoint dev {mid:.2e}, δ={d} dev {interp:.2e})"
        );
    }

    // Uniform logits at n=2: every stream's cross-entropy is ln 2, so the
    // δ-weighted total collapses to 2·ln 2 regardless of δ.
    let zeros = || FeatMap::zeros(4, 4, 2);
    let preds = PredictionMaps {
        s_t: zeros(),
        s_p: zeros(),
        s_fb: zeros(),
    };
    let gt = LabelMap::from_data(4, 4, (0..16).map(|i| (i % 2) as u8).collect()).unwrap();
    for delta in [0.0, 0.25, 0.8, 1.0] {
        let sample = BlendedSample {
            image: ImageGrid::zeros(4, 4),
            gt_dominant: gt.clone(),
            gt_phantom: gt.clone(),
            delta,
            dominant_id: "a".into(),
            phantom_id: "b".into(),
        };
        let total = loss_stage1(&preds, &sample, 255).unwrap().total;
        assert!(
            (total - 1.386294).abs() <= 1e-6,
            "criterion 5 FAIL: uniform-logit total {total} != 1.386294 at δ={delta}"
        );
    }
    println!(
        "criterion 5 PASS: stage-1 loss affine in δ on 20 random fixtures \
         (worst deviation {worst:.2e} ≤ 1e-9); uniform-logit total = 2·ln 2 = 1.386294 ± 1e-6"
    );
}

// --- criteria 6 and 7: shared end-to-end training fixture --------------

struct EndToEnd {
    base_clean: Vec<f64>,
    base_blend: Vec<f64>,
    cm_clean: Vec<f64>,
    cm_blend: Vec<f64>,
    phantom_before: f64,
    phantom_after: f64,
    elapsed: Duration,
}

fn eval_miou(params: &BindNetParams, test: &[SegSample], use_fb: bool) -> f64 {
    let mut cm = ConfusionMatrix::new(SYNTH_CLASSES);
    for s in test {
        let preds = forward(params, &s.image).unwrap();
        let logits = if use_fb { &preds.s_fb } else { &preds.s_t };
        cm.accumulate(&predict_label(logits), &s.label, 255).unwrap();
    }
    miou(&cm).unwrap().miou
}

fn mean_phantom(params: &BindNetParams, test: &[SegSample]) -> f64 {
    test.iter()
        .map(|s| phantom_mass(&forward(params, &s.image).unwrap().s_p))
        .sum::<f64>()
        / test.len() as f64
}

/// 500-train/100-test synthetic textures, five seeds. Per seed: a plain
/// single-head baseline for 2000 iterations against the blending
/// pipeline (1900 stage-1 iterations on co-occurrence-matched batches,
/// then 100 gentle stage-2 iterations), both started from the same
/// encoder init. Evaluated on the clean test split and on an
/// occlusion-heavy split where every test image is a δ=0.7 blend of two
/// test images, scored against the dominant label. The phantom-mass
/// measurement for criterion 6 runs its own 500-iteration stage-2 pass
/// from the seed-0 stage-1 checkpoint at a learning rate high enough to
/// actually drain the branch.
fn run_end_to_end() -> EndToEnd {
    let started = Instant::now();
    let config = SynthConfig::default();
    let data = generate_dataset(2024, 600, &config);
    let train: Vec<_> = data[..500].iter().map(|s| s.sample.clone()).collect();
    let clean: Vec<_> = data[500..].iter().map(|s| s.sample.clone()).collect();
    let blended: Vec<SegSample> = (0..clean.len())
        .map(|i| {
            let b = blend_pair(&clean[i], &clean[(i + 1) % clean.len()], 0.7).unwrap();
            SegSample::new(format!("blend{i}"), b.image, b.gt_dominant).unwrap()
        })
        .collect();
    let set = TrainSet::from_samples(train, SYNTH_CLASSES);

    let mut matrix = CooccurrenceMatrix::zeros(SYNTH_CLASSES, CooccurrenceMode::ImageCount);
    for s in &set.samples {
        let cats = unique_categories_with(&s.label, 0, IGNORE_INDEX);
        accumulate_image(&mut matrix, &cats, &s.label.histogram());
    }
    let bc = BlendConfig {
        strategy: BlendStrategy::Cm,
        delta_sampler: DeltaSampler::Uniform { lo: 0.8, hi: 1.0 },
        ..BlendConfig::default()
    };

    let mut out = EndToEnd {
        base_clean: Vec::new(),
        base_blend: Vec::new(),
        cm_clean: Vec::new(),
        cm_blend: Vec::new(),
        phantom_before: 0.0,
        phantom_after: 0.0,
        elapsed: Duration::ZERO,
    };
    for seed in 0..5u64 {
        let tc = TrainConfig {
            width: 10,
            base_lr: 2e-2,
            max_iters: Some(2000),
            seed,
            ..TrainConfig::default()
        };
        let baseline = train_plain(&set, &tc).unwrap();
        out.base_clean.push(eval_miou(&baseline.params, &clean, false));
        out.base_blend.push(eval_miou(&baseline.params, &blended, false));

        let tc1 = TrainConfig {
            max_iters: Some(1900),
            ..tc.clone()
        };
        let stage1 = train_stage1(&set, Some(&matrix), &bc, &tc1).unwrap();
        if seed == 0 {
            out.phantom_before = mean_phantom(&stage1.params, &clean);
            let tc6 = TrainConfig {
                max_iters: Some(500),
                finetune_lr: 5e-5,
                ..tc.clone()
            };
            let denoised = train_stage2(stage1.params.clone(), &set, &tc6).unwrap();
            out.phantom_after = mean_phantom(&denoised.params, &clean);
        }
        let tc2 = TrainConfig {
            max_iters: Some(100),
            finetune_lr: 2.5e-6,
            ..tc.clone()
        };
        let stage2 = train_stage2(stage1.params.clone(), &set, &tc2).unwrap();
        out.cm_clean.push(eval_miou(&stage2.params, &clean, true));
        out.cm_blend.push(eval_miou(&stage2.params, &blended, true));
    }
    out.elapsed = started.elapsed();
    out
}

fn end_to_end() -> &'static EndToEnd {
    static E2E: OnceLock<EndToEnd> = OnceLock::new();
    E2E.get_or_init(run_end_to_end)
}

#[test]
fn criterion_6_stage2_drains_phantom_mass() {
    let e = end_to_end();
    assert!(
        e.phantom_before > 0.0,
        "criterion 6 FAIL: stage-1 checkpoint has no phantom mass to drain"
    );
    let drop = 1.0 - e.phantom_after / e.phantom_before;
    assert!(
        drop >= 0.5,
        "criterion 6 FAIL: mean phantom mass {:.1} -> {:.1}, drop {:.0}% < 50%",
        e.phantom_before,
        e.phantom_after,
        100.0 * drop
    );
    println!(
        "criterion 6 PASS: 500 stage-2 iterations cut mean phantom mass over 100 clean images \
         {:.1} -> {:.1} ({:.0}% ≥ 50%)",
        e.phantom_before,
        e.phantom_after,
        100.0 * drop
    );
}

#[test]
fn criterion_7_end_to_end_beats_baseline_on_blends() {
    let e = end_to_end();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, mc) = (mean(&e.base_clean), mean(&e.cm_clean));
    let wins = e
        .cm_blend
        .iter()
        .zip(&e.base_blend)
        .filter(|(c, b)| c > b)
        .count();
    assert!(
        mc >= mb - 0.005,
        "criterion 7 FAIL: clean mIoU {mc:.4} more than 0.005 below baseline {mb:.4}"
    );
    assert!(
        wins >= 4,
        "criterion 7 FAIL: blended-split wins {wins}/5 < 4 (ours {:?} vs baseline {:?})",
        e.cm_blend,
        e.base_blend
    );
    assert!(
        e.elapsed < Duration::from_secs(600),
        "criterion 7 FAIL: protocol took {:?}, budget 10 min",
        e.elapsed
    );
    println!(
        "criterion 7 PASS: clean mIoU {mc:.4} vs baseline {mb:.4} (gap {:+.4} ≥ -0.005); \
         blended-split wins {wins}/5 (ours {:.4} vs {:.4} mean); 5 seeds in {:.0?} < 10 min",
        mc - mb,
        mean(&e.cm_blend),
        mean(&e.base_blend),
        e.elapsed
    );
}

// --- criterion 8: mIoU vs set oracle -----------------------------------

#[test]
fn criterion_8_miou_matches_set_oracle() {
    let mut rng = rng_from_seed(808);
    for t in 0..100 {
        let n = rng.gen_range(2..=6);
        let mut gt_data: Vec<u8> = (0..64)
            .map(|_| {
                if rng.gen::<f64>() < 0.05 {
                    IGNORE_INDEX
                } else {
                    rng.gen_range(0..n as u8)
                }
            })
            .collect();
        gt_data[0] = 0; // keep at least one scored pixel
        let pred_data: Vec<u8> = gt_data
            .iter()
            .map(|&g| {
                if g != IGNORE_INDEX && rng.gen::<f64>() < 0.7 {
                    g
                } else {
                    rng.gen_range(0..n as u8)
                }
            })
            .collect();
        let gt = LabelMap::from_data(8, 8, gt_data).unwrap();
        let pred = LabelMap::from_data(8, 8, pred_data).unwrap();

        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(&pred, &gt, 255).unwrap();
        let got = miou(&cm).unwrap().miou;

        // Set oracle: per class, intersection and union counted straight
        // off the pixel arrays.
        let mut ious = Vec::new();
        for c in 0..n as u8 {
            let (mut inter, mut union) = (0u64, 0u64);
            for i in 0..64 {
                if gt.data()[i] == IGNORE_INDEX {
                    continue;
                }
                let (g, p) = (gt.data()[i] == c, pred.data()[i] == c);
                if g && p {
                    inter += 1;
                }
                if g || p {
                    union += 1;
                }
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let oracle = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!(
            (got - oracle).abs() < 1e-12,
            "criterion 8 FAIL: pair {t}: miou {got} vs set oracle {oracle}"
        );

        let mut cm_self = ConfusionMatrix::new(n);
        cm_self.accumulate(&gt, &gt, 255).unwrap();
        assert_eq!(
            miou(&cm_self).unwrap().miou,
            1.0,
            "criterion 8 FAIL: pair {t}: ground truth against itself must be exactly 1.0"
        );
    }

    // Worked 2×2 example: gt [0,0,1,1] vs pred [0,1,1,1] gives IoUs 1/2
    // and 2/3, mean 7/12 = 0.58333….
    let gt = LabelMap::from_data(2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMap::from_data(2, 2, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt, 255).unwrap();
    let worked = miou(&cm).unwrap().miou;
    assert!(
        (worked - 0.58333).abs() <= 1e-5,
        "criterion 8 FAIL: worked example {worked} != 0.58333 ± 1e-5"
    );
    println!(
        "criterion 8 PASS: 100 random prediction/gt pairs match the set oracle to 1e-12; \
         self-comparison is exactly 1.0; worked 2×2 example = {worked:.5}"
    );
}

// --- criterion 9: optional VOC reference check -------------------------

#[test]
fn criterion_9_voc_reference_counts() {
    let root = std::env::var("VOC_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("/root/data/VOCdevkit"));
    let voc = root.join("VOC2012");
    let split = voc.join("ImageSets/Segmentation/train.txt");
    let seg = voc.join("SegmentationClass");
    if !split.is_file() || !seg.is_dir() {
        println!(
            "criterion 9 SKIP: VOC2012 not found under {} (set VOC_ROOT to enable); \
             cat–bottle count and threshold nesting unchecked",
            root.display()
        );
        return;
    }

    let ids: Vec<String> = std::fs::read_to_string(&split)
        .unwrap()
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let entries = ids
        .iter()
        .map(|id| ManifestEntry {
            id: id.clone(),
            image_path: voc.join(format!("JPEGImages/{id}.jpg")),
            label_path: seg.join(format!("{id}.png")),
        })
        .collect();
    let manifest = DatasetManifest::new(entries, 21);
    let matrix = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();

    // VOC class indices: 8 = cat, 5 = bottle.
    let cat_bottle = matrix.get(8, 5);
    assert_eq!(
        cat_bottle, 18,
        "criterion 9 FAIL: cat–bottle image count {cat_bottle} != 18 on the train split"
    );

    let mut previous: Option<BTreeSet<String>> = None;
    let mut sizes = Vec::new();
    for t in [50u64, 40, 30, 20, 10] {
        let subset: BTreeSet<String> = subset_by_cooccurrence_threshold(&manifest, &matrix, t)
            .unwrap()
            .into_iter()
            .collect();
        sizes.push((t, subset.len()));
        if let Some(larger) = &previous {
            assert!(
                subset.is_subset(larger),
                "criterion 9 FAIL: threshold-{t} subset is not nested in the next larger one"
            );
        }
        previous = Some(subset);
    }
    println!(
        "criterion 9 PASS: cat–bottle co-occurrence = 18 on the VOC 2012 train split; \
         threshold subsets nested for {sizes:?}"
    );
}
