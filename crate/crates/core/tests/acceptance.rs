//! Acceptance criteria 1–9. Each test prints one PASS/FAIL line to stderr
//! (outside the harness capture) and then asserts the verdict.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use bda_core::augment::AugmentConfig;
use bda_core::config::RunConfig;
use bda_core::data::{self, generate_synthetic_set, rasterize_annotations, PolygonAnnotation};
use bda_core::downstream::{predict_masks, siamese_objective, FinetuneSetup, FinetuneState, Labeled};
use bda_core::encoder::{self, EncoderConfig};
use bda_core::metrics::{confusion_counts, report, F1Report};
use bda_core::optim::Adam;
use bda_core::pipeline;
use bda_core::pretrain::{cosine_momentum, pretrain_step, twin_objective, PretrainHyper, PretrainSetup, TwinState};
use bda_core::recon::{self, reconstruction_objective};
use bda_core::{Checkpoint, DamageMask, DecoderConfig, Image, ParameterSet, PredictionMap, ProjectorConfig, SegHeadConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, title: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "acceptance criterion {n} [{}] {title}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    writeln!(std::io::stderr().lock(), "{line}").unwrap();
    assert!(pass, "{line}");
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image<f64> {
    let data = (0..size * size * 3).map(|_| rng.gen::<f64>()).collect();
    Image::new(size, size, 3, data).unwrap()
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;

/// Central differences of `f` over every entry of `params`, compared to
/// `analytic` as `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
fn fd_relative_error(
    params: &ParameterSet<f64>,
    analytic: &ParameterSet<f64>,
    f: impl Fn(&ParameterSet<f64>) -> f64,
) -> (f64, usize) {
    let (mut diff, mut na, mut nn, mut count) = (0.0, 0.0, 0.0, 0);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let len = params.get(name).unwrap().len();
        let a = analytic.get(name).unwrap_or_else(|| panic!("no analytic gradient for {name}"));
        for i in 0..len {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
            let up = f(&p);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * FD_STEP;
            let down = f(&p);
            let num = (up - down) / (2.0 * FD_STEP);
            let an = a.data()[i];
            diff += (an - num).powi(2);
            na += an * an;
            nn += num * num;
            count += 1;
        }
    }
    (diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300), count)
}

fn tiny_encoder(dims: [usize; 2], heads: [usize; 2]) -> EncoderConfig {
    EncoderConfig {
        patch_size: 2,
        stage_depths: vec![1, 1],
        stage_dims: dims.to_vec(),
        window_size: 2,
        num_heads: heads.to_vec(),
        shifted_windows: true,
        input_size: 8,
    }
}

#[test]
fn criterion_1_gradient_fidelity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut details = Vec::new();
    let mut pass = true;

    // (a) contrastive loss through student encoder + projector
    let setup = PretrainSetup {
        encoder: tiny_encoder([8, 16], [2, 2]),
        augment: AugmentConfig::identity(8),
        projector: ProjectorConfig { hidden_dim: 8, output_dim: 6, num_layers: 2 },
        decoder: DecoderConfig { fusion_channels: 4, num_fusion_layers: 2 },
        disable_reconstruction: true,
        ..Default::default()
    };
    let mut state = TwinState::<f64>::new(&setup, 10, 1).unwrap();
    state.teacher = TwinState::<f64>::new(&setup, 10, 2).unwrap().student;
    state.center = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (xs, xt) = (random_image(&mut rng, 8), random_image(&mut rng, 8));
    let eval = twin_objective(&state, &setup, &xs, &xt).unwrap();
    assert_eq!(eval.total, eval.l1, "s1 = 0 leaves the contrastive term unweighted");
    let n_a = state.student.num_elements();
    let (err_a, _) = fd_relative_error(&state.student, &eval.grads, |p| {
        let mut s = state.clone();
        s.student = p.clone();
        twin_objective(&s, &setup, &xs, &xt).unwrap().total
    });
    pass &= err_a < FD_TOL && n_a <= 5000;
    details.push(format!("contrastive {n_a} params rel {err_a:.2e}"));

    // (b) reconstruction loss through the decoder
    let enc = &setup.encoder;
    let dec = &setup.decoder;
    let ep = encoder::init_params::<f64, _>(enc, &mut rng).unwrap();
    let dp = recon::init_params::<f64, _>(dec, enc, &mut rng).unwrap();
    let x = random_image(&mut rng, 8);
    let pyramid = encoder::encode(&x, enc, &ep).unwrap();
    let (_, grads) = reconstruction_objective(&pyramid, &x, dec, &dp).unwrap();
    let n_b = dp.num_elements();
    let (err_b, _) = fd_relative_error(&dp, &grads, |p| reconstruction_objective(&pyramid, &x, dec, p).unwrap().0);
    pass &= err_b < FD_TOL && n_b <= 5000;
    details.push(format!("reconstruction {n_b} params rel {err_b:.2e}"));

    // (c) Dice + CE through the siamese network and head
    let ft = FinetuneSetup {
        encoder: tiny_encoder([4, 8], [1, 2]),
        head: SegHeadConfig { fusion_dim: 4, ppm_bins: vec![1, 2], num_classes: 5 },
        ..Default::default()
    };
    let fstate = FinetuneState::<f64>::new(&ft, None, 3).unwrap();
    let (pre, post) = (random_image(&mut rng, 8), random_image(&mut rng, 8));
    let target = DamageMask::new(8, 8, (0..64).map(|_| rng.gen_range(0..5)).collect()).unwrap();
    let sample = Labeled { pre: &pre, post: &post, target: &target };
    let (_, grads) = siamese_objective(&fstate, &ft, sample).unwrap();
    let all = fstate.params();
    let n_c = all.num_elements();
    let (err_c, _) = fd_relative_error(&all, &grads, |p| {
        let s = FinetuneState {
            encoder: p.filter_prefix("encoder."),
            head: p.filter_prefix("head."),
            optimizer: Adam::new(0.0),
            step: 0,
        };
        siamese_objective(&s, &ft, sample).unwrap().0
    });
    pass &= err_c < FD_TOL && n_c <= 5000;
    details.push(format!("dice+ce {n_c} params rel {err_c:.2e}"));

    let elapsed = t0.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    verdict(1, "gradient fidelity", pass, &details.join(", "), elapsed);
}

// ---------------------------------------------------------------------------
// 2. EMA / schedule mechanics

#[test]
fn criterion_2_twin_mechanics() {
    let t0 = Instant::now();
    let setup = PretrainSetup {
        encoder: tiny_encoder([8, 16], [2, 2]),
        augment: AugmentConfig { output_size: 8, ..Default::default() },
        projector: ProjectorConfig { hidden_dim: 8, output_dim: 6, num_layers: 2 },
        decoder: DecoderConfig { fusion_channels: 4, num_fusion_layers: 2 },
        hyper: PretrainHyper { learning_rate: 1e-2, ..Default::default() },
        ..Default::default()
    };
    let total = 12;
    let mut state = TwinState::<f32>::new(&setup, total, 4).unwrap();
    let bits = |p: &ParameterSet<f32>| p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let mut pass = bits(&state.teacher) == bits(&state.student);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<Image<f32>> = (0..3).map(|_| random_image(&mut rng, 8).cast()).collect();
    let (mut worst_ema, mut worst_grad) = (0f64, 0f32);
    for _ in 0..total {
        let prev = state.teacher.clone();
        let out = pretrain_step(&mut state, &batch, &setup, 9).unwrap();
        let lam = out.log.lambda;
        for (name, t) in state.teacher.iter() {
            let (p, s) = (prev.get(name).unwrap(), state.student.get(name).unwrap());
            for ((&tv, &pv), &sv) in t.data().iter().zip(p.data()).zip(s.data()) {
                let expected = lam * pv as f64 + (1.0 - lam) * sv as f64;
                worst_ema = worst_ema.max((tv as f64 - expected).abs());
            }
        }
        worst_grad = worst_grad.max(out.teacher_grad_max_abs);
    }
    pass &= worst_ema < 1e-6 && worst_grad == 0.0;
    let base = setup.hyper.lambda_base;
    let l0 = cosine_momentum(0, 1000, base).unwrap();
    let lt = cosine_momentum(1000, 1000, base).unwrap();
    let lh = cosine_momentum(500, 1000, base).unwrap();
    pass &= l0 == base && lt == 1.0 && lh == 1.0 - (1.0 - base) / 2.0;
    let elapsed = t0.elapsed();
    let detail = format!(
        "init bit-exact, max EMA dev {worst_ema:.1e}, max teacher grad {worst_grad}, λ(0)={l0} λ(T/2)={lh} λ(T)={lt}"
    );
    verdict(2, "teacher EMA and momentum schedule", pass, &detail, elapsed);
}

// ---------------------------------------------------------------------------
// 3. collapse diagnostic

const COLLAPSE_STEPS: u64 = 300;
const COLLAPSE_WINDOW: u64 = 50;

fn collapse_setup(centering: bool) -> PretrainSetup {
    let mut setup = PretrainSetup::default();
    setup.encoder.input_size = 32;
    setup.augment.output_size = 32;
    setup.hyper.learning_rate = 1e-3;
    setup.hyper.batch_size = 4;
    setup.disable_centering = !centering;
    setup
}

/// Largest component of the teacher's batch-mean distribution, averaged over
/// the last `COLLAPSE_WINDOW` steps.
fn collapse_run(centering: bool, seed: u64) -> f32 {
    let setup = collapse_setup(centering);
    let bs = setup.hyper.batch_size;
    let pairs = generate_synthetic_set::<f32>(seed, 32, 32, 5).unwrap();
    let images: Vec<Image<f32>> = pairs.iter().flat_map(|p| [p.pre.clone(), p.post.clone()]).collect();
    let mut state = TwinState::<f32>::new(&setup, COLLAPSE_STEPS, seed).unwrap();
    let mut running = vec![0f32; setup.projector.output_dim];
    for s in 0..COLLAPSE_STEPS {
        let start = s as usize * bs;
        let batch: Vec<Image<f32>> = (0..bs).map(|i| images[(start + i) % images.len()].clone()).collect();
        let out = pretrain_step(&mut state, &batch, &setup, seed).unwrap();
        if s >= COLLAPSE_STEPS - COLLAPSE_WINDOW {
            for (r, p) in running.iter_mut().zip(&out.teacher_mean_probs) {
                *r += p / COLLAPSE_WINDOW as f32;
            }
        }
    }
    running.into_iter().fold(0.0, f32::max)
}

#[test]
fn criterion_3_collapse_diagnostic() {
    let t0 = Instant::now();
    let seeds = [0u64, 1, 2];
    let with: Vec<f32> = seeds.iter().map(|&s| collapse_run(true, s)).collect();
    let without: Vec<f32> = seeds.iter().map(|&s| collapse_run(false, s)).collect();
    let ok_with = with.iter().filter(|&&m| m < 0.5).count();
    let ok_without = without.iter().filter(|&&m| m > 0.9).count();
    let elapsed = t0.elapsed();
    let pass = ok_with >= 2 && ok_without >= 2 && elapsed < Duration::from_secs(600);
    let detail = format!("max component with centering {with:.4?} ({ok_with}/3 < 0.5), without {without:.4?} ({ok_without}/3 > 0.9)");
    verdict(3, "centering prevents collapse", pass, &detail, elapsed);
}

// ---------------------------------------------------------------------------
// 4. reconstruction trainability

#[test]
fn criterion_4_decoder_fit() {
    let t0 = Instant::now();
    let enc = EncoderConfig::default();
    let dec = DecoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ep = encoder::init_params::<f32, _>(&enc, &mut rng).unwrap();
    let mut dp = recon::init_params::<f32, _>(&dec, &enc, &mut rng).unwrap();
    let images: Vec<Image<f32>> =
        generate_synthetic_set::<f32>(21, 20, 64, 5).unwrap().into_iter().map(|p| p.post).collect();
    let pyramids: Vec<_> = images.iter().map(|x| encoder::encode(x, &enc, &ep).unwrap()).collect();
    let mut opt = Adam::new(1e-3);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut loss = 0.0f32;
        let mut grads: Option<ParameterSet<f32>> = None;
        for (pyr, x) in pyramids.iter().zip(&images) {
            let (l, g) = reconstruction_objective(pyr, x, &dec, &dp).unwrap();
            loss += l / images.len() as f32;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (name, t) in acc.iter_mut() {
                        t.add_assign(g.get(name).unwrap());
                    }
                }
            }
        }
        let mut grads = grads.unwrap();
        for (_, t) in grads.iter_mut() {
            t.scale_in_place(1.0 / images.len() as f32);
        }
        losses.push(loss);
        opt.step(&mut dp, &grads).unwrap();
    }
    let final_loss: f32 =
        pyramids.iter().zip(&images).map(|(p, x)| reconstruction_objective(p, x, &dec, &dp).unwrap().0).sum::<f32>()
            / images.len() as f32;
    let reduction = 1.0 - final_loss / losses[0];
    let elapsed = t0.elapsed();
    let pass = reduction >= 0.5 && elapsed < Duration::from_secs(300);
    let detail = format!("L1 {:.4} -> {final_loss:.4} ({:.1}% reduction)", losses[0], 100.0 * reduction);
    verdict(4, "reconstruction trainability", pass, &detail, elapsed);
}

// ---------------------------------------------------------------------------
// 5. transfer benefit

struct TransferSeed {
    ssl_f1: f64,
    random_f1: f64,
    ssl_loss5: f64,
    random_loss5: f64,
}

fn transfer_run(seed: u64, dir: &Path) -> TransferSeed {
    let mut cfg = RunConfig::default();
    cfg.run.seed = seed;
    cfg.data.synthetic = Some(200);
    cfg.run.pretrain_epochs = 10;
    cfg.run.finetune_epochs = 30;
    cfg.run.labeled_fraction = 0.1;

    let mut pre = cfg.clone();
    pre.run.out = dir.join("pretrain");
    let stage1 = pipeline::run_pretrain(&pre).unwrap();

    let finetune = |random: bool| {
        let mut c = cfg.clone();
        c.run.out = dir.join(if random { "random" } else { "ssl" });
        c.ablation.random_init = random;
        c.run.checkpoint = Some(stage1.checkpoint.clone());
        pipeline::run_finetune(&c).unwrap()
    };
    let ssl = finetune(false);
    let random = finetune(true);
    let f1 = |r: &pipeline::FinetuneRun| r.epochs.last().unwrap().validation.as_ref().unwrap().localization;
    TransferSeed {
        ssl_f1: f1(&ssl),
        random_f1: f1(&random),
        ssl_loss5: ssl.epochs[4].train_loss,
        random_loss5: random.epochs[4].train_loss,
    }
}

#[test]
fn criterion_5_transfer_benefit() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<TransferSeed> = (0..3).map(|s| transfer_run(s, &dir.path().join(s.to_string()))).collect();
    let mean = |f: fn(&TransferSeed) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (ssl, random) = (mean(|r| r.ssl_f1), mean(|r| r.random_f1));
    let faster = runs.iter().filter(|r| r.ssl_loss5 < r.random_loss5).count();
    let elapsed = t0.elapsed();
    let pass = ssl > random && faster >= 2 && elapsed < Duration::from_secs(1800);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "F1 {:.4}/{:.4} loss@5 {:.4}/{:.4}",
                r.ssl_f1, r.random_f1, r.ssl_loss5, r.random_loss5
            )
        })
        .collect();
    let detail = format!(
        "mean localization F1 ssl {ssl:.4} vs random {random:.4}; epoch-5 loss lower with ssl in {faster}/3 [{}]",
        per_seed.join("; ")
    );
    verdict(5, "pre-training beats random init", pass, &detail, elapsed);
}

// ---------------------------------------------------------------------------
// 6. metric oracle

fn brute_f1(pred: &[u8], gt: &[u8], is: impl Fn(u8) -> bool) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        match (is(p), is(g)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        f64::NAN
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn brute_report(pred: &[u8], gt: &[u8]) -> [f64; 6] {
    let class: Vec<f64> = (1..=4u8).map(|c| brute_f1(pred, gt, |v| v == c)).collect();
    let defined: Vec<f64> = class.iter().copied().filter(|v| !v.is_nan()).collect();
    let damage = if defined.is_empty() {
        f64::NAN
    } else if defined.contains(&0.0) {
        0.0
    } else {
        defined.len() as f64 / defined.iter().map(|v| 1.0 / v).sum::<f64>()
    };
    [brute_f1(pred, gt, |v| v >= 1), damage, class[0], class[1], class[2], class[3]]
}

#[test]
fn criterion_6_metric_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut matched, mut nan_cases) = (0, 0);
    for trial in 0..100 {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        // Restricting the label alphabet makes absent classes (NaN) common.
        let alphabet: Vec<u8> = (0..5u8).filter(|_| rng.gen_bool(0.6)).chain([0]).collect();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..h * w).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let (p, g) = (draw(&mut rng), draw(&mut rng));
        let got = report(
            &confusion_counts(&DamageMask::new(h, w, p.clone()).unwrap(), &DamageMask::new(h, w, g.clone()).unwrap())
                .unwrap(),
        );
        let expected = brute_report(&p, &g);
        let same = got.entries().iter().zip(expected).all(|((_, a), b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        if same {
            matched += 1;
        } else {
            writeln!(std::io::stderr(), "trial {trial}: {got:?} vs {expected:?}").unwrap();
        }
        nan_cases += got.class_f1().iter().any(|v| v.is_nan()) as usize;
    }
    let keys: Vec<&str> = F1Report::KEYS.to_vec();
    let pass = matched == 100 && nan_cases > 0 && keys == ["localization", "damage", "no_damage", "minor", "major", "destroyed"];
    let detail = format!("{matched}/100 reports exact, {nan_cases} with an undefined class reported as NaN");
    verdict(6, "metric oracle", pass, &detail, t0.elapsed());
}

// ---------------------------------------------------------------------------
// 7. mask consistency

#[test]
fn criterion_7_mask_consistency() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut consistent, mut invariant) = (0, 0);
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..=24), rng.gen_range(1..=24));
        let scores: Vec<f32> = (0..5 * h * w).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let c: f32 = rng.gen_range(0.01..100.0);
        let pred = PredictionMap::new(h, w, scores.clone()).unwrap();
        let scaled = PredictionMap::new(h, w, scores.iter().map(|v| v * c).collect()).unwrap();
        let (damage, loc) = predict_masks(&pred);
        let pointwise = damage.labels().iter().zip(loc.labels()).all(|(&d, &l)| l == u8::from(d >= 1));
        consistent += pointwise as usize;
        invariant += (predict_masks(&scaled).0 == damage) as usize;
    }
    let pass = consistent == 100 && invariant == 100;
    let detail = format!("localization == (damage >= 1) in {consistent}/100, scaling-invariant argmax in {invariant}/100");
    verdict(7, "mask consistency", pass, &detail, t0.elapsed());
}

// ---------------------------------------------------------------------------
// 8. determinism and persistence

fn small_config(seed: u64, out: &Path) -> RunConfig {
    let text = r#"
        [encoder]
        patch_size = 4
        stage_depths = [1, 1]
        stage_dims = [8, 16]
        window_size = 4
        num_heads = [1, 2]
        input_size = 32
        [projector]
        hidden_dim = 16
        output_dim = 16
        num_layers = 2
        [decoder]
        fusion_channels = 4
        [head]
        fusion_dim = 8
        ppm_bins = [1, 2]
        [pretrain]
        batch_size = 4
        learning_rate = 1e-3
        [finetune]
        batch_size = 2
        [run]
        pretrain_epochs = 2
        finetune_epochs = 2
        labeled_fraction = 0.5
        [data]
        synthetic = 8
    "#;
    let mut cfg = RunConfig::from_toml_str(text).unwrap();
    cfg.run.seed = seed;
    cfg.run.out = out.to_path_buf();
    cfg
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    // Reruns share one output directory, since the embedded config records it.
    let base = dir.path().join("run");
    let full = || {
        let _ = std::fs::remove_dir_all(&base);
        let cfg = small_config(3, &base.join("pre"));
        let stage1 = pipeline::run_pretrain(&cfg).unwrap();
        let mut ft = small_config(3, &base.join("ft"));
        ft.run.checkpoint = Some(stage1.checkpoint);
        let stage2 = pipeline::run_finetune(&ft).unwrap();
        let mut ev = small_config(3, &base.join("eval"));
        ev.run.checkpoint = Some(stage2.checkpoint);
        pipeline::run_evaluate(&ev).unwrap();
        ["pre", "ft", "eval"].map(|d| read_dir_bytes(&base.join(d)))
    };
    let (a, b) = (full(), full());
    let files: usize = a.iter().map(BTreeMap::len).sum();
    let reruns_identical = a == b;
    notes.push(format!("rerun identical across {files} files: {reruns_identical}"));

    // checkpoint round trip
    let ck_path = base.join("pre").join(pipeline::PRETRAIN_CHECKPOINT);
    let ck = Checkpoint::<f32>::load(&ck_path).unwrap();
    let state = ck.to_twin(1e-3).unwrap();
    let again = Checkpoint::from_twin(&state, ck.config.clone());
    let round_trip = again.to_bytes() == std::fs::read(&ck_path).unwrap()
        && Checkpoint::<f32>::from_bytes(&again.to_bytes()).unwrap() == ck;
    notes.push(format!("round trip bit-exact: {round_trip}"));

    // resume at k equals an uninterrupted run to k + 1
    let k = 3;
    let out = dir.path().join("resume");
    let mut straight = small_config(5, &out);
    straight.run.max_steps = Some(k + 1);
    let s = pipeline::run_pretrain(&straight).unwrap();
    let straight_files = read_dir_bytes(&out);
    std::fs::remove_dir_all(&out).unwrap();
    let mut first = small_config(5, &out);
    first.run.max_steps = Some(k);
    let part = pipeline::run_pretrain(&first).unwrap();
    let mut second = first.clone();
    second.run.resume = Some(part.checkpoint.clone());
    second.run.max_steps = Some(k + 1);
    let r = pipeline::run_pretrain(&second).unwrap();
    let teacher_same = s.state.teacher == r.state.teacher;
    let resumed_files = read_dir_bytes(&out);
    let files_same = [pipeline::PRETRAIN_CHECKPOINT, pipeline::PRETRAIN_LOG]
        .iter()
        .all(|f| straight_files.get(*f).is_some() && straight_files.get(*f) == resumed_files.get(*f));
    notes.push(format!(
        "resume at {k} -> {}: teacher identical {teacher_same}, checkpoint and log identical {files_same}",
        k + 1
    ));

    let pass = reruns_identical && round_trip && teacher_same && files_same;
    verdict(8, "determinism and persistence", pass, &notes.join("; "), t0.elapsed());
}

// ---------------------------------------------------------------------------
// 9. data oracle

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Strict inside test for a counter-clockwise convex polygon.
fn inside_convex(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    (0..poly.len()).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) > 0.0
    })
}

#[test]
fn criterion_9_data_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = 0;
    let trials = 200;
    for _ in 0..trials {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let n_poly = rng.gen_range(1..=3);
        let mut anns = Vec::new();
        for _ in 0..n_poly {
            let pts: Vec<(f64, f64)> = (0..rng.gen_range(3..=8))
                .map(|_| (rng.gen_range(-1.0..w as f64 + 1.0), rng.gen_range(-1.0..h as f64 + 1.0)))
                .collect();
            let hull = convex_hull(pts);
            if hull.len() >= 3 {
                anns.push(PolygonAnnotation { vertices: hull, damage_class: rng.gen_range(1..=4) });
            }
        }
        let mask = rasterize_annotations(&anns, h, w).unwrap();
        let brute: Vec<u8> = (0..h * w)
            .map(|i| {
                let c = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                anns.iter().filter(|a| inside_convex(&a.vertices, c)).map(|a| a.damage_class).max().unwrap_or(0)
            })
            .collect();
        exact += (mask.labels() == brute.as_slice()) as usize;
    }

    let pairs = generate_synthetic_set::<f32>(19, 50, 64, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data::export_xbd(&pairs, dir.path()).unwrap();
    let manifest = data::load_dataset(dir.path()).unwrap();
    let loaded: Vec<_> = manifest.pairs.iter().map(|e| data::load_pair::<f32>(e).unwrap()).collect();
    let round_trip = loaded.len() == 50
        && manifest.labeled_ids.len() == 50
        && manifest.issues.is_empty()
        && pairs.iter().zip(&loaded).all(|(a, b)| {
            a.id == b.id && a.damage == b.damage && a.pre.to_u8() == b.pre.to_u8() && a.post.to_u8() == b.post.to_u8()
        });
    let pass = exact == trials && round_trip;
    let detail = format!("rasterization exact on {exact}/{trials} random convex scenes; 50-pair export/load mask-exact: {round_trip}");
    verdict(9, "data oracle", pass, &detail, t0.elapsed());
}
