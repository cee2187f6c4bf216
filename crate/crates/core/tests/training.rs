//! Short seeded training runs and end-to-end pipeline contracts on reduced
//! configurations.

use std::path::Path;

use bda_core::config::RunConfig;
use bda_core::data::{self, generate_synthetic_set};
use bda_core::downstream::{finetune_step, FinetuneSetup, FinetuneState, Labeled, SegHeadConfig};
use bda_core::encoder::EncoderConfig;
use bda_core::pipeline;
use bda_core::pretrain::{pretrain_step, PretrainSetup, TwinState};
use bda_core::Image;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        patch_size: 4,
        stage_depths: vec![1, 1],
        stage_dims: vec![8, 16],
        window_size: 4,
        num_heads: vec![1, 2],
        shifted_windows: true,
        input_size: 32,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn pretraining_lowers_the_total_loss() {
    let mut setup = PretrainSetup::default();
    setup.encoder.input_size = 32;
    setup.augment.output_size = 32;
    setup.hyper.learning_rate = 1e-3;
    setup.hyper.batch_size = 4;
    let steps = 200;
    let images: Vec<Image<f32>> = generate_synthetic_set::<f32>(4, 16, 32, 5)
        .unwrap()
        .into_iter()
        .flat_map(|p| [p.pre, p.post])
        .collect();
    assert_eq!(images.len(), 32);
    let mut state = TwinState::<f32>::new(&setup, steps, 4).unwrap();
    let mut totals = Vec::new();
    for s in 0..steps as usize {
        let batch: Vec<Image<f32>> = (0..4).map(|i| images[(s * 4 + i) % images.len()].clone()).collect();
        totals.push(pretrain_step(&mut state, &batch, &setup, 4).unwrap().log.total);
    }
    let (first, last) = (mean(&totals[..20]), mean(&totals[totals.len() - 20..]));
    assert!(last < first, "20-step mean total loss {first} -> {last}");
}

#[test]
fn finetuning_lowers_the_loss_by_thirty_percent() {
    let setup = FinetuneSetup {
        encoder: small_encoder(),
        head: SegHeadConfig { fusion_dim: 8, ppm_bins: vec![1, 2], num_classes: 5 },
        learning_rate: 1e-3,
        ..Default::default()
    };
    let pairs = generate_synthetic_set::<f32>(8, 20, 32, 5).unwrap();
    let mut state = FinetuneState::<f32>::new(&setup, None, 8).unwrap();
    let mut losses = Vec::new();
    for s in 0..300usize {
        let batch: Vec<Labeled<'_, f32>> = (0..2)
            .map(|i| {
                let p = &pairs[(s * 2 + i) % pairs.len()];
                Labeled { pre: &p.pre, post: &p.post, target: &p.damage }
            })
            .collect();
        losses.push(finetune_step(&mut state, &batch, &setup).unwrap().loss);
    }
    let (first, last) = (mean(&losses[..20]), mean(&losses[losses.len() - 20..]));
    assert!(last <= 0.7 * first, "20-step mean loss {first} -> {last}");
}

#[test]
fn one_matched_pair_with_labels_is_one_labeled_pair() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = generate_synthetic_set::<f32>(2, 1, 32, 3).unwrap();
    data::export_xbd(&pairs, dir.path()).unwrap();
    let m = data::load_dataset(dir.path()).unwrap();
    assert_eq!(m.pairs.len(), 1);
    assert_eq!(m.labeled_ids.len(), 1);
    assert!(m.issues.is_empty());
}

fn dataset_config(root: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = small_encoder();
    cfg.augment.output_size = 32;
    cfg.projector.hidden_dim = 16;
    cfg.projector.output_dim = 16;
    cfg.head.fusion_dim = 8;
    cfg.head.ppm_bins = vec![1, 2];
    cfg.data.synthetic = None;
    cfg.data.root = Some(root.to_path_buf());
    cfg.run.out = out.to_path_buf();
    cfg
}

#[test]
fn visualize_panel_has_a_mask_tile_only_for_labeled_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    data::export_xbd(&generate_synthetic_set::<f32>(3, 2, 32, 4).unwrap(), &root).unwrap();
    std::fs::remove_file(root.join("labels/synthetic_00001_post_disaster.json")).unwrap();

    let mut cfg = dataset_config(&root, &dir.path().join("pre"));
    cfg.run.max_steps = Some(1);
    let ck = pipeline::run_pretrain(&cfg).unwrap().checkpoint;

    let mut vis = dataset_config(&root, &dir.path().join("vis"));
    vis.run.checkpoint = Some(ck);
    let labeled = pipeline::run_visualize(&vis).unwrap();
    assert_eq!(labeled.tiles, 4);
    let panel = Image::<f32>::load_rgb(&labeled.panel).unwrap();
    assert_eq!((panel.height(), panel.width()), (32, 4 * 32));

    vis.run.visualize_index = 1;
    let unlabeled = pipeline::run_visualize(&vis).unwrap();
    assert_eq!(unlabeled.tiles, 3);
    let panel = Image::<f32>::load_rgb(&unlabeled.panel).unwrap();
    assert_eq!(panel.width(), 3 * 32);
}
