use vfi_core::attention::WindowSpec;
use vfi_core::denoiser::DenoiserConfig;
use vfi_core::train::{prepare_dit_example, DitExample, DitTrainConfig, DitTrainer, VaeTrainConfig, VaeTrainer};
use vfi_core::vae::{ToyVae, VaeConfig};
use vfi_core::video::{gen_synthetic, SyntheticSpec};
use vfi_core::TilePlan;

const CHUNK: usize = 4;

fn codec() -> ToyVae<f32> {
    ToyVae::new(VaeConfig { latent_channels: 2, base_width: 4, ..VaeConfig::default() }, 1).unwrap()
}

fn model_config() -> DenoiserConfig {
    DenoiserConfig {
        model_dim: 8,
        head_count: 2,
        layer_count: 1,
        token_patch: 1,
        spatial_chunk: 2,
        latent_channels: 2,
        cond_channels: 4,
        mlp_ratio: 2,
        window: WindowSpec::new(1),
    }
}

fn examples(vae: &ToyVae<f32>) -> Vec<DitExample> {
    let tiles = TilePlan::square(16, 16, 8, 4).unwrap();
    (0..2)
        .map(|i| {
            let clip = gen_synthetic(&SyntheticSpec::default(), 13, 16, 16, i).unwrap();
            prepare_dit_example(&clip, vae, &tiles, CHUNK, (2, 4)).unwrap()
        })
        .collect()
}

fn train_config(steps: u64) -> DitTrainConfig {
    DitTrainConfig { steps, batch: 2, ..DitTrainConfig::default() }
}

#[test]
fn examples_cover_every_valid_factor() {
    let vae = codec();
    let ex = &examples(&vae)[0];
    // 13 frames pad to 16 → 8 latent frames in chunks of 2.
    assert_eq!(ex.target.shape(), &[8, 4, 4, 2]);
    assert_eq!(ex.chunk_len, 2);
    assert_eq!(ex.chunk_count(), 4);
    // 12 = 13 − 1 is divisible by 2, 3 and 4.
    let factors: Vec<usize> = ex.conditions.iter().map(|c| c.0).collect();
    assert_eq!(factors, vec![2, 3, 4]);
    for (_, cond) in &ex.conditions {
        assert_eq!(cond.shape(), &[8, 4, 4, 4]);
    }
}

#[test]
fn clip_without_a_valid_factor_is_rejected() {
    let tiles = TilePlan::square(16, 16, 8, 4).unwrap();
    let clip = gen_synthetic(&SyntheticSpec::default(), 6, 16, 16, 0).unwrap();
    assert!(prepare_dit_example(&clip, &codec(), &tiles, CHUNK, (2, 4)).is_err());
}

#[test]
fn zero_steps_keep_initialization() {
    let corpus = examples(&codec());
    let mut t = DitTrainer::new(model_config(), train_config(0)).unwrap();
    let init = t.model.params.clone();
    t.run(&corpus, |_| Ok(())).unwrap();
    assert_eq!(t.model.params, init);
    assert!(t.trace.is_empty());
}

#[test]
fn denoiser_resume_matches_uninterrupted_run() {
    let corpus = examples(&codec());
    let mut full = DitTrainer::new(model_config(), train_config(4)).unwrap();
    full.run(&corpus, |_| Ok(())).unwrap();
    assert!(full.trace.iter().all(|r| r.loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("state");
    let mut part = DitTrainer::new(model_config(), train_config(4)).unwrap();
    part.train_step(&corpus).unwrap();
    part.train_step(&corpus).unwrap();
    part.save(&stem).unwrap();
    let mut resumed = DitTrainer::resume(&stem).unwrap();
    resumed.run(&corpus, |_| Ok(())).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.trace, full.trace);
}

#[test]
fn training_reduces_denoiser_loss() {
    let corpus = examples(&codec());
    let mut t = DitTrainer::new(model_config(), DitTrainConfig { steps: 120, batch: 2, lr: 3e-3, ..DitTrainConfig::default() })
        .unwrap();
    t.run(&corpus, |_| Ok(())).unwrap();
    let mean = |rows: &[vfi_core::train::DitTraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let (head, tail) = (mean(&t.trace[..20]), mean(&t.trace[100..]));
    assert!(tail < head, "loss {head} → {tail}");
}

#[test]
fn codec_training_is_deterministic() {
    let vc = VaeConfig { base_width: 4, ..VaeConfig::default() };
    let tc = VaeTrainConfig { steps: 2, batch: 2, crop: 16, ..VaeTrainConfig::default() };
    let corpus: Vec<_> = (0..2).map(|i| gen_synthetic(&SyntheticSpec::default(), 9, 24, 24, i).unwrap()).collect();
    let run = || {
        let mut t = VaeTrainer::new(vc, tc).unwrap();
        t.run(&corpus, |_| Ok(())).unwrap();
        (t.vae.params, t.trace)
    };
    assert_eq!(run(), run());
}
