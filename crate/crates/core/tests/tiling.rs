use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vfi_core::tiling::{seam_weight_sums, tiled_decode, tiled_encode, IdentityCodec, LatentGrid};
use vfi_core::{ChunkPlan, FrameSequence, TilePlan};

fn random_video(t: usize, h: usize, w: usize, seed: u64) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrameSequence::new(t, h, w, 3, (0..t * h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn plan_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..6, 1usize..6, 2usize..12)
        .prop_flat_map(|(rows, cols, tile)| (Just(rows), Just(cols), Just(tile), 1..=tile))
        .prop_map(|(rows, cols, tile, stride)| (tile + rows * stride - stride / 2, tile + (cols - 1) * stride + 1, tile, stride))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_round_trip_is_exact((h, w, tile, stride) in plan_strategy(), seed in 0u64..1000) {
        let plan = TilePlan::square(h, w, tile, stride).unwrap();
        let video = random_video(2, h, w, seed);
        let chunks = ChunkPlan::new(2, 1).unwrap();
        let codec = IdentityCodec { channels: 3 };
        let latent = tiled_encode(&video, &codec, &plan, &chunks).unwrap();
        let max_enc = latent.values.data().iter().zip(video.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(max_enc <= 1e-6, "encode error {max_enc}");
        let back = tiled_decode(&latent, &codec, &plan, &chunks, None).unwrap();
        let max_dec = back.data().iter().zip(video.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(max_dec <= 1e-6, "decode error {max_dec}");
    }

    #[test]
    fn blend_weights_partition_unity((h, w, tile, stride) in plan_strategy()) {
        let plan = TilePlan::square(h, w, tile, stride).unwrap();
        for s in seam_weight_sums(&plan).unwrap() {
            prop_assert!((s - 1.0).abs() <= 1e-9, "weight sum {s}");
        }
    }

    #[test]
    fn tiles_cover_every_pixel((h, w, tile, stride) in plan_strategy()) {
        let plan = TilePlan::square(h, w, tile, stride).unwrap();
        let mut seen = vec![false; h * w];
        for r in plan.rows() {
            for c in plan.cols() {
                for y in r.start..r.end {
                    for x in c.start..c.end {
                        seen[y * w + x] = true;
                    }
                }
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
    }
}

#[test]
fn latent_grid_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = TilePlan::square(8, 8, 4, 2).unwrap();
    let chunks = ChunkPlan::new(4, 2).unwrap();
    let latent = tiled_encode(&random_video(4, 8, 8, 3), &IdentityCodec { channels: 3 }, &plan, &chunks).unwrap();
    let stem = dir.path().join("latent");
    latent.save(&stem).unwrap();
    assert_eq!(LatentGrid::load(&stem).unwrap(), latent);
}
