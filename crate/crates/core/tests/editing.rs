mod common;

use arpg::decoding::{expand, expansion_positions, inpaint, DecodeConfig, ExpandMode};
use arpg::training::{ToyDataset, ToyDatasetSpec, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn inpaint_keeps_every_known_token() {
    let config = common::tiny_config();
    let model = common::model::<f32>(&config, 1);
    let ds = ToyDataset::new(ToyDatasetSpec::for_model(&config, 0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..30 {
        let grid = ds.sample(trial % 4, &mut rng);
        let known: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
        let dc = DecodeConfig { steps: 1 + trial % 6, cfg_scale: 2.0, seed: trial as u64, ..DecodeConfig::default() };
        let out = inpaint(&model, &grid, &known, &dc).unwrap();
        let g = &out.grids[0];
        for i in 0..16 {
            if known[i] {
                assert_eq!(g.tokens[i], grid.tokens[i]);
            }
        }
        let unknown = known.iter().filter(|k| !**k).count();
        assert_eq!(out.prefilled, 16 - unknown);
        assert_eq!(out.step_counts.iter().sum::<usize>(), unknown);
        assert!(out.step_counts.len() <= unknown.max(1));
    }
}

#[test]
fn inpaint_with_everything_known_is_identity() {
    let config = common::tiny_config();
    let model = common::model::<f32>(&config, 2);
    let grid = TokenGrid::new(4, 4, (0..16).map(|i| i % 7).collect(), 1).unwrap();
    let out = inpaint(&model, &grid, &[true; 16], &DecodeConfig::default()).unwrap();
    assert_eq!(out.grids[0], grid);
    assert!(out.step_counts.is_empty());
}

#[test]
fn outpaint_beyond_trained_grid_keeps_base() {
    let config = common::tiny_config();
    let model = common::model::<f32>(&config, 4);
    let base = TokenGrid::new(4, 4, (0..16).map(|i| (i * 3) % 16).collect(), 2).unwrap();
    for (h2, w2, mode) in [
        (4, 8, ExpandMode::Outpaint { row: 0, col: 4 }),
        (6, 6, ExpandMode::Outpaint { row: 1, col: 1 }),
        (8, 8, ExpandMode::Resolution),
    ] {
        let out = expand(&model, &base, h2, w2, mode, &DecodeConfig { steps: 4, ..DecodeConfig::default() }).unwrap();
        let g = &out.grids[0];
        assert_eq!((g.height, g.width), (h2, w2));
        let positions = expansion_positions(4, 4, h2, w2, mode).unwrap();
        for (p, &t) in positions.iter().zip(&base.tokens) {
            assert_eq!(g.tokens[p - 1], t);
        }
        assert_eq!(out.prefilled, 16);
    }
}

#[test]
fn expansion_rejects_misfits() {
    let config = common::tiny_config();
    let model = common::model::<f32>(&config, 4);
    let base = TokenGrid::new(4, 4, vec![0; 16], 0).unwrap();
    let dc = DecodeConfig::default();
    assert!(expand(&model, &base, 4, 6, ExpandMode::Outpaint { row: 0, col: 3 }, &dc).is_err());
    assert!(expand(&model, &base, 3, 8, ExpandMode::Resolution, &dc).is_err());
}
