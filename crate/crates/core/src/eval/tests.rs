use super::*;
use crate::data::{generate_scene, ChannelStats, SynthConfig};
use crate::error::Error;
use crate::model::{ConvTr, ModelConfig, Variant};

fn model(patch: usize) -> ConvTr<f32> {
    let cfg = ModelConfig { patch, depth: 1, heads: 2, d_head: 4, widths: [4, 4, 6, 8], ..ModelConfig::default() };
    ConvTr::new(&cfg, 3).unwrap()
}

fn scene(h: usize, w: usize) -> crate::data::Scene {
    generate_scene(&SynthConfig { height: h, width: w, smoothness: 6.0, seed: 4, ..SynthConfig::default() }, "t").unwrap()
}

#[test]
fn small_scene_matches_direct_prediction_on_the_padded_input() {
    let (m, s) = (model(32), scene(20, 27));
    let stats = ChannelStats::compute([&s]).unwrap();
    let plan = plan_tiles(20, 27, 32, 8).unwrap();
    assert_eq!(plan.tiles.len(), 1);
    let out = tiled_inference(&m, &s, &plan, &stats, 1).unwrap();
    let direct = m.predict(&tile_input(&s, &plan.tiles[0], 32, &stats)).unwrap();
    for r in 0..20 {
        for c in 0..27 {
            assert_eq!(out.classes.data[r * 27 + c], direct.classes.data[r * 32 + c]);
        }
    }
}

#[test]
fn stitched_output_is_deterministic_and_matches_each_tile() {
    let (m, s) = (model(16), scene(40, 36));
    let stats = ChannelStats::compute([&s]).unwrap();
    let plan = plan_tiles(40, 36, 16, 4).unwrap();
    let a = tiled_inference(&m, &s, &plan, &stats, 1).unwrap();
    let b = tiled_inference(&m, &s, &plan, &stats, 0).unwrap();
    assert_eq!(a.classes, b.classes);
    assert_eq!(a.probs, b.probs);
    let mut written = vec![0u8; 40 * 36];
    for tile in &plan.tiles {
        let direct = m.predict(&tile_input(&s, tile, 16, &stats)).unwrap();
        let k = tile.keep;
        for r in k.row0..k.row1 {
            for c in k.col0..k.col1 {
                written[r * 36 + c] += 1;
                assert_eq!(a.classes.data[r * 36 + c], direct.classes.data[(r - tile.row) * 16 + c - tile.col]);
            }
        }
    }
    assert!(written.iter().all(|&n| n == 1));
}

#[test]
fn numeric_faults_carry_the_tile_origin() {
    let (mut m, s) = (model(16), scene(16, 40));
    m.down[0].bn.shift.data_mut()[0] = f32::INFINITY;
    let stats = ChannelStats::compute([&s]).unwrap();
    let plan = plan_tiles(16, 40, 16, 0).unwrap();
    match tiled_inference(&m, &s, &plan, &stats, 1) {
        Err(Error::NumericFault { location }) => assert!(location.contains("tile at row 0, col 0"), "{location}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn class_map_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out.segm");
    save_class_map(&p, "x", 2, 3, &[0, 1, 2, 2, 1, 0]).unwrap();
    assert_eq!(load_class_map(&p).unwrap(), ("x".to_string(), 2, 3, vec![0, 1, 2, 2, 1, 0]));
    assert!(save_class_map(&p, "x", 2, 2, &[0]).is_err());
}

#[test]
fn benchmark_counts_only_timed_runs() {
    let m = model(16);
    let r = benchmark_inference(&m, 24, 5, 1, 4, 1).unwrap();
    assert_eq!(r.times_ms.len(), 5);
    assert_eq!(r.variant, Variant::ConvTr);
    assert!(benchmark_inference(&m, 24, 2, 1, 4, 1).is_err());
    assert!(benchmark_inference(&m, 24, 3, 0, 4, 1).is_err());
}
