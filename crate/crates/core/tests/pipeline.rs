use image::GrayImage;
use mdn_core::mixture::{head_width, MixtureParams, RawHeadOutput};
use mdn_core::network::{Checkpoint, Network, NetworkConfig};
use mdn_core::pipeline::*;
use mdn_core::synth::{generate_image, SceneConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const S: usize = 50;

fn comp(x_px: f64, y_px: f64, sigma_px: f64, alpha: f64) -> Component {
    Component {
        alpha,
        mu: [x_px / S as f64, y_px / S as f64],
        sigma: sigma_px / S as f64,
    }
}

fn single_patch_map(components: &[Component]) -> ProbabilityMap {
    stitch(&[((0, 0), render_probmap(components, S))], S, S, S).unwrap()
}

fn argmax(values: &[f64], width: usize) -> (usize, usize) {
    let i = values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > values[best] { i } else { best });
    (i % width, i / width)
}

#[test]
fn rendering_is_translation_equivariant() {
    let base = argmax(&render_probmap(&[comp(20.5, 22.5, 2.5, 1.0)], S), S);
    assert_eq!(base, (20, 22));
    for dx in 0..8 {
        for dy in 0..8 {
            let shifted = render_probmap(&[comp(20.5 + dx as f64, 22.5 + dy as f64, 2.5, 1.0)], S);
            assert_eq!(argmax(&shifted, S), (base.0 + dx, base.1 + dy));
        }
    }
}

// Exhaustive oracle: the largest value in each half of the map.
#[test]
fn two_gaussians_give_two_peaks() {
    let map = single_patch_map(&[comp(14.5, 25.5, 3.0, 0.5), comp(34.5, 25.5, 3.0, 0.5)]);
    let left: Vec<f64> = (0..S * S)
        .map(|i| if i % S < 25 { map.values[i] } else { 0.0 })
        .collect();
    let right: Vec<f64> = (0..S * S)
        .map(|i| if i % S >= 25 { map.values[i] } else { 0.0 })
        .collect();
    let expected = [argmax(&left, S), argmax(&right, S)];
    let peaks = find_peaks(&map, 6.0, PeakThreshold::Relative(DEFAULT_PEAK_FRACTION));
    assert_eq!(peaks.len(), 2);
    for (p, mu) in peaks.iter().zip([[14.5, 25.5], [34.5, 25.5]]) {
        assert!(expected.contains(&(p.x as usize, p.y as usize)));
        assert!((p.x + 0.5 - mu[0]).hypot(p.y + 0.5 - mu[1]) <= 1.0);
    }
}

#[test]
fn raising_alpha_threshold_never_adds_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let k = rng.random_range(1..12);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..2.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let params = MixtureParams::new(
            logits.iter().map(|l| l.exp() / z).collect(),
            (0..k).map(|_| [rng.random(), rng.random()]).collect(),
            vec![0.05; k],
            0.9,
        )
        .unwrap();
        let mut prev = usize::MAX;
        for t in [0.0, 0.001, 0.01, 0.05, 0.1, 0.3, 0.6, 1.0] {
            let n = filter_components(&params, 0.5, t).len();
            assert!(n <= prev);
            prev = n;
        }
    }
}

#[test]
fn stitching_ignores_grid_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let offsets = mdn_core::tiling::tile_offsets(120, 95, S, 20).unwrap();
    let mut grids: Vec<((usize, usize), Vec<f64>)> = offsets
        .iter()
        .map(|&o| (o, (0..S * S).map(|_| rng.random::<f64>()).collect()))
        .collect();
    let reference = stitch(&grids, S, 120, 95).unwrap();
    for _ in 0..5 {
        rand::seq::SliceRandom::shuffle(grids.as_mut_slice(), &mut rng);
        assert_eq!(stitch(&grids, S, 120, 95).unwrap(), reference);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stitch_matches_per_pixel_accumulation(seed in any::<u64>(), h in 50usize..130, w in 50usize..130, stride in 10usize..=50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = mdn_core::tiling::tile_offsets(h, w, S, stride).unwrap();
        let grids: Vec<((usize, usize), Vec<f64>)> = offsets
            .iter()
            .map(|&o| (o, (0..S * S).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let map = stitch(&grids, S, h, w).unwrap();
        for y in (0..h).step_by(7) {
            for x in (0..w).step_by(5) {
                let covering: Vec<f64> = grids
                    .iter()
                    .filter(|((r, c), _)| (*r..r + S).contains(&y) && (*c..c + S).contains(&x))
                    .map(|((r, c), g)| g[(y - r) * S + (x - c)])
                    .collect();
                let want = covering.iter().sum::<f64>() / covering.len() as f64;
                prop_assert!((map.get(x, y) - want).abs() < 1e-12);
                prop_assert_eq!(map.coverage[y * w + x] as usize, covering.len());
            }
        }
    }

    #[test]
    fn peaks_keep_their_distance(seed in any::<u64>(), min_dist in 1.0f64..9.0, levels in 2u32..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (40, 30);
        // Few distinct levels force plenty of ties.
        let values: Vec<f64> = (0..w * h).map(|_| rng.random_range(0..levels) as f64).collect();
        let map = ProbabilityMap { width: w, height: h, values, coverage: vec![1; w * h] };
        let peaks = find_peaks(&map, min_dist, PeakThreshold::Absolute(0.0));
        for (i, a) in peaks.iter().enumerate() {
            prop_assert!(a.score > 0.0);
            for b in &peaks[i + 1..] {
                prop_assert!((a.x - b.x).hypot(a.y - b.y) >= min_dist);
            }
        }
        for pair in peaks.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
    }
}

fn test_checkpoint(k: usize, seed: u64) -> Checkpoint {
    let mut net = Network::<f32>::new(NetworkConfig {
        k,
        seed,
        ..NetworkConfig::default()
    })
    .unwrap();
    // Open the gate so patches contribute to the map.
    let last = net.params().len() - 1;
    let gate = head_width(k) - 1;
    net.params_mut()[last][gate] = 3.0;
    Checkpoint::untrained(net)
}

fn scene_image(size: usize, seed: u64) -> GrayImage {
    generate_image(&SceneConfig {
        image_size: size,
        blob_count: (10, 20),
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
    .image
}

#[test]
fn quarter_stride_tiles_361_patches() {
    let ck = test_checkpoint(5, 1);
    let image = scene_image(500, 1);
    let predictions = tile_and_predict(&image, &ck, 25, 1).unwrap();
    assert_eq!(predictions.len(), 361);
    assert_eq!(predictions[0].offset, (0, 0));
    assert_eq!(predictions[360].offset, (450, 450));
}

#[test]
fn detect_equals_manual_composition() {
    let ck = test_checkpoint(8, 3);
    let image = scene_image(130, 5);
    let config = DetectConfig {
        stride: 40,
        ..DetectConfig::default()
    };
    let result = detect(&image, &ck, &config).unwrap();

    let predictions = tile_and_predict(&image, &ck, 40, 1).unwrap();
    let grids: Vec<_> = predictions
        .iter()
        .map(|p| {
            let kept = filter_components(&p.params, config.e_thresh, config.alpha_thresh);
            (p.offset, render_probmap(&kept, S))
        })
        .collect();
    let map = stitch(&grids, S, 130, 130).unwrap();
    let peaks = find_peaks(&map, config.min_distance_px, config.peak_threshold);
    assert_eq!(result.predictions, predictions);
    assert_eq!(result.map, map);
    assert_eq!(result.detections, peaks);
    assert!(!peaks.is_empty());
    for d in &peaks {
        assert!(d.x < 130.0 && d.y < 130.0);
        assert!(result.dominant_component(d).is_some());
    }

    assert_eq!(detect(&image, &ck, &config).unwrap(), result);
    let parallel = detect(
        &image,
        &ck,
        &DetectConfig {
            workers: 3,
            ..config
        },
    )
    .unwrap();
    assert_eq!(parallel, result);
}

#[test]
fn raw_output_feeds_the_filter() {
    let k = 2;
    let mut v = vec![10.0, -10.0, 0.3, 0.3, 0.8, 0.8, -3.0, -3.0, 5.0];
    assert_eq!(v.len(), head_width(k));
    let params = mdn_core::mixture::constrain(&RawHeadOutput::new(v.clone(), k).unwrap()).unwrap();
    assert_eq!(filter_components(&params, 0.5, 0.001).len(), 1);
    *v.last_mut().unwrap() = -5.0;
    let params = mdn_core::mixture::constrain(&RawHeadOutput::new(v, k).unwrap()).unwrap();
    assert!(filter_components(&params, 0.5, 0.001).is_empty());
}

#[test]
fn exported_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let map = single_patch_map(&[comp(14.5, 25.5, 3.0, 0.5), comp(34.5, 25.5, 3.0, 0.5)]);
    let dets = find_peaks(&map, 6.0, PeakThreshold::Relative(DEFAULT_PEAK_FRACTION));
    let csv = dir.path().join("d.csv");
    write_detections_csv(&csv, &dets).unwrap();
    let back = read_detections_csv(&csv).unwrap();
    assert_eq!(back.len(), dets.len());
    for (a, b) in back.iter().zip(&dets) {
        assert_eq!((a.x, a.y), (b.x, b.y));
        assert!((a.score - b.score).abs() <= 1e-9 * b.score);
    }
    let png = dir.path().join("m.png");
    write_probmap_png(&png, &map).unwrap();
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (S as u32, S as u32));
    let max: f64 = std::fs::read_to_string(probmap_sidecar(&png))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((max - map.max()).abs() <= 1e-9 * map.max());
}
