use super::*;
use crate::seed::stream;
use proptest::prelude::*;
use rand::Rng;

fn cfg() -> FeatureConfig {
    FeatureConfig::default()
}

fn entry_index(layout: &FeatureLayout, name: &str) -> usize {
    layout
        .entries()
        .iter()
        .position(|e| e == name)
        .unwrap_or_else(|| panic!("no layout entry named {name}"))
}

fn by_name<'a>(layout: &FeatureLayout, vec: &'a [f64], name: &str) -> f64 {
    vec[entry_index(layout, name)]
}

fn image_from(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> crate::grid::MultiChannelImage {
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(f(x, y));
        }
    }
    crate::grid::MultiChannelImage::new(w, h, 1, data).unwrap()
}

#[test]
fn constant_patch_has_degenerate_statistics() {
    let img = image_from(9, 9, |_, _| 5.0);
    let v = patch_features(&img, None, (4, 4), 3, &cfg()).unwrap();
    let layout = patch_layout(&cfg(), 1);
    assert_eq!(v.len(), layout.len());
    for name in ["mean", "max", "min", "median"] {
        assert_eq!(by_name(&layout, &v, &format!("ch0.{name}")), 5.0);
    }
    for name in [
        "std", "entropy", "sobel", "gradient", "laplacian", "kurtosis", "skewness",
        "curv.mean", "curv.gauss", "symmetry",
    ] {
        assert_eq!(by_name(&layout, &v, &format!("ch0.{name}")), 0.0, "{name}");
    }
    assert!(by_name(&layout, &v, "ch0.dog.s1-2").abs() < 1e-6);
    for oi in [0, 45, 90, 135] {
        for wl in [4, 8] {
            assert!(by_name(&layout, &v, &format!("ch0.gabor.o{oi}.w{wl}")).abs() < 1e-6);
        }
    }
    assert_eq!(by_name(&layout, &v, "ch0.neighborhood"), 5.0);
    assert_eq!(by_name(&layout, &v, "proj.x"), 0.5);
}

#[test]
fn mirror_symmetric_image_has_zero_symmetry_feature() {
    let img = image_from(8, 6, |x, y| {
        let d = (x as f32 - 3.5).abs();
        d * d + y as f32
    });
    let layout = patch_layout(&cfg(), 1);
    for center in [(4, 3), (1, 1), (6, 4)] {
        let v = patch_features(&img, None, center, 4, &cfg()).unwrap();
        assert_eq!(by_name(&layout, &v, "ch0.symmetry"), 0.0);
    }
}

#[test]
fn ramp_patch_matches_finite_difference_oracle() {
    // I(x, y) = x on a 9x9 image; the centered 5x5 patch sees only interior
    // pixels, where central differences give gradient 1 and Laplacian 0.
    let img = image_from(9, 9, |x, _| x as f32);
    let layout = patch_layout(&cfg(), 1);
    let v = patch_features(&img, None, (4, 4), 5, &cfg()).unwrap();
    let mut grad_sum = 0.0f64;
    let mut lap_sum = 0.0f64;
    for y in 2..=6i64 {
        for x in 2..=6i64 {
            let i = |x: i64, _y: i64| x as f64; // the ramp, analytically
            let gx = (i(x + 1, y) - i(x - 1, y)) / 2.0;
            let gy = (i(x, y + 1) - i(x, y - 1)) / 2.0;
            grad_sum += (gx * gx + gy * gy).sqrt();
            lap_sum += i(x + 1, y) + i(x - 1, y) + i(x, y + 1) + i(x, y - 1) - 4.0 * i(x, y);
        }
    }
    let grad_oracle = grad_sum / 25.0;
    let lap_oracle = lap_sum / 25.0;
    assert_eq!(grad_oracle, 1.0);
    assert_eq!(lap_oracle, 0.0);
    assert!((by_name(&layout, &v, "ch0.gradient") - grad_oracle).abs() < 1e-9);
    assert!((by_name(&layout, &v, "ch0.laplacian") - lap_oracle).abs() < 1e-9);
    assert!((by_name(&layout, &v, "ch0.mean") - 4.0).abs() < 1e-12);
}

#[test]
fn single_pixel_superpixel_features() {
    let img = image_from(6, 6, |x, y| (x * y) as f32);
    let layout = superpixel_layout(&cfg(), 1);
    let v = superpixel_features(&img, None, &[(3, 2)], None, &cfg()).unwrap();
    assert_eq!(by_name(&layout, &v, "ch0.mean"), 6.0);
    assert_eq!(by_name(&layout, &v, "ch0.std"), 0.0);
    assert_eq!(by_name(&layout, &v, "ch0.median"), 6.0);
}

#[test]
fn whole_image_constant_superpixel() {
    let img = image_from(8, 8, |_, _| 2.0);
    let layout = superpixel_layout(&cfg(), 1);
    let all: Vec<(usize, usize)> = (0..8).flat_map(|y| (0..8).map(move |x| (x, y))).collect();
    let v = superpixel_features(&img, None, &all, None, &cfg()).unwrap();
    assert_eq!(by_name(&layout, &v, "ch0.entropy"), 0.0);
    assert_eq!(by_name(&layout, &v, "proj.x"), 0.5);
    assert_eq!(by_name(&layout, &v, "proj.y"), 0.5);
}

#[test]
fn superpixel_moments_match_scalar_oracle() {
    let mut rng = stream(7, "feat-test-moments", 0);
    let img = image_from(16, 16, |_, _| 0.0); // replaced below
    let data: Vec<f32> = (0..16 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let img = crate::grid::MultiChannelImage::new(img.width(), img.height(), 1, data).unwrap();
    let set: Vec<(usize, usize)> = (0..50)
        .map(|_| (rng.gen_range(0..16), rng.gen_range(0..16)))
        .collect();
    let layout = superpixel_layout(&cfg(), 1);
    let v = superpixel_features(&img, None, &set, None, &cfg()).unwrap();

    let vals: Vec<f64> = set.iter().map(|&(x, y)| f64::from(img.get(0, x, y))).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = vals.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let std = m2.sqrt();
    let skew = m3 / (m2 * std);
    let kurt = m4 / (m2 * m2) - 3.0;
    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = (sorted[24] + sorted[25]) / 2.0;

    assert!((by_name(&layout, &v, "ch0.mean") - mean).abs() <= 1e-9);
    assert!((by_name(&layout, &v, "ch0.std") - std).abs() <= 1e-9);
    assert!((by_name(&layout, &v, "ch0.skewness") - skew).abs() <= 1e-9);
    assert!((by_name(&layout, &v, "ch0.kurtosis") - kurt).abs() <= 1e-9);
    assert!((by_name(&layout, &v, "ch0.median") - median).abs() <= 1e-9);
    assert_eq!(by_name(&layout, &v, "ch0.max"), *sorted.last().unwrap());
    assert_eq!(by_name(&layout, &v, "ch0.min"), sorted[0]);
}

#[test]
fn layout_is_a_pure_function_of_config_and_channels() {
    let a = patch_layout(&cfg(), 3);
    let b = patch_layout(&cfg(), 3);
    assert_eq!(a.entries(), b.entries());
    assert_eq!(a.fingerprint(), b.fingerprint());

    let sp = superpixel_layout(&cfg(), 3);
    assert_ne!(a.fingerprint(), sp.fingerprint());

    let with_ctx = patch_layout(&cfg().with_context(4), 3);
    assert_eq!(with_ctx.len(), a.len() + 8);
    assert_ne!(with_ctx.fingerprint(), a.fingerprint());

    let sp_ctx = superpixel_layout(&cfg().with_context(4), 3);
    assert_eq!(sp_ctx.len(), sp.len() + 4);

    let two_ch = patch_layout(&cfg(), 2);
    assert_ne!(two_ch.fingerprint(), a.fingerprint());
}

#[test]
fn context_block_carries_center_and_patch_mean() {
    let img = image_from(6, 6, |x, y| (x + y) as f32);
    let classes = 3;
    let mut scores = vec![0.0f32; 6 * 6 * classes];
    let mut rng = stream(11, "feat-test-ctx", 0);
    for v in scores.iter_mut() {
        *v = rng.gen_range(0.1..1.0);
    }
    let map = crate::grid::ProbabilityMap::from_scores(6, 6, classes, scores).unwrap();
    let c = cfg().with_context(classes);
    let layout = patch_layout(&c, 1);
    let (cx, cy, side) = (2, 3, 3);
    let v = patch_features(&img, Some(&map), (cx, cy), side, &c).unwrap();
    for l in 0..classes {
        let center = f64::from(map.get(l, cx, cy));
        assert_eq!(by_name(&layout, &v, &format!("ctx.{l}.center")), center);
        // Patch mean oracle with border clamping.
        let mut sum = 0.0f64;
        for py in -1isize..=1 {
            for px in -1isize..=1 {
                let x = (cx as isize + px).clamp(0, 5) as usize;
                let y = (cy as isize + py).clamp(0, 5) as usize;
                sum += f64::from(map.get(l, x, y));
            }
        }
        let oracle = sum / 9.0;
        assert!(
            (by_name(&layout, &v, &format!("ctx.{l}.mean")) - oracle).abs() <= 1e-9,
            "class {l}"
        );
    }

    // Superpixel context: per-class mean over the set.
    let set = [(0, 0), (5, 5), (2, 3)];
    let sp_layout = superpixel_layout(&c, 1);
    let sv = superpixel_features(&img, Some(&map), &set, None, &c).unwrap();
    for l in 0..classes {
        let oracle = set.iter().map(|&(x, y)| f64::from(map.get(l, x, y))).sum::<f64>() / 3.0;
        assert!((by_name(&sp_layout, &sv, &format!("ctx.{l}.mean")) - oracle).abs() <= 1e-9);
    }
}

#[test]
fn context_presence_must_match_configuration() {
    let img = image_from(4, 4, |x, _| x as f32);
    let map = crate::grid::ProbabilityMap::uniform(4, 4, 2).unwrap();
    assert!(patch_features(&img, Some(&map), (1, 1), 3, &cfg()).is_err());
    assert!(patch_features(&img, None, (1, 1), 3, &cfg().with_context(2)).is_err());
    // Class-count mismatch.
    assert!(patch_features(&img, Some(&map), (1, 1), 3, &cfg().with_context(3)).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let img = image_from(4, 4, |x, _| x as f32);
    assert!(patch_features(&img, None, (4, 1), 3, &cfg()).is_err());
    assert!(patch_features(&img, None, (1, 1), 0, &cfg()).is_err());
    assert!(superpixel_features(&img, None, &[], None, &cfg()).is_err());
    assert!(superpixel_features(&img, None, &[(4, 0)], None, &cfg()).is_err());
    let mut bad = cfg();
    bad.dog_sigma_pairs = vec![(2.0, 1.0)];
    assert!(patch_features(&img, None, (1, 1), 3, &bad).is_err());
    let mut bad = cfg();
    bad.entropy_bins = 0;
    assert!(patch_features(&img, None, (1, 1), 3, &bad).is_err());
}

#[test]
fn neighborhood_entry_uses_caller_value_when_given() {
    let img = image_from(6, 6, |x, y| (x + y) as f32);
    let layout = superpixel_layout(&cfg(), 1);
    let set = [(1, 1), (2, 1)];
    let with = superpixel_features(&img, None, &set, Some(&[7.5]), &cfg()).unwrap();
    assert_eq!(by_name(&layout, &with, "ch0.neighborhood"), 7.5);
    let without = superpixel_features(&img, None, &set, None, &cfg()).unwrap();
    assert_eq!(
        by_name(&layout, &without, "ch0.neighborhood"),
        by_name(&layout, &without, "ch0.mean")
    );
}

#[test]
fn dense_base_rows_equal_direct_assembly() {
    let mut rng = stream(3, "feat-test-dense", 0);
    let data: Vec<f32> = (0..12 * 10 * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
    let img = crate::grid::MultiChannelImage::new(12, 10, 2, data).unwrap();
    let fm = FilterMaps::compute(&img, &cfg()).unwrap();
    let dense = DenseBase::compute(&fm, 5);
    let mut row = vec![0.0f64; fm.base_len()];
    for &(x, y) in &[(0usize, 0usize), (11, 9), (5, 4), (3, 9)] {
        fm.patch_base_into(x, y, 5, &mut row);
        assert_eq!(dense.row(x, y), row.as_slice(), "pixel ({x}, {y})");
    }
}

/// Dyadic intensities make constant shifts exact in both f32 and f64.
fn dyadic_image(seed: u64, w: usize, h: usize) -> crate::grid::MultiChannelImage {
    let mut rng = stream(seed, "feat-prop-shift", 0);
    let data: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-16i32..=16) as f32 * 0.25).collect();
    crate::grid::MultiChannelImage::new(w, h, 1, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn constant_shift_moves_only_location_features(seed in 0u64..500) {
        let w = 14;
        let h = 12;
        let img = dyadic_image(seed, w, h);
        let shift = 3.5f32;
        let shifted_data: Vec<f32> = img.data().iter().map(|v| v + shift).collect();
        let shifted = crate::grid::MultiChannelImage::new(w, h, 1, shifted_data).unwrap();
        let layout = patch_layout(&cfg(), 1);
        let base = patch_features(&img, None, (6, 5), 5, &cfg()).unwrap();
        let moved = patch_features(&shifted, None, (6, 5), 5, &cfg()).unwrap();
        for (i, name) in layout.entries().iter().enumerate() {
            let delta = moved[i] - base[i];
            let location = name.ends_with(".mean") && !name.contains("curv")
                || name.ends_with(".max")
                || name.ends_with(".min")
                || name.ends_with(".median")
                || name.ends_with(".neighborhood");
            if location {
                prop_assert!((delta - f64::from(shift)).abs() <= 1e-9, "{name}: delta {delta}");
            } else {
                prop_assert!(delta.abs() <= 1e-9, "{name}: delta {delta}");
            }
        }
    }

    #[test]
    fn derivative_features_vanish_on_constant_images(value in -4.0f32..4.0, side in 1usize..8) {
        let img = image_from(10, 10, |_, _| value);
        let layout = patch_layout(&cfg(), 1);
        let v = patch_features(&img, None, (5, 5), side, &cfg()).unwrap();
        for (i, name) in layout.entries().iter().enumerate() {
            if name.contains("sobel") || name.contains("gradient") || name.contains("laplacian")
                || name.contains("dog") || name.contains("curv") || name.contains("gabor")
            {
                prop_assert!(v[i].abs() <= 1e-6, "{name} = {}", v[i]);
            }
        }
    }
}
