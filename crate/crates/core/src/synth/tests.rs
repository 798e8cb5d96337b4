use super::*;

fn small_params() -> PhantomParams {
    PhantomParams {
        size: 48,
        subjects: 3,
        rng_seed: 9,
        ..PhantomParams::default()
    }
}

#[test]
fn noiseless_flat_phantoms_are_exact_concentric_discs() {
    let params = PhantomParams {
        noise_sigma: 0.0,
        boundary_irregularity: 0.0,
        size: 64,
        subjects: 3,
        rng_seed: 4,
        ..PhantomParams::default()
    };
    let phantoms = generate(&params).unwrap();
    for phantom in &phantoms {
        let g = &phantom.geometry;
        for y in 0..params.size {
            for x in 0..params.size {
                // With zero perturbation the boundaries are plain circles.
                let r = (x as f64 - g.center.0).hypot(y as f64 - g.center.1);
                let expect = if r < g.base_radii[2] {
                    3
                } else if r < g.base_radii[1] {
                    2
                } else if r < g.base_radii[0] {
                    1
                } else {
                    0
                };
                let label = phantom.labels.get(x, y);
                assert_eq!(label, expect, "label at ({x}, {y})");
                for ch in 0..CHANNELS {
                    let want = params.contrasts[ch][usize::from(label)];
                    let got = phantom.image.get(ch, x, y);
                    assert_eq!(got.to_bits(), want.to_bits(), "channel {ch} at ({x}, {y})");
                }
            }
        }
    }
}

#[test]
fn same_seed_reproduces_the_dataset_bit_for_bit() {
    let params = small_params();
    let a = generate(&params).unwrap();
    let b = generate(&params).unwrap();
    assert_eq!(a.len(), b.len());
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(pa.geometry, pb.geometry);
        assert_eq!(pa.labels.labels(), pb.labels.labels());
        let bits_a: Vec<u32> = pa.image.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = pb.image.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    let other = generate(&PhantomParams {
        rng_seed: 10,
        ..params
    })
    .unwrap();
    assert_ne!(
        a[0].labels.labels(),
        other[0].labels.labels(),
        "a different seed should move the lesion"
    );
}

#[test]
fn regions_stay_nested_for_a_hundred_subjects() {
    let params = PhantomParams {
        size: 48,
        subjects: 100,
        boundary_irregularity: 0.45,
        rng_seed: 77,
        ..PhantomParams::default()
    };
    let phantoms = generate(&params).unwrap();
    for (s, phantom) in phantoms.iter().enumerate() {
        let g = &phantom.geometry;
        // The radial boundary functions never touch or cross.
        for step in 0..2000 {
            let theta = step as f64 / 2000.0 * std::f64::consts::TAU;
            let r0 = g.radius(0, theta);
            let r1 = g.radius(1, theta);
            let r2 = g.radius(2, theta);
            assert!(
                0.0 < r2 && r2 < r1 && r1 < r0,
                "subject {s}: radii {r2} {r1} {r0} at angle {theta}"
            );
        }
        // Every enhancing pixel sits inside the core region, and every core
        // pixel inside the edema region.
        for y in 0..params.size {
            for x in 0..params.size {
                let label = phantom.labels.get(x, y);
                if label == 0 {
                    continue;
                }
                let dx = x as f64 - g.center.0;
                let dy = y as f64 - g.center.1;
                let r = dx.hypot(dy);
                let theta = dy.atan2(dx);
                if label == 3 {
                    assert!(r < g.radius(1, theta), "subject {s}: enhancing outside core");
                }
                if label >= 2 {
                    assert!(r < g.radius(0, theta), "subject {s}: core outside edema");
                }
            }
        }
    }
}

#[test]
fn class_pixel_counts_decrease_outward_in() {
    let params = PhantomParams {
        size: 64,
        subjects: 20,
        rng_seed: 5,
        ..PhantomParams::default()
    };
    for (s, phantom) in generate(&params).unwrap().iter().enumerate() {
        let mut counts = [0usize; CLASSES];
        for &l in phantom.labels.labels() {
            counts[usize::from(l)] += 1;
        }
        for c in 0..CLASSES - 1 {
            assert!(
                counts[c] > counts[c + 1],
                "subject {s}: counts {counts:?} are not strictly decreasing"
            );
        }
    }
}

#[test]
fn dataset_round_trips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let params = small_params();
    let entries = write_dataset(dir.path(), &params).unwrap();
    assert_eq!(entries.len(), params.subjects);
    assert_eq!(entries[0].image.to_str().unwrap(), "subject_000.image.mdi");

    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.params, params);
    assert_eq!(manifest.entries, entries);

    let loaded = read_dataset(dir.path()).unwrap();
    let generated = generate(&params).unwrap();
    assert_eq!(loaded.len(), generated.len());
    for ((image, labels), phantom) in loaded.iter().zip(&generated) {
        assert_eq!(labels.labels(), phantom.labels.labels());
        let bits_a: Vec<u32> = image.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = phantom.image.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn manifest_violations_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &small_params()).unwrap();
    let path = dir.path().join("manifest.txt");
    let good = std::fs::read_to_string(&path).unwrap();

    let mut lines: Vec<&str> = good.lines().collect();
    lines[2] = "subjects = many";
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_manifest(dir.path()) {
        Err(Error::Config { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a config error, got {other:?}"),
    }

    let mut with_junk = good.clone();
    with_junk.push_str("mystery = 1\n");
    std::fs::write(&path, &with_junk).unwrap();
    match read_manifest(dir.path()) {
        Err(Error::Config { line, .. }) => {
            assert_eq!(line, good.lines().count() + 1);
        }
        other => panic!("expected a config error, got {other:?}"),
    }

    std::fs::write(&path, "no equals sign\n").unwrap();
    assert!(matches!(
        read_manifest(dir.path()),
        Err(Error::Config { line: 1, .. })
    ));
}

#[test]
fn exhausted_retries_report_a_generation_failure() {
    // Far beyond the validated range the perturbation drives radii negative
    // on every attempt, exhausting the shrink-and-retry budget.
    let params = PhantomParams {
        boundary_irregularity: 1e6,
        ..small_params()
    };
    match sample_geometry(&params, 0) {
        Err(Error::Generation(msg)) => assert!(msg.contains("subject 0")),
        other => panic!("expected a generation error, got {other:?}"),
    }
    // The same setting is rejected up front by the public entry point.
    assert!(matches!(generate(&params), Err(Error::Argument(_))));
}

#[test]
fn invalid_params_are_rejected() {
    let base = small_params();
    assert!(base.validate().is_ok());
    for bad in [
        PhantomParams {
            size: 31,
            ..base.clone()
        },
        PhantomParams {
            subjects: 0,
            ..base.clone()
        },
        PhantomParams {
            boundary_irregularity: 0.61,
            ..base.clone()
        },
        PhantomParams {
            noise_sigma: -0.1,
            ..base.clone()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let mut dup = base;
    dup.contrasts[1][2] = dup.contrasts[1][0];
    assert!(dup.validate().is_err());
}
