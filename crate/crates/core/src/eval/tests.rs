use std::collections::HashSet;

use rand::Rng;

use crate::bn::BnParams;
use crate::dmt::{
    dmt_train, BaselineKind, DmtConfig, NodeKind, ScaleEntry, ScaleSchedule, TreeSpec,
};
use crate::error::Error;
use crate::grid::{LabelMap, MultiChannelImage};
use crate::seed;
use crate::srf::SrfParams;

use super::*;

fn mask_map(w: usize, h: usize, classes: usize, members: &[usize]) -> LabelMap {
    let mut labels = vec![0u8; w * h];
    for (i, l) in labels.iter_mut().enumerate() {
        if members.contains(&i) {
            *l = 1;
        }
    }
    LabelMap::new(w, h, classes, labels).unwrap()
}

fn region(members: Vec<u8>) -> RegionSpec {
    RegionSpec::new("r", members).unwrap()
}

fn subjects(n: usize, w: usize, h: usize, classes: usize, tag: u64) -> Vec<Subject> {
    (0..n)
        .map(|i| {
            let mut rng = seed::stream(11, "eval-test-data", tag * 64 + i as u64);
            let mut labels = vec![0u8; w * h];
            for y in 0..h {
                let class = (y * classes) / h;
                labels[y * w..(y + 1) * w].fill(class as u8);
            }
            let mut data = vec![0f32; w * h * 2];
            for c in 0..2 {
                for (pix, &l) in labels.iter().enumerate() {
                    let v = f64::from(l) + 0.1 * c as f64 + rng.gen_range(-0.05..0.05);
                    data[c * w * h + pix] = v as f32;
                }
            }
            Subject {
                id: format!("s{i}"),
                image: MultiChannelImage::new(w, h, 2, data).unwrap(),
                labels: LabelMap::new(w, h, classes, labels).unwrap(),
            }
        })
        .collect()
}

fn tiny_cfg(classes: usize) -> DmtConfig {
    DmtConfig {
        classes,
        rounds: 1,
        srf: SrfParams {
            n_trees: 2,
            max_depth: 8,
            min_samples_leaf: 2,
            candidate_thresholds: 4,
            samples_per_image: 60,
            ..SrfParams::default()
        },
        bn: BnParams {
            gmm_components: 2,
            em_iterations: 40,
            ..BnParams::default()
        },
        rng_seed: 5,
        ..DmtConfig::default()
    }
}

fn tiny_tree(depth: usize, kinds: Vec<NodeKind>) -> MethodSpec {
    MethodSpec::Tree {
        tree: TreeSpec::new(depth, kinds).unwrap(),
        schedule: ScaleSchedule::uniform(
            depth,
            ScaleEntry {
                feature_patch_side: 6,
                label_patch_side: 3,
                target_superpixels: 40,
            },
        ),
    }
}

#[test]
fn dice_handles_the_boundary_cases() {
    let a = mask_map(4, 4, 2, &[0, 1, 2, 3]);
    let r = region(vec![1]);
    assert_eq!(dice(&a, &a, &r).unwrap(), 1.0);

    let b = mask_map(4, 4, 2, &[4, 5, 6, 7]);
    assert_eq!(dice(&a, &b, &r).unwrap(), 0.0);

    // |gt| = 4, |pred| = 4, overlap 2.
    let c = mask_map(4, 4, 2, &[2, 3, 4, 5]);
    assert_eq!(dice(&a, &c, &r).unwrap(), 0.5);

    // Region absent from both maps scores 1.0 by convention.
    let empty = mask_map(4, 4, 2, &[]);
    assert_eq!(dice(&empty, &empty, &r).unwrap(), 1.0);

    // One-sided absence scores 0.
    assert_eq!(dice(&a, &empty, &r).unwrap(), 0.0);
}

#[test]
fn dice_matches_a_set_oracle_and_is_symmetric() {
    let mut rng = seed::stream(11, "eval-test-dice", 0);
    for _ in 0..200 {
        let w = rng.gen_range(3..12);
        let h = rng.gen_range(3..12);
        let classes = rng.gen_range(2..5);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let labels = (0..w * h).map(|_| rng.gen_range(0..classes) as u8).collect();
            LabelMap::new(w, h, classes, labels).unwrap()
        };
        let gt = draw(&mut rng);
        let pred = draw(&mut rng);
        let member_count = rng.gen_range(1..classes);
        let members: Vec<u8> = (0..classes as u8)
            .filter(|_| rng.gen_bool(0.5))
            .take(member_count)
            .collect();
        let members = if members.is_empty() { vec![1] } else { members };
        let r = region(members.clone());

        let set_a: HashSet<usize> = gt
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| members.contains(l))
            .map(|(i, _)| i)
            .collect();
        let set_b: HashSet<usize> = pred
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| members.contains(l))
            .map(|(i, _)| i)
            .collect();
        let expected = if set_a.is_empty() && set_b.is_empty() {
            1.0
        } else {
            2.0 * set_a.intersection(&set_b).count() as f64 / (set_a.len() + set_b.len()) as f64
        };
        let got = dice(&gt, &pred, &r).unwrap();
        assert!((got - expected).abs() < 1e-12);
        let flipped = dice(&pred, &gt, &r).unwrap();
        assert_eq!(got.to_bits(), flipped.to_bits(), "dice must be symmetric");
    }
}

#[test]
fn dice_ignores_classes_outside_the_region() {
    // The two predictions agree on region membership and differ only in
    // how non-member pixels are labeled; the scores must match exactly.
    let gt = LabelMap::new(2, 2, 4, vec![1, 0, 2, 3]).unwrap();
    let pred = LabelMap::new(2, 2, 4, vec![1, 2, 0, 3]).unwrap();
    let relabeled = LabelMap::new(2, 2, 4, vec![1, 0, 3, 2]).unwrap();
    let r = region(vec![1]);
    let d1 = dice(&gt, &pred, &r).unwrap();
    let d2 = dice(&gt, &relabeled, &r).unwrap();
    assert_eq!(d1.to_bits(), d2.to_bits());
}

#[test]
fn dice_is_monotone_in_overlap_at_fixed_sizes() {
    // gt holds pixels 0..6; slide a 6-pixel prediction window right.
    let gt = mask_map(6, 4, 2, &(0..6).collect::<Vec<_>>());
    let mut last = f64::INFINITY;
    for offset in 0..=6 {
        let pred = mask_map(6, 4, 2, &(offset..offset + 6).collect::<Vec<_>>());
        let d = dice(&gt, &pred, &region(vec![1])).unwrap();
        assert!(d <= last, "overlap shrinks, dice must not grow");
        assert_eq!(d, (6 - offset) as f64 / 6.0);
        last = d;
    }
}

#[test]
fn dice_rejects_bad_inputs() {
    let a = mask_map(4, 4, 2, &[0]);
    let b = mask_map(4, 5, 2, &[0]);
    assert!(matches!(dice(&a, &b, &region(vec![1])), Err(Error::Argument(_))));
    assert!(matches!(dice(&a, &a, &region(vec![2])), Err(Error::Argument(_))));

    assert!(matches!(RegionSpec::new("r", vec![]), Err(Error::Argument(_))));
    assert!(matches!(RegionSpec::new("", vec![1]), Err(Error::Argument(_))));
    assert!(matches!(RegionSpec::new("a,b", vec![1]), Err(Error::Argument(_))));
}

#[test]
fn phantom_regions_nest() {
    let regions = phantom_regions();
    let names: Vec<&str> = regions.iter().map(|r| r.name()).collect();
    assert_eq!(names, vec!["whole", "core", "enhancing"]);
    assert_eq!(regions[0].members(), &[1, 2, 3]);
    assert_eq!(regions[1].members(), &[2, 3]);
    assert_eq!(regions[2].members(), &[3]);
    assert!(regions[0].contains(1) && !regions[1].contains(1));
}

#[test]
fn sign_test_matches_the_exact_binomial() {
    assert_eq!(sign_test(&[]), 1.0);
    assert_eq!(sign_test(&[(0.5, 0.5), (0.1, 0.1)]), 1.0);
    // 5 wins, 0 losses: p = 2 * 0.5^5.
    let five = vec![(1.0, 0.0); 5];
    assert!((sign_test(&five) - 0.0625).abs() < 1e-15);
    // 4 wins, 1 loss: p = 2 * (1 + 5) / 32.
    let mut four = vec![(1.0, 0.0); 4];
    four.push((0.0, 1.0));
    assert!((sign_test(&four) - 0.375).abs() < 1e-15);
    // 1 win, 1 loss: doubling overshoots, clamps to 1.
    assert_eq!(sign_test(&[(1.0, 0.0), (0.0, 1.0)]), 1.0);

    // Pascal's triangle oracle across all (n, wins) up to n = 12.
    let mut choose = vec![vec![1u64]];
    for n in 1..=12usize {
        let prev = &choose[n - 1];
        let mut row = vec![1u64];
        for k in 1..n {
            row.push(prev[k - 1] + prev[k]);
        }
        row.push(1);
        choose.push(row);
    }
    for n in 1..=12usize {
        for wins in 0..=n {
            let mut pairs = vec![(1.0, 0.0); wins];
            pairs.extend(vec![(0.0, 1.0); n - wins]);
            pairs.push((0.3, 0.3));
            let k = wins.min(n - wins);
            let tail: u64 = (0..=k).map(|i| choose[n][i]).sum();
            let expected = (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0);
            assert!(
                (sign_test(&pairs) - expected).abs() < 1e-12,
                "n={n} wins={wins}"
            );
        }
    }
}

#[test]
fn oracle_method_scores_one_everywhere() {
    let subjects = subjects(3, 16, 16, 3, 0);
    let methods = vec![Method::new("oracle", MethodSpec::Oracle).unwrap()];
    let regions = vec![region(vec![1]), RegionSpec::new("top", vec![2]).unwrap()];
    let report = run_cv(&subjects, &methods, &regions, &tiny_cfg(3)).unwrap();
    assert_eq!(report.folds(), 3);
    assert_eq!(report.methods(), &["oracle".to_string()]);
    assert!(report.failures().is_empty());
    for r in ["r", "top"] {
        for fold in 0..3 {
            assert_eq!(report.score("oracle", r, fold), Some(1.0));
        }
        assert_eq!(report.mean_std("oracle", r), Some((1.0, 0.0)));
    }
}

#[test]
fn two_subjects_make_exactly_two_folds() {
    let subjects = subjects(2, 32, 32, 3, 1);
    let methods = vec![Method::new("tree", tiny_tree(0, vec![NodeKind::Srf])).unwrap()];
    let regions = vec![region(vec![1, 2])];
    let report = run_cv(&subjects, &methods, &regions, &tiny_cfg(3)).unwrap();
    assert_eq!(report.folds(), 2);
    assert!(report.failures().is_empty());
    let scores = report.scores("tree", "r");
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|d| (0.0..=1.0).contains(d)));
}

#[test]
fn duplicate_methods_are_dropped_with_a_warning() {
    let subjects = subjects(2, 16, 16, 3, 2);
    let methods = vec![
        Method::new("oracle", MethodSpec::Oracle).unwrap(),
        Method::new("oracle", MethodSpec::Oracle).unwrap(),
    ];
    let report = run_cv(&subjects, &methods, &[region(vec![1])], &tiny_cfg(3)).unwrap();
    assert_eq!(report.methods().len(), 1);
    assert_eq!(report.warnings().len(), 1);
    assert!(report.warnings()[0].contains("oracle"));
}

#[test]
fn failed_folds_are_marked_and_the_run_continues() {
    // One subject is all background; the fold training on it alone cannot
    // fit the network's per-class mixtures.
    let mut pair = subjects(2, 32, 32, 3, 3);
    pair[0].labels = LabelMap::new(32, 32, 3, vec![0u8; 32 * 32]).unwrap();
    let methods = vec![Method::new("net", tiny_tree(0, vec![NodeKind::Bn])).unwrap()];
    let regions = vec![region(vec![1])];
    let report = run_cv(&pair, &methods, &regions, &tiny_cfg(3)).unwrap();

    assert_eq!(report.failures().len(), 1);
    let failure = &report.failures()[0];
    assert_eq!(failure.method, "net");
    assert_eq!(failure.fold, 1, "training on subject 0 alone must fail");
    assert_eq!(report.score("net", "r", 1), None);
    assert!(report.score("net", "r", 0).is_some());
    assert_eq!(report.scores("net", "r").len(), 1);
    assert!(report.per_fold_csv().contains("net,r,1,failed"));
    assert!(report.summary_table().contains("(1/2 folds)"));
}

#[test]
fn cv_scores_match_a_manual_fold() {
    let subjects = subjects(3, 32, 32, 3, 4);
    let cfg = tiny_cfg(3);
    let spec = TreeSpec::new(1, vec![NodeKind::Srf, NodeKind::Srf, NodeKind::Bn]).unwrap();
    let schedule = ScaleSchedule::uniform(
        1,
        ScaleEntry {
            feature_patch_side: 6,
            label_patch_side: 3,
            target_superpixels: 40,
        },
    );
    let methods = vec![Method::new(
        "tree",
        MethodSpec::Tree {
            tree: spec.clone(),
            schedule: schedule.clone(),
        },
    )
    .unwrap()];
    let regions = vec![region(vec![1, 2]), RegionSpec::new("top", vec![2]).unwrap()];
    let report = run_cv(&subjects, &methods, &regions, &cfg).unwrap();

    // Fold 0 re-run by hand through the unprepared entry points.
    let images: Vec<MultiChannelImage> =
        subjects[1..].iter().map(|s| s.image.clone()).collect();
    let labels: Vec<LabelMap> = subjects[1..].iter().map(|s| s.labels.clone()).collect();
    let model = dmt_train(&images, &labels, &spec, &schedule, &cfg).unwrap();
    let (predicted, _) = crate::dmt::dmt_predict(&model, &subjects[0].image).unwrap();
    for r in &regions {
        let expected = dice(&subjects[0].labels, &predicted, r).unwrap();
        let got = report.score("tree", r.name(), 0).unwrap();
        assert_eq!(got.to_bits(), expected.to_bits());
    }
}

#[test]
fn reports_render_csv_and_aligned_text() {
    let subjects = subjects(2, 16, 16, 3, 5);
    let methods = vec![
        Method::new("a", MethodSpec::Oracle).unwrap(),
        Method::new("b", MethodSpec::Oracle).unwrap(),
    ];
    let regions = vec![region(vec![1])];
    let report = run_cv(&subjects, &methods, &regions, &tiny_cfg(3)).unwrap();

    assert_eq!(
        report.per_fold_csv(),
        "method,region,fold,dice\na,r,0,1\na,r,1,1\nb,r,0,1\nb,r,1,1\n"
    );
    assert_eq!(
        report.summary_csv(),
        "method,region,mean,std,scored_folds\na,r,1.000000,0.000000,2\nb,r,1.000000,0.000000,2\n"
    );
    // All folds tie, so the sign test is maximally inconclusive.
    assert_eq!(report.p_value_csv(), "region,method_a,method_b,p\nr,a,b,1.000000\n");
    let table = report.summary_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("method  r"));
    assert!(lines[1].starts_with("a       1.0000 ± 0.0000"));
    assert_eq!(report.p_value("a", "b", "r"), Some(1.0));
}

#[test]
fn cv_rejects_bad_inputs() {
    let one = subjects(1, 16, 16, 3, 6);
    let oracle = vec![Method::new("oracle", MethodSpec::Oracle).unwrap()];
    let regions = vec![region(vec![1])];
    let cfg = tiny_cfg(3);
    assert!(matches!(
        run_cv(&one, &oracle, &regions, &cfg),
        Err(Error::Argument(_))
    ));

    let two = subjects(2, 16, 16, 3, 7);
    assert!(matches!(run_cv(&two, &[], &regions, &cfg), Err(Error::Argument(_))));
    assert!(matches!(run_cv(&two, &oracle, &[], &cfg), Err(Error::Argument(_))));

    let high = vec![region(vec![3])];
    assert!(matches!(run_cv(&two, &oracle, &high, &cfg), Err(Error::Argument(_))));

    let mut mismatched = subjects(2, 16, 16, 3, 8);
    mismatched[1].labels = LabelMap::new(8, 8, 3, vec![0u8; 64]).unwrap();
    assert!(matches!(
        run_cv(&mismatched, &oracle, &regions, &cfg),
        Err(Error::Argument(_))
    ));

    assert!(matches!(Method::new("", MethodSpec::Oracle), Err(Error::Argument(_))));
    assert!(matches!(Method::new("a,b", MethodSpec::Oracle), Err(Error::Argument(_))));
}

#[test]
fn baseline_methods_run_through_the_harness() {
    let subjects = subjects(2, 64, 64, 3, 9);
    let methods = vec![Method::new("srf", MethodSpec::Baseline(BaselineKind::Srf)).unwrap()];
    let regions = vec![region(vec![1, 2])];
    let report = run_cv(&subjects, &methods, &regions, &tiny_cfg(3)).unwrap();
    assert!(report.failures().is_empty());
    assert_eq!(report.scores("srf", "r").len(), 2);
}
