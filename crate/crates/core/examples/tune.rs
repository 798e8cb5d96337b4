//! Scratch harness for sizing the ordering experiment: generates a phantom
//! dataset, runs the cross-validation over all methods, and prints regional
//! means plus wall-clock timings.

use std::time::Instant;

use dmt_core::bn::BnParams;
use dmt_core::dmt::{BaselineKind, DmtConfig, ScaleSchedule, TreeSpec};
use dmt_core::eval::{phantom_regions, run_cv, Method, MethodSpec, Subject};
use dmt_core::srf::SrfParams;
use dmt_core::synth::{generate, PhantomParams};

fn arg<T: std::str::FromStr>(name: &str, default: T) -> T {
    let mut args = std::env::args();
    while let Some(a) = args.next() {
        if a == name {
            if let Some(v) = args.next() {
                if let Ok(parsed) = v.parse() {
                    return parsed;
                }
            }
        }
    }
    default
}

fn main() {
    let subjects = arg("--subjects", 8usize);
    let size = arg("--size", 128usize);
    let seed = arg("--seed", 42u64);
    let noise = arg("--noise", 0.05f64);
    let irregularity = arg("--irregularity", 0.3f64);
    let trees = arg("--trees", 6usize);
    let samples = arg("--samples", 120usize);
    let max_depth = arg("--max-depth", 20usize);
    let min_leaf = arg("--min-leaf", 5usize);
    let rounds = arg("--rounds", 1usize);
    let gmm = arg("--gmm", 3usize);
    let profile = arg("--profile", String::new());
    let methods_arg = arg(
        "--methods",
        "srf,bn,srf-srf,bn-bn,srf-bn,dmt,dmt-fixed".to_string(),
    );

    let mut params = PhantomParams {
        size,
        subjects,
        boundary_irregularity: irregularity,
        noise_sigma: noise,
        rng_seed: seed,
        ..PhantomParams::default()
    };
    if !profile.is_empty() {
        for (c, channel) in profile.split(';').enumerate() {
            for (k, v) in channel.split(',').enumerate() {
                params.contrasts[c][k] = v.parse().expect("contrast");
            }
        }
    }
    println!("contrasts: {:?}", params.contrasts);
    println!(
        "subjects={subjects} size={size} seed={seed} noise={noise} irr={irregularity} \
         trees={trees} samples={samples} depth={max_depth} leaf={min_leaf} rounds={rounds} gmm={gmm}"
    );

    let t0 = Instant::now();
    let phantoms = generate(&params).expect("generate");
    let subjects_vec: Vec<Subject> = phantoms
        .into_iter()
        .enumerate()
        .map(|(i, p)| Subject {
            id: format!("s{i}"),
            image: p.image,
            labels: p.labels,
        })
        .collect();
    println!("generate: {:.1?}", t0.elapsed());

    let cfg = DmtConfig {
        classes: 4,
        rounds,
        srf: SrfParams {
            n_trees: trees,
            samples_per_image: samples,
            max_depth,
            min_samples_leaf: min_leaf,
            ..SrfParams::default()
        },
        bn: BnParams {
            gmm_components: gmm,
            ..BnParams::default()
        },
        rng_seed: 1,
        ..DmtConfig::default()
    };
    let tree = TreeSpec::default_for_depth(2).unwrap();
    let schedule = ScaleSchedule::default_for_depth(2);
    let fixed = ScaleSchedule::uniform(2, *schedule.entry(0));

    let methods: Vec<Method> = methods_arg
        .split(',')
        .map(|name| {
            let spec = match name {
                "dmt" => MethodSpec::Tree {
                    tree: tree.clone(),
                    schedule: schedule.clone(),
                },
                "dmt-fixed" => MethodSpec::Tree {
                    tree: tree.clone(),
                    schedule: fixed.clone(),
                },
                other => MethodSpec::Baseline(BaselineKind::parse(other).expect("method")),
            };
            Method::new(name, spec).unwrap()
        })
        .collect();

    let t1 = Instant::now();
    let report = run_cv(&subjects_vec, &methods, &phantom_regions(), &cfg).expect("cv");
    println!("full cv: {:.1?}", t1.elapsed());
    print!("{}", report.summary_table());
    for f in report.failures() {
        println!("FAILURE {} fold {}: {}", f.method, f.fold, f.message);
    }
    println!("--- ordering on whole ---");
    let mean = |m: &str| report.mean(m, "whole").unwrap_or(f64::NAN);
    for m in ["dmt", "dmt-fixed", "srf-bn", "srf-srf", "bn-bn", "srf", "bn"] {
        if report.methods().iter().any(|x| x == m) {
            println!("{m:10} {:.4}", mean(m));
        }
    }
}
