//! `dmt`: phantom synthesis, training, prediction, cross-validation, and
//! rendering for the multiscale tree segmentation framework.
//!
//! Exit codes: 0 success, 1 runtime failure (IO, training, fold failures),
//! 2 usage or configuration error. Logging is controlled by the `DMT_LOG`
//! environment variable (error, info, debug).

mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use dmt_core::dmt::{baseline_train, dmt_train, save_model, ScaleSchedule, TrainedModel};
use dmt_core::eval::{phantom_regions, run_cv, Method, Subject};
use dmt_core::features::patch_layout;
use dmt_core::grid::{read_mdi, write_mdi, MdiObject};
use dmt_core::slic::SlicParams;
use dmt_core::synth::{read_dataset, write_dataset, PhantomParams};
use dmt_core::{Error, Result};

use config::{load_config, MethodToken};

#[derive(Parser)]
#[command(name = "dmt", version, about = "Multiscale tree segmentation toolkit")]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Amplitude of the radial boundary perturbation.
        #[arg(long, default_value_t = PhantomParams::default().boundary_irregularity)]
        boundary_irregularity: f64,
        /// Noise standard deviation as a fraction of each channel's range.
        #[arg(long, default_value_t = PhantomParams::default().noise_sigma)]
        noise_sigma: f64,
    },

    /// Train the configured method on a dataset directory.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (from `synth`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the patch feature layout as CSV and exit.
        #[arg(long)]
        dump_feature_layout: bool,
        /// Channel count assumed by --dump-feature-layout.
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },

    /// Segment one image with a trained model.
    Predict {
        /// Model directory (from `train`).
        #[arg(long)]
        model: PathBuf,
        /// Input image file.
        #[arg(long)]
        image: PathBuf,
        /// Output prefix; writes PREFIX.labels.mdi and PREFIX.prob.mdi.
        #[arg(long)]
        out: PathBuf,
        /// Also render PREFIX.png from the predicted labels.
        #[arg(long)]
        png: bool,
    },

    /// Leave-one-subject-out cross-validation over a method list.
    Eval {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (from `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated methods, e.g. dmt,dmt-fixed,srf-bn,srf.
        #[arg(long)]
        methods: String,
        /// Report directory to write.
        #[arg(long)]
        out: PathBuf,
    },

    /// Rasterize labels, a probability plane, or a superpixel edge map.
    #[command(group(
        ArgGroup::new("source").required(true).args(["labels", "probmap", "edgemap"])
    ))]
    Render {
        /// Label map file to draw under the class palette.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Probability map file; renders one class plane as grayscale.
        #[arg(long)]
        probmap: Option<PathBuf>,
        /// Class plane for --probmap.
        #[arg(long, requires = "probmap")]
        class: Option<usize>,
        /// Image file; renders its superpixel boundaries.
        #[arg(long)]
        edgemap: Option<PathBuf>,
        /// Superpixel target for --edgemap.
        #[arg(long, default_value_t = 1000, requires = "edgemap")]
        superpixels: usize,
        /// PNG file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DMT_LOG", "error"))
        .format_timestamp(None)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Argument(_) | Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Appends to a path without replacing its extension.
fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn read_image(path: &Path) -> Result<dmt_core::grid::MultiChannelImage> {
    match read_mdi(path)? {
        MdiObject::Image(img) => Ok(img),
        other => Err(Error::contract(format!(
            "{} holds a {}, expected an image",
            path.display(),
            other.kind_name()
        ))),
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Synth {
            out,
            subjects,
            size,
            seed,
            boundary_irregularity,
            noise_sigma,
        } => {
            let params = PhantomParams {
                size,
                subjects,
                boundary_irregularity,
                noise_sigma,
                rng_seed: seed,
                ..PhantomParams::default()
            };
            let entries = write_dataset(&out, &params)?;
            log::info!("dataset parameters: {params:?}");
            println!(
                "wrote {} subjects ({}x{size}) to {}",
                entries.len(),
                size,
                out.display()
            );
            Ok(0)
        }

        Command::Train {
            config,
            data,
            out,
            dump_feature_layout,
            channels,
        } => {
            let rc = load_config(&config)?;
            if dump_feature_layout {
                let layout = patch_layout(&rc.dmt.features, channels);
                println!("index,name");
                for (i, name) in layout.entries().iter().enumerate() {
                    println!("{i},{name}");
                }
                return Ok(0);
            }
            let (Some(data), Some(out)) = (data, out) else {
                return Err(Error::argument(
                    "train needs --data and --out (or --dump-feature-layout)",
                ));
            };
            let dataset = read_dataset(&data)?;
            log::info!(
                "training {} on {} subjects from {}",
                rc.method.name(),
                dataset.len(),
                data.display()
            );
            let images: Vec<_> = dataset.iter().map(|(img, _)| img.clone()).collect();
            let labels: Vec<_> = dataset.iter().map(|(_, lab)| lab.clone()).collect();
            let model = match rc.method {
                MethodToken::Oracle => {
                    return Err(Error::argument(
                        "the oracle method predicts ground truth and cannot be trained",
                    ))
                }
                MethodToken::Baseline(kind) => {
                    TrainedModel::Baseline(baseline_train(kind, &images, &labels, &rc.dmt)?)
                }
                MethodToken::Dmt => TrainedModel::Tree(dmt_train(
                    &images,
                    &labels,
                    &rc.tree,
                    &rc.schedule,
                    &rc.dmt,
                )?),
                MethodToken::DmtFixed => {
                    let fixed = ScaleSchedule::uniform(rc.tree.depth(), *rc.schedule.entry(0));
                    TrainedModel::Tree(dmt_train(&images, &labels, &rc.tree, &fixed, &rc.dmt)?)
                }
            };
            save_model(&out, &model)?;
            match &model {
                TrainedModel::Tree(tree) => println!(
                    "trained {} ({} nodes, {} fit events) -> {}",
                    rc.method.name(),
                    tree.nodes().len(),
                    tree.audit_log().len(),
                    out.display()
                ),
                TrainedModel::Baseline(chain) => println!(
                    "trained {} ({} stages) -> {}",
                    rc.method.name(),
                    chain.stages().len(),
                    out.display()
                ),
            }
            Ok(0)
        }

        Command::Predict {
            model,
            image,
            out,
            png,
        } => {
            let model = dmt_core::dmt::load_model(&model)?;
            let img = read_image(&image)?;
            let (labels, prob) = model.predict(&img)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let label_path = with_suffix(&out, ".labels.mdi");
            let prob_path = with_suffix(&out, ".prob.mdi");
            write_mdi(&label_path, &MdiObject::Labels(labels.clone()))?;
            write_mdi(&prob_path, &MdiObject::ProbMap(prob))?;
            println!("wrote {} and {}", label_path.display(), prob_path.display());
            if png {
                let png_path = with_suffix(&out, ".png");
                render::label_image(&labels)
                    .save(&png_path)
                    .map_err(|e| Error::argument(format!("cannot write PNG: {e}")))?;
                println!("wrote {}", png_path.display());
            }
            Ok(0)
        }

        Command::Eval {
            config,
            data,
            methods,
            out,
        } => {
            let rc = load_config(&config)?;
            let tokens: Vec<MethodToken> = methods
                .split(',')
                .map(|t| MethodToken::parse(t.trim()))
                .collect::<Result<_>>()?;
            let methods: Vec<Method> = tokens
                .iter()
                .map(|t| Method::new(t.name(), t.to_method_spec(&rc.tree, &rc.schedule)))
                .collect::<Result<_>>()?;
            let subjects: Vec<Subject> = read_dataset(&data)?
                .into_iter()
                .enumerate()
                .map(|(i, (image, labels))| Subject {
                    id: format!("subject_{i:03}"),
                    image,
                    labels,
                })
                .collect();
            log::info!(
                "cross-validating {} methods over {} subjects",
                methods.len(),
                subjects.len()
            );
            let report = run_cv(&subjects, &methods, &phantom_regions(), &rc.dmt)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("per_fold.csv"), report.per_fold_csv())?;
            std::fs::write(out.join("summary.csv"), report.summary_csv())?;
            std::fs::write(out.join("p_values.csv"), report.p_value_csv())?;
            let table = report.summary_table();
            std::fs::write(out.join("summary.txt"), &table)?;
            for warning in report.warnings() {
                eprintln!("warning: {warning}");
            }
            print!("{table}");
            println!("reports -> {}", out.display());
            if report.failures().is_empty() {
                Ok(0)
            } else {
                for failure in report.failures() {
                    eprintln!(
                        "error: fold {} of {} failed: {}",
                        failure.fold, failure.method, failure.message
                    );
                }
                Ok(1)
            }
        }

        Command::Render {
            labels,
            probmap,
            class,
            edgemap,
            superpixels,
            out,
        } => {
            if let Some(path) = labels {
                match read_mdi(&path)? {
                    MdiObject::Labels(map) => render::label_image(&map),
                    other => {
                        return Err(Error::contract(format!(
                            "{} holds a {}, expected labels",
                            path.display(),
                            other.kind_name()
                        )))
                    }
                }
                .save(&out)
                .map_err(|e| Error::argument(format!("cannot write PNG: {e}")))?;
            } else if let Some(path) = probmap {
                let class = class.ok_or_else(|| {
                    Error::argument("--probmap needs --class to pick the plane")
                })?;
                match read_mdi(&path)? {
                    MdiObject::ProbMap(map) => render::prob_image(&map, class)?,
                    other => {
                        return Err(Error::contract(format!(
                            "{} holds a {}, expected a probability map",
                            path.display(),
                            other.kind_name()
                        )))
                    }
                }
                .save(&out)
                .map_err(|e| Error::argument(format!("cannot write PNG: {e}")))?;
            } else {
                let path = edgemap.expect("clap guarantees one source");
                let img = read_image(&path)?;
                let params = SlicParams {
                    target_superpixels: superpixels,
                    ..SlicParams::default()
                };
                render::edge_image(&img, &params)?
                    .save(&out)
                    .map_err(|e| Error::argument(format!("cannot write PNG: {e}")))?;
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
    }
}
