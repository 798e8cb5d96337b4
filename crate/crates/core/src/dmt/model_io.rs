//! Trained models on disk: a directory holding one `model.txt` manifest
//! plus one blob per fitted classifier. The manifest pins every blob's
//! content hash, so a load re-verifies what it reads, and carries the full
//! fit-event audit log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::bn::{BnParams, GmmLikelihood};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::seed::fnv1a;
use crate::slic::SlicParams;
use crate::srf::SrfForest;

use super::{
    depth_of, expected_fit_events, BaselineKind, FitEvent, NodeClassifier, NodeKind, Phase,
    ScaleEntry, ScaleSchedule, TrainedBaseline, TrainedDmt, TrainedModel, TreeSpec,
};

const MANIFEST: &str = "model.txt";
const FORMAT: &str = "dmt-model-1";

/// Writes a trained model into `dir`, creating it if needed.
pub fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = String::new();
    let mut put = |key: &str, value: String| {
        writeln!(text, "{key} = {value}").expect("string write cannot fail");
    };
    put("format", FORMAT.to_string());
    match model {
        TrainedModel::Tree(m) => {
            put("model", "tree".to_string());
            put("classes", m.classes.to_string());
            put("channels", m.channels.to_string());
            write_features(&mut put, &m.features);
            write_bn(&mut put, &m.bn);
            write_slic(&mut put, &m.slic);
            put("rounds", m.rounds.to_string());
            put("depth", m.spec.depth().to_string());
            let kinds: Vec<&str> = m.spec.kinds().iter().map(|k| k.name()).collect();
            put("kinds", kinds.join(" "));
            for (level, e) in m.schedule.entries().iter().enumerate() {
                put(&format!("schedule.{level}"), scale_value(e));
            }
            for node in &m.nodes {
                let pos = node.position;
                let a_file = format!("node_{pos:03}.a.blob");
                let hash = write_classifier_blob(dir, &a_file, &node.phase_a)?;
                put(&format!("node.{pos}.phase_a"), format!("{a_file} {hash}"));
                if let Some(b) = &node.phase_b {
                    let b_file = format!("node_{pos:03}.b.blob");
                    let hash = write_classifier_blob(dir, &b_file, b)?;
                    put(&format!("node.{pos}.phase_b"), format!("{b_file} {hash}"));
                }
            }
            for (i, e) in m.audit_log.iter().enumerate() {
                put(
                    &format!("fit.{i}"),
                    format!("{} {} {}", e.phase.name(), e.position, e.round),
                );
            }
        }
        TrainedModel::Baseline(m) => {
            put("model", "baseline".to_string());
            put("classes", m.classes.to_string());
            put("channels", m.channels.to_string());
            write_features(&mut put, &m.features);
            write_bn(&mut put, &m.bn);
            write_slic(&mut put, &m.slic);
            put("baseline", m.kind.name().to_string());
            put("scale", scale_value(&m.scale));
            for (i, clf) in m.stages.iter().enumerate() {
                let file = format!("stage_{i}.blob");
                let hash = write_classifier_blob(dir, &file, clf)?;
                put(
                    &format!("stage.{i}"),
                    format!("{} {file} {hash}", clf.kind().name()),
                );
            }
        }
    }
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn scale_value(e: &ScaleEntry) -> String {
    format!(
        "{} {} {}",
        e.feature_patch_side, e.label_patch_side, e.target_superpixels
    )
}

/// Serializes one classifier into `dir/file` and returns its content hash.
fn write_classifier_blob(dir: &Path, file: &str, clf: &NodeClassifier) -> Result<u64> {
    let bytes = clf.to_bytes();
    let hash = fnv1a(&bytes);
    fs::write(dir.join(file), &bytes)?;
    Ok(hash)
}

fn write_features(put: &mut impl FnMut(&str, String), f: &FeatureConfig) {
    put(
        "feature.gabor_orientations",
        f.gabor_orientations.to_string(),
    );
    let w: Vec<String> = f.gabor_wavelengths.iter().map(|v| format!("{v:?}")).collect();
    put("feature.gabor_wavelengths", w.join(" "));
    let d: Vec<String> = f
        .dog_sigma_pairs
        .iter()
        .map(|(a, b)| format!("{a:?}:{b:?}"))
        .collect();
    put("feature.dog_sigma_pairs", d.join(" "));
    put("feature.entropy_bins", f.entropy_bins.to_string());
}

fn write_bn(put: &mut impl FnMut(&str, String), b: &BnParams) {
    put("bn.gmm_components", b.gmm_components.to_string());
    put("bn.em_iterations", b.em_iterations.to_string());
    put("bn.em_tol", format!("{:?}", b.em_tol));
    put("bn.var_floor", format!("{:?}", b.var_floor));
    put(
        "bn.edge_true_given_diff",
        format!("{:?}", b.edge_true_given_diff),
    );
    put(
        "bn.edge_true_given_same",
        format!("{:?}", b.edge_true_given_same),
    );
    put("bn.bp_max_iters", b.bp_max_iters.to_string());
    put("bn.bp_damping", format!("{:?}", b.bp_damping));
    put("bn.bp_tol", format!("{:?}", b.bp_tol));
}

fn write_slic(put: &mut impl FnMut(&str, String), s: &SlicParams) {
    put("slic.target_superpixels", s.target_superpixels.to_string());
    put("slic.compactness", format!("{:?}", s.compactness));
    put("slic.iterations", s.iterations.to_string());
    put(
        "slic.min_region_fraction",
        format!("{:?}", s.min_region_fraction),
    );
}

/// A parsed manifest: every `key = value` line by key, consumed as typed
/// reads so leftovers surface as unknown-key errors with line numbers.
struct Manifest {
    entries: BTreeMap<String, (usize, String)>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Manifest> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line_no, "expected a `key = value` line".to_string())
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), (line_no, value)).is_some() {
                return Err(Error::config(line_no, format!("duplicate key {key:?}")));
            }
        }
        Ok(Manifest { entries })
    }

    fn take(&mut self, key: &str) -> Result<(usize, String)> {
        self.entries
            .remove(key)
            .ok_or_else(|| Error::config(0, format!("missing key {key:?}")))
    }

    fn take_opt(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn take_parse<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let (line, value) = self.take(key)?;
        value
            .parse::<T>()
            .map_err(|_| Error::config(line, format!("cannot parse {key} from {value:?}")))
    }

    /// Every remaining key is unknown.
    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::config(line, format!("unknown key {key:?}")));
        }
        Ok(())
    }
}

fn parse_scale(line: usize, value: &str) -> Result<ScaleEntry> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::config(
            line,
            format!("expected three scale fields, got {value:?}"),
        ));
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::config(line, format!("cannot parse scale field {p:?}")))
        })
        .collect::<Result<_>>()?;
    Ok(ScaleEntry {
        feature_patch_side: nums[0],
        label_patch_side: nums[1],
        target_superpixels: nums[2],
    })
}

fn parse_features(m: &mut Manifest) -> Result<FeatureConfig> {
    let gabor_orientations = m.take_parse("feature.gabor_orientations")?;
    let (wl_line, wl) = m.take("feature.gabor_wavelengths")?;
    let gabor_wavelengths: Vec<f64> = wl
        .split_whitespace()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::config(wl_line, format!("cannot parse wavelength {p:?}")))
        })
        .collect::<Result<_>>()?;
    let (dog_line, dog) = m.take("feature.dog_sigma_pairs")?;
    let dog_sigma_pairs: Vec<(f64, f64)> = dog
        .split_whitespace()
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| {
                Error::config(dog_line, format!("expected sigma1:sigma2, got {p:?}"))
            })?;
            let a = a
                .parse::<f64>()
                .map_err(|_| Error::config(dog_line, format!("cannot parse sigma {a:?}")))?;
            let b = b
                .parse::<f64>()
                .map_err(|_| Error::config(dog_line, format!("cannot parse sigma {b:?}")))?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;
    let entropy_bins = m.take_parse("feature.entropy_bins")?;
    let cfg = FeatureConfig {
        gabor_orientations,
        gabor_wavelengths,
        dog_sigma_pairs,
        entropy_bins,
        include_context: false,
        context_classes: 0,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_bn(m: &mut Manifest) -> Result<BnParams> {
    let params = BnParams {
        gmm_components: m.take_parse("bn.gmm_components")?,
        em_iterations: m.take_parse("bn.em_iterations")?,
        em_tol: m.take_parse("bn.em_tol")?,
        var_floor: m.take_parse("bn.var_floor")?,
        edge_true_given_diff: m.take_parse("bn.edge_true_given_diff")?,
        edge_true_given_same: m.take_parse("bn.edge_true_given_same")?,
        bp_max_iters: m.take_parse("bn.bp_max_iters")?,
        bp_damping: m.take_parse("bn.bp_damping")?,
        bp_tol: m.take_parse("bn.bp_tol")?,
    };
    params.validate()?;
    Ok(params)
}

fn parse_slic(m: &mut Manifest) -> Result<SlicParams> {
    let params = SlicParams {
        target_superpixels: m.take_parse("slic.target_superpixels")?,
        compactness: m.take_parse("slic.compactness")?,
        iterations: m.take_parse("slic.iterations")?,
        min_region_fraction: m.take_parse("slic.min_region_fraction")?,
    };
    params.validate()?;
    Ok(params)
}

/// Reads one classifier blob, verifying its recorded content hash before
/// decoding.
fn read_blob(dir: &Path, line: usize, value: &str, kind: NodeKind) -> Result<NodeClassifier> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::config(
            line,
            format!("expected `file hash`, got {value:?}"),
        ));
    }
    let file = parts[0];
    if file.contains('/') || file.contains('\\') {
        return Err(Error::config(
            line,
            format!("blob reference {file:?} must be a bare file name"),
        ));
    }
    let expected: u64 = parts[1]
        .parse()
        .map_err(|_| Error::config(line, format!("cannot parse blob hash {:?}", parts[1])))?;
    let bytes = fs::read(dir.join(file))?;
    let actual = fnv1a(&bytes);
    if actual != expected {
        return Err(Error::contract(format!(
            "blob {file} hashes to {actual}, manifest records {expected}"
        )));
    }
    Ok(match kind {
        NodeKind::Srf => NodeClassifier::Srf(SrfForest::from_bytes(&bytes)?),
        NodeKind::Bn => NodeClassifier::Bn(GmmLikelihood::from_bytes(&bytes)?),
    })
}

/// Loads a model directory written by [`save_model`] and audits it.
pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut m = Manifest::parse(&text)?;
    let (line, format) = m.take("format")?;
    if format != FORMAT {
        return Err(Error::config(
            line,
            format!("format {format:?}, this build reads {FORMAT:?}"),
        ));
    }
    let (model_line, model_kind) = m.take("model")?;
    let classes: usize = m.take_parse("classes")?;
    let channels: usize = m.take_parse("channels")?;
    if classes == 0 || classes > 256 {
        return Err(Error::config(model_line, "class count must be in 1..=256".to_string()));
    }
    if channels == 0 {
        return Err(Error::config(model_line, "channel count must be >= 1".to_string()));
    }
    let features = parse_features(&mut m)?;
    let bn = parse_bn(&mut m)?;
    let slic = parse_slic(&mut m)?;
    let model = match model_kind.as_str() {
        "tree" => {
            let rounds: usize = m.take_parse("rounds")?;
            let depth: usize = m.take_parse("depth")?;
            let (kinds_line, kinds_text) = m.take("kinds")?;
            let kinds: Vec<NodeKind> = kinds_text
                .split_whitespace()
                .map(|p| NodeKind::parse(p).map_err(|e| Error::config(kinds_line, e.to_string())))
                .collect::<Result<_>>()?;
            let spec = TreeSpec::new(depth, kinds)
                .map_err(|e| Error::config(kinds_line, e.to_string()))?;
            let entries: Vec<ScaleEntry> = (0..=depth)
                .map(|level| {
                    let (line, value) = m.take(&format!("schedule.{level}"))?;
                    parse_scale(line, &value)
                })
                .collect::<Result<_>>()?;
            let schedule = ScaleSchedule::new(entries)?;
            let mut nodes = Vec::with_capacity(spec.node_count());
            for pos in 0..spec.node_count() {
                let kind = spec.kind(pos);
                let (a_line, a_value) = m.take(&format!("node.{pos}.phase_a"))?;
                let phase_a = read_blob(dir, a_line, &a_value, kind)?;
                let phase_b = match m.take_opt(&format!("node.{pos}.phase_b")) {
                    Some((b_line, b_value)) => Some(read_blob(dir, b_line, &b_value, kind)?),
                    None => None,
                };
                nodes.push(super::TrainedNode {
                    position: pos,
                    kind,
                    scale: *schedule.entry(depth_of(pos)),
                    phase_a,
                    phase_b,
                });
            }
            let mut audit_log = Vec::new();
            for i in 0..expected_fit_events(depth, rounds) {
                let (line, value) = m.take(&format!("fit.{i}"))?;
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::config(
                        line,
                        format!("expected `phase position round`, got {value:?}"),
                    ));
                }
                let phase =
                    Phase::parse(parts[0]).map_err(|e| Error::config(line, e.to_string()))?;
                let position: usize = parts[1]
                    .parse()
                    .map_err(|_| Error::config(line, format!("bad position {:?}", parts[1])))?;
                let round: usize = parts[2]
                    .parse()
                    .map_err(|_| Error::config(line, format!("bad round {:?}", parts[2])))?;
                audit_log.push(FitEvent {
                    position,
                    phase,
                    round,
                });
            }
            TrainedModel::Tree(TrainedDmt {
                spec,
                schedule,
                nodes,
                rounds,
                classes,
                channels,
                features,
                bn,
                slic,
                audit_log,
            })
        }
        "baseline" => {
            let (kind_line, kind_name) = m.take("baseline")?;
            let kind = BaselineKind::parse(&kind_name)
                .map_err(|e| Error::config(kind_line, e.to_string()))?;
            let (scale_line, scale_text) = m.take("scale")?;
            let scale = parse_scale(scale_line, &scale_text)?;
            let mut stages = Vec::new();
            for (i, &stage_kind) in kind.stages().iter().enumerate() {
                let (line, value) = m.take(&format!("stage.{i}"))?;
                let (name, rest) = value.split_once(' ').ok_or_else(|| {
                    Error::config(line, format!("expected `kind file hash`, got {value:?}"))
                })?;
                let declared =
                    NodeKind::parse(name).map_err(|e| Error::config(line, e.to_string()))?;
                if declared != stage_kind {
                    return Err(Error::config(
                        line,
                        format!(
                            "stage {i} of a {} chain must be {}, manifest says {}",
                            kind.name(),
                            stage_kind.name(),
                            declared.name()
                        ),
                    ));
                }
                stages.push(read_blob(dir, line, rest.trim(), stage_kind)?);
            }
            TrainedModel::Baseline(TrainedBaseline {
                kind,
                stages,
                scale,
                classes,
                channels,
                features,
                bn,
                slic,
            })
        }
        other => {
            return Err(Error::config(
                model_line,
                format!("unknown model kind {other:?}"),
            ));
        }
    };
    m.finish()?;
    model.audit()?;
    Ok(model)
}
