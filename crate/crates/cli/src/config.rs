//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers. Every section is optional and every key has a default, so the
//! empty file is a valid configuration (the depth-2 tree with the stock
//! parameter block). Unknown or duplicate keys fail with their line number.
//!
//! Sections and keys:
//!
//! ```text
//! [run]      method, classes, rounds, seed
//! [tree]     depth, node.<path>.kind (path = root, root.L, root.R, ...),
//!            level.<d>.patch, level.<d>.label, level.<d>.superpixels
//! [srf]      trees, max_depth, min_samples_leaf, candidate_features,
//!            candidate_thresholds, bootstrap_fraction, samples_per_image
//! [bn]       gmm_components, em_iterations, em_tol, var_floor,
//!            edge_true_given_diff, edge_true_given_same,
//!            bp_max_iters, bp_damping, bp_tol
//! [features] gabor_orientations, gabor_wavelengths, dog_sigmas, entropy_bins
//! [slic]     compactness, iterations, min_region_fraction
//! ```
//!
//! Patch sides and superpixel targets live on the tree's levels, not in
//! [srf]/[slic]: the engine sets them per scale, and baselines always run
//! at the level-0 scale of the default schedule.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::Path;
use std::str::FromStr;

use dmt_core::dmt::{
    node_count, BaselineKind, DmtConfig, NodeKind, ScaleSchedule, TreeSpec,
};
use dmt_core::eval::MethodSpec;
use dmt_core::{Error, Result};

/// What to train or evaluate. `DmtFixed` is the configured tree with every
/// level pinned to the level-0 scale; `Oracle` predicts the ground truth
/// and is only meaningful under `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodToken {
    Baseline(BaselineKind),
    Dmt,
    DmtFixed,
    Oracle,
}

impl MethodToken {
    pub fn parse(text: &str) -> Result<MethodToken> {
        match text {
            "dmt" => Ok(MethodToken::Dmt),
            "dmt-fixed" => Ok(MethodToken::DmtFixed),
            "oracle" => Ok(MethodToken::Oracle),
            other => BaselineKind::parse(other)
                .map(MethodToken::Baseline)
                .map_err(|_| {
                    Error::argument(format!(
                        "unknown method {other:?}: expected dmt, dmt-fixed, srf, bn, \
                         srf-srf, bn-bn, srf-bn, or oracle"
                    ))
                }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodToken::Baseline(kind) => kind.name(),
            MethodToken::Dmt => "dmt",
            MethodToken::DmtFixed => "dmt-fixed",
            MethodToken::Oracle => "oracle",
        }
    }

    /// The evaluation-harness description of this method under the given
    /// tree and schedule.
    pub fn to_method_spec(self, tree: &TreeSpec, schedule: &ScaleSchedule) -> MethodSpec {
        match self {
            MethodToken::Baseline(kind) => MethodSpec::Baseline(kind),
            MethodToken::Dmt => MethodSpec::Tree {
                tree: tree.clone(),
                schedule: schedule.clone(),
            },
            MethodToken::DmtFixed => MethodSpec::Tree {
                tree: tree.clone(),
                schedule: ScaleSchedule::uniform(tree.depth(), *schedule.entry(0)),
            },
            MethodToken::Oracle => MethodSpec::Oracle,
        }
    }
}

/// A parsed configuration: the method to train, the engine parameter block,
/// and the tree the dmt methods use.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: MethodToken,
    pub dmt: DmtConfig,
    pub tree: TreeSpec,
    pub schedule: ScaleSchedule,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

struct ConfigMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigMap {
    fn parse(text: &str) -> Result<ConfigMap> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(Error::config(line, format!("unterminated section {trimmed:?}")));
                };
                let name = name.trim();
                const SECTIONS: [&str; 6] = ["run", "tree", "srf", "bn", "features", "slic"];
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(
                        line,
                        format!("unknown section [{name}]: expected one of {SECTIONS:?}"),
                    ));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::config(line, format!("expected `key = value`, got {trimmed:?}")));
            };
            if section.is_empty() {
                return Err(Error::config(
                    line,
                    "keys must appear under a [section] header".to_string(),
                ));
            }
            let full = format!("{section}.{}", key.trim());
            if entries.contains_key(&full) {
                return Err(Error::config(line, format!("duplicate key {full}")));
            }
            entries.insert(full, (line, value.trim().to_string()));
        }
        Ok(ConfigMap { entries })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    /// Typed scalar with a default when the key is absent.
    fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Debug,
    {
        match self.take(key) {
            None => Ok(default),
            Some((line, value)) => value.parse().map_err(|_| {
                Error::config(line, format!("{key} cannot be parsed from {value:?}"))
            }),
        }
    }

    /// Drain every remaining key under `prefix.` in line order.
    fn drain_prefix(&mut self, prefix: &str) -> Vec<(String, usize, String)> {
        let full = format!("{prefix}.");
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(&full))
            .cloned()
            .collect();
        let mut out: Vec<(String, usize, String)> = keys
            .into_iter()
            .map(|k| {
                let (line, value) = self.entries.remove(&k).unwrap();
                (k, line, value)
            })
            .collect();
        out.sort_by_key(|(_, line, _)| *line);
        out
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.iter().min_by_key(|(_, (line, _))| *line) {
            return Err(Error::config(line.to_owned(), format!("unknown key {key}")));
        }
        Ok(())
    }
}

/// `root(.L|.R)*` to a heap position.
fn parse_node_path(line: usize, path: &str) -> Result<usize> {
    let mut parts = path.split('.');
    if parts.next() != Some("root") {
        return Err(Error::config(
            line,
            format!("node path {path:?} must start with `root`"),
        ));
    }
    let mut pos = 0usize;
    for part in parts {
        pos = match part {
            "L" => 2 * pos + 1,
            "R" => 2 * pos + 2,
            other => {
                return Err(Error::config(
                    line,
                    format!("node path segment {other:?} must be L or R"),
                ))
            }
        };
    }
    Ok(pos)
}

fn parse_f64_list(line: usize, key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split_whitespace()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::config(line, format!("{key} has a non-numeric entry {v:?}")))
        })
        .collect()
}

fn parse_sigma_pairs(line: usize, value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split_whitespace()
        .map(|pair| {
            let err = || {
                Error::config(
                    line,
                    format!("dog_sigmas entries look like `narrow:wide`, got {pair:?}"),
                )
            };
            let (a, b) = pair.split_once(':').ok_or_else(err)?;
            Ok((
                a.parse::<f64>().map_err(|_| err())?,
                b.parse::<f64>().map_err(|_| err())?,
            ))
        })
        .collect()
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut map = ConfigMap::parse(text)?;
    let mut dmt = DmtConfig::default();

    let method = match map.take("run.method") {
        None => MethodToken::Dmt,
        Some((line, value)) => {
            MethodToken::parse(&value).map_err(|e| Error::config(line, e.to_string()))?
        }
    };
    dmt.classes = map.take_or("run.classes", dmt.classes)?;
    dmt.rounds = map.take_or("run.rounds", dmt.rounds)?;
    dmt.rng_seed = map.take_or("run.seed", dmt.rng_seed)?;

    dmt.srf.n_trees = map.take_or("srf.trees", dmt.srf.n_trees)?;
    dmt.srf.max_depth = map.take_or("srf.max_depth", dmt.srf.max_depth)?;
    dmt.srf.min_samples_leaf = map.take_or("srf.min_samples_leaf", dmt.srf.min_samples_leaf)?;
    dmt.srf.candidate_features_per_node = match map.take("srf.candidate_features") {
        None => dmt.srf.candidate_features_per_node,
        Some((_, value)) if value == "sqrt" => None,
        Some((line, value)) => Some(value.parse().map_err(|_| {
            Error::config(
                line,
                format!("srf.candidate_features is `sqrt` or a count, got {value:?}"),
            )
        })?),
    };
    dmt.srf.candidate_thresholds =
        map.take_or("srf.candidate_thresholds", dmt.srf.candidate_thresholds)?;
    dmt.srf.bootstrap_fraction =
        map.take_or("srf.bootstrap_fraction", dmt.srf.bootstrap_fraction)?;
    dmt.srf.samples_per_image =
        map.take_or("srf.samples_per_image", dmt.srf.samples_per_image)?;

    dmt.bn.gmm_components = map.take_or("bn.gmm_components", dmt.bn.gmm_components)?;
    dmt.bn.em_iterations = map.take_or("bn.em_iterations", dmt.bn.em_iterations)?;
    dmt.bn.em_tol = map.take_or("bn.em_tol", dmt.bn.em_tol)?;
    dmt.bn.var_floor = map.take_or("bn.var_floor", dmt.bn.var_floor)?;
    dmt.bn.edge_true_given_diff =
        map.take_or("bn.edge_true_given_diff", dmt.bn.edge_true_given_diff)?;
    dmt.bn.edge_true_given_same =
        map.take_or("bn.edge_true_given_same", dmt.bn.edge_true_given_same)?;
    dmt.bn.bp_max_iters = map.take_or("bn.bp_max_iters", dmt.bn.bp_max_iters)?;
    dmt.bn.bp_damping = map.take_or("bn.bp_damping", dmt.bn.bp_damping)?;
    dmt.bn.bp_tol = map.take_or("bn.bp_tol", dmt.bn.bp_tol)?;

    dmt.features.gabor_orientations =
        map.take_or("features.gabor_orientations", dmt.features.gabor_orientations)?;
    if let Some((line, value)) = map.take("features.gabor_wavelengths") {
        dmt.features.gabor_wavelengths = parse_f64_list(line, "gabor_wavelengths", &value)?;
    }
    if let Some((line, value)) = map.take("features.dog_sigmas") {
        dmt.features.dog_sigma_pairs = parse_sigma_pairs(line, &value)?;
    }
    dmt.features.entropy_bins = map.take_or("features.entropy_bins", dmt.features.entropy_bins)?;

    dmt.slic.compactness = map.take_or("slic.compactness", dmt.slic.compactness)?;
    dmt.slic.iterations = map.take_or("slic.iterations", dmt.slic.iterations)?;
    dmt.slic.min_region_fraction =
        map.take_or("slic.min_region_fraction", dmt.slic.min_region_fraction)?;

    let depth: usize = map.take_or("tree.depth", 2)?;
    let mut tree = TreeSpec::default_for_depth(depth)?;
    let mut kinds = tree.kinds().to_vec();
    for (key, line, value) in map.drain_prefix("tree.node") {
        let path = key
            .strip_prefix("tree.node.")
            .and_then(|rest| rest.strip_suffix(".kind"))
            .ok_or_else(|| Error::config(line, format!("expected tree.node.<path>.kind, got {key}")))?;
        let pos = parse_node_path(line, path)?;
        if pos >= node_count(depth) {
            return Err(Error::config(
                line,
                format!("node path {path:?} lies below depth {depth}"),
            ));
        }
        kinds[pos] = NodeKind::parse(&value).map_err(|e| Error::config(line, e.to_string()))?;
    }
    tree = TreeSpec::new(depth, kinds)?;

    let mut entries = ScaleSchedule::default_for_depth(depth).entries().to_vec();
    for (key, line, value) in map.drain_prefix("tree.level") {
        let rest = key.strip_prefix("tree.level.").unwrap();
        let Some((level_text, field)) = rest.split_once('.') else {
            return Err(Error::config(
                line,
                format!("expected tree.level.<d>.patch|label|superpixels, got {key}"),
            ));
        };
        let level: usize = level_text
            .parse()
            .map_err(|_| Error::config(line, format!("level {level_text:?} is not a number")))?;
        if level > depth {
            return Err(Error::config(
                line,
                format!("level {level} exceeds tree depth {depth}"),
            ));
        }
        let parsed: usize = value
            .parse()
            .map_err(|_| Error::config(line, format!("{key} cannot be parsed from {value:?}")))?;
        match field {
            "patch" => entries[level].feature_patch_side = parsed,
            "label" => entries[level].label_patch_side = parsed,
            "superpixels" => entries[level].target_superpixels = parsed,
            other => {
                return Err(Error::config(
                    line,
                    format!("unknown level field {other:?}: expected patch, label, or superpixels"),
                ))
            }
        }
    }
    let schedule = ScaleSchedule::new(entries)?;

    map.finish()?;
    dmt.validate()?;
    Ok(RunConfig {
        method,
        dmt,
        tree,
        schedule,
    })
}
