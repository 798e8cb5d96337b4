//! Structured Random Forest: trees whose leaves store label-patch
//! distributions, trained on joint-label split targets and predicting dense
//! probability maps by overlapping-patch aggregation.
//!
//! The split target at each tree node is a derived class combining the label
//! at the patch center with the label at one random patch position, so splits
//! are chosen to explain label structure, not just the center pixel.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blobio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::features::{
    check_context, patch_context_into, patch_layout, ContextSats, DenseBase, FeatureConfig,
    FilterMaps,
};
use crate::grid::{
    patch_origin_offset, LabelMap, MultiChannelImage, PatchGeometry, ProbabilityMap,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SrfParams {
    pub n_trees: usize,
    pub feature_patch_side: usize,
    pub label_patch_side: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Candidate feature count per node; `None` means ceil(sqrt(d)).
    pub candidate_features_per_node: Option<usize>,
    pub candidate_thresholds: usize,
    /// Bootstrap resample size as a fraction of the training set, drawn with
    /// replacement.
    pub bootstrap_fraction: f64,
    pub samples_per_image: usize,
    pub rng_seed: u64,
}

impl Default for SrfParams {
    fn default() -> Self {
        SrfParams {
            n_trees: 15,
            feature_patch_side: 10,
            label_patch_side: 7,
            max_depth: 20,
            min_samples_leaf: 5,
            candidate_features_per_node: None,
            candidate_thresholds: 10,
            bootstrap_fraction: 1.0,
            samples_per_image: 2000,
            rng_seed: 0,
        }
    }
}

impl SrfParams {
    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry {
            feature_patch_side: self.feature_patch_side,
            label_patch_side: self.label_patch_side,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::argument("forest needs at least one tree"));
        }
        self.geometry().validate()?;
        if self.min_samples_leaf == 0 {
            return Err(Error::argument("min samples per leaf must be >= 1"));
        }
        if self.candidate_features_per_node == Some(0) {
            return Err(Error::argument("candidate feature count must be >= 1"));
        }
        if self.candidate_thresholds == 0 {
            return Err(Error::argument("need at least one candidate threshold"));
        }
        if !(self.bootstrap_fraction > 0.0 && self.bootstrap_fraction <= 1.0) {
            return Err(Error::argument("bootstrap fraction must be in (0, 1]"));
        }
        if self.samples_per_image == 0 {
            return Err(Error::argument("samples per image must be >= 1"));
        }
        Ok(())
    }
}

/// One training example: a feature vector and the label patch around its
/// center, row-major, `label_patch_side`² entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SrfSample {
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Shannon entropy in bits of a count vector.
pub fn entropy_bits(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Information gain of splitting the union of `left` and `right` into those
/// two branches; counts are per-class.
pub fn information_gain(left: &[usize], right: &[usize]) -> f64 {
    assert_eq!(left.len(), right.len(), "class count vectors must align");
    let parent: Vec<usize> = left.iter().zip(right).map(|(a, b)| a + b).collect();
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    let n = nl + nr;
    if n == 0 {
        return 0.0;
    }
    entropy_bits(&parent)
        - (nl as f64 / n as f64) * entropy_bits(left)
        - (nr as f64 / n as f64) * entropy_bits(right)
}

/// Draw class-balanced patch samples from one image: an equal quota per
/// center label, rounding leftovers to the background class, with quotas of
/// absent classes falling back to background as well. Draws are with
/// replacement, so small structures still fill their quota.
pub fn sample_training_patches(
    fm: &FilterMaps,
    labels: &LabelMap,
    context: Option<&ProbabilityMap>,
    params: &SrfParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SrfSample>> {
    params.validate()?;
    let (w, h) = (fm.width(), fm.height());
    if labels.width() != w || labels.height() != h {
        return Err(Error::argument(format!(
            "label map is {}x{}, image is {w}x{h}",
            labels.width(),
            labels.height()
        )));
    }
    let cfg = fm.config();
    let sats = validate_context(cfg, context, w, h)?.map(ContextSats::build);
    let classes = labels.classes();

    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); classes];
    for y in 0..h {
        for x in 0..w {
            by_class[labels.get(x, y) as usize].push((x, y));
        }
    }
    let per = params.samples_per_image / classes;
    let mut quotas = vec![per; classes];
    quotas[0] += params.samples_per_image - per * classes;
    let fallback = (0..classes)
        .find(|&l| !by_class[l].is_empty())
        .expect("label map has at least one pixel");
    for l in 0..classes {
        if by_class[l].is_empty() && l != fallback {
            quotas[fallback] += quotas[l];
            quotas[l] = 0;
        }
    }

    let fs = params.feature_patch_side;
    let ls = params.label_patch_side;
    let off = patch_origin_offset(ls);
    let base = fm.base_len();
    let ctx_len = if cfg.include_context {
        2 * cfg.context_classes
    } else {
        0
    };
    let mut out = Vec::with_capacity(params.samples_per_image);
    for l in 0..classes {
        let pool = &by_class[l];
        for _ in 0..quotas[l] {
            let (cx, cy) = pool[rng.gen_range(0..pool.len())];
            let mut features = vec![0.0f64; base + ctx_len];
            fm.patch_base_into(cx, cy, fs, &mut features[..base]);
            if let (Some(map), Some(s)) = (context, sats.as_ref()) {
                patch_context_into(map, s, cx, cy, fs, &mut features[base..]);
            }
            let mut patch_labels = Vec::with_capacity(ls * ls);
            for py in 0..ls {
                for px in 0..ls {
                    patch_labels.push(
                        labels.get_clamped(cx as isize + off + px as isize, cy as isize + off + py as isize),
                    );
                }
            }
            out.push(SrfSample {
                features,
                labels: patch_labels,
            });
        }
    }
    Ok(out)
}

fn validate_context<'a>(
    cfg: &FeatureConfig,
    context: Option<&'a ProbabilityMap>,
    w: usize,
    h: usize,
) -> Result<Option<&'a ProbabilityMap>> {
    match (cfg.include_context, context) {
        (false, None) => Ok(None),
        (true, Some(map)) => {
            if map.width() != w || map.height() != h {
                return Err(Error::argument(format!(
                    "context map is {}x{}, image is {w}x{h}",
                    map.width(),
                    map.height()
                )));
            }
            if map.classes() != cfg.context_classes {
                return Err(Error::argument(format!(
                    "context map has {} classes, configuration expects {}",
                    map.classes(),
                    cfg.context_classes
                )));
            }
            Ok(Some(map))
        }
        (false, Some(_)) => Err(Error::argument(
            "context map supplied but the feature configuration excludes context",
        )),
        (true, None) => Err(Error::argument(
            "feature configuration includes context but no map was supplied",
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        /// Per-position label distributions, `label_patch_side`² rows of
        /// `classes` values, each row summing to 1.
        hist: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrfForest {
    classes: usize,
    feature_len: usize,
    fingerprint: u64,
    geometry: PatchGeometry,
    trees: Vec<Vec<Node>>,
}

impl SrfForest {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    /// Fingerprint of the feature layout the forest was trained on.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    /// Route a feature vector down one tree; returns the reached leaf's
    /// per-position label distributions.
    pub fn route(&self, tree: usize, features: &[f64]) -> &[f32] {
        self.leaf_hist(tree, self.route_id(tree, features))
    }

    fn route_id(&self, tree: usize, features: &[f64]) -> u32 {
        let nodes = &self.trees[tree];
        let mut i = 0usize;
        loop {
            match &nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if features[*feature as usize] < *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { .. } => return i as u32,
            }
        }
    }

    fn leaf_hist(&self, tree: usize, node: u32) -> &[f32] {
        match &self.trees[tree][node as usize] {
            Node::Leaf { hist } => hist,
            Node::Split { .. } => unreachable!("routing always ends at a leaf"),
        }
    }
}

/// Train a forest. `classes` is the label alphabet size; `layout_fingerprint`
/// identifies the feature layout the samples were assembled with and is
/// checked again at prediction time.
pub fn srf_train(
    samples: &[SrfSample],
    classes: usize,
    layout_fingerprint: u64,
    params: &SrfParams,
) -> Result<SrfForest> {
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::argument("cannot train a forest on zero samples"));
    }
    if classes == 0 || classes > 256 {
        return Err(Error::argument("class count must be in 1..=256"));
    }
    let d = samples[0].features.len();
    let ls = params.label_patch_side;
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != d {
            return Err(Error::argument(format!(
                "sample {i} has {} features, sample 0 has {d}",
                s.features.len()
            )));
        }
        if s.labels.len() != ls * ls {
            return Err(Error::argument(format!(
                "sample {i} has a {}-entry label patch, expected {}",
                s.labels.len(),
                ls * ls
            )));
        }
        if let Some(&l) = s.labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::argument(format!(
                "sample {i} carries label {l}, but only {classes} classes exist"
            )));
        }
    }
    if d == 0 {
        return Err(Error::argument("feature vectors are empty"));
    }

    // Canonical sample order by content, so bootstrap draws live in an
    // order-independent index space and permuting the input changes nothing.
    let canonical = canonical_order(samples);
    let k = params
        .candidate_features_per_node
        .unwrap_or((d as f64).sqrt().ceil() as usize)
        .clamp(1, d);
    let builder = TreeBuilder {
        samples,
        classes,
        ls,
        center: (ls / 2) * ls + ls / 2,
        params,
        k,
        d,
    };
    let n = samples.len();
    let m = ((params.bootstrap_fraction * n as f64).ceil() as usize).max(1);
    let trees: Vec<Vec<Node>> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::stream(params.rng_seed, "srf-tree", t as u64);
            let boot: Vec<u32> = (0..m)
                .map(|_| canonical[rng.gen_range(0..n)] as u32)
                .collect();
            let mut nodes = Vec::new();
            builder.build(boot, 0, &mut rng, &mut nodes);
            nodes
        })
        .collect();
    Ok(SrfForest {
        classes,
        feature_len: d,
        fingerprint: layout_fingerprint,
        geometry: params.geometry(),
        trees,
    })
}

fn canonical_order(samples: &[SrfSample]) -> Vec<usize> {
    let hashes: Vec<u64> = samples
        .iter()
        .map(|s| {
            let mut bytes = Vec::with_capacity(s.features.len() * 8 + s.labels.len());
            for v in &s.features {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&s.labels);
            seed::fnv1a(&bytes)
        })
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        hashes[a].cmp(&hashes[b]).then_with(|| {
            let (sa, sb) = (&samples[a], &samples[b]);
            sa.features
                .iter()
                .map(|v| v.to_bits())
                .cmp(sb.features.iter().map(|v| v.to_bits()))
                .then_with(|| sa.labels.cmp(&sb.labels))
        })
    });
    order
}

struct TreeBuilder<'a> {
    samples: &'a [SrfSample],
    classes: usize,
    ls: usize,
    center: usize,
    params: &'a SrfParams,
    k: usize,
    d: usize,
}

impl TreeBuilder<'_> {
    fn build(&self, idx: Vec<u32>, depth: usize, rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> u32 {
        let n = idx.len();
        if depth >= self.params.max_depth || n < 2 * self.params.min_samples_leaf {
            return self.leaf(&idx, nodes);
        }
        // The split target: joint class of the center label and the label at
        // one random patch position, drawn fresh for this node.
        let pos = rng.gen_range(0..self.ls * self.ls);
        let derived: Vec<u32> = idx
            .iter()
            .map(|&i| {
                let s = &self.samples[i as usize];
                u32::from(s.labels[self.center]) * self.classes as u32 + u32::from(s.labels[pos])
            })
            .collect();
        if derived.windows(2).all(|w| w[0] == w[1]) {
            return self.leaf(&idx, nodes);
        }

        let l2 = self.classes * self.classes;
        let mut parent_counts = vec![0usize; l2];
        for &c in &derived {
            parent_counts[c as usize] += 1;
        }
        let h_parent = entropy_bits(&parent_counts);

        let feats = rand::seq::index::sample(rng, self.d, self.k);
        let msl = self.params.min_samples_leaf;
        let mut best: Option<(f64, u32, f64)> = None;
        let mut pairs: Vec<(f64, u32)> = Vec::with_capacity(n);
        let mut left_counts = vec![0usize; l2];
        for f in feats.iter() {
            pairs.clear();
            pairs.extend(
                idx.iter()
                    .zip(&derived)
                    .map(|(&i, &c)| (self.samples[i as usize].features[f], c)),
            );
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            // Candidate thresholds at evenly spaced quantiles of the node's
            // values; left branch takes value < threshold.
            let q = self.params.candidate_thresholds;
            left_counts.fill(0);
            let mut ptr = 0usize;
            let mut prev = f64::NEG_INFINITY;
            for j in 1..=q {
                let t = pairs[j * n / (q + 1)].0;
                if t == prev || t == pairs[0].0 {
                    continue;
                }
                prev = t;
                while ptr < n && pairs[ptr].0 < t {
                    left_counts[pairs[ptr].1 as usize] += 1;
                    ptr += 1;
                }
                let (nl, nr) = (ptr, n - ptr);
                if nl < msl || nr < msl {
                    continue;
                }
                let mut h_left = 0.0;
                let mut h_right = 0.0;
                for (c, &lc) in left_counts.iter().enumerate() {
                    let rc = parent_counts[c] - lc;
                    if lc > 0 {
                        let p = lc as f64 / nl as f64;
                        h_left -= p * p.log2();
                    }
                    if rc > 0 {
                        let p = rc as f64 / nr as f64;
                        h_right -= p * p.log2();
                    }
                }
                let gain = h_parent
                    - (nl as f64 / n as f64) * h_left
                    - (nr as f64 / n as f64) * h_right;
                if best.map_or(true, |(bg, _, _)| gain > bg) {
                    best = Some((gain, f as u32, t));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            // No candidate produced a valid split (e.g. identical features
            // with impure labels): forced leaf.
            return self.leaf(&idx, nodes);
        };
        let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idx
            .into_iter()
            .partition(|&i| self.samples[i as usize].features[feature as usize] < threshold);
        let id = nodes.len() as u32;
        nodes.push(Node::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(left_idx, depth + 1, rng, nodes);
        let right = self.build(right_idx, depth + 1, rng, nodes);
        nodes[id as usize] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn leaf(&self, idx: &[u32], nodes: &mut Vec<Node>) -> u32 {
        let positions = self.ls * self.ls;
        let mut counts = vec![0.0f64; positions * self.classes];
        for &i in idx {
            for (pos, &l) in self.samples[i as usize].labels.iter().enumerate() {
                counts[pos * self.classes + usize::from(l)] += 1.0;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        let hist: Vec<f32> = counts.iter().map(|&c| (c * inv) as f32).collect();
        let id = nodes.len() as u32;
        nodes.push(Node::Leaf { hist });
        id
    }
}

/// Dense prediction: featurize every pixel, route it down every tree, and
/// accumulate the reached leaves' label-patch distributions over their
/// footprints (cropped at image borders), then normalize per pixel.
pub fn srf_predict(
    forest: &SrfForest,
    img: &MultiChannelImage,
    context: Option<&ProbabilityMap>,
    cfg: &FeatureConfig,
) -> Result<ProbabilityMap> {
    cfg.validate()?;
    check_context(cfg, context, img)?;
    let fm = FilterMaps::compute(img, cfg)?;
    let dense = DenseBase::compute(&fm, forest.geometry.feature_patch_side);
    srf_predict_cached(forest, &fm, &dense, context)
}

/// Prediction against precomputed filter maps and dense base features, so
/// repeated passes over one image (different context maps) skip the filter
/// bank.
pub fn srf_predict_cached(
    forest: &SrfForest,
    fm: &FilterMaps,
    dense: &DenseBase,
    context: Option<&ProbabilityMap>,
) -> Result<ProbabilityMap> {
    let cfg = fm.config();
    let (w, h) = (fm.width(), fm.height());
    let context = validate_context(cfg, context, w, h)?;
    if dense.side() != forest.geometry.feature_patch_side {
        return Err(Error::argument(format!(
            "dense base was built for patch side {}, forest expects {}",
            dense.side(),
            forest.geometry.feature_patch_side
        )));
    }
    let layout = patch_layout(cfg, fm.channel_count());
    if layout.fingerprint() != forest.fingerprint {
        return Err(Error::contract(format!(
            "feature layout fingerprint {:#018x} does not match the forest's {:#018x}",
            layout.fingerprint(),
            forest.fingerprint
        )));
    }
    if layout.len() != forest.feature_len {
        return Err(Error::contract(format!(
            "feature length {} does not match the forest's {}",
            layout.len(),
            forest.feature_len
        )));
    }

    let classes = forest.classes;
    let ls = forest.geometry.label_patch_side;
    let off = patch_origin_offset(ls);
    let fs = forest.geometry.feature_patch_side;
    let base = fm.base_len();
    let sats = context.map(ContextSats::build);
    let n = w * h;
    let n_trees = forest.trees.len();

    // Pass 1: featurize and route every pixel through every tree. Rows are
    // independent, and per-pixel results do not depend on scheduling.
    let leaf_ids: Vec<Vec<u32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row_ids = vec![0u32; w * n_trees];
            let mut buf = vec![0.0f64; forest.feature_len];
            for x in 0..w {
                let features: &[f64] = if let (Some(map), Some(s)) = (context, sats.as_ref()) {
                    buf[..base].copy_from_slice(dense.row(x, y));
                    patch_context_into(map, s, x, y, fs, &mut buf[base..]);
                    &buf
                } else {
                    dense.row(x, y)
                };
                for t in 0..n_trees {
                    row_ids[x * n_trees + t] = forest.route_id(t, features);
                }
            }
            row_ids
        })
        .collect();

    // Pass 2: for every output pixel, gather the covering presentations'
    // leaf distributions in a fixed order (patch position, then tree), so
    // the f64 sums are identical no matter how rows are scheduled.
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = vec![0.0f64; w * classes];
            for x in 0..w {
                let acc = &mut out[x * classes..][..classes];
                for dy in 0..ls {
                    let cy = y as isize - off - dy as isize;
                    if cy < 0 || cy >= h as isize {
                        continue;
                    }
                    for dx in 0..ls {
                        let cx = x as isize - off - dx as isize;
                        if cx < 0 || cx >= w as isize {
                            continue;
                        }
                        let ids = &leaf_ids[cy as usize][cx as usize * n_trees..][..n_trees];
                        let pos = dy * ls + dx;
                        for t in 0..n_trees {
                            let hist = forest.leaf_hist(t, ids[t]);
                            let row = &hist[pos * classes..][..classes];
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += f64::from(v);
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut values = vec![0.0f32; classes * n];
    for y in 0..h {
        for x in 0..w {
            let acc = &rows[y][x * classes..][..classes];
            // Every pixel is covered at least by its own center presentation.
            let total: f64 = acc.iter().sum();
            for (l, &v) in acc.iter().enumerate() {
                values[l * n + y * w + x] = (v / total) as f32;
            }
        }
    }
    ProbabilityMap::new(w, h, classes, values)
}

const FOREST_MAGIC: &[u8; 4] = b"SRF1";

impl SrfForest {
    /// Versioned binary serialization with the feature fingerprint embedded,
    /// so a forest refuses to run against a different feature layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(FOREST_MAGIC);
        w.put_u64(self.fingerprint);
        w.put_u32(self.classes as u32);
        w.put_u32(self.feature_len as u32);
        w.put_u32(self.geometry.feature_patch_side as u32);
        w.put_u32(self.geometry.label_patch_side as u32);
        w.put_u32(self.geometry.stride as u32);
        w.put_u32(self.trees.len() as u32);
        for nodes in &self.trees {
            w.put_u32(nodes.len() as u32);
            for node in nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.put_u8(0);
                        w.put_u32(*feature);
                        w.put_f64(*threshold);
                        w.put_u32(*left);
                        w.put_u32(*right);
                    }
                    Node::Leaf { hist } => {
                        w.put_u8(1);
                        w.put_f32s(hist);
                    }
                }
            }
        }
        w.bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SrfForest> {
        let mut r = Reader::new(bytes);
        r.expect_magic(FOREST_MAGIC, "forest blob")?;
        let fingerprint = r.get_u64("layout fingerprint")?;
        let classes = r.get_u32("class count")? as usize;
        let feature_len = r.get_u32("feature length")? as usize;
        let geometry = PatchGeometry {
            feature_patch_side: r.get_u32("feature patch side")? as usize,
            label_patch_side: r.get_u32("label patch side")? as usize,
            stride: r.get_u32("stride")? as usize,
        };
        let tree_count = r.get_u32("tree count")? as usize;
        if classes == 0 || classes > 256 {
            return Err(Error::format(12, "class count must be in 1..=256"));
        }
        geometry
            .validate()
            .map_err(|e| Error::format(20, e.to_string()))?;
        if tree_count == 0 {
            return Err(Error::format(32, "forest blob holds zero trees"));
        }
        let hist_len = geometry.label_patch_side * geometry.label_patch_side * classes;
        let mut trees = Vec::with_capacity(tree_count);
        for _ in 0..tree_count {
            let node_count = r.get_u32("node count")? as usize;
            if node_count == 0 {
                return Err(Error::format(r.offset(), "tree with zero nodes"));
            }
            let mut nodes = Vec::with_capacity(node_count);
            for i in 0..node_count {
                let tag_offset = r.offset();
                match r.get_u8("node tag")? {
                    0 => {
                        let feature = r.get_u32("split feature")?;
                        let threshold = r.get_f64("split threshold")?;
                        let left = r.get_u32("left child")?;
                        let right = r.get_u32("right child")?;
                        if feature as usize >= feature_len {
                            return Err(Error::format(
                                tag_offset,
                                format!("split feature {feature} out of range {feature_len}"),
                            ));
                        }
                        // Children are emitted after their parent, which also
                        // rules out cycles.
                        for child in [left, right] {
                            if child as usize <= i || child as usize >= node_count {
                                return Err(Error::format(
                                    tag_offset,
                                    format!("child index {child} invalid at node {i}"),
                                ));
                            }
                        }
                        nodes.push(Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        });
                    }
                    1 => {
                        let hist = r.get_f32s(hist_len, "leaf histogram")?;
                        if hist.iter().any(|v| !v.is_finite() || *v < 0.0) {
                            return Err(Error::format(
                                tag_offset,
                                "leaf histogram holds a negative or non-finite value",
                            ));
                        }
                        nodes.push(Node::Leaf { hist });
                    }
                    tag => {
                        return Err(Error::format(tag_offset, format!("unknown node tag {tag}")));
                    }
                }
            }
            trees.push(nodes);
        }
        r.expect_end()?;
        Ok(SrfForest {
            classes,
            feature_len,
            fingerprint,
            geometry,
            trees,
        })
    }
}
