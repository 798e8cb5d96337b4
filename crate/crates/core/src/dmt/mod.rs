//! The dynamic multiscale tree engine.
//!
//! A full binary tree of classifier nodes exchanges probability maps along
//! its edges: an initial top-down pass fits every node against its parent's
//! map, then each refinement round fuses children upward into parent refits
//! and pushes the updated maps back down. Prediction replays the identical
//! flow and puts the leaf maps to a majority vote. The one- and two-stage
//! baselines reuse the same node fits as degenerate chains, so a depth-0
//! tree, the single-classifier baseline, and a direct classifier call are
//! bit-identical.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::bn::{bn_infer, bn_train, BnParams, BnTrainingImage, GmmLikelihood};
use crate::error::{Error, Result};
use crate::features::{patch_layout, superpixel_layout, DenseBase, FeatureConfig, FilterMaps};
use crate::grid::{argmax_labels, average_maps, LabelMap, MultiChannelImage, ProbabilityMap};
use crate::seed;
use crate::slic::{majority_label, slic, EdgeMap, SlicParams};
use crate::srf::{sample_training_patches, srf_predict_cached, srf_train, SrfForest, SrfParams};

mod model_io;
pub use model_io::{load_model, save_model};

/// Deepest supported tree; node positions must fit the seed-derivation
/// packing (`NODE_SLOTS`), and 2047 nodes is already far past any useful
/// configuration.
pub const MAX_DEPTH: usize = 11;

/// Seed-stream slots reserved per (node, round) for per-image sampling.
const IMAGE_SPAN: u64 = 1 << 20;
/// Seed-stream slots reserved for node positions within one round.
const NODE_SLOTS: u64 = 1 << 12;

/// Nodes in a full binary tree of the given depth.
pub fn node_count(depth: usize) -> usize {
    (1usize << (depth + 1)) - 1
}

/// Level of a heap-ordered position (root 0 sits at depth 0).
pub fn depth_of(position: usize) -> usize {
    (position + 1).ilog2() as usize
}

/// Parent of a non-root heap position.
pub fn parent_of(position: usize) -> usize {
    (position - 1) / 2
}

/// Children of a heap position.
pub fn children_of(position: usize) -> (usize, usize) {
    (2 * position + 1, 2 * position + 2)
}

/// The classifier family filling one tree position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Srf,
    Bn,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Srf => "srf",
            NodeKind::Bn => "bn",
        }
    }

    pub fn parse(name: &str) -> Result<NodeKind> {
        match name {
            "srf" => Ok(NodeKind::Srf),
            "bn" => Ok(NodeKind::Bn),
            other => Err(Error::argument(format!(
                "unknown node kind {other:?}; expected srf or bn"
            ))),
        }
    }
}

/// Tree topology: a full binary tree in heap order with a classifier kind
/// at every position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSpec {
    depth: usize,
    kinds: Vec<NodeKind>,
}

impl TreeSpec {
    pub fn new(depth: usize, kinds: Vec<NodeKind>) -> Result<TreeSpec> {
        if depth > MAX_DEPTH {
            return Err(Error::argument(format!(
                "tree depth {depth} exceeds the supported maximum {MAX_DEPTH}"
            )));
        }
        if kinds.len() != node_count(depth) {
            return Err(Error::argument(format!(
                "a depth-{depth} tree has {} positions, got {} kinds",
                node_count(depth),
                kinds.len()
            )));
        }
        Ok(TreeSpec { depth, kinds })
    }

    /// The default layout: a forest root, and under every parent a forest
    /// left child and a network right child, so both families stay
    /// represented on every level below the root.
    pub fn default_for_depth(depth: usize) -> Result<TreeSpec> {
        if depth > MAX_DEPTH {
            return Err(Error::argument(format!(
                "tree depth {depth} exceeds the supported maximum {MAX_DEPTH}"
            )));
        }
        let mut kinds = vec![NodeKind::Srf; node_count(depth)];
        for pos in 1..kinds.len() {
            // Left children sit at odd positions, right children at even.
            if pos % 2 == 0 {
                kinds[pos] = NodeKind::Bn;
            }
        }
        TreeSpec::new(depth, kinds)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn kind(&self, position: usize) -> NodeKind {
        self.kinds[position]
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    /// Positions on one level, in ascending order.
    pub fn level_positions(&self, level: usize) -> std::ops::Range<usize> {
        let first = (1usize << level) - 1;
        first..first + (1usize << level)
    }

    fn has_kind_at_level(&self, level: usize, kind: NodeKind) -> bool {
        self.level_positions(level).any(|p| self.kinds[p] == kind)
    }
}

/// Operating scale of one tree level: patch geometry for forest nodes and
/// the oversegmentation granularity for network nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleEntry {
    pub feature_patch_side: usize,
    pub label_patch_side: usize,
    pub target_superpixels: usize,
}

/// One scale entry per level, root first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    entries: Vec<ScaleEntry>,
}

impl ScaleSchedule {
    pub fn new(entries: Vec<ScaleEntry>) -> Result<ScaleSchedule> {
        if entries.is_empty() {
            return Err(Error::argument("scale schedule needs at least one level"));
        }
        for (level, e) in entries.iter().enumerate() {
            if e.feature_patch_side == 0 || e.label_patch_side == 0 || e.target_superpixels == 0 {
                return Err(Error::argument(format!(
                    "scale entry for level {level} has a zero field"
                )));
            }
        }
        Ok(ScaleSchedule { entries })
    }

    /// The default profile: the top two levels work at the coarse scale,
    /// deeper levels shrink the patches and raise the superpixel count.
    pub fn default_for_depth(depth: usize) -> ScaleSchedule {
        let entries = (0..=depth)
            .map(|level| {
                if level < 2 {
                    ScaleEntry {
                        feature_patch_side: 10,
                        label_patch_side: 7,
                        target_superpixels: 1000,
                    }
                } else {
                    ScaleEntry {
                        feature_patch_side: 8,
                        label_patch_side: 5,
                        target_superpixels: 1200,
                    }
                }
            })
            .collect();
        ScaleSchedule { entries }
    }

    /// Every level at the same scale.
    pub fn uniform(depth: usize, entry: ScaleEntry) -> ScaleSchedule {
        ScaleSchedule {
            entries: vec![entry; depth + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, level: usize) -> &ScaleEntry {
        &self.entries[level]
    }

    pub fn entries(&self) -> &[ScaleEntry] {
        &self.entries
    }
}

/// What a fit event did: the initial top-down fit, a parent refit against
/// its children's fused maps, or a child's map recomputation after its
/// parent changed (no retraining).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    InitialFit,
    ParentRefit,
    ChildRepass,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::InitialFit => "initial",
            Phase::ParentRefit => "refit",
            Phase::ChildRepass => "repass",
        }
    }

    pub fn parse(name: &str) -> Result<Phase> {
        match name {
            "initial" => Ok(Phase::InitialFit),
            "refit" => Ok(Phase::ParentRefit),
            "repass" => Ok(Phase::ChildRepass),
            other => Err(Error::argument(format!(
                "unknown fit phase {other:?}; expected initial, refit, or repass"
            ))),
        }
    }
}

/// One entry of the training audit log. `round` is 0 for the initial
/// descent and counts refinement rounds from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitEvent {
    pub position: usize,
    pub phase: Phase,
    pub round: usize,
}

/// Fit events a training run must log: every node once, then per round a
/// refit per parent and a repass per non-root.
pub fn expected_fit_events(depth: usize, rounds: usize) -> usize {
    let total = node_count(depth);
    let parents = total - (1usize << depth);
    let non_roots = total - 1;
    total + rounds * (parents + non_roots)
}

/// The canonical audit log: initial fits in position order, then per round
/// parent refits bottom-up and child repasses top-down.
pub fn expected_fit_log(depth: usize, rounds: usize) -> Vec<FitEvent> {
    let mut log = Vec::with_capacity(expected_fit_events(depth, rounds));
    for position in 0..node_count(depth) {
        log.push(FitEvent {
            position,
            phase: Phase::InitialFit,
            round: 0,
        });
    }
    for round in 1..=rounds {
        for level in (0..depth).rev() {
            let first = (1usize << level) - 1;
            for position in first..first + (1usize << level) {
                log.push(FitEvent {
                    position,
                    phase: Phase::ParentRefit,
                    round,
                });
            }
        }
        for level in 1..=depth {
            let first = (1usize << level) - 1;
            for position in first..first + (1usize << level) {
                log.push(FitEvent {
                    position,
                    phase: Phase::ChildRepass,
                    round,
                });
            }
        }
    }
    log
}

/// Everything a training run needs besides the tree shape and scales.
/// Patch sides and superpixel targets inside `srf` and `slic` are
/// per-level concerns and are overridden by the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DmtConfig {
    pub classes: usize,
    pub rounds: usize,
    pub features: FeatureConfig,
    pub srf: SrfParams,
    pub bn: BnParams,
    pub slic: SlicParams,
    pub rng_seed: u64,
}

impl Default for DmtConfig {
    fn default() -> Self {
        DmtConfig {
            classes: 4,
            rounds: 1,
            features: FeatureConfig::default(),
            srf: SrfParams::default(),
            bn: BnParams::default(),
            slic: SlicParams::default(),
            rng_seed: 0,
        }
    }
}

impl DmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > 256 {
            return Err(Error::argument("class count must be in 1..=256"));
        }
        if self.rounds as u64 >= NODE_SLOTS {
            return Err(Error::argument(format!(
                "round count must be below {NODE_SLOTS}"
            )));
        }
        self.features.validate()?;
        if self.features.include_context {
            return Err(Error::argument(
                "configure the context-free feature bank; the engine derives context layouts",
            ));
        }
        self.srf.validate()?;
        self.bn.validate()?;
        self.slic.validate()?;
        Ok(())
    }
}

/// Superpixel-level caches for one oversegmentation granularity.
struct SpCache {
    edge_map: EdgeMap,
    /// Context-free superpixel feature vectors, by superpixel id.
    features: Vec<Vec<f64>>,
}

/// Per-image caches shared by every node, phase, and model that touches the
/// image: the filter bank, dense patch features per patch side, and the
/// oversegmentation plus superpixel features per granularity. Building one
/// is the expensive step, so cross-validation prepares each image once.
pub struct PreparedImage {
    width: usize,
    height: usize,
    channels: usize,
    features: FeatureConfig,
    slic_base: SlicParams,
    fm: FilterMaps,
    dense: BTreeMap<usize, DenseBase>,
    sp: BTreeMap<usize, SpCache>,
}

impl PreparedImage {
    /// Caches for the given patch sides and superpixel targets.
    /// `slic_base` carries the granularity-independent oversegmentation
    /// settings; its own target is ignored.
    pub fn build(
        img: &MultiChannelImage,
        features: &FeatureConfig,
        slic_base: &SlicParams,
        sides: &[usize],
        targets: &[usize],
    ) -> Result<PreparedImage> {
        features.validate()?;
        if features.include_context {
            return Err(Error::argument(
                "prepare images with the context-free feature bank",
            ));
        }
        slic_base.validate()?;
        let fm = FilterMaps::compute(img, features)?;
        let mut dense = BTreeMap::new();
        for &side in sides {
            dense
                .entry(side)
                .or_insert_with(|| DenseBase::compute(&fm, side));
        }
        let mut sp = BTreeMap::new();
        for &target in targets {
            if sp.contains_key(&target) {
                continue;
            }
            let params = SlicParams {
                target_superpixels: target,
                ..slic_base.clone()
            };
            let edge_map = slic(img, 0, &params)?;
            let features_per_sp = superpixel_feature_vectors(img, &fm, &edge_map)?;
            sp.insert(
                target,
                SpCache {
                    edge_map,
                    features: features_per_sp,
                },
            );
        }
        Ok(PreparedImage {
            width: img.width(),
            height: img.height(),
            channels: img.channels(),
            features: features.clone(),
            slic_base: slic_base.clone(),
            fm,
            dense,
            sp,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn dense_for(&self, side: usize) -> Result<&DenseBase> {
        self.dense.get(&side).ok_or_else(|| {
            Error::contract(format!(
                "prepared image lacks dense features for patch side {side}"
            ))
        })
    }

    fn sp_for(&self, target: usize) -> Result<&SpCache> {
        self.sp.get(&target).ok_or_else(|| {
            Error::contract(format!(
                "prepared image lacks an oversegmentation for target {target}"
            ))
        })
    }
}

/// Context-free superpixel features for every region of one
/// oversegmentation. The neighborhood entry of each region is the mean of
/// its adjacent regions' mean intensities, per channel.
fn superpixel_feature_vectors(
    img: &MultiChannelImage,
    fm: &FilterMaps,
    edge_map: &EdgeMap,
) -> Result<Vec<Vec<f64>>> {
    let sps = edge_map.superpixels();
    let mut own_means = vec![vec![0.0f64; img.channels()]; sps.len()];
    for (i, sp) in sps.iter().enumerate() {
        for c in 0..img.channels() {
            let plane = img.channel(c);
            let sum: f64 = sp
                .pixels
                .iter()
                .map(|&(x, y)| f64::from(plane[y * img.width() + x]))
                .sum();
            own_means[i][c] = sum / sp.pixels.len() as f64;
        }
    }
    let adjacency = edge_map.adjacency();
    let len = fm.base_len();
    let mut out = Vec::with_capacity(sps.len());
    for (i, sp) in sps.iter().enumerate() {
        let neighbors = &adjacency[i];
        let nb: Option<Vec<f64>> = if neighbors.is_empty() {
            None
        } else {
            Some(
                (0..img.channels())
                    .map(|c| {
                        neighbors.iter().map(|&(_, j)| own_means[j][c]).sum::<f64>()
                            / neighbors.len() as f64
                    })
                    .collect(),
            )
        };
        let mut v = vec![0.0f64; len];
        fm.superpixel_base_into(&sp.pixels, nb.as_deref(), &mut v)?;
        out.push(v);
    }
    Ok(out)
}

/// Patch sides and superpixel targets a tree touches, each sorted and
/// deduplicated: a level contributes its patch side when it hosts a forest
/// node and its superpixel target when it hosts a network node.
pub fn required_scales(spec: &TreeSpec, schedule: &ScaleSchedule) -> (Vec<usize>, Vec<usize>) {
    let mut sides = Vec::new();
    let mut targets = Vec::new();
    for level in 0..=spec.depth() {
        let e = schedule.entry(level);
        if spec.has_kind_at_level(level, NodeKind::Srf) {
            sides.push(e.feature_patch_side);
        }
        if spec.has_kind_at_level(level, NodeKind::Bn) {
            targets.push(e.target_superpixels);
        }
    }
    sides.sort_unstable();
    sides.dedup();
    targets.sort_unstable();
    targets.dedup();
    (sides, targets)
}

/// A fitted classifier filling one tree position during one phase.
#[derive(Debug)]
pub enum NodeClassifier {
    Srf(SrfForest),
    Bn(GmmLikelihood),
}

impl NodeClassifier {
    pub fn kind(&self) -> NodeKind {
        match self {
            NodeClassifier::Srf(_) => NodeKind::Srf,
            NodeClassifier::Bn(_) => NodeKind::Bn,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            NodeClassifier::Srf(f) => f.to_bytes(),
            NodeClassifier::Bn(g) => g.to_bytes(),
        }
    }
}

/// One fitted tree position. The phase-A classifier serves the top-down
/// passes (context-free only at the root's first pass); the phase-B
/// classifier exists on parents once a refinement round has run and
/// consumes the children's fused maps.
#[derive(Debug)]
pub struct TrainedNode {
    position: usize,
    kind: NodeKind,
    scale: ScaleEntry,
    phase_a: NodeClassifier,
    phase_b: Option<NodeClassifier>,
}

impl TrainedNode {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn depth(&self) -> usize {
        depth_of(self.position)
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn scale(&self) -> &ScaleEntry {
        &self.scale
    }

    pub fn phase_a(&self) -> &NodeClassifier {
        &self.phase_a
    }

    pub fn phase_b(&self) -> Option<&NodeClassifier> {
        self.phase_b.as_ref()
    }
}

/// A trained tree: topology, scales, every node's classifiers, and the
/// audit log of the fit events that produced them.
#[derive(Debug)]
pub struct TrainedDmt {
    spec: TreeSpec,
    schedule: ScaleSchedule,
    nodes: Vec<TrainedNode>,
    rounds: usize,
    classes: usize,
    channels: usize,
    features: FeatureConfig,
    bn: BnParams,
    slic: SlicParams,
    audit_log: Vec<FitEvent>,
}

impl TrainedDmt {
    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn nodes(&self) -> &[TrainedNode] {
        &self.nodes
    }

    pub fn node(&self, position: usize) -> &TrainedNode {
        &self.nodes[position]
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn bn_params(&self) -> &BnParams {
        &self.bn
    }

    pub fn slic_params(&self) -> &SlicParams {
        &self.slic
    }

    pub fn audit_log(&self) -> &[FitEvent] {
        &self.audit_log
    }

    /// Scales required to prepare an image for this tree.
    pub fn required_scales(&self) -> (Vec<usize>, Vec<usize>) {
        required_scales(&self.spec, &self.schedule)
    }

    /// Checks the whole structure against its own declared shape: node
    /// kinds and scales against spec and schedule, classifier geometry and
    /// feature fingerprints against each phase's context arity, phase-B
    /// presence against the round count, and the audit log against the
    /// canonical fit sequence.
    pub fn audit(&self) -> Result<()> {
        if self.schedule.len() != self.spec.depth() + 1 {
            return Err(Error::contract(format!(
                "schedule covers {} levels, tree depth {} needs {}",
                self.schedule.len(),
                self.spec.depth(),
                self.spec.depth() + 1
            )));
        }
        if self.nodes.len() != self.spec.node_count() {
            return Err(Error::contract(format!(
                "model holds {} nodes, spec declares {}",
                self.nodes.len(),
                self.spec.node_count()
            )));
        }
        let base_fp = patch_layout(&self.features, self.channels).fingerprint();
        let ctx_fp =
            patch_layout(&self.features.with_context(self.classes), self.channels).fingerprint();
        let sp_len = superpixel_layout(&self.features, self.channels).len();
        for (pos, node) in self.nodes.iter().enumerate() {
            let fail = |msg: String| Err(Error::contract(format!("node {pos}: {msg}")));
            if node.position != pos {
                return fail(format!("recorded position {}", node.position));
            }
            if node.kind != self.spec.kind(pos) {
                return fail(format!(
                    "kind {} contradicts the spec's {}",
                    node.kind.name(),
                    self.spec.kind(pos).name()
                ));
            }
            let expected_scale = self.schedule.entry(depth_of(pos));
            if node.scale != *expected_scale {
                return fail("scale disagrees with the schedule".to_string());
            }
            let is_leaf = depth_of(pos) == self.spec.depth();
            let context_free = pos == 0;
            self.audit_classifier(&node.phase_a, node, context_free, base_fp, ctx_fp, sp_len)
                .map_err(|e| Error::contract(format!("node {pos} phase A: {e}")))?;
            match (&node.phase_b, is_leaf, self.rounds) {
                (Some(_), true, _) => return fail("a leaf carries a phase-B classifier".into()),
                (Some(b), false, r) if r >= 1 => {
                    self.audit_classifier(b, node, false, base_fp, ctx_fp, sp_len)
                        .map_err(|e| Error::contract(format!("node {pos} phase B: {e}")))?;
                }
                (Some(_), false, _) => {
                    return fail("phase-B classifier present without any refinement round".into())
                }
                (None, false, r) if r >= 1 => {
                    return fail("missing the phase-B classifier".into());
                }
                (None, _, _) => {}
            }
        }
        let expected = expected_fit_log(self.spec.depth(), self.rounds);
        if self.audit_log != expected {
            return Err(Error::contract(format!(
                "audit log of {} events does not match the canonical {}-event fit sequence",
                self.audit_log.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    fn audit_classifier(
        &self,
        clf: &NodeClassifier,
        node: &TrainedNode,
        context_free: bool,
        base_fp: u64,
        ctx_fp: u64,
        sp_len: usize,
    ) -> Result<()> {
        if clf.kind() != node.kind {
            return Err(Error::contract(format!(
                "classifier family {} contradicts the node kind {}",
                clf.kind().name(),
                node.kind.name()
            )));
        }
        match clf {
            NodeClassifier::Srf(f) => {
                if f.classes() != self.classes {
                    return Err(Error::contract(format!(
                        "forest predicts {} classes, model has {}",
                        f.classes(),
                        self.classes
                    )));
                }
                let g = f.geometry();
                if g.feature_patch_side != node.scale.feature_patch_side
                    || g.label_patch_side != node.scale.label_patch_side
                {
                    return Err(Error::contract(format!(
                        "forest patch geometry {}x{} disagrees with the scale {}x{}",
                        g.feature_patch_side,
                        g.label_patch_side,
                        node.scale.feature_patch_side,
                        node.scale.label_patch_side
                    )));
                }
                let expected = if context_free { base_fp } else { ctx_fp };
                if f.fingerprint() != expected {
                    return Err(Error::contract(format!(
                        "feature fingerprint {:#018x} does not match the phase's context arity",
                        f.fingerprint()
                    )));
                }
            }
            NodeClassifier::Bn(g) => {
                if g.classes() != self.classes {
                    return Err(Error::contract(format!(
                        "network models {} classes, model has {}",
                        g.classes(),
                        self.classes
                    )));
                }
                if g.dim() != sp_len {
                    return Err(Error::contract(format!(
                        "network consumes {}-dimensional features, layout provides {}",
                        g.dim(),
                        sp_len
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean of the two children's maps; the fusion is commutative, so swapping
/// the children leaves the parent's context unchanged.
pub fn fuse_children(left: &ProbabilityMap, right: &ProbabilityMap) -> Result<ProbabilityMap> {
    average_maps(&[left.clone(), right.clone()])
}

/// Majority vote over the leaf maps' argmax labels. A tied pixel goes to
/// the tied class with the highest posterior summed over every leaf map,
/// then to the lowest class id. The returned map is the mean of the leaf
/// maps; a single leaf passes through untouched.
pub fn vote_leaves(leaf_maps: &[ProbabilityMap]) -> Result<(LabelMap, ProbabilityMap)> {
    if leaf_maps.is_empty() {
        return Err(Error::argument("cannot vote over zero leaf maps"));
    }
    if leaf_maps.len() == 1 {
        return Ok((argmax_labels(&leaf_maps[0]), leaf_maps[0].clone()));
    }
    let mean = average_maps(leaf_maps)?;
    let (w, h, classes) = (mean.width(), mean.height(), mean.classes());
    let n = w * h;
    let leaf_labels: Vec<LabelMap> = leaf_maps.iter().map(argmax_labels).collect();
    let mut labels = vec![0u8; n];
    let mut counts = vec![0usize; classes];
    for pix in 0..n {
        counts.iter_mut().for_each(|c| *c = 0);
        for ll in &leaf_labels {
            counts[ll.labels()[pix] as usize] += 1;
        }
        let top = *counts.iter().max().expect("at least one class");
        let mut winner = None;
        let mut winner_support = f64::NEG_INFINITY;
        for (l, &c) in counts.iter().enumerate() {
            if c != top {
                continue;
            }
            let support: f64 = leaf_maps
                .iter()
                .map(|m| f64::from(m.values()[l * n + pix]))
                .sum();
            // Strict comparison keeps the lowest class id on equal support.
            if support > winner_support {
                winner_support = support;
                winner = Some(l);
            }
        }
        labels[pix] = winner.expect("some class holds the top count") as u8;
    }
    let labels = LabelMap::new(w, h, classes, labels)?;
    Ok((labels, mean))
}

/// Context handed to one classifier application: none, or one probability
/// map per image.
type ContextMaps<'a> = Option<&'a [ProbabilityMap]>;

/// Applies a fitted classifier to one prepared image. Forests consume the
/// context map as extra feature entries; networks consume it as the
/// superpixel prior.
fn apply_classifier(
    clf: &NodeClassifier,
    pack: &PreparedImage,
    context: Option<&ProbabilityMap>,
    scale: &ScaleEntry,
    classes: usize,
    bn: &BnParams,
) -> Result<ProbabilityMap> {
    match clf {
        NodeClassifier::Srf(f) => {
            let dense = pack.dense_for(scale.feature_patch_side)?;
            match context {
                None => srf_predict_cached(f, &pack.fm, dense, None),
                Some(map) => {
                    let fm = pack.fm.with_context(classes);
                    srf_predict_cached(f, &fm, dense, Some(map))
                }
            }
        }
        NodeClassifier::Bn(g) => {
            let sp = pack.sp_for(scale.target_superpixels)?;
            bn_infer(g, &sp.edge_map, &sp.features, context, bn)
        }
    }
}

/// Applies one classifier across every prepared image.
fn compute_maps(
    clf: &NodeClassifier,
    packs: &[&PreparedImage],
    context: ContextMaps,
    scale: &ScaleEntry,
    classes: usize,
    bn: &BnParams,
) -> Result<Vec<ProbabilityMap>> {
    packs
        .par_iter()
        .enumerate()
        .map(|(i, pack)| apply_classifier(clf, pack, context.map(|c| &c[i]), scale, classes, bn))
        .collect()
}

/// Seed material for one node fit: the per-image sampling stream and the
/// forest's own seed, both derived from the engine seed so every fit is
/// reproducible in isolation.
struct FitSeeds {
    sample_ns: &'static str,
    sample_base: u64,
    forest_seed: u64,
}

impl FitSeeds {
    fn phase_a(cfg: &DmtConfig, position: usize) -> FitSeeds {
        FitSeeds {
            sample_ns: "dmt-a-sample",
            sample_base: position as u64 * IMAGE_SPAN,
            forest_seed: seed::derive(cfg.rng_seed, "dmt-a-forest", position as u64),
        }
    }

    fn phase_b(cfg: &DmtConfig, position: usize, round: usize) -> FitSeeds {
        let slot = round as u64 * NODE_SLOTS + position as u64;
        FitSeeds {
            sample_ns: "dmt-b-sample",
            sample_base: slot * IMAGE_SPAN,
            forest_seed: seed::derive(cfg.rng_seed, "dmt-b-forest", slot),
        }
    }
}

/// Fits one forest node: per-image patch sampling under the phase's seeds,
/// then forest training over the pooled samples.
fn fit_srf(
    packs: &[&PreparedImage],
    labels: &[&LabelMap],
    context: ContextMaps,
    scale: &ScaleEntry,
    cfg: &DmtConfig,
    seeds: &FitSeeds,
) -> Result<SrfForest> {
    let channels = packs[0].channels();
    let params = SrfParams {
        feature_patch_side: scale.feature_patch_side,
        label_patch_side: scale.label_patch_side,
        rng_seed: seeds.forest_seed,
        ..cfg.srf.clone()
    };
    let fcfg = match context {
        None => cfg.features.clone(),
        Some(_) => cfg.features.with_context(cfg.classes),
    };
    let per_image: Vec<Vec<crate::srf::SrfSample>> = packs
        .par_iter()
        .enumerate()
        .map(|(i, pack)| {
            let fm = match context {
                None => pack.fm.clone(),
                Some(_) => pack.fm.with_context(cfg.classes),
            };
            let mut rng = seed::stream(cfg.rng_seed, seeds.sample_ns, seeds.sample_base + i as u64);
            sample_training_patches(&fm, labels[i], context.map(|c| &c[i]), &params, &mut rng)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<crate::srf::SrfSample> = per_image.into_iter().flatten().collect();
    let fingerprint = patch_layout(&fcfg, channels).fingerprint();
    srf_train(&samples, cfg.classes, fingerprint, &params)
}

/// Fits one network node from the cached superpixel features and majority
/// labels. Context does not enter network training; it returns only at
/// inference as the prior, so both phases of one position fit the same
/// distribution (each fit is still executed and logged).
fn fit_bn(
    packs: &[&PreparedImage],
    sp_labels: &[Vec<u8>],
    target: usize,
    cfg: &DmtConfig,
) -> Result<GmmLikelihood> {
    let mut tuples = Vec::with_capacity(packs.len());
    for (i, pack) in packs.iter().enumerate() {
        let sp = pack.sp_for(target)?;
        tuples.push(BnTrainingImage {
            edge_map: &sp.edge_map,
            features: &sp.features,
            labels: &sp_labels[i],
        });
    }
    bn_train(&tuples, cfg.classes, &cfg.bn)
}

/// Fits whichever classifier family the position calls for.
fn fit_node(
    kind: NodeKind,
    packs: &[&PreparedImage],
    labels: &[&LabelMap],
    sp_labels: &BTreeMap<usize, Vec<Vec<u8>>>,
    context: ContextMaps,
    scale: &ScaleEntry,
    cfg: &DmtConfig,
    seeds: &FitSeeds,
) -> Result<NodeClassifier> {
    match kind {
        NodeKind::Srf => Ok(NodeClassifier::Srf(fit_srf(
            packs, labels, context, scale, cfg, seeds,
        )?)),
        NodeKind::Bn => Ok(NodeClassifier::Bn(fit_bn(
            packs,
            &sp_labels[&scale.target_superpixels],
            scale.target_superpixels,
            cfg,
        )?)),
    }
}

/// Input checks shared by training entry points: consistent prepared
/// caches, labels matching their images, and class counts matching the
/// configuration.
fn check_training_inputs(
    packs: &[&PreparedImage],
    labels: &[&LabelMap],
    cfg: &DmtConfig,
    sides: &[usize],
    targets: &[usize],
) -> Result<()> {
    cfg.validate()?;
    if packs.is_empty() {
        return Err(Error::argument("training needs at least one image"));
    }
    if packs.len() as u64 >= IMAGE_SPAN {
        return Err(Error::argument(format!(
            "training set exceeds {IMAGE_SPAN} images"
        )));
    }
    if labels.len() != packs.len() {
        return Err(Error::argument(format!(
            "{} images but {} label maps",
            packs.len(),
            labels.len()
        )));
    }
    let channels = packs[0].channels();
    for (i, pack) in packs.iter().enumerate() {
        if pack.channels() != channels {
            return Err(Error::argument(format!(
                "image {i} has {} channels, image 0 has {channels}",
                pack.channels()
            )));
        }
        if pack.features != cfg.features {
            return Err(Error::contract(format!(
                "image {i} was prepared under a different feature configuration"
            )));
        }
        if pack.slic_base.compactness != cfg.slic.compactness
            || pack.slic_base.iterations != cfg.slic.iterations
            || pack.slic_base.min_region_fraction != cfg.slic.min_region_fraction
        {
            return Err(Error::contract(format!(
                "image {i} was prepared under different oversegmentation settings"
            )));
        }
        for &side in sides {
            pack.dense_for(side)?;
        }
        for &target in targets {
            pack.sp_for(target)?;
        }
        let lab = labels[i];
        if lab.width() != pack.width() || lab.height() != pack.height() {
            return Err(Error::argument(format!(
                "label map {i} is {}x{}, its image is {}x{}",
                lab.width(),
                lab.height(),
                pack.width(),
                pack.height()
            )));
        }
        if lab.classes() != cfg.classes {
            return Err(Error::argument(format!(
                "label map {i} declares {} classes, the configuration has {}",
                lab.classes(),
                cfg.classes
            )));
        }
    }
    Ok(())
}

/// Majority superpixel labels for every (granularity, image) pair a
/// network node will train on.
fn superpixel_labels(
    packs: &[&PreparedImage],
    labels: &[&LabelMap],
    targets: &[usize],
) -> Result<BTreeMap<usize, Vec<Vec<u8>>>> {
    let mut out = BTreeMap::new();
    for &target in targets {
        let per_image: Vec<Vec<u8>> = packs
            .par_iter()
            .zip(labels.par_iter())
            .map(|(pack, lab)| majority_label(&pack.sp_for(target)?.edge_map, lab))
            .collect::<Result<_>>()?;
        out.insert(target, per_image);
    }
    Ok(out)
}

/// Trains a tree, preparing the per-image caches first. Prefer
/// [`dmt_train_prepared`] when the caches can be shared across runs.
pub fn dmt_train(
    images: &[MultiChannelImage],
    labels: &[LabelMap],
    spec: &TreeSpec,
    schedule: &ScaleSchedule,
    cfg: &DmtConfig,
) -> Result<TrainedDmt> {
    cfg.validate()?;
    let (sides, targets) = required_scales(spec, schedule);
    let packs: Vec<PreparedImage> = images
        .par_iter()
        .map(|img| PreparedImage::build(img, &cfg.features, &cfg.slic, &sides, &targets))
        .collect::<Result<_>>()?;
    let pack_refs: Vec<&PreparedImage> = packs.iter().collect();
    let label_refs: Vec<&LabelMap> = labels.iter().collect();
    dmt_train_prepared(&pack_refs, &label_refs, spec, schedule, cfg)
}

/// Trains a tree over prepared images.
///
/// The flow per the training protocol: fit every level top-down against the
/// parent's latest map (the root's first pass is context-free), then per
/// refinement round fit every parent's phase-B classifier against its
/// children's fused maps bottom-up and recompute the children's maps
/// top-down with the updated parents. Repasses reuse the phase-A
/// classifiers; only maps move.
pub fn dmt_train_prepared(
    packs: &[&PreparedImage],
    labels: &[&LabelMap],
    spec: &TreeSpec,
    schedule: &ScaleSchedule,
    cfg: &DmtConfig,
) -> Result<TrainedDmt> {
    if schedule.len() != spec.depth() + 1 {
        return Err(Error::argument(format!(
            "schedule covers {} levels, a depth-{} tree needs {}",
            schedule.len(),
            spec.depth(),
            spec.depth() + 1
        )));
    }
    let (sides, targets) = required_scales(spec, schedule);
    check_training_inputs(packs, labels, cfg, &sides, &targets)?;
    for level in 0..=spec.depth() {
        if spec.has_kind_at_level(level, NodeKind::Srf) {
            let e = schedule.entry(level);
            SrfParams {
                feature_patch_side: e.feature_patch_side,
                label_patch_side: e.label_patch_side,
                ..cfg.srf.clone()
            }
            .validate()?;
        }
    }
    let sp_labels = superpixel_labels(packs, labels, &targets)?;

    let depth = spec.depth();
    let n = spec.node_count();
    let channels = packs[0].channels();
    let mut phase_a: Vec<Option<NodeClassifier>> = (0..n).map(|_| None).collect();
    let mut phase_b: Vec<Option<NodeClassifier>> = (0..n).map(|_| None).collect();
    let mut maps: Vec<Vec<ProbabilityMap>> = (0..n).map(|_| Vec::new()).collect();
    let mut log = Vec::with_capacity(expected_fit_events(depth, cfg.rounds));

    // Initial descent: fit and map one level at a time, so children always
    // see their parent's finished maps.
    for level in 0..=depth {
        let scale = schedule.entry(level);
        let results: Vec<(NodeClassifier, Vec<ProbabilityMap>)> = spec
            .level_positions(level)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|pos| {
                let context: ContextMaps = if level == 0 {
                    None
                } else {
                    Some(&maps[parent_of(pos)])
                };
                let seeds = FitSeeds::phase_a(cfg, pos);
                let clf = fit_node(
                    spec.kind(pos),
                    packs,
                    labels,
                    &sp_labels,
                    context,
                    scale,
                    cfg,
                    &seeds,
                )?;
                let node_maps = compute_maps(&clf, packs, context, scale, cfg.classes, &cfg.bn)?;
                Ok((clf, node_maps))
            })
            .collect::<Result<_>>()?;
        for (pos, (clf, m)) in spec.level_positions(level).zip(results) {
            phase_a[pos] = Some(clf);
            maps[pos] = m;
            log.push(FitEvent {
                position: pos,
                phase: Phase::InitialFit,
                round: 0,
            });
        }
    }

    for round in 1..=cfg.rounds {
        // Ascent: every parent, deepest level first, fuses its children's
        // current maps, fits its phase-B classifier against them, and
        // replaces its own maps.
        for level in (0..depth).rev() {
            let scale = schedule.entry(level);
            let results: Vec<(NodeClassifier, Vec<ProbabilityMap>)> = spec
                .level_positions(level)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|pos| {
                    let (lc, rc) = children_of(pos);
                    let fused: Vec<ProbabilityMap> = (0..packs.len())
                        .map(|i| fuse_children(&maps[lc][i], &maps[rc][i]))
                        .collect::<Result<_>>()?;
                    let seeds = FitSeeds::phase_b(cfg, pos, round);
                    let clf = fit_node(
                        spec.kind(pos),
                        packs,
                        labels,
                        &sp_labels,
                        Some(&fused),
                        scale,
                        cfg,
                        &seeds,
                    )?;
                    let node_maps =
                        compute_maps(&clf, packs, Some(&fused), scale, cfg.classes, &cfg.bn)?;
                    Ok((clf, node_maps))
                })
                .collect::<Result<_>>()?;
            for (pos, (clf, m)) in spec.level_positions(level).zip(results) {
                phase_b[pos] = Some(clf);
                maps[pos] = m;
                log.push(FitEvent {
                    position: pos,
                    phase: Phase::ParentRefit,
                    round,
                });
            }
        }
        // Re-descent: recompute every child's map under its updated parent.
        // No retraining happens here.
        for level in 1..=depth {
            let scale = schedule.entry(level);
            let results: Vec<Vec<ProbabilityMap>> = spec
                .level_positions(level)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|pos| {
                    let clf = phase_a[pos].as_ref().expect("descent fitted every node");
                    let context = Some(maps[parent_of(pos)].as_slice());
                    compute_maps(clf, packs, context, scale, cfg.classes, &cfg.bn)
                })
                .collect::<Result<_>>()?;
            for (pos, m) in spec.level_positions(level).zip(results) {
                maps[pos] = m;
                log.push(FitEvent {
                    position: pos,
                    phase: Phase::ChildRepass,
                    round,
                });
            }
        }
    }

    let nodes: Vec<TrainedNode> = (0..n)
        .map(|pos| TrainedNode {
            position: pos,
            kind: spec.kind(pos),
            scale: *schedule.entry(depth_of(pos)),
            phase_a: phase_a[pos].take().expect("descent fitted every node"),
            phase_b: phase_b[pos].take(),
        })
        .collect();
    let model = TrainedDmt {
        spec: spec.clone(),
        schedule: schedule.clone(),
        nodes,
        rounds: cfg.rounds,
        classes: cfg.classes,
        channels,
        features: cfg.features.clone(),
        bn: cfg.bn.clone(),
        slic: cfg.slic.clone(),
        audit_log: log,
    };
    model.audit()?;
    Ok(model)
}

/// Checks a prepared image against a trained model's expectations.
fn check_prediction_input(
    pack: &PreparedImage,
    channels: usize,
    features: &FeatureConfig,
) -> Result<()> {
    if pack.channels() != channels {
        return Err(Error::contract(format!(
            "image has {} channels, the model was trained on {channels}",
            pack.channels()
        )));
    }
    if pack.features != *features {
        return Err(Error::contract(
            "image was prepared under a different feature configuration",
        ));
    }
    Ok(())
}

impl TrainedDmt {
    /// Replays the training flow on one image and returns every node's
    /// final map, in position order.
    pub fn flow_maps(&self, pack: &PreparedImage) -> Result<Vec<ProbabilityMap>> {
        check_prediction_input(pack, self.channels, &self.features)?;
        let depth = self.spec.depth();
        let mut maps: Vec<Option<ProbabilityMap>> = (0..self.spec.node_count())
            .map(|_| None)
            .collect();
        let apply = |clf: &NodeClassifier, ctx: Option<&ProbabilityMap>, pos: usize| {
            apply_classifier(
                clf,
                pack,
                ctx,
                self.schedule.entry(depth_of(pos)),
                self.classes,
                &self.bn,
            )
        };
        for level in 0..=depth {
            for pos in self.spec.level_positions(level) {
                let ctx = if level == 0 {
                    None
                } else {
                    Some(maps[parent_of(pos)].as_ref().expect("parent level done"))
                };
                maps[pos] = Some(apply(&self.nodes[pos].phase_a, ctx, pos)?);
            }
        }
        for _round in 1..=self.rounds {
            for level in (0..depth).rev() {
                for pos in self.spec.level_positions(level) {
                    let (lc, rc) = children_of(pos);
                    let fused = fuse_children(
                        maps[lc].as_ref().expect("child level done"),
                        maps[rc].as_ref().expect("child level done"),
                    )?;
                    let clf = self.nodes[pos].phase_b.as_ref().ok_or_else(|| {
                        Error::contract(format!("node {pos} lacks its phase-B classifier"))
                    })?;
                    maps[pos] = Some(apply(clf, Some(&fused), pos)?);
                }
            }
            for level in 1..=depth {
                for pos in self.spec.level_positions(level) {
                    let parent = maps[parent_of(pos)].clone().expect("parent level done");
                    maps[pos] = Some(apply(&self.nodes[pos].phase_a, Some(&parent), pos)?);
                }
            }
        }
        Ok(maps.into_iter().map(|m| m.expect("all levels done")).collect())
    }

    /// The leaf maps after a full replay, in position order.
    pub fn leaf_maps(&self, pack: &PreparedImage) -> Result<Vec<ProbabilityMap>> {
        let mut maps = self.flow_maps(pack)?;
        let first_leaf = (1usize << self.spec.depth()) - 1;
        Ok(maps.drain(first_leaf..).collect())
    }
}

/// Predicts one image, preparing its caches first.
pub fn dmt_predict(
    model: &TrainedDmt,
    img: &MultiChannelImage,
) -> Result<(LabelMap, ProbabilityMap)> {
    let (sides, targets) = model.required_scales();
    let pack = PreparedImage::build(img, &model.features, &model.slic, &sides, &targets)?;
    dmt_predict_prepared(model, &pack)
}

/// Predicts one prepared image: replays the flow and votes over the leaves.
pub fn dmt_predict_prepared(
    model: &TrainedDmt,
    pack: &PreparedImage,
) -> Result<(LabelMap, ProbabilityMap)> {
    let leaves = model.leaf_maps(pack)?;
    vote_leaves(&leaves)
}

/// The classifier chains offered as reference points: each single family
/// alone, and the three two-stage cascades where the second stage consumes
/// the first stage's posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Srf,
    Bn,
    SrfSrf,
    BnBn,
    SrfBn,
}

impl BaselineKind {
    pub fn parse(name: &str) -> Result<BaselineKind> {
        match name {
            "srf" => Ok(BaselineKind::Srf),
            "bn" => Ok(BaselineKind::Bn),
            "srf-srf" => Ok(BaselineKind::SrfSrf),
            "bn-bn" => Ok(BaselineKind::BnBn),
            "srf-bn" => Ok(BaselineKind::SrfBn),
            other => Err(Error::argument(format!(
                "unknown baseline kind {other:?}; expected srf, bn, srf-srf, bn-bn, or srf-bn"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Srf => "srf",
            BaselineKind::Bn => "bn",
            BaselineKind::SrfSrf => "srf-srf",
            BaselineKind::BnBn => "bn-bn",
            BaselineKind::SrfBn => "srf-bn",
        }
    }

    /// Stage kinds, first stage first.
    pub fn stages(self) -> &'static [NodeKind] {
        match self {
            BaselineKind::Srf => &[NodeKind::Srf],
            BaselineKind::Bn => &[NodeKind::Bn],
            BaselineKind::SrfSrf => &[NodeKind::Srf, NodeKind::Srf],
            BaselineKind::BnBn => &[NodeKind::Bn, NodeKind::Bn],
            BaselineKind::SrfBn => &[NodeKind::Srf, NodeKind::Bn],
        }
    }
}

/// A trained baseline chain. Stage fits reuse the tree's node seed
/// derivations with the stage index as the position, so the single-forest
/// baseline and a depth-0 tree are the same model bit for bit.
#[derive(Debug)]
pub struct TrainedBaseline {
    kind: BaselineKind,
    stages: Vec<NodeClassifier>,
    scale: ScaleEntry,
    classes: usize,
    channels: usize,
    features: FeatureConfig,
    bn: BnParams,
    slic: SlicParams,
}

impl TrainedBaseline {
    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn stages(&self) -> &[NodeClassifier] {
        &self.stages
    }

    pub fn scale(&self) -> &ScaleEntry {
        &self.scale
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn bn_params(&self) -> &BnParams {
        &self.bn
    }

    pub fn slic_params(&self) -> &SlicParams {
        &self.slic
    }

    /// Scales required to prepare an image for this chain.
    pub fn required_scales(&self) -> (Vec<usize>, Vec<usize>) {
        let kinds = self.kind.stages();
        let mut sides = Vec::new();
        let mut targets = Vec::new();
        if kinds.contains(&NodeKind::Srf) {
            sides.push(self.scale.feature_patch_side);
        }
        if kinds.contains(&NodeKind::Bn) {
            targets.push(self.scale.target_superpixels);
        }
        (sides, targets)
    }

    /// Structural checks mirroring the tree audit: stage families, class
    /// counts, geometry, and context arity (stage 0 context-free, stage 1
    /// context-bearing).
    pub fn audit(&self) -> Result<()> {
        let kinds = self.kind.stages();
        if self.stages.len() != kinds.len() {
            return Err(Error::contract(format!(
                "baseline {} holds {} stages, expected {}",
                self.kind.name(),
                self.stages.len(),
                kinds.len()
            )));
        }
        let base_fp = patch_layout(&self.features, self.channels).fingerprint();
        let ctx_fp =
            patch_layout(&self.features.with_context(self.classes), self.channels).fingerprint();
        let sp_len = superpixel_layout(&self.features, self.channels).len();
        for (i, (clf, &kind)) in self.stages.iter().zip(kinds).enumerate() {
            if clf.kind() != kind {
                return Err(Error::contract(format!(
                    "stage {i} is a {}, the chain calls for a {}",
                    clf.kind().name(),
                    kind.name()
                )));
            }
            match clf {
                NodeClassifier::Srf(f) => {
                    if f.classes() != self.classes {
                        return Err(Error::contract(format!(
                            "stage {i} forest predicts {} classes, model has {}",
                            f.classes(),
                            self.classes
                        )));
                    }
                    let expected = if i == 0 { base_fp } else { ctx_fp };
                    if f.fingerprint() != expected {
                        return Err(Error::contract(format!(
                            "stage {i} fingerprint does not match its context arity"
                        )));
                    }
                }
                NodeClassifier::Bn(g) => {
                    if g.classes() != self.classes || g.dim() != sp_len {
                        return Err(Error::contract(format!(
                            "stage {i} network shape disagrees with the model"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Trains a baseline chain, preparing the per-image caches first.
pub fn baseline_train(
    kind: BaselineKind,
    images: &[MultiChannelImage],
    labels: &[LabelMap],
    cfg: &DmtConfig,
) -> Result<TrainedBaseline> {
    cfg.validate()?;
    let scale = *ScaleSchedule::default_for_depth(0).entry(0);
    let (sides, targets) = baseline_scales(kind, &scale);
    let packs: Vec<PreparedImage> = images
        .par_iter()
        .map(|img| PreparedImage::build(img, &cfg.features, &cfg.slic, &sides, &targets))
        .collect::<Result<_>>()?;
    let pack_refs: Vec<&PreparedImage> = packs.iter().collect();
    let label_refs: Vec<&LabelMap> = labels.iter().collect();
    baseline_train_prepared(kind, &pack_refs, &label_refs, cfg)
}

pub(crate) fn baseline_scales(kind: BaselineKind, scale: &ScaleEntry) -> (Vec<usize>, Vec<usize>) {
    let kinds = kind.stages();
    let mut sides = Vec::new();
    let mut targets = Vec::new();
    if kinds.contains(&NodeKind::Srf) {
        sides.push(scale.feature_patch_side);
    }
    if kinds.contains(&NodeKind::Bn) {
        targets.push(scale.target_superpixels);
    }
    (sides, targets)
}

/// Trains a baseline chain over prepared images. Every stage works at the
/// default root scale; stage 0 fits context-free and stage 1 fits against
/// stage 0's training-set posteriors.
pub fn baseline_train_prepared(
    kind: BaselineKind,
    packs: &[&PreparedImage],
    labels: &[&LabelMap],
    cfg: &DmtConfig,
) -> Result<TrainedBaseline> {
    let scale = *ScaleSchedule::default_for_depth(0).entry(0);
    let (sides, targets) = baseline_scales(kind, &scale);
    check_training_inputs(packs, labels, cfg, &sides, &targets)?;
    if kind.stages().contains(&NodeKind::Srf) {
        SrfParams {
            feature_patch_side: scale.feature_patch_side,
            label_patch_side: scale.label_patch_side,
            ..cfg.srf.clone()
        }
        .validate()?;
    }
    let sp_labels = superpixel_labels(packs, labels, &targets)?;

    let mut stages = Vec::new();
    let mut context: Option<Vec<ProbabilityMap>> = None;
    for (i, &stage_kind) in kind.stages().iter().enumerate() {
        let seeds = FitSeeds::phase_a(cfg, i);
        let clf = fit_node(
            stage_kind,
            packs,
            labels,
            &sp_labels,
            context.as_deref(),
            &scale,
            cfg,
            &seeds,
        )?;
        if i + 1 < kind.stages().len() {
            context = Some(compute_maps(
                &clf,
                packs,
                context.as_deref(),
                &scale,
                cfg.classes,
                &cfg.bn,
            )?);
        }
        stages.push(clf);
    }
    let model = TrainedBaseline {
        kind,
        stages,
        scale,
        classes: cfg.classes,
        channels: packs[0].channels(),
        features: cfg.features.clone(),
        bn: cfg.bn.clone(),
        slic: cfg.slic.clone(),
    };
    model.audit()?;
    Ok(model)
}

/// Predicts one image with a baseline chain, preparing its caches first.
pub fn baseline_predict(
    model: &TrainedBaseline,
    img: &MultiChannelImage,
) -> Result<(LabelMap, ProbabilityMap)> {
    let (sides, targets) = model.required_scales();
    let pack = PreparedImage::build(img, &model.features, &model.slic, &sides, &targets)?;
    baseline_predict_prepared(model, &pack)
}

/// Predicts one prepared image with a baseline chain: each stage's
/// posterior feeds the next, and the last stage's map is argmaxed.
pub fn baseline_predict_prepared(
    model: &TrainedBaseline,
    pack: &PreparedImage,
) -> Result<(LabelMap, ProbabilityMap)> {
    check_prediction_input(pack, model.channels, &model.features)?;
    let mut current: Option<ProbabilityMap> = None;
    for clf in &model.stages {
        let map = apply_classifier(
            clf,
            pack,
            current.as_ref(),
            &model.scale,
            model.classes,
            &model.bn,
        )?;
        current = Some(map);
    }
    let map = current.expect("chains have at least one stage");
    Ok((argmax_labels(&map), map))
}

/// A trained model of either shape, as stored on disk and driven by the
/// command line.
#[derive(Debug)]
pub enum TrainedModel {
    Tree(TrainedDmt),
    Baseline(TrainedBaseline),
}

impl TrainedModel {
    pub fn classes(&self) -> usize {
        match self {
            TrainedModel::Tree(m) => m.classes(),
            TrainedModel::Baseline(m) => m.classes(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            TrainedModel::Tree(m) => m.channels(),
            TrainedModel::Baseline(m) => m.channels(),
        }
    }

    pub fn required_scales(&self) -> (Vec<usize>, Vec<usize>) {
        match self {
            TrainedModel::Tree(m) => m.required_scales(),
            TrainedModel::Baseline(m) => m.required_scales(),
        }
    }

    pub fn features(&self) -> &FeatureConfig {
        match self {
            TrainedModel::Tree(m) => m.features(),
            TrainedModel::Baseline(m) => m.features(),
        }
    }

    pub fn slic_params(&self) -> &SlicParams {
        match self {
            TrainedModel::Tree(m) => m.slic_params(),
            TrainedModel::Baseline(m) => m.slic_params(),
        }
    }

    pub fn audit(&self) -> Result<()> {
        match self {
            TrainedModel::Tree(m) => m.audit(),
            TrainedModel::Baseline(m) => m.audit(),
        }
    }

    pub fn predict(&self, img: &MultiChannelImage) -> Result<(LabelMap, ProbabilityMap)> {
        match self {
            TrainedModel::Tree(m) => dmt_predict(m, img),
            TrainedModel::Baseline(m) => baseline_predict(m, img),
        }
    }

    pub fn predict_prepared(&self, pack: &PreparedImage) -> Result<(LabelMap, ProbabilityMap)> {
        match self {
            TrainedModel::Tree(m) => dmt_predict_prepared(m, pack),
            TrainedModel::Baseline(m) => baseline_predict_prepared(m, pack),
        }
    }
}

#[cfg(test)]
mod tests;
