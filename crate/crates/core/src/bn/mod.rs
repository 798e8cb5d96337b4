//! Bayesian network over superpixels and edges: class-conditional
//! likelihoods from diagonal Gaussian mixtures, edge-state evidence from
//! strength histograms, and damped sum-product belief propagation.
//!
//! The graph has four layers: superpixel label nodes, edge-state nodes whose
//! parents are the two superpixels an edge separates, the superpixels'
//! feature vectors, and the edges' observed strengths. Training learns the
//! feature likelihoods and the strength histograms; the per-image structure
//! comes from an `EdgeMap` at inference time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blobio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::ProbabilityMap;
use crate::seed;
use crate::slic::EdgeMap;

const LN_2PI: f64 = 1.8378770664093453;
/// Bin count of the learned edge-strength histograms.
const STRENGTH_BINS: usize = 16;
/// Fixed seed of the per-class k-means++ streams; training is deterministic
/// given the data.
const GMM_SEED: u64 = 0xB4E5;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gmm_components: usize,
    pub em_iterations: usize,
    /// EM stops when the mean per-sample log-likelihood improves by less
    /// than this.
    pub em_tol: f64,
    pub var_floor: f64,
    /// P(edge on | parent labels differ).
    pub edge_true_given_diff: f64,
    /// P(edge on | parent labels equal).
    pub edge_true_given_same: f64,
    pub bp_max_iters: usize,
    pub bp_damping: f64,
    pub bp_tol: f64,
}

impl Default for BnParams {
    fn default() -> Self {
        BnParams {
            gmm_components: 3,
            em_iterations: 100,
            em_tol: 1e-5,
            var_floor: 1e-6,
            edge_true_given_diff: 0.8,
            edge_true_given_same: 0.2,
            bp_max_iters: 50,
            bp_damping: 0.5,
            bp_tol: 1e-4,
        }
    }
}

impl BnParams {
    pub fn validate(&self) -> Result<()> {
        if self.gmm_components == 0 {
            return Err(Error::argument("mixture needs at least one component"));
        }
        if self.em_iterations == 0 || self.bp_max_iters == 0 {
            return Err(Error::argument("iteration counts must be >= 1"));
        }
        if !(self.em_tol > 0.0) || !(self.bp_tol > 0.0) {
            return Err(Error::argument("tolerances must be positive"));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::argument("variance floor must be positive"));
        }
        for (name, p) in [
            ("edge_true_given_diff", self.edge_true_given_diff),
            ("edge_true_given_same", self.edge_true_given_same),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::argument(format!("{name} must lie strictly in (0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.bp_damping) {
            return Err(Error::argument("damping must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian mixture for one class, in standardized feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    pub weights: Vec<f64>,
    /// Component means, `components x dim`.
    pub means: Vec<Vec<f64>>,
    /// Per-dimension variances, floored.
    pub variances: Vec<Vec<f64>>,
}

impl ClassMixture {
    /// Log-likelihood of an already-standardized feature vector.
    fn log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), var)| {
                let mut l = w.ln();
                for d in 0..x.len() {
                    let diff = x[d] - mu[d];
                    l += -0.5 * (LN_2PI + var[d].ln()) - diff * diff / (2.0 * var[d]);
                }
                l
            })
            .collect();
        log_sum_exp(&logs)
    }
}

/// Edge-strength histograms: P(strength bin | edge state), Laplace-smoothed.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeHistogram {
    min: f64,
    max: f64,
    p_given_off: Vec<f64>,
    p_given_on: Vec<f64>,
}

impl EdgeHistogram {
    fn uniform() -> Self {
        EdgeHistogram {
            min: 0.0,
            max: 1.0,
            p_given_off: vec![1.0 / STRENGTH_BINS as f64; STRENGTH_BINS],
            p_given_on: vec![1.0 / STRENGTH_BINS as f64; STRENGTH_BINS],
        }
    }

    fn bin(&self, strength: f64) -> usize {
        if self.max <= self.min {
            return 0;
        }
        let t = (strength - self.min) / (self.max - self.min) * STRENGTH_BINS as f64;
        (t.floor().max(0.0) as usize).min(STRENGTH_BINS - 1)
    }

    /// (P(strength | edge off), P(strength | edge on)).
    pub fn evidence(&self, strength: f64) -> (f64, f64) {
        let b = self.bin(strength);
        (self.p_given_off[b], self.p_given_on[b])
    }
}

/// The trained model: per-class mixtures over standardized superpixel
/// features, the standardization statistics, and the edge-strength
/// histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmLikelihood {
    classes: usize,
    dim: usize,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
    mixtures: Vec<ClassMixture>,
    edge_hist: EdgeHistogram,
}

impl GmmLikelihood {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn edge_histogram(&self) -> &EdgeHistogram {
        &self.edge_hist
    }

    pub fn mixture(&self, class: usize) -> &ClassMixture {
        &self.mixtures[class]
    }

    /// Log-likelihood of a raw (unstandardized) feature vector under one
    /// class's mixture.
    pub fn log_likelihood(&self, class: usize, features: &[f64]) -> Result<f64> {
        if features.len() != self.dim {
            return Err(Error::argument(format!(
                "feature vector has {} dimensions, model expects {}",
                features.len(),
                self.dim
            )));
        }
        let x = self.standardize(features);
        Ok(self.mixtures[class].log_density(&x))
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .enumerate()
            .map(|(d, &v)| (v - self.feat_mean[d]) / self.feat_std[d])
            .collect()
    }
}

/// One training image: its partition, per-superpixel raw feature vectors,
/// and per-superpixel majority labels.
pub struct BnTrainingImage<'a> {
    pub edge_map: &'a EdgeMap,
    pub features: &'a [Vec<f64>],
    pub labels: &'a [u8],
}

/// log(Σ exp(v)) without overflow.
fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logs.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

/// Fit a diagonal GMM by EM with k-means++ seeding. `data` must already be
/// standardized. Returns the mixture and the per-iteration mean
/// log-likelihood trajectory (non-decreasing up to the variance floor).
pub fn fit_gmm(
    data: &[Vec<f64>],
    components: usize,
    params: &BnParams,
    rng: &mut ChaCha8Rng,
) -> Result<(ClassMixture, Vec<f64>)> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::argument("cannot fit a mixture to zero samples"));
    }
    let n = data.len();
    let dim = data[0].len();
    if dim == 0 || data.iter().any(|x| x.len() != dim) {
        return Err(Error::argument("samples must share one nonzero dimension"));
    }
    let k = components.min(n);

    // k-means++ seeding: first center uniform, then proportional to squared
    // distance from the chosen set.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    means.push(data[rng.gen_range(0..n)].clone());
    let mut d2 = vec![0.0f64; n];
    while means.len() < k {
        let mut total = 0.0;
        for (i, x) in data.iter().enumerate() {
            let best = means
                .iter()
                .map(|c| sq_dist(x, c))
                .fold(f64::INFINITY, f64::min);
            d2[i] = best;
            total += best;
        }
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        means.push(data[pick].clone());
    }

    // Initial spread: the global per-dimension variance, floored.
    let global_var = column_variance(data, params.var_floor);
    let mut mix = ClassMixture {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![global_var.clone(); k],
    };

    let mut trajectory = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut reseeded = vec![false; mix.weights.len()];
    let mut resp = vec![0.0f64; n * k];
    for _ in 0..params.em_iterations {
        let k = mix.weights.len();
        // E-step.
        let mut ll = 0.0;
        let mut logs = vec![0.0f64; k];
        for (i, x) in data.iter().enumerate() {
            for c in 0..k {
                let mut l = mix.weights[c].ln();
                for d in 0..dim {
                    let var = mix.variances[c][d];
                    let diff = x[d] - mix.means[c][d];
                    l += -0.5 * (LN_2PI + var.ln()) - diff * diff / (2.0 * var);
                }
                logs[c] = l;
            }
            let norm = log_sum_exp(&logs);
            ll += norm;
            for c in 0..k {
                resp[i * k + c] = (logs[c] - norm).exp();
            }
        }
        let mean_ll = ll / n as f64;
        trajectory.push(mean_ll);

        // M-step with degenerate-component handling: re-seed a starved
        // component once, then drop it.
        let mut nk = vec![0.0f64; k];
        for i in 0..n {
            for c in 0..k {
                nk[c] += resp[i * k + c];
            }
        }
        let mut drop: Option<usize> = None;
        for c in 0..k {
            if nk[c] < 1e-9 {
                if !reseeded[c] {
                    reseeded[c] = true;
                    mix.means[c] = data[rng.gen_range(0..n)].clone();
                    mix.variances[c] = global_var.clone();
                    nk[c] = 0.0;
                } else {
                    drop = Some(c);
                }
                break;
            }
        }
        if let Some(c) = drop {
            mix.weights.remove(c);
            mix.means.remove(c);
            mix.variances.remove(c);
            reseeded.remove(c);
            let total: f64 = mix.weights.iter().sum();
            for w in &mut mix.weights {
                *w /= total;
            }
            prev_ll = f64::NEG_INFINITY;
            continue;
        }
        let starved = nk.iter().any(|&v| v == 0.0);
        if !starved {
            for c in 0..k {
                mix.weights[c] = nk[c] / n as f64;
                for d in 0..dim {
                    let mut mu = 0.0;
                    for (i, x) in data.iter().enumerate() {
                        mu += resp[i * k + c] * x[d];
                    }
                    mu /= nk[c];
                    let mut var = 0.0;
                    for (i, x) in data.iter().enumerate() {
                        let diff = x[d] - mu;
                        var += resp[i * k + c] * diff * diff;
                    }
                    mix.means[c][d] = mu;
                    mix.variances[c][d] = (var / nk[c]).max(params.var_floor);
                }
            }
        }
        if (mean_ll - prev_ll).abs() < params.em_tol && !starved {
            break;
        }
        prev_ll = mean_ll;
    }
    Ok((mix, trajectory))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn column_variance(data: &[Vec<f64>], floor: f64) -> Vec<f64> {
    let n = data.len() as f64;
    let dim = data[0].len();
    let mut mean = vec![0.0f64; dim];
    for x in data {
        for d in 0..dim {
            mean[d] += x[d];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; dim];
    for x in data {
        for d in 0..dim {
            let diff = x[d] - mean[d];
            var[d] += diff * diff;
        }
    }
    var.iter().map(|v| (v / n).max(floor)).collect()
}

/// Learn the likelihood model: global z-score standardization, one EM-fitted
/// mixture per class, and the edge-strength histograms keyed on whether the
/// ground-truth parent labels differ.
pub fn bn_train(
    training: &[BnTrainingImage],
    classes: usize,
    params: &BnParams,
) -> Result<GmmLikelihood> {
    params.validate()?;
    if training.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    if classes == 0 || classes > 256 {
        return Err(Error::argument("class count must be in 1..=256"));
    }
    let dim = training[0]
        .features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::argument("first training image has no superpixels"))?;
    for (i, img) in training.iter().enumerate() {
        let n = img.edge_map.superpixels().len();
        if img.features.len() != n || img.labels.len() != n {
            return Err(Error::argument(format!(
                "training image {i}: {n} superpixels but {} feature vectors and {} labels",
                img.features.len(),
                img.labels.len()
            )));
        }
        if img.features.iter().any(|f| f.len() != dim) {
            return Err(Error::argument(format!(
                "training image {i} has feature vectors of mixed dimension"
            )));
        }
        if let Some(&l) = img.labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::argument(format!(
                "training image {i} carries label {l}, but only {classes} classes exist"
            )));
        }
    }

    // Standardization over every training superpixel.
    let total: usize = training.iter().map(|t| t.features.len()).sum();
    let mut feat_mean = vec![0.0f64; dim];
    for img in training {
        for f in img.features {
            for d in 0..dim {
                feat_mean[d] += f[d];
            }
        }
    }
    for m in &mut feat_mean {
        *m /= total as f64;
    }
    let mut feat_std = vec![0.0f64; dim];
    for img in training {
        for f in img.features {
            for d in 0..dim {
                let diff = f[d] - feat_mean[d];
                feat_std[d] += diff * diff;
            }
        }
    }
    for s in &mut feat_std {
        *s = (*s / total as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }

    // Per-class standardized sample pools.
    let mut pools: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    for img in training {
        for (f, &l) in img.features.iter().zip(img.labels) {
            let x: Vec<f64> = f
                .iter()
                .enumerate()
                .map(|(d, &v)| (v - feat_mean[d]) / feat_std[d])
                .collect();
            pools[usize::from(l)].push(x);
        }
    }
    if let Some(missing) = pools.iter().position(Vec::is_empty) {
        return Err(Error::training(format!(
            "class {missing} is absent from the training superpixels"
        )));
    }
    let mixtures: Vec<ClassMixture> = pools
        .par_iter()
        .enumerate()
        .map(|(l, pool)| {
            let mut rng = seed::stream(GMM_SEED, "bn-kmeans", l as u64);
            fit_gmm(pool, params.gmm_components, params, &mut rng).map(|(mix, _)| mix)
        })
        .collect::<Result<_>>()?;

    // Edge-strength histograms, supervised by label disagreement.
    let mut strengths: Vec<(f64, bool)> = Vec::new();
    for img in training {
        for e in img.edge_map.edges() {
            let on = img.labels[e.parents.0] != img.labels[e.parents.1];
            strengths.push((e.strength, on));
        }
    }
    let edge_hist = if strengths.is_empty() {
        EdgeHistogram::uniform()
    } else {
        let min = strengths.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let max = strengths
            .iter()
            .map(|s| s.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut on_counts = vec![1.0f64; STRENGTH_BINS];
        let mut off_counts = vec![1.0f64; STRENGTH_BINS];
        let probe = EdgeHistogram {
            min,
            max,
            p_given_off: Vec::new(),
            p_given_on: Vec::new(),
        };
        for &(s, on) in &strengths {
            let b = probe.bin(s);
            if on {
                on_counts[b] += 1.0;
            } else {
                off_counts[b] += 1.0;
            }
        }
        let on_total: f64 = on_counts.iter().sum();
        let off_total: f64 = off_counts.iter().sum();
        EdgeHistogram {
            min,
            max,
            p_given_off: off_counts.iter().map(|c| c / off_total).collect(),
            p_given_on: on_counts.iter().map(|c| c / on_total).collect(),
        }
    };

    Ok(GmmLikelihood {
        classes,
        dim,
        feat_mean,
        feat_std,
        mixtures,
        edge_hist,
    })
}

/// The instantiated per-image network: per-superpixel priors (layer 1
/// potentials) and the edge list with observed strengths (layers 2 and 4).
#[derive(Debug, Clone)]
pub struct BnStructure {
    classes: usize,
    priors: Vec<Vec<f64>>,
    edges: Vec<(usize, usize, f64)>,
}

impl BnStructure {
    /// Build the structure from a partition. Without a prior map every
    /// superpixel starts uniform; with one, the prior is the per-class pixel
    /// mean over the superpixel, renormalized.
    pub fn build(
        edge_map: &EdgeMap,
        prior: Option<&ProbabilityMap>,
        classes: usize,
    ) -> Result<BnStructure> {
        if classes == 0 {
            return Err(Error::argument("class count must be >= 1"));
        }
        let n = edge_map.superpixels().len();
        let priors = match prior {
            None => vec![vec![1.0 / classes as f64; classes]; n],
            Some(map) => {
                if map.width() != edge_map.width() || map.height() != edge_map.height() {
                    return Err(Error::contract(format!(
                        "prior map is {}x{}, partition is {}x{}",
                        map.width(),
                        map.height(),
                        edge_map.width(),
                        edge_map.height()
                    )));
                }
                if map.classes() != classes {
                    return Err(Error::contract(format!(
                        "prior map has {} classes, expected {classes}",
                        map.classes()
                    )));
                }
                edge_map
                    .superpixels()
                    .iter()
                    .map(|sp| {
                        let mut pooled = vec![0.0f64; classes];
                        for &(x, y) in &sp.pixels {
                            for (l, p) in pooled.iter_mut().enumerate() {
                                *p += f64::from(map.get(l, x, y));
                            }
                        }
                        let total: f64 = pooled.iter().sum();
                        if total > 0.0 {
                            for p in &mut pooled {
                                *p /= total;
                            }
                        } else {
                            pooled.fill(1.0 / classes as f64);
                        }
                        pooled
                    })
                    .collect()
            }
        };
        let edges = edge_map
            .edges()
            .iter()
            .map(|e| (e.parents.0, e.parents.1, e.strength))
            .collect();
        Ok(BnStructure {
            classes,
            priors,
            edges,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn priors(&self) -> &[Vec<f64>] {
        &self.priors
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }
}

/// Damped synchronous sum-product on a pairwise graph. `edges` carry full
/// L x L potentials (row index = first endpoint's label). Returns normalized
/// per-node marginals.
pub fn sum_product(
    unaries: &[Vec<f64>],
    edges: &[(usize, usize, Vec<f64>)],
    params: &BnParams,
) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    let n = unaries.len();
    if n == 0 {
        return Err(Error::argument("graph has no nodes"));
    }
    let classes = unaries[0].len();
    for (i, u) in unaries.iter().enumerate() {
        if u.len() != classes || classes == 0 {
            return Err(Error::contract(format!("unary {i} has inconsistent arity")));
        }
        if u.iter().any(|v| !v.is_finite() || *v < 0.0) || u.iter().sum::<f64>() <= 0.0 {
            return Err(Error::contract(format!(
                "unary {i} is not a nonnegative, nonzero potential"
            )));
        }
    }
    for (a, b, psi) in edges {
        if *a >= n || *b >= n || a == b {
            return Err(Error::contract(format!("edge ({a}, {b}) is inconsistent")));
        }
        if psi.len() != classes * classes || psi.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::contract(format!(
                "edge ({a}, {b}) potential must be strictly positive {classes}x{classes}"
            )));
        }
    }

    // Directed messages, two per edge, indexed by (edge, direction).
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, (a, b, _)) in edges.iter().enumerate() {
        incoming[*b].push(2 * e);
        incoming[*a].push(2 * e + 1);
    }
    let uniform = vec![1.0 / classes as f64; classes];
    let mut messages = vec![uniform; 2 * edges.len()];
    let mut fresh = messages.clone();

    for _ in 0..params.bp_max_iters {
        // Synchronous round: every fresh message reads the previous round.
        for (e, (a, b, psi)) in edges.iter().enumerate() {
            for (dir, (src, dst)) in [(*a, *b), (*b, *a)].into_iter().enumerate() {
                let m = &mut fresh[2 * e + dir];
                let mut sum = 0.0;
                for (lj, slot) in m.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for li in 0..classes {
                        let mut product = unaries[src][li];
                        for &inc in &incoming[src] {
                            // Exclude the reverse message along this edge.
                            if inc / 2 != e {
                                product *= messages[inc][li];
                            }
                        }
                        let pairwise = if dir == 0 {
                            psi[li * classes + lj]
                        } else {
                            psi[lj * classes + li]
                        };
                        acc += product * pairwise;
                    }
                    *slot = acc;
                    sum += acc;
                }
                if sum <= 0.0 {
                    return Err(Error::contract(format!(
                        "message {src} -> {dst} vanished; potentials are too extreme"
                    )));
                }
                for slot in m.iter_mut() {
                    *slot /= sum;
                }
            }
        }
        let mut delta = 0.0f64;
        for (old, new) in messages.iter_mut().zip(&fresh) {
            for (o, &f) in old.iter_mut().zip(new) {
                let blended = params.bp_damping * *o + (1.0 - params.bp_damping) * f;
                delta = delta.max((blended - *o).abs());
                *o = blended;
            }
        }
        if delta < params.bp_tol {
            break;
        }
    }

    Ok((0..n)
        .map(|i| {
            let mut b: Vec<f64> = unaries[i].clone();
            for &inc in &incoming[i] {
                for (v, &m) in b.iter_mut().zip(&messages[inc]) {
                    *v *= m;
                }
            }
            let total: f64 = b.iter().sum();
            for v in &mut b {
                *v /= total;
            }
            b
        })
        .collect())
}

/// Infer per-superpixel posteriors and rasterize them to a pixel map.
///
/// Unary = prior x GMM likelihood (likelihoods rescaled per superpixel so the
/// largest class is 1, which cancels in normalization). Pairwise on each
/// edge marginalizes the edge state against the observed strength:
/// psi(la, lb) = sum_e P(strength | e) * P(e | la, lb).
pub fn bn_infer(
    model: &GmmLikelihood,
    edge_map: &EdgeMap,
    features: &[Vec<f64>],
    prior: Option<&ProbabilityMap>,
    params: &BnParams,
) -> Result<ProbabilityMap> {
    params.validate()?;
    let n = edge_map.superpixels().len();
    if features.len() != n {
        return Err(Error::contract(format!(
            "{n} superpixels but {} feature vectors",
            features.len()
        )));
    }
    if let Some(bad) = features.iter().position(|f| f.len() != model.dim) {
        return Err(Error::contract(format!(
            "feature vector {bad} has {} dimensions, model expects {}",
            features[bad].len(),
            model.dim
        )));
    }
    let classes = model.classes;
    let structure = BnStructure::build(edge_map, prior, classes)?;

    let unaries: Vec<Vec<f64>> = features
        .iter()
        .zip(structure.priors())
        .map(|(f, prior)| {
            let x = model.standardize(f);
            // Max-subtract the combined score, not the likelihood alone: a
            // prior concentrated on a class the mixtures reject would
            // otherwise underflow every entry to zero.
            let scores: Vec<f64> = (0..classes)
                .map(|l| {
                    let p = prior[l];
                    if p > 0.0 {
                        p.ln() + model.mixtures[l].log_density(&x)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scores.iter().map(|&s| (s - m).exp()).collect()
        })
        .collect();

    let p_diff = params.edge_true_given_diff;
    let p_same = params.edge_true_given_same;
    let edges: Vec<(usize, usize, Vec<f64>)> = structure
        .edges()
        .iter()
        .map(|&(a, b, strength)| {
            let (p_off, p_on) = model.edge_hist.evidence(strength);
            let v_same = p_on * p_same + p_off * (1.0 - p_same);
            let v_diff = p_on * p_diff + p_off * (1.0 - p_diff);
            let mut psi = vec![v_diff; classes * classes];
            for l in 0..classes {
                psi[l * classes + l] = v_same;
            }
            (a, b, psi)
        })
        .collect();

    let beliefs = sum_product(&unaries, &edges, params)?;

    let (w, h) = (edge_map.width(), edge_map.height());
    let assignment = edge_map.assignment();
    let mut values = vec![0.0f32; classes * w * h];
    for p in 0..w * h {
        let b = &beliefs[assignment[p] as usize];
        for l in 0..classes {
            values[l * w * h + p] = b[l] as f32;
        }
    }
    ProbabilityMap::new(w, h, classes, values)
}

const MODEL_MAGIC: &[u8; 4] = b"BNM1";

impl GmmLikelihood {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_bytes(MODEL_MAGIC);
        w.put_u32(self.classes as u32);
        w.put_u32(self.dim as u32);
        w.put_f64s(&self.feat_mean);
        w.put_f64s(&self.feat_std);
        for mix in &self.mixtures {
            w.put_u32(mix.weights.len() as u32);
            w.put_f64s(&mix.weights);
            for m in &mix.means {
                w.put_f64s(m);
            }
            for v in &mix.variances {
                w.put_f64s(v);
            }
        }
        w.put_f64(self.edge_hist.min);
        w.put_f64(self.edge_hist.max);
        w.put_u32(STRENGTH_BINS as u32);
        w.put_f64s(&self.edge_hist.p_given_off);
        w.put_f64s(&self.edge_hist.p_given_on);
        w.bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GmmLikelihood> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MODEL_MAGIC, "likelihood model")?;
        let classes = r.get_u32("class count")? as usize;
        let dim = r.get_u32("feature dimension")? as usize;
        if classes == 0 || classes > 256 {
            return Err(Error::format(4, "class count must be in 1..=256"));
        }
        if dim == 0 {
            return Err(Error::format(8, "feature dimension must be >= 1"));
        }
        let feat_mean = r.get_f64s(dim, "feature means")?;
        let feat_std = r.get_f64s(dim, "feature deviations")?;
        if feat_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::format(12, "standardization deviations must be positive"));
        }
        let mut mixtures = Vec::with_capacity(classes);
        for l in 0..classes {
            let at = r.offset();
            let k = r.get_u32("component count")? as usize;
            if k == 0 {
                return Err(Error::format(at, format!("class {l} mixture has no components")));
            }
            let weights = r.get_f64s(k, "mixture weights")?;
            let sum: f64 = weights.iter().sum();
            if weights.iter().any(|w| !(*w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::format(
                    at,
                    format!("class {l} mixture weights are not a distribution"),
                ));
            }
            let mut means = Vec::with_capacity(k);
            for _ in 0..k {
                means.push(r.get_f64s(dim, "component mean")?);
            }
            let mut variances = Vec::with_capacity(k);
            for _ in 0..k {
                let v = r.get_f64s(dim, "component variance")?;
                if v.iter().any(|x| !(*x > 0.0)) {
                    return Err(Error::format(at, "variances must be positive"));
                }
                variances.push(v);
            }
            mixtures.push(ClassMixture {
                weights,
                means,
                variances,
            });
        }
        let min = r.get_f64("histogram minimum")?;
        let max = r.get_f64("histogram maximum")?;
        let at = r.offset();
        let bins = r.get_u32("histogram bin count")? as usize;
        if bins != STRENGTH_BINS {
            return Err(Error::format(
                at,
                format!("expected {STRENGTH_BINS} histogram bins, found {bins}"),
            ));
        }
        let p_given_off = r.get_f64s(bins, "off-state histogram")?;
        let p_given_on = r.get_f64s(bins, "on-state histogram")?;
        for p in p_given_off.iter().chain(&p_given_on) {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::format(at, "histogram probabilities must be in (0, 1]"));
            }
        }
        r.expect_end()?;
        Ok(GmmLikelihood {
            classes,
            dim,
            feat_mean,
            feat_std,
            mixtures,
            edge_hist: EdgeHistogram {
                min,
                max,
                p_given_off,
                p_given_on,
            },
        })
    }
}
