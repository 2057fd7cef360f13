//! Layer-wise effect contours, top-k neuron selection, structure-pair
//! overlap, the feature-based similarity hypothesis, and matrix comparison.
//!
//! Similarity values live in [0, 100] with diagonal 100. The hypothesis
//! matrix is model-free: it depends only on the per-variant feature vectors
//! shipped below.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::grammar::{Kind, StructureKind};
use crate::lexicon::Number;

/// Mean NIE of one neuron (layer, index) over a prompt set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediatorMean {
    pub layer: usize,
    pub neuron: usize,
    pub nie: f64,
}

/// Per layer, the `ceil(fraction * d_model)` neurons with the highest mean
/// NIE; ties broken toward the lower neuron index. Requires a complete sweep
/// of every layer 0..=n_layers.
pub fn top_k_per_layer(
    effects: &[MediatorMean],
    fraction: f64,
    n_layers: usize,
    d_model: usize,
) -> Result<Vec<BTreeSet<usize>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("selection fraction {fraction} outside (0, 1]")));
    }
    let mut per_layer: Vec<Vec<Option<f64>>> = vec![vec![None; d_model]; n_layers + 1];
    for e in effects {
        if e.layer > n_layers || e.neuron >= d_model {
            return Err(Error::IncompleteSweep(format!(
                "effect for ({}, {}) outside the model ({} layers x {})",
                e.layer, e.neuron, n_layers, d_model
            )));
        }
        per_layer[e.layer][e.neuron] = Some(e.nie);
    }
    let k = (fraction * d_model as f64).ceil() as usize;
    let mut out = Vec::with_capacity(n_layers + 1);
    for (layer, nies) in per_layer.iter().enumerate() {
        let missing = nies.iter().filter(|v| v.is_none()).count();
        if missing > 0 {
            return Err(Error::IncompleteSweep(format!(
                "layer {layer} is missing {missing} of {d_model} neurons"
            )));
        }
        let mut order: Vec<usize> = (0..d_model).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (nies[a].unwrap(), nies[b].unwrap());
            vb.partial_cmp(&va).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        out.push(order.into_iter().take(k).collect());
    }
    Ok(out)
}

/// Per-layer mean NIE of the selected neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerContour {
    pub fraction: f64,
    /// (layer, mean NIE of selected neurons), one entry per layer incl. 0.
    pub points: Vec<(usize, f64)>,
}

pub fn layer_contour(
    selected: &[BTreeSet<usize>],
    effects: &[MediatorMean],
    fraction: f64,
) -> Result<LayerContour> {
    let n_layers = selected.len().saturating_sub(1);
    let mut points = Vec::with_capacity(selected.len());
    for (layer, set) in selected.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::IncompleteSweep(format!("empty selection at layer {layer}")));
        }
        let mut sum = 0.0;
        let mut found = 0usize;
        for e in effects {
            if e.layer == layer && set.contains(&e.neuron) {
                sum += e.nie;
                found += 1;
            }
        }
        if found != set.len() {
            return Err(Error::IncompleteSweep(format!(
                "layer {layer}: {found} of {} selected neurons have effects",
                set.len()
            )));
        }
        points.push((layer, sum / found as f64));
    }
    let _ = n_layers;
    Ok(LayerContour { fraction, points })
}

/// Square similarity matrix over labelled structure variants, values in
/// [0, 100], diagonal 100.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> SimilarityMatrix {
        assert_eq!(values.len(), labels.len() * labels.len());
        SimilarityMatrix { labels, values }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.labels.len() + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_symmetric_with_unit_diagonal(&self, tol: f64) -> bool {
        let n = self.n();
        for i in 0..n {
            if (self.get(i, i) - 100.0).abs() > tol {
                return false;
            }
            for j in 0..i {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Overlap of equal-size per-structure neuron selections:
/// entry (a, b) = 100 * |S_a \cap S_b| / k.
pub fn overlap_matrix(
    labels: &[String],
    sets: &[BTreeSet<usize>],
) -> Result<SimilarityMatrix> {
    if labels.len() != sets.len() {
        return Err(Error::SetSizeMismatch(format!(
            "{} labels vs {} sets",
            labels.len(),
            sets.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::SetSizeMismatch("no selections given".into()));
    }
    let k = sets[0].len();
    if k == 0 {
        return Err(Error::SetSizeMismatch("empty selections".into()));
    }
    for (l, s) in labels.iter().zip(sets) {
        if s.len() != k {
            return Err(Error::SetSizeMismatch(format!(
                "selection for `{l}` has {} neurons, expected {k}",
                s.len()
            )));
        }
    }
    let n = sets.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let inter = sets[i].intersection(&sets[j]).count();
            values[i * n + j] = 100.0 * inter as f64 / k as f64;
        }
    }
    Ok(SimilarityMatrix::new(labels.to_vec(), values))
}

/// Linguistic features of a structure variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub separated: bool,
    /// Tokens between subject and verb slot.
    pub distance: u32,
    pub has_distractor: bool,
    pub has_attractor: bool,
    pub attractor_number: Option<Number>,
    pub has_rc: bool,
    pub has_pp: bool,
}

/// The shipped feature table (version 1). Distances follow the rendered
/// templates, complementizer included when present.
pub fn feature_vector(v: &StructureKind) -> FeatureVector {
    let distance: u32 = match (v.kind, v.complementizer) {
        (Kind::SimpleAgreement, _) => 0,
        (Kind::AcrossOneDistractor, _) => 1,
        (Kind::AcrossTwoDistractors, _) => 3,
        (Kind::AcrossPP, _) => 3,
        (Kind::WithinObjRC, _) => 0,
        (Kind::AcrossObjRC, Some(false)) => 3,
        (Kind::AcrossObjRC, _) => 4,
    };
    FeatureVector {
        separated: distance > 0,
        distance,
        has_distractor: matches!(
            v.kind,
            Kind::AcrossOneDistractor | Kind::AcrossTwoDistractors
        ),
        has_attractor: v.kind.has_attractor(),
        attractor_number: v.attractor_number,
        has_rc: v.kind.is_rc(),
        has_pp: v.kind == Kind::AcrossPP,
    }
}

/// Pairwise feature distance: one unit per binary/ternary mismatch plus the
/// numerical distance difference rescaled into [0, 2] by the largest
/// difference over all pairs.
fn feature_distance(a: &FeatureVector, b: &FeatureVector, dist_scale: f64) -> f64 {
    let mut d = 0.0;
    if a.separated != b.separated {
        d += 1.0;
    }
    if a.has_distractor != b.has_distractor {
        d += 1.0;
    }
    if a.has_attractor != b.has_attractor {
        d += 1.0;
    }
    if a.attractor_number != b.attractor_number {
        d += 1.0;
    }
    if a.has_rc != b.has_rc {
        d += 1.0;
    }
    if a.has_pp != b.has_pp {
        d += 1.0;
    }
    d += (f64::from(a.distance) - f64::from(b.distance)).abs() * dist_scale;
    d
}

/// Feature-based similarity over structure variants: distances summed per
/// pair, subtracted from the maximum pairwise distance, then normalized so
/// the maximum similarity is 100.
pub fn hypothesis_matrix(variants: &[StructureKind]) -> SimilarityMatrix {
    let labels: Vec<String> = variants.iter().map(StructureKind::label).collect();
    let feats: Vec<FeatureVector> = variants.iter().map(feature_vector).collect();
    let n = feats.len();

    let mut max_dist_diff = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let diff = (f64::from(feats[i].distance) - f64::from(feats[j].distance)).abs();
            max_dist_diff = max_dist_diff.max(diff);
        }
    }
    let dist_scale = if max_dist_diff > 0.0 { 2.0 / max_dist_diff } else { 0.0 };

    let mut dist = vec![0.0; n * n];
    let mut max_d = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let d = feature_distance(&feats[i], &feats[j], dist_scale);
            dist[i * n + j] = d;
            max_d = max_d.max(d);
        }
    }
    let values = if max_d > 0.0 {
        dist.iter().map(|d| 100.0 * (max_d - d) / max_d).collect()
    } else {
        vec![100.0; n * n]
    };
    SimilarityMatrix::new(labels, values)
}

/// Sum of absolute element differences over the strictly-lower triangle.
pub fn l1_difference(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<f64> {
    if a.labels != b.labels {
        return Err(Error::LabelMismatch(format!("{:?} vs {:?}", a.labels, b.labels)));
    }
    let mut sum = 0.0;
    for i in 0..a.n() {
        for j in 0..i {
            sum += (a.get(i, j) - b.get(i, j)).abs();
        }
    }
    Ok(sum)
}

/// The layer whose overlap matrix is closest (lowest l1 difference) to the
/// hypothesis; ties go to the lower layer index.
pub fn best_layer(
    per_layer: &[(usize, SimilarityMatrix)],
    hypothesis: &SimilarityMatrix,
) -> Result<(usize, f64)> {
    if per_layer.is_empty() {
        return Err(Error::Config("no per-layer overlap matrices".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (layer, m) in per_layer {
        let norm = l1_difference(m, hypothesis)?;
        best = match best {
            None => Some((*layer, norm)),
            Some((bl, bn)) => {
                if norm < bn || (norm == bn && *layer < bl) {
                    Some((*layer, norm))
                } else {
                    Some((bl, bn))
                }
            }
        };
    }
    Ok(best.unwrap())
}

/// Per-prompt contrast between two matched effect tables (e.g. complementizer
/// present vs absent).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedContrast {
    /// (prompt id, value A, value B, B - A, relative difference)
    pub te_rows: Vec<(usize, f64, f64, f64, f64)>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_abs_delta: f64,
    /// Per-layer contour deltas, when contours are supplied for both sides.
    pub contour_rows: Vec<(usize, f64, f64, f64, f64)>,
}

fn rel_delta(a: f64, b: f64) -> f64 {
    let d = b - a;
    if d == 0.0 {
        0.0
    } else if a == 0.0 {
        f64::INFINITY * d.signum()
    } else {
        d / a.abs()
    }
}

pub fn paired_contrast(
    a: &[(usize, f64)],
    b: &[(usize, f64)],
    contour_a: Option<&LayerContour>,
    contour_b: Option<&LayerContour>,
) -> Result<PairedContrast> {
    if a.len() != b.len() {
        return Err(Error::UnmatchedPrompts(format!("{} vs {} rows", a.len(), b.len())));
    }
    let mut te_rows = Vec::with_capacity(a.len());
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut sum_abs = 0.0;
    for ((ia, va), (ib, vb)) in a.iter().zip(b) {
        if ia != ib {
            return Err(Error::UnmatchedPrompts(format!("prompt id {ia} vs {ib}")));
        }
        let delta = vb - va;
        te_rows.push((*ia, *va, *vb, delta, rel_delta(*va, *vb)));
        sum_a += va;
        sum_b += vb;
        sum_abs += delta.abs();
    }
    let n = a.len().max(1) as f64;
    let contour_rows = match (contour_a, contour_b) {
        (Some(ca), Some(cb)) => {
            if ca.points.len() != cb.points.len() {
                return Err(Error::UnmatchedPrompts(format!(
                    "contours cover {} vs {} layers",
                    ca.points.len(),
                    cb.points.len()
                )));
            }
            ca.points
                .iter()
                .zip(&cb.points)
                .map(|(&(l, va), &(_, vb))| (l, va, vb, vb - va, rel_delta(va, vb)))
                .collect()
        }
        _ => Vec::new(),
    };
    Ok(PairedContrast {
        te_rows,
        mean_a: sum_a / n,
        mean_b: sum_b / n,
        mean_abs_delta: sum_abs / n,
        contour_rows,
    })
}
