//! Region scoring, confidence reduction, greedy counterfactual search and the
//! exhaustive oracle it approximates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::network::{Network, FLAGGED_CLASS};
use crate::obfuscation::{apply_mask, MaskOp};
use crate::segmentation::LabelMap;
use crate::tensor::{argmax, softmax_slice};

/// Largest region count the exhaustive oracle accepts.
pub const ORACLE_REGION_LIMIT: usize = 16;

/// Mean attribution over one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: usize,
    pub score: f64,
    pub pixel_count: usize,
}

pub fn region_scores(map: &AttributionMap, labels: &LabelMap) -> Result<Vec<RegionScore>> {
    if map.width() != labels.width() || map.height() != labels.height() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.height(), labels.width()],
            actual: vec![map.height(), map.width()],
        });
    }
    let k = labels.region_count();
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (&l, &v) in labels.labels().iter().zip(map.values()) {
        sums[l as usize] += v as f64;
        counts[l as usize] += 1;
    }
    Ok((0..k)
        .map(|region| RegionScore {
            region,
            score: sums[region] / counts[region] as f64,
            pixel_count: counts[region],
        })
        .collect())
}

/// Region ids by descending score; ties go to the smaller region, then the
/// lower id.
pub fn ranked_regions(scores: &[RegionScore]) -> Vec<usize> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.pixel_count.cmp(&b.pixel_count))
            .then(a.region.cmp(&b.region))
    });
    sorted.into_iter().map(|s| s.region).collect()
}

/// The classifier's verdict on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f32>,
}

impl Prediction {
    pub fn score(&self) -> f32 {
        self.probabilities[self.class]
    }

    pub fn probability(&self, class: usize) -> f32 {
        self.probabilities[class]
    }
}

pub fn classify(network: &Network, image: &ImageRgb) -> Result<Prediction> {
    let logits = network.logits(&image.to_tensor())?;
    let class = argmax(logits.data());
    Ok(Prediction {
        class,
        probabilities: softmax_slice(logits.data()),
    })
}

/// Drop in the original class's softmax score when one region is masked.
/// Only meaningful while the class is unchanged; `flipped` marks the cases
/// where it is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReduction {
    pub region: usize,
    pub delta: f64,
    pub flipped: bool,
}

impl ConfidenceReduction {
    pub fn value(&self) -> Option<f64> {
        (!self.flipped).then_some(self.delta)
    }
}

pub fn confidence_reduction(
    network: &Network,
    image: &ImageRgb,
    labels: &LabelMap,
    region: usize,
    op: &MaskOp,
) -> Result<ConfidenceReduction> {
    let before = classify(network, image)?;
    reduction_against(network, image, &before, labels, &[region], region, op)
}

fn reduction_against(
    network: &Network,
    image: &ImageRgb,
    before: &Prediction,
    labels: &LabelMap,
    masked: &[usize],
    region: usize,
    op: &MaskOp,
) -> Result<ConfidenceReduction> {
    if region >= labels.region_count() {
        return Err(Error::InvalidLabels(format!(
            "region {region} out of range for {} regions",
            labels.region_count()
        )));
    }
    let after = classify(network, &apply_mask(image, &labels.mask(masked), op)?)?;
    Ok(ConfidenceReduction {
        region,
        delta: before.score() as f64 - after.probability(before.class) as f64,
        flipped: after.class != before.class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Softmax score the new class must exceed.
    pub threshold: f32,
    /// Maximum number of masked regions.
    pub budget: usize,
    pub flagged_class: usize,
    /// Re-sort the remaining regions by measured confidence reduction after
    /// every step instead of keeping the attribution order.
    pub rerank_by_cr: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            budget: 10,
            flagged_class: FLAGGED_CLASS,
            rerank_by_cr: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        Ok(())
    }

    fn is_flip(&self, original: usize, after: &Prediction) -> bool {
        after.class != original && after.score() > self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    /// Masked regions in the order they were added.
    pub masked_regions: Vec<usize>,
    pub depth: usize,
    pub success: bool,
    pub original_class: usize,
    pub original_score: f32,
    pub final_class: usize,
    pub final_score: f32,
    pub obfuscation_fraction: f64,
    /// Full search order; `masked_regions` is a prefix of it.
    pub region_order: Vec<usize>,
    /// Single-region confidence reduction of every masked region.
    pub confidence_reductions: Vec<ConfidenceReduction>,
    #[serde(skip)]
    pub masked_image: Option<ImageRgb>,
}

/// Masks growing prefixes of the score-descending region order until the
/// classifier changes its mind with a score above the threshold.
///
/// Each prefix is applied to the clean image, never on top of an earlier
/// masked result.
pub fn greedy_counterfactual(
    network: &Network,
    image: &ImageRgb,
    labels: &LabelMap,
    scores: &[RegionScore],
    config: &SearchConfig,
    op: &MaskOp,
) -> Result<CounterfactualResult> {
    config.validate()?;
    check_scores(scores, labels)?;
    let original = classify(network, image)?;
    if original.class != config.flagged_class {
        return Err(Error::NotFlagged {
            predicted: original.class,
            flagged: config.flagged_class,
        });
    }

    let mut order = ranked_regions(scores);
    let max_depth = config.budget.min(order.len());
    let mut last = None;
    let mut success = false;
    let mut depth = 0;
    while depth < max_depth {
        if config.rerank_by_cr {
            rerank_tail(network, image, &original, labels, &mut order, depth, op)?;
        }
        depth += 1;
        let masked = apply_mask(image, &labels.mask(&order[..depth]), op)?;
        let after = classify(network, &masked)?;
        success = config.is_flip(original.class, &after);
        last = Some((masked, after));
        if success {
            break;
        }
    }
    let (masked_image, after) = last.expect("budget and region count are at least 1");

    let masked_regions = order[..depth].to_vec();
    let confidence_reductions = masked_regions
        .iter()
        .map(|&r| reduction_against(network, image, &original, labels, &[r], r, op))
        .collect::<Result<_>>()?;
    let masked_pixels = labels.mask(&masked_regions).count();
    Ok(CounterfactualResult {
        depth,
        success,
        original_class: original.class,
        original_score: original.score(),
        final_class: after.class,
        final_score: after.score(),
        obfuscation_fraction: masked_pixels as f64 / (labels.width() * labels.height()) as f64,
        masked_regions,
        region_order: order,
        confidence_reductions,
        masked_image: Some(masked_image),
    })
}

/// Sorts `order[fixed..]` by the confidence reduction each region adds on top
/// of the already fixed prefix, largest first; the current order breaks ties.
fn rerank_tail(
    network: &Network,
    image: &ImageRgb,
    original: &Prediction,
    labels: &LabelMap,
    order: &mut [usize],
    fixed: usize,
    op: &MaskOp,
) -> Result<()> {
    let mut measured = Vec::with_capacity(order.len() - fixed);
    for (rank, &region) in order[fixed..].iter().enumerate() {
        let mut set = order[..fixed].to_vec();
        set.push(region);
        let cr = reduction_against(network, image, original, labels, &set, region, op)?;
        measured.push((cr.delta, rank, region));
    }
    measured.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    for (slot, (_, _, region)) in order[fixed..].iter_mut().zip(measured) {
        *slot = region;
    }
    Ok(())
}

fn check_scores(scores: &[RegionScore], labels: &LabelMap) -> Result<()> {
    let k = labels.region_count();
    let mut seen = vec![false; k];
    for s in scores {
        if s.region >= k || std::mem::replace(&mut seen[s.region], true) {
            return Err(Error::InvalidLabels(format!(
                "scores must cover regions 0..{k} exactly once"
            )));
        }
    }
    if scores.len() != k {
        return Err(Error::InvalidLabels(format!("{} scores for {k} regions", scores.len())));
    }
    Ok(())
}

/// Smallest region set whose masking flips the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub regions: Vec<usize>,
    pub final_class: usize,
    pub final_score: f32,
    /// Subsets evaluated, including the winning one.
    pub evaluated: usize,
}

/// Tries every subset by increasing size, lexicographically within a size,
/// up to `max_cardinality` regions. Refuses more than
/// [`ORACLE_REGION_LIMIT`] regions.
pub fn brute_force_counterfactual(
    network: &Network,
    image: &ImageRgb,
    labels: &LabelMap,
    threshold: f32,
    max_cardinality: usize,
    op: &MaskOp,
) -> Result<Option<OracleResult>> {
    let k = labels.region_count();
    if k > ORACLE_REGION_LIMIT {
        return Err(Error::TooManyRegions {
            regions: k,
            limit: ORACLE_REGION_LIMIT,
        });
    }
    let config = SearchConfig {
        threshold,
        ..SearchConfig::default()
    };
    let original = classify(network, image)?;
    let mut evaluated = 0;
    for size in 1..=max_cardinality.min(k) {
        let mut subset: Vec<usize> = (0..size).collect();
        loop {
            evaluated += 1;
            let after = classify(network, &apply_mask(image, &labels.mask(&subset), op)?)?;
            if config.is_flip(original.class, &after) {
                return Ok(Some(OracleResult {
                    regions: subset,
                    final_class: after.class,
                    final_score: after.score(),
                    evaluated,
                }));
            }
            if !next_combination(&mut subset, k) {
                break;
            }
        }
    }
    Ok(None)
}

/// Advances to the next `subset.len()`-combination of `0..n` in
/// lexicographic order; false after the last one.
fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let size = subset.len();
    let Some(i) = (0..size).rev().find(|&i| subset[i] < n - size + i) else {
        return false;
    };
    subset[i] += 1;
    for j in i + 1..size {
        subset[j] = subset[j - 1] + 1;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionMethod;
    use crate::network::{Conv2d, Linear};
    use crate::segmentation::grid_labels;

    fn halves(w: usize, h: usize) -> LabelMap {
        grid_labels(w, h, 1, 2).unwrap()
    }

    #[test]
    fn uniform_map_scores_every_region_equally() {
        let labels = grid_labels(12, 12, 3, 3).unwrap();
        let map = AttributionMap::new(12, 12, vec![0.5; 144], 1, AttributionMethod::FullGrad).unwrap();
        let scores = region_scores(&map, &labels).unwrap();
        assert_eq!(scores.len(), 9);
        assert!(scores.iter().all(|s| s.score == 0.5));
    }

    #[test]
    fn half_map_scores() {
        let labels = halves(8, 8);
        let values = (0..64).map(|i| if i % 8 < 4 { 1.0 } else { 0.0 }).collect();
        let map = AttributionMap::new(8, 8, values, 1, AttributionMethod::FullGrad).unwrap();
        let scores = region_scores(&map, &labels).unwrap();
        assert_eq!((scores[0].score, scores[1].score), (1.0, 0.0));
        let wrong = AttributionMap::new(4, 4, vec![0.0; 16], 1, AttributionMethod::FullGrad).unwrap();
        assert!(region_scores(&wrong, &labels).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_size_then_id() {
        let score = |region, score, pixel_count| RegionScore {
            region,
            score,
            pixel_count,
        };
        let scores = [score(0, 0.5, 10), score(1, 0.9, 4), score(2, 0.5, 3), score(3, 0.5, 3)];
        assert_eq!(ranked_regions(&scores), vec![1, 2, 3, 0]);
    }

    #[test]
    fn combinations_are_lexicographic() {
        let mut subset = vec![0, 1];
        let mut all = vec![subset.clone()];
        while next_combination(&mut subset, 4) {
            all.push(subset.clone());
        }
        assert_eq!(
            all,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        let mut single = vec![0];
        assert!(!next_combination(&mut single, 1));
    }

    /// A hand-built classifier comparing mean red against mean green: on the
    /// test images any red cell at all is flagged.
    fn redness_network() -> Network {
        let centre_taps = |mut conv: Conv2d| {
            for c in 0..2 {
                let i = conv.weight_index(c, c, 1, 1);
                conv.weight[i] = 1.0;
            }
            conv
        };
        let mut linear = Linear::zeros(2, 2);
        // safe: green - red, unsafe: red - green
        linear.weight = vec![-1.0, 1.0, 1.0, -1.0];
        linear.bias = vec![0.0, 0.58];
        let convs = vec![
            centre_taps(Conv2d::zeros(3, 2)),
            centre_taps(Conv2d::zeros(2, 2)),
            centre_taps(Conv2d::zeros(2, 2)),
        ];
        Network::from_biased_layers(convs, vec![linear], vec![3, 16, 16]).unwrap()
    }

    /// Green image with red in the given grid cells of a 4x4 grid.
    fn red_cells(cells: &[usize]) -> (ImageRgb, LabelMap) {
        let labels = grid_labels(16, 16, 4, 4).unwrap();
        let image = ImageRgb::from_fn(16, 16, |x, y| {
            if cells.contains(&labels.label(x, y)) {
                [0.9, 0.1, 0.1]
            } else {
                [0.1, 0.4, 0.1]
            }
        })
        .unwrap();
        (image, labels)
    }

    fn green_fill() -> MaskOp {
        MaskOp::FillConstant { rgb: [0.1, 0.4, 0.1] }
    }

    fn oracle_scores(labels: &LabelMap, hot: &[usize]) -> Vec<RegionScore> {
        labels
            .region_sizes()
            .into_iter()
            .enumerate()
            .map(|(region, pixel_count)| RegionScore {
                region,
                score: if hot.contains(&region) { 1.0 } else { 0.0 },
                pixel_count,
            })
            .collect()
    }

    #[test]
    fn greedy_flips_at_depth_one_when_the_patch_is_top_ranked() {
        let network = redness_network();
        let (image, labels) = red_cells(&[5]);
        let scores = oracle_scores(&labels, &[5]);
        let result = greedy_counterfactual(
            &network,
            &image,
            &labels,
            &scores,
            &SearchConfig::default(),
            &green_fill(),
        )
        .unwrap();
        assert!(result.success);
        assert_eq!(result.depth, 1);
        assert_eq!(result.masked_regions, vec![5]);
        assert_eq!(result.final_class, 0);
        assert!(result.final_score > 0.5);
        assert_eq!(result.obfuscation_fraction, 16.0 / 256.0);
        assert!(result.confidence_reductions[0].flipped);
        assert!(result.confidence_reductions[0].value().is_none());
    }

    #[test]
    fn greedy_rejects_safe_inputs() {
        let network = redness_network();
        let (image, labels) = red_cells(&[]);
        let scores = oracle_scores(&labels, &[]);
        let err = greedy_counterfactual(
            &network,
            &image,
            &labels,
            &scores,
            &SearchConfig::default(),
            &green_fill(),
        );
        assert!(matches!(
            err,
            Err(Error::NotFlagged {
                predicted: 0,
                flagged: 1
            })
        ));
    }

    #[test]
    fn greedy_masks_prefixes_of_the_ranking() {
        let network = redness_network();
        // Every red cell has to go, and cell 5 is not among the hot ones.
        let (image, labels) = red_cells(&[0, 3, 9, 5]);
        let scores = oracle_scores(&labels, &[0, 3, 9]);
        let result = greedy_counterfactual(
            &network,
            &image,
            &labels,
            &scores,
            &SearchConfig::default(),
            &green_fill(),
        )
        .unwrap();
        assert!(result.success);
        assert_eq!(result.masked_regions[..], result.region_order[..result.depth]);
        assert_eq!(&result.masked_regions[..3], &[0, 3, 9]);
        // Ties among the cold cells fall back to region id: 1, 2, 4, 5.
        assert_eq!(result.depth, 7);
        let clean = apply_mask(&image, &labels.mask(&result.masked_regions), &green_fill()).unwrap();
        assert_eq!(Some(clean), result.masked_image);
    }

    #[test]
    fn greedy_reports_exhaustion() {
        let network = redness_network();
        let (image, labels) = red_cells(&[0, 1, 2, 3, 4, 5]);
        let scores = oracle_scores(&labels, &[]);
        let config = SearchConfig {
            budget: 3,
            ..SearchConfig::default()
        };
        let result = greedy_counterfactual(&network, &image, &labels, &scores, &config, &green_fill()).unwrap();
        assert!(!result.success);
        assert_eq!(result.depth, 3);
        assert_eq!(result.final_class, 1);
    }

    #[test]
    fn reranking_by_confidence_reduction_finds_the_patch() {
        let network = redness_network();
        let (image, labels) = red_cells(&[12]);
        let scores = oracle_scores(&labels, &[]);
        let config = SearchConfig {
            rerank_by_cr: true,
            ..SearchConfig::default()
        };
        let result = greedy_counterfactual(&network, &image, &labels, &scores, &config, &green_fill()).unwrap();
        assert_eq!(result.masked_regions, vec![12]);
        assert!(result.success);
    }

    #[test]
    fn no_op_mask_has_zero_confidence_reduction() {
        let network = redness_network();
        let (image, labels) = red_cells(&[5]);
        let cr = confidence_reduction(&network, &image, &labels, 0, &green_fill()).unwrap();
        assert_eq!(cr.delta, 0.0);
        assert_eq!(cr.value(), Some(0.0));
    }

    #[test]
    fn oracle_finds_the_split_patch() {
        let network = redness_network();
        let (image, labels) = red_cells(&[6, 9]);
        let found = brute_force_counterfactual(&network, &image, &labels, 0.5, 4, &green_fill())
            .unwrap()
            .unwrap();
        assert_eq!(found.regions, vec![6, 9]);
        let none = brute_force_counterfactual(&network, &image, &labels, 0.5, 1, &green_fill()).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn oracle_refuses_large_partitions() {
        let network = redness_network();
        let image = ImageRgb::filled(16, 16, [0.9, 0.1, 0.1]).unwrap();
        let labels = grid_labels(16, 16, 3, 6).unwrap();
        let err = brute_force_counterfactual(&network, &image, &labels, 0.5, 2, &green_fill());
        assert!(matches!(err, Err(Error::TooManyRegions { regions: 18, .. })));
    }
}
