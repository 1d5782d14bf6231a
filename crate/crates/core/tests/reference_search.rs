//! Counterfactual search on constructed positives under the reference
//! classifier.

use cse_core::attribution::{default_gradcam_layer, fullgrad, gradcam};
use cse_core::corpus::{generate_item, render_with_patch, CorpusSpec, PatchSpec};
use cse_core::counterfactual::{
    brute_force_counterfactual, classify, confidence_reduction, greedy_counterfactual, ranked_regions, region_scores,
    SearchConfig,
};
use cse_core::imaging::ImageRgb;
use cse_core::network::{Network, FLAGGED_CLASS};
use cse_core::obfuscation::{MaskOp, MaskSpec};
use cse_core::segmentation::{grid_labels, LabelMap};
use cse_core::weights::WeightFile;

fn setup() -> (Network, MaskOp) {
    let network = WeightFile::reference().network;
    let op = MaskSpec::ChannelMeans.resolve(network.channel_means()).unwrap();
    (network, op)
}

fn patch_at(center: [f64; 2], radii: [f64; 2]) -> PatchSpec {
    PatchSpec {
        center,
        radii,
        angle: 0.0,
        color: [0.95, 0.1, 0.2],
    }
}

#[test]
fn patch_inside_the_top_cell_is_found_at_depth_one() {
    let (network, op) = setup();
    let labels = grid_labels(64, 64, 3, 3).unwrap();
    let layer = default_gradcam_layer(&network).unwrap();
    let mut top_hits = [0usize; 2];
    // Cell 4 spans x, y in 21..42.
    for seed in 0..10 {
        let image = render_with_patch(seed, 64, 64, &patch_at([31.5, 31.5], [9.0, 8.0])).unwrap();
        assert_eq!(classify(&network, &image).unwrap().class, FLAGGED_CLASS, "seed {seed}");
        let maps = [
            fullgrad(&network, &image).unwrap(),
            gradcam(&network, &image, layer).unwrap(),
        ];
        for (hits, map) in top_hits.iter_mut().zip(&maps) {
            let scores = region_scores(map, &labels).unwrap();
            if ranked_regions(&scores)[0] != 4 {
                continue;
            }
            *hits += 1;
            let result =
                greedy_counterfactual(&network, &image, &labels, &scores, &SearchConfig::default(), &op).unwrap();
            assert!(result.success);
            assert_eq!(result.masked_regions, vec![4], "seed {seed}");
        }
    }
    println!(
        "patch cell ranked first: FullGrad {}/10, Grad-CAM {}/10",
        top_hits[0], top_hits[1]
    );
    assert_eq!(top_hits[1], 10);
}

#[test]
fn patch_split_across_two_cells_needs_both() {
    let (network, op) = setup();
    let labels = grid_labels(64, 64, 3, 3).unwrap();
    // Straddles the boundary between cells 3 and 4 at x = 21.
    for seed in 0..5 {
        let image = render_with_patch(seed, 64, 64, &patch_at([21.0, 31.5], [14.0, 9.0])).unwrap();
        assert_eq!(classify(&network, &image).unwrap().class, FLAGGED_CLASS, "seed {seed}");
        let found = brute_force_counterfactual(&network, &image, &labels, 0.5, 4, &op)
            .unwrap()
            .unwrap();
        assert_eq!(found.regions, vec![3, 4], "seed {seed}");
    }
}

fn two_region_labels(mask: &cse_core::imaging::PixelMask) -> LabelMap {
    let raw: Vec<usize> = mask.bits().iter().map(|&b| usize::from(b)).collect();
    LabelMap::new(64, 64, raw.iter().map(|&r| r as u32).collect()).unwrap()
}

#[test]
fn masking_the_patch_flips_and_masking_background_barely_matters() {
    let (network, op) = setup();
    let spec = CorpusSpec {
        seed: 2,
        unsafe_fraction: 1.0,
        ..CorpusSpec::default()
    };
    for index in 0..20 {
        let item = generate_item(&spec, index).unwrap();
        let patch = item.patch.unwrap().mask(64, 64);
        let labels = two_region_labels(&patch);
        let cr = confidence_reduction(&network, &item.image, &labels, 1, &op).unwrap();
        assert!(cr.flipped, "item {index}: {cr:?}");
        assert!(cr.value().is_none());

        // Grid cells that do not touch the patch.
        let grid = grid_labels(64, 64, 4, 4).unwrap();
        for cell in 0..16 {
            let cell_mask = grid.mask(&[cell]);
            if cell_mask.bits().iter().zip(patch.bits()).any(|(&a, &b)| a && b) {
                continue;
            }
            let cr = confidence_reduction(&network, &item.image, &grid, cell, &op).unwrap();
            assert!(!cr.flipped && cr.delta.abs() <= 0.2, "item {index} cell {cell}: {cr:?}");
        }
    }
}

#[test]
fn safe_items_are_rejected() {
    let (network, op) = setup();
    let spec = CorpusSpec {
        seed: 2,
        unsafe_fraction: 0.0,
        ..CorpusSpec::default()
    };
    let labels = grid_labels(64, 64, 3, 3).unwrap();
    for index in 0..5 {
        let image: ImageRgb = generate_item(&spec, index).unwrap().image;
        let scores = region_scores(&fullgrad(&network, &image).unwrap(), &labels).unwrap();
        let err = greedy_counterfactual(&network, &image, &labels, &scores, &SearchConfig::default(), &op);
        assert!(matches!(err, Err(cse_core::Error::NotFlagged { .. })));
    }
}
