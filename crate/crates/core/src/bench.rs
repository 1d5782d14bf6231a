//! Success rate, depth and obfuscation of every (segmenter, ranking) pair
//! over a labelled corpus.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{list_corpus, mix_seed, Label};
use crate::counterfactual::{
    brute_force_counterfactual, classify, greedy_counterfactual, CounterfactualResult, SearchConfig,
    ORACLE_REGION_LIMIT,
};
use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, PixelMask};
use crate::io::{load_image, png_round_trip, LoadedImage};
use crate::network::Network;
use crate::obfuscation::{render_obfuscated, MaskOp, MaskSpec};
use crate::pipeline::RankingConfig;
use crate::segmentation::{BassParams, LabelMap, SegmenterConfig, SlicParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub segmenters: Vec<SegmenterConfig>,
    pub rankings: Vec<RankingConfig>,
    pub search: SearchConfig,
    pub mask: MaskSpec,
    pub seed: u64,
    /// Compare against the exhaustive oracle where it is affordable.
    pub oracle: bool,
    /// Only the first `limit` corpus entries.
    pub limit: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            segmenters: vec![
                SegmenterConfig::Grid { rows: 5, cols: 5 },
                SegmenterConfig::Slic(SlicParams::default()),
                SegmenterConfig::Bass(BassParams::default()),
            ],
            rankings: vec![RankingConfig::FullGrad, RankingConfig::GradCam { layer: None }],
            search: SearchConfig::default(),
            mask: MaskSpec::ChannelMeans,
            seed: 0,
            oracle: true,
            limit: None,
        }
    }
}

/// One image under one (segmenter, ranking) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub image: usize,
    pub regions: usize,
    pub success: bool,
    pub depth: usize,
    pub obfuscation_fraction: f64,
    /// Minimum flipping set size, searched up to the greedy depth; `None`
    /// when the oracle did not run.
    pub oracle_cardinality: Option<usize>,
    pub oracle_ran: bool,
    /// Every pixel outside the masked regions is bit-identical to the input.
    pub minimal: bool,
    /// The rendered output still flips after a PNG round trip.
    pub round_trip_flipped: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub evaluated: usize,
    /// Instances where the greedy depth equals the oracle minimum.
    pub greedy_optimal: usize,
    pub optimal_fraction: f64,
    /// Greedy depth below the oracle minimum, or a greedy success the
    /// oracle could not reproduce.
    pub dominance_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub segmenter: String,
    pub ranking: String,
    pub images: usize,
    pub successes: usize,
    /// Percentage of images with a counterfactual within budget.
    pub success_rate: f64,
    /// Over successes only.
    pub avg_depth: Option<f64>,
    /// Masked pixel percentage, over successes only.
    pub avg_obfuscation: Option<f64>,
    pub avg_regions: f64,
    pub oracle: Option<OracleSummary>,
    pub minimality_violations: usize,
    pub round_trip_failures: usize,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub corpus: String,
    pub corpus_size: usize,
    pub unsafe_images: usize,
    /// Unsafe-labelled images the classifier does not flag; not searched.
    pub not_flagged: Vec<usize>,
    pub rows: Vec<BenchRow>,
    pub runtime_secs: f64,
}

impl BenchReport {
    /// The report with the wall-clock field zeroed, for comparisons.
    pub fn without_timing(&self) -> BenchReport {
        BenchReport {
            runtime_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn row(&self, segmenter: &str, ranking: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.segmenter == segmenter && r.ranking == ranking)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let flagged = self.unsafe_images - self.not_flagged.len();
        let _ = writeln!(
            out,
            "corpus {} ({} images, {} unsafe, {} flagged), budget {}, T {}, mask {}, seed {}",
            self.corpus,
            self.corpus_size,
            self.unsafe_images,
            flagged,
            self.config.search.budget,
            self.config.search.threshold,
            self.config.mask,
            self.config.seed
        );
        let _ = writeln!(
            out,
            "{:<12} {:<10} {:>6} {:>8} {:>6} {:>8} {:>8} {:>10} {:>11} {:>10}",
            "segmenter", "ranking", "images", "cf%", "depth", "obf%", "regions", "oracle=", "minimal", "png-flip"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        for row in &self.rows {
            let oracle = row
                .oracle
                .as_ref()
                .map_or("-".to_string(), |o| format!("{}/{}", o.greedy_optimal, o.evaluated));
            let _ = writeln!(
                out,
                "{:<12} {:<10} {:>6} {:>8.1} {:>6} {:>8} {:>8.1} {:>10} {:>11} {:>10}",
                row.segmenter,
                row.ranking,
                row.images,
                row.success_rate,
                opt(row.avg_depth),
                opt(row.avg_obfuscation),
                row.avg_regions,
                oracle,
                format!("{}/{}", row.images - row.minimality_violations, row.images),
                format!("{}/{}", row.successes - row.round_trip_failures, row.successes),
            );
        }
        let _ = writeln!(out, "runtime {:.1}s", self.runtime_secs);
        out
    }
}

struct ImageOutcome {
    flagged: bool,
    /// Indexed like `BenchConfig::segmenters x rankings`, row-major.
    instances: Vec<Instance>,
}

pub fn run_bench(network: &Network, corpus: impl AsRef<Path>, config: &BenchConfig) -> Result<BenchReport> {
    let started = Instant::now();
    let corpus = corpus.as_ref();
    if config.segmenters.is_empty() || config.rankings.is_empty() {
        return Err(Error::Config(
            "bench needs at least one segmenter and one ranking".into(),
        ));
    }
    config.search.validate()?;
    let op = config.mask.resolve(network.channel_means())?;
    let mut entries = list_corpus(corpus)?;
    if let Some(limit) = config.limit {
        entries.truncate(limit);
    }
    let corpus_size = entries.len();
    let targets: Vec<usize> = (0..entries.len())
        .filter(|&i| entries[i].label == Label::Unsafe)
        .collect();
    if targets.is_empty() {
        return Err(Error::EmptyCorpus(corpus.to_path_buf()));
    }

    let outcomes = targets
        .par_iter()
        .map(|&index| {
            let loaded = load_image(&entries[index].path)?;
            bench_image(network, &loaded, index, config, &op)
        })
        .collect::<Result<Vec<_>>>()?;

    let not_flagged = targets
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| !o.flagged)
        .map(|(&i, _)| i)
        .collect();
    let mut rows = Vec::new();
    for (s, segmenter) in config.segmenters.iter().enumerate() {
        for (r, ranking) in config.rankings.iter().enumerate() {
            let slot = s * config.rankings.len() + r;
            let instances = outcomes
                .iter()
                .filter(|o| o.flagged)
                .map(|o| o.instances[slot].clone())
                .collect();
            rows.push(summarize(segmenter.to_string(), ranking.to_string(), instances));
        }
    }
    Ok(BenchReport {
        config: config.clone(),
        corpus: corpus.display().to_string(),
        corpus_size,
        unsafe_images: targets.len(),
        not_flagged,
        rows,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

fn bench_image(
    network: &Network,
    loaded: &LoadedImage,
    index: usize,
    config: &BenchConfig,
    op: &MaskOp,
) -> Result<ImageOutcome> {
    let image = &loaded.model_view;
    if classify(network, image)?.class != config.search.flagged_class {
        return Ok(ImageOutcome {
            flagged: false,
            instances: Vec::new(),
        });
    }
    let seed = mix_seed(config.seed, index as u64);
    let maps = config
        .rankings
        .iter()
        .map(|r| r.attribution(network, image))
        .collect::<Result<Vec<_>>>()?;
    let mut instances = Vec::with_capacity(config.segmenters.len() * config.rankings.len());
    for segmenter in &config.segmenters {
        let labels = segmenter.segment(image, seed)?;
        for (ranking, map) in config.rankings.iter().zip(&maps) {
            let scores = ranking.scores(map.as_ref(), &labels, mix_seed(seed, 1))?;
            let result = greedy_counterfactual(network, image, &labels, &scores, &config.search, op)?;
            instances.push(check_instance(network, loaded, index, &labels, &result, config, op)?);
        }
    }
    Ok(ImageOutcome {
        flagged: true,
        instances,
    })
}

fn check_instance(
    network: &Network,
    loaded: &LoadedImage,
    index: usize,
    labels: &LabelMap,
    result: &CounterfactualResult,
    config: &BenchConfig,
    op: &MaskOp,
) -> Result<Instance> {
    let image = &loaded.model_view;
    let search_mask = labels.mask(&result.masked_regions);
    let mut minimal = result
        .masked_image
        .as_ref()
        .is_some_and(|masked| untouched_outside(image, masked, &search_mask));

    let mut round_trip_flipped = None;
    if result.success {
        let rendered = render_obfuscated(&loaded.original, labels, result, op)?;
        let render_mask = if loaded.is_resized() {
            search_mask.project(loaded.original.width(), loaded.original.height())
        } else {
            search_mask.clone()
        };
        minimal &= untouched_outside(&loaded.original, &rendered, &render_mask);
        let reread = png_round_trip(&rendered)?;
        let view = if loaded.is_resized() {
            reread.resize_bilinear(image.width(), image.height())?
        } else {
            reread
        };
        let after = classify(network, &view)?;
        round_trip_flipped = Some(after.class != result.original_class && after.score() > config.search.threshold);
    }

    let oracle_ran = config.oracle && result.success && labels.region_count() <= ORACLE_REGION_LIMIT;
    let oracle_cardinality = if oracle_ran {
        brute_force_counterfactual(network, image, labels, config.search.threshold, result.depth, op)?
            .map(|found| found.regions.len())
    } else {
        None
    };
    Ok(Instance {
        image: index,
        regions: labels.region_count(),
        success: result.success,
        depth: result.depth,
        obfuscation_fraction: result.obfuscation_fraction,
        oracle_cardinality,
        oracle_ran,
        minimal,
        round_trip_flipped,
    })
}

fn untouched_outside(before: &ImageRgb, after: &ImageRgb, mask: &PixelMask) -> bool {
    (0..before.pixel_count()).all(|i| mask.bits()[i] || before.pixel_at(i) == after.pixel_at(i))
}

fn summarize(segmenter: String, ranking: String, instances: Vec<Instance>) -> BenchRow {
    let images = instances.len();
    let wins: Vec<&Instance> = instances.iter().filter(|i| i.success).collect();
    let mean = |values: Vec<f64>| (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    let oracle_runs: Vec<&Instance> = instances.iter().filter(|i| i.oracle_ran).collect();
    let oracle = (!oracle_runs.is_empty()).then(|| {
        let greedy_optimal = oracle_runs
            .iter()
            .filter(|i| i.oracle_cardinality == Some(i.depth))
            .count();
        let dominance_violations = oracle_runs
            .iter()
            .filter(|i| i.oracle_cardinality.is_none_or(|c| c > i.depth))
            .count();
        OracleSummary {
            evaluated: oracle_runs.len(),
            greedy_optimal,
            optimal_fraction: greedy_optimal as f64 / oracle_runs.len() as f64,
            dominance_violations,
        }
    });
    BenchRow {
        segmenter,
        ranking,
        images,
        successes: wins.len(),
        success_rate: if images == 0 {
            0.0
        } else {
            100.0 * wins.len() as f64 / images as f64
        },
        avg_depth: mean(wins.iter().map(|i| i.depth as f64).collect()),
        avg_obfuscation: mean(wins.iter().map(|i| 100.0 * i.obfuscation_fraction).collect()),
        avg_regions: mean(instances.iter().map(|i| i.regions as f64).collect()).unwrap_or(0.0),
        oracle,
        minimality_violations: instances.iter().filter(|i| !i.minimal).count(),
        round_trip_failures: instances.iter().filter(|i| i.round_trip_flipped == Some(false)).count(),
        instances,
    }
}
