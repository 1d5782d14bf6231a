//! One image through segmentation, ranking, search and rendering.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attribution::{default_gradcam_layer, fullgrad, gradcam, AttributionMap};
use crate::counterfactual::{
    classify, greedy_counterfactual, region_scores, CounterfactualResult, Prediction, RegionScore, SearchConfig,
};
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::network::Network;
use crate::obfuscation::{render_obfuscated, MaskOp, MaskSpec};
use crate::segmentation::{BassParams, LabelMap, SegmenterConfig};

/// How regions are ordered for the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RankingConfig {
    #[default]
    FullGrad,
    /// Grad-CAM at the given convolution, the last one by default.
    GradCam { layer: Option<usize> },
    /// Seeded random scores; the ablation baseline.
    Random,
}

impl RankingConfig {
    /// The attribution map behind the ranking, if it has one.
    pub fn attribution(&self, network: &Network, image: &ImageRgb) -> Result<Option<AttributionMap>> {
        match self {
            RankingConfig::FullGrad => fullgrad(network, image).map(Some),
            RankingConfig::GradCam { layer } => {
                let layer = match layer {
                    Some(l) => *l,
                    None => default_gradcam_layer(network)
                        .ok_or_else(|| Error::InvalidNetwork("no convolution for Grad-CAM".into()))?,
                };
                gradcam(network, image, layer).map(Some)
            }
            RankingConfig::Random => Ok(None),
        }
    }

    /// Region scores from a map computed by [`Self::attribution`], or seeded
    /// uniform scores for the random ranking.
    pub fn scores(&self, map: Option<&AttributionMap>, labels: &LabelMap, seed: u64) -> Result<Vec<RegionScore>> {
        match map {
            Some(map) => region_scores(map, labels),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(labels
                    .region_sizes()
                    .into_iter()
                    .enumerate()
                    .map(|(region, pixel_count)| RegionScore {
                        region,
                        score: rng.random(),
                        pixel_count,
                    })
                    .collect())
            }
        }
    }
}

impl fmt::Display for RankingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankingConfig::FullGrad => write!(f, "fullgrad"),
            RankingConfig::GradCam { layer: None } => write!(f, "gradcam"),
            RankingConfig::GradCam { layer: Some(l) } => write!(f, "gradcam:{l}"),
            RankingConfig::Random => write!(f, "random"),
        }
    }
}

/// Parses `fullgrad`, `gradcam[:LAYER]` or `random`.
impl FromStr for RankingConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad attribution spec {s:?}"));
        match s.split_once(':') {
            None => match s {
                "fullgrad" => Ok(RankingConfig::FullGrad),
                "gradcam" => Ok(RankingConfig::GradCam { layer: None }),
                "random" => Ok(RankingConfig::Random),
                _ => Err(bad()),
            },
            Some(("gradcam", layer)) => Ok(RankingConfig::GradCam {
                layer: Some(layer.parse().map_err(|_| bad())?),
            }),
            Some(_) => Err(bad()),
        }
    }
}

impl Serialize for RankingConfig {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RankingConfig {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub segmenter: SegmenterConfig,
    pub ranking: RankingConfig,
    pub search: SearchConfig,
    /// Mask used while searching.
    pub mask: MaskSpec,
    /// Mask for the rendered output; the search mask when absent.
    pub render_mask: Option<MaskSpec>,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            segmenter: SegmenterConfig::Bass(BassParams::default()),
            ranking: RankingConfig::FullGrad,
            search: SearchConfig::default(),
            mask: MaskSpec::ChannelMeans,
            render_mask: None,
            seed: 0,
        }
    }
}

/// The classifier's verdict on the rendered output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderCheck {
    pub mask: MaskOp,
    pub prediction: Prediction,
    /// Whether the rendered image still counts as a counterfactual.
    pub flipped: bool,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub labels: LabelMap,
    pub attribution: Option<AttributionMap>,
    pub scores: Vec<RegionScore>,
    pub search_mask: MaskOp,
    pub result: CounterfactualResult,
    /// Present when the search succeeded.
    pub rendered: Option<ImageRgb>,
    pub render_check: Option<RenderCheck>,
}

/// Explains `model_view` (the classifier-resolution image) and renders the
/// result onto `original`, which may be larger.
pub fn explain(
    network: &Network,
    model_view: &ImageRgb,
    original: &ImageRgb,
    config: &ExplainConfig,
) -> Result<Explanation> {
    let search_mask = config.mask.resolve(network.channel_means())?;
    let render_mask = match config.render_mask {
        Some(spec) => spec.resolve(network.channel_means())?,
        None => search_mask,
    };
    let original_class = classify(network, model_view)?.class;
    if original_class != config.search.flagged_class {
        return Err(Error::NotFlagged {
            predicted: original_class,
            flagged: config.search.flagged_class,
        });
    }
    let labels = config.segmenter.segment(model_view, config.seed)?;
    let attribution = config.ranking.attribution(network, model_view)?;
    let scores = config.ranking.scores(attribution.as_ref(), &labels, config.seed)?;
    let result = greedy_counterfactual(network, model_view, &labels, &scores, &config.search, &search_mask)?;

    let (rendered, render_check) = if result.success {
        let rendered = render_obfuscated(original, &labels, &result, &render_mask)?;
        let view = if (rendered.width(), rendered.height()) == (model_view.width(), model_view.height()) {
            rendered.clone()
        } else {
            rendered.resize_bilinear(model_view.width(), model_view.height())?
        };
        let prediction = classify(network, &view)?;
        let flipped = prediction.class != original_class && prediction.score() > config.search.threshold;
        (
            Some(rendered),
            Some(RenderCheck {
                mask: render_mask,
                prediction,
                flipped,
            }),
        )
    } else {
        (None, None)
    };
    Ok(Explanation {
        labels,
        attribution,
        scores,
        search_mask,
        result,
        rendered,
        render_check,
    })
}

/// The JSON written by `cse explain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub input: String,
    pub config: ExplainConfig,
    pub class_names: Vec<String>,
    pub region_count: usize,
    pub region_scores: Vec<RegionScore>,
    pub search_mask: MaskOp,
    pub result: CounterfactualResult,
    pub render_check: Option<RenderCheck>,
}

impl ExplanationRecord {
    pub fn new(input: String, config: &ExplainConfig, network: &Network, explanation: &Explanation) -> Self {
        Self {
            input,
            config: config.clone(),
            class_names: network.class_names().to_vec(),
            region_count: explanation.labels.region_count(),
            region_scores: explanation.scores.clone(),
            search_mask: explanation.search_mask,
            result: explanation.result.clone(),
            render_check: explanation.render_check.clone(),
        }
    }
}
