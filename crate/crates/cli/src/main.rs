use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cse_core::bench::{run_bench, BenchConfig};
use cse_core::corpus::{write_corpus, CorpusSpec};
use cse_core::io::{load_image, save_image};
use cse_core::network::Network;
use cse_core::obfuscation::MaskSpec;
use cse_core::pipeline::{explain, ExplainConfig, ExplanationRecord, RankingConfig};
use cse_core::segmentation::{LabelMapRecord, SegmenterConfig};
use cse_core::weights::WeightFile;
use serde::de::DeserializeOwned;

const EXIT_ERROR: u8 = 1;
const EXIT_NOT_FLAGGED: u8 = 2;
const EXIT_NO_COUNTERFACTUAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cse",
    version,
    about = "Counterfactual subobject explanations for flagged images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the fewest regions whose masking flips the classifier and render them obfuscated.
    Explain {
        image: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        /// Mask for the rendered image, when it should differ from the search mask.
        #[arg(long)]
        render_mask: Option<MaskSpec>,
        /// Segmenter: grid[:RxC], slic[:N] or bass[:N].
        #[arg(long)]
        seg: Option<SegmenterConfig>,
        /// Ranking: fullgrad, gradcam[:LAYER] or random.
        #[arg(long)]
        attr: Option<RankingConfig>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every segmenter x ranking pair over a corpus and report the metrics.
    Bench {
        corpus: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        /// Segmenters to compare (repeatable).
        #[arg(long)]
        seg: Vec<SegmenterConfig>,
        /// Rankings to compare (repeatable).
        #[arg(long)]
        attr: Vec<RankingConfig>,
        /// Only the first N corpus entries.
        #[arg(long)]
        limit: Option<usize>,
        /// Skip the exhaustive oracle comparison.
        #[arg(long)]
        no_oracle: bool,
        /// Output directory for report.json and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment the classifier view of an image; writes a 16-bit label PNG and a JSON record.
    Segment {
        image: PathBuf,
        #[arg(long, default_value = "bass")]
        seg: SegmenterConfig,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribution map of the classifier view of an image; writes a heatmap PNG and raw JSON.
    Attribute {
        image: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "fullgrad")]
        attr: RankingConfig,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the seeded planted-patch corpus.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Probability that an item carries the planted patch.
        #[arg(long, default_value_t = 0.5)]
        unsafe_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Options shared by explain and bench; flags override the config file.
#[derive(Args)]
struct SearchArgs {
    /// CSEW weight file; the bundled reference classifier when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax score the new class must exceed.
    #[arg(long = "T")]
    threshold: Option<f32>,
    /// Maximum number of masked regions.
    #[arg(long)]
    budget: Option<usize>,
    /// Search mask: mean, black, constant:R,G,B, blur:SIGMA or pixelate:BLOCK.
    #[arg(long)]
    mask: Option<MaskSpec>,
    /// Re-sort remaining regions by measured confidence reduction after each step.
    #[arg(long)]
    rerank_by_cr: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let not_flagged = err
                .downcast_ref::<cse_core::Error>()
                .is_some_and(|e| matches!(e, cse_core::Error::NotFlagged { .. }));
            ExitCode::from(if not_flagged { EXIT_NOT_FLAGGED } else { EXIT_ERROR })
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Explain {
            image,
            search,
            render_mask,
            seg,
            attr,
            out,
        } => {
            let network = load_model(search.model.as_deref())?;
            let mut config: ExplainConfig = read_config(search.config.as_deref())?;
            if let Some(seg) = seg {
                config.segmenter = seg;
            }
            if let Some(attr) = attr {
                config.ranking = attr;
            }
            if render_mask.is_some() {
                config.render_mask = render_mask;
            }
            if let Some(seed) = search.seed {
                config.seed = seed;
            }
            if let Some(t) = search.threshold {
                config.search.threshold = t;
            }
            if let Some(budget) = search.budget {
                config.search.budget = budget;
            }
            if let Some(mask) = search.mask {
                config.mask = mask;
            }
            config.search.rerank_by_cr |= search.rerank_by_cr;
            cmd_explain(&network, &image, &config, &out)
        }
        Command::Bench {
            corpus,
            search,
            seg,
            attr,
            limit,
            no_oracle,
            out,
        } => {
            let network = load_model(search.model.as_deref())?;
            let mut config: BenchConfig = read_config(search.config.as_deref())?;
            if !seg.is_empty() {
                config.segmenters = seg;
            }
            if !attr.is_empty() {
                config.rankings = attr;
            }
            if limit.is_some() {
                config.limit = limit;
            }
            config.oracle &= !no_oracle;
            if let Some(seed) = search.seed {
                config.seed = seed;
            }
            if let Some(t) = search.threshold {
                config.search.threshold = t;
            }
            if let Some(budget) = search.budget {
                config.search.budget = budget;
            }
            if let Some(mask) = search.mask {
                config.mask = mask;
            }
            config.search.rerank_by_cr |= search.rerank_by_cr;
            let report = run_bench(&network, &corpus, &config)?;
            create_dir(&out)?;
            write(&out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            let table = report.to_table();
            write(&out.join("report.txt"), &table)?;
            print!("{table}");
            Ok(0)
        }
        Command::Segment { image, seg, seed, out } => {
            let loaded = load_image(&image)?;
            let labels = seg.segment(&loaded.model_view, seed)?;
            create_dir(&out)?;
            labels.save_png16(out.join("labels.png"))?;
            let record = LabelMapRecord {
                k: labels.region_count(),
                seed,
                method: seg.name().to_string(),
                params: seg,
            };
            record.save(out.join("labels.json"))?;
            println!("{} regions", record.k);
            Ok(0)
        }
        Command::Attribute {
            image,
            model,
            attr,
            out,
        } => {
            let network = load_model(model.as_deref())?;
            let loaded = load_image(&image)?;
            let map = attr
                .attribution(&network, &loaded.model_view)?
                .context("the random ranking has no attribution map")?;
            create_dir(&out)?;
            map.save_heatmap(out.join("attribution.png"))?;
            map.save_json(out.join("attribution.json"))?;
            println!("class {} entropy {:.4}", map.target_class(), map.entropy());
            Ok(0)
        }
        Command::GenCorpus {
            seed,
            count,
            unsafe_fraction,
            out,
        } => {
            let spec = CorpusSpec {
                seed,
                count,
                unsafe_fraction,
                ..CorpusSpec::default()
            };
            let manifest = write_corpus(&spec, &out)?;
            let unsafe_count = manifest.items.iter().filter(|i| i.class == 1).count();
            println!(
                "{} images ({unsafe_count} unsafe) in {}",
                manifest.items.len(),
                out.display()
            );
            Ok(0)
        }
    }
}

fn cmd_explain(network: &Network, image: &Path, config: &ExplainConfig, out: &Path) -> Result<u8> {
    let loaded = load_image(image)?;
    let explanation = explain(network, &loaded.model_view, &loaded.original, config)?;
    create_dir(out)?;
    let record = ExplanationRecord::new(image.display().to_string(), config, network, &explanation);
    write(&out.join("explanation.json"), serde_json::to_string_pretty(&record)?)?;
    explanation.labels.save_png16(out.join("labels.png"))?;
    if let Some(map) = &explanation.attribution {
        map.save_heatmap(out.join("attribution.png"))?;
    }
    let result = &explanation.result;
    match &explanation.rendered {
        Some(rendered) => {
            save_image(rendered, out.join("obfuscated.png"))?;
            println!(
                "counterfactual at depth {}: regions {:?}, {:.1}% obfuscated, {} -> {} ({:.3})",
                result.depth,
                result.masked_regions,
                100.0 * result.obfuscation_fraction,
                network.class_names()[result.original_class],
                network.class_names()[result.final_class],
                result.final_score
            );
            if let Some(check) = explanation.render_check.as_ref().filter(|c| !c.flipped) {
                eprintln!(
                    "warning: the rendering mask does not flip the classifier ({} at {:.3})",
                    network.class_names()[check.prediction.class],
                    check.prediction.score()
                );
            }
            Ok(0)
        }
        None => {
            eprintln!("no counterfactual within {} regions", result.depth);
            Ok(EXIT_NO_COUNTERFACTUAL)
        }
    }
}

fn load_model(path: Option<&Path>) -> Result<Network> {
    let file = match path {
        Some(path) => WeightFile::load(path).with_context(|| format!("loading model {}", path.display()))?,
        None => WeightFile::reference(),
    };
    Ok(file.network)
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        }
        None => Ok(T::default()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
