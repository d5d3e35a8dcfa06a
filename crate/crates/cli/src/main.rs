//! `flap`: synthesize data, train, evaluate, sweep masking costs and enrich
//! captions from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flap::audio::{FeatureConfig, Manifest, Vocab};
use flap::augment::{
    merge_manifest, run_augmentation, write_augmented, EndpointConfig, MockEndpoint, MockReply, PromptStyle,
    SidecarTagger, Tagger, ToyTagger,
};
use flap::evaluation::evaluate;
use flap::flops::{curve_csv, masking_cost_curve, EncoderDims};
use flap::model::{FlapModel, ModelConfig};
use flap::numerics::checkpoint;
use flap::synth::generate_tone_dataset;
use flap::training::{train, FeatureStore, TrainConfig};
use flap::{FlapError, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "flap",
    version,
    about = "Masked contrastive language-audio pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    VitBase,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    #[value(name = "1d")]
    OneD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Original,
    Cleaned,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset of pure tones, each captioned by one made-up word.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0.64)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a vocabulary file from every caption in a manifest.
    BuildVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its final checkpoint plus a `.json` sidecar.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
        /// Replace the config's feature mean/std with statistics of the data.
        #[arg(long)]
        data_stats: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval recall in both directions, masking disabled.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Analytic encoder cost over a range of mask ratios, as CSV.
    CostCurve {
        #[arg(long, value_enum, default_value_t = Strategy::TwoD)]
        strategy: Strategy,
        /// Group count for 2d; defaults to the number of time rows (63).
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        ratios: Vec<f64>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tag clips, prompt a text generator and merge the new captions.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON sidecar of id -> {label: score}; the band-energy tagger is used without it.
        #[arg(long)]
        tags: Option<PathBuf>,
        /// Generation endpoint; falls back to FLAP_LLM_URL.
        #[arg(long)]
        endpoint: Option<String>,
        /// Serve this reply from a local mock endpoint instead of a real one.
        #[arg(long, conflicts_with = "endpoint")]
        mock_reply: Option<String>,
        #[arg(long, value_enum, default_value_t = Style::Original)]
        style: Style,
        #[arg(long, default_value_t = 4)]
        in_flight: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the merged manifest here.
        #[arg(long)]
        merged: Option<PathBuf>,
    },
}

/// What `evaluate` needs besides the weights.
#[derive(Serialize, Deserialize)]
struct ModelCard {
    model: ModelConfig,
    feature_mean: f64,
    feature_std: f64,
}

fn card_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FlapError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| FlapError::io(path, e))
}

/// Makes audio paths absolute when `dest` lives outside the manifest's
/// directory, so relative paths keep resolving after the move.
fn pin_audio_paths(manifest: &mut Manifest, dest: &Path) {
    let dest_dir = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let same = match (fs::canonicalize(dest_dir), fs::canonicalize(&manifest.base_dir)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return;
    }
    let resolved: Vec<PathBuf> = manifest
        .records
        .iter()
        .map(|r| {
            let p = manifest.resolve_audio(r);
            fs::canonicalize(&p).unwrap_or(p)
        })
        .collect();
    for (r, p) in manifest.records.iter_mut().zip(resolved) {
        r.audio_path = p.to_string_lossy().into_owned();
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            count,
            seconds,
            seed,
        } => {
            let m = generate_tone_dataset(&out, count, seconds, seed)?;
            println!(
                "wrote {} clips and {}",
                m.records.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::BuildVocab { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let vocab = Vocab::build(m.all_captions());
            vocab.save(&out)?;
            println!("{} tokens -> {}", vocab.len(), out.display());
        }
        Command::Train {
            manifest,
            config,
            vocab,
            preset,
            data_stats,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let vocab = Vocab::load(&vocab)?;
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if data_stats {
                let (mean, std) = FeatureStore::build(&m, &FeatureConfig::default(), 0.0, 1.0)?.stats();
                log::info!("feature statistics: mean {mean:.4}, std {std:.4}");
                cfg.feature_mean = mean;
                cfg.feature_std = std;
            }
            let mut model_cfg = match preset {
                Preset::Toy => ModelConfig::toy(vocab.len()),
                Preset::VitBase => ModelConfig::vit_base(vocab.len()),
            };
            model_cfg.fusion = cfg.fusion;
            let mut model = FlapModel::new(model_cfg.clone(), cfg.seed)?;
            let outcome = train(&mut model, &m, &vocab, &cfg)?;
            if let Some(last) = outcome.logs.last() {
                println!(
                    "{} steps; final loss {:.4} (contrastive {:.4}, reconstruction {:.4}, tau {:.4})",
                    outcome.logs.len(),
                    last.loss.total,
                    last.loss.contrastive,
                    last.loss.reconstruction,
                    last.loss.temperature
                );
            }
            if !outcome.skipped.is_empty() {
                println!("skipped unreadable records: {}", outcome.skipped.join(", "));
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| FlapError::io(parent, e))?;
            }
            checkpoint::save(&out, &model.params)?;
            let card = ModelCard {
                model: model_cfg,
                feature_mean: cfg.feature_mean,
                feature_std: cfg.feature_std,
            };
            write_text(&card_path(&out), &serde_json::to_string_pretty(&card)?)?;
            println!("checkpoint -> {}", out.display());
        }
        Command::Evaluate {
            manifest,
            checkpoint: ckpt,
            vocab,
            json,
        } => {
            let card_file = card_path(&ckpt);
            let text = fs::read_to_string(&card_file).map_err(|e| FlapError::io(&card_file, e))?;
            let card: ModelCard = serde_json::from_str(&text)?;
            let model = FlapModel::from_params(card.model, checkpoint::load(&ckpt)?)?;
            let report = evaluate(
                &model,
                &Manifest::load(&manifest)?,
                &Vocab::load(&vocab)?,
                card.feature_mean,
                card.feature_std,
            )?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::CostCurve {
            strategy,
            groups,
            ratios,
            tokens,
            out,
        } => {
            let mut dims = EncoderDims::vit_base();
            if let Some(n) = tokens {
                dims.tokens = n;
            }
            let groups = match strategy {
                Strategy::OneD => None,
                Strategy::TwoD => Some(groups.unwrap_or(63)),
            };
            let csv = curve_csv(&masking_cost_curve(dims, groups, &ratios)?);
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Augment {
            manifest,
            tags,
            endpoint,
            mock_reply,
            style,
            in_flight,
            out,
            merged,
        } => {
            let m = Manifest::load(&manifest)?;
            let tagger: Box<dyn Tagger> = match tags {
                Some(p) => Box::new(SidecarTagger::load(&p)?),
                None => Box::new(ToyTagger::new()?),
            };
            let mock = mock_reply
                .map(|r| MockEndpoint::start(vec![MockReply::Text(r)]))
                .transpose()?;
            let endpoint = match (&mock, endpoint) {
                (Some(mock), _) => EndpointConfig::new(mock.url()),
                (None, Some(url)) => {
                    let mut cfg = EndpointConfig::new(url);
                    cfg.auth = EndpointConfig::from_env().ok().and_then(|c| c.auth);
                    cfg
                }
                (None, None) => EndpointConfig::from_env()?,
            };
            let style = match style {
                Style::Original => PromptStyle::Original,
                Style::Cleaned => PromptStyle::Cleaned,
            };
            let outcome = run_augmentation(&m, tagger.as_ref(), &endpoint, style, in_flight);
            for (id, why) in &outcome.skipped {
                eprintln!("skipped {id}: {why}");
            }
            write_augmented(&out, &outcome.captions)?;
            println!("{} captions -> {}", outcome.captions.len(), out.display());
            if let Some(path) = merged {
                let mut merged_manifest = merge_manifest(&m, &outcome.captions)?;
                pin_audio_paths(&mut merged_manifest, &path);
                merged_manifest.save(&path)?;
                println!(
                    "merged manifest ({} captions) -> {}",
                    merged_manifest.caption_count(),
                    path.display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
