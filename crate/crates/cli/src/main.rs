use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use copydet::pipeline::{self, GenerationSpec, PipelineConfig};

#[derive(Parser)]
#[command(name = "copydet", version, about = "Image copy detection: index a corpus, score attacked queries")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// TOML pipeline config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (paths.output_dir).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override any config key, e.g. `--set matcher.global_k=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Extract SIFT features of a directory of images into an archive.
    Extract {
        /// Defaults to paths.corpus_dir.
        dir: Option<PathBuf>,
        /// Defaults to paths.features_file, else <output>/features.sft.
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Build the descriptor index from a feature archive.
    Index {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
        /// Build an inverted-file index instead of a flat one.
        #[arg(long)]
        partitioned: bool,
    },
    /// Compute global embeddings of a directory of images.
    Embed {
        dir: Option<PathBuf>,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Train the global projection on augmented views of the corpus.
    Train {
        dir: Option<PathBuf>,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Detect pasted regions and write a crop-box CSV.
    DetectOverlay {
        dir: PathBuf,
        #[arg(short = 'o', long = "out")]
        out: Option<PathBuf>,
    },
    /// Render an attacked query set with ground truth.
    Augment {
        /// Reference images; defaults to paths.corpus_dir.
        #[arg(long)]
        refs: Option<PathBuf>,
        /// Render this manifest instead of generating one.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 150)]
        attacked: usize,
        #[arg(long, default_value_t = 150)]
        distractors: usize,
    },
    /// Score queries against the corpus and write a submission.
    Run {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Use these boxes instead of the paste detector.
        #[arg(long)]
        crop_boxes: Option<PathBuf>,
    },
    /// Score a submission CSV against ground truth.
    Eval {
        submission: PathBuf,
        ground_truth: PathBuf,
        /// Write the precision/recall curve here.
        #[arg(long)]
        pr: Option<PathBuf>,
    },
    /// Write procedural reference images.
    Synth {
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 300)]
        min_edge: usize,
        #[arg(long, default_value_t = 400)]
        max_edge: usize,
    },
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(cfg: PipelineConfig, spec: &str) -> Result<PipelineConfig> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("--set expects KEY=VALUE, got `{spec}`");
    };
    let mut root = toml::Value::try_from(&cfg)?;
    let mut node = &mut root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .with_context(|| format!("`{key}`: `{part}` is not inside a table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parse_value(raw.trim()));
            break;
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    root.try_into().with_context(|| format!("--set {spec}"))
}

fn load_config(shared: &Shared) -> Result<PipelineConfig> {
    let mut cfg = match &shared.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    for spec in &shared.overrides {
        cfg = apply_override(cfg, spec)?;
    }
    if let Some(t) = shared.threads {
        cfg.threads = t;
    }
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    if let Some(o) = &shared.output {
        cfg.paths.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .with_context(|| format!("no {name} given on the command line or in the config"))
}

fn or_output(flag: Option<PathBuf>, config: &Option<PathBuf>, cfg: &PipelineConfig, file: &str) -> PathBuf {
    flag.or_else(|| config.clone())
        .unwrap_or_else(|| cfg.paths.output_dir.join(file))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn save_config(cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    cfg.save(cfg.paths.output_dir.join("config.toml"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.shared)?;
    match cli.command {
        Command::Extract { dir, out } => {
            let dir = pick(dir, &cfg.paths.corpus_dir, "image directory")?;
            let out = or_output(out, &cfg.paths.features_file, &cfg, "features.sft");
            ensure_parent(&out)?;
            let s = pipeline::cmd_extract(&cfg, &dir, &out)?;
            println!("extracted {} images into {}, skipped {}", s.extracted, out.display(), s.skipped.len());
            for (id, why) in &s.skipped {
                println!("  skipped {id}: {why}");
            }
        }
        Command::Index {
            features,
            out,
            partitioned,
        } => {
            cfg.index.partitioned |= partitioned;
            let features = features
                .or_else(|| cfg.paths.features_file.clone())
                .unwrap_or_else(|| cfg.paths.output_dir.join("features.sft"));
            let out = or_output(out, &cfg.paths.index_file, &cfg, "index.ldx");
            ensure_parent(&out)?;
            let index = pipeline::cmd_index(&cfg, &features, &out)?;
            println!(
                "indexed {} descriptors of {} images into {}",
                index.len(),
                index.image_ids().len(),
                out.display()
            );
        }
        Command::Embed { dir, out } => {
            let dir = pick(dir, &cfg.paths.corpus_dir, "image directory")?;
            let out = or_output(out, &cfg.paths.embedding_file, &cfg, "embeddings.gem");
            ensure_parent(&out)?;
            let n = pipeline::cmd_embed(&cfg, &dir, &out)?;
            println!("embedded {n} images into {}", out.display());
        }
        Command::Train { dir, out } => {
            let dir = pick(dir, &cfg.paths.corpus_dir, "corpus directory")?;
            let out = or_output(out, &cfg.paths.projection_file, &cfg, "projection.prj");
            ensure_parent(&out)?;
            let trace = pipeline::cmd_train(&cfg, &dir, &out)?;
            for (epoch, loss) in trace.iter().enumerate() {
                println!("epoch {epoch:>3}  loss {loss:.6}");
            }
            println!("projection written to {}", out.display());
        }
        Command::DetectOverlay { dir, out } => {
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("crop_boxes.csv"));
            ensure_parent(&out)?;
            let boxes = pipeline::cmd_detect_overlay(&cfg, &dir, &out)?;
            println!("{} detections written to {}", boxes.len(), out.display());
        }
        Command::Augment {
            refs,
            manifest,
            attacked,
            distractors,
        } => {
            let refs = pick(refs, &cfg.paths.corpus_dir, "reference directory")?;
            let spec = GenerationSpec {
                attacked,
                distractors,
                ..GenerationSpec::default()
            };
            let rows = match manifest.or_else(|| cfg.paths.manifest.clone()) {
                Some(m) => pipeline::read_manifest(&m)?,
                None => pipeline::generate_manifest(&cfg, &refs, &spec)?,
            };
            let out = cfg.paths.output_dir.clone();
            let s = pipeline::cmd_augment(&cfg, &refs, &rows, spec.distractor_edges, &out)?;
            save_config(&cfg)?;
            println!(
                "{} queries ({} true pairs, {} overlay boxes) in {}",
                s.queries,
                s.true_pairs,
                s.overlay_boxes.len(),
                s.query_dir.display()
            );
        }
        Command::Run {
            queries,
            index,
            embeddings,
            ground_truth,
            crop_boxes,
        } => {
            let p = &mut cfg.paths;
            p.query_dir = queries.or(p.query_dir.take());
            p.index_file = index.or(p.index_file.take());
            p.embedding_file = embeddings.or(p.embedding_file.take());
            p.ground_truth = ground_truth.or(p.ground_truth.take());
            p.crop_boxes = crop_boxes.or(p.crop_boxes.take());
            let (output, curve, files) = pipeline::cmd_run(&cfg)?;
            println!(
                "{} queries, {} pairs written to {}",
                output.traces.len(),
                output.pairs.len(),
                files.submission.display()
            );
            if !output.skipped.is_empty() {
                println!("skipped {} unreadable queries", output.skipped.len());
            }
            if let Some(c) = curve {
                println!("micro-AP {:.6}", c.micro_ap);
            }
        }
        Command::Eval {
            submission,
            ground_truth,
            pr,
        } => {
            let curve = pipeline::cmd_eval(&submission, &ground_truth, pr.as_deref())?;
            println!("micro-AP {:.6}", curve.micro_ap);
        }
        Command::Synth {
            count,
            min_edge,
            max_edge,
        } => {
            let out = cfg.paths.output_dir.clone();
            let paths = pipeline::cmd_synth(&cfg, &out, count, min_edge, max_edge)?;
            println!("{} images written to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.shared.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = apply_override(PipelineConfig::default(), "matcher.global_k=20").unwrap();
        assert_eq!(cfg.matcher.global_k, 20);
        let cfg = apply_override(cfg, "paths.corpus_dir=refs").unwrap();
        assert_eq!(cfg.paths.corpus_dir, Some(PathBuf::from("refs")));
        let cfg = apply_override(cfg, "index.dtype=\"f16\"").unwrap();
        assert_eq!(cfg.index.dtype, copydet::vecindex::Dtype::F16);
        assert!(apply_override(cfg.clone(), "matcher.nonexistent=1").is_err());
        assert!(apply_override(cfg, "no_equals_sign").is_err());
    }
}
