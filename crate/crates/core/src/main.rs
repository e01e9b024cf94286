use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fadvlp::corpus::{read_corpus, write_jsonl, CorpusRecord};
use fadvlp::evaluation::{
    build_gallery, dot, embed_fused, generate_captions, generate_relative_captions, reports_csv,
};
use fadvlp::model::Decode;
use fadvlp::pipeline::{
    self, files, load_triplets, make_split, prepare_out_dir, run_finetune, run_pipeline,
    run_pretrain, subset, write, write_json, EvalContext, PipelineError, RunConfig,
};
use fadvlp::trainer::{encode_texts, Checkpoint, ImageStore, Task};

#[derive(Parser)]
#[command(name = "fadvlp", version, about = "Fashion vision-language pre-training at desk scale")]
struct Cli {
    /// Worker threads; falls back to FADVLP_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalogue.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of items.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build pseudo-triplets from the training split of a corpus.
    BuildTriplets {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sample_size: Option<usize>,
    },
    /// Two-stage pre-training.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
    },
    /// Fine-tune a pre-trained checkpoint on one task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Evaluate a checkpoint on one task over the holdout split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus supplying the gallery and the holdout queries.
        #[arg(long)]
        gallery: PathBuf,
    },
    /// Run a checkpoint on individual items.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: InferMode,
        /// Reference (or captioned) item id.
        #[arg(long)]
        id: u64,
        /// Target item id for relative captions.
        #[arg(long)]
        target: Option<u64>,
        /// Feedback text for retrieval.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Every stage end to end, then the full metrics table.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InferMode {
    Caption,
    RelativeCaption,
    Retrieve,
}

fn invalid(m: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(m.into())
}

fn runtime(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Runtime(e.to_string())
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn load_config(common: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    read_corpus(path).map_err(|e| invalid(e.to_string()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    Checkpoint::load(path).map_err(|e| invalid(e.to_string()))
}

#[derive(Serialize)]
struct Inference {
    mode: &'static str,
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    ranked: Vec<(u64, f64)>,
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::GenData { common, n } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = n {
                cfg.corpus_size = n;
            }
            cfg.validate()?;
            prepare_out_dir(&cfg, &common.out_dir)?;
            let records = pipeline::gen_data(&cfg, &common.out_dir)?;
            write_json(&common.out_dir.join(files::SPLIT), &make_split(&cfg, &records)?)?;
            progress(&format!("wrote {} items", records.len()));
        }
        Command::BuildTriplets {
            common,
            corpus,
            sample_size,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = sample_size {
                cfg.triplets.sample_size = s;
            }
            cfg.validate()?;
            let records = load_corpus(&corpus)?;
            let split = make_split(&cfg, &records)?;
            prepare_out_dir(&cfg, &common.out_dir)?;
            let (triplets, stats) = pipeline::build_triplets(&cfg, &subset(&records, &split.train))?;
            write_jsonl(&common.out_dir.join(files::TRIPLETS), &triplets).map_err(runtime)?;
            write_json(&common.out_dir.join(files::TRIPLET_STATS), &stats)?;
            progress(&format!("{} triplets built, {} skipped", stats.built, stats.skipped));
        }
        Command::Pretrain {
            common,
            corpus,
            triplets,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let records = load_corpus(&corpus)?;
            let triplets = load_triplets(&triplets).map_err(|e| invalid(e.to_string()))?;
            let split = make_split(&cfg, &records)?;
            prepare_out_dir(&cfg, &common.out_dir)?;
            let images = ImageStore::render(&cfg.schema, &records).map_err(runtime)?;
            let vocab = cfg.schema.vocabulary();
            let train = subset(&records, &split.train);
            run_pretrain(&cfg, &common.out_dir, &vocab, &images, &train, &triplets, &mut progress)?;
        }
        Command::Finetune {
            common,
            task,
            checkpoint,
            corpus,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let base = load_checkpoint(&checkpoint)?;
            let records = load_corpus(&corpus)?;
            let split = make_split(&cfg, &records)?;
            prepare_out_dir(&cfg, &common.out_dir)?;
            let images = ImageStore::render(&cfg.schema, &records).map_err(runtime)?;
            let train = subset(&records, &split.train);
            run_finetune(&cfg, &common.out_dir, &base, &images, &train, task, &mut progress)?;
        }
        Command::Eval {
            common,
            task,
            checkpoint,
            gallery,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let ck = load_checkpoint(&checkpoint)?;
            let records = load_corpus(&gallery)?;
            let split = make_split(&cfg, &records)?;
            prepare_out_dir(&cfg, &common.out_dir)?;
            let images = ImageStore::render(&cfg.schema, &records).map_err(runtime)?;
            let holdout = subset(&records, &split.holdout);
            let ctx = EvalContext::new(&cfg, &ck.vocabulary, &images, &records, &holdout);
            let reports = vec![ctx.evaluate(task, &ck.model)?];
            write_json(&common.out_dir.join(files::METRICS_JSON), &reports)?;
            write(&common.out_dir.join(files::METRICS_CSV), reports_csv(&reports))?;
            progress(&format!("{task}: {:?}", reports[0].metrics));
        }
        Command::Infer {
            common,
            checkpoint,
            corpus,
            mode,
            id,
            target,
            text,
            top_k,
        } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let ck = load_checkpoint(&checkpoint)?;
            let records = load_corpus(&corpus)?;
            let item = records
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| invalid(format!("item {id} not in the corpus")))?;
            match mode {
                InferMode::Caption => {}
                InferMode::RelativeCaption => {
                    let t = target.ok_or_else(|| invalid("relative-caption needs --target"))?;
                    if !records.iter().any(|r| r.id == t) {
                        return Err(invalid(format!("item {t} not in the corpus")));
                    }
                }
                InferMode::Retrieve => {
                    if text.is_none() {
                        return Err(invalid("retrieve needs --text"));
                    }
                }
            }
            prepare_out_dir(&cfg, &common.out_dir)?;
            let images = ImageStore::render(&cfg.schema, &records).map_err(runtime)?;
            let vocab = &ck.vocabulary;
            let max_tokens = cfg.generation.max_tokens;
            let out = match mode {
                InferMode::Caption => Inference {
                    mode: "caption",
                    id,
                    target: None,
                    text: generate_captions(&ck.model, &images, &[id], vocab, max_tokens)
                        .map_err(runtime)?
                        .pop(),
                    ranked: Vec::new(),
                },
                InferMode::RelativeCaption => Inference {
                    mode: "relative_caption",
                    id,
                    target,
                    text: generate_relative_captions(
                        &ck.model,
                        &images,
                        &[id],
                        &[target.unwrap()],
                        vocab,
                        Decode::Nucleus {
                            p: cfg.generation.nucleus_p,
                        },
                        max_tokens,
                        cfg.seed,
                    )
                    .map_err(runtime)?
                    .pop(),
                    ranked: Vec::new(),
                },
                InferMode::Retrieve => {
                    let feedback = text.unwrap();
                    let caps = encode_texts(vocab, &[feedback.as_str()], ck.model.config().max_len);
                    let q = embed_fused(&ck.model, &images, &[id], &caps).map_err(runtime)?.remove(0);
                    let gallery = build_gallery(&ck.model, &images, &records, vocab).map_err(runtime)?;
                    let mut ranked: Vec<(u64, f64)> = (0..gallery.ids.len())
                        .filter(|&j| gallery.ids[j] != id && gallery.categories[j] == item.category)
                        .map(|j| (gallery.ids[j], dot(&q, &gallery.images[j])))
                        .collect();
                    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    ranked.truncate(top_k);
                    Inference {
                        mode: "retrieve",
                        id,
                        target: None,
                        text: Some(feedback),
                        ranked,
                    }
                }
            };
            write_json(&common.out_dir.join("infer.json"), &out)?;
            if let Some(t) = &out.text {
                progress(t);
            }
        }
        Command::Pipeline { common } => {
            let cfg = load_config(&common)?;
            let out = run_pipeline(&cfg, &common.out_dir, &mut progress)?;
            progress(&format!("metrics written to {}", out.out_dir.join(files::METRICS_CSV).display()));
        }
    }
    Ok(())
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, PipelineError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("FADVLP_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("FADVLP_THREADS={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = threads(cli.threads).and_then(|n| {
        if let Some(n) = n {
            if n == 0 {
                return Err(invalid("--threads must be positive"));
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
        }
        run(cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
