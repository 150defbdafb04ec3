use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use damage_cot::checkpoint::{load_checkpoint, save_checkpoint};
use damage_cot::cot::{run_cot, run_plain};
use damage_cot::dataset::{
    corpus_dir_files, generate_synthetic, read_synthetic, write_synthetic, Split, SyntheticRecord,
};
use damage_cot::diagnostics::{gradient_suite, softmax_row_deviation, GRAD_TOLERANCE};
use damage_cot::imageio::{read_image, write_mask};
use damage_cot::manifest::{RunManifest, RUN_MANIFEST_FILE};
use damage_cot::model::Model;
use damage_cot::pipeline::{ablation, evaluate_records, train_model, Progress, RunConfig};
use damage_cot::segmenter::SegmentationMap;
use damage_cot::{cot::InferenceMode, Error, ErrorKind, Tensor};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("DAMAGE_COT_GIT"), ")");

#[derive(Parser)]
#[command(name = "damage-cot", version = VERSION, about = "Chain-of-thought structural damage identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the segmenter, then train from scratch and fine-tune adapters.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long, alias = "ckpt")]
        out: PathBuf,
    },
    /// Write the damage mask of one image.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer a question about one image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Question; defaults to the template instruction.
        #[arg(long)]
        prompt: Option<String>,
        /// Single-stage answer without segmentation or rationale.
        #[arg(long)]
        no_cot: bool,
        /// Where to write the segmentation mask (default: next to the image).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-category accuracy on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CoT and plain accuracy and their difference.
        #[arg(long)]
        ablate: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match e.kind() {
            ErrorKind::Usage => (2, "usage"),
            ErrorKind::Data => (3, "data"),
            ErrorKind::Numeric => (4, "numeric"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn data_err(message: String) -> Failure {
    Failure {
        code: 3,
        kind: "data",
        message,
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| data_err(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| data_err(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn print_json(v: &Value) {
    use std::io::Write;
    // a closed pipe downstream is not an error of ours
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(v).expect("serializable"));
}

fn load_image(model: &Model, path: &Path) -> CliResult<Tensor> {
    let image = read_image(path)?;
    model
        .prepare_image(&image)
        .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    Ok(image)
}

/// Writes the probability map next to `mask` as raw little-endian f64 in
/// row-major order, plus a JSON sidecar describing it.
fn write_prob(mask: &Path, map: &SegmentationMap) -> CliResult<(PathBuf, PathBuf)> {
    let blob = mask.with_extension("prob.f64");
    let sidecar = mask.with_extension("prob.json");
    let bytes: Vec<u8> = map.prob.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let write = |path: &Path, contents: &[u8]| {
        std::fs::write(path, contents).map_err(|e| data_err(format!("{}: {e}", path.display())))
    };
    write(&blob, &bytes)?;
    let meta = json!({
        "file": blob.file_name().map(|n| n.to_string_lossy()),
        "dtype": "f64",
        "endian": "little",
        "order": "row-major",
        "shape": [map.height(), map.width()],
        "threshold": map.threshold,
    });
    write(
        &sidecar,
        (serde_json::to_string_pretty(&meta).expect("serializable") + "\n").as_bytes(),
    )?;
    Ok((blob, sidecar))
}

/// Files under `dir`, relative to it, so manifests of identical runs into
/// different directories agree.
fn relative_files(dir: &Path) -> Vec<String> {
    corpus_dir_files(dir)
        .into_iter()
        .filter_map(|p| p.strip_prefix(dir).ok().map(|r| r.display().to_string()))
        .filter(|r| r != RUN_MANIFEST_FILE)
        .collect()
}

fn split(data: &Path, which: Split) -> CliResult<Vec<SyntheticRecord>> {
    let records: Vec<_> = read_synthetic(data)?
        .into_iter()
        .filter(|r| r.meta.split == which)
        .collect();
    if records.is_empty() {
        return Err(data_err(format!("{} has no {which:?} records", data.display())));
    }
    Ok(records)
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { common, out } => {
            let config = load_config(&common)?;
            let mut manifest = RunManifest::begin("synth", &config.synthetic, config.synthetic.seed, VERSION)?;
            let records = generate_synthetic(&config.synthetic)?;
            write_synthetic(&out, &records)?;
            manifest.outputs = relative_files(&out);
            manifest.finish();
            manifest.write(&out.join(RUN_MANIFEST_FILE))?;
            let eval = records.iter().filter(|r| r.meta.split == Split::Eval).count();
            print_json(&json!({
                "out": out,
                "records": records.len(),
                "train": records.len() - eval,
                "eval": eval,
            }));
        }
        Command::Train { common, data, out } => {
            let config = load_config(&common)?;
            let mut manifest = RunManifest::begin("train", &config, config.scratch.seed, VERSION)?;
            let records = split(&data, Split::Train)?;
            let (model, report) = train_model(&config, &records, |p| {
                if let Progress::Step { phase, step, loss } = p {
                    if step % 100 == 0 {
                        eprintln!("{phase} step {step}: loss {loss:.5}");
                    }
                }
            })?;
            save_checkpoint(&out, &model, None)?;
            let report_path = out.join("train_report.json");
            std::fs::write(
                &report_path,
                serde_json::to_string_pretty(&report).expect("serializable") + "\n",
            )
            .map_err(|e| data_err(format!("{}: {e}", report_path.display())))?;
            manifest.outputs = relative_files(&out);
            manifest.finish();
            manifest.write(&out.join(RUN_MANIFEST_FILE))?;
            print_json(&json!({
                "ckpt": out,
                "records": records.len(),
                "final_loss": report.final_loss,
                "scratch_steps": report.scratch.losses.len(),
                "finetune_steps": report.finetune.as_ref().map_or(0, |f| f.losses.len()),
                "finetune_trainable": report.finetune.as_ref().map(|f| f.trainable),
            }));
        }
        Command::Segment {
            common,
            ckpt,
            image,
            out,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let seed = common.seed.unwrap_or(model.config.seed);
            let mut manifest = RunManifest::begin("segment", &model.config, seed, VERSION)?;
            let img = load_image(&model, &image)?;
            let map = model.segment(&model.prepare_image(&img)?)?;
            write_mask(&out, &map.mask)?;
            let (blob, sidecar) = write_prob(&out, &map)?;
            manifest.outputs = [&out, &blob, &sidecar]
                .iter()
                .map(|p| p.display().to_string())
                .collect();
            manifest.finish();
            print_json(&json!({
                "mask": out,
                "prob": blob,
                "prob_manifest": sidecar,
                "height": map.height(),
                "width": map.width(),
                "damage_pixels": map.damage_pixels(),
                "manifest": manifest,
            }));
        }
        Command::Infer {
            common,
            ckpt,
            image,
            prompt,
            no_cot,
            out,
        } => {
            let config = load_config(&common)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let seed = common.seed.unwrap_or(model.config.seed);
            let mut manifest = RunManifest::begin("infer", &config.template, seed, VERSION)?;
            let img = load_image(&model, &image)?;
            let template = &config.template;
            let result = if no_cot {
                let question = prompt.as_deref().unwrap_or(&template.stage1);
                let plain = run_plain(&model, &img, question, template.max_new_tokens)?;
                json!({
                    "mode": "plain",
                    "image": image,
                    "answer": plain.output.text,
                    "answer_logprob": plain.output.logprob(),
                })
            } else {
                let trace = run_cot(&model, &img, prompt.as_deref(), template)?;
                let mask_path = out.unwrap_or_else(|| image.with_extension("vr.pgm"));
                write_mask(&mask_path, &trace.vr.mask)?;
                manifest.outputs = vec![mask_path.display().to_string()];
                json!({
                    "mode": "cot",
                    "image": image,
                    "vr_mask": mask_path,
                    "rationale": trace.rationale.text,
                    "answer": trace.answer.text,
                    "rationale_logprob": trace.rationale.logprob(),
                    "answer_logprob": trace.answer.logprob(),
                    "joint_logprob": trace.joint_logprob,
                })
            };
            manifest.finish();
            let mut result = result;
            result["manifest"] = serde_json::to_value(&manifest).expect("serializable");
            print_json(&result);
        }
        Command::Eval {
            common,
            ckpt,
            data,
            ablate,
            out,
        } => {
            let config = load_config(&common)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let seed = common.seed.unwrap_or(model.config.seed);
            let mut manifest = RunManifest::begin("eval", &config.template, seed, VERSION)?;
            let records = split(&data, Split::Eval)?;
            let refs: Vec<&SyntheticRecord> = records.iter().collect();
            let report = if ablate {
                let r = ablation(&model, &refs, &config.template)?;
                eprint!("{}", r.all.cot.table("CoT"));
                eprint!("{}", r.all.plain.table("plain"));
                eprintln!("difference {:+.4}", r.all.difference);
                serde_json::to_value(&r).expect("serializable")
            } else {
                let r = evaluate_records(&model, &refs, InferenceMode::Cot, &config.template)?;
                eprint!("{}", r.table("CoT"));
                serde_json::to_value(&r).expect("serializable")
            };
            if let Some(path) = &out {
                std::fs::write(
                    path,
                    serde_json::to_string_pretty(&report).expect("serializable") + "\n",
                )
                .map_err(|e| data_err(format!("{}: {e}", path.display())))?;
                manifest.outputs = vec![path.display().to_string()];
            }
            manifest.finish();
            print_json(&json!({ "report": report, "manifest": manifest }));
        }
        Command::Gradcheck { common, seeds } => {
            let first = common.seed.unwrap_or(0);
            let seed_list: Vec<u64> = (first..first + seeds.max(1)).collect();
            let mut manifest = RunManifest::begin("gradcheck", &seed_list, first, VERSION)?;
            let entries = gradient_suite(&seed_list)?;
            let softmax = softmax_row_deviation(1000, first);
            manifest.finish();
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.op.as_str()).collect();
            let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
            print_json(&json!({
                "tolerance": GRAD_TOLERANCE,
                "max_rel_error": worst,
                "softmax_max_deviation": softmax,
                "entries": entries,
                "failed": failed,
                "manifest": manifest,
            }));
            if !failed.is_empty() {
                return Err(Failure {
                    code: 4,
                    kind: "numeric",
                    message: format!("gradient check failed for {}", failed.join(", ")),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let message = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!(
                "{}",
                json!({ "error": "usage", "message": message.trim_start_matches("error: ") })
            );
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}
