//! Command-line driver: dataset generation, training, evaluation, occlusion
//! stress testing, gradient checking, and architecture audits.
//!
//! Exit codes: 0 success, 1 verification failure (gradient or audit out of
//! tolerance), 2 usage/data/config error, 3 training divergence.  Commands
//! are batch-oriented and idempotent: byte-identical outputs for identical
//! inputs and seeds, append-only metric logs.

use capstrace::autodiff::{grad_check, Tape, GRAD_CHECK_H};
use capstrace::capsule::RoutingPolicy;
use capstrace::data::{
    digit_class_names, load_dataset, load_idx, make_noisy_mnist, make_synthetic_shapes, occlude,
    render_digit_glyphs, save_dataset, split, write_idx, DatasetManifest, GenParams,
    SegmentationPair, MANIFEST_SCHEMA_VERSION,
};
use capstrace::loss::{pixel_cross_entropy, target_presence, total_loss};
use capstrace::nn::Phase;
use capstrace::pgm::write_label_pgm;
use capstrace::rng::SeededRng;
use capstrace::tensor::Tensor;
use capstrace::train::{
    append_eval_row, evaluate, load_checkpoint, train, CheckpointManifest, EvalReport,
    TrainConfig,
};
use capstrace::zoo::{
    build_model, forward, init_params, shape_audit, LayerDesc, ModelSpec, MODEL_NAMES,
};
use capstrace::Error;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

// ── Errors and exit codes ───────────────────────────────────────────────

enum CliError {
    /// Gradient or audit outside tolerance: exit 1.
    Verification(String),
    /// Anything the library rejects: exit 2, or 3 for divergence.
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn fail(msg: impl Into<String>) -> CliError {
    CliError::Lib(Error::config(msg))
}

// ── Arguments ───────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "capstrace",
    version,
    about = "Capsule-traceback segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset directory (manifest + tensor caches).
    GenData(GenDataArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint and append a metric row.
    Eval(EvalArgs),
    /// Evaluate under center-line occlusion and dump prediction images.
    OcclusionTest(OcclusionArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Walk a model's shape laws against its reference layout.
    AuditShapes(AuditArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// noisy-mnist | synthetic-shapes | synthetic-digits
    #[arg(long)]
    kind: String,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Item count (for noisy-mnist: cap after digit filtering; default all).
    #[arg(long)]
    count: Option<usize>,
    /// Digits to keep, e.g. --digits 0,8 (noisy-mnist, synthetic-digits).
    #[arg(long, value_delimiter = ',')]
    digits: Vec<u8>,
    /// IDX image file (noisy-mnist).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (noisy-mnist).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.35)]
    threshold: f64,
    /// train,val,test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    fractions: Vec<f64>,
    /// Image height (synthetic-shapes).
    #[arg(long, default_value_t = 24)]
    height: usize,
    /// Image width (synthetic-shapes).
    #[arg(long, default_value_t = 56)]
    width: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint manifest (.json).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Metric log to append to (default: eval_log.csv next to checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct OcclusionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Horizontal lines zeroed around the image center rows.
    #[arg(long)]
    lines: usize,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for prediction images (default: occlusion-pgms-linesN
    /// next to the checkpoint).
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// toy | trcapsnet-mini
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct AuditArgs {
    /// Any cataloged model name.
    #[arg(long)]
    model: String,
}

// ── gen-data ────────────────────────────────────────────────────────────

// Salted seed streams, one per purpose, so adding a stage never shifts the
// draws of another.
const SALT_SPLIT: u64 = 3 << 56;
const SALT_NOISE: u64 = 4 << 56;
const SALT_GLYPHS: u64 = 5 << 56;
const SALT_SHAPES: u64 = 6 << 56;

fn parse_fractions(f: &[f64]) -> CliResult<(f64, f64, f64)> {
    match f {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(fail("--fractions needs exactly three values")),
    }
}

fn dataset_name(out: &Path) -> String {
    out.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn save_split(
    out: &Path,
    name: String,
    class_names: Vec<String>,
    seed: u64,
    params: GenParams,
    items: Vec<SegmentationPair>,
    fractions: (f64, f64, f64),
) -> CliResult<()> {
    let num_classes = items
        .first()
        .map(|p| p.num_classes)
        .ok_or_else(|| fail("no items generated"))?;
    let mut rng = SeededRng::derived(seed, SALT_SPLIT);
    let (tr, va, te) = split(items, fractions, &mut rng)?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        name,
        num_classes,
        class_names,
        seed,
        train_items: tr.len(),
        val_items: va.len(),
        test_items: te.len(),
        params,
    };
    save_dataset(out, &manifest, &tr, &va, &te)?;
    println!(
        "wrote {} ({} train / {} val / {} test, {} classes)",
        out.display(),
        tr.len(),
        va.len(),
        te.len(),
        num_classes
    );
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult<()> {
    let fractions = parse_fractions(&a.fractions)?;
    let name = dataset_name(&a.out);
    match a.kind.as_str() {
        "noisy-mnist" => {
            let (images, labels) = match (&a.images, &a.labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(fail("noisy-mnist needs --images and --labels IDX paths")),
            };
            // Validate inputs before any output exists.
            for p in [images, labels] {
                if !p.is_file() {
                    return Err(CliError::Lib(Error::data(format!(
                        "IDX file {} not found",
                        p.display()
                    ))));
                }
            }
            if a.digits.is_empty() {
                return Err(fail("--digits required, e.g. --digits 0,8"));
            }
            let raw = load_idx(images, labels)?;
            let mut rng = SeededRng::derived(a.seed, SALT_NOISE);
            let mut pairs = make_noisy_mnist(&raw, &a.digits, a.noise, a.threshold, &mut rng)?;
            if let Some(n) = a.count {
                if pairs.len() < n {
                    return Err(CliError::Lib(Error::data(format!(
                        "{} items after digit filtering, {n} requested",
                        pairs.len()
                    ))));
                }
                pairs.truncate(n);
            }
            save_split(
                &a.out,
                name,
                digit_class_names(&a.digits),
                a.seed,
                GenParams::NoisyMnist {
                    digits: a.digits.clone(),
                    noise_amplitude: a.noise,
                    gt_threshold: a.threshold,
                },
                pairs,
                fractions,
            )
        }
        "synthetic-shapes" => {
            let count = a.count.ok_or_else(|| fail("--count required"))?;
            let mut rng = SeededRng::derived(a.seed, SALT_SHAPES);
            let items = make_synthetic_shapes(count, a.height, a.width, &mut rng)?;
            save_split(
                &a.out,
                name,
                vec!["background".into(), "ellipse".into()],
                a.seed,
                GenParams::SyntheticShapes { height: a.height, width: a.width },
                items,
                fractions,
            )
        }
        // Rendered digit glyphs stand in for the handwritten corpus when no
        // IDX files are available.  The glyphs round-trip through IDX files
        // on disk, then flow down the ordinary noisy pipeline, so this path
        // exercises exactly what noisy-mnist does.
        "synthetic-digits" => {
            let count = a.count.ok_or_else(|| fail("--count required"))?;
            if a.digits.is_empty() {
                return Err(fail("--digits required, e.g. --digits 0,8"));
            }
            let mut rng = SeededRng::derived(a.seed, SALT_GLYPHS);
            let glyphs = render_digit_glyphs(count, &a.digits, &mut rng)?;
            std::fs::create_dir_all(&a.out)?;
            let images_path = a.out.join("images-idx3-ubyte");
            let labels_path = a.out.join("labels-idx1-ubyte");
            write_idx(&images_path, &labels_path, &glyphs)?;
            let raw = load_idx(&images_path, &labels_path)?;
            let mut noise_rng = SeededRng::derived(a.seed, SALT_NOISE);
            let pairs = make_noisy_mnist(&raw, &a.digits, a.noise, a.threshold, &mut noise_rng)?;
            save_split(
                &a.out,
                name,
                digit_class_names(&a.digits),
                a.seed,
                GenParams::SyntheticDigits {
                    digits: a.digits.clone(),
                    noise_amplitude: a.noise,
                    gt_threshold: a.threshold,
                },
                pairs,
                fractions,
            )
        }
        other => Err(fail(format!(
            "unknown kind '{other}' (noisy-mnist | synthetic-shapes | synthetic-digits)"
        ))),
    }
}

// ── train ───────────────────────────────────────────────────────────────

const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    /// Cataloged model name.
    model: String,
    /// Dataset directory holding manifest.json.
    data_dir: PathBuf,
    /// Where checkpoints and the training log go.
    out_dir: PathBuf,
    #[serde(default)]
    train: TrainConfig,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let run: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Lib(Error::config(format!("{}: {e}", a.config.display()))))?;
    if run.schema_version != RUN_SCHEMA_VERSION {
        return Err(fail(format!(
            "run config schema {} unsupported (expected {RUN_SCHEMA_VERSION})",
            run.schema_version
        )));
    }
    let (manifest, tr, va, _te) = load_dataset(&run.data_dir)?;
    let spec = build_model(&run.model, Some(manifest.num_classes))?;
    println!(
        "training {} on {} ({} train / {} val items)",
        spec.name,
        manifest.name,
        tr.len(),
        va.len()
    );
    let outcome = train(&spec, &tr, &va, &run.train, &run.out_dir)?;
    println!(
        "done: {} epochs, {} steps, best validation Dice {:.6}",
        outcome.epochs_run, outcome.steps, outcome.best_val_dice
    );
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

// ── eval / occlusion-test ───────────────────────────────────────────────

fn pick_split(
    name: &str,
    tr: Vec<SegmentationPair>,
    va: Vec<SegmentationPair>,
    te: Vec<SegmentationPair>,
) -> CliResult<Vec<SegmentationPair>> {
    match name {
        "train" => Ok(tr),
        "val" => Ok(va),
        "test" => Ok(te),
        other => Err(fail(format!("unknown split '{other}'"))),
    }
}

fn load_for_eval(
    checkpoint: &Path,
    data: &Path,
    split_name: &str,
) -> CliResult<(CheckpointManifest, capstrace::zoo::ModelParams, Vec<SegmentationPair>)> {
    let (ck, params) = load_checkpoint(checkpoint)?;
    let (dm, tr, va, te) = load_dataset(data)?;
    if dm.num_classes != ck.model.num_classes {
        return Err(CliError::Lib(Error::data(format!(
            "dataset has {} classes, checkpointed model {}",
            dm.num_classes, ck.model.num_classes
        ))));
    }
    let items = pick_split(split_name, tr, va, te)?;
    Ok((ck, params, items))
}

/// One table in the layout: PA, Dice, AH, then per-class Dice/AH pairs.
fn render_report(split: &str, r: &EvalReport) -> String {
    let k = r.dice_mean.len();
    let mut header = String::from("split   items  PA        Dice      AH");
    let mut row = format!(
        "{:<7} {:<6} {:.6}  {:.6}  {}",
        split,
        r.items,
        r.pixel_accuracy,
        r.foreground_dice(),
        r.added_holes.iter().sum::<usize>()
    );
    for c in 0..k {
        header.push_str(&format!("  dice_{c}            ah_{c}"));
        row.push_str(&format!(
            "  {:.6}±{:.6}  {}",
            r.dice_mean[c], r.dice_std[c], r.added_holes[c]
        ));
    }
    format!("{header}\n{row}\n(MCA {:.6}, mean loss {:.6})", r.mean_class_accuracy, r.loss_total)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let (ck, params, items) = load_for_eval(&a.checkpoint, &a.data, &a.split)?;
    let cfg = TrainConfig::default();
    let report = evaluate(&ck.model, &params, &items, &cfg.weights, &cfg.margin)?;
    println!("{}", render_report(&a.split, &report));
    let log = a.log.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval_log.csv")
    });
    append_eval_row(&log, ck.step, ck.epoch, &a.split, &report)?;
    println!("appended: {}", log.display());
    Ok(())
}

fn cmd_occlusion(a: OcclusionArgs) -> CliResult<()> {
    let (ck, params, items) = load_for_eval(&a.checkpoint, &a.data, &a.split)?;
    let occluded: Vec<SegmentationPair> = items
        .iter()
        .map(|p| occlude(p, a.lines, p.height() / 2, 0.0))
        .collect::<Result<_, _>>()?;
    let cfg = TrainConfig::default();
    let report = evaluate(&ck.model, &params, &occluded, &cfg.weights, &cfg.margin)?;
    println!("occlusion: {} center line(s) zeroed", a.lines);
    println!("{}", render_report(&a.split, &report));

    let dir = a.pgm_dir.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(format!("occlusion-pgms-lines{}", a.lines))
    });
    std::fs::create_dir_all(&dir)?;
    let k = ck.model.num_classes;
    for (i, pair) in occluded.iter().take(16).enumerate() {
        let tape = Tape::new();
        let vars = params.leaf_vars(&tape);
        let mut rng = SeededRng::new(0);
        let out = forward(
            &ck.model,
            &vars,
            tape.constant(pair.image.clone()),
            Phase::Eval,
            &mut rng,
        )?;
        let pred = out.logits.value().reduce_argmax(2)?;
        write_label_pgm(&dir.join(format!("item{i:02}_pred.pgm")), &pred, k)?;
    }
    println!(
        "wrote {} prediction image(s) to {}",
        occluded.len().min(16),
        dir.display()
    );
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

/// Two plain convolutions; the smallest full forward/backward pipeline.
fn toy_spec() -> ModelSpec {
    ModelSpec {
        name: "toy".into(),
        input: vec![6, 6, 1],
        num_classes: 2,
        layers: vec![
            LayerDesc::Conv {
                name: "conv1".into(),
                out_channels: 4,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                relu: true,
            },
            LayerDesc::Conv {
                name: "class_conv".into(),
                out_channels: 2,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                relu: false,
            },
        ],
        routing_iterations: 3,
        routing_policy: RoutingPolicy::Unrolled,
        traceback_depth: None,
    }
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let spec = match a.model.as_str() {
        "toy" => toy_spec(),
        "trcapsnet-mini" => build_model("trcapsnet-mini", None)?,
        other => return Err(fail(format!("gradcheck knows 'toy' and 'trcapsnet-mini', not '{other}'"))),
    };
    let params = init_params(&spec, a.seed)?;
    let mut rng = SeededRng::derived(a.seed, 1);
    let image = Tensor::uniform(&mut rng, &spec.input, 0.0, 1.0)?;
    let (h, w, k) = (spec.input[0], spec.input[1], spec.num_classes);
    let mask = Tensor::from_vec(
        &[h, w],
        (0..h * w).map(|i| ((i / 3) % k) as f64).collect(),
    )?;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| params.tensors[n].clone()).collect();
    println!(
        "checking {} over {} parameter tensors ({} values)",
        spec.name,
        names.len(),
        params.total_len()
    );
    let err = grad_check(
        |tape, vs| {
            let mut vars = params.leaf_vars(tape);
            for (n, v) in names.iter().zip(vs) {
                vars.insert(n.clone(), *v);
            }
            let mut drop_rng = SeededRng::new(0);
            let out = forward(&spec, &vars, tape.constant(image.clone()), Phase::Eval, &mut drop_rng)?;
            let ce = pixel_cross_entropy(out.logits, &mask)?;
            match out.class_activations {
                Some(act) => {
                    let presence = target_presence(&mask, k)?;
                    let margin =
                        capstrace::loss::margin_loss(act, &presence, &Default::default())?;
                    total_loss(margin, ce, &Default::default())
                }
                None => Ok(ce),
            }
        },
        &inputs,
        GRAD_CHECK_H,
    )?;
    println!("max relative gradient error: {err:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if err <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient error {err:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}"
        )))
    }
}

// ── audit-shapes ────────────────────────────────────────────────────────

fn cmd_audit(a: AuditArgs) -> CliResult<()> {
    let spec = build_model(&a.model, None).map_err(|e| {
        CliError::Lib(Error::config(format!("{e}; known models: {}", MODEL_NAMES.join(", "))))
    })?;
    let report = shape_audit(&spec);
    print!("{}", report.render());
    let corrections = report.corrections();
    println!(
        "parameters: {}; corrections applied: {}",
        capstrace::zoo::param_count(&spec)?,
        corrections.len()
    );
    if report.ok() {
        Ok(())
    } else {
        Err(CliError::Verification("shape audit found mismatches".into()))
    }
}

// ── entry ───────────────────────────────────────────────────────────────

fn init_threads() {
    if let Ok(v) = std::env::var("CAPSTRACE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                // A second build_global (e.g. in tests) is harmless: the
                // first pool wins and rayon reports an error we can ignore.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring CAPSTRACE_THREADS={v}"),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    init_threads();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::OcclusionTest(a) => cmd_occlusion(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::AuditShapes(a) => cmd_audit(a),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Verification(msg)) => {
            eprintln!("verification failure: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Divergence(_) => 3,
                _ => 2,
            };
            std::process::exit(code);
        }
    }
}
