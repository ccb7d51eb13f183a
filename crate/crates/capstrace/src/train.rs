//! Training: Adam optimization, batched gradient accumulation, per-epoch
//! evaluation with CSV logging, and bit-reproducible checkpoints.
//!
//! Determinism contract: given the same model, data, and [`TrainConfig`],
//! two runs produce byte-identical checkpoint and log files.  Everything
//! random flows from the config seed through salted [`SeededRng`] streams
//! (parameter init, per-epoch shuffles, per-item dropout), and every
//! reduction happens in a fixed order.

use crate::autodiff::{Tape, Var};
use crate::cten;
use crate::data::SegmentationPair;
use crate::error::{Error, Result};
use crate::loss::{
    margin_loss, pixel_cross_entropy, target_presence, total_loss, LossWeights, MarginLossConfig,
};
use crate::metrics::{
    added_holes_per_class, dice_ratio, mean_class_accuracy, mean_std, pixel_accuracy,
};
use crate::nn::Phase;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::zoo::{forward, init_params, ModelParams, ModelSpec};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { alpha: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(format!("adam alpha {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("adam {name} {b} outside [0,1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("adam epsilon {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First/second moment estimates per parameter tensor, bias-corrected.
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Result<AdamState> {
        cfg.validate()?;
        Ok(AdamState { cfg, step: 0, moments: BTreeMap::new() })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update over every parameter.  `grads` must cover exactly the
    /// parameter names; non-finite gradients abort with a diagnostic.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        if grads.len() != params.tensors.len()
            || !grads.keys().eq(params.tensors.keys())
        {
            return Err(Error::contract("gradient names do not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, p) in params.tensors.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name}: {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::divergence(format!(
                    "non-finite gradient for {name} at step {}",
                    self.step
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (g.zeros_like(), g.zeros_like()));
            let pd = p.data();
            let gd = g.data();
            let md = m.data();
            let vd = v.data();
            let mut new_p = Vec::with_capacity(pd.len());
            let mut new_m = Vec::with_capacity(pd.len());
            let mut new_v = Vec::with_capacity(pd.len());
            for i in 0..pd.len() {
                let mi = b1 * md[i] + (1.0 - b1) * gd[i];
                let vi = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                new_m.push(mi);
                new_v.push(vi);
                new_p.push(pd[i] - self.cfg.alpha * m_hat / (v_hat.sqrt() + self.cfg.epsilon));
            }
            let shape = p.shape().to_vec();
            *m = Tensor::from_vec(&shape, new_m)?;
            *v = Tensor::from_vec(&shape, new_v)?;
            *p = Tensor::from_vec(&shape, new_p)?;
        }
        Ok(())
    }
}

// ── Loss on one item ────────────────────────────────────────────────────

struct ItemLoss<'t> {
    total: Var<'t>,
    margin: Option<f64>,
    ce: f64,
}

/// Forward one image and assemble the composite loss.  Baselines without
/// class capsules train on the weighted cross-entropy term alone.
fn item_loss<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    vars: &BTreeMap<String, Var<'t>>,
    pair: &SegmentationPair,
    phase: Phase,
    dropout_rng: &mut SeededRng,
    weights: &LossWeights,
    margin_cfg: &MarginLossConfig,
) -> Result<ItemLoss<'t>> {
    let img = tape.constant(pair.image.clone());
    let out = forward(spec, vars, img, phase, dropout_rng)?;
    let ce = pixel_cross_entropy(out.logits, &pair.mask)?;
    let ce_val = ce.value().item()?;
    match out.class_activations {
        Some(act) => {
            let presence = target_presence(&pair.mask, spec.num_classes)?;
            let margin = margin_loss(act, &presence, margin_cfg)?;
            let margin_val = margin.value().item()?;
            Ok(ItemLoss {
                total: total_loss(margin, ce, weights)?,
                margin: Some(margin_val),
                ce: ce_val,
            })
        }
        None => {
            weights.validate()?;
            Ok(ItemLoss { total: ce.mul_scalar(weights.lambda2), margin: None, ce: ce_val })
        }
    }
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Aggregate segmentation quality over a dataset, reduced in item order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub items: usize,
    pub loss_total: f64,
    /// Mean margin loss; `None` for models without class capsules.
    pub loss_margin: Option<f64>,
    pub loss_ce: f64,
    pub pixel_accuracy: f64,
    pub mean_class_accuracy: f64,
    /// Per-class mean Dice over items.
    pub dice_mean: Vec<f64>,
    /// Per-class population standard deviation of Dice over items.
    pub dice_std: Vec<f64>,
    /// Per-class added-hole counts summed over items.
    pub added_holes: Vec<usize>,
}

impl EvalReport {
    /// Mean Dice over the non-background classes; the model-selection score.
    pub fn foreground_dice(&self) -> f64 {
        let fg = &self.dice_mean[1..];
        fg.iter().sum::<f64>() / fg.len() as f64
    }
}

/// Run the model over `items` in eval phase and measure everything.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams,
    items: &[SegmentationPair],
    weights: &LossWeights,
    margin_cfg: &MarginLossConfig,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::data("evaluation over zero items"));
    }
    let k = spec.num_classes;
    let mut dice_per_class: Vec<Vec<f64>> = vec![Vec::with_capacity(items.len()); k];
    let mut holes = vec![0usize; k];
    let (mut pa_sum, mut mca_sum) = (0.0f64, 0.0f64);
    let (mut total_sum, mut ce_sum, mut margin_sum) = (0.0f64, 0.0f64, 0.0f64);
    let mut saw_margin = false;
    for pair in items {
        let tape = Tape::new();
        let vars = params.leaf_vars(&tape);
        let mut rng = SeededRng::new(0); // eval-phase dropout draws nothing
        let img = tape.constant(pair.image.clone());
        let out = forward(spec, &vars, img, Phase::Eval, &mut rng)?;
        let ce = pixel_cross_entropy(out.logits, &pair.mask)?;
        let ce_val = ce.value().item()?;
        let total = match out.class_activations {
            Some(act) => {
                let presence = target_presence(&pair.mask, spec.num_classes)?;
                let margin = margin_loss(act, &presence, margin_cfg)?;
                margin_sum += margin.value().item()?;
                saw_margin = true;
                total_loss(margin, ce, weights)?
            }
            None => {
                weights.validate()?;
                ce.mul_scalar(weights.lambda2)
            }
        };
        total_sum += total.value().item()?;
        ce_sum += ce_val;
        let pred = out.logits.value().reduce_argmax(2)?;
        pa_sum += pixel_accuracy(&pred, &pair.mask)?;
        mca_sum += mean_class_accuracy(&pred, &pair.mask, k)?;
        for (c, d) in dice_per_class.iter_mut().enumerate() {
            d.push(dice_ratio(&pred, &pair.mask, c)?);
        }
        for (c, n) in added_holes_per_class(&pred, &pair.mask, k)?.iter().enumerate() {
            holes[c] += n;
        }
    }
    let n = items.len() as f64;
    let mut dice_mean = Vec::with_capacity(k);
    let mut dice_std = Vec::with_capacity(k);
    for d in &dice_per_class {
        let (m, s) = mean_std(d);
        dice_mean.push(m);
        dice_std.push(s);
    }
    Ok(EvalReport {
        items: items.len(),
        loss_total: total_sum / n,
        loss_margin: saw_margin.then_some(margin_sum / n),
        loss_ce: ce_sum / n,
        pixel_accuracy: pa_sum / n,
        mean_class_accuracy: mca_sum / n,
        dice_mean,
        dice_std,
        added_holes: holes,
    })
}

// ── CSV log ─────────────────────────────────────────────────────────────

/// One log line.  Metric fields are `None` on training rows (measuring the
/// train split every batch would double the epoch cost).
pub struct LogRow<'a> {
    pub step: u64,
    pub epoch: usize,
    pub split: &'a str,
    pub loss_total: Option<f64>,
    pub loss_margin: Option<f64>,
    pub loss_ce: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub mean_class_accuracy: Option<f64>,
    pub dice: &'a [f64],
    pub added_holes: &'a [usize],
}

fn log_header(num_classes: usize) -> String {
    let mut cols = vec![
        "step".to_string(),
        "epoch".into(),
        "split".into(),
        "loss_total".into(),
        "loss_margin".into(),
        "loss_ce".into(),
        "pixel_accuracy".into(),
        "mean_class_accuracy".into(),
    ];
    cols.extend((0..num_classes).map(|c| format!("dice_{c}")));
    cols.extend((0..num_classes).map(|c| format!("added_holes_{c}")));
    cols.join(",")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Append a row, creating the file (with header) if needed.  An existing
/// file must carry the same header; logs append, they never overwrite.
pub fn append_log_row(path: &Path, num_classes: usize, row: &LogRow<'_>) -> Result<()> {
    if !row.dice.is_empty() && row.dice.len() != num_classes {
        return Err(Error::contract(format!(
            "{} dice values for {num_classes} classes",
            row.dice.len()
        )));
    }
    if !row.added_holes.is_empty() && row.added_holes.len() != num_classes {
        return Err(Error::contract(format!(
            "{} hole counts for {num_classes} classes",
            row.added_holes.len()
        )));
    }
    let header = log_header(num_classes);
    let existing = match std::fs::read_to_string(path) {
        Ok(s) => Some(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    match existing.as_deref() {
        None | Some("") => writeln!(f, "{header}")?,
        Some(s) => {
            let first = s.lines().next().unwrap_or("");
            if first != header {
                return Err(Error::format(format!(
                    "{} logs a different schema: {first}",
                    path.display()
                )));
            }
        }
    }
    let mut cells = vec![
        row.step.to_string(),
        row.epoch.to_string(),
        row.split.to_string(),
        fmt_opt(row.loss_total),
        fmt_opt(row.loss_margin),
        fmt_opt(row.loss_ce),
        fmt_opt(row.pixel_accuracy),
        fmt_opt(row.mean_class_accuracy),
    ];
    for c in 0..num_classes {
        cells.push(row.dice.get(c).map(|d| d.to_string()).unwrap_or_default());
    }
    for c in 0..num_classes {
        cells.push(row.added_holes.get(c).map(|h| h.to_string()).unwrap_or_default());
    }
    writeln!(f, "{}", cells.join(","))?;
    Ok(())
}

/// Append an evaluation report under the given split name.
pub fn append_eval_row(
    path: &Path,
    step: u64,
    epoch: usize,
    split: &str,
    report: &EvalReport,
) -> Result<()> {
    append_log_row(
        path,
        report.dice_mean.len(),
        &LogRow {
            step,
            epoch,
            split,
            loss_total: Some(report.loss_total),
            loss_margin: report.loss_margin,
            loss_ce: Some(report.loss_ce),
            pixel_accuracy: Some(report.pixel_accuracy),
            mean_class_accuracy: Some(report.mean_class_accuracy),
            dice: &report.dice_mean,
            added_holes: &report.added_holes,
        },
    )
}

// ── Checkpoints ─────────────────────────────────────────────────────────

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub step: u64,
    pub epoch: usize,
    /// Foreground Dice on the validation split when saved (-1 before any).
    pub val_dice: f64,
    /// `(parameter name, byte offset)` into the sibling `.cten` file.
    pub tensors: Vec<(String, u64)>,
}

/// Write `<stem>.json` + `<stem>.cten` under `dir`.  Returns the JSON path.
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    spec: &ModelSpec,
    params: &ModelParams,
    step: u64,
    epoch: usize,
    val_dice: f64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let records: Vec<(&str, &Tensor)> =
        params.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let offsets = cten::write_records(&dir.join(format!("{stem}.cten")), &records)?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model: spec.clone(),
        step,
        epoch,
        val_dice,
        tensors: offsets,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("manifest: {e}")))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Read a checkpoint back from its JSON manifest path.
pub fn load_checkpoint(manifest_path: &Path) -> Result<(CheckpointManifest, ModelParams)> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::format(format!(
            "checkpoint schema {} unsupported",
            manifest.schema_version
        )));
    }
    let cten_path = manifest_path.with_extension("cten");
    let mut tensors = BTreeMap::new();
    for (name, offset) in &manifest.tensors {
        let t = cten::read_record_at(&cten_path, *offset)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate tensor {name} in checkpoint")));
        }
    }
    let params = ModelParams { tensors };
    let expected = crate::zoo::param_count(&manifest.model)?;
    if params.total_len() != expected {
        return Err(Error::format(format!(
            "checkpoint holds {} parameters, model needs {expected}",
            params.total_len()
        )));
    }
    Ok((manifest, params))
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub margin: MarginLossConfig,
    pub adam: AdamConfig,
    /// Evaluate (and checkpoint) every this many optimizer steps, in
    /// addition to the end of every epoch.
    pub eval_every: Option<u64>,
    /// Stop once validation foreground Dice reaches this value.
    pub early_stop_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            seed: 42,
            weights: LossWeights::default(),
            margin: MarginLossConfig::default(),
            adam: AdamConfig::default(),
            eval_every: None,
            early_stop_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("zero epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("zero batch size"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every must be >= 1 step"));
        }
        self.weights.validate()?;
        self.margin.validate()?;
        self.adam.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub steps: u64,
    pub best_val_dice: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub final_params: ModelParams,
}

// Salted streams: one namespace per purpose so epochs and items never
// collide across uses of the config seed.
fn shuffle_salt(epoch: usize) -> u64 {
    (1u64 << 56) | epoch as u64
}

fn dropout_salt(epoch: usize, item: usize) -> u64 {
    (2u64 << 56) | ((epoch as u64) << 28) | item as u64
}

struct CheckpointTracker {
    best_val: f64,
    last_path: PathBuf,
    best_path: PathBuf,
}

/// Evaluate the validation split, log the row, refresh `last` (and `best`
/// when improved), and return the foreground Dice.
#[allow(clippy::too_many_arguments)]
fn eval_and_checkpoint(
    spec: &ModelSpec,
    params: &ModelParams,
    val_items: &[SegmentationPair],
    cfg: &TrainConfig,
    out_dir: &Path,
    log_path: &Path,
    step: u64,
    epoch: usize,
    tracker: &mut CheckpointTracker,
) -> Result<f64> {
    let report = evaluate(spec, params, val_items, &cfg.weights, &cfg.margin)?;
    append_eval_row(log_path, step, epoch, "val", &report)?;
    let fg = report.foreground_dice();
    tracker.last_path = save_checkpoint(out_dir, "last", spec, params, step, epoch, fg)?;
    if fg > tracker.best_val {
        tracker.best_val = fg;
        tracker.best_path = save_checkpoint(out_dir, "best", spec, params, step, epoch, fg)?;
    }
    Ok(fg)
}

fn check_items(spec: &ModelSpec, items: &[SegmentationPair], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::data(format!("{what} split is empty")));
    }
    for p in items {
        if p.image.shape() != spec.input.as_slice() {
            return Err(Error::data(format!(
                "{what} image {:?}, model expects {:?}",
                p.image.shape(),
                spec.input
            )));
        }
        if p.num_classes != spec.num_classes {
            return Err(Error::data(format!(
                "{what} item has {} classes, model {}",
                p.num_classes, spec.num_classes
            )));
        }
    }
    Ok(())
}

/// Fit the model, logging to `out_dir/training_log.csv` and writing
/// `best`/`last` checkpoints under `out_dir`.  A non-finite loss or
/// gradient aborts with a divergence error; the checkpoints written so far
/// stay on disk.
pub fn train(
    spec: &ModelSpec,
    train_items: &[SegmentationPair],
    val_items: &[SegmentationPair],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_items(spec, train_items, "train")?;
    check_items(spec, val_items, "validation")?;
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("training_log.csv");

    let mut params = init_params(spec, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam)?;
    // A last checkpoint exists from the start, so a divergence in the first
    // epoch still leaves something loadable behind.
    let mut tracker = CheckpointTracker {
        best_val: -1.0,
        last_path: save_checkpoint(out_dir, "last", spec, &params, 0, 0, -1.0)?,
        best_path: save_checkpoint(out_dir, "best", spec, &params, 0, 0, -1.0)?,
    };
    let mut epochs_run = 0usize;
    let mut last_eval_step = u64::MAX;

    'epochs: for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        SeededRng::derived(cfg.seed, shuffle_salt(epoch)).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
            let (mut total_acc, mut ce_acc, mut margin_acc) = (0.0f64, 0.0f64, 0.0f64);
            let mut saw_margin = false;
            for &idx in batch {
                let pair = &train_items[idx];
                let tape = Tape::new();
                let vars = params.leaf_vars(&tape);
                let mut drop_rng = SeededRng::derived(cfg.seed, dropout_salt(epoch, idx));
                let loss = item_loss(
                    &tape,
                    spec,
                    &vars,
                    pair,
                    Phase::Train,
                    &mut drop_rng,
                    &cfg.weights,
                    &cfg.margin,
                )?;
                let lv = loss.total.value().item()?;
                if !lv.is_finite() {
                    return Err(Error::divergence(format!(
                        "loss {lv} on item {idx} at step {} (epoch {epoch}); \
                         last checkpoint: {}",
                        adam.step(),
                        tracker.last_path.display()
                    )));
                }
                total_acc += lv;
                ce_acc += loss.ce;
                if let Some(m) = loss.margin {
                    margin_acc += m;
                    saw_margin = true;
                }
                let grads = tape.backward(loss.total)?;
                for (name, var) in &vars {
                    let g = grads.wrt(*var).ok_or_else(|| {
                        Error::contract(format!("parameter {name} received no gradient"))
                    })?;
                    match grad_sum.get_mut(name) {
                        Some(acc) => *acc = acc.add(g)?,
                        None => {
                            grad_sum.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad_sum.values_mut() {
                *g = g.mul_scalar(scale);
            }
            adam.apply(&mut params, &grad_sum)?;
            let n = batch.len() as f64;
            append_log_row(
                &log_path,
                spec.num_classes,
                &LogRow {
                    step: adam.step(),
                    epoch,
                    split: "train",
                    loss_total: Some(total_acc / n),
                    loss_margin: saw_margin.then_some(margin_acc / n),
                    loss_ce: Some(ce_acc / n),
                    pixel_accuracy: None,
                    mean_class_accuracy: None,
                    dice: &[],
                    added_holes: &[],
                },
            )?;
            if cfg.eval_every.is_some_and(|n| adam.step() % n == 0) {
                let fg = eval_and_checkpoint(
                    spec,
                    &params,
                    val_items,
                    cfg,
                    out_dir,
                    &log_path,
                    adam.step(),
                    epoch,
                    &mut tracker,
                )?;
                last_eval_step = adam.step();
                if cfg.early_stop_dice.is_some_and(|t| fg >= t) {
                    break 'epochs;
                }
            }
        }

        // Epoch-end evaluation, unless the last batch already triggered one
        // at this exact step.
        if last_eval_step != adam.step() {
            let fg = eval_and_checkpoint(
                spec,
                &params,
                val_items,
                cfg,
                out_dir,
                &log_path,
                adam.step(),
                epoch,
                &mut tracker,
            )?;
            last_eval_step = adam.step();
            if cfg.early_stop_dice.is_some_and(|t| fg >= t) {
                break 'epochs;
            }
        }
    }

    Ok(TrainOutcome {
        epochs_run,
        steps: adam.step(),
        best_val_dice: tracker.best_val,
        best_checkpoint: tracker.best_path,
        last_checkpoint: tracker.last_path,
        log_path,
        final_params: params,
    })
}
