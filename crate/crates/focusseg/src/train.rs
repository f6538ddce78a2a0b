//! Training and evaluation loops: seeded shuffling and augmentation, batched
//! gradient computation (parallel across samples, deterministic reduction),
//! AdamW with the polynomial schedule, per-iteration logging, checkpoints,
//! and the dilation ablation driver.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::SyntheticScene;
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, ConfusionAccumulator, Metrics};
use crate::checkpoint::save_checkpoint;
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::{adamw_step, poly_lr, AdamWParams, OptimState};
use crate::rng::Rng;
use crate::supervision::{boundary_map, total_loss, LabelMap, IGNORE_LABEL};
use crate::tensor::{backward_pass, Tensor};

const TRAIN_STREAM_SALT: u64 = 0x747261696e;
const VAL_DATA_SALT: u64 = 0x76616c5f64617461;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, scale_min: 0.75, scale_max: 1.25 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub optimizer: AdamWParams,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Checkpoint every N epochs (plus one at the end) when an output
    /// directory is given.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            epochs: 40,
            batch_size: 4,
            base_lr: 5e-4,
            lr_power: 0.9,
            optimizer: AdamWParams::default(),
            train_scenes: 256,
            val_scenes: 64,
            checkpoint_every: 10,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.lr_power <= 0.0 || self.lr_power.is_nan() {
            return Err(Error::config(format!("lr_power must be positive, got {}", self.lr_power)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob)
            || !(a.scale_min > 0.0 && a.scale_min <= a.scale_max)
        {
            return Err(Error::config(format!("invalid augmentation config: {a:?}")));
        }
        self.optimizer.validate()
    }
}

/// Seeded train/val splits from the synthetic generator; the validation seed
/// is derived so the two sets never overlap.
pub fn default_datasets(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Vec<SyntheticScene>, Vec<SyntheticScene>)> {
    let train = crate::data::gen_synthetic(
        train_cfg.seed,
        train_cfg.train_scenes,
        model_cfg.input_size,
        model_cfg.num_classes,
    )?;
    let val = crate::data::gen_synthetic(
        train_cfg.seed ^ VAL_DATA_SALT,
        train_cfg.val_scenes,
        model_cfg.input_size,
        model_cfg.num_classes,
    )?;
    Ok((train, val))
}

// ---- augmentation ----

fn resize_image_bilinear(image: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (c, h, w) = image.dims3().expect("image is rank 3");
    if (nh, nw) == (h, w) {
        return image.detach();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let data = image.data();
    let mut out = vec![0.0; c * nh * nw];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..nh {
            let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = src_y - y0 as f64;
            for ox in 0..nw {
                let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = src_x - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[ch * nh * nw + oy * nw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[c, nh, nw], out).expect("consistent dims")
}

fn resize_labels_nearest(labels: &LabelMap, nh: usize, nw: usize) -> LabelMap {
    let (h, w) = labels.dims();
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = vec![0u8; nh * nw];
    for oy in 0..nh {
        let src_y = (((oy as f64 + 0.5) * sy) as usize).min(h - 1);
        for ox in 0..nw {
            let src_x = (((ox as f64 + 0.5) * sx) as usize).min(w - 1);
            out[oy * nw + ox] = labels.get(src_y, src_x);
        }
    }
    LabelMap::new(nh, nw, out).expect("consistent dims")
}

fn flip_horizontal(image: &Tensor, labels: &LabelMap) -> (Tensor, LabelMap) {
    let (c, h, w) = image.dims3().expect("image is rank 3");
    let data = image.data();
    let mut img = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                img[ch * h * w + y * w + x] = data[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    let mut lbl = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            lbl[y * w + x] = labels.get(y, w - 1 - x);
        }
    }
    (
        Tensor::from_vec(&[c, h, w], img).expect("consistent dims"),
        LabelMap::new(h, w, lbl).expect("consistent dims"),
    )
}

/// Horizontal flip, random scale with nearest-neighbor labels, then crop or
/// pad back to the target size. Exactly four draws are consumed per call
/// (flip, scale, row offset, column offset) so the stream stays aligned.
pub fn augment_scene(
    scene: &SyntheticScene,
    rng: &mut Rng,
    target: [usize; 2],
    cfg: &AugmentConfig,
) -> (Tensor, LabelMap) {
    let flip = rng.bernoulli(cfg.flip_prob);
    let scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    let off_y_unit = rng.next_f64();
    let off_x_unit = rng.next_f64();

    let (mut image, mut labels) = if flip {
        flip_horizontal(&scene.image, &scene.labels)
    } else {
        (scene.image.detach(), scene.labels.clone())
    };

    let (h, w) = labels.dims();
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    image = resize_image_bilinear(&image, nh, nw);
    labels = resize_labels_nearest(&labels, nh, nw);

    let [th, tw] = target;
    let pick = |unit: f64, range: usize| ((unit * (range + 1) as f64) as usize).min(range);

    // Crop when larger, pad (image with 0, labels with ignore) when smaller.
    let src_y = if nh > th { pick(off_y_unit, nh - th) } else { 0 };
    let src_x = if nw > tw { pick(off_x_unit, nw - tw) } else { 0 };
    let dst_y = if nh < th { pick(off_y_unit, th - nh) } else { 0 };
    let dst_x = if nw < tw { pick(off_x_unit, tw - nw) } else { 0 };
    let copy_h = nh.min(th);
    let copy_w = nw.min(tw);

    let mut out_img = vec![0.0; 3 * th * tw];
    let mut out_lbl = vec![IGNORE_LABEL; th * tw];
    let img_data = image.data();
    for ch in 0..3 {
        for y in 0..copy_h {
            for x in 0..copy_w {
                out_img[ch * th * tw + (dst_y + y) * tw + (dst_x + x)] =
                    img_data[ch * nh * nw + (src_y + y) * nw + (src_x + x)];
            }
        }
    }
    for y in 0..copy_h {
        for x in 0..copy_w {
            out_lbl[(dst_y + y) * tw + (dst_x + x)] = labels.get(src_y + y, src_x + x);
        }
    }
    (
        Tensor::from_vec(&[3, th, tw], out_img).expect("consistent dims"),
        LabelMap::new(th, tw, out_lbl).expect("consistent dims"),
    )
}

// ---- training ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub selector: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub selector: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub log: Vec<IterRecord>,
    pub epoch_losses: Vec<EpochLosses>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

/// One record per iteration, tab-separated: iter, lr, L_total, L_CE, L_Dice,
/// L_sel.
pub fn render_log(records: &[IterRecord]) -> String {
    let mut out = String::from("# iter\tlr\tL_total\tL_CE\tL_Dice\tL_sel\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\n",
            r.iter, r.lr, r.total, r.ce, r.dice, r.selector
        ));
    }
    out
}

struct SampleOutcome {
    total: f64,
    ce: f64,
    dice: f64,
    selector: f64,
    grads: crate::tensor::GradMap,
}

fn sample_pass(
    model: &Model,
    image: &Tensor,
    labels: &LabelMap,
) -> Result<SampleOutcome> {
    let (h, w) = labels.dims();
    let boundary = boundary_map(
        labels,
        model.cfg.boundary_radius,
        model.cfg.selector_dims(h, w),
    )?;
    let (logits, scores) = model.forward(image)?;
    let losses = total_loss(
        &logits,
        labels,
        &scores,
        &boundary,
        &model.cfg.loss,
        model.cfg.dice_eps,
    )?;
    let grads = backward_pass(&losses.total)?;
    Ok(SampleOutcome {
        total: losses.total.item(),
        ce: losses.ce.item(),
        dice: losses.dice.item(),
        selector: losses.selector.item(),
        grads,
    })
}

/// Trains from scratch on the given scenes. Bitwise reproducible for a fixed
/// (config, seed): data order, augmentation, initialization, and updates all
/// come from seeded streams, and batch gradients reduce in sample order.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[SyntheticScene],
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let model = build_model(model_cfg, train_cfg.seed)?;
    let mut params = model.params();
    let mut state = OptimState::new(&params);
    let mut loop_rng = Rng::seed_from_u64(train_cfg.seed ^ TRAIN_STREAM_SALT);

    let batches_per_epoch = train_set.len().div_ceil(train_cfg.batch_size);
    let total_iters = train_cfg.epochs * batches_per_epoch;
    let mut log = Vec::with_capacity(total_iters);
    let mut model = model;
    let mut iter = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        loop_rng.shuffle(&mut order);

        for batch_indices in order.chunks(train_cfg.batch_size) {
            // Augmentation draws happen on one stream, in batch order.
            let augmented: Vec<(Tensor, LabelMap)> = batch_indices
                .iter()
                .map(|&i| {
                    augment_scene(
                        &train_set[i],
                        &mut loop_rng,
                        model_cfg.input_size,
                        &train_cfg.augment,
                    )
                })
                .collect();

            let outcomes: Vec<SampleOutcome> = augmented
                .par_iter()
                .map(|(image, labels)| sample_pass(&model, image, labels))
                .collect::<Result<_>>()?;

            let n = outcomes.len() as f64;
            let mean =
                |f: fn(&SampleOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
            let total = mean(|o| o.total);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value: total,
                    iteration: iter,
                    seed: train_cfg.seed,
                    batch: batch_indices.to_vec(),
                });
            }

            // Fixed-order reduction: parameters in registry order, samples in
            // batch order.
            let grads: Vec<Option<Vec<f64>>> = params
                .iter()
                .map(|p| {
                    let id = p.id();
                    let mut acc: Option<Vec<f64>> = None;
                    for o in &outcomes {
                        if let Some(g) = o.grads.get(&id) {
                            match acc.as_mut() {
                                Some(a) => {
                                    for (av, gv) in a.iter_mut().zip(g) {
                                        *av += gv;
                                    }
                                }
                                None => acc = Some(g.clone()),
                            }
                        }
                    }
                    acc.map(|mut a| {
                        for v in &mut a {
                            *v /= n;
                        }
                        a
                    })
                })
                .collect();

            let lr = poly_lr(iter, total_iters, train_cfg.base_lr, train_cfg.lr_power);
            adamw_step(&mut params, &grads, &mut state, lr, &train_cfg.optimizer)?;
            model = Model::from_params(model_cfg.clone(), params.clone())?;

            log.push(IterRecord {
                iter,
                lr,
                total,
                ce: mean(|o| o.ce),
                dice: mean(|o| o.dice),
                selector: mean(|o| o.selector),
            });
            iter += 1;
        }

        if let Some(dir) = out_dir {
            if (epoch + 1) % train_cfg.checkpoint_every == 0 && epoch + 1 != train_cfg.epochs {
                save_checkpoint(
                    &dir.join(format!("ckpt_epoch_{:04}.ckpt", epoch + 1)),
                    &model,
                    train_cfg,
                )?;
            }
        }
    }

    let epoch_losses = epoch_means(&log, batches_per_epoch);
    let (checkpoint_path, log_path) = match out_dir {
        Some(dir) => {
            let ckpt = dir.join("ckpt_final.ckpt");
            save_checkpoint(&ckpt, &model, train_cfg)?;
            let log_file = dir.join("train_log.tsv");
            std::fs::write(&log_file, render_log(&log))?;
            (Some(ckpt), Some(log_file))
        }
        None => (None, None),
    };

    Ok(TrainResult { model, log, epoch_losses, checkpoint_path, log_path })
}

fn epoch_means(log: &[IterRecord], batches_per_epoch: usize) -> Vec<EpochLosses> {
    log.chunks(batches_per_epoch)
        .enumerate()
        .map(|(epoch, chunk)| {
            let n = chunk.len() as f64;
            EpochLosses {
                epoch,
                total: chunk.iter().map(|r| r.total).sum::<f64>() / n,
                ce: chunk.iter().map(|r| r.ce).sum::<f64>() / n,
                dice: chunk.iter().map(|r| r.dice).sum::<f64>() / n,
                selector: chunk.iter().map(|r| r.selector).sum::<f64>() / n,
            }
        })
        .collect()
}

// ---- evaluation ----

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub scenes: usize,
    pub num_classes: usize,
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut out = String::from("class   IoU\n");
        for (c, iou) in self.metrics.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("{c:<7} {v:.4}\n")),
                None => out.push_str(&format!("{c:<7} (absent)\n")),
            }
        }
        out.push_str(&format!(
            "mIoU {:.4} | boundary-band IoU {:.4} | pixel acc {:.4} | scenes {}\n",
            self.metrics.miou, self.metrics.boundary_miou, self.metrics.pixel_accuracy, self.scenes
        ));
        out
    }

    /// Structured-text (TOML) form of the same numbers.
    pub fn render_toml(&self) -> String {
        #[derive(serde::Serialize)]
        struct Doc<'a> {
            scenes: usize,
            num_classes: usize,
            metrics: &'a Metrics,
        }
        toml::to_string_pretty(&Doc {
            scenes: self.scenes,
            num_classes: self.num_classes,
            metrics: &self.metrics,
        })
        .expect("metrics serialize cleanly")
    }
}

/// Single-scale evaluation: argmax over logits, confusion accumulation over
/// the whole set.
pub fn evaluate(model: &Model, scenes: &[SyntheticScene]) -> Result<EvalReport> {
    let num_classes = model.cfg.num_classes;
    let partials: Vec<ConfusionAccumulator> = scenes
        .par_iter()
        .map(|scene| {
            let (logits, _) = model.forward(&scene.image)?;
            let pred = argmax_labels(&logits)?;
            let mut acc = ConfusionAccumulator::new(num_classes);
            acc.add(&pred, &scene.labels)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut acc = ConfusionAccumulator::new(num_classes);
    for p in &partials {
        acc.merge(p);
    }
    Ok(EvalReport { metrics: acc.metrics(), scenes: scenes.len(), num_classes })
}

// ---- dilation ablation ----

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub rate: usize,
    pub receptive_span: usize,
    pub miou: f64,
}

/// Retrains the model once per dilation rate of the 7x7 branch, everything
/// else (seed, data, schedule) held fixed, and evaluates each on the same
/// validation set.
pub fn ablate_dilation(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    rates: &[usize],
    train_set: &[SyntheticScene],
    val_set: &[SyntheticScene],
) -> Result<Vec<AblationRow>> {
    if rates.is_empty() {
        return Err(Error::config("ablation needs at least one dilation rate"));
    }
    let branch_idx = model_cfg
        .branches
        .iter()
        .position(|b| b.kernel == 7)
        .ok_or_else(|| Error::config("ablation varies the 7x7 branch, but none is configured"))?;
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        if rate == 0 {
            return Err(Error::config("dilation rate must be positive"));
        }
        let mut cfg = model_cfg.clone();
        cfg.branches[branch_idx].dilation = rate;
        let result = train(&cfg, train_cfg, train_set, None)?;
        let eval = evaluate(&result.model, val_set)?;
        rows.push(AblationRow {
            rate,
            receptive_span: cfg.branches[branch_idx].receptive_span(),
            miou: eval.metrics.miou,
        });
    }
    Ok(rows)
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("dilation  span_px  mIoU\n");
    for r in rows {
        out.push_str(&format!("{:<9} {:<8} {:.4}\n", r.rate, r.receptive_span, r.miou));
    }
    out
}

pub fn render_ablation_toml(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "[[ablation]]\ndilation = {}\nreceptive_span = {}\nmiou = {}\n\n",
            r.rate, r.receptive_span, r.miou
        ));
    }
    out
}
