//! Full segmentation model: compact strided encoder, region-focus block,
//! and a concat-and-refine decoder, plus parameter and FLOP accounting.

use crate::error::{Error, Result};
use crate::focus::{
    selector_mid_channels, BranchConfig, BranchParams, ContextParams, ImportanceMap,
    RegionFocusBlock, SelectorParams,
};
use crate::rng::Rng;
use crate::supervision::LossWeights;
use crate::tensor::{concat_channels, conv2d, Tensor};

/// Architecture and objective hyperparameters. Every field is serialized
/// explicitly in config files and checkpoints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_size: [usize; 2],
    /// Widths of stem (stride 2), block 1 (stride 4, low-level tap), and
    /// block 2 (stride 8, high-level features). The last width must equal
    /// `head_channels`.
    pub encoder_channels: [usize; 3],
    pub head_channels: usize,
    pub decoder_lowlevel_channels: usize,
    pub branches: Vec<BranchConfig>,
    pub loss: LossWeights,
    pub boundary_radius: usize,
    pub dice_eps: f64,
    pub use_ste: bool,
    pub residual_uses_ctx: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 5,
            input_size: [64, 64],
            encoder_channels: [16, 32, 64],
            head_channels: 64,
            decoder_lowlevel_channels: 16,
            branches: BranchConfig::default_set(),
            loss: LossWeights::default(),
            boundary_radius: 1,
            dice_eps: 1.0,
            use_ste: false,
            residual_uses_ctx: false,
        }
    }
}

/// Ratio of input resolution to the high-level feature resolution.
pub const OUTPUT_STRIDE: usize = 8;
/// Stride of the low-level decoder tap.
pub const LOWLEVEL_STRIDE: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::config(format!(
                "num_classes must lie in [2, 254], got {}",
                self.num_classes
            )));
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::config(format!(
                "input_size {:?} must be divisible by the output stride {OUTPUT_STRIDE}",
                self.input_size
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder channel widths must be positive"));
        }
        if self.encoder_channels[2] != self.head_channels {
            return Err(Error::config(format!(
                "encoder output width {} must equal head_channels {}",
                self.encoder_channels[2], self.head_channels
            )));
        }
        if self.decoder_lowlevel_channels == 0 {
            return Err(Error::config("decoder_lowlevel_channels must be positive"));
        }
        for b in &self.branches {
            b.validate()?;
        }
        self.loss.validate()?;
        if self.dice_eps <= 0.0 {
            return Err(Error::config("dice_eps must be positive"));
        }
        Ok(())
    }

    /// High-level (selector) resolution for a given input size.
    pub fn selector_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / OUTPUT_STRIDE, w / OUTPUT_STRIDE)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub block1a_w: Tensor,
    pub block1a_b: Tensor,
    pub block1b_w: Tensor,
    pub block1b_b: Tensor,
    pub block2a_w: Tensor,
    pub block2a_b: Tensor,
    pub block2b_w: Tensor,
    pub block2b_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub lowlevel_w: Tensor,
    pub lowlevel_b: Tensor,
    pub fuse1_w: Tensor,
    pub fuse1_b: Tensor,
    pub fuse2_w: Tensor,
    pub fuse2_b: Tensor,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub focus: RegionFocusBlock,
    pub decoder: DecoderParams,
}

/// Registry order of every parameter tensor: (name, weight shape). Sampling
/// at initialization and checkpoint layout both follow this order.
pub(crate) fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let [w0, w1, w2] = cfg.encoder_channels;
    let c = cfg.head_channels;
    let mid = selector_mid_channels(c);
    let dl = cfg.decoder_lowlevel_channels;
    let nc = cfg.num_classes;
    let mut layout = vec![
        ("encoder.stem.weight".into(), vec![w0, 3, 3, 3]),
        ("encoder.stem.bias".into(), vec![w0]),
        ("encoder.block1a.weight".into(), vec![w1, w0, 3, 3]),
        ("encoder.block1a.bias".into(), vec![w1]),
        ("encoder.block1b.weight".into(), vec![w1, w1, 3, 3]),
        ("encoder.block1b.bias".into(), vec![w1]),
        ("encoder.block2a.weight".into(), vec![w2, w1, 3, 3]),
        ("encoder.block2a.bias".into(), vec![w2]),
        ("encoder.block2b.weight".into(), vec![w2, w2, 3, 3]),
        ("encoder.block2b.bias".into(), vec![w2]),
        ("selector.conv.weight".into(), vec![mid, c, 3, 3]),
        ("selector.conv.bias".into(), vec![mid]),
        ("selector.proj.weight".into(), vec![1, mid, 1, 1]),
        ("selector.proj.bias".into(), vec![1]),
        ("context.proj.weight".into(), vec![c, c, 1, 1]),
        ("context.proj.bias".into(), vec![c]),
    ];
    for (i, b) in cfg.branches.iter().enumerate() {
        layout.push((format!("branch{i}.conv.weight"), vec![c, c, b.kernel, b.kernel]));
        layout.push((format!("branch{i}.conv.bias"), vec![c]));
    }
    layout.extend([
        ("decoder.lowlevel.weight".into(), vec![dl, w1, 1, 1]),
        ("decoder.lowlevel.bias".into(), vec![dl]),
        ("decoder.fuse1.weight".into(), vec![c, c + dl, 3, 3]),
        ("decoder.fuse1.bias".into(), vec![c]),
        ("decoder.fuse2.weight".into(), vec![c, c, 3, 3]),
        ("decoder.fuse2.bias".into(), vec![c]),
        ("decoder.classifier.weight".into(), vec![nc, c, 1, 1]),
        ("decoder.classifier.bias".into(), vec![nc]),
    ]);
    layout
}

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases, drawn from the
/// seeded generator in registry order. Deterministic per (config, seed).
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut values = Vec::new();
    for (name, shape) in param_layout(cfg) {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; numel]
        } else {
            // fan_in = C_in * k * k for a [C_out, C_in, k, k] conv weight.
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            (0..numel).map(|_| rng.normal_scaled(std)).collect()
        };
        values.push(Tensor::param(&shape, data)?);
    }
    Model::from_params(cfg.clone(), values)
}

impl Model {
    /// Rebuilds a model from parameter tensors in registry order.
    pub fn from_params(cfg: ModelConfig, values: Vec<Tensor>) -> Result<Model> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if values.len() != layout.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                values.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&values) {
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("length checked above");
        let encoder = EncoderParams {
            stem_w: next(),
            stem_b: next(),
            block1a_w: next(),
            block1a_b: next(),
            block1b_w: next(),
            block1b_b: next(),
            block2a_w: next(),
            block2a_b: next(),
            block2b_w: next(),
            block2b_b: next(),
        };
        let selector = SelectorParams {
            conv_w: next(),
            conv_b: next(),
            proj_w: next(),
            proj_b: next(),
        };
        let context = ContextParams { proj_w: next(), proj_b: next() };
        let branches = cfg
            .branches
            .iter()
            .cloned()
            .map(|b| (b, BranchParams { weight: next(), bias: next() }))
            .collect();
        let decoder = DecoderParams {
            lowlevel_w: next(),
            lowlevel_b: next(),
            fuse1_w: next(),
            fuse1_b: next(),
            fuse2_w: next(),
            fuse2_b: next(),
            classifier_w: next(),
            classifier_b: next(),
        };
        let focus = RegionFocusBlock {
            selector,
            context,
            branches,
            use_ste: cfg.use_ste,
            residual_uses_ctx: cfg.residual_uses_ctx,
        };
        Ok(Model { cfg, encoder, focus, decoder })
    }

    /// Parameter tensors in registry order (the inverse of `from_params`).
    pub fn params(&self) -> Vec<Tensor> {
        let e = &self.encoder;
        let s = &self.focus.selector;
        let c = &self.focus.context;
        let d = &self.decoder;
        let mut out = vec![
            e.stem_w.clone(),
            e.stem_b.clone(),
            e.block1a_w.clone(),
            e.block1a_b.clone(),
            e.block1b_w.clone(),
            e.block1b_b.clone(),
            e.block2a_w.clone(),
            e.block2a_b.clone(),
            e.block2b_w.clone(),
            e.block2b_b.clone(),
            s.conv_w.clone(),
            s.conv_b.clone(),
            s.proj_w.clone(),
            s.proj_b.clone(),
            c.proj_w.clone(),
            c.proj_b.clone(),
        ];
        for (_, p) in &self.focus.branches {
            out.push(p.weight.clone());
            out.push(p.bias.clone());
        }
        out.extend([
            d.lowlevel_w.clone(),
            d.lowlevel_b.clone(),
            d.fuse1_w.clone(),
            d.fuse1_b.clone(),
            d.fuse2_w.clone(),
            d.fuse2_b.clone(),
            d.classifier_w.clone(),
            d.classifier_b.clone(),
        ]);
        out
    }

    /// Named parameter registry; every tensor appears exactly once.
    pub fn registry(&self) -> Vec<(String, Tensor)> {
        param_layout(&self.cfg)
            .into_iter()
            .map(|(name, _)| name)
            .zip(self.params())
            .collect()
    }

    /// Encoder pass: returns (low-level features at stride 4, high-level
    /// features at stride 8).
    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::contract(format!("expected a 3-channel image, got {c}")));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::contract(format!(
                "image dims ({h},{w}) must be divisible by {OUTPUT_STRIDE}"
            )));
        }
        let e = &self.encoder;
        let x = conv2d(image, &e.stem_w, &e.stem_b, 2, 1)?.relu();
        let x = conv2d(&x, &e.block1a_w, &e.block1a_b, 2, 1)?.relu();
        let f_low = conv2d(&x, &e.block1b_w, &e.block1b_b, 1, 1)?.relu();
        let x = conv2d(&f_low, &e.block2a_w, &e.block2a_b, 2, 1)?.relu();
        let f = conv2d(&x, &e.block2b_w, &e.block2b_b, 1, 1)?.relu();
        Ok((f_low, f))
    }

    /// Decoder pass: upsample the aggregated features, fuse with the reduced
    /// low-level tap, refine, classify, and return logits at input resolution.
    pub fn decode(&self, f_agg: &Tensor, f_low: &Tensor) -> Result<Tensor> {
        let d = &self.decoder;
        let up = f_agg.bilinear_upsample(2)?;
        let low = conv2d(f_low, &d.lowlevel_w, &d.lowlevel_b, 1, 1)?;
        let fused = concat_channels(&[up, low])?;
        let x = conv2d(&fused, &d.fuse1_w, &d.fuse1_b, 1, 1)?.relu();
        let x = conv2d(&x, &d.fuse2_w, &d.fuse2_b, 1, 1)?.relu();
        let logits = conv2d(&x, &d.classifier_w, &d.classifier_b, 1, 1)?;
        logits.bilinear_upsample(LOWLEVEL_STRIDE)
    }

    /// Full forward pass: logits at input resolution plus the importance map
    /// (needed by the auxiliary selector loss).
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, ImportanceMap)> {
        let (f_low, f) = self.encode(image)?;
        let (f_agg, scores) = self.focus.forward(&f)?;
        let logits = self.decode(&f_agg, &f_low)?;
        Ok((logits, scores))
    }

    /// Total scalar parameter count over the registry.
    pub fn count_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

// ---- FLOP accounting ----

/// One multiply-add counted as 2 FLOPs.
pub fn conv_flops(kernel: usize, c_in: usize, c_out: usize, out_h: usize, out_w: usize) -> u64 {
    2 * (kernel * kernel * c_in * c_out * out_h * out_w) as u64
}

#[derive(Debug, Clone)]
pub struct LayerFlops {
    pub name: String,
    pub dense: u64,
    /// Present for masked branches: cost when only the k selected output
    /// positions are computed, at full kernel tap cost.
    pub sparse: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub total_dense: u64,
    /// Dense everywhere except the masked branches, which run sparsely.
    pub total_masked: u64,
}

impl FlopReport {
    pub fn render(&self) -> String {
        let mut out = String::from("layer                        dense_flops     sparse_flops\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{:<28} {:>14} {:>16}\n",
                l.name,
                l.dense,
                l.sparse.map_or("-".to_string(), |s| s.to_string())
            ));
        }
        out.push_str(&format!(
            "total dense {} | with masked branches {} ({:.4}x)\n",
            self.total_dense,
            self.total_masked,
            self.total_masked as f64 / self.total_dense as f64
        ));
        out
    }
}

/// Convolution FLOPs layer by layer for a given input size. Masked branches
/// additionally report sparse FLOPs = dense * k/(H'*W'), exact by counting
/// selected output positions at full tap cost.
pub fn count_flops(model: &Model, input_size: [usize; 2]) -> Result<FlopReport> {
    let cfg = &model.cfg;
    let [h, w] = input_size;
    if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::contract(format!(
            "input size {input_size:?} must be divisible by {OUTPUT_STRIDE}"
        )));
    }
    let [w0, w1, w2] = cfg.encoder_channels;
    let c = cfg.head_channels;
    let mid = selector_mid_channels(c);
    let dl = cfg.decoder_lowlevel_channels;
    let (h2, w2d) = (h / 2, w / 2);
    let (h4, w4) = (h / 4, w / 4);
    let (h8, w8) = (h / 8, w / 8);
    let hw8 = h8 * w8;

    let mut layers = vec![
        LayerFlops { name: "encoder.stem".into(), dense: conv_flops(3, 3, w0, h2, w2d), sparse: None },
        LayerFlops { name: "encoder.block1a".into(), dense: conv_flops(3, w0, w1, h4, w4), sparse: None },
        LayerFlops { name: "encoder.block1b".into(), dense: conv_flops(3, w1, w1, h4, w4), sparse: None },
        LayerFlops { name: "encoder.block2a".into(), dense: conv_flops(3, w1, w2, h8, w8), sparse: None },
        LayerFlops { name: "encoder.block2b".into(), dense: conv_flops(3, w2, w2, h8, w8), sparse: None },
        LayerFlops { name: "selector.conv".into(), dense: conv_flops(3, c, mid, h8, w8), sparse: None },
        LayerFlops { name: "selector.proj".into(), dense: conv_flops(1, mid, 1, h8, w8), sparse: None },
        LayerFlops { name: "context.proj".into(), dense: conv_flops(1, c, c, 1, 1), sparse: None },
    ];
    for (i, b) in cfg.branches.iter().enumerate() {
        let dense = conv_flops(b.kernel, c, c, h8, w8);
        let k = crate::focus::k_for_ratio(b.topk_ratio, hw8);
        let sparse = conv_flops(b.kernel, c, c, 1, 1) * k as u64;
        layers.push(LayerFlops { name: format!("branch{i}.conv"), dense, sparse: Some(sparse) });
    }
    layers.extend([
        LayerFlops { name: "decoder.lowlevel".into(), dense: conv_flops(1, w1, dl, h4, w4), sparse: None },
        LayerFlops { name: "decoder.fuse1".into(), dense: conv_flops(3, c + dl, c, h4, w4), sparse: None },
        LayerFlops { name: "decoder.fuse2".into(), dense: conv_flops(3, c, c, h4, w4), sparse: None },
        LayerFlops {
            name: "decoder.classifier".into(),
            dense: conv_flops(1, c, cfg.num_classes, h4, w4),
            sparse: None,
        },
    ]);
    let total_dense = layers.iter().map(|l| l.dense).sum();
    let total_masked = layers.iter().map(|l| l.sparse.unwrap_or(l.dense)).sum();
    Ok(FlopReport { layers, total_dense, total_masked })
}
