//! Selective region focus: importance scoring, Top-K hard masking, global
//! context injection, and multi-scale masked reasoning branches with residual
//! aggregation.
//!
//! One selector produces a single importance map; every branch derives its own
//! binary mask from that map at its own Top-K ratio. The binarization is not
//! differentiable, so masks are constants in backward and the selector trains
//! through its auxiliary boundary loss. A straight-through estimator can be
//! switched on per block for experimentation, but defaults off.

use crate::error::{Error, Result};
use crate::tensor::{conv2d, mul_mask, Tensor};

/// Per-location importance scores in (0,1), shape [1,H',W'].
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    scores: Tensor,
}

impl ImportanceMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        let (c, _, _) = scores.dims3()?;
        if c != 1 {
            return Err(Error::contract(format!(
                "importance map must have one channel, got {:?}",
                scores.shape()
            )));
        }
        if !scores.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::contract(
                "importance map values must lie in [0,1]".to_string(),
            ));
        }
        Ok(ImportanceMap { scores })
    }

    /// Wraps a sigmoid output without range validation. On finite inputs the
    /// sigmoid lands in (0,1) by construction; non-finite values are allowed
    /// to flow onward so a numerical blowup surfaces as a non-finite loss
    /// (where training aborts with diagnostics) instead of a shape error.
    pub(crate) fn from_sigmoid(scores: Tensor) -> Self {
        ImportanceMap { scores }
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.scores.dims3().expect("validated at construction");
        (h, w)
    }
}

/// Binary Top-K selection over spatial locations, shape [1,H',W'].
///
/// Holds exactly `k = max(1, round(ratio * H' * W'))` ones. The mask tensor is
/// a constant: no gradient ever flows through its values.
#[derive(Debug, Clone)]
pub struct SelectionMask {
    mask: Tensor,
    ratio: f64,
    k: usize,
}

impl SelectionMask {
    /// Wraps an existing binary `[1,H,W]` tensor (tests and mask round-trips).
    pub fn from_raw(mask: Tensor, ratio: f64) -> Result<Self> {
        let (c, _, _) = mask.dims3()?;
        if c != 1 {
            return Err(Error::contract(format!(
                "selection mask must have one channel, got {:?}",
                mask.shape()
            )));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::contract("selection mask values must be 0 or 1".to_string()));
        }
        let k = mask.data().iter().filter(|&&v| v == 1.0).count();
        let mask = if mask.is_leaf() && !mask.requires_grad() { mask } else { mask.detach() };
        Ok(SelectionMask { mask, ratio, k })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.mask.dims3().expect("validated at construction");
        (h, w)
    }
}

/// One multi-scale reasoning branch: kernel size, dilation, Top-K ratio.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BranchConfig {
    pub kernel: usize,
    pub dilation: usize,
    pub topk_ratio: f64,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("branch kernel must be odd, got {}", self.kernel)));
        }
        if self.dilation == 0 {
            return Err(Error::config("branch dilation must be positive"));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(Error::config(format!(
                "branch topk_ratio must lie in (0,1], got {}",
                self.topk_ratio
            )));
        }
        Ok(())
    }

    /// Receptive-field span in pixels: 1 + (k-1) * dilation.
    pub fn receptive_span(&self) -> usize {
        1 + (self.kernel - 1) * self.dilation
    }

    /// The default branch set: kernels 1/3/5/7 keeping 10/20/30/40 percent,
    /// with dilation raising the large kernels' reach.
    pub fn default_set() -> Vec<BranchConfig> {
        vec![
            BranchConfig { kernel: 1, dilation: 1, topk_ratio: 0.10 },
            BranchConfig { kernel: 3, dilation: 1, topk_ratio: 0.20 },
            BranchConfig { kernel: 5, dilation: 2, topk_ratio: 0.30 },
            BranchConfig { kernel: 7, dilation: 16, topk_ratio: 0.40 },
        ]
    }
}

/// Selector parameters: 3x3 conv C -> ceil(C/4) with relu, then a 1x1
/// projection to a single channel.
#[derive(Debug, Clone)]
pub struct SelectorParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

/// Global-context projection: one 1x1 conv C -> C applied to the pooled vector.
#[derive(Debug, Clone)]
pub struct ContextParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

/// One branch's k x k conv C -> C.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn selector_mid_channels(c: usize) -> usize {
    c.div_ceil(4)
}

/// Importance map S = sigmoid(proj(relu(conv(F)))).
pub fn selector_forward(features: &Tensor, params: &SelectorParams) -> Result<ImportanceMap> {
    let hidden = conv2d(features, &params.conv_w, &params.conv_b, 1, 1)?.relu();
    let logits = conv2d(&hidden, &params.proj_w, &params.proj_b, 1, 1)?;
    Ok(ImportanceMap::from_sigmoid(logits.sigmoid()))
}

/// Number of selected locations for a ratio over n positions: round half up,
/// floored at one so every branch always keeps at least one location.
pub fn k_for_ratio(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Binary mask keeping the `k` highest-scoring locations. Ties break toward
/// the lower row-major flat index; selection is deterministic.
pub fn topk_mask(scores: &ImportanceMap, ratio: f64) -> Result<SelectionMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("topk ratio must lie in (0,1], got {ratio}")));
    }
    let (h, w) = scores.spatial();
    let n = h * w;
    let k = k_for_ratio(ratio, n);
    let data = scores.scores().data();
    let mut order: Vec<u32> = (0..n as u32).collect();
    // total_cmp keeps selection deterministic even if scores went non-finite
    // upstream (the loss check aborts such runs; this must not panic first).
    let by_rank = |&a: &u32, &b: &u32| {
        data[b as usize]
            .total_cmp(&data[a as usize])
            .then(a.cmp(&b))
    };
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let mut mask = vec![0.0; n];
    for &idx in &order[..k] {
        mask[idx as usize] = 1.0;
    }
    Ok(SelectionMask {
        mask: Tensor::from_vec(&[1, h, w], mask)?,
        ratio,
        k,
    })
}

/// F ⊙ M with the mask broadcast over channels. Backward passes M ⊙ grad to
/// the features and nothing to the mask.
pub fn apply_mask(features: &Tensor, mask: &SelectionMask) -> Result<Tensor> {
    let (_, h, w) = features.dims3()?;
    if (h, w) != mask.spatial() {
        return Err(Error::contract(format!(
            "mask spatial {:?} does not match features {:?}",
            mask.mask().shape(),
            features.shape()
        )));
    }
    features.mul(mask.mask())
}

/// F + broadcast(proj(GAP(F))): global semantic context added back onto every
/// location.
pub fn global_context(features: &Tensor, params: &ContextParams) -> Result<Tensor> {
    let pooled = features.global_avg_pool()?;
    let g = conv2d(&pooled, &params.proj_w, &params.proj_b, 1, 1)?;
    features.add(&g)
}

/// One reasoning branch: mask the contextual features at this branch's ratio,
/// then convolve at its kernel/dilation. Shape is preserved.
pub fn branch_forward(
    f_ctx: &Tensor,
    scores: &ImportanceMap,
    cfg: &BranchConfig,
    params: &BranchParams,
    ste: bool,
) -> Result<Tensor> {
    cfg.validate()?;
    let mask = topk_mask(scores, cfg.topk_ratio)?;
    let masked = mul_mask(f_ctx, mask.mask(), scores.scores(), ste)?;
    conv2d(&masked, &params.weight, &params.bias, 1, cfg.dilation)
}

/// Residual aggregation: F + sum of branch outputs.
pub fn aggregate(residual: &Tensor, branch_outputs: &[Tensor]) -> Result<Tensor> {
    let mut acc = residual.clone();
    for out in branch_outputs {
        if out.shape() != residual.shape() {
            return Err(Error::contract(format!(
                "aggregate shape mismatch: {:?} vs {:?}",
                out.shape(),
                residual.shape()
            )));
        }
        acc = acc.add(out)?;
    }
    Ok(acc)
}

/// The full region-focus block over high-level features.
#[derive(Debug, Clone)]
pub struct RegionFocusBlock {
    pub selector: SelectorParams,
    pub context: ContextParams,
    pub branches: Vec<(BranchConfig, BranchParams)>,
    /// Straight-through gradients from masked products into the selector.
    pub use_ste: bool,
    /// Use the contextual features as the residual term instead of the raw
    /// input features.
    pub residual_uses_ctx: bool,
}

impl RegionFocusBlock {
    /// Returns the aggregated features and the importance map (the map also
    /// feeds the auxiliary selector loss).
    pub fn forward(&self, features: &Tensor) -> Result<(Tensor, ImportanceMap)> {
        let scores = selector_forward(features, &self.selector)?;
        let f_ctx = global_context(features, &self.context)?;
        let outputs: Vec<Tensor> = self
            .branches
            .iter()
            .map(|(cfg, params)| branch_forward(&f_ctx, &scores, cfg, params, self.use_ste))
            .collect::<Result<_>>()?;
        let residual = if self.residual_uses_ctx { &f_ctx } else { features };
        let agg = aggregate(residual, &outputs)?;
        Ok((agg, scores))
    }
}
