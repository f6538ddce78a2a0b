//! The selection mechanism step by step: importance map, Top-K masks at the
//! per-branch ratios, masked multi-scale convolutions, residual aggregation.
//!
//! Run with: cargo run --example region_focus_block

use focusseg::focus::{
    aggregate, apply_mask, branch_forward, global_context, selector_forward, selector_mid_channels,
    topk_mask, BranchConfig, BranchParams, ContextParams, SelectorParams,
};
use focusseg::rng::Rng;
use focusseg::tensor::Tensor;
use focusseg::Result;

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.uniform(-scale, scale)).collect())
}

fn main() -> Result<()> {
    let mut rng = Rng::seed_from_u64(42);
    let (c, h, w) = (8usize, 8usize, 8usize);
    let features = random_tensor(&mut rng, &[c, h, w], 1.0)?;

    let mid = selector_mid_channels(c);
    let selector = SelectorParams {
        conv_w: random_tensor(&mut rng, &[mid, c, 3, 3], 0.4)?,
        conv_b: random_tensor(&mut rng, &[mid], 0.1)?,
        proj_w: random_tensor(&mut rng, &[1, mid, 1, 1], 0.4)?,
        proj_b: random_tensor(&mut rng, &[1], 0.1)?,
    };
    let scores = selector_forward(&features, &selector)?;
    println!(
        "importance map: shape {:?}, min {:.3}, max {:.3}",
        scores.scores().shape(),
        scores.scores().data().iter().cloned().fold(f64::INFINITY, f64::min),
        scores.scores().data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );

    // Each branch keeps a different fraction of the 64 locations.
    for cfg in BranchConfig::default_set() {
        let mask = topk_mask(&scores, cfg.topk_ratio)?;
        println!(
            "kernel {}x{} dilation {:>2}: ratio {:.2} -> k = {:>2}, receptive span {} px",
            cfg.kernel,
            cfg.kernel,
            cfg.dilation,
            cfg.topk_ratio,
            mask.k(),
            cfg.receptive_span(),
        );
    }

    // Context injection preserves shape; the offset is constant per channel.
    let context = ContextParams {
        proj_w: random_tensor(&mut rng, &[c, c, 1, 1], 0.2)?,
        proj_b: random_tensor(&mut rng, &[c], 0.05)?,
    };
    let f_ctx = global_context(&features, &context)?;
    println!("context-enriched features: {:?}", f_ctx.shape());

    // One full branch, then the residual aggregation over all of them.
    let mut outputs = Vec::new();
    for cfg in BranchConfig::default_set() {
        let params = BranchParams {
            weight: random_tensor(&mut rng, &[c, c, cfg.kernel, cfg.kernel], 0.1)?,
            bias: random_tensor(&mut rng, &[c], 0.02)?,
        };
        outputs.push(branch_forward(&f_ctx, &scores, &cfg, &params, false)?);
    }
    let f_agg = aggregate(&features, &outputs)?;
    println!("aggregated features: {:?}", f_agg.shape());

    // Hard masking really is hard: masked positions contribute exactly zero.
    let mask = topk_mask(&scores, 0.25)?;
    let masked = apply_mask(&f_ctx, &mask)?;
    let zeros = masked
        .data()
        .iter()
        .enumerate()
        .filter(|(i, &v)| mask.mask().data()[i % (h * w)] == 0.0 && v == 0.0)
        .count();
    println!(
        "masked feature: {} zero entries across unselected positions ({} selected of {})",
        zeros,
        mask.k(),
        h * w
    );
    Ok(())
}
