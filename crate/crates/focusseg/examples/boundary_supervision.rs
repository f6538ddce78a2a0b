//! Boundary targets and the three-term objective on a generated scene.
//!
//! Run with: cargo run --example boundary_supervision

use focusseg::data::gen_synthetic;
use focusseg::focus::ImportanceMap;
use focusseg::rng::Rng;
use focusseg::supervision::{boundary_map, ce_loss, dice_loss, selector_bce, total_loss, LossWeights};
use focusseg::tensor::Tensor;
use focusseg::Result;

fn main() -> Result<()> {
    let scene = gen_synthetic(11, 1, [64, 64], 5)?.remove(0);
    let (h, w) = scene.labels.dims();

    // Full-resolution boundary, then pooled to the selector's 8x8 grid.
    let full = boundary_map(&scene.labels, 1, (h, w))?;
    let pooled = boundary_map(&scene.labels, 1, (h / 8, w / 8))?;
    let frac = |b: &focusseg::supervision::BoundaryMap| {
        b.values().iter().filter(|&&v| v != 0).count() as f64 / b.values().len() as f64
    };
    println!("boundary fraction: {:.3} at {}x{}, {:.3} at 8x8", frac(&full), h, w, frac(&pooled));

    // Random logits and a random importance map stand in for a model.
    let mut rng = Rng::seed_from_u64(3);
    let logits = Tensor::param(&[5, h, w], (0..5 * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let scores = ImportanceMap::new(Tensor::from_vec(
        &[1, h / 8, w / 8],
        (0..h * w / 64).map(|_| rng.uniform(0.05, 0.95)).collect(),
    )?)?;

    println!("ce    = {:.6}", ce_loss(&logits, &scene.labels)?.item());
    println!("dice  = {:.6}", dice_loss(&logits, &scene.labels, 1.0)?.item());
    println!("bce   = {:.6}", selector_bce(&scores, &pooled)?.item());

    let weights = LossWeights::default();
    let losses = total_loss(&logits, &scene.labels, &scores, &pooled, &weights, 1.0)?;
    println!(
        "total = {:.6} (ce + {} * dice + {} * sel)",
        losses.total.item(),
        weights.lambda1,
        weights.lambda2
    );

    // One backward call fills every reachable gradient.
    losses.total.backward()?;
    let g = logits.grad().expect("logits gradient");
    println!("logit gradient L1 norm = {:.6}", g.iter().map(|v| v.abs()).sum::<f64>());
    Ok(())
}
