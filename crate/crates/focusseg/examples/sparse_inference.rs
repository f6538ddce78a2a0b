//! The sparse execution engine: masked convolutions computed only at selected
//! positions, checked against the dense composition, with FLOP and wall-time
//! accounting per branch.
//!
//! Run with: cargo run --release --example sparse_inference

use focusseg::focus::{topk_mask, BranchConfig, ImportanceMap};
use focusseg::rng::Rng;
use focusseg::sparse::{
    bench_branches, dense_masked_reference, index_from_mask, masked_conv2d, render_bench_tsv,
};
use focusseg::tensor::Tensor;
use focusseg::Result;

fn main() -> Result<()> {
    // Equivalence on one branch: sparse output == dense(masked input) ⊙ mask.
    let mut rng = Rng::seed_from_u64(5);
    let (c, h, w) = (8usize, 16usize, 16usize);
    let input = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let weight = Tensor::from_vec(&[c, c, 3, 3], (0..c * c * 9).map(|_| rng.uniform(-0.3, 0.3)).collect())?;
    let bias = Tensor::from_vec(&[c], vec![0.05; c])?;
    let scores = ImportanceMap::new(Tensor::from_vec(
        &[1, h, w],
        (0..h * w).map(|_| rng.uniform(0.01, 0.99)).collect(),
    )?)?;
    let mask = topk_mask(&scores, 0.3)?;
    let idx = index_from_mask(&mask);

    let (sparse_out, report) = masked_conv2d(&input, &weight, &bias, &idx, 2, 1)?;
    let reference = dense_masked_reference(&input, &weight, &bias, &mask, 2)?;
    let max_dev = sparse_out
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!(
        "selected {} of {} positions | dense {} FLOPs, sparse {} FLOPs (ratio {:.4}) | max deviation {:.2e}",
        idx.k(),
        h * w,
        report.dense_flops,
        report.sparse_flops,
        report.sparse_flops as f64 / report.dense_flops as f64,
        max_dev
    );
    assert!(max_dev < 1e-9);

    // The four default branches benchmarked on a 64x64 grid.
    let rows = bench_branches(&BranchConfig::default_set(), 32, [64, 64], 5, 7)?;
    print!("{}", render_bench_tsv(&rows));
    Ok(())
}
