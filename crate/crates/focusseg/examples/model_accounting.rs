//! Parameter and FLOP accounting for the default architecture, including the
//! masked-branch savings and the dilation/receptive-field table.
//!
//! Run with: cargo run --example model_accounting

use focusseg::focus::BranchConfig;
use focusseg::model::{build_model, count_flops, ModelConfig};
use focusseg::Result;

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let model = build_model(&cfg, 7)?;
    println!("parameters: {}", model.count_params());

    let report = count_flops(&model, cfg.input_size)?;
    print!("{}", report.render());

    // Dilation changes reach, never parameter count.
    println!("\nkernel  dilation  receptive_span  weights");
    for d in [1usize, 2, 4, 8, 16] {
        let b = BranchConfig { kernel: 7, dilation: d, topk_ratio: 0.4 };
        println!(
            "7x7     {:<9} {:<15} {}",
            d,
            b.receptive_span(),
            cfg.head_channels * cfg.head_channels * 49
        );
    }
    Ok(())
}
