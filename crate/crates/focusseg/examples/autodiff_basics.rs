//! Tour of the tensor engine: building a small differentiable program,
//! running backward, and verifying the gradients against finite differences.
//!
//! Run with: cargo run --example autodiff_basics

use focusseg::tensor::{conv2d, grad_check, GradCheckOptions, Tensor};
use focusseg::Result;

fn main() -> Result<()> {
    // A toy program: y = sum(sigmoid(conv(x, w) + b)).
    let x = Tensor::param(&[1, 5, 5], (0..25).map(|i| (i as f64 - 12.0) / 10.0).collect())?;
    let w = Tensor::param(&[2, 1, 3, 3], (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) / 8.0).collect())?;
    let b = Tensor::param(&[2], vec![0.1, -0.2])?;

    let out = conv2d(&x, &w, &b, 1, 1)?;
    println!("conv output shape: {:?}", out.shape());

    let loss = out.sigmoid().sum_all();
    println!("loss = {:.6}", loss.item());

    loss.backward()?;
    let gw = w.grad().expect("weight gradient populated");
    println!("first weight gradients: {:?}", &gw[..4]);

    // The same program under a finite-difference check, every coordinate.
    let report = grad_check(
        |p| Ok(conv2d(&p[0], &p[1], &p[2], 1, 2)?.sigmoid().sum_all()),
        &[
            ("input".to_string(), x.detach()),
            ("weight".to_string(), w.detach()),
            ("bias".to_string(), b.detach()),
        ],
        &GradCheckOptions { max_coords_per_group: None, ..Default::default() },
    )?;
    print!("{}", report.render());
    assert!(report.passed());

    // Gradients accumulate across fan-out: loss = sum(y) + sum(x) with y = x.
    let v = Tensor::param(&[3], vec![1.0, 2.0, 3.0])?;
    let twice = v.sum_all().add(&v.sum_all())?;
    twice.backward()?;
    println!("fan-out gradient (expect all 2): {:?}", v.grad().unwrap());
    Ok(())
}
