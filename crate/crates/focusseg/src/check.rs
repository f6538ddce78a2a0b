//! Full-model gradient verification: finite differences through the entire
//! forward and loss composition, one report row per parameter group.

use crate::data::gen_synthetic;
use crate::error::Result;
use crate::model::{build_model, Model, ModelConfig};
use crate::supervision::{boundary_map, total_loss};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport};

/// Checks d(total_loss ∘ forward)/d(theta) for every parameter group against
/// central finite differences on one seeded synthetic scene.
///
/// The loss weights come from the config; with the defaults every group —
/// encoder, selector, context, branches, decoder — receives gradient and is
/// verified.
pub fn model_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = build_model(cfg, seed)?;
    let scene = gen_synthetic(seed ^ 0x6772616463686b, 1, cfg.input_size, cfg.num_classes)?
        .into_iter()
        .next()
        .expect("one scene requested");
    let (h, w) = scene.labels.dims();
    let boundary = boundary_map(&scene.labels, cfg.boundary_radius, cfg.selector_dims(h, w))?;

    let registry = model.registry();
    let cfg = cfg.clone();
    let image = scene.image;
    let labels = scene.labels;
    grad_check(
        move |params| {
            let model = Model::from_params(cfg.clone(), params.to_vec())?;
            let (logits, scores) = model.forward(&image)?;
            let losses = total_loss(&logits, &labels, &scores, &boundary, &cfg.loss, cfg.dice_eps)?;
            Ok(losses.total)
        },
        &registry,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes_end_to_end() {
        let cfg = ModelConfig {
            num_classes: 3,
            input_size: [16, 16],
            encoder_channels: [2, 3, 4],
            head_channels: 4,
            decoder_lowlevel_channels: 2,
            ..ModelConfig::default()
        };
        let opts = GradCheckOptions { max_coords_per_group: Some(4), ..Default::default() };
        let report = model_grad_check(&cfg, 7, &opts).unwrap();
        assert!(report.passed(), "{}", report.render());
        // Every registry group is present in the report.
        assert_eq!(report.groups.len(), build_model(&cfg, 7).unwrap().registry().len());
    }

    #[test]
    fn tampered_analytic_gradients_fail() {
        let cfg = ModelConfig {
            num_classes: 3,
            input_size: [16, 16],
            encoder_channels: [2, 3, 4],
            head_channels: 4,
            decoder_lowlevel_channels: 2,
            ..ModelConfig::default()
        };
        let opts = GradCheckOptions {
            max_coords_per_group: Some(2),
            tamper: 0.05,
            ..Default::default()
        };
        let report = model_grad_check(&cfg, 7, &opts).unwrap();
        assert!(!report.passed());
    }
}
