//! Boundary-map construction and the training objective: pixel cross-entropy,
//! soft multi-class Dice, and the auxiliary selector BCE against the boundary
//! map.

use crate::error::{Error, Result};
use crate::focus::ImportanceMap;
use crate::tensor::Tensor;

/// Label value marking pixels excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Integer class map `[H,W]`; values in `[0, C-1]` or `IGNORE_LABEL`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::contract(format!(
                "label buffer length {} does not match {h}x{w}",
                labels.len()
            )));
        }
        Ok(LabelMap { h, w, labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// Every non-ignore value must name a class below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        if num_classes > IGNORE_LABEL as usize {
            return Err(Error::config(format!(
                "at most {IGNORE_LABEL} classes are representable, got {num_classes}"
            )));
        }
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(bad) => Err(Error::contract(format!(
                "label {bad} is outside [0, {num_classes})"
            ))),
            None => Ok(()),
        }
    }
}

/// Binary boundary target at selector resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryMap {
    h: usize,
    w: usize,
    b: Vec<u8>,
}

impl BoundaryMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[u8] {
        &self.b
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.b[y * self.w + x] != 0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.h, self.w], self.b.iter().map(|&v| v as f64).collect())
            .expect("dims validated at construction")
    }
}

/// Weights of the auxiliary loss terms in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // The Dice term at full weight; the selector term at a conventional
        // auxiliary-head weight. Both are configurable.
        LossWeights { lambda1: 1.0, lambda2: 0.4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda2.is_finite())
            || self.lambda1 < 0.0
            || self.lambda2 < 0.0
        {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Marks label transitions: a pixel is boundary when any pixel within the
/// given Chebyshev radius carries a different non-ignore label. Ignore pixels
/// are never marked. The full-resolution map is max-pooled down to
/// `target` (selector resolution).
pub fn boundary_map(
    labels: &LabelMap,
    radius: usize,
    target: (usize, usize),
) -> Result<BoundaryMap> {
    let (h, w) = labels.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::config(format!(
            "target {target:?} must evenly divide label dims ({h},{w})"
        )));
    }
    let full = boundary_scan(labels, radius);
    let (fy, fx) = (h / th, w / tw);
    let mut pooled = vec![0u8; th * tw];
    for ty in 0..th {
        for tx in 0..tw {
            let mut m = 0u8;
            'window: for y in ty * fy..(ty + 1) * fy {
                for x in tx * fx..(tx + 1) * fx {
                    if full[y * w + x] != 0 {
                        m = 1;
                        break 'window;
                    }
                }
            }
            pooled[ty * tw + tx] = m;
        }
    }
    Ok(BoundaryMap { h: th, w: tw, b: pooled })
}

fn boundary_scan(labels: &LabelMap, radius: usize) -> Vec<u8> {
    let (h, w) = labels.dims();
    let r = radius as isize;
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let center = labels.get(y, x);
            if center == IGNORE_LABEL {
                continue;
            }
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let other = labels.get(ny as usize, nx as usize);
                    if other != IGNORE_LABEL && other != center {
                        out[y * w + x] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn check_label_shapes(logits: &Tensor, labels: &LabelMap) -> Result<(usize, usize, usize)> {
    let (c, h, w) = logits.dims3()?;
    if labels.dims() != (h, w) {
        return Err(Error::contract(format!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.shape()
        )));
    }
    labels.validate_classes(c)?;
    Ok((c, h, w))
}

fn one_hot_tensor(labels: &LabelMap, c: usize) -> Tensor {
    let (h, w) = labels.dims();
    let hw = h * w;
    let mut data = vec![0.0; c * hw];
    for (p, &l) in labels.labels().iter().enumerate() {
        if l != IGNORE_LABEL {
            data[l as usize * hw + p] = 1.0;
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("shape consistent by construction")
}

fn valid_mask_tensor(labels: &LabelMap) -> (Tensor, usize) {
    let (h, w) = labels.dims();
    let mut data = vec![0.0; h * w];
    let mut count = 0usize;
    for (p, &l) in labels.labels().iter().enumerate() {
        if l != IGNORE_LABEL {
            data[p] = 1.0;
            count += 1;
        }
    }
    (
        Tensor::from_vec(&[1, h, w], data).expect("shape consistent by construction"),
        count,
    )
}

/// Mean over non-ignore pixels of `-log_softmax(logits)[label]`. All pixels
/// ignored yields a constant zero with zero gradient.
pub fn ce_loss(logits: &Tensor, labels: &LabelMap) -> Result<Tensor> {
    let (c, _, _) = check_label_shapes(logits, labels)?;
    let (_, valid) = valid_mask_tensor(labels);
    if valid == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let picked = logits.log_softmax()?.mul(&one_hot_tensor(labels, c))?;
    Ok(picked.sum_all().scale(-1.0 / valid as f64))
}

/// Soft multi-class Dice on softmax probabilities with ignore masking:
/// 1 - (1/C) * sum_c (2*sum p_c*y_c + eps) / (sum p_c + sum y_c + eps).
pub fn dice_loss(logits: &Tensor, labels: &LabelMap, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::config(format!("dice eps must be positive, got {eps}")));
    }
    let (c, _, _) = check_label_shapes(logits, labels)?;
    let probs = logits.log_softmax()?.exp();
    let (valid, _) = valid_mask_tensor(labels);
    let pv = probs.mul(&valid)?;
    let y = one_hot_tensor(labels, c);

    let inter = pv.mul(&y)?.sum_spatial()?;
    let psum = pv.sum_spatial()?;
    let ysum = y.sum_spatial()?;
    let eps_t = Tensor::full(&[c, 1, 1], eps);

    let num = inter.scale(2.0).add(&eps_t)?;
    let den = psum.add(&ysum)?.add(&eps_t)?;
    let mean_coeff = num.div(&den)?.sum_all().scale(1.0 / c as f64);
    Tensor::scalar(1.0).sub(&mean_coeff)
}

/// Mean binary cross-entropy of the importance map against the boundary map,
/// with scores clamped away from 0 and 1 (sigmoid saturates in f64).
pub fn selector_bce(scores: &ImportanceMap, boundary: &BoundaryMap) -> Result<Tensor> {
    let (h, w) = scores.spatial();
    if boundary.dims() != (h, w) {
        return Err(Error::contract(format!(
            "boundary map {:?} does not match importance map ({h},{w})",
            boundary.dims()
        )));
    }
    let s = scores.scores().clamp(1e-7, 1.0 - 1e-7);
    let b = boundary.to_tensor();
    let one = Tensor::full(&[1, h, w], 1.0);
    let pos = b.mul(&s.log())?;
    let neg = one.sub(&b)?.mul(&one.sub(&s)?.log())?;
    Ok(pos.add(&neg)?.sum_all().scale(-1.0 / (h * w) as f64))
}

/// Every term of the combined objective, plus the weighted total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
    pub selector: Tensor,
}

/// L = L_CE + lambda1 * L_Dice + lambda2 * L_sel.
///
/// Zero-weighted terms are still evaluated for reporting but are left out of
/// the total's graph, so they contribute no gradient at all — with lambda2 = 0
/// nothing reaches the selector parameters.
pub fn total_loss(
    logits: &Tensor,
    labels: &LabelMap,
    scores: &ImportanceMap,
    boundary: &BoundaryMap,
    weights: &LossWeights,
    dice_eps: f64,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let ce = ce_loss(logits, labels)?;
    let dice = dice_loss(logits, labels, dice_eps)?;
    let selector = selector_bce(scores, boundary)?;
    let mut total = ce.clone();
    if weights.lambda1 != 0.0 {
        total = total.add(&dice.scale(weights.lambda1))?;
    }
    if weights.lambda2 != 0.0 {
        total = total.add(&selector.scale(weights.lambda2))?;
    }
    Ok(LossBreakdown { total, ce, dice, selector })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn labels_from(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, v).unwrap()
    }

    #[test]
    fn uniform_labels_have_no_boundary() {
        let labels = labels_from(6, 6, vec![2; 36]);
        let b = boundary_map(&labels, 1, (6, 6)).unwrap();
        assert!(b.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn vertical_split_marks_inner_columns() {
        let mut v = vec![0u8; 16];
        for y in 0..4 {
            for x in 2..4 {
                v[y * 4 + x] = 1;
            }
        }
        let b = boundary_map(&labels_from(4, 4, v), 1, (4, 4)).unwrap();
        for y in 0..4 {
            assert!(!b.get(y, 0));
            assert!(b.get(y, 1));
            assert!(b.get(y, 2));
            assert!(!b.get(y, 3));
        }
    }

    #[test]
    fn ignore_pixels_never_marked_and_never_trigger() {
        let mut v = vec![0u8; 9];
        v[4] = IGNORE_LABEL;
        let b = boundary_map(&labels_from(3, 3, v), 1, (3, 3)).unwrap();
        assert!(b.values().iter().all(|&x| x == 0));
    }

    #[test]
    fn pooled_boundary_stays_binary() {
        let mut rng = Rng::seed_from_u64(40);
        let v: Vec<u8> = (0..64).map(|_| rng.uniform_usize(0, 2) as u8).collect();
        let b = boundary_map(&labels_from(8, 8, v), 1, (2, 2)).unwrap();
        assert!(b.values().iter().all(|&x| x == 0 || x == 1));
    }

    #[test]
    fn boundary_rejects_non_divisible_target() {
        let labels = labels_from(6, 6, vec![0; 36]);
        assert!(boundary_map(&labels, 1, (4, 4)).is_err());
        assert!(boundary_map(&labels, 1, (0, 3)).is_err());
    }

    #[test]
    fn boundary_matches_double_loop_oracle() {
        let mut rng = Rng::seed_from_u64(41);
        for _ in 0..100 {
            let h = rng.uniform_usize(2, 12);
            let w = rng.uniform_usize(2, 12);
            let radius = rng.uniform_usize(0, 2);
            let v: Vec<u8> = (0..h * w)
                .map(|_| {
                    if rng.bernoulli(0.05) {
                        IGNORE_LABEL
                    } else {
                        rng.uniform_usize(0, 2) as u8
                    }
                })
                .collect();
            let labels = labels_from(h, w, v.clone());
            let got = boundary_map(&labels, radius, (h, w)).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let mut expect = false;
                    let c = v[y * w + x];
                    if c != IGNORE_LABEL {
                        for ny in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                            for nx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                                let o = v[ny * w + nx];
                                if o != IGNORE_LABEL && o != c {
                                    expect = true;
                                }
                            }
                        }
                    }
                    assert_eq!(got.get(y, x), expect, "({y},{x}) radius {radius}");
                }
            }
        }
    }

    #[test]
    fn ce_uniform_logits_is_log_c() {
        let logits = Tensor::zeros(&[4, 2, 2]);
        let labels = labels_from(2, 2, vec![0, 1, 2, 3]);
        let loss = ce_loss(&logits, &labels).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_perfect_prediction_tends_to_zero() {
        let labels = labels_from(1, 2, vec![0, 1]);
        for margin in [5.0, 20.0, 60.0] {
            let logits =
                Tensor::from_vec(&[2, 1, 2], vec![margin, 0.0, 0.0, margin]).unwrap();
            let loss = ce_loss(&logits, &labels).unwrap().item();
            assert!(loss < (-margin).exp() * 3.0 + 1e-12, "margin {margin}: {loss}");
        }
    }

    #[test]
    fn ce_two_pixel_case_matches_brute_force() {
        let logits =
            Tensor::from_vec(&[3, 1, 2], vec![0.3, -1.2, 0.7, 0.4, -0.1, 2.0]).unwrap();
        let labels = labels_from(1, 2, vec![2, 0]);
        let loss = ce_loss(&logits, &labels).unwrap().item();

        // Brute force: direct per-pixel softmax.
        let mut expect = 0.0;
        for p in 0..2 {
            let vals: Vec<f64> = (0..3).map(|c| logits.data()[c * 2 + p]).collect();
            let z: f64 = vals.iter().map(|v| v.exp()).sum();
            let label = labels.get(0, p) as usize;
            expect += -(vals[label].exp() / z).ln();
        }
        expect /= 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_all_ignored_is_zero_with_zero_gradient() {
        let logits = Tensor::param(&[3, 2, 2], vec![0.5; 12]).unwrap();
        let labels = labels_from(2, 2, vec![IGNORE_LABEL; 4]);
        let loss = ce_loss(&logits, &labels).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(logits.grad().is_none());
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[3, 1, 1]);
        let labels = labels_from(1, 1, vec![3]);
        assert!(ce_loss(&logits, &labels).is_err());
    }

    #[test]
    fn dice_perfect_match_is_zero() {
        // Saturated logits make softmax effectively one-hot.
        let labels = labels_from(2, 2, vec![0, 1, 1, 0]);
        let mut data = vec![-400.0; 2 * 4];
        for (p, &l) in labels.labels().iter().enumerate() {
            data[l as usize * 4 + p] = 400.0;
        }
        let logits = Tensor::from_vec(&[2, 2, 2], data).unwrap();
        let loss = dice_loss(&logits, &labels, 1.0).unwrap().item();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn dice_single_pixel_uniform_matches_direct_arithmetic() {
        // C=2, one pixel labelled 0, uniform probabilities, eps=1:
        //   class 0: (2*0.5 + 1) / (0.5 + 1 + 1) = 0.8
        //   class 1: (0 + 1) / (0.5 + 0 + 1)     = 2/3
        //   loss = 1 - (0.8 + 2/3)/2 = 4/15
        let logits = Tensor::zeros(&[2, 1, 1]);
        let labels = labels_from(1, 1, vec![0]);
        let loss = dice_loss(&logits, &labels, 1.0).unwrap().item();
        let expect = 1.0 - (0.8 + 2.0 / 3.0) / 2.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn dice_stays_in_unit_interval() {
        let mut rng = Rng::seed_from_u64(42);
        for _ in 0..50 {
            let c = rng.uniform_usize(2, 5);
            let h = rng.uniform_usize(1, 6);
            let w = rng.uniform_usize(1, 6);
            let logits = Tensor::from_vec(
                &[c, h, w],
                (0..c * h * w).map(|_| rng.uniform(-3.0, 3.0)).collect(),
            )
            .unwrap();
            let labels = labels_from(
                h,
                w,
                (0..h * w)
                    .map(|_| {
                        if rng.bernoulli(0.1) {
                            IGNORE_LABEL
                        } else {
                            rng.uniform_usize(0, c - 1) as u8
                        }
                    })
                    .collect(),
            );
            let loss = dice_loss(&logits, &labels, 1.0).unwrap().item();
            assert!((0.0..1.0).contains(&loss), "{loss}");
        }
    }

    fn importance_from(values: Vec<f64>, h: usize, w: usize) -> ImportanceMap {
        ImportanceMap::new(Tensor::from_vec(&[1, h, w], values).unwrap()).unwrap()
    }

    #[test]
    fn bce_at_half_is_ln_two_regardless_of_target() {
        let s = importance_from(vec![0.5; 4], 2, 2);
        for pattern in [vec![0u8; 4], vec![1u8; 4], vec![0, 1, 1, 0]] {
            let b = BoundaryMap { h: 2, w: 2, b: pattern };
            let loss = selector_bce(&s, &b).unwrap().item();
            assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_vanishes_as_scores_approach_target() {
        let b = BoundaryMap { h: 2, w: 2, b: vec![1, 0, 0, 1] };
        for delta in [1e-3, 1e-5, 1e-7] {
            let s = importance_from(
                b.values().iter().map(|&v| if v == 1 { 1.0 - delta } else { delta }).collect(),
                2,
                2,
            );
            let loss = selector_bce(&s, &b).unwrap().item();
            assert!(loss < 2.0 * delta.max(1e-7) * 20.0, "delta {delta}: {loss}");
        }
    }

    #[test]
    fn bce_two_by_two_matches_brute_force() {
        let values = vec![0.2, 0.8, 0.65, 0.05];
        let target = vec![0u8, 1, 1, 0];
        let s = importance_from(values.clone(), 2, 2);
        let b = BoundaryMap { h: 2, w: 2, b: target.clone() };
        let loss = selector_bce(&s, &b).unwrap().item();
        let mut expect = 0.0;
        for (sv, bv) in values.iter().zip(&target) {
            let bv = *bv as f64;
            expect += -(bv * sv.ln() + (1.0 - bv) * (1.0 - sv).ln());
        }
        expect /= 4.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    fn toy_problem() -> (Tensor, LabelMap, ImportanceMap, BoundaryMap) {
        let mut rng = Rng::seed_from_u64(50);
        let (c, h, w) = (3, 4, 4);
        let logits = Tensor::from_vec(
            &[c, h, w],
            (0..c * h * w).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let labels =
            labels_from(h, w, (0..h * w).map(|_| rng.uniform_usize(0, c - 1) as u8).collect());
        let scores =
            importance_from((0..h * w).map(|_| rng.uniform(0.05, 0.95)).collect(), h, w);
        let boundary = boundary_map(&labels, 1, (h, w)).unwrap();
        (logits, labels, scores, boundary)
    }

    #[test]
    fn zero_weights_reduce_total_to_ce() {
        let (logits, labels, scores, boundary) = toy_problem();
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let out = total_loss(&logits, &labels, &scores, &boundary, &w, 1.0).unwrap();
        assert_eq!(out.total.item(), out.ce.item());
    }

    #[test]
    fn unit_weights_sum_components() {
        let (logits, labels, scores, boundary) = toy_problem();
        let w = LossWeights { lambda1: 1.0, lambda2: 1.0 };
        let out = total_loss(&logits, &labels, &scores, &boundary, &w, 1.0).unwrap();
        let expect = out.ce.item() + out.dice.item() + out.selector.item();
        assert!((out.total.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn default_weights_give_finite_positive_loss() {
        let (logits, labels, scores, boundary) = toy_problem();
        let out =
            total_loss(&logits, &labels, &scores, &boundary, &LossWeights::default(), 1.0)
                .unwrap();
        assert!(out.total.item().is_finite());
        assert!(out.total.item() > 0.0);
    }

    #[test]
    fn losses_respect_sign_and_range_bounds() {
        let (logits, labels, scores, boundary) = toy_problem();
        assert!(ce_loss(&logits, &labels).unwrap().item() >= 0.0);
        let d = dice_loss(&logits, &labels, 1.0).unwrap().item();
        assert!((0.0..1.0).contains(&d));
        assert!(selector_bce(&scores, &boundary).unwrap().item() >= 0.0);
    }

    #[test]
    fn class_permutation_leaves_ce_and_dice_unchanged() {
        let (logits, labels, _, _) = toy_problem();
        let perm = [2u8, 0, 1]; // class c -> perm[c]
        let (c, h, w) = (3usize, 4usize, 4usize);
        let mut permuted_logits = vec![0.0; c * h * w];
        for (ch, &dst) in perm.iter().enumerate() {
            let dst = dst as usize;
            permuted_logits[dst * h * w..(dst + 1) * h * w]
                .copy_from_slice(&logits.data()[ch * h * w..(ch + 1) * h * w]);
        }
        let plogits = Tensor::from_vec(&[c, h, w], permuted_logits).unwrap();
        let plabels = labels_from(
            h,
            w,
            labels.labels().iter().map(|&l| if l == IGNORE_LABEL { l } else { perm[l as usize] }).collect(),
        );
        let ce_a = ce_loss(&logits, &labels).unwrap().item();
        let ce_b = ce_loss(&plogits, &plabels).unwrap().item();
        assert!((ce_a - ce_b).abs() < 1e-12);
        let d_a = dice_loss(&logits, &labels, 1.0).unwrap().item();
        let d_b = dice_loss(&plogits, &plabels, 1.0).unwrap().item();
        assert!((d_a - d_b).abs() < 1e-12);
    }

    #[test]
    fn bce_through_selector_weights_passes_gradcheck() {
        use crate::focus::{selector_forward, selector_mid_channels, SelectorParams};
        use crate::tensor::{grad_check, GradCheckOptions};
        let mut rng = Rng::seed_from_u64(52);
        let (c, h, w) = (4usize, 4usize, 4usize);
        let features = Tensor::from_vec(
            &[c, h, w],
            (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let target = BoundaryMap {
            h,
            w,
            b: (0..h * w).map(|_| rng.bernoulli(0.3) as u8).collect(),
        };
        let mid = selector_mid_channels(c);
        let mut draw = |n: usize| (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect::<Vec<_>>();
        let params = [
            ("selector.conv.weight".to_string(), Tensor::from_vec(&[mid, c, 3, 3], draw(mid * c * 9)).unwrap()),
            ("selector.conv.bias".to_string(), Tensor::from_vec(&[mid], draw(mid)).unwrap()),
            ("selector.proj.weight".to_string(), Tensor::from_vec(&[1, mid, 1, 1], draw(mid)).unwrap()),
            ("selector.proj.bias".to_string(), Tensor::from_vec(&[1], draw(1)).unwrap()),
        ];
        let report = grad_check(
            |p| {
                let sel = SelectorParams {
                    conv_w: p[0].clone(),
                    conv_b: p[1].clone(),
                    proj_w: p[2].clone(),
                    proj_b: p[3].clone(),
                };
                selector_bce(&selector_forward(&features, &sel)?, &target)
            },
            &params,
            &GradCheckOptions { max_coords_per_group: None, ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn lambda2_zero_sends_no_gradient_to_selector_inputs() {
        let mut rng = Rng::seed_from_u64(51);
        let (c, h, w) = (3, 4, 4);
        let logit_param = Tensor::param(
            &[c, h, w],
            (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let score_param =
            Tensor::param(&[1, h, w], (0..h * w).map(|_| rng.uniform(0.1, 0.9)).collect())
                .unwrap();
        let scores = ImportanceMap::new(score_param.clone().sigmoid()).unwrap();
        let labels =
            labels_from(h, w, (0..h * w).map(|_| rng.uniform_usize(0, c - 1) as u8).collect());
        let boundary = boundary_map(&labels, 1, (h, w)).unwrap();
        let weights = LossWeights { lambda1: 1.0, lambda2: 0.0 };
        let out = total_loss(&logit_param, &labels, &scores, &boundary, &weights, 1.0).unwrap();
        out.total.backward().unwrap();
        assert!(logit_param.grad().is_some());
        assert!(score_param.grad().is_none());
    }
}
