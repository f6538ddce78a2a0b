//! Sparse masked-convolution execution: computes branch convolutions only at
//! the selected output positions, with FLOP accounting and a dense-path
//! equivalence oracle. Forward-only; training uses the dense masked path.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::focus::{topk_mask, BranchConfig, ImportanceMap, SelectionMask};
use crate::rng::Rng;
use crate::tensor::{conv2d, same_padding, Tensor};

/// Selected positions of a binary mask, sorted in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionIndex {
    coords: Vec<(u32, u32)>,
    h: usize,
    w: usize,
}

impl SelectionIndex {
    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    pub fn k(&self) -> usize {
        self.coords.len()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Reconstructs the identical mask (ratio preserved from the source).
    pub fn to_mask(&self, ratio: f64) -> Result<SelectionMask> {
        let mut data = vec![0.0; self.h * self.w];
        for &(r, c) in &self.coords {
            data[r as usize * self.w + c as usize] = 1.0;
        }
        SelectionMask::from_raw(Tensor::from_vec(&[1, self.h, self.w], data)?, ratio)
    }

    fn selected_grid(&self) -> Vec<bool> {
        let mut grid = vec![false; self.h * self.w];
        for &(r, c) in &self.coords {
            grid[r as usize * self.w + c as usize] = true;
        }
        grid
    }
}

/// Row-major coordinate list of a mask's ones; round-trips to the same mask.
pub fn index_from_mask(mask: &SelectionMask) -> SelectionIndex {
    let (h, w) = mask.spatial();
    let data = mask.mask().data();
    let mut coords = Vec::with_capacity(mask.k());
    for r in 0..h {
        for c in 0..w {
            if data[r * w + c] == 1.0 {
                coords.push((r as u32, c as u32));
            }
        }
    }
    debug_assert_eq!(coords.len(), mask.k());
    SelectionIndex { coords, h, w }
}

/// Execution cost report for one masked convolution.
#[derive(Debug, Clone)]
pub struct SparseExecReport {
    pub dense_flops: u64,
    pub sparse_flops: u64,
    pub gathered_positions: usize,
    pub wall_time_dense: Option<Duration>,
    pub wall_time_sparse: Option<Duration>,
}

/// Computes the branch convolution only at selected output positions.
///
/// Because the branch masks the convolution *input*, a tap contributes only
/// when its source position is itself selected; everything else reads as
/// zero. The output is zero at unselected positions and elsewhere equals the
/// dense convolution of the pre-masked input, so
/// `masked_conv2d(x, ..., idx) == conv2d(x ⊙ M) ⊙ M` exactly.
///
/// FLOPs are counted at full kernel tap cost per selected output, which makes
/// sparse/dense = k/(H*W) exact and auditable.
pub fn masked_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    idx: &SelectionIndex,
    dilation: usize,
    stride: usize,
) -> Result<(Tensor, SparseExecReport)> {
    if stride != 1 {
        return Err(Error::Unsupported(format!(
            "masked_conv2d supports stride 1 only (branches are stride 1), got {stride}"
        )));
    }
    let started = Instant::now();
    let (c_in, h, w) = input.dims3()?;
    let ws = weight.shape();
    let [c_out, wc_in, kh, kw] = match ws {
        &[a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::contract(format!("weight must be rank 4, got {ws:?}"))),
    };
    if kh != kw || kh % 2 == 0 {
        return Err(Error::config(format!("kernel must be odd square, got {kh}x{kw}")));
    }
    if dilation == 0 {
        return Err(Error::config("dilation must be positive"));
    }
    if wc_in != c_in {
        return Err(Error::contract(format!(
            "channel mismatch: input {c_in}, weight {wc_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::contract("bias shape mismatch".to_string()));
    }
    if idx.spatial() != (h, w) {
        return Err(Error::contract(format!(
            "index grid {:?} does not match input ({h},{w})",
            idx.spatial()
        )));
    }

    let kernel = kh;
    let pad = same_padding(kernel, dilation) as isize;
    let k_len = c_in * kernel * kernel;
    let selected = idx.selected_grid();
    let (xd, wd, bd) = (input.data(), weight.data(), bias.data());

    let mut out = vec![0.0; c_out * h * w];
    let mut patch = vec![0.0; k_len];
    for &(r, c) in &idx.coords {
        let (r, c) = (r as usize, c as usize);
        // Gather the receptive field once per position (taps from unselected
        // sources stay zero), then one dot product per output channel.
        patch.fill(0.0);
        for kr in 0..kernel {
            let iy = r as isize + (kr * dilation) as isize - pad;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for kc in 0..kernel {
                let ix = c as isize + (kc * dilation) as isize - pad;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let ix = ix as usize;
                if !selected[iy * w + ix] {
                    continue;
                }
                for ci in 0..c_in {
                    patch[(ci * kernel + kr) * kernel + kc] = xd[ci * h * w + iy * w + ix];
                }
            }
        }
        for co in 0..c_out {
            let w_row = &wd[co * k_len..(co + 1) * k_len];
            let mut acc = bd[co];
            for (wv, pv) in w_row.iter().zip(&patch) {
                acc += wv * pv;
            }
            out[co * h * w + r * w + c] = acc;
        }
    }

    let base = 2 * (kernel * kernel * c_in * c_out) as u64;
    let report = SparseExecReport {
        dense_flops: base * (h * w) as u64,
        sparse_flops: base * idx.k() as u64,
        gathered_positions: idx.k(),
        wall_time_dense: None,
        wall_time_sparse: Some(started.elapsed()),
    };
    Ok((Tensor::from_vec(&[c_out, h, w], out)?, report))
}

/// The dense composition the sparse path must reproduce: conv of the masked
/// input, then the output masked again. This is the equivalence oracle.
pub fn dense_masked_reference(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    mask: &SelectionMask,
    dilation: usize,
) -> Result<Tensor> {
    let masked = input.mul(mask.mask())?;
    let dense = conv2d(&masked, weight, bias, 1, dilation)?;
    dense.mul(mask.mask())
}

#[derive(Debug, Clone)]
pub struct BranchBench {
    pub cfg: BranchConfig,
    pub report: SparseExecReport,
    /// Max elementwise |sparse - dense composition| observed while timing.
    pub max_deviation: f64,
}

/// Times dense vs sparse execution of each branch configuration on seeded
/// random inputs. FLOP ratios are exact by construction; wall times are
/// medians over `trials` runs and are reported, not asserted (hardware
/// dependent).
pub fn bench_branches(
    cfgs: &[BranchConfig],
    channels: usize,
    spatial: [usize; 2],
    trials: usize,
    seed: u64,
) -> Result<Vec<BranchBench>> {
    if trials < 3 {
        return Err(Error::config(format!("bench needs at least 3 trials, got {trials}")));
    }
    let [h, w] = spatial;
    let mut rng = Rng::seed_from_u64(seed);
    let input = Tensor::from_vec(
        &[channels, h, w],
        (0..channels * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )?;
    let scores = ImportanceMap::new(Tensor::from_vec(
        &[1, h, w],
        (0..h * w).map(|_| rng.uniform(0.001, 0.999)).collect(),
    )?)?;

    let mut out = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        cfg.validate()?;
        let weight = Tensor::from_vec(
            &[channels, channels, cfg.kernel, cfg.kernel],
            (0..channels * channels * cfg.kernel * cfg.kernel)
                .map(|_| rng.uniform(-0.5, 0.5))
                .collect(),
        )?;
        let bias =
            Tensor::from_vec(&[channels], (0..channels).map(|_| rng.uniform(-0.1, 0.1)).collect())?;
        let mask = topk_mask(&scores, cfg.topk_ratio)?;
        let idx = index_from_mask(&mask);

        let mut dense_times = Vec::with_capacity(trials);
        let mut sparse_times = Vec::with_capacity(trials);
        let mut report = None;
        let mut max_dev = 0.0f64;
        for _ in 0..trials {
            let t0 = Instant::now();
            let reference = dense_masked_reference(&input, &weight, &bias, &mask, cfg.dilation)?;
            dense_times.push(t0.elapsed());

            let t1 = Instant::now();
            let (sparse_out, rep) =
                masked_conv2d(&input, &weight, &bias, &idx, cfg.dilation, 1)?;
            sparse_times.push(t1.elapsed());

            for (a, b) in sparse_out.data().iter().zip(reference.data()) {
                max_dev = max_dev.max((a - b).abs());
            }
            report = Some(rep);
        }
        let mut report = report.expect("trials >= 3");
        report.wall_time_dense = Some(median(&mut dense_times));
        report.wall_time_sparse = Some(median(&mut sparse_times));
        out.push(BranchBench { cfg: cfg.clone(), report, max_deviation: max_dev });
    }
    Ok(out)
}

fn median(times: &mut [Duration]) -> Duration {
    times.sort_unstable();
    times[times.len() / 2]
}

/// Tab-separated bench report: one line per branch.
pub fn render_bench_tsv(rows: &[BranchBench]) -> String {
    let mut out = String::from(
        "branch\tkernel\tdilation\tratio\tdense_flops\tsparse_flops\tflop_ratio\tdense_ms\tsparse_ms\tmax_dev\n",
    );
    for (i, row) in rows.iter().enumerate() {
        let r = &row.report;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.3}\t{:.3}\t{:.3e}\n",
            i,
            row.cfg.kernel,
            row.cfg.dilation,
            row.cfg.topk_ratio,
            r.dense_flops,
            r.sparse_flops,
            r.sparse_flops as f64 / r.dense_flops as f64,
            r.wall_time_dense.unwrap_or_default().as_secs_f64() * 1e3,
            r.wall_time_sparse.unwrap_or_default().as_secs_f64() * 1e3,
            row.max_deviation,
        ));
    }
    out
}

/// The same report as a structured-text (TOML) document.
pub fn render_bench_toml(rows: &[BranchBench]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let r = &row.report;
        out.push_str(&format!(
            "[[branch]]\nid = {i}\nkernel = {}\ndilation = {}\nratio = {}\ndense_flops = {}\nsparse_flops = {}\nflop_ratio = {}\ndense_ms = {}\nsparse_ms = {}\nmax_deviation = {}\n\n",
            row.cfg.kernel,
            row.cfg.dilation,
            row.cfg.topk_ratio,
            r.dense_flops,
            r.sparse_flops,
            r.sparse_flops as f64 / r.dense_flops as f64,
            r.wall_time_dense.unwrap_or_default().as_secs_f64() * 1e3,
            r.wall_time_sparse.unwrap_or_default().as_secs_f64() * 1e3,
            row.max_deviation,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn importance_from(values: Vec<f64>, h: usize, w: usize) -> ImportanceMap {
        ImportanceMap::new(Tensor::from_vec(&[1, h, w], values).unwrap()).unwrap()
    }

    #[test]
    fn index_round_trip_small_cases() {
        let all = SelectionMask::from_raw(Tensor::full(&[1, 2, 2], 1.0), 1.0).unwrap();
        let idx = index_from_mask(&all);
        assert_eq!(idx.coords(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(idx.to_mask(1.0).unwrap().mask().data(), all.mask().data());

        let diag = SelectionMask::from_raw(
            Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            0.5,
        )
        .unwrap();
        assert_eq!(index_from_mask(&diag).coords(), &[(0, 0), (1, 1)]);
    }

    #[test]
    fn index_round_trip_random_masks() {
        let mut rng = Rng::seed_from_u64(70);
        for _ in 0..10_000 {
            let h = rng.uniform_usize(1, 12);
            let w = rng.uniform_usize(1, 12);
            let data: Vec<f64> =
                (0..h * w).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 }).collect();
            let mask =
                SelectionMask::from_raw(Tensor::from_vec(&[1, h, w], data).unwrap(), 0.3).unwrap();
            let idx = index_from_mask(&mask);
            assert_eq!(idx.k(), mask.k());
            let back = idx.to_mask(0.3).unwrap();
            assert_eq!(back.mask().data(), mask.mask().data());
            // Coordinates strictly increase in row-major order.
            for pair in idx.coords().windows(2) {
                assert!(pair[0].0 < pair[1].0 || (pair[0].0 == pair[1].0 && pair[0].1 < pair[1].1));
            }
        }
    }

    #[test]
    fn full_mask_matches_dense_conv_everywhere() {
        let mut rng = Rng::seed_from_u64(71);
        let input =
            Tensor::from_vec(&[3, 6, 6], (0..108).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
        let weight =
            Tensor::from_vec(&[2, 3, 3, 3], (0..54).map(|_| rng.uniform(-0.5, 0.5)).collect())
                .unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.3, -0.2]).unwrap();
        let mask = SelectionMask::from_raw(Tensor::full(&[1, 6, 6], 1.0), 1.0).unwrap();
        let idx = index_from_mask(&mask);
        let (sparse, report) = masked_conv2d(&input, &weight, &bias, &idx, 1, 1).unwrap();
        let dense = conv2d(&input, &weight, &bias, 1, 1).unwrap();
        for (a, b) in sparse.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(report.sparse_flops, report.dense_flops);
    }

    #[test]
    fn random_mask_matches_dense_composition() {
        let mut rng = Rng::seed_from_u64(72);
        let input =
            Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .unwrap();
        let weight =
            Tensor::from_vec(&[2, 2, 3, 3], (0..36).map(|_| rng.uniform(-0.5, 0.5)).collect())
                .unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.1, -0.4]).unwrap();
        let scores = importance_from((0..64).map(|_| rng.uniform(0.01, 0.99)).collect(), 8, 8);
        let mask = topk_mask(&scores, 0.3).unwrap();
        let idx = index_from_mask(&mask);
        let (sparse, _) = masked_conv2d(&input, &weight, &bias, &idx, 2, 1).unwrap();
        let reference = dense_masked_reference(&input, &weight, &bias, &mask, 2).unwrap();
        for (a, b) in sparse.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_selection_has_single_support() {
        let mut rng = Rng::seed_from_u64(73);
        let input =
            Tensor::from_vec(&[1, 5, 5], (0..25).map(|_| rng.uniform(0.5, 1.5)).collect())
                .unwrap();
        let weight = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let bias = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let mut mask_data = vec![0.0; 25];
        mask_data[12] = 1.0;
        let mask = SelectionMask::from_raw(
            Tensor::from_vec(&[1, 5, 5], mask_data).unwrap(),
            0.04,
        )
        .unwrap();
        let idx = index_from_mask(&mask);
        let (out, report) = masked_conv2d(&input, &weight, &bias, &idx, 1, 1).unwrap();
        let nonzero = out.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 1);
        assert_eq!(report.gathered_positions, 1);
        // Only the center tap's source is selected: value = bias + x[center].
        assert!((out.data()[12] - (0.5 + input.data()[12])).abs() < 1e-12);
    }

    #[test]
    fn output_support_is_subset_of_selection() {
        let mut rng = Rng::seed_from_u64(74);
        for _ in 0..50 {
            let h = rng.uniform_usize(3, 10);
            let w = rng.uniform_usize(3, 10);
            let input =
                Tensor::from_vec(&[1, h, w], (0..h * w).map(|_| rng.uniform(0.5, 1.0)).collect())
                    .unwrap();
            let weight = Tensor::from_vec(&[1, 1, 3, 3], vec![0.3; 9]).unwrap();
            let bias = Tensor::from_vec(&[1], vec![1.0]).unwrap();
            let scores =
                importance_from((0..h * w).map(|_| rng.uniform(0.01, 0.99)).collect(), h, w);
            let mask = topk_mask(&scores, 0.25).unwrap();
            let idx = index_from_mask(&mask);
            let (out, _) = masked_conv2d(&input, &weight, &bias, &idx, 1, 1).unwrap();
            for (i, &v) in out.data().iter().enumerate() {
                if v != 0.0 {
                    assert_eq!(mask.mask().data()[i], 1.0);
                }
            }
        }
    }

    #[test]
    fn flop_counter_is_linear_in_k() {
        let input = Tensor::zeros(&[2, 8, 8]);
        let weight = Tensor::zeros(&[2, 2, 3, 3]);
        let bias = Tensor::zeros(&[2]);
        let make_mask = |k: usize| {
            let mut data = vec![0.0; 64];
            for item in data.iter_mut().take(k) {
                *item = 1.0;
            }
            let m = SelectionMask::from_raw(Tensor::from_vec(&[1, 8, 8], data).unwrap(), 0.5)
                .unwrap();
            index_from_mask(&m)
        };
        let (_, r1) = masked_conv2d(&input, &weight, &bias, &make_mask(8), 1, 1).unwrap();
        let (_, r2) = masked_conv2d(&input, &weight, &bias, &make_mask(16), 1, 1).unwrap();
        assert_eq!(2 * r1.sparse_flops, r2.sparse_flops);
        assert!(r1.sparse_flops <= r1.dense_flops);
    }

    #[test]
    fn stride_two_unsupported() {
        let input = Tensor::zeros(&[1, 4, 4]);
        let weight = Tensor::zeros(&[1, 1, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        let mask = SelectionMask::from_raw(Tensor::full(&[1, 4, 4], 1.0), 1.0).unwrap();
        let idx = index_from_mask(&mask);
        assert!(matches!(
            masked_conv2d(&input, &weight, &bias, &idx, 1, 2),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn bench_reports_exact_ratios_on_divisible_grid() {
        // 40x40 grid: every Table-1 ratio times 1600 is an integer.
        let rows = bench_branches(&BranchConfig::default_set(), 4, [40, 40], 3, 7).unwrap();
        let hw = 1600u64;
        for row in &rows {
            let r = &row.report;
            assert_eq!(r.sparse_flops * hw, r.dense_flops * r.gathered_positions as u64);
            let expect_k = (row.cfg.topk_ratio * 1600.0).round() as usize;
            assert_eq!(r.gathered_positions, expect_k);
            assert!(row.max_deviation < 1e-9);
        }
        let ratios: Vec<f64> = rows
            .iter()
            .map(|b| b.report.sparse_flops as f64 / b.report.dense_flops as f64)
            .collect();
        assert_eq!(ratios, vec![0.10, 0.20, 0.30, 0.40]);
    }

    #[test]
    fn bench_requires_three_trials() {
        assert!(bench_branches(&BranchConfig::default_set(), 2, [16, 16], 2, 1).is_err());
    }
}
