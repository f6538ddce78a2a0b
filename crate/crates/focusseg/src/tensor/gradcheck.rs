//! Central-finite-difference verification of analytic gradients.
//!
//! For a scalar-valued program over named parameter groups, compares the
//! reverse-mode gradient against (f(x+e) - f(x-e)) / 2e coordinate by
//! coordinate. Error is relative where gradients are large and absolute where
//! they vanish: err = |a - n| / max(1, |a|, |n|).

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Limit on probed coordinates per group; `None` probes all. Subsampling
    /// is drawn from the seeded generator so reports are reproducible.
    pub max_coords_per_group: Option<usize>,
    pub seed: u64,
    /// Added to every analytic gradient before comparison. Deliberately
    /// corrupting the analytic side is the negative control for the checker.
    pub tamper: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords_per_group: Some(64),
            seed: 0x5eed,
            tamper: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked_coords: usize,
    pub max_err: f64,
    /// Flat index of the worst coordinate and both gradient values there.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_err: f64,
    pub tol: f64,
    /// Set when the program produced a non-finite value during probing.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_err < self.tol
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("group                              checked  max_err      worst@  analytic      numeric\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{:<36} {:>6}  {:<11.3e} {:>6}  {:<13.5e} {:<13.5e}\n",
                g.name, g.checked_coords, g.max_err, g.worst_coord, g.analytic, g.numeric
            ));
        }
        out.push_str(&format!(
            "overall max_err {:.3e} vs tol {:.1e}: {}\n",
            self.max_err,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Checks d(f)/d(params) for a deterministic scalar program `f`.
///
/// `f` is called with one tensor per group, in order; probe calls pass fresh
/// leaves with one coordinate nudged, so `f` must rebuild its graph from the
/// given tensors every time.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(Error::config(format!(
            "grad_check eps must lie in [1e-6, 1e-4], got {}",
            opts.eps
        )));
    }
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|(_, t)| Tensor::param(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    let mut non_finite = !loss.item().is_finite();
    loss.backward()?;

    let mut rng = Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::with_capacity(params.len());
    let mut max_err = 0.0f64;

    for (gi, (name, _)) in params.iter().enumerate() {
        let leaf = &leaves[gi];
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let coords: Vec<usize> = match opts.max_coords_per_group {
            Some(limit) if leaf.numel() > limit => {
                let mut picked = Vec::with_capacity(limit);
                let mut all: Vec<usize> = (0..leaf.numel()).collect();
                rng.shuffle(&mut all);
                picked.extend_from_slice(&all[..limit]);
                picked.sort_unstable();
                picked
            }
            _ => (0..leaf.numel()).collect(),
        };

        let mut report = GroupReport {
            name: name.clone(),
            checked_coords: coords.len(),
            max_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };

        for &ci in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let probes: Vec<Tensor> = leaves
                    .iter()
                    .enumerate()
                    .map(|(pi, p)| {
                        if pi == gi {
                            let mut data = p.data().to_vec();
                            data[ci] += delta;
                            Tensor::param(p.shape(), data)
                        } else {
                            Ok(p.clone())
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(f(&probes)?.item())
            };
            let plus = eval(opts.eps)?;
            let minus = eval(-opts.eps)?;
            if !plus.is_finite() || !minus.is_finite() {
                non_finite = true;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ci] + opts.tamper;
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > report.max_err {
                report.max_err = err;
                report.worst_coord = ci;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        max_err = max_err.max(report.max_err);
        groups.push(report);
    }

    Ok(GradCheckReport {
        groups,
        max_err,
        tol: opts.tol,
        non_finite,
    })
}
