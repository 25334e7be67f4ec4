//! Central-difference verification of the objective's gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::model::{dbgp_elbo_with_grad, objective_with_signature, ModelState, WeightDraw};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::rng::{domain, hash_str, substream};
use crate::synthdata::PatientRecord;

/// Magnitude below which errors are measured absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub coords_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coords_per_block: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error of every checked block.
    pub per_block: BTreeMap<String, f64>,
    pub n_checked: usize,
    /// Coordinates rejected because a perturbation crossed a kink.
    pub n_skipped: usize,
}

impl GradCheckReport {
    pub fn worst_block(&self) -> Option<(&str, f64)> {
        self.per_block
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `f` on random
/// coordinates of every listed block. `f` returns the objective and a
/// signature of the discrete choices made while computing it; coordinates
/// whose perturbations change the signature are skipped and replaced.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    analytic: &GradMap,
    blocks: &[String],
    options: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, u64)>,
{
    if !(options.step > 0.0) {
        return Err(Error::config("gradcheck.step", "must be positive"));
    }
    let (_, base_sig) = f(store)?;
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_block: BTreeMap::new(),
        n_checked: 0,
        n_skipped: 0,
    };
    for name in blocks {
        let g = analytic
            .get(name)
            .ok_or_else(|| Error::config("gradcheck.blocks", format!("no gradient for block `{name}`")))?;
        let n = g.len();
        if n == 0 {
            continue;
        }
        let mut rng = substream(options.seed, &[domain::GRADCHECK, hash_str(name)]);
        let flat: Vec<f64> = g.iter().copied().collect();
        let active: Vec<usize> = (0..n).filter(|&i| flat[i] != 0.0).collect();
        let pool = if active.is_empty() { (0..n).collect() } else { active };
        let budget = options.coords_per_block.min(pool.len());
        let order: Vec<usize> = sample(&mut rng, pool.len(), pool.len()).into_iter().map(|i| pool[i]).collect();
        let mut worst = 0.0f64;
        let mut done = 0;
        for &idx in &order {
            if done == budget {
                break;
            }
            let cols = g.ncols();
            let (r, c) = (idx / cols, idx % cols);
            let orig = store.get(name)?[[r, c]];
            probe.get_mut(name)?[[r, c]] = orig + options.step;
            let (fp, sp) = f(&probe)?;
            probe.get_mut(name)?[[r, c]] = orig - options.step;
            let (fm, sm) = f(&probe)?;
            probe.get_mut(name)?[[r, c]] = orig;
            if sp != base_sig || sm != base_sig {
                report.n_skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * options.step);
            let e = relative_error(flat[idx], numeric);
            if !e.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference for `{name}`[{r},{c}]")));
            }
            worst = worst.max(e);
            done += 1;
            report.n_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_block.insert(name.clone(), worst);
    }
    Ok(report)
}

/// Gradient check of the model objective on `batch` under one fixed weight
/// realization, without dropout. `blocks` restricts the check to a subset
/// of the trainable blocks; by default every block is checked.
pub fn finite_difference_grad_check(
    state: &ModelState,
    batch: &[&PatientRecord],
    blocks: Option<&[String]>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let draw = if state.variant.has_stochastic_weights() {
        WeightDraw::sample(state, &mut substream(options.seed, &[domain::GRADCHECK, 0]))
    } else {
        WeightDraw::Mean
    };
    let (_, grads) = dbgp_elbo_with_grad(state, batch, &draw, None)?;
    let names: Vec<String> = match blocks {
        Some(b) => b.to_vec(),
        None => grads.keys().cloned().collect(),
    };
    let mut probe = state.clone();
    finite_difference_check(&state.params, &grads, &names, options, |p| {
        probe.params = p.clone();
        objective_with_signature(&probe, batch, &draw)
    })
}
