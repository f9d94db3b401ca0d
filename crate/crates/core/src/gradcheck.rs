//! Central finite-difference checks of tape gradients.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{AblationMode, Batch, GudnModel, ModelRng};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// `(parameter, flat index, analytic, numeric)` of each failure.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares `analytic` (indexed like `store`) with central differences of `f`
/// over every scalar parameter.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &[Matrix],
    step: f64,
    tolerance: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        max_rel_error: 0.0,
        tolerance,
        failures: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).data().len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let plus = f(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - step;
            let minus = f(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.0].data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err < tolerance {
                report.passed += 1;
            } else {
                report.failures.push((store.name(id).to_string(), j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of the overall loss of `model` on `batch`. Every
/// evaluation reseeds dropout with `dropout_seed`, so all of them share one
/// mask.
pub fn check_model(
    model: &GudnModel,
    batch: &Batch,
    mode: AblationMode,
    dropout_seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads, _) = model.loss_and_grads(batch, mode, Some(&mut ModelRng::seed_from_u64(dropout_seed)))?;
    let mut probe = model.clone();
    check_gradients(model.params(), &grads, step, tolerance, |store| {
        *probe.params_mut() = store.clone();
        let loss = probe.overall_loss(batch, mode, Some(&mut ModelRng::seed_from_u64(dropout_seed)))?;
        Ok(loss.l_overall)
    })
}
