use super::model::{MarketModel, TimeGrid};
use super::paths::{DriftTilt, PathBatch};
use super::SimulationError;

/// Log density of the tilted measure against the original one, evaluated on an
/// untilted path and accumulated over steps `0..stop`:
/// `-sum theta^T rho^{-1} dW - h/2 sum theta^T rho^{-1} theta`, `theta = q / sigma(X)`.
///
/// The inverse correlation makes the density shift only the tilted components'
/// drifts; without it a tilt would leak into correlated drivers.
pub fn girsanov_logweight(
    batch: &PathBatch,
    path: usize,
    tilt: &DriftTilt,
    model: &MarketModel,
    grid: &TimeGrid,
    stop: usize,
) -> Result<f64, SimulationError> {
    accumulate(batch, path, tilt, model, grid, stop, -1.0)
}

/// Log density of the original measure against the tilted one, evaluated on a
/// path simulated under `tilt`. Reweighting tilted paths by its exponential
/// recovers untilted expectations.
pub fn reverse_logweight(
    batch: &PathBatch,
    path: usize,
    tilt: &DriftTilt,
    model: &MarketModel,
    grid: &TimeGrid,
    stop: usize,
) -> Result<f64, SimulationError> {
    accumulate(batch, path, tilt, model, grid, stop, 1.0)
}

fn accumulate(
    batch: &PathBatch,
    path: usize,
    tilt: &DriftTilt,
    model: &MarketModel,
    grid: &TimeGrid,
    stop: usize,
    sign: f64,
) -> Result<f64, SimulationError> {
    if tilt.is_zero() {
        return Ok(0.0);
    }
    let dim = batch.dim;
    let h = grid.h();
    let mut theta = vec![0.0; dim];
    let mut log_w = 0.0;
    for n in 0..stop.min(batch.steps) {
        tilt.kernel(model, batch.state(path, n), &mut theta)?;
        let dw = batch.increments.at(path, n);
        let corr = &model.correlation;
        log_w += sign * corr.inverse_form(&theta, dw) - 0.5 * h * corr.inverse_form(&theta, &theta);
    }
    Ok(log_w)
}
