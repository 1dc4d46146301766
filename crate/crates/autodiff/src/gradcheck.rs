use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that coordinates whose true
/// gradient is numerically zero do not turn round-off into huge ratios.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients of a scalar `sink` against central
/// differences with step `h` on `samples` randomly drawn parameter
/// coordinates.
///
/// Coordinates are drawn from those with a nonzero analytic gradient when
/// there are any, otherwise from all unfrozen coordinates.
pub fn check_gradients(
    graph: &mut Graph,
    sink: NodeId,
    params: &ParamStore,
    inputs: &HashMap<String, Tensor>,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    graph.forward(params, inputs)?;
    let sink_shape = graph.value(sink)?.shape().to_vec();
    if sink_shape.iter().product::<usize>() != 1 {
        return Err(AutodiffError::NonScalarSink(sink_shape));
    }
    let seed_tensor = Tensor::new(sink_shape, vec![1.0])?;
    let grads = graph.backward(sink, &seed_tensor)?;

    let mut nonzero = Vec::new();
    let mut all = Vec::new();
    for (name, tensor) in params.iter() {
        if params.is_frozen(name) {
            continue;
        }
        let g = grads.get(name);
        for k in 0..tensor.len() {
            all.push((name.to_string(), k));
            if g.is_some_and(|g| g.data()[k] != 0.0) {
                nonzero.push((name.to_string(), k));
            }
        }
    }
    let pool = if nonzero.is_empty() { &all } else { &nonzero };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coordinates_checked: 0,
        worst: None,
    };
    if pool.is_empty() {
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    for _ in 0..samples {
        let (name, k) = &pool[rng.random_range(0..pool.len())];
        let original = params.require(name)?.data()[*k];
        let mut eval_at = |value: f64| -> Result<f64> {
            probe.get_mut(name).expect("cloned store").data_mut()[*k] = value;
            graph.forward(&probe, inputs)?;
            Ok(graph.value(sink)?.data()[0])
        };
        let plus = eval_at(original + h)?;
        let minus = eval_at(original - h)?;
        eval_at(original)?;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[*k]);
        let err = relative_error(analytic, numeric);
        report.coordinates_checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((name.clone(), *k));
        }
    }
    // Leave the graph holding values for the unperturbed parameters.
    graph.forward(params, inputs)?;
    Ok(report)
}
