//! Central finite differences over any scalar function of a parameter set.

use crate::nn::Params;

/// Magnitude below which a gradient entry is compared absolutely.
pub const FLOOR: f64 = 1e-4;

/// Relative error; entries smaller than [`FLOOR`] are measured against the floor.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `grads` against central differences of `loss` for every
/// entry of every tensor in `params`; returns the worst relative error
/// with the tensor name.
pub fn check<P, F>(params: &P, grads: &P, eps: f64, mut loss: F) -> (f64, String)
where
    P: Params<f64> + Clone,
    F: FnMut(&P) -> f64,
{
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.as_slice().to_vec())
        .collect();
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        for i in 0..len {
            let orig = probe.named_tensors()[ti].1.as_slice()[i];
            set_entry(&mut probe, ti, i, orig + eps);
            let plus = loss(&probe);
            set_entry(&mut probe, ti, i, orig - eps);
            let minus = loss(&probe);
            set_entry(&mut probe, ti, i, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let e = rel_error(analytic[ti][i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic={} numeric={numeric}", analytic[ti][i]));
            }
        }
    }
    worst
}

fn set_entry<P: Params<f64>>(p: &mut P, tensor: usize, idx: usize, v: f64) {
    let mut all = p.named_tensors_mut();
    all[tensor].1.as_mut_slice()[idx] = v;
}
