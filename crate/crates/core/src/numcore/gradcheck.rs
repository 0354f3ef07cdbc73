use crate::error::{Error, Result};
use crate::numcore::tape::{ParamId, ParamStore, Tape, Var};

const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Compares tape gradients with central differences.
///
/// `loss_fn` must build the same deterministic scalar each time it is called.
/// At most `max_coords` evenly spaced coordinates are probed per parameter.
/// The relative error is `|a - n| / max(|a|, |n|, 1e-6)`; the floor sits above
/// central-difference roundoff so structurally zero gradients compare as equal.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    max_coords: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-6, 1e-4]")));
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        let g = tape.backward(loss)?;
        ids.iter()
            .map(|id| {
                g.param(*id)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; store.value(*id).len()])
            })
            .collect::<Vec<_>>()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::Probe("loss is non-finite at probe point".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (id, grad) in ids.iter().zip(&analytic) {
        let n = grad.len();
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for coord in (0..n).step_by(step) {
            let orig = store.value(*id).data()[coord];
            store.get_mut(*id).value.data_mut()[coord] = orig + eps;
            let plus = eval(store).map_err(|e| Error::Probe(e.to_string()));
            store.get_mut(*id).value.data_mut()[coord] = orig - eps;
            let minus = eval(store).map_err(|e| Error::Probe(e.to_string()));
            store.get_mut(*id).value.data_mut()[coord] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(*id).name.clone(), coord, a, numeric));
            }
        }
    }
    Ok(report)
}
