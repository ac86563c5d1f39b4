use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParamId, ParamStore, Var};

pub const MIN_EPSILON: f64 = 1e-6;
pub const MAX_EPSILON: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step, in `[MIN_EPSILON, MAX_EPSILON]`.
    pub epsilon: f64,
    /// Parameters with at most this many values are checked exhaustively.
    pub full_check_limit: usize,
    /// For larger parameters: how many coordinates with a non-zero analytic
    /// gradient to check, plus `zero_probes` coordinates drawn from the rest.
    pub sampled_coords: usize,
    pub zero_probes: usize,
    pub seed: u64,
    /// When a central difference straddles a ReLU kink, retry with the
    /// step divided by ten down to 1e-6; if it still straddles one, the
    /// coordinate is skipped and counted.
    pub avoid_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            full_check_limit: 512,
            sampled_coords: 256,
            zero_probes: 32,
            seed: 0,
            avoid_kinks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates skipped because every step straddled a kink.
    pub kinks_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords_checked).sum()
    }

    pub fn kinks_skipped(&self) -> usize {
        self.params.iter().map(|p| p.kinks_skipped).sum()
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients against central differences.
///
/// `f` rebuilds the scalar loss from the current parameter values. The
/// relative error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<F, E>(
    store: &mut ParamStore,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var), E>,
    E: From<NumericsError>,
{
    if !(MIN_EPSILON..=MAX_EPSILON).contains(&opts.epsilon) {
        return Err(NumericsError::InvalidArgument {
            op: "finite_diff_check",
            message: format!("epsilon {} outside [{MIN_EPSILON}, {MAX_EPSILON}]", opts.epsilon),
        }
        .into());
    }
    store.zero_grad();
    let base_pattern = {
        let (g, loss) = f(store)?;
        if !g.scalar(loss).is_finite() {
            return Err(NumericsError::NonFinite("loss".into()).into());
        }
        g.backward(loss, store)?;
        g.kink_pattern()
    };
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.get(id).tensor.grad().expect("parameters carry grads").to_vec())
        .collect();

    // Loss value and whether its kink pattern matches the unperturbed one.
    let mut eval = |store: &ParamStore| -> Result<(f64, bool), E> {
        let (g, loss) = f(store)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(NumericsError::NonFinite("loss".into()).into());
        }
        Ok((v, !opts.avoid_kinks || g.kink_pattern() == base_pattern))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::with_capacity(ids.len()),
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        let coords = if grad.len() <= opts.full_check_limit {
            (0..grad.len()).collect::<Vec<_>>()
        } else {
            let (nonzero, zero): (Vec<usize>, Vec<usize>) = (0..grad.len()).partition(|&i| grad[i] != 0.0);
            let mut picked: Vec<usize> = sample(&mut rng, nonzero.len(), opts.sampled_coords.min(nonzero.len()))
                .into_iter()
                .map(|i| nonzero[i])
                .collect();
            picked.extend(
                sample(&mut rng, zero.len(), opts.zero_probes.min(zero.len()))
                    .into_iter()
                    .map(|i| zero[i]),
            );
            picked.sort_unstable();
            picked
        };
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for &c in &coords {
            let original = store.get(id).tensor.values()[c];
            let mut step = opts.epsilon;
            let numeric = loop {
                store.get_mut(id).tensor.values_mut()[c] = original + step;
                let plus = eval(store);
                store.get_mut(id).tensor.values_mut()[c] = original - step;
                let minus = eval(store);
                store.get_mut(id).tensor.values_mut()[c] = original;
                let ((plus, smooth_plus), (minus, smooth_minus)) = (plus?, minus?);
                if smooth_plus && smooth_minus {
                    break Some((plus - minus) / (2.0 * step));
                }
                if step <= MIN_EPSILON * 1.000_001 {
                    break None;
                }
                step = (step / 10.0).max(MIN_EPSILON);
            };
            match numeric {
                Some(n) => worst = worst.max(rel_error(grad[c], n)),
                None => skipped += 1,
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: worst,
            coords_checked: coords.len() - skipped,
            kinks_skipped: skipped,
        });
    }
    Ok(report)
}
