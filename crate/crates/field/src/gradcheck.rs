//! Central finite-difference verification of `Bound::param_grads`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::model::{Bound, Model};

const KINK_GAP: f64 = 1e-3;

/// Error of one parameter group over its sampled entries.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    /// Sampled entries dropped because a rectifier kink lies within the step.
    pub kinks: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the sampled entries (0 when both vanish).
    pub relative: f64,
    pub analytic_norm: f64,
}

/// Compares analytic and central-difference gradients of the scalar built by `loss`
/// for up to `per_group` entries of every parameter named in `groups`.
///
/// An entry whose central differences at `step` and `step/2` disagree, or whose
/// one-sided slopes do not converge, has a rectifier kink within the step and
/// is skipped.
pub fn check_gradients<F>(model: &Model<f64>, groups: &[&str], per_group: usize, step: f64, seed: u64, loss: F) -> Result<Vec<GroupError>>
where
    F: Fn(&mut Bound<f64>) -> Result<Var>,
{
    let mut b = Bound::new(model, true);
    let l = loss(&mut b)?;
    let grads = b.param_grads(l);
    let eval = |m: &Model<f64>| -> Result<f64> {
        let mut b = Bound::new(m, false);
        let l = loss(&mut b)?;
        Ok(b.g.value(l).data[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(groups.len());
    let mut work = model.clone();
    for &name in groups {
        let id = model.params.id(name)?;
        let n = model.params.by_id(id).len();
        let picks = sample(&mut rng, n, per_group.min(n)).into_vec();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let mut kinks = 0;
        for &i in &picks {
            let orig = work.params.by_id(id).data[i];
            let mut at = |h: f64| -> Result<f64> {
                work.params.by_id_mut(id).data[i] = orig + h;
                let v = eval(&work);
                work.params.by_id_mut(id).data[i] = orig;
                v
            };
            let f0 = at(0.0)?;
            let (up, down) = (at(step)?, at(-step)?);
            let (up2, down2) = (at(step / 2.0)?, at(-step / 2.0)?);
            let numeric = (up - down) / (2.0 * step);
            let half = (up2 - down2) / step;
            // One-sided slope gaps halve with the step on smooth functions; a kink keeps them open.
            let gap = (up - 2.0 * f0 + down) / step;
            let gap2 = (up2 - 2.0 * f0 + down2) / (step / 2.0);
            let noise = 100.0 * f64::EPSILON * f0.abs().max(1.0) / step;
            if (numeric - half).abs() > KINK_GAP * numeric.abs().max(half.abs()) + noise
                || (gap2 - gap / 2.0).abs() > 0.1 * gap.abs() + noise
            {
                kinks += 1;
                continue;
            }
            let analytic = grads[id].data[i];
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let relative = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        out.push(GroupError { name: name.to_string(), checked: picks.len() - kinks, kinks, relative, analytic_norm: na.sqrt() });
    }
    Ok(out)
}

/// Random surface/skeleton points in `[-0.9, 0.9]³` with random descriptors.
pub fn toy_input(hyper: &crate::model::Hyper, n_s: usize, n_k: usize, seed: u64) -> Result<crate::input::FieldInput> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = |n: usize| -> Vec<[f64; 3]> { (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-0.9..0.9))).collect() };
    let surface = pts(n_s);
    let skeleton = pts(n_k);
    let desc: Vec<f64> = (0..n_s * hyper.descriptor_width()).map(|_| rng.gen_range(0.0..1.0)).collect();
    crate::input::FieldInput::from_points(hyper, &surface, &desc, &skeleton)
}
