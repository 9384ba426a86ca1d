//! Central-difference verification of reverse-mode gradients.
//!
//! Probes whose `±step` evaluations land on a different smooth piece than
//! the unperturbed point (per [`kink::trace`]) are rejected and redrawn.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kink;
use super::registry::{GroupId, ParamStore};

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub group: GroupId,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Probes discarded because a perturbation crossed a kink.
    pub rejected: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compare `analytic(group, index)` against central differences of `f` on
/// `samples` parameters drawn round-robin from `groups`.
///
/// Within a group, indices are drawn from `candidates(group)` when it is
/// non-empty (e.g. entries with a nonzero gradient, so that sparse tables
/// are not checked only where both sides are trivially zero), otherwise
/// uniformly. `f` must be deterministic and evaluate on the calling thread.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    store: &mut ParamStore<f64>,
    groups: &[GroupId],
    f: impl Fn(&ParamStore<f64>) -> f64,
    analytic: impl Fn(GroupId, usize) -> f64,
    candidates: impl Fn(GroupId) -> Vec<usize>,
    step: f64,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let groups: Vec<GroupId> = groups
        .iter()
        .copied()
        .filter(|g| !store.data(*g).is_empty())
        .collect();
    if groups.is_empty() {
        return report;
    }
    let pools: Vec<Vec<usize>> = groups.iter().map(|g| candidates(*g)).collect();
    let (_, base_sig) = kink::trace(|| f(store));
    let max_attempts = samples * 20;
    let mut attempts = 0;
    let mut k = 0;
    while report.probes.len() < samples && attempts < max_attempts {
        attempts += 1;
        let gi = k % groups.len();
        k += 1;
        let group = groups[gi];
        let len = store.data(group).len();
        let index = match pools[gi].choose(&mut rng) {
            Some(i) => *i,
            None => rng.random_range(0..len),
        };
        let x0 = store.data(group)[index];
        store.data_mut(group)[index] = x0 + step;
        let (fp, sp) = kink::trace(|| f(store));
        store.data_mut(group)[index] = x0 - step;
        let (fm, sm) = kink::trace(|| f(store));
        store.data_mut(group)[index] = x0;
        if sp != base_sig || sm != base_sig {
            report.rejected += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic(group, index);
        let rel_error = relative_error(a, numeric);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.probes.push(Probe {
            group,
            name: store.group(group).name.clone(),
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Part, Role, Scalar, Tape};

    fn store(values: Vec<f64>) -> (ParamStore<f64>, GroupId) {
        let mut s = ParamStore::new();
        let g = s.add("p", Role::ColorField, Part::Mlp, values);
        (s, g)
    }

    #[test]
    fn quadratic_is_exact() {
        let (mut s, g) = store(vec![0.3, -1.2, 2.5, 0.7]);
        let f = |s: &ParamStore<f64>| s.data(g).iter().map(|x| 3.0 * x * x - x).sum::<f64>();
        let p0 = s.data(g).to_vec();
        let grad = |_, i: usize| 6.0 * p0[i] - 1.0;
        let r = grad_check(&mut s, &[g], f, grad, |_| Vec::new(), 1e-5, 50, 1);
        assert_eq!(r.probes.len(), 50);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn taped_clamp_away_from_its_kinks() {
        // f = Σ clamp(x, 0, 1)·x² with inputs strictly inside or outside.
        let (mut s, g) = store(vec![0.25, 0.5, 1.5, -0.5, 0.9]);
        let f = |s: &ParamStore<f64>| {
            s.data(g)
                .iter()
                .map(|x| Scalar::clamp(*x, 0.0, 1.0) * x * x)
                .sum::<f64>()
        };
        let tape = Tape::new();
        let xs = tape.leaves(s.data(g));
        let y = xs
            .iter()
            .fold(tape.leaf(0.0), |acc, x| acc + x.clamp(0.0, 1.0) * *x * *x);
        let adj = tape.backward(y, &mut crate::autodiff::NullSink);
        let grads: Vec<f64> = xs.iter().map(|x| adj.of(*x)).collect();
        let r = grad_check(
            &mut s,
            &[g],
            f,
            |_, i| grads[i],
            |_| Vec::new(),
            1e-5,
            40,
            2,
        );
        assert!(r.max_rel_error < 1e-6, "{:?}", r.worst());
    }

    #[test]
    fn probes_across_a_kink_are_rejected() {
        let (mut s, g) = store(vec![1.0]);
        let f = |s: &ParamStore<f64>| Scalar::clamp(s.data(g)[0], 0.0, 1.0);
        let r = grad_check(&mut s, &[g], f, |_, _| 0.5, |_| Vec::new(), 1e-5, 5, 3);
        assert!(r.probes.is_empty());
        assert_eq!(r.rejected, 100);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 1.0 / 3.0).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}
