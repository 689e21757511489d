//! Shared test helpers: central finite-difference gradient oracle.
#![allow(dead_code)]

pub mod toy;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wlfm::graph::Gradients;
use wlfm::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct FdCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(ParamId, usize, f64, f64)>,
}

/// Relative error with an absolute floor so entries whose true gradient
/// is ~0 are judged on absolute error.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients against central differences on `samples`
/// randomly chosen scalar entries among parameters whose names satisfy
/// `select`. `loss` must be a pure function of the store.
pub fn finite_difference_check<L, G>(
    store: &mut ParamStore,
    loss: L,
    grads: G,
    select: impl Fn(&str) -> bool,
    samples: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> FdCheck
where
    L: Fn(&ParamStore) -> f64,
    G: Fn(&ParamStore) -> Gradients,
{
    let analytic = grads(store);
    let mut entries = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        if !select(store.name(id)) {
            continue;
        }
        for k in 0..store.get(id).len() {
            entries.push((id, k));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    entries.shuffle(&mut rng);
    entries.truncate(samples);
    let mut out = FdCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (id, k) in entries {
        let orig = store.get(id).as_slice().unwrap()[k];
        store.get_mut(id).as_slice_mut().unwrap()[k] = orig + step;
        let up = loss(store);
        store.get_mut(id).as_slice_mut().unwrap()[k] = orig - step;
        let down = loss(store);
        store.get_mut(id).as_slice_mut().unwrap()[k] = orig;
        let fd = (up - down) / (2.0 * step);
        let an = analytic.get(id).map(|g| g.as_slice().unwrap()[k]).unwrap_or(0.0);
        let e = rel_err(an, fd, floor);
        out.checked += 1;
        if e >= out.max_rel_err {
            out.max_rel_err = e;
            out.worst = Some((id, k, an, fd));
        }
    }
    out
}
