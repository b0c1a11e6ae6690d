//! Numerical verification helpers: central finite differences against
//! the analytic gradients produced by [`crate::graph::Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GradAccum, ParamId, ParamStore, Var};

/// Central-difference derivative of `f` with respect to one coordinate of
/// one parameter, with the step scaled to the coordinate's magnitude.
pub fn central_diff(
    store: &mut ParamStore,
    id: ParamId,
    coord: (usize, usize),
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let x0 = store.value(id)[[coord.0, coord.1]];
    let h = 1e-6 * (1.0 + x0.abs());
    store.value_mut(id)[[coord.0, coord.1]] = x0 + h;
    let fp = f(store);
    store.value_mut(id)[[coord.0, coord.1]] = x0 - h;
    let fm = f(store);
    store.value_mut(id)[[coord.0, coord.1]] = x0;
    (fp - fm) / (2.0 * h)
}

/// Checks the analytic gradient of a scalar-valued graph builder against
/// central differences at `probes` random coordinates per parameter.
/// Returns the maximum relative error observed.
pub fn gradcheck_scalar(
    store: &mut ParamStore,
    ids: &[ParamId],
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
    probes: usize,
    seed: u64,
) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).expect("backward");
    let mut accum = GradAccum::new(store);
    accum.absorb(grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for &id in ids {
        let (rows, cols) = {
            let v = store.value(id);
            (v.nrows(), v.ncols())
        };
        for _ in 0..probes {
            let coord = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            let analytic = accum.get(id).map_or(0.0, |m| m[[coord.0, coord.1]]);
            let numeric = central_diff(store, id, coord, |s| {
                let mut g = Graph::new();
                let out = build(&mut g, s);
                g.scalar(out)
            });
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
