//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates to probe; every coordinate is probed when fewer exist.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Largest `|a − n|` over the probed coordinates.
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
}

/// Compares the tape gradient of `build` against `(f(θ+ε) − f(θ−ε)) / 2ε` on a random
/// subsample of coordinates drawn from `params`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`. A parameter absent from the
/// analytic gradient set counts as an analytic zero.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    cfg: GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var)>,
{
    let sizes: Vec<usize> = params.iter().map(|&id| store.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Ok(GradCheckReport::default());
    }

    let (graph, root) = build(store)?;
    let analytic = graph.backward(root)?;
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<usize> = if cfg.samples >= total {
        (0..total).collect()
    } else {
        index::sample(&mut rng, total, cfg.samples).into_vec()
    };
    picks.sort_unstable();

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for flat in picks {
        let (slot, offset) = locate(&sizes, flat);
        let id = params[slot];
        let a = analytic.get(id).map_or(0.0, |g| g.data()[offset]);

        let original = work.get(id).data()[offset];
        work.get_mut(id).data_mut()[offset] = original + cfg.eps;
        let plus = eval(&work, &build)?;
        work.get_mut(id).data_mut()[offset] = original - cfg.eps;
        let minus = eval(&work, &build)?;
        work.get_mut(id).data_mut()[offset] = original;

        let n = (plus - minus) / (2.0 * cfg.eps);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.name(id).to_string(), offset));
            report.worst_values = Some((a, n));
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var)>,
{
    let (g, root) = build(store)?;
    Ok(g.value(root).get(0, 0))
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (slot, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (slot, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond parameter sizes")
}
