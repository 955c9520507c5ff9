//! Finite-difference verification of the analytic backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Compares analytic gradients against central finite differences at f64.
///
/// `build` must deterministically assemble a scalar-valued graph from the
/// given parameter leaves. Up to `coords_per_param` coordinates are probed
/// per parameter (all of them for small tensors), sampled with `seed`.
/// Returns the maximum relative error
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over all probed coordinates.
///
/// A central difference only estimates a derivative where the function is
/// smooth across the probe interval; networks with ReLU units and max-pools
/// are piecewise smooth, and a coordinate whose `[x-h, x+h]` interval
/// straddles a kink yields an h-dependent quotient that measures nothing.
/// Each probe is therefore validated by re-running at h/16: if the two
/// quotients disagree, the interval is non-smooth and another coordinate is
/// drawn instead. The filter never looks at the analytic gradient, so it
/// cannot bias the comparison.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    h: f64,
    coords_per_param: usize,
    seed: u64,
    build: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.requires_grad = true;
            tape.leaf(&q)
        })
        .collect();
    let loss = build(&mut tape, &vars)?;
    if tape.shape(loss).len() != 1 {
        return Err(TensorError::NonScalarOutput);
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.requires_grad = false;
                tape.leaf(&q)
            })
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0f64;
    for pi in 0..params.len() {
        let len = params[pi].data.len();
        // Draw more candidates than needed so kink-straddling probes can be
        // replaced.
        let candidates: Vec<usize> = if len <= 4 * coords_per_param {
            let mut all: Vec<usize> = (0..len).collect();
            use rand::seq::SliceRandom;
            all.shuffle(&mut rng);
            all
        } else {
            rand::seq::index::sample(&mut rng, len, 4 * coords_per_param).into_vec()
        };
        let mut probed = 0usize;
        for ci in candidates {
            if probed >= coords_per_param.min(len) {
                break;
            }
            let quotient = |work: &mut Vec<Tensor<f64>>, step: f64| -> Result<f64, TensorError> {
                let orig = work[pi].data[ci];
                work[pi].data[ci] = orig + step;
                let plus = eval(work)?;
                work[pi].data[ci] = orig - step;
                let minus = eval(work)?;
                work[pi].data[ci] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let fd = quotient(&mut work, h)?;
            let fd_fine = quotient(&mut work, h / 16.0)?;
            if (fd - fd_fine).abs() / (fd.abs() + fd_fine.abs()).max(1e-8) > 1e-5 {
                // Non-smooth probe interval; the quotient is step-dependent
                // and not a derivative estimate here.
                continue;
            }
            probed += 1;
            let ad = analytic[pi][ci];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
