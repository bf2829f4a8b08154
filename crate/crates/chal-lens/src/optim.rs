//! Derivative-free minimization for the variance-component criteria.
//!
//! Nelder-Mead with box clamping, one restart around the incumbent, and
//! a coordinate-wise quadratic polish. The variance criteria are smooth
//! in at most four parameters, where this combination reliably reaches
//! optima to ~1e-8 in the parameters.

/// Options for [`minimize`].
#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Convergence tolerance on the criterion spread across the simplex.
    pub tol_f: f64,
    /// Convergence tolerance on the simplex diameter.
    pub tol_x: f64,
    /// Initial simplex step.
    pub init_step: f64,
    /// Box bounds applied to every coordinate.
    pub lower: f64,
    pub upper: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iter: 500,
            tol_f: 1e-9,
            tol_x: 1e-8,
            init_step: 0.8,
            lower: -15.0,
            upper: 15.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub n_iter: usize,
    pub n_eval: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64], opts: &OptimOptions) {
    for v in x.iter_mut() {
        *v = v.clamp(opts.lower, opts.upper);
    }
}

/// Minimizes `f` starting from `x0`. Zero-dimensional problems return
/// immediately with the single evaluation.
pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &OptimOptions,
) -> OptimResult {
    let d = x0.len();
    if d == 0 {
        let fv = f(&[]);
        return OptimResult {
            x: Vec::new(),
            f: fv,
            n_iter: 0,
            n_eval: 1,
            converged: true,
        };
    }
    let mut n_eval = 0usize;
    let mut eval = |x: &[f64], n_eval: &mut usize| -> f64 {
        *n_eval += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut start = x0.to_vec();
    clamp(&mut start, opts);
    let mut best_x = start.clone();
    let mut best_f = eval(&start, &mut n_eval);
    let mut total_iter = 0usize;
    let mut converged = false;

    let mut step = opts.init_step;
    for _restart in 0..2 {
        let (x, fv, iters, conv) = nelder_mead(
            &mut eval,
            &mut n_eval,
            &best_x,
            step,
            opts,
            opts.max_iter.saturating_sub(total_iter),
        );
        total_iter += iters;
        if fv < best_f {
            best_f = fv;
            best_x = x;
        }
        converged = conv;
        if total_iter >= opts.max_iter {
            break;
        }
        // restart with a tighter simplex around the incumbent
        step *= 0.1;
    }

    // coordinate-wise parabola refinement with shrinking probe steps;
    // accepts only improvements
    for h in [1e-4, 1e-4, 1e-5, 1e-5] {
        for j in 0..d {
            let xc = best_x[j];
            let mut probe = |v: f64, n_eval: &mut usize| {
                let mut x = best_x.clone();
                x[j] = v.clamp(opts.lower, opts.upper);
                (x.clone(), eval(&x, n_eval))
            };
            let (xp, fp) = probe(xc + h, &mut n_eval);
            let (xm, fm) = probe(xc - h, &mut n_eval);
            // vertex of the interpolating parabola
            let denom = fp - 2.0 * best_f + fm;
            if denom > 0.0 {
                let delta = 0.5 * h * (fm - fp) / denom;
                if delta.abs() < 10.0 * opts.init_step {
                    let (xv, fv) = probe(xc + delta, &mut n_eval);
                    if fv < best_f {
                        best_f = fv;
                        best_x = xv;
                        continue;
                    }
                }
            }
            if fp < best_f {
                best_f = fp;
                best_x = xp;
            } else if fm < best_f {
                best_f = fm;
                best_x = xm;
            }
        }
    }

    OptimResult {
        x: best_x,
        f: best_f,
        n_iter: total_iter,
        n_eval,
        converged,
    }
}

#[allow(clippy::type_complexity)]
fn nelder_mead<E: FnMut(&[f64], &mut usize) -> f64>(
    eval: &mut E,
    n_eval: &mut usize,
    x0: &[f64],
    step: f64,
    opts: &OptimOptions,
    max_iter: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    simplex.push(x0.to_vec());
    for j in 0..d {
        let mut v = x0.to_vec();
        v[j] += step;
        clamp(&mut v, opts);
        // degenerate vertex if the clamp undid the step
        if (v[j] - x0[j]).abs() < 1e-12 {
            v[j] = x0[j] - step;
            clamp(&mut v, opts);
        }
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, n_eval)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iter = 0usize;
    let mut converged = false;
    while iter < max_iter {
        iter += 1;
        // sort ascending by value, ties by vertex order for determinism
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[d] - values[0];
        let diameter = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread.abs() < opts.tol_f && diameter < opts.tol_x {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].clone();
        let mut reflected: Vec<f64> = centroid
            .iter()
            .zip(&worst)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        clamp(&mut reflected, opts);
        let f_ref = eval(&reflected, n_eval);

        if f_ref < values[0] {
            let mut expanded: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + gamma * (c - w))
                .collect();
            clamp(&mut expanded, opts);
            let f_exp = eval(&expanded, n_eval);
            if f_exp < f_ref {
                simplex[d] = expanded;
                values[d] = f_exp;
            } else {
                simplex[d] = reflected;
                values[d] = f_ref;
            }
        } else if f_ref < values[d - 1] {
            simplex[d] = reflected;
            values[d] = f_ref;
        } else {
            let mut contracted: Vec<f64> = centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + rho * (w - c))
                .collect();
            clamp(&mut contracted, opts);
            let f_con = eval(&contracted, n_eval);
            if f_con < values[d] {
                simplex[d] = contracted;
                values[d] = f_con;
            } else {
                // shrink towards the best vertex
                for k in 1..=d {
                    let best = simplex[0].clone();
                    for j in 0..d {
                        simplex[k][j] = best[j] + sigma * (simplex[k][j] - best[j]);
                    }
                    values[k] = eval(&simplex[k], n_eval);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=d {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best].clone(), values[best], iter, converged)
}
