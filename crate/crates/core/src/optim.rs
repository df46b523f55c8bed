//! Box-constrained Nelder–Mead simplex search.
//!
//! Uses the dimension-adaptive coefficients of Gao and Han, which behave much
//! better than the textbook ones once the dimension exceeds a handful. Points are
//! projected onto the box after every move.

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of objective values over the simplex falls below this.
    pub f_tol: f64,
    /// Stop when the simplex diameter (max-norm) falls below this.
    pub x_tol: f64,
    /// Initial simplex edge as a fraction of each box width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            f_tol: 1e-7,
            x_tol: 1e-5,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimize `f` over the box `[lo, hi]` starting from `x0`.
///
/// Non-finite objective values are treated as `+∞`, so the search simply moves
/// away from regions where the objective cannot be evaluated.
pub fn minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert!(n > 0 && lo.len() == n && hi.len() == n);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let nf = n as f64;
    let (a_refl, b_exp, c_con, d_shr) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);
    let d_shr = if n == 1 { 0.5 } else { d_shr };

    let mut start = x0.to_vec();
    project(&mut start, lo, hi);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for i in 0..n {
        let mut p = start.clone();
        let step = opts.initial_step * (hi[i] - lo[i]);
        // Step inward if the start sits on the upper bound.
        if p[i] + step <= hi[i] {
            p[i] += step;
        } else {
            p[i] -= step;
        }
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let diameter = simplex[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread.abs() <= opts.f_tol * (1.0 + values[0].abs()))
            || diameter <= opts.x_tol
        {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for p in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / nf;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut p, lo, hi);
            p
        };

        let xr = along(a_refl);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(a_refl * b_exp);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(a_refl * c_con);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-c_con);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=n {
            for (v, b) in simplex[i].iter_mut().zip(&best) {
                *v = b + d_shr * (*v - b);
            }
            values[i] = eval(&simplex[i], &mut evals);
        }
    }

    let (ibest, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty simplex");
    Minimum {
        x: simplex[ibest].clone(),
        f: values[ibest],
        evals,
        converged,
    }
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section<F>(mut f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() <= tol * (1.0 + c.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let m = minimize(
            |x| (x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.7).powi(2) + (x[2] - 1.1).powi(2),
            &[0.0, 0.0, 0.0],
            &[-2.0; 3],
            &[2.0; 3],
            &NelderMeadOptions { f_tol: 1e-14, x_tol: 1e-9, ..Default::default() },
        );
        assert!(m.converged);
        for (v, t) in m.x.iter().zip([0.3, -0.7, 1.1]) {
            assert!((v - t).abs() < 1e-4, "{:?}", m.x);
        }
    }

    #[test]
    fn respects_bounds() {
        let m = minimize(|x| x[0] + x[1], &[0.5, 0.5], &[0.0, 0.2], &[1.0, 1.0], &Default::default());
        assert!(m.x[0] >= 0.0 && m.x[1] >= 0.2);
        assert!(m.f < 0.2 + 1e-4);
    }

    #[test]
    fn rosenbrock() {
        let m = minimize(
            |x| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2),
            &[-1.2, 1.0],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &NelderMeadOptions { max_evals: 5000, f_tol: 1e-16, x_tol: 1e-10, initial_step: 0.05 },
        );
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 2e-3, "{:?}", m);
    }

    #[test]
    fn nan_treated_as_infinite() {
        let m = minimize(
            |x| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.5).powi(2) },
            &[1.0],
            &[-1.0],
            &[2.0],
            &Default::default(),
        );
        assert!((m.x[0] - 0.5).abs() < 1e-2);
    }

    #[test]
    fn golden_section_parabola() {
        let (x, _) = golden_section(|x| (x - 1.234).powi(2), 0.0, 3.0, 1e-10, 200);
        assert!((x - 1.234).abs() < 1e-6);
    }
}
