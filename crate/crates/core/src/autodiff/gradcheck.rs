use super::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor so vanishing gradients compare absolutely.
    pub floor: f64,
    /// Check at most this many evenly strided elements per input.
    pub max_elems_per_input: Option<usize>,
    /// Ridders' extrapolation over central differences shrinking from `h`,
    /// keeping the most self-consistent estimate. Up to 20 evaluations per
    /// element instead of 2.
    pub ridders: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_elems_per_input: None,
            ridders: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences, elementwise. `rel = |a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take_or_zeros(v)).collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = match opts.max_elems_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let x0 = input.data()[e];
            let mut central = |h: f64| -> Result<f64> {
                work[ii].data_mut()[e] = x0 + h;
                let fp = eval(&work)?;
                work[ii].data_mut()[e] = x0 - h;
                let fm = eval(&work)?;
                work[ii].data_mut()[e] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = if opts.ridders {
                ridders(&mut central, opts.h)?
            } else {
                central(opts.h)?
            };
            let a = analytic[ii].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if !(rel < opts.tol) {
                report.failures.push(GradMismatch {
                    input: ii,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Ridders' polynomial extrapolation of `central(h)` to `h → 0`.
fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<f64> {
    const CON: f64 = 1.4;
    const NTAB: usize = 10;
    let con2 = CON * CON;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = central(h)?;
    let (mut best, mut err) = (a[0][0], f64::INFINITY);
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = central(h)?;
        let mut fac = con2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= con2;
            let e = (a[j][i] - a[j - 1][i])
                .abs()
                .max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_f64(&[3, 2], &[0.1, -2.0, 3.5, 4.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.sum(v).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[1.0; 6]);
        let r = grad_check(|g, v| g.sum(v[0]), &[x], GradCheckOptions::default()).unwrap();
        assert!(r.passed());
    }

    #[test]
    fn mse_to_zero_gradient() {
        let data = [0.5, -1.5, 2.0, 4.0];
        let x = Tensor::from_f64(&[4], &data).unwrap();
        let zero = Tensor::zeros(&[4]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let l = g.mse_loss(v, &zero).unwrap();
        let grads = g.backward(l).unwrap();
        let expected: Vec<f64> = data.iter().map(|x| 2.0 * x / 4.0).collect();
        assert_eq!(grads.get(v).unwrap().data(), expected.as_slice());
        let r = grad_check(
            move |g, v| g.mse_loss(v[0], &zero),
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // relu at exactly 0 has a one-sided derivative; central differences see 0.5.
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0])?;
                g.sum(y)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures[0].element, 0);
    }

    #[test]
    fn ridders_beats_plain_central_difference() {
        let mut central =
            |h: f64| -> Result<f64> { Ok(((1.0 + h).exp() - (1.0 - h).exp()) / (2.0 * h)) };
        let e = std::f64::consts::E;
        assert!((ridders(&mut central, 1e-1).unwrap() - e).abs() < 1e-12);
        assert!((central(1e-1).unwrap() - e).abs() > 1e-3);
    }
}
