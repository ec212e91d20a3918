//! Central finite-difference gradient checking at 64-bit precision.

use crate::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_fd - g_ad| / max(1, |g_fd|, |g_ad|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` records the function on the supplied tape, given the parameter leaves
/// (registered with ids `0..params.len()`), and returns the scalar output.
/// With `max_coords` set, at most that many coordinates per parameter tensor
/// are perturbed, spread evenly over the tensor; otherwise all are.
pub fn grad_check<F>(params: &[Tensor<f64>], eps: f64, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(TensorError::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let run = |ps: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
        }
        v.ensure_finite("grad_check")?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = run(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for idx in coordinates(p.numel(), max_coords) {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let plus = eval(&run, &work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let minus = eval(&run, &work)?;
            work[pi].data_mut()[idx] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[pi].data()[idx];
            let err = (fd - ad).abs() / 1f64.max(fd.abs()).max(ad.abs());
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, idx));
            }
        }
    }
    Ok(report)
}

fn eval<R>(run: &R, ps: &[Tensor<f64>]) -> Result<f64>
where
    R: Fn(&[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>,
{
    let (tape, _, out) = run(ps)?;
    Ok(tape.value(out).item())
}

fn coordinates(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < numel => {
            // evenly spaced, offset so the picks do not all sit at channel starts
            let stride = numel as f64 / k as f64;
            (0..k)
                .map(|i| ((i as f64 + 0.5) * stride) as usize)
                .map(|i| i.min(numel - 1))
                .collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Tolerance for single-op checks.
pub const OP_TOL: f64 = 1e-6;

/// Deterministic values in `[-1, 1)` for check inputs.
pub fn check_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights, so every
/// output coordinate contributes a distinct amount.
pub fn project(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let w = tape.input(check_tensor(&[1, n], 999))?;
    let b = tape.input(Tensor::zeros(&[1]))?;
    tape.dense(x, w, b)
}

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    let r = check_tensor;
    vec![
        (
            "conv2d_same",
            vec![r(&[2, 4, 5], 1), r(&[3, 2, 3, 3], 2), r(&[3], 3)],
            |t, v| {
                let y = t.conv2d_same(v[0], v[1], Some(v[2]))?;
                project(t, y)
            },
        ),
        (
            "conv2d_same_wide",
            vec![r(&[2, 3, 3], 4), r(&[2, 2, 5, 5], 5)],
            |t, v| {
                let y = t.conv2d_same(v[0], v[1], None)?;
                project(t, y)
            },
        ),
        ("channel_max", vec![r(&[5, 3, 3], 6)], |t, v| {
            let y = t.channel_max(v[0])?;
            project(t, y)
        }),
        ("maxpool2d", vec![r(&[3, 5, 5], 7)], |t, v| {
            let y = t.maxpool2d(v[0])?;
            project(t, y)
        }),
        ("dense_relu", vec![r(&[4], 8), r(&[3, 4], 9), r(&[3], 10)], |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            let y = t.relu(y)?;
            project(t, y)
        }),
        ("softmax_cross_entropy", vec![r(&[8], 11)], |t, v| {
            t.softmax_cross_entropy(v[0], 3)
        }),
        (
            "concat_upsample_crop",
            vec![r(&[1, 3, 4], 12), r(&[2, 3, 4], 13)],
            |t, v| {
                let c = t.concat_channels(v[0], v[1])?;
                let u = t.upsample_nearest(c)?;
                let k = t.crop(u, 5, 7)?;
                project(t, k)
            },
        ),
        (
            "add_pick_cell_weighted_sum",
            vec![r(&[10, 4, 4], 14), r(&[10, 4, 4], 15)],
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let a = t.pick_cell(s, 2, 1)?;
                let b = t.pick_cell(v[0], 0, 3)?;
                let pa = project(t, a)?;
                let pb = project(t, b)?;
                t.weighted_sum(&[(pa, 0.7), (pb, -1.3)])
            },
        ),
    ]
}

/// Checks every tape op on fixed inputs. With `conv_fault` set, convolution
/// kernel gradients are deliberately scaled so the check must fail.
pub fn op_suite(conv_fault: Option<f64>) -> Result<Vec<(&'static str, GradCheckReport)>> {
    op_cases()
        .into_iter()
        .map(|(name, params, f)| {
            let report = grad_check(&params, 1e-6, None, |t, v| {
                if let Some(x) = conv_fault {
                    t.inject_conv_grad_fault(x);
                }
                f(t, v)
            })?;
            Ok((name, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_sum() {
        // theta . theta through a dense layer that reuses theta as both the
        // input and the weight row
        let theta = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(&[theta], 1e-5, None, |tape, vars| {
            let zero = tape.input(Tensor::zeros(&[1]))?;
            tape.dense(vars[0], vars[0], zero)
        })
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let r = grad_check(&[Tensor::zeros(&[1])], 1e-2, None, |tape, vars| {
            tape.weighted_sum(&[(vars[0], 1.0)])
        });
        assert!(matches!(r, Err(TensorError::InvalidArgument(_))));
    }

    #[test]
    fn coordinate_subsampling() {
        assert_eq!(coordinates(3, Some(10)), vec![0, 1, 2]);
        let picked = coordinates(100, Some(4));
        assert_eq!(picked, vec![12, 37, 62, 87]);
    }
}
