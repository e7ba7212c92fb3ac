//! Central finite-difference gradient checking: the independent oracle the
//! tape is validated against.
//!
//! A probe coordinate is excluded when either stencil evaluation crosses a
//! non-smooth decision boundary (ReLU sign flip, clip mask change,
//! absolute-value sign flip, different retained gate set): the tape's kink
//! signature is compared between the base and perturbed evaluations, and a
//! mismatch marks the coordinate as sitting on a kink, where central
//! differences are meaningless.

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;

/// Every check in the crate accepts a gradient when the relative error
/// stays at or below this.
pub const TOLERANCE: f64 = 1e-4;

/// |a − n| / max(|a|, |n|, 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

/// Relative error with an explicit denominator floor. The floor encodes
/// the scale below which the comparison is resolution-limited rather than
/// wrong: a central-difference quotient carries roundoff of order
/// ε·|f|/(2h) no matter how flat the function is, so callers probing a
/// large loss pass `stencil_noise / TOLERANCE` to keep the acceptance
/// threshold meaningful on near-zero gradients while still flagging any
/// disagreement the stencil can actually resolve.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    fn absorb(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Check the tape gradient of `build` against central differences at `point`,
/// for every coordinate of every input tensor. `build` must produce a scalar.
pub fn fd_gradcheck<F>(build: F, point: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad()))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &vars)?;
    let len = tape.value(out).len();
    if len != 1 {
        return Err(Error::BackwardNonScalar { len });
    }
    let base_sig = tape.kink_signature();
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    // Value-only evaluation at a perturbed point.
    let eval = |perturbed: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t)).collect::<Result<_>>()?;
        let out = build(&mut tape, &vars)?;
        Ok((tape.value(out)[0], tape.kink_signature()))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
    let mut work: Vec<Tensor> = point.to_vec();
    for j in 0..point.len() {
        for i in 0..point[j].len() {
            let orig = work[j].data()[i];
            work[j].data_mut()[i] = orig + h;
            let (f_plus, sig_plus) = eval(&work)?;
            work[j].data_mut()[i] = orig - h;
            let (f_minus, sig_minus) = eval(&work)?;
            work[j].data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic[j][i], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Run `fd_gradcheck` at `n_points` random points drawn by `draw`. A draw
/// whose check hits any kink is discarded and redrawn (up to `4·n_points`
/// draws total), so the aggregate covers exactly `n_points` kink-free points.
pub fn sweep<F, G>(build: F, draw: G, n_points: usize, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    G: Fn(u64) -> Vec<Tensor>,
{
    let mut total = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
    let mut accepted = 0usize;
    let mut draws = 0u64;
    let budget = (4 * n_points) as u64;
    while accepted < n_points {
        if draws >= budget {
            return Err(Error::InvalidArgument(format!(
                "could not find {n_points} kink-free points in {budget} draws"
            )));
        }
        let point = draw(draws);
        draws += 1;
        let rep = fd_gradcheck(&build, &point, h)?;
        if rep.skipped_kinks > 0 {
            total.skipped_kinks += rep.skipped_kinks;
            continue;
        }
        total.absorb(GradCheckReport { skipped_kinks: 0, ..rep });
        accepted += 1;
    }
    Ok(total)
}

/// Push every coordinate at least `min_abs` away from zero without changing
/// its sign. Draws feeding kinked rules are bounded away from the crease so
/// they are not burned on signature-mismatch rejections, and draws feeding
/// products are bounded so no coordinate's gradient vanishes into the
/// relative-error floor.
fn away_from_zero(mut t: Tensor, min_abs: f64) -> Tensor {
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + min_abs);
    }
    t
}

/// Wide step for rules whose reduced scalar is a polynomial of degree ≤ 2
/// along every coordinate: central differences then have zero truncation
/// error at any step, and a wide one shrinks the ε·|f|/(2h) roundoff to
/// ~1e-15, making those rules checkable far below the general tolerance.
pub const LINEAR_H: f64 = 0.25;

/// Marks a sweep case whose build, including the `l2_sq_mean` reduction, is
/// degree ≤ 2 in each input coordinate (true for every linear rule and for
/// the quadratic reductions themselves).
const LINEAR: bool = true;
const NONLINEAR: bool = false;

#[derive(Clone, Copy)]
struct SweepPlan {
    h: f64,
    linear_only: bool,
}

/// |v| + min, coordinate-wise: one sign for every product term. A signed
/// draw lets a convolution or matmul coordinate's directional derivative —
/// a sum of signed products — cancel arbitrarily close to zero, where the
/// stencil's own summation roundoff swamps any relative comparison. With
/// strictly positive factors the sums are bounded below and the roundoff-
/// scale check stays meaningful at every coordinate.
fn positive_bounded(mut t: Tensor, min: f64) -> Tensor {
    for v in t.data_mut() {
        *v = v.abs() + min;
    }
    t
}

fn sweep_case<F, G>(
    out: &mut Vec<(String, GradCheckReport)>,
    plan: SweepPlan,
    name: &str,
    linear: bool,
    n_points: usize,
    build: F,
    draw: G,
) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    G: Fn(u64) -> Vec<Tensor>,
{
    if plan.linear_only && !linear {
        return Ok(());
    }
    let rep = if plan.linear_only {
        let positive_draw = |i: u64| -> Vec<Tensor> {
            draw(i).into_iter().map(|t| positive_bounded(t, 0.2)).collect()
        };
        sweep(build, positive_draw, n_points, plan.h)?
    } else {
        sweep(build, draw, n_points, plan.h)?
    };
    out.push((name.to_string(), rep));
    Ok(())
}

fn op_sweeps_with(
    plan: SweepPlan,
    points_per_op: usize,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>> {
    if points_per_op == 0 {
        return Err(Error::InvalidArgument("points_per_op must be at least 1".into()));
    }
    let n = points_per_op;
    let mut out = Vec::new();

    let pair = move |tag: &str, shape: Vec<usize>, i: u64| {
        vec![
            Tensor::randn(shape.clone(), 1.0, seeds::derive2(seed, tag, 0, i)),
            Tensor::randn(shape, 1.0, seeds::derive2(seed, tag, 1, i)),
        ]
    };
    let single = move |tag: &str, shape: Vec<usize>, i: u64| {
        vec![Tensor::randn(shape, 1.0, seeds::derive2(seed, tag, 0, i))]
    };

    sweep_case(
        &mut out,
        plan,
        "add",
        LINEAR,
        n,
        |t, v| {
            let y = t.add(v[0], v[1])?;
            t.l2_sq_mean(y)
        },
        move |i| pair("add", vec![2, 3], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "add_scalar",
        LINEAR,
        n,
        |t, v| {
            let y = t.add_scalar(v[0], 0.7)?;
            t.l2_sq_mean(y)
        },
        move |i| single("add_scalar", vec![2, 3], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "sub",
        LINEAR,
        n,
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            t.l2_sq_mean(y)
        },
        move |i| pair("sub", vec![2, 3], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "mul",
        LINEAR,
        n,
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            t.l2_sq_mean(y)
        },
        move |i| pair("mul", vec![2, 3], i).into_iter().map(|t| away_from_zero(t, 0.2)).collect(),
    )?;
    sweep_case(
        &mut out,
        plan,
        "mul_scalar",
        LINEAR,
        n,
        |t, v| {
            let y = t.mul_scalar(v[0], -1.3)?;
            t.l2_sq_mean(y)
        },
        move |i| single("mul_scalar", vec![2, 3], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "power_square",
        NONLINEAR,
        n,
        |t, v| {
            let y = t.power(v[0], 2.0)?;
            t.l2_sq_mean(y)
        },
        move |i| vec![away_from_zero(single("power_square", vec![2, 3], i).remove(0), 0.2)],
    )?;
    sweep_case(
        &mut out,
        plan,
        "power_frac",
        NONLINEAR,
        n,
        |t, v| {
            let y = t.power(v[0], 1.5)?;
            t.l2_sq_mean(y)
        },
        // x^1.5 needs a positive domain; |draw| + 0.2 keeps it there.
        move |i| {
            let mut t = single("power_frac", vec![2, 3], i).remove(0);
            for v in t.data_mut() {
                *v = v.abs() + 0.2;
            }
            vec![t]
        },
    )?;
    sweep_case(
        &mut out,
        plan,
        "clip",
        NONLINEAR,
        n,
        |t, v| {
            let y = t.clip(v[0], -0.75, 0.75)?;
            t.l2_sq_mean(y)
        },
        move |i| single("clip", vec![2, 3], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "relu",
        NONLINEAR,
        n,
        |t, v| {
            let y = t.relu(v[0])?;
            t.l2_sq_mean(y)
        },
        move |i| vec![away_from_zero(single("relu", vec![2, 3], i).remove(0), 0.2)],
    )?;
    sweep_case(
        &mut out,
        plan,
        "matmul",
        LINEAR,
        n,
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.l2_sq_mean(y)
        },
        move |i| {
            vec![
                Tensor::randn(vec![3, 4], 1.0, seeds::derive2(seed, "matmul", 0, i)),
                Tensor::randn(vec![4, 2], 1.0, seeds::derive2(seed, "matmul", 1, i)),
            ]
        },
    )?;
    let conv_point = move |tag: &'static str| {
        move |i: u64| {
            vec![
                Tensor::randn(vec![2, 6, 6], 1.0, seeds::derive2(seed, tag, 0, i)),
                Tensor::randn(vec![3, 2, 3, 3], 0.5, seeds::derive2(seed, tag, 1, i)),
            ]
        }
    };
    sweep_case(
        &mut out,
        plan,
        "conv2d_same",
        LINEAR,
        n,
        |t, v| {
            let y = t.conv2d(v[0], v[1], 1, Padding::Same)?;
            t.l2_sq_mean(y)
        },
        conv_point("conv2d_same"),
    )?;
    sweep_case(
        &mut out,
        plan,
        "conv2d_valid",
        LINEAR,
        n,
        |t, v| {
            let y = t.conv2d(v[0], v[1], 1, Padding::Valid)?;
            t.l2_sq_mean(y)
        },
        conv_point("conv2d_valid"),
    )?;
    sweep_case(
        &mut out,
        plan,
        "conv2d_stride2",
        LINEAR,
        n,
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, Padding::Same)?;
            t.l2_sq_mean(y)
        },
        conv_point("conv2d_stride2"),
    )?;
    sweep_case(
        &mut out,
        plan,
        "softmax",
        NONLINEAR,
        n,
        |t, v| {
            let p = t.softmax(v[0])?;
            t.l2_sq_mean(p)
        },
        move |i| single("softmax", vec![5], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "gather_rows",
        LINEAR,
        n,
        |t, v| {
            // a repeated row exercises gradient accumulation across gathers
            let y = t.gather_rows(v[0], &[2, 0, 2])?;
            t.l2_sq_mean(y)
        },
        move |i| single("gather_rows", vec![4, 3], i),
    )?;
    sweep_case(&mut out, plan, "sum", LINEAR, n, |t, v| t.sum(v[0]), move |i| single("sum", vec![2, 3], i))?;
    sweep_case(&mut out, plan, "mean", LINEAR, n, |t, v| t.mean(v[0]), move |i| single("mean", vec![2, 3], i))?;
    sweep_case(
        &mut out,
        plan,
        "l1_mean",
        NONLINEAR,
        n,
        |t, v| t.l1_mean(v[0]),
        move |i| vec![away_from_zero(single("l1_mean", vec![2, 3], i).remove(0), 0.2)],
    )?;
    sweep_case(
        &mut out,
        plan,
        "l2_sq_mean",
        LINEAR,
        n,
        |t, v| t.l2_sq_mean(v[0]),
        move |i| single("l2_sq_mean", vec![2, 3], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "add_channel",
        LINEAR,
        n,
        |t, v| {
            let y = t.add_channel(v[0], v[1])?;
            t.l2_sq_mean(y)
        },
        move |i| {
            vec![
                Tensor::randn(vec![3, 4, 4], 1.0, seeds::derive2(seed, "add_channel", 0, i)),
                Tensor::randn(vec![3], 1.0, seeds::derive2(seed, "add_channel", 1, i)),
            ]
        },
    )?;
    sweep_case(
        &mut out,
        plan,
        "mul_channel",
        LINEAR,
        n,
        |t, v| {
            let y = t.mul_channel(v[0], v[1])?;
            t.l2_sq_mean(y)
        },
        move |i| {
            vec![
                away_from_zero(
                    Tensor::randn(vec![3, 4, 4], 1.0, seeds::derive2(seed, "mul_channel", 0, i)),
                    0.2,
                ),
                away_from_zero(
                    Tensor::randn(vec![3], 1.0, seeds::derive2(seed, "mul_channel", 1, i)),
                    0.2,
                ),
            ]
        },
    )?;
    sweep_case(
        &mut out,
        plan,
        "spatial_mean",
        LINEAR,
        n,
        |t, v| {
            let y = t.spatial_mean(v[0])?;
            t.l2_sq_mean(y)
        },
        move |i| single("spatial_mean", vec![3, 4, 4], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "upsample2x",
        LINEAR,
        n,
        |t, v| {
            let y = t.upsample2x(v[0])?;
            t.l2_sq_mean(y)
        },
        move |i| single("upsample2x", vec![2, 3, 3], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "avg_pool2x",
        LINEAR,
        n,
        |t, v| {
            let y = t.avg_pool2x(v[0])?;
            t.l2_sq_mean(y)
        },
        move |i| single("avg_pool2x", vec![2, 4, 4], i),
    )?;
    sweep_case(
        &mut out,
        plan,
        "reshape",
        LINEAR,
        n,
        |t, v| {
            let y = t.reshape(v[0], vec![3, 4])?;
            t.l2_sq_mean(y)
        },
        move |i| single("reshape", vec![2, 6], i),
    )?;
    // The straight-through gate rule is checkable against the function it is
    // actually the derivative of: the renormalization with the normalizer
    // held constant. This closes the loop the plain `topk_renorm` exclusion
    // leaves open.
    sweep_case(
        &mut out,
        plan,
        "topk_frozen",
        NONLINEAR,
        n,
        |t, v| {
            let y = t.topk_renorm_frozen(v[0], &[3, 1], 0.25, 2.5)?;
            t.l2_sq_mean(y)
        },
        move |i| single("topk_frozen", vec![5], i),
    )?;

    Ok(out)
}

/// Sweep every differentiation rule over `points_per_op` random points each,
/// reducing non-scalar outputs through `l2_sq_mean` so upstream gradients are
/// position-dependent (misrouted backward rules cannot hide behind a uniform
/// seed gradient). Two rules are excluded because their defined gradient
/// intentionally differs from the true derivative, which is exactly what
/// finite differences measure: `detach` (defined gradient zero) and
/// `topk_renorm` (straight-through with frozen normalizer; its defining
/// frozen forward is covered as `topk_frozen`).
///
/// Draws feeding kinked or product-shaped rules are bounded away from zero so
/// that kink rejections don't burn the draw budget and no coordinate's true
/// gradient vanishes into the relative-error floor.
pub fn standard_op_sweeps(
    points_per_op: usize,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>> {
    op_sweeps_with(SweepPlan { h: DEFAULT_H, linear_only: false }, points_per_op, seed)
}

/// Sweep only the rules whose reduced scalar is degree ≤ 2 per coordinate,
/// using the wide `LINEAR_H` step. With zero truncation error these must
/// agree with the tape to roundoff (~1e-12), a far stronger statement than
/// the general tolerance — any systematic slip in a linear rule shows up
/// here even when it hides inside 1e-4.
pub fn linear_op_sweeps(points_per_op: usize, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    op_sweeps_with(SweepPlan { h: LINEAR_H, linear_only: true }, points_per_op, seed)
}

/// Negative control proving the harness can fail: the analytic gradient of a
/// doubling rule is deliberately scaled by 1.5 on coordinate 0 before the
/// comparison, so a healthy checker must report a relative error near 1/3.
pub fn corrupted_rule_report(n_points: usize, seed: u64) -> Result<GradCheckReport> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be at least 1".into()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t)?;
        let y = tape.mul_scalar(v, 2.0)?;
        let out = tape.l2_sq_mean(y)?;
        Ok(tape.value(out)[0])
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
    for p in 0..n_points {
        let x = away_from_zero(
            Tensor::randn(vec![4], 1.0, seeds::derive1(seed, "corrupt", p as u64)),
            0.2,
        );
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_requires_grad())?;
        let y = tape.mul_scalar(v, 2.0)?;
        let out = tape.l2_sq_mean(y)?;
        tape.backward(out)?;
        let mut analytic = tape
            .grad(v)
            .ok_or_else(|| Error::InvalidArgument("missing gradient in corrupted-rule probe".into()))?
            .to_vec();
        analytic[0] *= 1.5; // the deliberate corruption under test
        let mut work = x;
        for c in 0..work.len() {
            let orig = work.data()[c];
            work.data_mut()[c] = orig + DEFAULT_H;
            let f_plus = eval(&work)?;
            work.data_mut()[c] = orig - DEFAULT_H;
            let f_minus = eval(&work)?;
            work.data_mut()[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * DEFAULT_H);
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic[c], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        // f(x) = Σ 3x: central differences are exact for linear maps.
        let rep = fd_gradcheck(
            |tape, vars| {
                let y = tape.mul_scalar(vars[0], 3.0)?;
                tape.sum(y)
            },
            &[Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.01]).unwrap()],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-10, "{rep:?}");
        assert_eq!(rep.checked, 4);
    }

    #[test]
    fn cube_at_two() {
        let rep = fd_gradcheck(
            |tape, vars| {
                let y = tape.power(vars[0], 3.0)?;
                tape.sum(y)
            },
            &[Tensor::new(vec![1], vec![2.0]).unwrap()],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn square_grad_at_quarter() {
        // d(x²)/dx at 0.25 = 0.5, matched by central differences within 1e-8
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::new(vec![1], vec![0.25]).unwrap().with_requires_grad())
            .unwrap();
        let y = tape.power(x, 2.0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap()[0];
        assert!((g - 0.5).abs() < 1e-12);

        let rep = fd_gradcheck(
            |tape, vars| {
                let y = tape.power(vars[0], 2.0)?;
                tape.sum(y)
            },
            &[Tensor::new(vec![1], vec![0.25]).unwrap()],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn relu_at_zero_is_excluded_as_a_kink() {
        let rep = fd_gradcheck(
            |tape, vars| {
                let y = tape.relu(vars[0])?;
                tape.sum(y)
            },
            &[Tensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap()],
            DEFAULT_H,
        )
        .unwrap();
        // the exactly-zero coordinate straddles the sign flip
        assert_eq!(rep.skipped_kinks, 1, "{rep:?}");
        assert_eq!(rep.checked, 2);
        assert!(rep.max_rel_err < 1e-8);
    }

    #[test]
    fn matmul_random_3x4_by_4x2() {
        let a = Tensor::randn(vec![3, 4], 1.0, 11);
        let b = Tensor::randn(vec![4, 2], 1.0, 12);
        let rep = fd_gradcheck(
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1])?;
                tape.sum(c)
            },
            &[a, b],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
        assert_eq!(rep.checked, 12 + 8);
    }

    #[test]
    fn conv_random_2x8x8_with_3x2x3x3() {
        let img = Tensor::randn(vec![2, 8, 8], 1.0, 21);
        let ker = Tensor::randn(vec![3, 2, 3, 3], 0.5, 22);
        let rep = fd_gradcheck(
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], 1, Padding::Same)?;
                tape.mean(y)
            },
            &[img, ker],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn composed_conv_relu_mean_pipeline() {
        let img = Tensor::randn(vec![1, 6, 6], 1.0, 31);
        let k1 = Tensor::randn(vec![2, 1, 3, 3], 0.5, 32);
        let k2 = Tensor::randn(vec![1, 2, 3, 3], 0.5, 33);
        let rep = fd_gradcheck(
            |tape, vars| {
                let h1 = tape.conv2d(vars[0], vars[1], 1, Padding::Same)?;
                let a1 = tape.relu(h1)?;
                let h2 = tape.conv2d(a1, vars[2], 1, Padding::Same)?;
                tape.mean(h2)
            },
            &[img, k1, k2],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
    }

    #[test]
    fn fanout_dag_matches_differences() {
        // y = x·x + x: the same leaf feeds two consumers.
        let rep = fd_gradcheck(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                let y = tape.add(sq, vars[0])?;
                tape.sum(y)
            },
            &[Tensor::new(vec![3], vec![3.0, -0.5, 1.25]).unwrap()],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn softmax_true_jacobian() {
        let probe = Tensor::new(vec![3], vec![0.2, -1.0, 0.7]).unwrap();
        let rep = fd_gradcheck(
            |tape, vars| {
                let p = tape.softmax(vars[0])?;
                let c = tape.constant(&probe)?;
                let y = tape.mul(p, c)?;
                tape.sum(y)
            },
            &[Tensor::new(vec![3], vec![2.0, 1.0, 0.0]).unwrap()],
            DEFAULT_H,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }

    #[test]
    fn op_sweeps_cover_every_rule_within_tolerance() {
        let reps = standard_op_sweeps(2, 77).unwrap();
        let names: Vec<&str> = reps.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "add",
                "add_scalar",
                "sub",
                "mul",
                "mul_scalar",
                "power_square",
                "power_frac",
                "clip",
                "relu",
                "matmul",
                "conv2d_same",
                "conv2d_valid",
                "conv2d_stride2",
                "softmax",
                "gather_rows",
                "sum",
                "mean",
                "l1_mean",
                "l2_sq_mean",
                "add_channel",
                "mul_channel",
                "spatial_mean",
                "upsample2x",
                "avg_pool2x",
                "reshape",
                "topk_frozen",
            ]
        );
        for (name, rep) in &reps {
            assert!(rep.checked > 0, "{name}: {rep:?}");
            assert!(rep.max_rel_err <= TOLERANCE, "{name}: {rep:?}");
        }
    }

    #[test]
    fn linear_rules_agree_to_roundoff() {
        let reps = linear_op_sweeps(5, 123).unwrap();
        let names: Vec<&str> = reps.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "add",
                "add_scalar",
                "sub",
                "mul",
                "mul_scalar",
                "matmul",
                "conv2d_same",
                "conv2d_valid",
                "conv2d_stride2",
                "gather_rows",
                "sum",
                "mean",
                "l2_sq_mean",
                "add_channel",
                "mul_channel",
                "spatial_mean",
                "upsample2x",
                "avg_pool2x",
                "reshape",
            ]
        );
        for (name, rep) in &reps {
            assert!(rep.checked > 0, "{name}: {rep:?}");
            assert!(rep.max_rel_err < 1e-10, "{name}: {rep:?}");
        }
    }

    #[test]
    fn op_sweeps_reject_zero_points() {
        assert!(standard_op_sweeps(0, 1).is_err());
    }

    #[test]
    fn corrupted_rule_is_loudly_wrong() {
        let rep = corrupted_rule_report(3, 5).unwrap();
        // honest coordinates stay clean; the ×1.5 coordinate reads ≈ 1/3 off
        assert!(rep.max_rel_err > 0.2 && rep.max_rel_err < 0.4, "{rep:?}");
        assert_eq!(rep.checked, 12);
    }

    #[test]
    fn sweep_rejects_kinky_draws() {
        // Draw index 0 lands exactly on the ReLU kink and must be discarded;
        // the sweep still completes 2 kink-free points.
        let rep = sweep(
            |tape, vars| {
                let y = tape.relu(vars[0])?;
                tape.sum(y)
            },
            |i| {
                if i == 0 {
                    vec![Tensor::new(vec![1], vec![0.0]).unwrap()]
                } else {
                    vec![Tensor::new(vec![1], vec![i as f64]).unwrap()]
                }
            },
            2,
            DEFAULT_H,
        )
        .unwrap();
        assert_eq!(rep.checked, 2);
        assert!(rep.skipped_kinks >= 1);
        assert!(rep.max_rel_err < 1e-9);
    }
}
