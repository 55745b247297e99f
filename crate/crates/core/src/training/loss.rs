use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{Graph, Real, Tensor, Var};
use crate::interpolant::TimeGap;
use crate::network::BranchOutputs;

/// Per-term record of one evaluation of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_branch_sup: Vec<f64>,
    pub per_vera_acc: Vec<f64>,
    pub deep_star: f64,
    pub acc_total: f64,
    pub total: f64,
    pub lambda: f64,
    pub betas: Vec<f64>,
}

/// Weighted sum of per-branch mean squared velocity errors.
/// Returns `(deep_star, per_branch_sup)`.
pub fn deep_supervision_loss<T: Real>(v_preds: &[Tensor<T>], target: &Tensor<T>, betas: &[f64]) -> Result<(f64, Vec<f64>)> {
    if v_preds.len() != betas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} supervision weights",
            v_preds.len(),
            betas.len()
        )));
    }
    let mut per_branch = Vec::with_capacity(v_preds.len());
    for v in v_preds {
        let diff = v.sub(target)?;
        per_branch.push(diff.sum_squares().as_f64() / diff.numel().max(1) as f64);
    }
    let deep_star = per_branch.iter().zip(betas).map(|(l, b)| b * l).sum();
    Ok((deep_star, per_branch))
}

/// Two-term Taylor step `x + v·d + ½·a·d²` with one gap per sample.
pub fn second_order_step<T: Real>(x_t: &Tensor<T>, v: &Tensor<T>, a: &Tensor<T>, d: &[TimeGap]) -> Result<Tensor<T>> {
    if x_t.shape() != v.shape() {
        return Err(Error::shape("second_order_step", x_t.shape(), v.shape()));
    }
    if x_t.shape() != a.shape() {
        return Err(Error::shape("second_order_step", x_t.shape(), a.shape()));
    }
    if d.len() != x_t.rows() {
        return Err(Error::shape("second_order_step", x_t.shape(), &[d.len()]));
    }
    let n = x_t.row_len();
    let half = T::of(0.5);
    let mut out = Vec::with_capacity(x_t.numel());
    for (i, gap) in d.iter().enumerate() {
        let dd = T::of(gap.value());
        let r = i * n..(i + 1) * n;
        out.extend(
            x_t.data()[r.clone()]
                .iter()
                .zip(&v.data()[r.clone()])
                .zip(&a.data()[r])
                .map(|((&x, &vv), &aa)| x + vv * dd + half * aa * dd * dd),
        );
    }
    Tensor::from_vec(x_t.shape(), out)
}

/// `Σ_i mean‖step(x_{t_i}, v_i, a_i, −t_i) − x0‖²` over refiner sites.
///
/// `x_ti[i]` is the interpolant at site `i`'s times and `site_times[i]` the
/// per-sample `t_i`. Returns `(acc_total, per_vera_acc)`.
pub fn acceleration_loss<T: Real>(
    x0: &Tensor<T>,
    x_ti: &[Tensor<T>],
    v: &[Tensor<T>],
    a: &[Tensor<T>],
    site_times: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    if a.len() != x_ti.len() || a.len() != site_times.len() || v.len() < a.len() {
        return Err(Error::InvalidArgument("missing acceleration outputs".into()));
    }
    let mut terms = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let gaps: Vec<TimeGap> = site_times[i].iter().map(|&t| TimeGap(-t)).collect();
        let pred = second_order_step(&x_ti[i], &v[i], &a[i], &gaps)?;
        let diff = pred.sub(x0)?;
        terms.push(diff.sum_squares().as_f64() / diff.numel().max(1) as f64);
    }
    Ok((terms.iter().sum(), terms))
}

pub fn total_loss(deep_star: f64, acc_total: f64, lambda: f64) -> f64 {
    deep_star + lambda * acc_total
}

/// Graph handles of the training objective.
pub struct ObjectiveVars {
    pub total: Var,
    pub deep_star: Var,
    pub acc_total: Option<Var>,
    pub per_branch_sup: Vec<Var>,
    pub per_vera_acc: Vec<Var>,
}

/// Build `L_total = Σ β_i·MSE(v_i, V) + λ·Σ_sites MSE(step(x_{t_i}, v_i, a_i, −t_i), x0)`
/// on top of a recorded forward pass.
///
/// `times[i][b]` are branch times; `x_ti[i]` the interpolant at branch `i`'s times.
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    outputs: &BranchOutputs,
    x0: &Tensor<T>,
    target: &Tensor<T>,
    x_ti: &[Tensor<T>],
    times: &[Vec<f64>],
    betas: &[f64],
    lambda: f64,
) -> Result<ObjectiveVars> {
    if betas.len() != outputs.v.len() {
        return Err(Error::Config(format!(
            "{} supervision weights for {} branches",
            betas.len(),
            outputs.v.len()
        )));
    }
    let target_v = g.constant(target.clone());
    let mut per_branch_sup = Vec::with_capacity(betas.len());
    let mut deep_star: Option<Var> = None;
    for (&v, &beta) in outputs.v.iter().zip(betas) {
        let l = g.mse(v, target_v)?;
        per_branch_sup.push(l);
        let w = g.scale(l, T::of(beta));
        deep_star = Some(match deep_star {
            None => w,
            Some(acc) => g.add(acc, w)?,
        });
    }
    let deep_star = deep_star.expect("at least one branch");

    let x0_v = g.constant(x0.clone());
    let mut per_vera_acc = Vec::with_capacity(outputs.a.len());
    let mut acc_total: Option<Var> = None;
    for (site, &a) in outputs.a.iter().enumerate() {
        let xt = &x_ti[site];
        let d: Vec<T> = times[site].iter().map(|&t| T::of(-t)).collect();
        let half_d2: Vec<T> = times[site].iter().map(|&t| T::of(0.5 * t * t)).collect();
        let d = g.constant(xt.broadcast_rows_like(&d)?);
        let half_d2 = g.constant(xt.broadcast_rows_like(&half_d2)?);
        let xt_v = g.constant(xt.clone());
        let vd = g.mul(outputs.v[site], d)?;
        let ad = g.mul(a, half_d2)?;
        let pred = g.add(xt_v, vd)?;
        let pred = g.add(pred, ad)?;
        let term = g.mse(pred, x0_v)?;
        per_vera_acc.push(term);
        acc_total = Some(match acc_total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = match acc_total {
        None => deep_star,
        Some(acc) => {
            let s = g.scale(acc, T::of(lambda));
            g.add(deep_star, s)?
        }
    };
    Ok(ObjectiveVars {
        total,
        deep_star,
        acc_total,
        per_branch_sup,
        per_vera_acc,
    })
}

impl ObjectiveVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, betas: &[f64], lambda: f64) -> LossBreakdown {
        let item = |v: Var| g.value(v).item().as_f64();
        LossBreakdown {
            per_branch_sup: self.per_branch_sup.iter().map(|&v| item(v)).collect(),
            per_vera_acc: self.per_vera_acc.iter().map(|&v| item(v)).collect(),
            deep_star: item(self.deep_star),
            acc_total: self.acc_total.map_or(0.0, item),
            total: item(self.total),
            lambda,
            betas: betas.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let v = t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]);
        let (ds, per) = deep_supervision_loss(&[v.clone(), v.clone()], &v, &[0.2, 1.0]).unwrap();
        assert_eq!(ds, 0.0);
        assert_eq!(per, vec![0.0, 0.0]);
    }

    #[test]
    fn weighted_sum_of_branch_errors() {
        let target = t(&[1, 2], &[0.0, 0.0]);
        // MSEs 2.0 and 3.0
        let a = t(&[1, 2], &[2.0f64.sqrt(), -(2.0f64.sqrt())]);
        let b = t(&[1, 2], &[3.0f64.sqrt(), 3.0f64.sqrt()]);
        let (ds, per) = deep_supervision_loss(&[a, b], &target, &[0.2, 1.0]).unwrap();
        assert!((per[0] - 2.0).abs() < 1e-12 && (per[1] - 3.0).abs() < 1e-12);
        assert!((ds - 3.4).abs() < 1e-12);
    }

    #[test]
    fn single_branch_is_plain_flow_matching() {
        let target = t(&[2, 1], &[1.0, 3.0]);
        let pred = t(&[2, 1], &[0.0, 0.0]);
        let (ds, _) = deep_supervision_loss(&[pred], &target, &[1.0]).unwrap();
        assert_eq!(ds, 5.0);
    }

    #[test]
    fn second_order_step_examples() {
        // x0=(1,0), x1=(0,1), t=0.3
        let xt = t(&[1, 2], &[0.7, 0.3]);
        let v = t(&[1, 2], &[-1.0, 1.0]);
        let a = t(&[1, 2], &[0.0, 0.0]);
        let out = second_order_step(&xt, &v, &a, &[TimeGap(-0.3)]).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15 && out.data()[1].abs() < 1e-15);

        let out = second_order_step(&t(&[1, 1], &[1.0]), &t(&[1, 1], &[2.0]), &t(&[1, 1], &[4.0]), &[TimeGap(0.5)]).unwrap();
        assert_eq!(out.data(), &[2.5]);

        let out = second_order_step(&xt, &v, &t(&[1, 2], &[9.0, 9.0]), &[TimeGap(0.0)]).unwrap();
        assert_eq!(out, xt);
        assert!(second_order_step(&xt, &t(&[2], &[0.0, 0.0]), &a, &[TimeGap(0.0)]).is_err());
    }

    #[test]
    fn acceleration_loss_scalar_example() {
        // x0=0, x1=2, t=0.5 → x_t=1; v=2, a=4, d=−0.5 → pred 0.5, term 0.25
        let x0 = t(&[1, 1], &[0.0]);
        let (total, terms) = acceleration_loss(
            &x0,
            &[t(&[1, 1], &[1.0])],
            &[t(&[1, 1], &[2.0])],
            &[t(&[1, 1], &[4.0])],
            &[vec![0.5]],
        )
        .unwrap();
        assert_eq!(terms, vec![0.25]);
        assert_eq!(total, 0.25);
    }

    #[test]
    fn acceleration_loss_needs_outputs() {
        let x0 = t(&[1, 1], &[0.0]);
        assert!(acceleration_loss(&x0, &[x0.clone()], &[x0.clone()], &[], &[vec![0.5]]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(3.4, 0.5, 1.0) - 3.9).abs() < 1e-12);
        assert_eq!(total_loss(3.4, 0.5, 0.0), 3.4);
        assert_eq!(total_loss(3.4, 0.0, 1.0), 3.4);
    }
}
