use crate::error::{CloverError, Result};
use crate::substrate::{Real, Tensor, Var};

/// Pair-wise ranking hinge over precomputed similarities, averaged over the batch.
pub fn ranking_loss(
    s_pos: &[f64],
    s_tm: &[f64],
    s_vm: &[f64],
    tau: f64,
    lambda: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(CloverError::invalid(
            "tau",
            format!("{tau} must be positive"),
        ));
    }
    if s_pos.len() != s_tm.len() || s_pos.len() != s_vm.len() || s_pos.is_empty() {
        return Err(CloverError::Shape(
            "ranking inputs must be equally long and non-empty".into(),
        ));
    }
    let total: f64 = s_pos
        .iter()
        .zip(s_tm)
        .zip(s_vm)
        .map(|((&p, &tm), &vm)| {
            (-(p - tm) / tau + lambda).max(0.0) + (-(p - vm) / tau + lambda).max(0.0)
        })
        .sum();
    Ok(total / s_pos.len() as f64)
}

/// Row-wise dot products as a `B × 1` column.
pub fn row_dots<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let d = a.cols();
    a.mul(b).mean_axis(1).scale(T::c(d as f64))
}

/// Ranking hinge on embeddings: complete pairs `(V_e, T_e)` must beat
/// `(V_e, T_m)` and `(V_m, T_e)` by `lambda` in temperature-scaled units.
/// The text-masked hinge is skipped for rows without a masked text.
pub fn ranking_var<'t, T: Real>(
    v_e: Var<'t, T>,
    t_e: Var<'t, T>,
    t_m: Var<'t, T>,
    v_m: Var<'t, T>,
    text_present: &[bool],
    tau: f64,
    lambda: f64,
) -> Var<'t, T> {
    let b = v_e.rows();
    let inv = T::c(1.0 / tau);
    let lam = T::c(lambda);
    let pos = row_dots(v_e, t_e);
    let hinge_tm = row_dots(v_e, t_m)
        .sub(pos)
        .scale(inv)
        .add_scalar(lam)
        .relu();
    let hinge_vm = row_dots(v_m, t_e)
        .sub(pos)
        .scale(inv)
        .add_scalar(lam)
        .relu();
    let hinge_tm = if text_present.iter().all(|&p| p) {
        hinge_tm
    } else {
        let keep = text_present
            .iter()
            .map(|&p| if p { T::one() } else { T::zero() })
            .collect();
        hinge_tm.mul(
            v_e.tape()
                .constant(Tensor::new(vec![b, 1], keep).expect("mask column")),
        )
    };
    hinge_tm.add(hinge_vm).mean()
}
