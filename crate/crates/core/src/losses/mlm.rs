use serde::{Deserialize, Serialize};

use crate::substrate::{Real, Tensor, Var};

/// Which reading of the focal reconstruction loss to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalForm {
    /// `(1 − p)^γ · (−log p)`
    #[default]
    Standard,
    /// `−(1 − p)^γ · p`, kept for comparison experiments only.
    AsPrinted,
}

/// Focal masked-token loss, averaged over masked positions.
///
/// `logits` is `N × V`; `targets[k]` is the original token at row `k`.
/// With no masked positions the loss is a constant zero.
pub fn focal_mlm_var<'t, T: Real>(
    logits: Var<'t, T>,
    targets: &[usize],
    gamma: f64,
    form: FocalForm,
) -> Var<'t, T> {
    if targets.is_empty() {
        log::warn!("no masked positions in batch; MLM term is zero");
        return logits.tape().constant(Tensor::scalar(T::zero()));
    }
    assert_eq!(logits.rows(), targets.len(), "one target per logit row");
    let pairs: Vec<(usize, usize)> = targets.iter().enumerate().map(|(k, &t)| (k, t)).collect();
    let log_p = logits.log_softmax().elements(&pairs);
    let focus = |p: Var<'t, T>| p.neg().add_scalar(T::one()).powf(T::c(gamma));
    match form {
        FocalForm::Standard if gamma == 0.0 => log_p.neg().mean(),
        FocalForm::Standard => focus(log_p.exp()).mul(log_p.neg()).mean(),
        FocalForm::AsPrinted => {
            let p = log_p.exp();
            let w = if gamma == 0.0 { p } else { focus(p).mul(p) };
            w.neg().mean()
        }
    }
}

/// Mean cross-entropy over ragged candidate groups of a score column.
///
/// `groups[k]` lists flat indices into `scores`; `answers[k]` is the position
/// of the correct entry within that group.
pub fn grouped_cross_entropy_var<'t, T: Real>(
    scores: Var<'t, T>,
    groups: &[Vec<usize>],
    answers: &[usize],
) -> Var<'t, T> {
    assert_eq!(groups.len(), answers.len(), "one answer per group");
    let cols = scores.cols();
    let picks: Vec<(usize, usize)> = groups
        .iter()
        .zip(answers)
        .map(|(g, &a)| (g[a] / cols, g[a] % cols))
        .collect();
    scores
        .log_sum_exp_groups(groups.to_vec())
        .sub(scores.elements(&picks))
        .mean()
}
