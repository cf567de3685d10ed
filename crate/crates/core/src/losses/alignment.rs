use crate::substrate::{Real, Var};

/// Exclusive-NCE for one anchor modality against three positive families.
///
/// For anchor row `i` and family `p`, the denominator holds the positive
/// `s(a_i, p_i)` plus every other-index entry of all three families. The other
/// two same-index positives never appear. Terms are summed over the batch.
/// Rows with `present[p][i] == false` contribute no term and no negatives.
pub fn exclusive_nce_anchor_var<'t, T: Real>(
    anchor: Var<'t, T>,
    positives: [Var<'t, T>; 3],
    present: [&[bool]; 3],
    tau: f64,
) -> Var<'t, T> {
    match exclusive_nce_terms_var(anchor, positives, present, tau) {
        Some(terms) => terms.sum(),
        None => anchor
            .tape()
            .constant(crate::substrate::Tensor::scalar(T::zero())),
    }
}

/// The individual exclusive-NCE terms as a column, ordered by anchor row and
/// then family, skipping absent entries. `None` when no term is present.
pub fn exclusive_nce_terms_var<'t, T: Real>(
    anchor: Var<'t, T>,
    positives: [Var<'t, T>; 3],
    present: [&[bool]; 3],
    tau: f64,
) -> Option<Var<'t, T>> {
    let b = anchor.rows();
    let inv = T::c(1.0 / tau);
    let sims: Vec<Var<'t, T>> = positives
        .iter()
        .map(|p| anchor.matmul_t(*p).scale(inv))
        .collect();
    let all = Var::concat_cols(&sims);
    let width = 3 * b;
    let mut groups = Vec::new();
    let mut diag = Vec::new();
    for i in 0..b {
        for p in 0..3 {
            if !present[p][i] {
                continue;
            }
            let mut grp = vec![i * width + p * b + i];
            for q in 0..3 {
                grp.extend(
                    (0..b)
                        .filter(|&j| j != i && present[q][j])
                        .map(|j| i * width + q * b + j),
                );
            }
            groups.push(grp);
            diag.push((i, p * b + i));
        }
    }
    if groups.is_empty() {
        return None;
    }
    Some(all.log_sum_exp_groups(groups).sub(all.elements(&diag)))
}

/// Standard NCE from each query family back onto the anchor rows: for query
/// row `i`, the softmax runs over all `B` anchor rows with `i` as the target.
pub fn reverse_alignment_var<'t, T: Real>(
    targets: Var<'t, T>,
    queries: [Var<'t, T>; 3],
    present: [&[bool]; 3],
    tau: f64,
) -> Var<'t, T> {
    let b = targets.rows();
    let inv = T::c(1.0 / tau);
    let sims: Vec<Var<'t, T>> = queries
        .iter()
        .map(|q| q.matmul_t(targets).scale(inv))
        .collect();
    let all = Var::concat_rows(&sims);
    let mut groups = Vec::new();
    let mut diag = Vec::new();
    for (q, mask) in present.iter().enumerate() {
        for i in (0..b).filter(|&i| mask[i]) {
            let row = q * b + i;
            groups.push((0..b).map(|j| row * b + j).collect());
            diag.push((row, i));
        }
    }
    if groups.is_empty() {
        return targets
            .tape()
            .constant(crate::substrate::Tensor::scalar(T::zero()));
    }
    all.log_sum_exp_groups(groups)
        .sub(all.elements(&diag))
        .sum()
}

/// Symmetric InfoNCE over a single pair of families, batch-summed.
pub fn info_nce_var<'t, T: Real>(video: Var<'t, T>, text: Var<'t, T>, tau: f64) -> Var<'t, T> {
    let (v2t, t2v) = info_nce_halves_var(video, text, tau);
    v2t.add(t2v)
}

/// The video-to-text and text-to-video halves of [`info_nce_var`].
pub fn info_nce_halves_var<'t, T: Real>(
    video: Var<'t, T>,
    text: Var<'t, T>,
    tau: f64,
) -> (Var<'t, T>, Var<'t, T>) {
    let b = video.rows();
    let s = video.matmul_t(text).scale(T::c(1.0 / tau));
    let rows: Vec<Vec<usize>> = (0..b)
        .map(|i| (0..b).map(|j| i * b + j).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..b)
        .map(|j| (0..b).map(|i| i * b + j).collect())
        .collect();
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let pos = s.elements(&diag).sum();
    (
        s.log_sum_exp_groups(rows).sum().sub(pos),
        s.log_sum_exp_groups(cols).sum().sub(pos),
    )
}
