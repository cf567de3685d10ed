use super::config::Objective;
use crate::data::RawBatch;
use crate::encoders::{CloverModel, Graph, TokenizedText, VideoClip};
use crate::error::Result;
use crate::losses::{
    focal_mlm_var, info_nce_halves_var, ranking_batch_var, tma_vars, LossBreakdown, LossHyper,
    TapeBatch, TmaParts,
};
use crate::masking::VideoMaskSpec;
use crate::substrate::{Real, Tensor, Var};

/// The summed objective together with the on-tape terms it adds up.
pub struct PretrainTerms<'g, T: Real> {
    pub total: Var<'g, T>,
    /// Named addends of `total`, e.g. `l_v`, `l_rank`, `l_mlm`.
    pub components: Vec<(&'static str, Var<'g, T>)>,
    pub breakdown: LossBreakdown,
}

/// Builds the full pre-training loss for one batch on `g`.
pub fn pretrain_loss<'g, T: Real>(
    model: &CloverModel<T>,
    g: &'g Graph<'_, T>,
    batch: &RawBatch,
    hyper: &LossHyper,
    objective: Objective,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    pretrain_terms(model, g, batch, hyper, objective).map(|t| (t.total, t.breakdown))
}

/// Like [`pretrain_loss`] but keeps each addend available for inspection.
pub fn pretrain_terms<'g, T: Real>(
    model: &CloverModel<T>,
    g: &'g Graph<'_, T>,
    batch: &RawBatch,
    hyper: &LossHyper,
    objective: Objective,
) -> Result<PretrainTerms<'g, T>> {
    match objective {
        Objective::Clover => clover_loss(model, g, batch, hyper, true),
        Objective::Tma => clover_loss(
            model,
            g,
            batch,
            &LossHyper {
                gamma: 0.0,
                ..*hyper
            },
            false,
        ),
        Objective::Baseline => baseline_loss(model, g, batch, hyper),
    }
}

/// Masked-text bookkeeping: which samples have a masked caption and its packed index.
struct MaskedTexts<'a> {
    texts: Vec<&'a TokenizedText>,
    present: Vec<bool>,
    /// Packed index among all encoded texts (complete texts come first).
    index: Vec<Option<usize>>,
}

fn masked_texts(batch: &RawBatch) -> MaskedTexts<'_> {
    let b = batch.len();
    let mut texts: Vec<&TokenizedText> = batch.samples.iter().map(|s| &s.text).collect();
    let mut index = Vec::with_capacity(b);
    for s in &batch.samples {
        match &s.masked_text {
            Some(t) => {
                index.push(Some(texts.len()));
                texts.push(t);
            }
            None => index.push(None),
        }
    }
    let present = index.iter().map(Option::is_some).collect();
    MaskedTexts {
        texts,
        present,
        index,
    }
}

/// MLM logits rows and targets for the `(V_e, T_m)` fused pairs.
fn mlm_targets(
    batch: &RawBatch,
    fused_pair: &[Option<usize>],
    cls_rows: &[usize],
) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, pair) in batch.samples.iter().zip(fused_pair) {
        if let (Some(mask), Some(p)) = (&s.text_mask, pair) {
            for (&pos, &id) in mask.positions.iter().zip(&mask.replaced_ids) {
                rows.push(cls_rows[*p] + pos);
                targets.push(id);
            }
        }
    }
    (rows, targets)
}

fn clover_loss<'g, T: Real>(
    model: &CloverModel<T>,
    g: &'g Graph<'_, T>,
    batch: &RawBatch,
    h: &LossHyper,
    with_rank: bool,
) -> Result<PretrainTerms<'g, T>> {
    let b = batch.len();
    let clips: Vec<&VideoClip> = batch
        .samples
        .iter()
        .chain(&batch.samples)
        .map(|s| &s.clip)
        .collect();
    let masks: Vec<Option<&VideoMaskSpec>> = (0..b)
        .map(|_| None)
        .chain(batch.samples.iter().map(|s| Some(&s.video_mask)))
        .collect();
    let video = model.encode_videos(g, &clips, &masks)?;
    let mt = masked_texts(batch);
    let text = model.encode_texts(g, &mt.texts)?;

    // Pairs 0..b fuse masked video with complete text; the rest fuse complete
    // video with each available masked text.
    let mut pairs: Vec<(usize, usize)> = (0..b).map(|i| (b + i, i)).collect();
    let mut tmf_pair = vec![None; b];
    for i in 0..b {
        if let Some(k) = mt.index[i] {
            tmf_pair[i] = Some(pairs.len());
            pairs.push((i, k));
        }
    }
    let fused = model.fuse(g, &video, &text, &pairs)?;

    let first: Vec<usize> = (0..b).collect();
    let second: Vec<usize> = (b..2 * b).collect();
    // Absent rows point at a stand-in row; every loss ignores them.
    let tm_rows: Vec<usize> = (0..b).map(|i| mt.index[i].unwrap_or(i)).collect();
    let tmf_rows: Vec<usize> = (0..b).map(|i| tmf_pair[i].unwrap_or(i)).collect();
    let tb = TapeBatch {
        v_e: video.pooled.rows_at(&first),
        v_m: video.pooled.rows_at(&second),
        t_e: text.pooled.rows_at(&first),
        t_m: text.pooled.rows_at(&tm_rows),
        m_vmf: fused.pooled.rows_at(&first),
        m_tmf: fused.pooled.rows_at(&tmf_rows),
        text_present: mt.present.clone(),
    };
    let tma = tma_vars(&tb, h.tau);
    let rank = if with_rank {
        ranking_batch_var(&tb, h)
    } else {
        g.constant(Tensor::scalar(T::zero()))
    };
    let (rows, targets) = mlm_targets(batch, &tmf_pair, &fused.cls_rows);
    let mlm = if targets.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        focal_mlm_var(
            model.mlm_logits(g, &fused, &rows),
            &targets,
            h.gamma,
            h.focal_form,
        )
    };
    let total = tma.total().add(rank).add(mlm);
    let parts = TmaParts {
        l_v: tma.l_v.item().f64(),
        l_v_prime: tma.l_v_prime.item().f64(),
        l_t: tma.l_t.item().f64(),
        l_t_prime: tma.l_t_prime.item().f64(),
        l_tma: tma.total().item().f64(),
    };
    let breakdown = LossBreakdown::new(parts, rank.item().f64(), mlm.item().f64())?;
    let components = vec![
        ("l_v", tma.l_v),
        ("l_v_prime", tma.l_v_prime),
        ("l_t", tma.l_t),
        ("l_t_prime", tma.l_t_prime),
        ("l_rank", rank),
        ("l_mlm", mlm),
    ];
    Ok(PretrainTerms {
        total,
        components,
        breakdown,
    })
}

/// InfoNCE halves are reported as `l_v` (video to text) and `l_t` (text to video).
fn baseline_loss<'g, T: Real>(
    model: &CloverModel<T>,
    g: &'g Graph<'_, T>,
    batch: &RawBatch,
    h: &LossHyper,
) -> Result<PretrainTerms<'g, T>> {
    let b = batch.len();
    let clips: Vec<&VideoClip> = batch.samples.iter().map(|s| &s.clip).collect();
    let video = model.encode_videos(g, &clips, &vec![None; b])?;
    let mt = masked_texts(batch);
    let text = model.encode_texts(g, &mt.texts)?;
    let first: Vec<usize> = (0..b).collect();
    let (v2t, t2v) = info_nce_halves_var(video.pooled, text.pooled.rows_at(&first), h.tau);

    let mut pairs = Vec::new();
    let mut tmf_pair = vec![None; b];
    for i in 0..b {
        if let Some(k) = mt.index[i] {
            tmf_pair[i] = Some(pairs.len());
            pairs.push((i, k));
        }
    }
    let mlm = if pairs.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        let fused = model.fuse(g, &video, &text, &pairs)?;
        let (rows, targets) = mlm_targets(batch, &tmf_pair, &fused.cls_rows);
        focal_mlm_var(
            model.mlm_logits(g, &fused, &rows),
            &targets,
            0.0,
            h.focal_form,
        )
    };
    let nce = v2t.add(t2v);
    let total = nce.add(mlm);
    let parts = TmaParts {
        l_v: v2t.item().f64(),
        l_v_prime: 0.0,
        l_t: t2v.item().f64(),
        l_t_prime: 0.0,
        l_tma: nce.item().f64(),
    };
    let breakdown = LossBreakdown::new(parts, 0.0, mlm.item().f64())?;
    Ok(PretrainTerms {
        total,
        components: vec![("l_v", v2t), ("l_t", t2v), ("l_mlm", mlm)],
        breakdown,
    })
}
