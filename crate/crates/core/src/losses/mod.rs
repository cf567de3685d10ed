//! Training objectives: tri-modal exclusive-NCE alignment, pair-wise ranking,
//! focal masked-token reconstruction, and their sum. Each objective exists as
//! a tape function (used for training and gradients), a validated value API,
//! and a scalar reference in [`oracle`].

mod alignment;
mod mlm;
pub mod oracle;
mod ranking;

use serde::{Deserialize, Serialize};

pub use alignment::{
    exclusive_nce_anchor_var, exclusive_nce_terms_var, info_nce_halves_var, info_nce_var,
    reverse_alignment_var,
};
pub use mlm::{focal_mlm_var, grouped_cross_entropy_var, FocalForm};
pub use ranking::{ranking_loss, ranking_var, row_dots};

use crate::error::{CloverError, Result};
use crate::substrate::{Real, Tape, Tensor, Var};

/// Unit-norm tolerance for validated inputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyper {
    /// Softmax temperature.
    pub tau: f64,
    /// Ranking margin in temperature-scaled units.
    pub lambda: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub focal_form: FocalForm,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            tau: 0.05,
            lambda: 5.0,
            gamma: 2.0,
            focal_form: FocalForm::Standard,
        }
    }
}

impl LossHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(CloverError::invalid(
                "tau",
                format!("{} must be positive", self.tau),
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CloverError::invalid(
                "lambda",
                format!("{} must be non-negative", self.lambda),
            ));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(CloverError::invalid(
                "gamma",
                format!("{} must be non-negative", self.gamma),
            ));
        }
        Ok(())
    }
}

/// Pooled embeddings for one batch. Row `i` of every field belongs to pair `i`.
///
/// `text_present[i]` is false when caption `i` had nothing to mask; its `t_m`
/// and `m_tmf` rows are then ignored by every loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T: Real> {
    pub v_e: Tensor<T>,
    pub t_e: Tensor<T>,
    pub t_m: Tensor<T>,
    pub v_m: Tensor<T>,
    /// Fusion of masked video with complete text.
    pub m_vmf: Tensor<T>,
    /// Fusion of complete video with masked text.
    pub m_tmf: Tensor<T>,
    pub text_present: Vec<bool>,
}

impl<T: Real> EmbeddingBatch<T> {
    pub fn new(
        v_e: Tensor<T>,
        t_e: Tensor<T>,
        t_m: Tensor<T>,
        v_m: Tensor<T>,
        m_vmf: Tensor<T>,
        m_tmf: Tensor<T>,
    ) -> Result<Self> {
        let b = v_e.rows();
        Self::with_presence(v_e, t_e, t_m, v_m, m_vmf, m_tmf, vec![true; b])
    }

    pub fn with_presence(
        v_e: Tensor<T>,
        t_e: Tensor<T>,
        t_m: Tensor<T>,
        v_m: Tensor<T>,
        m_vmf: Tensor<T>,
        m_tmf: Tensor<T>,
        text_present: Vec<bool>,
    ) -> Result<Self> {
        let batch = EmbeddingBatch {
            v_e,
            t_e,
            t_m,
            v_m,
            m_vmf,
            m_tmf,
            text_present,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn batch_size(&self) -> usize {
        self.v_e.rows()
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>, bool); 6] {
        [
            ("v_e", &self.v_e, false),
            ("t_e", &self.t_e, false),
            ("t_m", &self.t_m, true),
            ("v_m", &self.v_m, false),
            ("m_vmf", &self.m_vmf, false),
            ("m_tmf", &self.m_tmf, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (b, d) = (self.v_e.rows(), self.v_e.cols());
        if b == 0 {
            return Err(CloverError::invalid("v_e", "empty batch"));
        }
        if self.text_present.len() != b {
            return Err(CloverError::invalid(
                "text_present",
                format!("{} flags for {b} rows", self.text_present.len()),
            ));
        }
        for (name, t, text_side) in self.fields() {
            if t.shape() != [b, d] {
                return Err(CloverError::invalid(
                    name,
                    format!("shape {:?}, expected [{b}, {d}]", t.shape()),
                ));
            }
            for i in 0..b {
                if text_side && !self.text_present[i] {
                    continue;
                }
                check_unit(name, i, t.row(i))?;
            }
        }
        Ok(())
    }

    /// Binds every field as a differentiable variable on `tape`.
    pub fn to_tape<'t>(&self, tape: &'t Tape<T>) -> TapeBatch<'t, T> {
        TapeBatch {
            v_e: tape.var(self.v_e.clone()),
            t_e: tape.var(self.t_e.clone()),
            t_m: tape.var(self.t_m.clone()),
            v_m: tape.var(self.v_m.clone()),
            m_vmf: tape.var(self.m_vmf.clone()),
            m_tmf: tape.var(self.m_tmf.clone()),
            text_present: self.text_present.clone(),
        }
    }
}

fn check_unit<T: Real>(name: &'static str, row: usize, v: &[T]) -> Result<()> {
    let n = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
        return Err(CloverError::invalid(
            name,
            format!("row {row} has norm {n}, expected unit norm"),
        ));
    }
    Ok(())
}

fn check_rows<T: Real>(name: &'static str, t: &Tensor<T>) -> Result<()> {
    (0..t.rows()).try_for_each(|i| check_unit(name, i, t.row(i)))
}

/// Embedding variables on a tape, laid out as [`EmbeddingBatch`].
#[derive(Debug, Clone)]
pub struct TapeBatch<'t, T: Real> {
    pub v_e: Var<'t, T>,
    pub t_e: Var<'t, T>,
    pub t_m: Var<'t, T>,
    pub v_m: Var<'t, T>,
    pub m_vmf: Var<'t, T>,
    pub m_tmf: Var<'t, T>,
    pub text_present: Vec<bool>,
}

/// The four alignment terms on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TmaVars<'t, T: Real> {
    pub l_v: Var<'t, T>,
    pub l_v_prime: Var<'t, T>,
    pub l_t: Var<'t, T>,
    pub l_t_prime: Var<'t, T>,
}

impl<'t, T: Real> TmaVars<'t, T> {
    pub fn total(&self) -> Var<'t, T> {
        self.l_v
            .add(self.l_v_prime)
            .add(self.l_t)
            .add(self.l_t_prime)
    }
}

/// Video-anchored and text-anchored exclusive-NCE plus their reverse terms.
pub fn tma_vars<'t, T: Real>(b: &TapeBatch<'t, T>, tau: f64) -> TmaVars<'t, T> {
    let all = vec![true; b.v_e.rows()];
    let tp = b.text_present.as_slice();
    let video_side = [b.t_e, b.t_m, b.m_vmf];
    let video_mask = [all.as_slice(), tp, all.as_slice()];
    let text_side = [b.v_e, b.v_m, b.m_tmf];
    let text_mask = [all.as_slice(), all.as_slice(), tp];
    TmaVars {
        l_v: exclusive_nce_anchor_var(b.v_e, video_side, video_mask, tau),
        l_v_prime: reverse_alignment_var(b.v_e, video_side, video_mask, tau),
        l_t: exclusive_nce_anchor_var(b.t_e, text_side, text_mask, tau),
        l_t_prime: reverse_alignment_var(b.t_e, text_side, text_mask, tau),
    }
}

/// Ranking hinge for a tape batch.
pub fn ranking_batch_var<'t, T: Real>(b: &TapeBatch<'t, T>, h: &LossHyper) -> Var<'t, T> {
    ranking_var(b.v_e, b.t_e, b.t_m, b.v_m, &b.text_present, h.tau, h.lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmaParts {
    pub l_v: f64,
    pub l_v_prime: f64,
    pub l_t: f64,
    pub l_t_prime: f64,
    pub l_tma: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CloverError::invalid(
            "tau",
            format!("{tau} must be positive"),
        ))
    }
}

/// Evaluates the four alignment terms on a validated batch.
pub fn tma_total<T: Real>(batch: &EmbeddingBatch<T>, tau: f64) -> Result<TmaParts> {
    check_tau(tau)?;
    batch.validate()?;
    let tape = Tape::new();
    let vars = tma_vars(&batch.to_tape(&tape), tau);
    let (l_v, l_v_prime, l_t, l_t_prime) = (
        vars.l_v.item().f64(),
        vars.l_v_prime.item().f64(),
        vars.l_t.item().f64(),
        vars.l_t_prime.item().f64(),
    );
    Ok(TmaParts {
        l_v,
        l_v_prime,
        l_t,
        l_t_prime,
        l_tma: l_v + l_v_prime + l_t + l_t_prime,
    })
}

fn same_shape<T: Real>(name: &'static str, t: &Tensor<T>, like: &Tensor<T>) -> Result<()> {
    if t.shape() != like.shape() {
        return Err(CloverError::invalid(
            name,
            format!("shape {:?}, expected {:?}", t.shape(), like.shape()),
        ));
    }
    Ok(())
}

/// Exclusive-NCE for one anchor against three fully present positive families.
pub fn exclusive_nce_anchor<T: Real>(
    anchor: &Tensor<T>,
    positives: [&Tensor<T>; 3],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_rows("anchor", anchor)?;
    for p in positives {
        same_shape("positives", p, anchor)?;
        check_rows("positives", p)?;
    }
    let tape = Tape::new();
    let all = vec![true; anchor.rows()];
    let a = tape.constant(anchor.clone());
    let ps = positives.map(|p| tape.constant(p.clone()));
    Ok(exclusive_nce_anchor_var(a, ps, [&all, &all, &all], tau)
        .item()
        .f64())
}

/// Reverse alignment of three query families onto the anchor rows.
pub fn reverse_alignment<T: Real>(
    targets: &Tensor<T>,
    queries: [&Tensor<T>; 3],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_rows("targets", targets)?;
    for q in queries {
        same_shape("queries", q, targets)?;
        check_rows("queries", q)?;
    }
    let tape = Tape::new();
    let all = vec![true; targets.rows()];
    let t = tape.constant(targets.clone());
    let qs = queries.map(|q| tape.constant(q.clone()));
    Ok(reverse_alignment_var(t, qs, [&all, &all, &all], tau)
        .item()
        .f64())
}

/// Focal MLM over `N × V` logits.
pub fn focal_mlm<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    gamma: f64,
    form: FocalForm,
) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(CloverError::invalid(
            "gamma",
            format!("{gamma} must be non-negative"),
        ));
    }
    if targets.is_empty() {
        log::warn!("no masked positions; MLM term is zero");
        return Ok(0.0);
    }
    if logits.rows() != targets.len() {
        return Err(CloverError::invalid(
            "targets",
            format!("{} targets for {} rows", targets.len(), logits.rows()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(CloverError::UnknownTokenId(bad));
    }
    let tape = Tape::new();
    Ok(
        focal_mlm_var(tape.constant(logits.clone()), targets, gamma, form)
            .item()
            .f64(),
    )
}

/// Unweighted sum of the three objective groups.
pub fn total_loss(l_tma: f64, l_rank: f64, l_mlm: f64) -> Result<f64> {
    for (name, v) in [("l_tma", l_tma), ("l_rank", l_rank), ("l_mlm", l_mlm)] {
        if !v.is_finite() {
            return Err(CloverError::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(l_tma + l_rank + l_mlm)
}

/// Scalar values of every objective term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_v_prime: f64,
    pub l_t: f64,
    pub l_t_prime: f64,
    pub l_tma: f64,
    pub l_rank: f64,
    pub l_mlm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(tma: TmaParts, l_rank: f64, l_mlm: f64) -> Result<Self> {
        for (name, v) in [
            ("l_v", tma.l_v),
            ("l_v_prime", tma.l_v_prime),
            ("l_t", tma.l_t),
            ("l_t_prime", tma.l_t_prime),
        ] {
            if !v.is_finite() {
                return Err(CloverError::NonFinite(format!("{name} = {v}")));
            }
        }
        let l_tma = tma.l_v + tma.l_v_prime + tma.l_t + tma.l_t_prime;
        let total = total_loss(l_tma, l_rank, l_mlm)?;
        Ok(LossBreakdown {
            l_v: tma.l_v,
            l_v_prime: tma.l_v_prime,
            l_t: tma.l_t,
            l_t_prime: tma.l_t_prime,
            l_tma,
            l_rank,
            l_mlm,
            total,
        })
    }
}
