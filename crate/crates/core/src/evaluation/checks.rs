use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, make_batch, ClipSource, CorpusConfig, MaskingConfig, RawBatch};
use crate::encoders::{CloverModel, ModelConfig, Vocab};
use crate::error::{CloverError, Result};
use crate::losses::oracle::{dot, oracle_exclusive_nce, oracle_focal, oracle_rank, oracle_reverse};
use crate::losses::{
    focal_mlm_var, info_nce_var, ranking_batch_var, tma_vars, EmbeddingBatch, FocalForm, LossHyper,
    TapeBatch,
};
use crate::substrate::{grad_check, Rng, Tape, Tensor, Var};
use crate::training::{pretrain_loss, Objective};

pub const ORACLE_TOL: f64 = 1e-6;
pub const LOSS_GRAD_TOL: f64 = 1e-4;
pub const MODEL_GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-5;

/// Worst disagreement between a batched loss and its scalar reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub loss: String,
    pub batch: usize,
    pub trials: usize,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Losses,
    Encoders,
    All,
}

impl FromStr for Component {
    type Err = CloverError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Component::Losses),
            "encoders" => Ok(Component::Encoders),
            "all" => Ok(Component::All),
            _ => Err(CloverError::Config(format!(
                "unknown component `{s}` (losses, encoders, all)"
            ))),
        }
    }
}

fn unit_rows(b: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).expect("rectangular rows")
}

/// Random unit-norm batch; some masked texts are absent when `holes` is set.
pub fn random_embedding_batch(
    b: usize,
    d: usize,
    holes: bool,
    rng: &mut Rng,
) -> EmbeddingBatch<f64> {
    let f: Vec<Vec<Vec<f64>>> = (0..6).map(|_| unit_rows(b, d, rng)).collect();
    let present: Vec<bool> = (0..b).map(|_| !holes || rng.uniform() < 0.75).collect();
    EmbeddingBatch::with_presence(
        tensor(&f[0]),
        tensor(&f[1]),
        tensor(&f[2]),
        tensor(&f[3]),
        tensor(&f[4]),
        tensor(&f[5]),
        present,
    )
    .expect("unit rows")
}

/// Compares every loss against its nested-loop reference on `trials` random batches per size.
pub fn oracle_check(trials: usize, batch_sizes: &[usize], seed: u64) -> Result<Vec<OracleRow>> {
    if trials == 0 {
        return Err(CloverError::Config("trials must be positive".into()));
    }
    let h = LossHyper::default();
    let names = ["l_v", "l_v_prime", "l_t", "l_t_prime", "l_rank", "l_mlm"];
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let mut worst = [0.0f64; 6];
        for trial in 0..trials {
            let mut rng = Rng::derive(seed, &[0x0AC1, b as u64, trial as u64]);
            let batch = random_embedding_batch(b, 8, trial % 2 == 1, &mut rng);
            let tp = &batch.text_present;
            let all = vec![true; b];
            let (ve, te, tm, vm, mv, mt) = (
                batch.v_e.to_rows(),
                batch.t_e.to_rows(),
                batch.t_m.to_rows(),
                batch.v_m.to_rows(),
                batch.m_vmf.to_rows(),
                batch.m_tmf.to_rows(),
            );
            let tape = Tape::new();
            let tb = batch.to_tape(&tape);
            let vars = tma_vars(&tb, h.tau);
            // The ranking reference has no presence mask, so it sees a fully present batch.
            let full = EmbeddingBatch {
                text_present: all.clone(),
                ..batch.clone()
            };
            let full_tb = full.to_tape(&tape);
            let rank = ranking_batch_var(&full_tb, &h).item();
            let s_pos: Vec<f64> = (0..b).map(|i| dot(&ve[i], &te[i])).collect();
            let s_tm: Vec<f64> = (0..b).map(|i| dot(&ve[i], &tm[i])).collect();
            let s_vm: Vec<f64> = (0..b).map(|i| dot(&vm[i], &te[i])).collect();

            let n_tokens = 3 * b;
            let logits: Vec<Vec<f64>> = (0..n_tokens)
                .map(|_| (0..11).map(|_| 3.0 * rng.normal()).collect())
                .collect();
            let targets: Vec<usize> = (0..n_tokens).map(|_| rng.below(11)).collect();
            let lv = tape.constant(tensor(&logits));
            let mlm = focal_mlm_var(lv, &targets, h.gamma, h.focal_form).item();

            let got = [
                vars.l_v.item(),
                vars.l_v_prime.item(),
                vars.l_t.item(),
                vars.l_t_prime.item(),
                rank,
                mlm,
            ];
            let want = [
                oracle_exclusive_nce(&ve, [&te, &tm, &mv], [&all, tp, &all], h.tau),
                oracle_reverse(&ve, [&te, &tm, &mv], [&all, tp, &all], h.tau),
                oracle_exclusive_nce(&te, [&ve, &vm, &mt], [&all, &all, tp], h.tau),
                oracle_reverse(&te, [&ve, &vm, &mt], [&all, &all, tp], h.tau),
                oracle_rank(&s_pos, &s_tm, &s_vm, h.tau, h.lambda),
                oracle_focal(&logits, &targets, h.gamma, h.focal_form),
            ];
            for k in 0..6 {
                let err = (got[k] - want[k]).abs();
                worst[k] = if err.is_nan() {
                    f64::INFINITY
                } else {
                    worst[k].max(err)
                };
            }
        }
        for (k, name) in names.iter().enumerate() {
            rows.push(OracleRow {
                loss: name.to_string(),
                batch: b,
                trials,
                max_abs_err: worst[k],
                pass: worst[k] <= ORACLE_TOL,
            });
        }
    }
    Ok(rows)
}

fn loss_gradient_row<F>(name: &str, b: usize, seed: u64, holes: bool, f: F) -> Result<GradRow>
where
    F: for<'t> Fn(&TapeBatch<'t, f64>) -> Var<'t, f64>,
{
    let d = 5;
    let batch = random_embedding_batch(b, d, holes, &mut Rng::new(seed, 0x6C));
    let n = b * d;
    let eval = |x: &[f64], want: bool| -> (f64, Vec<f64>) {
        let part =
            |k: usize| Tensor::new(vec![b, d], x[k * n..(k + 1) * n].to_vec()).expect("shape");
        let raw = EmbeddingBatch {
            v_e: part(0),
            t_e: part(1),
            t_m: part(2),
            v_m: part(3),
            m_vmf: part(4),
            m_tmf: part(5),
            text_present: batch.text_present.clone(),
        };
        let tape = Tape::new();
        let tb = raw.to_tape(&tape);
        let loss = f(&tb);
        let grad = if want {
            let g = tape.backward(loss);
            [tb.v_e, tb.t_e, tb.t_m, tb.v_m, tb.m_vmf, tb.m_tmf]
                .iter()
                .flat_map(|v| g.wrt(*v).into_data())
                .collect()
        } else {
            Vec::new()
        };
        (loss.item(), grad)
    };
    let point: Vec<f64> = [
        &batch.v_e,
        &batch.t_e,
        &batch.t_m,
        &batch.v_m,
        &batch.m_vmf,
        &batch.m_tmf,
    ]
    .iter()
    .flat_map(|t| t.data().to_vec())
    .collect();
    let (_, grad) = eval(&point, true);
    let r = grad_check(|x| eval(x, false).0, &point, &grad, GRAD_STEP)?;
    Ok(GradRow {
        name: name.to_string(),
        coords: r.coords_checked,
        max_rel_err: r.max_rel_error,
        tol: LOSS_GRAD_TOL,
        pass: r.passes(LOSS_GRAD_TOL),
    })
}

fn focal_row(name: &str, gamma: f64, form: FocalForm) -> Result<GradRow> {
    let mut rng = Rng::new(6, 6);
    let point: Vec<f64> = (0..5 * 9).map(|_| rng.normal()).collect();
    let targets = [3, 0, 8, 3, 5];
    let eval = |x: &[f64], want: bool| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let logits = tape.var(Tensor::new(vec![5, 9], x.to_vec()).expect("shape"));
        let loss = focal_mlm_var(logits, &targets, gamma, form);
        let grad = if want {
            tape.backward(loss).wrt(logits).into_data()
        } else {
            Vec::new()
        };
        (loss.item(), grad)
    };
    let (_, grad) = eval(&point, true);
    let r = grad_check(|x| eval(x, false).0, &point, &grad, GRAD_STEP)?;
    Ok(GradRow {
        name: name.to_string(),
        coords: r.coords_checked,
        max_rel_err: r.max_rel_error,
        tol: LOSS_GRAD_TOL,
        pass: r.passes(LOSS_GRAD_TOL),
    })
}

/// Gradient checks of every loss with respect to its embedding or logit inputs.
pub fn loss_gradient_checks() -> Result<Vec<GradRow>> {
    let h = LossHyper::default();
    // A wide margin keeps both hinges active, away from the kink.
    let wide = LossHyper { lambda: 100.0, ..h };
    let mut rows = Vec::new();
    for b in [1, 2, 4] {
        rows.push(loss_gradient_row(
            &format!("tma B={b}"),
            b,
            b as u64,
            false,
            |tb| tma_vars(tb, h.tau).total(),
        )?);
    }
    rows.push(loss_gradient_row(
        "tma B=4 with absent masked texts",
        4,
        9,
        true,
        |tb| tma_vars(tb, h.tau).total(),
    )?);
    for (name, pick) in [("l_v", 0), ("l_v_prime", 1), ("l_t", 2), ("l_t_prime", 3)] {
        rows.push(loss_gradient_row(
            &format!("{name} B=3"),
            3,
            20 + pick,
            false,
            move |tb| {
                let v = tma_vars(tb, h.tau);
                [v.l_v, v.l_v_prime, v.l_t, v.l_t_prime][pick as usize]
            },
        )?);
    }
    rows.push(loss_gradient_row("ranking B=4", 4, 3, false, |tb| {
        ranking_batch_var(tb, &wide)
    })?);
    rows.push(loss_gradient_row(
        "ranking B=4 with absent masked texts",
        4,
        7,
        true,
        |tb| ranking_batch_var(tb, &wide),
    )?);
    rows.push(loss_gradient_row("info_nce B=3", 3, 4, false, |tb| {
        info_nce_var(tb.v_e, tb.t_e, h.tau)
    })?);
    rows.push(focal_row("focal gamma=0", 0.0, FocalForm::Standard)?);
    rows.push(focal_row("focal gamma=2", 2.0, FocalForm::Standard)?);
    rows.push(focal_row(
        "focal gamma=2 as printed",
        2.0,
        FocalForm::AsPrinted,
    )?);
    Ok(rows)
}

/// A B=2 batch on the micro geometry, with masks drawn as in training.
pub fn micro_batch(seed: u64, objective: Objective) -> Result<(CloverModel<f64>, RawBatch)> {
    let c = ModelConfig::micro();
    let corpus = generate_corpus(&CorpusConfig {
        n: 10,
        seed,
        frames: c.frames,
        height: c.height,
        width: c.width,
        image_fraction: 0.0,
    })?;
    let recs: Vec<_> = corpus.manifest.records.iter().take(2).collect();
    let masking = MaskingConfig {
        text_strategy: objective.text_strategy(),
        ..MaskingConfig::default()
    };
    let batch = make_batch(
        &recs,
        |r| ClipSource::Render.load(r),
        &Vocab::default(),
        c.grid(),
        &masking,
        seed,
        0,
        0,
    )?;
    Ok((CloverModel::new(c, seed)?, batch))
}

/// Checks the gradient of the whole pre-training loss with respect to every model parameter.
pub fn model_gradient_check(seed: u64, objective: Objective) -> Result<GradRow> {
    let (model, batch) = micro_batch(seed, objective)?;
    let h = LossHyper::default();
    let eval = |m: &CloverModel<f64>, want: bool| -> Result<(f64, Vec<f64>)> {
        let g = m.graph();
        let (loss, _) = pretrain_loss(m, &g, &batch, &h, objective)?;
        let grad = if want {
            let by_name = g.param_grads(&g.backward(loss));
            m.params
                .iter()
                .flat_map(|(n, p)| {
                    by_name
                        .get(n)
                        .map_or(vec![0.0; p.len()], |t| t.data().to_vec())
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((loss.item(), grad))
    };
    let (_, grad) = eval(&model, true)?;
    let point = model.params.flatten();
    let mut probe = model.clone();
    let r = grad_check(
        |x| {
            probe.params.unflatten(x).expect("same layout");
            eval(&probe, false).map_or(f64::NAN, |(v, _)| v)
        },
        &point,
        &grad,
        GRAD_STEP,
    )?;
    Ok(GradRow {
        name: format!("{objective:?} total loss wrt parameters, B=2 micro").to_lowercase(),
        coords: r.coords_checked,
        max_rel_err: r.max_rel_error,
        tol: MODEL_GRAD_TOL,
        pass: r.passes(MODEL_GRAD_TOL),
    })
}

pub fn gradient_checks(component: Component) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    if matches!(component, Component::Losses | Component::All) {
        rows.extend(loss_gradient_checks()?);
    }
    if matches!(component, Component::Encoders | Component::All) {
        rows.push(model_gradient_check(2, Objective::Clover)?);
        rows.push(model_gradient_check(3, Objective::Baseline)?);
    }
    Ok(rows)
}
