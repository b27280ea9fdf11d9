use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use treefield_core::sampling::{sample_label_queries_with, sample_repair_queries_with, sample_segment_queries_with};
use treefield_core::QueryBatch;
use treefield_field::{
    head_logits, plane_rows, sample_query_embedding, Bound, Head, Hyper, Model, QueryInput, Scalar, Tensor, Var,
};

use crate::config::TrainConfig;
use crate::data::{derive_seed, prepare, Case, Prepared, TAG_TRAIN};
use crate::error::{PipelineError, Result};
use crate::loss::{total_loss, TaskLosses};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_repair: f64,
    pub loss_label: f64,
    pub loss_recon: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    /// One row per optimizer step.
    pub history: Vec<HistoryRow>,
}

pub fn query_input(batch: &QueryBatch, hyper: &Hyper) -> QueryInput {
    let coords: Vec<[f64; 3]> = batch.coords.iter().map(|c| c.map(|x| x as f64)).collect();
    QueryInput::new(&coords, hyper.r, hyper.pe_bands)
}

/// Class ids `1..=classes` to zero-based indices.
fn class_indices(batch: &QueryBatch, classes: usize, task: &'static str) -> Result<Arc<Vec<usize>>> {
    batch
        .targets
        .iter()
        .map(|&t| {
            if t == 0 || t as usize > classes {
                Err(PipelineError::TargetRange { task, target: t, classes })
            } else {
                Ok(t as usize - 1)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Arc::new)
}

/// Forward of every task on one case; returns the summed loss node and its parts.
pub fn case_loss<S: Scalar>(
    b: &mut Bound<S>,
    cfg: &TrainConfig,
    case: &Case,
    prep: &Prepared,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Var>, TaskLosses)> {
    let hyper = b.hyper().clone();
    let planes = Model::encode_field(b, &prep.input)?;
    let rows = plane_rows(b, planes);
    let mut terms = Vec::with_capacity(3);
    let mut losses = TaskLosses::default();
    let scalar = |b: &Bound<S>, v: Var| b.g.value(v).data[0].f64();

    if !prep.records.is_empty() {
        let qb = sample_repair_queries_with(&prep.supervision, &prep.input_tree, &prep.records, cfg.q_r, cfg.p, rng)?;
        let e = sample_query_embedding(b, rows, &query_input(&qb, &hyper))?;
        let z = head_logits(b, e, Head::Repair)?;
        let t = Arc::new(qb.targets.iter().map(|&v| v as f64).collect());
        let l = b.g.bce_dice_with_logits(z, t, cfg.lambda_bce, cfg.lambda_dice);
        losses.repair = Some(scalar(b, l));
        terms.push(l);
    }

    let qb = sample_label_queries_with(&prep.input_tree, &case.synthetic.tree_labels, cfg.q_l, rng)?;
    let t = class_indices(&qb, hyper.label_classes, "label")?;
    let e = sample_query_embedding(b, rows, &query_input(&qb, &hyper))?;
    let z = head_logits(b, e, Head::Label)?;
    let l = b.g.cross_entropy_with_logits(z, t);
    losses.label = Some(scalar(b, l));
    terms.push(l);

    let qb = sample_segment_queries_with(&case.synthetic.lung_mask, &case.synthetic.segment_labels, cfg.q_s, rng)?;
    let t = class_indices(&qb, hyper.segment_classes, "segment")?;
    let e = sample_query_embedding(b, rows, &query_input(&qb, &hyper))?;
    let z = head_logits(b, e, Head::Segment)?;
    let l = b.g.cross_entropy_with_logits(z, t);
    losses.recon = Some(scalar(b, l));
    terms.push(l);

    let mut total = terms.first().copied();
    for &t in &terms[1..] {
        total = Some(b.g.add(total.unwrap(), t));
    }
    Ok((total, losses))
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs.flatten() {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Multi-task training with Adam at 32-bit. Every random choice flows from `cfg.seed`.
pub fn train(cfg: &TrainConfig, hyper: &Hyper, cases: &[Case]) -> Result<TrainOutcome> {
    train_with(cfg, hyper, cases, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    cfg: &TrainConfig,
    hyper: &Hyper,
    cases: &[Case],
    mut on_step: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(PipelineError::NoCases);
    }
    let prepared: Vec<Prepared> =
        cases.iter().enumerate().map(|(i, c)| prepare(cfg, hyper, c, i)).collect::<Result<_>>()?;
    let mut model = Model::<f32>::new(hyper.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_TRAIN, 0));
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut b = Bound::new(&model, true);
                let (total, losses) = case_loss(&mut b, cfg, &cases[i], &prepared[i], &mut rng)?;
                let value = total_loss(&losses);
                if !value.is_finite() {
                    return Err(PipelineError::NonFiniteLoss {
                        step,
                        repair: losses.repair.unwrap_or(0.0),
                        label: losses.label.unwrap_or(0.0),
                        recon: losses.recon.unwrap_or(0.0),
                    });
                }
                parts.push(losses);
                let Some(total) = total else { continue };
                let grads = b.param_grads(total);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            if let Some(mut grads) = acc {
                let inv = 1.0 / batch.len() as f32;
                for g in &mut grads {
                    g.data.iter_mut().for_each(|v| *v *= inv);
                }
                adam.update(&mut model.params, &grads);
            }
            let row = HistoryRow {
                epoch,
                step,
                loss_repair: mean(parts.iter().map(|l| l.repair)),
                loss_label: mean(parts.iter().map(|l| l.label)),
                loss_recon: mean(parts.iter().map(|l| l.recon)),
                total: mean(parts.iter().map(|l| Some(total_loss(l)))),
            };
            on_step(&row);
            history.push(row);
            step += 1;
        }
    }
    if !model.params.is_finite() {
        return Err(PipelineError::NonFiniteLoss { step, repair: f64::NAN, label: f64::NAN, recon: f64::NAN });
    }
    Ok(TrainOutcome { model, history })
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,step,loss_repair,loss_label,loss_recon,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.step, r.loss_repair, r.loss_label, r.loss_recon, r.total);
    }
    s
}

pub fn write_history_csv(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, history_csv(rows))?;
    Ok(())
}
