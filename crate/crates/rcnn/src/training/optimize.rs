//! The mini-batch training loop: seeded shuffling, pluggable optimizers,
//! held-out early stopping, and best-model checkpointing. Deterministic given
//! the seed and independent of thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedDialogue;
use crate::error::{Error, Result};

use super::lbfgs::{minimize_with_history, CurvaturePair, LbfgsOptions};
use super::objective::{loss_and_grad_refs, loss_only_refs};
use super::{Model, OptimizerKind};

/// One progress-stream record.
#[derive(Debug, Clone)]
pub struct EpochEvent {
    pub epoch: usize,
    /// Utterance-weighted mean of pre-update batch losses.
    pub mean_loss: f64,
    /// Loss on the held-out tail; NaN when there is none.
    pub held_out_loss: f64,
    pub wall_secs: f64,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Trains the model on `data`, reporting one event per epoch, and returns
/// the best model by held-out loss (training loss when the set is too small
/// to hold anything out). When `checkpoint` is given, the best model so far
/// is written there every time it improves.
pub fn train(
    mut model: Model,
    data: &[EncodedDialogue],
    progress: &mut dyn FnMut(&EpochEvent),
    checkpoint: Option<&std::path::Path>,
) -> Result<Model> {
    let dialogues: Vec<&EncodedDialogue> = data.iter().filter(|d| !d.is_empty()).collect();
    if dialogues.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    model.hp.validate()?;
    let hp = model.hp.clone();
    // Hold out the last 5% of train dialogues for early stopping.
    let held_n = if dialogues.len() >= 4 { (dialogues.len() / 20).max(1) } else { 0 };
    let core_n = dialogues.len() - held_n;
    let core = &dialogues[..core_n];
    let held = &dialogues[core_n..];

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let n_params = model.n_params();
    let mut adam = AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 };
    // Curvature pairs survive batch boundaries: the batch objectives share
    // their scale structure, and the two-loop direction degrades gracefully
    // when a stale pair stops being a descent direction.
    let mut curvature: std::collections::VecDeque<CurvaturePair> = Default::default();

    let mut best_flat = model.to_flat();
    let mut best_metric = f64::INFINITY;
    let mut stale_epochs = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=hp.max_epochs.max(1) {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..core.len()).collect();
        order.shuffle(&mut rng);
        let batch_size = if hp.batch_size == 0 { core.len() } else { hp.batch_size };

        let mut ce_weighted = 0.0;
        let mut utterances = 0usize;
        for (batch_no, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&EncodedDialogue> = chunk.iter().map(|&i| core[i]).collect();
            let batch_utts: usize = batch.iter().map(|d| d.len()).sum();

            let (loss, grad) = loss_and_grad_refs(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_no} (first dialogue {})",
                    batch[0].id
                )));
            }
            ce_weighted += loss * batch_utts as f64;
            utterances += batch_utts;

            match hp.optimizer {
                OptimizerKind::Sgd { lr } => {
                    let mut theta = model.to_flat();
                    for (t, g) in theta.iter_mut().zip(&grad) {
                        *t -= lr * g;
                    }
                    model.set_from_flat(&theta);
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    adam.t += 1;
                    let mut theta = model.to_flat();
                    let bc1 = 1.0 - beta1.powi(adam.t as i32);
                    let bc2 = 1.0 - beta2.powi(adam.t as i32);
                    for i in 0..n_params {
                        adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * grad[i];
                        adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let m_hat = adam.m[i] / bc1;
                        let v_hat = adam.v[i] / bc2;
                        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    model.set_from_flat(&theta);
                }
                OptimizerKind::Lbfgs { history, steps_per_batch } => {
                    let x0 = model.to_flat();
                    let opts = LbfgsOptions {
                        history,
                        max_iters: steps_per_batch,
                        ..Default::default()
                    };
                    // Data was just validated by the evaluation above.
                    let result = minimize_with_history(
                        |theta| {
                            model.set_from_flat(theta);
                            loss_and_grad_refs(&model, &batch)
                                .expect("batch became invalid mid-optimization")
                        },
                        &x0,
                        &mut curvature,
                        &opts,
                    );
                    model.set_from_flat(&result.x);
                }
            }
        }

        epochs_run = epoch;
        let mean_loss = ce_weighted / utterances as f64;
        let held_out_loss =
            if held.is_empty() { f64::NAN } else { loss_only_refs(&model, held)? };
        progress(&EpochEvent {
            epoch,
            mean_loss,
            held_out_loss,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        let metric = if held.is_empty() { mean_loss } else { held_out_loss };
        if !metric.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss after epoch {epoch}")));
        }
        if metric < best_metric - 1e-12 {
            best_metric = metric;
            best_flat = model.to_flat();
            stale_epochs = 0;
            if let Some(path) = checkpoint {
                let mut snapshot = model.clone();
                snapshot.meta.epochs_trained = epoch;
                snapshot.meta.final_loss = best_metric;
                crate::model_file::save(&snapshot, path)?;
            }
        } else {
            stale_epochs += 1;
            if stale_epochs >= hp.patience {
                break;
            }
        }
    }

    model.set_from_flat(&best_flat);
    model.meta.epochs_trained = epochs_run;
    model.meta.final_loss = best_metric;
    Ok(model)
}
