//! The training objective: teacher-forced cross-entropy averaged per
//! utterance plus (λ/2)·‖W‖² over weight matrices and kernels, with exact
//! gradients for every parameter group including embedding rows.
//!
//! Per-dialogue gradients are computed in parallel and reduced in dialogue
//! order, so results are bitwise independent of thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::EncodedDialogue;
use crate::discourse::{
    build_window, predict, rcnn_step, window_hiddens, LabelInput, Recurrence,
};
use crate::error::{Error, Result};
use crate::hcnn::{embed_sentence, hcnn_backward_into, hcnn_forward, HcnnTrace};
use crate::numerics::{cross_entropy, Mat};

use super::{Model, ModelLayout};

/// Dense (non-embedding) gradient buffers mirroring the parameter shapes.
struct DenseGrads {
    kernels: Vec<f64>,
    hcnn_biases: Vec<f64>,
    input_label: Mat,
    sentence: Mat,
    recurrent: Vec<Mat>,
    output: Vec<Mat>,
    bias_h: Vec<f64>,
    bias_o: Vec<f64>,
}

impl DenseGrads {
    fn zeros_like(model: &Model) -> Self {
        let rc = &model.rcnn;
        DenseGrads {
            kernels: vec![0.0; model.hcnn.kernels.len()],
            hcnn_biases: vec![0.0; model.hcnn.biases.len()],
            input_label: Mat::zeros(rc.input_label.rows(), rc.input_label.cols()),
            sentence: Mat::zeros(rc.sentence.rows(), rc.sentence.cols()),
            recurrent: rc.recurrent.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect(),
            output: rc.output.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect(),
            bias_h: vec![0.0; rc.bias_h.len()],
            bias_o: vec![0.0; rc.bias_o.len()],
        }
    }
}

struct DialogueResult {
    ce: f64,
    utterances: usize,
    dense: DenseGrads,
    /// Sparse embedding gradients: token id → column gradient.
    embed: BTreeMap<usize, Vec<f64>>,
}

fn add_assign(out: &mut [f64], inc: &[f64]) {
    for (v, g) in out.iter_mut().zip(inc) {
        *v += g;
    }
}

fn validate_dialogue(model: &Model, d: &EncodedDialogue) -> Result<()> {
    let n_labels = model.rcnn.n_labels();
    let n_agents = model.rcnn.n_agents();
    for u in &d.utterances {
        if u.act >= n_labels {
            return Err(Error::data(format!(
                "dialogue {} carries unknown label id {} (model has {n_labels} labels)",
                d.id, u.act
            )));
        }
        if u.agent >= n_agents {
            return Err(Error::invalid(format!(
                "dialogue {} carries unknown agent id {}",
                d.id, u.agent
            )));
        }
    }
    Ok(())
}

/// Sentence-model forward for every utterance of a dialogue.
fn sentence_forward(
    model: &Model,
    d: &EncodedDialogue,
) -> Result<(Vec<Vec<f64>>, Vec<HcnnTrace>)> {
    let mut sentences = Vec::with_capacity(d.utterances.len());
    let mut traces = Vec::with_capacity(d.utterances.len());
    for u in &d.utterances {
        let m = embed_sentence(&u.tokens, &model.lexicon.embeddings)?;
        let (s, trace) = hcnn_forward(&m, &model.hcnn)?;
        sentences.push(s);
        traces.push(trace);
    }
    Ok((sentences, traces))
}

/// Backpropagates one prediction's ∂L/∂h chain through `steps` unravelled
/// recurrence steps (newest first), accumulating into `dense` and `ds`.
#[allow(clippy::too_many_arguments)]
fn backprop_chain(
    model: &Model,
    dense: &mut DenseGrads,
    ds: &mut [Vec<f64>],
    hiddens: &[Vec<f64>],
    sentences: &[Vec<f64>],
    prev_of: impl Fn(usize) -> (LabelInput, usize),
    range: std::ops::RangeInclusive<usize>,
    mut dh: Vec<f64>,
) {
    let rc = &model.rcnn;
    let sig = rc.sigmoid;
    let n_labels = rc.n_labels();
    for j in range.rev() {
        let (prev_label, prev_agent) = prev_of(j);
        let h_j = &hiddens[j];
        let da: Vec<f64> =
            dh.iter().zip(h_j).map(|(&g, &y)| g * sig.derivative_from_output(y)).collect();
        add_assign(&mut dense.bias_h, &da);
        dense.input_label.add_to_col(prev_label.column(n_labels), &da);
        if j > 0 {
            dense.recurrent[prev_agent].add_outer(&da, &hiddens[j - 1]);
        }
        dense.sentence.add_outer(&da, &sentences[j]);
        add_assign(&mut ds[j], &rc.sentence.matvec_t(&da));
        dh = rc.recurrent[prev_agent].matvec_t(&da);
    }
}

fn dialogue_loss_grad(model: &Model, d: &EncodedDialogue) -> Result<DialogueResult> {
    validate_dialogue(model, d)?;
    let rc = &model.rcnn;
    let t_total = d.utterances.len();
    let (sentences, traces) = sentence_forward(model, d)?;
    let agents: Vec<usize> = d.utterances.iter().map(|u| u.agent).collect();
    let golds: Vec<usize> = d.utterances.iter().map(|u| u.act).collect();
    let depth = model.hp.depth;

    let mut dense = DenseGrads::zeros_like(model);
    let mut ds: Vec<Vec<f64>> = vec![vec![0.0; rc.n_features()]; t_total];
    let mut ce = 0.0;

    match model.hp.recurrence {
        Recurrence::Windowed => {
            for i in 0..t_total {
                let window = build_window(&sentences, &agents, &golds, i, depth);
                let hiddens = window_hiddens(rc, &window)?;
                let h_last = hiddens.last().unwrap();
                let a_i = agents[i];
                let mut p = predict(rc, h_last, a_i)?;
                ce += cross_entropy(&p, golds[i])?;

                p[golds[i]] -= 1.0; // softmax + cross-entropy gradient
                dense.output[a_i].add_outer(&p, h_last);
                add_assign(&mut dense.bias_o, &p);
                let dh = rc.output[a_i].matvec_t(&p);

                // The window's sentences index into the dialogue via
                // `utterance`, which for build_window is the absolute index.
                let base = window[0].utterance;
                let window_sentences: Vec<Vec<f64>> =
                    window.iter().map(|s| s.sentence.to_vec()).collect();
                let prev_of = |j: usize| {
                    let step = &window[j];
                    (step.prev_label, step.prev_agent)
                };
                // Route ds through a window-local view, then shift back.
                let mut ds_local: Vec<Vec<f64>> =
                    vec![vec![0.0; rc.n_features()]; window.len()];
                backprop_chain(
                    model,
                    &mut dense,
                    &mut ds_local,
                    &hiddens,
                    &window_sentences,
                    prev_of,
                    0..=window.len() - 1,
                    dh,
                );
                for (j, local) in ds_local.into_iter().enumerate() {
                    add_assign(&mut ds[base + j], &local);
                }
            }
        }
        Recurrence::Full => {
            // Full forward chain with teacher-forced labels.
            let prev_of = |j: usize| -> (LabelInput, usize) {
                if j == 0 {
                    (LabelInput::Start, agents[0])
                } else {
                    (LabelInput::Act(golds[j - 1]), agents[j - 1])
                }
            };
            let mut hiddens: Vec<Vec<f64>> = Vec::with_capacity(t_total);
            let mut h = vec![0.0; rc.hidden_dim()];
            for i in 0..t_total {
                let (prev_label, prev_agent) = prev_of(i);
                h = rcnn_step(rc, &h, prev_label, prev_agent, &sentences[i])?;
                hiddens.push(h.clone());
            }
            for i in 0..t_total {
                let a_i = agents[i];
                let mut p = predict(rc, &hiddens[i], a_i)?;
                ce += cross_entropy(&p, golds[i])?;
                p[golds[i]] -= 1.0;
                dense.output[a_i].add_outer(&p, &hiddens[i]);
                add_assign(&mut dense.bias_o, &p);
                let dh = rc.output[a_i].matvec_t(&p);
                // Gradients stop `depth` steps back; activations are the
                // true full-history ones.
                let start = (i + 1).saturating_sub(depth);
                backprop_chain(
                    model,
                    &mut dense,
                    &mut ds,
                    &hiddens,
                    &sentences,
                    prev_of,
                    start..=i,
                    dh,
                );
            }
        }
    }

    // Sentence-model backward, once per utterance with its accumulated ds.
    let mut embed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let n_feat = rc.n_features();
    for (trace, ds_u) in traces.iter().zip(&ds) {
        let d_input =
            hcnn_backward_into(trace, &model.hcnn, ds_u, &mut dense.kernels, &mut dense.hcnn_biases)?;
        for (pos, &tok) in trace.tokens.iter().enumerate() {
            let col = embed.entry(tok).or_insert_with(|| vec![0.0; n_feat]);
            for f in 0..n_feat {
                col[f] += d_input.get(f, pos);
            }
        }
    }

    Ok(DialogueResult { ce, utterances: t_total, dense, embed })
}

fn dialogue_loss(model: &Model, d: &EncodedDialogue) -> Result<(f64, usize)> {
    validate_dialogue(model, d)?;
    let rc = &model.rcnn;
    let (sentences, _) = sentence_forward(model, d)?;
    let agents: Vec<usize> = d.utterances.iter().map(|u| u.agent).collect();
    let golds: Vec<usize> = d.utterances.iter().map(|u| u.act).collect();
    let mut ce = 0.0;
    match model.hp.recurrence {
        Recurrence::Windowed => {
            for i in 0..d.utterances.len() {
                let window = build_window(&sentences, &agents, &golds, i, model.hp.depth);
                let hiddens = window_hiddens(rc, &window)?;
                let p = predict(rc, hiddens.last().unwrap(), agents[i])?;
                ce += cross_entropy(&p, golds[i])?;
            }
        }
        Recurrence::Full => {
            let mut h = vec![0.0; rc.hidden_dim()];
            for i in 0..d.utterances.len() {
                let prev_label =
                    if i == 0 { LabelInput::Start } else { LabelInput::Act(golds[i - 1]) };
                let prev_agent = if i == 0 { agents[0] } else { agents[i - 1] };
                h = rcnn_step(rc, &h, prev_label, prev_agent, &sentences[i])?;
                let p = predict(rc, &h, agents[i])?;
                ce += cross_entropy(&p, golds[i])?;
            }
        }
    }
    Ok((ce, d.utterances.len()))
}

fn l2_penalty(theta: &[f64], layout: &ModelLayout, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut sq = 0.0;
    for range in layout.weight_ranges() {
        for i in range {
            sq += theta[i] * theta[i];
        }
    }
    0.5 * lambda * sq
}

/// Teacher-forced loss over a batch of dialogues and its exact gradient as a
/// flat vector in layout order.
///
/// Loss = (Σ cross-entropy) / (number of utterances) + (λ/2)·‖W‖², with L2
/// over weight matrices and kernels only.
pub fn loss_and_grad(model: &Model, batch: &[EncodedDialogue]) -> Result<(f64, Vec<f64>)> {
    let refs: Vec<&EncodedDialogue> = batch.iter().collect();
    loss_and_grad_refs(model, &refs)
}

pub(crate) fn loss_and_grad_refs(
    model: &Model,
    batch: &[&EncodedDialogue],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let results: Result<Vec<DialogueResult>> =
        batch.par_iter().map(|d| dialogue_loss_grad(model, d)).collect();
    let results = results?;

    let layout = model.layout();
    let mut flat = vec![0.0; layout.total];
    let mut ce = 0.0;
    let mut utterances = 0usize;
    let n_feat = model.rcnn.n_features();
    for r in results {
        ce += r.ce;
        utterances += r.utterances;
        for (tok, col) in r.embed {
            let base = layout.embed.start + tok * n_feat;
            add_assign(&mut flat[base..base + n_feat], &col);
        }
        add_assign(&mut flat[layout.hcnn_kernels.clone()], &r.dense.kernels);
        add_assign(&mut flat[layout.hcnn_biases.clone()], &r.dense.hcnn_biases);
        add_assign(&mut flat[layout.input_label.clone()], r.dense.input_label.data());
        add_assign(&mut flat[layout.sentence.clone()], r.dense.sentence.data());
        for (range, m) in layout.recurrent.iter().zip(&r.dense.recurrent) {
            add_assign(&mut flat[range.clone()], m.data());
        }
        for (range, m) in layout.output.iter().zip(&r.dense.output) {
            add_assign(&mut flat[range.clone()], m.data());
        }
        add_assign(&mut flat[layout.bias_h.clone()], &r.dense.bias_h);
        add_assign(&mut flat[layout.bias_o.clone()], &r.dense.bias_o);
    }
    if utterances == 0 {
        return Err(Error::invalid("batch contains no utterances"));
    }
    // Divide rather than multiply by a reciprocal so the loss is bitwise
    // identical to the grad-free path in loss_only.
    let n = utterances as f64;
    for v in flat.iter_mut() {
        *v /= n;
    }
    let mut loss = ce / n;

    let lambda = model.hp.l2_lambda;
    if lambda != 0.0 {
        let theta = model.to_flat();
        loss += l2_penalty(&theta, &layout, lambda);
        for range in layout.weight_ranges() {
            for i in range {
                flat[i] += lambda * theta[i];
            }
        }
    }
    Ok((loss, flat))
}

/// The loss of [`loss_and_grad`] without the gradient work.
pub fn loss_only(model: &Model, batch: &[EncodedDialogue]) -> Result<f64> {
    let refs: Vec<&EncodedDialogue> = batch.iter().collect();
    loss_only_refs(model, &refs)
}

pub(crate) fn loss_only_refs(model: &Model, batch: &[&EncodedDialogue]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let results: Result<Vec<(f64, usize)>> =
        batch.par_iter().map(|d| dialogue_loss(model, d)).collect();
    let mut ce = 0.0;
    let mut utterances = 0usize;
    for (c, u) in results? {
        ce += c;
        utterances += u;
    }
    if utterances == 0 {
        return Err(Error::invalid("batch contains no utterances"));
    }
    let layout = model.layout();
    Ok(ce / utterances as f64 + l2_penalty(&model.to_flat(), &layout, model.hp.l2_lambda))
}

#[cfg(test)]
mod tests {
    use super::super::micro_fixture;
    use super::*;
    use crate::numerics::{fd_gradient, relative_error};

    #[test]
    fn zero_model_loss_is_ln_l() {
        let (mut model, data) = micro_fixture(7, 2, 0.0);
        let zeros = vec![0.0; model.n_params()];
        model.set_from_flat(&zeros);
        let loss = loss_only(&model, &data).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
        let (loss2, _) = loss_and_grad(&model, &data).unwrap();
        assert!((loss2 - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_and_grad_is_bitwise_deterministic() {
        let (model, data) = micro_fixture(9, 2, 1e-3);
        let (l1, g1) = loss_and_grad(&model, &data).unwrap();
        let (l2, g2) = loss_and_grad(&model, &data).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        assert_eq!(loss_only(&model, &data).unwrap(), l1 - 0.0);
    }

    #[test]
    fn loss_matches_loss_only() {
        let (model, data) = micro_fixture(13, 2, 1e-3);
        let (l, _) = loss_and_grad(&model, &data).unwrap();
        assert_eq!(l, loss_only(&model, &data).unwrap());
    }

    #[test]
    fn l2_decomposes_exactly() {
        let (mut model, data) = micro_fixture(15, 2, 0.0);
        let base = loss_only(&model, &data).unwrap();
        let lambda = 0.01;
        model.hp.l2_lambda = lambda;
        let with_l2 = loss_only(&model, &data).unwrap();
        let layout = model.layout();
        let theta = model.to_flat();
        let mut sq = 0.0;
        for range in layout.weight_ranges() {
            for i in range {
                sq += theta[i] * theta[i];
            }
        }
        assert_eq!(with_l2, base + 0.5 * lambda * sq);
    }

    #[test]
    fn words_outside_the_batch_get_zero_embedding_gradient() {
        let (model, data) = micro_fixture(17, 2, 0.0);
        let (_, grad) = loss_and_grad(&model, &data[..1]).unwrap();
        let layout = model.layout();
        let n = model.hp.embed_dim;
        let mut present = vec![false; model.lexicon.vocab_size()];
        for u in &data[0].utterances {
            for &t in &u.tokens {
                present[t] = true;
            }
        }
        let mut saw_nonzero = false;
        for tok in 0..model.lexicon.vocab_size() {
            let base = layout.embed.start + tok * n;
            let any = (0..n).any(|f| grad[base + f] != 0.0);
            if present[tok] {
                saw_nonzero |= any;
            } else {
                assert!(!any, "token {tok} absent from batch but has gradient");
            }
        }
        assert!(saw_nonzero);
    }

    #[test]
    fn unknown_label_is_a_hard_error() {
        let (model, mut data) = micro_fixture(19, 2, 0.0);
        data[0].utterances[0].act = 99;
        assert!(loss_and_grad(&model, &data).is_err());
    }

    fn check_against_fd(seed: u64, depth: usize, lambda: f64) {
        let (model, data) = micro_fixture(seed, depth, lambda);
        let (_, analytic) = loss_and_grad(&model, &data).unwrap();
        let mut scratch = model.clone();
        let fd = fd_gradient(
            |theta| {
                scratch.set_from_flat(theta);
                loss_only(&scratch, &data).unwrap()
            },
            &model.to_flat(),
            1e-5,
        );
        let layout = model.layout();
        for (name, range) in layout.groups() {
            for i in range {
                let err = relative_error(analytic[i], fd[i]);
                assert!(
                    err < 1e-6,
                    "seed {seed} d={depth} λ={lambda} group {name} coord {i}: \
                     analytic {} vs fd {} (rel {err:.3e})",
                    analytic[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_windowed() {
        check_against_fd(23, 2, 0.0);
        check_against_fd(29, 1, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_with_l2() {
        check_against_fd(31, 2, 1e-3);
    }

    #[test]
    fn full_recurrence_gradients_exact_when_depth_covers_dialogue() {
        // With d ≥ dialogue length the truncation never binds, so the
        // truncated-gradient full mode must match finite differences too.
        let (mut model, data) = micro_fixture(37, 5, 0.0);
        model.hp.recurrence = Recurrence::Full;
        let (_, analytic) = loss_and_grad(&model, &data).unwrap();
        let mut scratch = model.clone();
        let fd = fd_gradient(
            |theta| {
                scratch.set_from_flat(theta);
                loss_only(&scratch, &data).unwrap()
            },
            &model.to_flat(),
            1e-5,
        );
        for i in 0..analytic.len() {
            assert!(relative_error(analytic[i], fd[i]) < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn full_recurrence_forward_differs_from_windowed() {
        let (mut model, data) = micro_fixture(41, 2, 0.0);
        let windowed = loss_only(&model, &data).unwrap();
        model.hp.recurrence = Recurrence::Full;
        let full = loss_only(&model, &data).unwrap();
        assert_ne!(windowed, full);
    }
}
