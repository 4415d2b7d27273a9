//! The discourse model: a recurrent network over utterances whose recurrent
//! weights are selected by the previous speaker and whose output weights are
//! selected by the current speaker.
//!
//! The hidden state update is
//!
//! `h_i = σ(I x_{i−1} + H^{a_{i−1}} h_{i−1} + S s_i + b_h)`
//!
//! and the label distribution `p_i = softmax(O^{a_i} h_i + b_o)`, where `s_i`
//! is the sentence vector from the sentence model. Prediction is windowed:
//! the hidden state is reset to zero `d` steps back, so `p_i` depends on at
//! most the previous `d` utterances (with `d = 2`: the previous two
//! utterances, speakers, and dialogue acts). A full-recurrence forward with
//! gradient-only truncation is available behind [`Recurrence::Full`].

use crate::error::{Error, Result};
use crate::hcnn::{embed_sentence, hcnn_forward, HcnnParams};
use crate::numerics::{softmax, Mat, Sigmoid};

/// Label fed into the recurrence as "the previous act": either a real act id
/// or the start-of-dialogue pseudo-label (the extra final column of `I`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelInput {
    Start,
    Act(usize),
}

impl LabelInput {
    /// Column index into the input-label matrix `I` (h × (L+1)).
    pub fn column(self, n_labels: usize) -> usize {
        match self {
            LabelInput::Start => n_labels,
            LabelInput::Act(x) => x,
        }
    }
}

/// Whether prediction i sees a zero hidden state d steps back (windowed, the
/// default) or the full recurrent history with gradients truncated at depth d.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recurrence {
    #[default]
    Windowed,
    Full,
}

impl Recurrence {
    pub fn name(self) -> &'static str {
        match self {
            Recurrence::Windowed => "windowed",
            Recurrence::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "windowed" => Ok(Recurrence::Windowed),
            "full" => Ok(Recurrence::Full),
            other => Err(Error::invalid(format!("unknown recurrence mode `{other}`"))),
        }
    }
}

/// Weights of the discourse model.
#[derive(Debug, Clone, PartialEq)]
pub struct RcnnParams {
    /// Input-label matrix, h × (L+1); column L is the start pseudo-label.
    pub input_label: Mat,
    /// Sentence transformation, h × n. The only place features mix.
    pub sentence: Mat,
    /// Recurrent weights per agent, each h × h.
    pub recurrent: Vec<Mat>,
    /// Output weights per agent, each L × h.
    pub output: Vec<Mat>,
    pub bias_h: Vec<f64>,
    pub bias_o: Vec<f64>,
    pub sigmoid: Sigmoid,
}

impl RcnnParams {
    pub fn new(
        hidden_dim: usize,
        n_features: usize,
        n_labels: usize,
        n_agents: usize,
        sigmoid: Sigmoid,
    ) -> Self {
        assert!(hidden_dim >= 1 && n_features >= 1 && n_labels >= 1 && n_agents >= 1);
        RcnnParams {
            input_label: Mat::zeros(hidden_dim, n_labels + 1),
            sentence: Mat::zeros(hidden_dim, n_features),
            recurrent: (0..n_agents).map(|_| Mat::zeros(hidden_dim, hidden_dim)).collect(),
            output: (0..n_agents).map(|_| Mat::zeros(n_labels, hidden_dim)).collect(),
            bias_h: vec![0.0; hidden_dim],
            bias_o: vec![0.0; n_labels],
            sigmoid,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias_h.len()
    }

    pub fn n_labels(&self) -> usize {
        self.bias_o.len()
    }

    pub fn n_agents(&self) -> usize {
        self.recurrent.len()
    }

    pub fn n_features(&self) -> usize {
        self.sentence.cols()
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden_dim();
        let l = self.n_labels();
        let a = self.n_agents();
        h * (l + 1) + h * self.n_features() + a * h * h + a * l * h + h + l
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.n_agents() {
            return Err(Error::invalid(format!(
                "unknown agent id {agent} (model has {} agents)",
                self.n_agents()
            )));
        }
        Ok(())
    }
}

/// One utterance as the discourse model sees it.
#[derive(Debug, Clone)]
pub struct DialogueStep {
    pub sentence_vector: Vec<f64>,
    pub agent: usize,
    /// Gold act id when known; absent at inference.
    pub label: Option<usize>,
}

impl DialogueStep {
    pub fn new(sentence_vector: Vec<f64>, agent: usize, label: Option<usize>) -> Self {
        DialogueStep { sentence_vector, agent, label }
    }
}

/// Gold labels of a step sequence; panics if any is missing.
pub fn gold_labels(steps: &[DialogueStep]) -> Vec<usize> {
    steps
        .iter()
        .map(|s| s.label.expect("step is missing its gold label"))
        .collect()
}

/// The hidden state taken as the representation of the discourse up to a step.
#[derive(Debug, Clone)]
pub struct DiscourseVector {
    pub values: Vec<f64>,
    pub step_index: usize,
}

/// One unravelled step of a prediction window.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub sentence: &'a [f64],
    pub agent: usize,
    pub prev_agent: usize,
    pub prev_label: LabelInput,
    /// Index of the utterance within its dialogue; used to route sentence
    /// gradients back to the right HCNN trace.
    pub utterance: usize,
}

/// Single application of the recurrence.
pub fn rcnn_step(
    params: &RcnnParams,
    h_prev: &[f64],
    prev_label: LabelInput,
    a_prev: usize,
    s_i: &[f64],
) -> Result<Vec<f64>> {
    params.check_agent(a_prev)?;
    let h = params.hidden_dim();
    if h_prev.len() != h {
        return Err(Error::invalid("hidden state dimension mismatch"));
    }
    if s_i.len() != params.n_features() {
        return Err(Error::invalid("sentence vector dimension mismatch"));
    }
    if let LabelInput::Act(x) = prev_label {
        if x >= params.n_labels() {
            return Err(Error::invalid(format!("label id {x} out of range")));
        }
    }
    let col = prev_label.column(params.n_labels());
    let rec = params.recurrent[a_prev].matvec(h_prev);
    let sen = params.sentence.matvec(s_i);
    let mut out = vec![0.0; h];
    for r in 0..h {
        let z = params.input_label.get(r, col) + rec[r] + sen[r] + params.bias_h[r];
        out[r] = params.sigmoid.apply(z);
    }
    Ok(out)
}

/// Output distribution at a step, conditioned on the current agent.
pub fn predict(params: &RcnnParams, h_i: &[f64], a_i: usize) -> Result<Vec<f64>> {
    params.check_agent(a_i)?;
    if h_i.len() != params.hidden_dim() {
        return Err(Error::invalid("hidden state dimension mismatch"));
    }
    let mut logits = params.output[a_i].matvec(h_i);
    for (v, b) in logits.iter_mut().zip(&params.bias_o) {
        *v += b;
    }
    softmax(&logits)
}

/// Assembles the unravelled window for predicting utterance `i` (0-based) at
/// depth `d`: the last `min(i+1, d)` steps, oldest first.
///
/// Labels and agents before the dialogue start use the start pseudo-label and
/// the convention a_0 := a_1. `labels[j]` must hold the (gold or previously
/// predicted) act of utterance j for every j < i inside the window; the
/// steps' own `label` fields are not consulted.
pub fn build_window<'a>(
    steps: &'a [DialogueStep],
    labels: &[usize],
    i: usize,
    d: usize,
) -> Vec<StepInput<'a>> {
    assert!(d >= 1, "window depth must be at least 1");
    assert!(i < steps.len());
    let w = d.min(i + 1);
    let start = i + 1 - w;
    (start..=i)
        .map(|j| StepInput {
            sentence: &steps[j].sentence_vector,
            agent: steps[j].agent,
            prev_agent: if j == 0 { steps[0].agent } else { steps[j - 1].agent },
            prev_label: if j == 0 { LabelInput::Start } else { LabelInput::Act(labels[j - 1]) },
            utterance: j,
        })
        .collect()
}

/// Hidden states of every step of a window, starting from a zero state.
pub fn window_hiddens(params: &RcnnParams, window: &[StepInput]) -> Result<Vec<Vec<f64>>> {
    if window.is_empty() {
        return Err(Error::invalid("empty prediction window"));
    }
    let mut hiddens = Vec::with_capacity(window.len());
    let mut h = vec![0.0; params.hidden_dim()];
    for step in window {
        h = rcnn_step(params, &h, step.prev_label, step.prev_agent, step.sentence)?;
        hiddens.push(h.clone());
    }
    Ok(hiddens)
}

/// Runs one prediction window: initializes the hidden state before the window
/// to zero, iterates the recurrence, and returns the distribution and hidden
/// state at the final step.
pub fn forward_window(params: &RcnnParams, window: &[StepInput]) -> Result<(Vec<f64>, Vec<f64>)> {
    let hiddens = window_hiddens(params, window)?;
    let last = window.last().unwrap();
    let h_i = hiddens.into_iter().next_back().unwrap();
    let p_i = predict(params, &h_i, last.agent)?;
    Ok((p_i, h_i))
}

/// Argmax with ties broken by the lowest label id.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-step outputs of a decode: predicted labels plus every p_i and h_i.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub hiddens: Vec<Vec<f64>>,
}

/// Sentence vectors for every utterance of a dialogue.
pub fn sentence_vectors(
    hcnn: &HcnnParams,
    embeddings: &Mat,
    utterances: &[(Vec<usize>, usize)],
) -> Result<Vec<Vec<f64>>> {
    utterances
        .iter()
        .map(|(tokens, _)| {
            let m = embed_sentence(tokens, embeddings)?;
            Ok(hcnn_forward(&m, hcnn)?.0)
        })
        .collect()
}

/// Runs the sentence model over (token ids, agent) pairs, producing the
/// steps the discourse model consumes. Labels stay unset.
pub fn dialogue_steps(
    hcnn: &HcnnParams,
    embeddings: &Mat,
    utterances: &[(Vec<usize>, usize)],
) -> Result<Vec<DialogueStep>> {
    let sentences = sentence_vectors(hcnn, embeddings, utterances)?;
    Ok(sentences
        .into_iter()
        .zip(utterances)
        .map(|(s, &(_, agent))| DialogueStep::new(s, agent, None))
        .collect())
}

/// Greedy left-to-right decoding: at each step the act with maximal
/// probability given the previously *predicted* acts is chosen. Only
/// utterances up to the current one are ever consulted.
pub fn greedy_decode(
    params: &RcnnParams,
    hcnn: &HcnnParams,
    embeddings: &Mat,
    dialogue: &[(Vec<usize>, usize)],
    d: usize,
    recurrence: Recurrence,
) -> Result<DecodeOutput> {
    if dialogue.is_empty() {
        return Err(Error::invalid("cannot decode an empty dialogue"));
    }
    let steps = dialogue_steps(hcnn, embeddings, dialogue)?;
    decode_steps(params, &steps, d, recurrence)
}

/// Greedy decoding over precomputed steps; their `label` fields are ignored.
pub fn decode_steps(
    params: &RcnnParams,
    steps: &[DialogueStep],
    d: usize,
    recurrence: Recurrence,
) -> Result<DecodeOutput> {
    let n = steps.len();
    let mut labels: Vec<usize> = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut hiddens = Vec::with_capacity(n);
    match recurrence {
        Recurrence::Windowed => {
            for i in 0..n {
                let window = build_window(steps, &labels, i, d);
                let (p, h) = forward_window(params, &window)?;
                labels.push(argmax(&p));
                probs.push(p);
                hiddens.push(h);
            }
        }
        Recurrence::Full => {
            let mut h = vec![0.0; params.hidden_dim()];
            for (i, step) in steps.iter().enumerate() {
                let prev_label =
                    if i == 0 { LabelInput::Start } else { LabelInput::Act(labels[i - 1]) };
                let prev_agent = if i == 0 { steps[0].agent } else { steps[i - 1].agent };
                h = rcnn_step(params, &h, prev_label, prev_agent, &step.sentence_vector)?;
                let p = predict(params, &h, step.agent)?;
                labels.push(argmax(&p));
                probs.push(p);
                hiddens.push(h.clone());
            }
        }
    }
    Ok(DecodeOutput { labels, probs, hiddens })
}

/// The hidden state at step `i` (0-based) of a dialogue prefix, under the
/// given (gold or predicted) labels: the vector representing the discourse up
/// to that step.
pub fn discourse_vector(
    params: &RcnnParams,
    steps: &[DialogueStep],
    labels: &[usize],
    i: usize,
    d: usize,
    recurrence: Recurrence,
) -> Result<DiscourseVector> {
    if i >= steps.len() {
        return Err(Error::invalid(format!("step index {i} beyond dialogue prefix")));
    }
    let values = match recurrence {
        Recurrence::Windowed => {
            let window = build_window(steps, labels, i, d);
            let hiddens = window_hiddens(params, &window)?;
            hiddens.into_iter().next_back().unwrap()
        }
        Recurrence::Full => {
            let mut h = vec![0.0; params.hidden_dim()];
            for (j, step) in steps.iter().take(i + 1).enumerate() {
                let prev_label =
                    if j == 0 { LabelInput::Start } else { LabelInput::Act(labels[j - 1]) };
                let prev_agent = if j == 0 { steps[0].agent } else { steps[j - 1].agent };
                h = rcnn_step(params, &h, prev_label, prev_agent, &step.sentence_vector)?;
            }
            h
        }
    };
    Ok(DiscourseVector { values, step_index: i })
}

/// Distance metric for discourse-vector lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }

    /// Distance between two vectors (cosine distance is 1 − similarity).
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => {
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                1.0 - dot / (na.sqrt() * nb.sqrt())
            }
            Metric::Euclidean => {
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let diff = x - y;
                    acc += diff * diff;
                }
                acc.sqrt()
            }
        }
    }
}

/// Exact k-nearest neighbours of `query` among `corpus`, ascending distance,
/// ties broken by the lower index. `exclude` removes a known self-match.
pub fn nearest_neighbours(
    query: &[f64],
    corpus: &[Vec<f64>],
    k: usize,
    metric: Metric,
    exclude: Option<usize>,
) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::invalid("nearest-neighbour corpus is empty"));
    }
    let mut ranked: Vec<(usize, f64)> = corpus
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, v)| (i, metric.distance(query, v)))
        .collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}
