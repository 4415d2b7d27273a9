//! Supervised training: the cross-entropy + L2 objective, exact
//! backpropagation through the depth-d unravelled discourse model into the
//! sentence model and the embeddings, mini-batch optimization, gradient
//! checking, and evaluation.

pub mod lbfgs;
mod objective;
mod optimize;

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{EncodedDialogue, LabelSet, Lexicon};
use crate::discourse::{greedy_decode, Recurrence, RcnnParams};
use crate::error::{Error, Result};
use crate::hcnn::HcnnParams;
use crate::numerics::{fd_gradient, relative_error, Sigmoid};

pub use objective::{loss_and_grad, loss_only};
pub use optimize::{train, EpochEvent};

/// Optimizer selection with per-optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Mini-batch L-BFGS: per batch, a bounded number of quasi-Newton steps
    /// with a strong-Wolfe line search; curvature history resets at batch
    /// boundaries because the objective changes with the batch.
    Lbfgs { history: usize, steps_per_batch: usize },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Lbfgs { .. } => "lbfgs",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
    }

    pub fn default_lbfgs() -> Self {
        OptimizerKind::Lbfgs { history: 10, steps_per_batch: 4 }
    }

    pub fn default_adam() -> Self {
        OptimizerKind::Adam { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn default_sgd() -> Self {
        OptimizerKind::Sgd { lr: 0.5 }
    }
}

/// Everything that shapes a model and its training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Truncation depth d: how many unravelled steps a prediction sees.
    pub depth: usize,
    pub l2_lambda: f64,
    pub optimizer: OptimizerKind,
    /// Dialogues per mini-batch; 0 means full batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub max_sentence_len: usize,
    pub min_count: usize,
    pub sigmoid: Sigmoid,
    pub recurrence: Recurrence,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embed_dim: 25,
            hidden_dim: 100,
            depth: 2,
            l2_lambda: 1e-4,
            // Mini-batch L-BFGS stalls on batch-induced gradient noise at
            // the default batch size; the adaptive optimizer is the robust
            // default. Full-batch L-BFGS converges cleanly:
            // `--optimizer lbfgs --batch-size 0 --lbfgs-steps 150`.
            optimizer: OptimizerKind::default_adam(),
            batch_size: 32,
            max_epochs: 50,
            seed: 7,
            max_sentence_len: 100,
            min_count: 2,
            sigmoid: Sigmoid::Logistic,
            recurrence: Recurrence::Windowed,
            patience: 8,
        }
    }
}

impl Hyperparams {
    /// Rejects values outside each field's domain before they reach an
    /// assert deeper in the stack.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("max_epochs", self.max_epochs),
            ("max_sentence_len", self.max_sentence_len),
            ("min_count", self.min_count),
            ("patience", self.patience),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::invalid("l2_lambda must be finite and non-negative"));
        }
        match self.optimizer {
            OptimizerKind::Lbfgs { history, steps_per_batch } => {
                if history == 0 || steps_per_batch == 0 {
                    return Err(Error::invalid(
                        "lbfgs history and steps per batch must be at least 1",
                    ));
                }
            }
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::invalid("learning rate must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Training provenance carried by a saved model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMeta {
    pub epochs_trained: usize,
    pub final_loss: f64,
}

/// A complete model: vocabulary, labels, sentence-model and discourse-model
/// parameters, and the hyperparameters they were built with.
#[derive(Debug, Clone)]
pub struct Model {
    pub lexicon: Lexicon,
    pub labels: LabelSet,
    pub hcnn: HcnnParams,
    pub rcnn: RcnnParams,
    pub hp: Hyperparams,
    pub meta: TrainMeta,
}

/// Offsets of each parameter group inside the flat parameter vector. The
/// order is fixed and shared with the model-file payload: embeddings, HCNN
/// kernels by (feature, layer), HCNN biases, I, S, H per agent, O per agent,
/// b_h, b_o.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub embed: Range<usize>,
    pub hcnn_kernels: Range<usize>,
    pub hcnn_biases: Range<usize>,
    pub input_label: Range<usize>,
    pub sentence: Range<usize>,
    pub recurrent: Vec<Range<usize>>,
    pub output: Vec<Range<usize>>,
    pub bias_h: Range<usize>,
    pub bias_o: Range<usize>,
    pub total: usize,
}

impl ModelLayout {
    pub fn of(model: &Model) -> Self {
        let mut off = 0usize;
        let mut next = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let embed = next(model.lexicon.embeddings.data().len());
        let hcnn_kernels = next(model.hcnn.kernels.len());
        let hcnn_biases = next(model.hcnn.biases.len());
        let input_label = next(model.rcnn.input_label.data().len());
        let sentence = next(model.rcnn.sentence.data().len());
        let recurrent = model.rcnn.recurrent.iter().map(|m| next(m.data().len())).collect();
        let output = model.rcnn.output.iter().map(|m| next(m.data().len())).collect();
        let bias_h = next(model.rcnn.bias_h.len());
        let bias_o = next(model.rcnn.bias_o.len());
        ModelLayout {
            embed,
            hcnn_kernels,
            hcnn_biases,
            input_label,
            sentence,
            recurrent,
            output,
            bias_h,
            bias_o,
            total: off,
        }
    }

    /// Ranges subject to L2: weight matrices and kernels, never biases or
    /// embeddings.
    pub fn weight_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges = vec![
            self.hcnn_kernels.clone(),
            self.input_label.clone(),
            self.sentence.clone(),
        ];
        ranges.extend(self.recurrent.iter().cloned());
        ranges.extend(self.output.iter().cloned());
        ranges
    }

    /// Named groups, for gradient-check reports.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut groups = vec![
            ("embeddings".to_string(), self.embed.clone()),
            ("hcnn_kernels".to_string(), self.hcnn_kernels.clone()),
            ("hcnn_biases".to_string(), self.hcnn_biases.clone()),
            ("I".to_string(), self.input_label.clone()),
            ("S".to_string(), self.sentence.clone()),
        ];
        for (a, r) in self.recurrent.iter().enumerate() {
            groups.push((format!("H[{a}]"), r.clone()));
        }
        for (a, r) in self.output.iter().enumerate() {
            groups.push((format!("O[{a}]"), r.clone()));
        }
        groups.push(("b_h".to_string(), self.bias_h.clone()));
        groups.push(("b_o".to_string(), self.bias_o.clone()));
        groups
    }
}

impl Model {
    pub fn layout(&self) -> ModelLayout {
        ModelLayout::of(self)
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }

    /// All parameters as one flat vector, in layout order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(self.lexicon.embeddings.data());
        flat.extend_from_slice(&self.hcnn.kernels);
        flat.extend_from_slice(&self.hcnn.biases);
        flat.extend_from_slice(self.rcnn.input_label.data());
        flat.extend_from_slice(self.rcnn.sentence.data());
        for m in &self.rcnn.recurrent {
            flat.extend_from_slice(m.data());
        }
        for m in &self.rcnn.output {
            flat.extend_from_slice(m.data());
        }
        flat.extend_from_slice(&self.rcnn.bias_h);
        flat.extend_from_slice(&self.rcnn.bias_o);
        flat
    }

    /// Writes a flat vector (layout order) back into the structured params.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length mismatch");
        let mut off = 0usize;
        let mut take = |len: usize| {
            let s = &flat[off..off + len];
            off += len;
            s
        };
        let n = self.lexicon.embeddings.data().len();
        self.lexicon.embeddings.data_mut().copy_from_slice(take(n));
        let n = self.hcnn.kernels.len();
        self.hcnn.kernels.copy_from_slice(take(n));
        let n = self.hcnn.biases.len();
        self.hcnn.biases.copy_from_slice(take(n));
        let n = self.rcnn.input_label.data().len();
        self.rcnn.input_label.data_mut().copy_from_slice(take(n));
        let n = self.rcnn.sentence.data().len();
        self.rcnn.sentence.data_mut().copy_from_slice(take(n));
        for i in 0..self.rcnn.recurrent.len() {
            let n = self.rcnn.recurrent[i].data().len();
            self.rcnn.recurrent[i].data_mut().copy_from_slice(take(n));
        }
        for i in 0..self.rcnn.output.len() {
            let n = self.rcnn.output[i].data().len();
            self.rcnn.output[i].data_mut().copy_from_slice(take(n));
        }
        let n = self.rcnn.bias_h.len();
        self.rcnn.bias_h.copy_from_slice(take(n));
        let n = self.rcnn.bias_o.len();
        self.rcnn.bias_o.copy_from_slice(take(n));
    }
}

/// Builds a fresh model: weights uniform in [−0.1, 0.1] from the seed,
/// biases zero. Embeddings keep whatever the lexicon was built with.
pub fn init_model(
    hp: &Hyperparams,
    lexicon: Lexicon,
    labels: LabelSet,
    n_agents: usize,
    seed: u64,
) -> Result<Model> {
    hp.validate()?;
    if lexicon.embed_dim() != hp.embed_dim {
        return Err(Error::invalid(format!(
            "lexicon embedding dim {} does not match hyperparameter {}",
            lexicon.embed_dim(),
            hp.embed_dim
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("label set is empty"));
    }
    let mut hcnn = HcnnParams::new(hp.embed_dim, hp.max_sentence_len, hp.sigmoid);
    let mut rcnn =
        RcnnParams::new(hp.hidden_dim, hp.embed_dim, labels.len(), n_agents, hp.sigmoid);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |values: &mut [f64]| {
        for v in values {
            *v = rng.random_range(-0.1..0.1);
        }
    };
    fill(&mut hcnn.kernels);
    fill(rcnn.input_label.data_mut());
    fill(rcnn.sentence.data_mut());
    for m in rcnn.recurrent.iter_mut() {
        fill(m.data_mut());
    }
    for m in rcnn.output.iter_mut() {
        fill(m.data_mut());
    }
    // Biases stay zero.

    Ok(Model { lexicon, labels, hcnn, rcnn, hp: hp.clone(), meta: TrainMeta::default() })
}

/// Worst finite-difference disagreement within one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().fold(0.0f64, |m, g| m.max(g.max_rel_error))
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < tol)
    }
}

/// Maximum parameter count `grad_check` will finite-difference.
pub const GRAD_CHECK_PARAM_LIMIT: usize = 20_000;

/// Compares the analytic gradient against central finite differences,
/// groupwise. Only for small models: 2·|θ| loss evaluations.
pub fn grad_check(model: &Model, sample: &[EncodedDialogue], eps: f64) -> Result<GradCheckReport> {
    let n = model.n_params();
    if n > GRAD_CHECK_PARAM_LIMIT {
        return Err(Error::invalid(format!(
            "model has {n} parameters; gradient checking is limited to {GRAD_CHECK_PARAM_LIMIT}"
        )));
    }
    let (loss, analytic) = loss_and_grad(model, sample)?;
    let flat = model.to_flat();
    let mut scratch = model.clone();
    let numeric = fd_gradient(
        |theta| {
            scratch.set_from_flat(theta);
            loss_only(&scratch, sample).expect("loss evaluation failed during gradient check")
        },
        &flat,
        eps,
    );
    let layout = model.layout();
    let groups = layout
        .groups()
        .into_iter()
        .map(|(name, range)| {
            let mut worst = GroupCheck {
                name,
                max_rel_error: 0.0,
                worst_coord: range.start,
                analytic: analytic.get(range.start).copied().unwrap_or(0.0),
                numeric: numeric.get(range.start).copied().unwrap_or(0.0),
            };
            for i in range {
                let err = relative_error(analytic[i], numeric[i]);
                if err > worst.max_rel_error {
                    worst.max_rel_error = err;
                    worst.worst_coord = i;
                    worst.analytic = analytic[i];
                    worst.numeric = numeric[i];
                }
            }
            worst
        })
        .collect();
    Ok(GradCheckReport { groups, loss })
}

/// How predictions are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Predictor {
    /// Greedy decoding with the model.
    #[default]
    Model,
    /// The most frequent test-set label, everywhere.
    Majority,
    /// Gold labels echoed back (upper-bound self-test).
    Oracle,
}

impl Predictor {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Predictor::Model),
            "majority" => Ok(Predictor::Majority),
            "oracle" => Ok(Predictor::Oracle),
            other => Err(Error::invalid(format!("unknown predictor `{other}`"))),
        }
    }
}

/// Per-label tallies over an evaluation run.
#[derive(Debug, Clone, Default)]
pub struct LabelCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    pub majority_pct: f64,
    pub random_pct: f64,
    pub per_label: Vec<LabelCounts>,
    /// Row-major confusion counts: `confusion[gold * L + predicted]`.
    pub confusion: Vec<usize>,
}

/// Greedy-decodes every dialogue and tallies accuracy, alongside the
/// majority and uniform-random baselines computed from the test set itself.
pub fn evaluate(model: &Model, test: &[EncodedDialogue]) -> Result<EvalReport> {
    evaluate_with(model, test, Predictor::Model)
}

pub fn evaluate_with(
    model: &Model,
    test: &[EncodedDialogue],
    predictor: Predictor,
) -> Result<EvalReport> {
    if test.iter().all(|d| d.is_empty()) {
        return Err(Error::invalid("evaluation set has no utterances"));
    }
    let n_labels = model.labels.len();
    for d in test {
        for u in &d.utterances {
            if u.act >= n_labels {
                return Err(Error::data(format!(
                    "dialogue {} carries label id {} outside the model's {n_labels} labels",
                    d.id, u.act
                )));
            }
        }
    }

    // Majority label of the test set, ties to the lowest id.
    let mut gold_counts = vec![0usize; n_labels];
    for d in test {
        for u in &d.utterances {
            gold_counts[u.act] += 1;
        }
    }
    let majority_label =
        (0..n_labels).max_by_key(|&i| (gold_counts[i], std::cmp::Reverse(i))).unwrap();
    let total: usize = gold_counts.iter().sum();

    let predictions: Vec<Vec<usize>> = match predictor {
        Predictor::Model => {
            let decoded: Result<Vec<Vec<usize>>> = test
                .par_iter()
                .map(|d| {
                    let dialogue: Vec<(Vec<usize>, usize)> =
                        d.utterances.iter().map(|u| (u.tokens.clone(), u.agent)).collect();
                    if dialogue.is_empty() {
                        return Ok(Vec::new());
                    }
                    Ok(greedy_decode(
                        &model.rcnn,
                        &model.hcnn,
                        &model.lexicon.embeddings,
                        &dialogue,
                        model.hp.depth,
                        model.hp.recurrence,
                    )?
                    .labels)
                })
                .collect();
            decoded?
        }
        Predictor::Majority => {
            test.iter().map(|d| vec![majority_label; d.utterances.len()]).collect()
        }
        Predictor::Oracle => {
            test.iter().map(|d| d.utterances.iter().map(|u| u.act).collect()).collect()
        }
    };

    let mut per_label = vec![LabelCounts::default(); n_labels];
    let mut confusion = vec![0usize; n_labels * n_labels];
    let mut correct = 0usize;
    for (d, preds) in test.iter().zip(&predictions) {
        for (u, &p) in d.utterances.iter().zip(preds) {
            per_label[u.act].gold += 1;
            per_label[p].predicted += 1;
            confusion[u.act * n_labels + p] += 1;
            if p == u.act {
                per_label[p].correct += 1;
                correct += 1;
            }
        }
    }

    Ok(EvalReport {
        total,
        correct,
        accuracy_pct: 100.0 * correct as f64 / total as f64,
        majority_pct: 100.0 * gold_counts[majority_label] as f64 / total as f64,
        random_pct: 100.0 / n_labels as f64,
        per_label,
        confusion,
    })
}

/// A micro model plus a matching two-dialogue sample, small enough for
/// finite differences: embedding dim 3, hidden dim 4, 3 labels, 2 agents,
/// dialogues of at most 3 utterances of at most 7 words.
pub fn micro_fixture(seed: u64, depth: usize, l2: f64) -> (Model, Vec<EncodedDialogue>) {
    use crate::corpus::{build_lexicon, synth_corpus, Dialogue};

    let (train_raw, _, _) = synth_corpus(6, 3, 8, seed);
    let short: Vec<Dialogue> = train_raw
        .into_iter()
        .take(2)
        .map(|mut d| {
            d.utterances.truncate(3);
            for u in &mut d.utterances {
                u.tokens.truncate(7);
            }
            d
        })
        .collect();
    let hp = Hyperparams {
        embed_dim: 3,
        hidden_dim: 4,
        depth,
        l2_lambda: l2,
        max_sentence_len: 7,
        min_count: 1,
        ..Default::default()
    };
    let lexicon = build_lexicon(&short, hp.embed_dim, hp.min_count, seed ^ 0x9e37)
        .expect("micro fixture lexicon");
    let labels = LabelSet::from_names(["act0", "act1", "act2"]);
    let model = init_model(&hp, lexicon, labels, 2, seed ^ 0x51f).expect("micro fixture model");
    let (encoded, _) = crate::corpus::encode_dialogues(&short, &model.lexicon, 7);
    (model, encoded)
}
