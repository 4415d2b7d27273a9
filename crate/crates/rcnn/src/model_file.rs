//! The versioned binary model format.
//!
//! Layout: the magic bytes `RCNN`, a little-endian u32 format version, a
//! length-prefixed self-describing UTF-8 header (dimensions, hyperparameters,
//! label names, vocabulary in id order), then every parameter group as
//! little-endian 64-bit reals in a fixed order: embeddings, HCNN kernels by
//! (feature, layer), HCNN biases, I, S, H per agent id, O per agent id, b_h,
//! b_o. A save→load round trip reproduces every parameter bitwise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{LabelSet, Lexicon};
use crate::discourse::{Recurrence, RcnnParams};
use crate::error::{Error, Result};
use crate::hcnn::HcnnParams;
use crate::numerics::{Mat, Sigmoid};
use crate::training::{Hyperparams, Model, OptimizerKind, TrainMeta};

pub const MAGIC: &[u8; 4] = b"RCNN";
pub const FORMAT_VERSION: u32 = 1;

fn header_text(model: &Model) -> String {
    let hp = &model.hp;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('\t');
        s.push_str(&v);
        s.push('\n');
    };
    kv("embed_dim", hp.embed_dim.to_string());
    kv("hidden_dim", hp.hidden_dim.to_string());
    kv("depth", hp.depth.to_string());
    kv("l2_lambda", format!("{:?}", hp.l2_lambda));
    kv("optimizer", hp.optimizer.name().to_string());
    match hp.optimizer {
        OptimizerKind::Lbfgs { history, steps_per_batch } => {
            kv("opt_history", history.to_string());
            kv("opt_steps_per_batch", steps_per_batch.to_string());
        }
        OptimizerKind::Adam { lr, beta1, beta2, eps } => {
            kv("opt_lr", format!("{lr:?}"));
            kv("opt_beta1", format!("{beta1:?}"));
            kv("opt_beta2", format!("{beta2:?}"));
            kv("opt_eps", format!("{eps:?}"));
        }
        OptimizerKind::Sgd { lr } => kv("opt_lr", format!("{lr:?}")),
    }
    kv("batch_size", hp.batch_size.to_string());
    kv("max_epochs", hp.max_epochs.to_string());
    kv("seed", hp.seed.to_string());
    kv("max_sentence_len", hp.max_sentence_len.to_string());
    kv("min_count", hp.min_count.to_string());
    kv("sigmoid", hp.sigmoid.name().to_string());
    kv("recurrence", hp.recurrence.name().to_string());
    kv("patience", hp.patience.to_string());
    kv("n_agents", model.rcnn.n_agents().to_string());
    kv("n_labels", model.labels.len().to_string());
    kv("vocab_size", model.lexicon.vocab_size().to_string());
    kv(
        "hcnn_layer_sizes",
        model
            .hcnn
            .layer_sizes()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("epochs_trained", model.meta.epochs_trained.to_string());
    kv("final_loss", format!("{:?}", model.meta.final_loss));
    for name in model.labels.names() {
        kv("label", name.clone());
    }
    for token in model.lexicon.tokens() {
        kv("token", token.clone());
    }
    s
}

/// Writes the model to `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let header = header_text(model);
    let flat = model.to_flat();
    let mut bytes =
        Vec::with_capacity(4 + 4 + 8 + header.len() + 8 + flat.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Header {
    scalars: HashMap<String, String>,
    labels: Vec<String>,
    tokens: Vec<String>,
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let mut scalars = HashMap::new();
        let mut labels = Vec::new();
        let mut tokens = Vec::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("malformed model header line `{line}`")))?;
            match key {
                "label" => labels.push(value.to_string()),
                "token" => tokens.push(value.to_string()),
                _ => {
                    scalars.insert(key.to_string(), value.to_string());
                }
            }
        }
        Ok(Header { scalars, labels, tokens })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.scalars
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::data(format!("model header is missing `{key}`")))
    }

    fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse::<T>()
            .map_err(|_| Error::data(format!("model header field `{key}` is malformed")))
    }
}

/// Reads a model from `path`.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let take = |off: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(off..off + len)
            .ok_or_else(|| Error::data(format!("model file {} is truncated", path.display())))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::data(format!("{} is not a model file (bad magic)", path.display())));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported model format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(take(8, 8)?.try_into().unwrap()) as usize;
    let header_bytes = take(16, header_len)?;
    let header_text = std::str::from_utf8(header_bytes)
        .map_err(|_| Error::data("model header is not UTF-8".to_string()))?;
    let header = Header::parse(header_text)?;

    let payload_off = 16 + header_len;
    let n_values = u64::from_le_bytes(take(payload_off, 8)?.try_into().unwrap()) as usize;
    let value_bytes = take(payload_off + 8, n_values * 8)?;
    let mut flat = Vec::with_capacity(n_values);
    for chunk in value_bytes.chunks_exact(8) {
        flat.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    let optimizer = match header.get("optimizer")? {
        "lbfgs" => OptimizerKind::Lbfgs {
            history: header.parse_field("opt_history")?,
            steps_per_batch: header.parse_field("opt_steps_per_batch")?,
        },
        "adam" => OptimizerKind::Adam {
            lr: header.parse_field("opt_lr")?,
            beta1: header.parse_field("opt_beta1")?,
            beta2: header.parse_field("opt_beta2")?,
            eps: header.parse_field("opt_eps")?,
        },
        "sgd" => OptimizerKind::Sgd { lr: header.parse_field("opt_lr")? },
        other => return Err(Error::data(format!("unknown optimizer `{other}` in model file"))),
    };
    let hp = Hyperparams {
        embed_dim: header.parse_field("embed_dim")?,
        hidden_dim: header.parse_field("hidden_dim")?,
        depth: header.parse_field("depth")?,
        l2_lambda: header.parse_field("l2_lambda")?,
        optimizer,
        batch_size: header.parse_field("batch_size")?,
        max_epochs: header.parse_field("max_epochs")?,
        seed: header.parse_field("seed")?,
        max_sentence_len: header.parse_field("max_sentence_len")?,
        min_count: header.parse_field("min_count")?,
        sigmoid: Sigmoid::parse(header.get("sigmoid")?)?,
        recurrence: Recurrence::parse(header.get("recurrence")?)?,
        patience: header.parse_field("patience")?,
    };
    let n_agents: usize = header.parse_field("n_agents")?;
    let n_labels: usize = header.parse_field("n_labels")?;
    let vocab_size: usize = header.parse_field("vocab_size")?;
    if header.labels.len() != n_labels {
        return Err(Error::data("model header label count mismatch".to_string()));
    }
    if header.tokens.len() != vocab_size {
        return Err(Error::data("model header vocabulary count mismatch".to_string()));
    }

    let labels = LabelSet::from_names(header.labels.clone());
    let lexicon = Lexicon::from_parts(
        header.tokens.clone(),
        Mat::zeros(vocab_size, hp.embed_dim),
        hp.min_count,
    )?;
    let hcnn = HcnnParams::new(hp.embed_dim, hp.max_sentence_len, hp.sigmoid);
    let expected_sizes = hcnn
        .layer_sizes()
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    if header.get("hcnn_layer_sizes")? != expected_sizes {
        return Err(Error::data("model header kernel layout mismatch".to_string()));
    }
    let rcnn = RcnnParams::new(hp.hidden_dim, hp.embed_dim, n_labels, n_agents, hp.sigmoid);
    let meta = TrainMeta {
        epochs_trained: header.parse_field("epochs_trained")?,
        final_loss: header.parse_field("final_loss")?,
    };
    let mut model = Model { lexicon, labels, hcnn, rcnn, hp, meta };
    if flat.len() != model.n_params() {
        return Err(Error::data(format!(
            "model payload holds {} values but the header describes {}",
            flat.len(),
            model.n_params()
        )));
    }
    model.set_from_flat(&flat);
    Ok(model)
}
