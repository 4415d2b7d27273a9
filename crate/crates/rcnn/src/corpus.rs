//! Corpus handling: Switchboard Dialogue Act ingestion (transcripts, act
//! labels, and speaker labels only), tokenization, lexicon construction with
//! UNK, label-set management, the train/test split, and a synthetic dialogue
//! generator for desk-scale end-to-end tests.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Marker absorbing rare and unseen words. Survives tokenization unchanged.
pub const UNK_TOKEN: &str = "<unk>";

/// One of the two Switchboard callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agent {
    A,
    B,
}

impl Agent {
    pub fn index(self) -> usize {
        match self {
            Agent::A => 0,
            Agent::B => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Agent::A => "A",
            Agent::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Agent> {
        match s.trim().chars().next()?.to_ascii_uppercase() {
            'A' => Some(Agent::A),
            'B' => Some(Agent::B),
            _ => None,
        }
    }
}

/// Ordered act names with a dense id per name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        LabelSet { names, index }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One speaker turn: normalized tokens, caller, act id, 1-based position.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub agent: Agent,
    pub act: usize,
    pub position: usize,
}

/// An ordered conversation.
#[derive(Debug, Clone)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

/// Token table with UNK fallback and the trainable embedding matrix
/// (vocabulary × embedding dim; row t is the vector of token t).
#[derive(Debug, Clone)]
pub struct Lexicon {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub unk: usize,
    pub embeddings: Mat,
    pub min_count: usize,
}

impl Lexicon {
    pub fn from_parts(tokens: Vec<String>, embeddings: Mat, min_count: usize) -> Result<Self> {
        if embeddings.rows() != tokens.len() {
            return Err(Error::invalid("embedding matrix does not match token list"));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let unk = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::invalid("lexicon is missing the UNK token"))?;
        Ok(Lexicon { tokens, index, unk, embeddings, min_count })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a token, falling back to UNK. Never fails.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Deterministic utterance normalization.
///
/// Lowercases; keeps bracketed non-verbal markers such as `[laughter]` as
/// single tokens; splits trailing sentence punctuation off as tokens; drops
/// disfluency commas and transcription markup. Idempotent on its own output;
/// an utterance with nothing left becomes a single UNK marker.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens: Vec<String> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '[' || c == '<' {
            let close = if c == '[' { ']' } else { '>' };
            let mut j = i + 1;
            while j < chars.len() && chars[j] != close {
                j += 1;
            }
            let inner: String = chars[i + 1..j.min(chars.len())].iter().collect();
            let inner = inner.split_whitespace().collect::<Vec<_>>().join("-");
            if !inner.is_empty() {
                tokens.push(format!("{c}{inner}{close}"));
            }
            i = j + 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].is_whitespace() && chars[j] != '[' && chars[j] != '<' {
            j += 1;
        }
        let chunk: String = chars[i..j].iter().collect();
        i = j;
        push_word_tokens(&chunk, &mut tokens);
    }
    if tokens.is_empty() {
        tokens.push(UNK_TOKEN.to_string());
    }
    tokens
}

fn push_word_tokens(chunk: &str, tokens: &mut Vec<String>) {
    // Disfluency/slash-unit markup that carries no words.
    if chunk.len() <= 2 && chunk.starts_with('{') {
        return;
    }
    if matches!(chunk, "}" | "/" | "+" | "#" | "((" | "))" | "-/" | "+/") {
        return;
    }
    let mut stem: String = chunk
        .chars()
        .filter(|c| {
            c.is_ascii_lowercase()
                || c.is_ascii_digit()
                || matches!(c, '\'' | '-' | '&' | '_' | '.' | '?' | '!' | ';' | ':')
        })
        .collect();
    let mut tail: Vec<char> = Vec::new();
    while let Some(last) = stem.chars().last() {
        if matches!(last, '.' | '?' | '!' | ';' | ':') {
            tail.push(last);
            stem.pop();
        } else {
            break;
        }
    }
    if !stem.is_empty() {
        tokens.push(stem);
    }
    for c in tail.into_iter().rev() {
        tokens.push(c.to_string());
    }
}

/// Builds the token table from training dialogues.
///
/// Tokens seen fewer than `min_count` times map to UNK. Ids are assigned by
/// descending frequency (ties lexicographic) with UNK at id 0; embeddings are
/// drawn uniformly from [−0.1, 0.1] with the given seed.
pub fn build_lexicon(
    train: &[Dialogue],
    embed_dim: usize,
    min_count: usize,
    seed: u64,
) -> Result<Lexicon> {
    assert!(min_count >= 1 && embed_dim >= 1);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    for d in train {
        for u in &d.utterances {
            for t in &u.tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::data("cannot build a lexicon from an empty training set"));
    }
    let mut eligible: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != UNK_TOKEN)
        .collect();
    eligible.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let mut tokens = Vec::with_capacity(eligible.len() + 1);
    tokens.push(UNK_TOKEN.to_string());
    tokens.extend(eligible.into_iter().map(|(t, _)| t.to_string()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embeddings = Mat::zeros(tokens.len(), embed_dim);
    for v in embeddings.data_mut() {
        *v = rng.random_range(-0.1..0.1);
    }
    Lexicon::from_parts(tokens, embeddings, min_count)
}

/// Utterance ready for the models: token ids, agent index, act id.
#[derive(Debug, Clone)]
pub struct EncodedUtterance {
    pub tokens: Vec<usize>,
    pub agent: usize,
    pub act: usize,
}

#[derive(Debug, Clone)]
pub struct EncodedDialogue {
    pub id: String,
    pub utterances: Vec<EncodedUtterance>,
}

impl EncodedDialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Encodes dialogues through the lexicon, truncating utterances longer than
/// `max_len` words. Returns the dialogues and how many were truncated.
pub fn encode_dialogues(
    dialogues: &[Dialogue],
    lexicon: &Lexicon,
    max_len: usize,
) -> (Vec<EncodedDialogue>, usize) {
    let mut truncated = 0usize;
    let encoded = dialogues
        .iter()
        .map(|d| EncodedDialogue {
            id: d.id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| {
                    let mut ids = lexicon.encode(&u.tokens);
                    if ids.len() > max_len {
                        ids.truncate(max_len);
                        truncated += 1;
                    }
                    EncodedUtterance { tokens: ids, agent: u.agent.index(), act: u.act }
                })
                .collect(),
        })
        .collect();
    (encoded, truncated)
}

// ---------------------------------------------------------------------------
// Switchboard ingestion
// ---------------------------------------------------------------------------

/// The 42 clustered dialogue-act classes, in canonical order.
pub const SWDA_LABELS: [&str; 42] = [
    "sd", "b", "sv", "aa", "%", "ba", "qy", "x", "ny", "fc", "qw", "nn", "bk", "h", "qy^d",
    "fo_o_fw_\"_by_bc", "bh", "^q", "bf", "na", "ad", "^2", "b^m", "qo", "qh", "^h", "ar", "ng",
    "br", "no", "fp", "qrr", "arp_nd", "t3", "oo_co_cc", "t1", "bd", "aap_am", "^g", "qw^d", "fa",
    "ft",
];

/// Human-readable names for the clustered classes, for reports.
pub fn describe_label(tag: &str) -> &str {
    match tag {
        "sd" => "Statement-non-opinion",
        "b" => "Acknowledge (Backchannel)",
        "sv" => "Statement-opinion",
        "aa" => "Agree/Accept",
        "%" => "Abandoned/Uninterpretable",
        "ba" => "Appreciation",
        "qy" => "Yes-No-Question",
        "x" => "Non-verbal",
        "ny" => "Yes answers",
        "fc" => "Conventional-closing",
        "qw" => "Wh-Question",
        "nn" => "No answers",
        "bk" => "Response Acknowledgement",
        "h" => "Hedge",
        "qy^d" => "Declarative Yes-No-Question",
        "fo_o_fw_\"_by_bc" => "Other",
        "bh" => "Backchannel in question form",
        "^q" => "Quotation",
        "bf" => "Summarize/reformulate",
        "na" => "Affirmative non-yes answers",
        "ad" => "Action-directive",
        "^2" => "Collaborative Completion",
        "b^m" => "Repeat-phrase",
        "qo" => "Open-Question",
        "qh" => "Rhetorical-Question",
        "^h" => "Hold before answer",
        "ar" => "Reject",
        "ng" => "Negative non-no answers",
        "br" => "Signal-non-understanding",
        "no" => "Other answers",
        "fp" => "Conventional-opening",
        "qrr" => "Or-Clause",
        "arp_nd" => "Dispreferred answers",
        "t3" => "Third-party-talk",
        "oo_co_cc" => "Offers, Options, Commits",
        "t1" => "Self-talk",
        "bd" => "Downplayer",
        "aap_am" => "Maybe/Accept-part",
        "^g" => "Tag-Question",
        "qw^d" => "Declarative Wh-Question",
        "fa" => "Apology",
        "ft" => "Thanking",
        other => other,
    }
}

/// The clustered label set used for Switchboard.
pub fn swda_label_set() -> LabelSet {
    LabelSet::from_names(SWDA_LABELS)
}

/// The 19-conversation test split of Stolcke et al. Any other manifest can be
/// substituted via `--manifest`.
pub const DEFAULT_TEST_MANIFEST: &str = "\
# Test conversations (one id per line).
2151\n2229\n2434\n2441\n2461\n2503\n2724\n2836\n2838\n2960\n3528\n3756\n4082\n4103\n4470\n4617\n4721\n4724\n4736\n";

/// Clusters a raw Switchboard act tag into one of the 42 classes (or `+` for
/// a continued segment, which the parser merges into the previous turn).
pub fn cluster_act_tag(raw: &str) -> String {
    let first = raw.split([',', ';']).next().unwrap_or("").trim().to_string();
    match first.as_str() {
        "qy^d" | "qw^d" | "b^m" => return first,
        "nn^e" => return "ng".to_string(),
        "ny^e" => return "na".to_string(),
        _ => {}
    }
    // Cut at the first caret that has a preceding character.
    let mut tag = first;
    if let Some(pos) = tag.char_indices().position(|(i, c)| c == '^' && i >= 1) {
        tag.truncate(pos);
    }
    let tag: String = tag.chars().filter(|c| !matches!(c, '(' | ')' | '@' | '*')).collect();
    match tag.as_str() {
        "qr" | "qy" => "qy".to_string(),
        "fe" | "ba" => "ba".to_string(),
        "oo" | "co" | "cc" => "oo_co_cc".to_string(),
        "fx" | "sv" => "sv".to_string(),
        "aap" | "am" => "aap_am".to_string(),
        "arp" | "nd" => "arp_nd".to_string(),
        "fo" | "o" | "fw" | "\"" | "by" | "bc" => "fo_o_fw_\"_by_bc".to_string(),
        _ => tag,
    }
}

/// Which CSV columns hold the four fields the parser needs.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub conversation: String,
    pub caller: String,
    pub act: String,
    pub text: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            conversation: "conversation_no".to_string(),
            caller: "caller".to_string(),
            act: "act_tag".to_string(),
            text: "text".to_string(),
        }
    }
}

impl ColumnMap {
    /// Reads `field=column` lines (fields: conversation, caller, act, text).
    pub fn from_file(path: &Path) -> Result<Self> {
        let contents = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = ColumnMap::default();
        for (lineno, line) in contents.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::data(format!("{}:{}: expected field=column", path.display(), lineno + 1))
            })?;
            let value = value.trim().to_string();
            match key.trim() {
                "conversation" => map.conversation = value,
                "caller" => map.caller = value,
                "act" => map.act = value,
                "text" => map.text = value,
                other => {
                    return Err(Error::data(format!(
                        "{}:{}: unknown field `{other}`",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(map)
    }
}

/// Canonical form of a conversation id, so `sw04721`, `sw_4721`, and `4721`
/// all name the same conversation.
fn normalize_conv_id(id: &str) -> String {
    let mut s = id.trim().to_lowercase();
    if let Some(rest) = s.strip_prefix("sw") {
        s = rest.to_string();
    }
    let s = s.trim_start_matches(['_', '-']);
    let trimmed = s.trim_start_matches('0');
    if trimmed.is_empty() {
        s.to_string()
    } else {
        trimmed.to_string()
    }
}

/// Everything `parse_swda` produces.
#[derive(Debug)]
pub struct ParsedCorpus {
    pub train: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub labels: LabelSet,
    /// Rows dropped for missing fields, unknown callers or acts, or
    /// unattachable `+` segments.
    pub skipped_rows: usize,
}

impl ParsedCorpus {
    pub fn train_utterances(&self) -> usize {
        self.train.iter().map(|d| d.utterances.len()).sum()
    }

    pub fn test_utterances(&self) -> usize {
        self.test.iter().map(|d| d.utterances.len()).sum()
    }
}

struct RawRow {
    caller: Agent,
    act: String,
    text: String,
}

/// Parses a directory of Switchboard CSVs (one conversation per file;
/// columns per `ColumnMap`) and splits it by the manifest of test
/// conversation ids. Raw act tags are clustered to the 42 classes;
/// `+` segments are appended to the previous turn of the same caller.
pub fn parse_swda(
    corpus_dir: &Path,
    manifest: Option<&Path>,
    columns: &ColumnMap,
) -> Result<ParsedCorpus> {
    if !corpus_dir.is_dir() {
        return Err(Error::data(format!("corpus directory not found: {}", corpus_dir.display())));
    }
    let mut files: Vec<_> = walkdir::WalkDir::new(corpus_dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| {
            e.file_type().is_file()
                && e.path().extension().map(|x| x.eq_ignore_ascii_case("csv")).unwrap_or(false)
        })
        .map(|e| e.into_path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("no CSV files under {}", corpus_dir.display())));
    }

    let labels = swda_label_set();
    let mut skipped = 0usize;
    // Normalized id → (display id, rows in file order).
    let mut conversations: BTreeMap<String, (String, Vec<RawRow>)> = BTreeMap::new();

    for file in &files {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(file)
            .map_err(|e| Error::data(format!("{}: {e}", file.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::data(format!("{}: {e}", file.display())))?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (ci, ca, ac, tx) = match (
            col(&columns.conversation),
            col(&columns.caller),
            col(&columns.act),
            col(&columns.text),
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(Error::data(format!(
                    "{}: missing required columns ({}, {}, {}, {})",
                    file.display(),
                    columns.conversation,
                    columns.caller,
                    columns.act,
                    columns.text
                )))
            }
        };
        for record in reader.records() {
            let record = match record {
                Ok(r) => r,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let field = |i: usize| record.get(i).map(str::trim);
            let (conv, caller, act, text) = match (field(ci), field(ca), field(ac), field(tx)) {
                (Some(conv), Some(caller), Some(act), Some(text)) if !conv.is_empty() => {
                    (conv, caller, act, text)
                }
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            let Some(agent) = Agent::parse(caller) else {
                skipped += 1;
                continue;
            };
            let key = normalize_conv_id(conv);
            let entry =
                conversations.entry(key).or_insert_with(|| (conv.to_string(), Vec::new()));
            entry.1.push(RawRow { caller: agent, act: act.to_string(), text: text.to_string() });
        }
    }

    // Assemble dialogues: cluster tags, merge `+` segments, tokenize.
    let mut dialogues: Vec<(String, Dialogue)> = Vec::with_capacity(conversations.len());
    for (key, (display, rows)) in conversations {
        let mut merged: Vec<(Agent, usize, String)> = Vec::new();
        for row in rows {
            let clustered = cluster_act_tag(&row.act);
            if clustered == "+" {
                // Continuation of this caller's previous turn.
                match merged.iter_mut().rev().find(|(a, _, _)| *a == row.caller) {
                    Some((_, _, text)) => {
                        text.push(' ');
                        text.push_str(&row.text);
                    }
                    None => skipped += 1,
                }
                continue;
            }
            let Some(act) = labels.id(&clustered) else {
                skipped += 1;
                continue;
            };
            merged.push((row.caller, act, row.text));
        }
        let utterances: Vec<Utterance> = merged
            .into_iter()
            .enumerate()
            .map(|(i, (agent, act, text))| Utterance {
                tokens: tokenize(&text),
                agent,
                act,
                position: i + 1,
            })
            .collect();
        if !utterances.is_empty() {
            dialogues.push((key, Dialogue { id: display, utterances }));
        }
    }
    // Numeric order when ids are numeric, lexicographic otherwise.
    dialogues.sort_by(|a, b| match (a.0.parse::<u64>(), b.0.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.0.cmp(&b.0),
    });

    // Test split from the manifest.
    let manifest_text = match manifest {
        Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => DEFAULT_TEST_MANIFEST.to_string(),
    };
    let mut test_ids: Vec<String> = Vec::new();
    for line in manifest_text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        test_ids.push(normalize_conv_id(line));
    }
    for id in &test_ids {
        if !dialogues.iter().any(|(key, _)| key == id) {
            return Err(Error::data(format!(
                "split manifest names unknown conversation `{id}`"
            )));
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (key, dialogue) in dialogues {
        if test_ids.contains(&key) {
            test.push(dialogue);
        } else {
            train.push(dialogue);
        }
    }
    Ok(ParsedCorpus { train, test, labels, skipped_rows: skipped })
}

/// Plain-text table of per-label train/test counts and percentages,
/// descending by train frequency, with totals.
pub fn summary_report(train: &[Dialogue], test: &[Dialogue], labels: &LabelSet) -> String {
    let count = |dialogues: &[Dialogue]| {
        let mut counts = vec![0usize; labels.len()];
        for d in dialogues {
            for u in &d.utterances {
                counts[u.act] += 1;
            }
        }
        counts
    };
    let train_counts = count(train);
    let test_counts = count(test);
    let train_total: usize = train_counts.iter().sum();
    let test_total: usize = test_counts.iter().sum();
    let pct = |c: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            100.0 * c as f64 / total as f64
        }
    };

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));

    let mut out = String::new();
    writeln!(out, "label\tname\ttrain_count\ttrain_pct\ttest_count\ttest_pct").unwrap();
    for id in order {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{}\t{:.6}",
            labels.name(id),
            describe_label(labels.name(id)),
            train_counts[id],
            pct(train_counts[id], train_total),
            test_counts[id],
            pct(test_counts[id], test_total),
        )
        .unwrap();
    }
    writeln!(out, "total_utterances\t\t{train_total}\t\t{test_total}\t").unwrap();
    writeln!(out, "total_dialogues\t\t{}\t\t{}\t", train.len(), test.len()).unwrap();
    out
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Generates a two-agent corpus whose act labels follow a rule a depth-2
/// model expresses exactly: an utterance containing the keyword `cue<j>`
/// has act j; an utterance without a keyword continues the previous act.
/// The first utterance of a dialogue always carries a keyword. Dialogues are
/// 8–16 utterances long; every tenth dialogue goes to the test split.
pub fn synth_corpus(
    n_dialogues: usize,
    n_acts: usize,
    vocab: usize,
    seed: u64,
) -> (Vec<Dialogue>, Vec<Dialogue>, LabelSet) {
    assert!(n_acts >= 2, "synthetic corpus needs at least two acts");
    assert!(vocab >= 1);
    let labels = LabelSet::from_names((0..n_acts).map(|i| format!("act{i}")));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for di in 0..n_dialogues {
        let len = rng.random_range(8..=16);
        let mut agent = if rng.random_bool(0.5) { Agent::A } else { Agent::B };
        let mut prev_act = 0usize;
        let mut utterances = Vec::with_capacity(len);
        for ui in 0..len {
            // Short utterances keep the convolution hierarchy shallow, so the
            // keyword signal survives the sigmoid layers from a small init.
            let n_fillers = rng.random_range(1..=4);
            let mut tokens: Vec<String> =
                (0..n_fillers).map(|_| format!("w{}", rng.random_range(0..vocab))).collect();
            let act = if ui == 0 || rng.random_bool(0.5) {
                let cue = rng.random_range(0..n_acts);
                let pos = rng.random_range(0..=tokens.len());
                tokens.insert(pos, format!("cue{cue}"));
                cue
            } else {
                prev_act
            };
            prev_act = act;
            utterances.push(Utterance { tokens, agent, act, position: ui + 1 });
            if rng.random_bool(0.75) {
                agent = match agent {
                    Agent::A => Agent::B,
                    Agent::B => Agent::A,
                };
            }
        }
        let dialogue = Dialogue { id: format!("synth-{di:04}"), utterances };
        if di % 10 == 9 {
            test.push(dialogue);
        } else {
            train.push(dialogue);
        }
    }
    (train, test, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Yes, exactly."), vec!["yes", "exactly", "."]);
        assert_eq!(tokenize("[Laughter]"), vec!["[laughter]"]);
        assert_eq!(tokenize(""), vec![UNK_TOKEN]);
        assert_eq!(tokenize("So, -"), vec!["so", "-"]);
        assert_eq!(tokenize("Is that what you do?"), vec![
            "is", "that", "what", "you", "do", "?"
        ]);
    }

    #[test]
    fn tokenize_strips_switchboard_markup() {
        assert_eq!(tokenize("{F Uh, } I guess so. /"), vec!["uh", "i", "guess", "so", "."]);
        assert_eq!(tokenize("{D You know } it's fine, +"), vec![
            "you", "know", "it's", "fine"
        ]);
        assert_eq!(tokenize("[Throat clearing]"), vec!["[throat-clearing]"]);
    }

    #[test]
    fn tokenize_is_idempotent() {
        let samples = [
            "Yes, exactly.",
            "{F Uh, } I guess so. /",
            "[Laughter] okay --",
            "So, -",
            "",
            "AT&T's stock-price... what?!",
        ];
        for s in samples {
            let once = tokenize(s);
            let again = tokenize(&once.join(" "));
            assert_eq!(once, again, "input {s:?}");
        }
    }

    #[test]
    fn unk_marker_survives_tokenization() {
        assert_eq!(tokenize(UNK_TOKEN), vec![UNK_TOKEN]);
    }

    fn dialogue_from(tokens_per_utt: &[&[&str]]) -> Dialogue {
        Dialogue {
            id: "d0".to_string(),
            utterances: tokens_per_utt
                .iter()
                .enumerate()
                .map(|(i, toks)| Utterance {
                    tokens: toks.iter().map(|s| s.to_string()).collect(),
                    agent: if i % 2 == 0 { Agent::A } else { Agent::B },
                    act: 0,
                    position: i + 1,
                })
                .collect(),
        }
    }

    #[test]
    fn lexicon_assigns_ids_and_unk() {
        let train = vec![dialogue_from(&[&["a", "b", "a"], &["c"]])];
        let lex = build_lexicon(&train, 4, 1, 99).unwrap();
        // 3 distinct tokens + UNK.
        assert_eq!(lex.vocab_size(), 4);
        assert_eq!(lex.lookup("a"), 1); // most frequent after UNK
        assert_eq!(lex.lookup("zzz"), lex.unk);
        assert_eq!(lex.unk, 0);
        assert_eq!(lex.embed_dim(), 4);

        // min_count 2 sends singletons to UNK.
        let lex2 = build_lexicon(&train, 4, 2, 99).unwrap();
        assert_eq!(lex2.vocab_size(), 2);
        assert_eq!(lex2.lookup("b"), lex2.unk);

        assert!(build_lexicon(&[], 4, 1, 0).is_err());
    }

    #[test]
    fn lexicon_is_deterministic() {
        let train = vec![dialogue_from(&[&["a", "b"], &["c", "a"]])];
        let l1 = build_lexicon(&train, 25, 1, 7).unwrap();
        let l2 = build_lexicon(&train, 25, 1, 7).unwrap();
        assert_eq!(l1.embeddings.data(), l2.embeddings.data());
        assert_eq!(l1.tokens(), l2.tokens());
        assert_eq!(l1.embed_dim(), 25);
        let l3 = build_lexicon(&train, 25, 1, 8).unwrap();
        assert_ne!(l1.embeddings.data(), l3.embeddings.data());
    }

    #[test]
    fn encode_truncates_long_utterances() {
        let train = vec![dialogue_from(&[&["a", "b", "c", "d", "e"], &["a"]])];
        let lex = build_lexicon(&train, 2, 1, 0).unwrap();
        let (encoded, truncated) = encode_dialogues(&train, &lex, 3);
        assert_eq!(truncated, 1);
        assert_eq!(encoded[0].utterances[0].tokens.len(), 3);
        assert_eq!(encoded[0].utterances[1].tokens.len(), 1);
    }

    #[test]
    fn act_tag_clustering() {
        assert_eq!(cluster_act_tag("sd"), "sd");
        assert_eq!(cluster_act_tag("sd^e"), "sd");
        assert_eq!(cluster_act_tag("sv@"), "sv");
        assert_eq!(cluster_act_tag("fx"), "sv");
        assert_eq!(cluster_act_tag("qy^d"), "qy^d");
        assert_eq!(cluster_act_tag("qr"), "qy");
        assert_eq!(cluster_act_tag("nn^e"), "ng");
        assert_eq!(cluster_act_tag("ny^e"), "na");
        assert_eq!(cluster_act_tag("fe"), "ba");
        assert_eq!(cluster_act_tag("oo"), "oo_co_cc");
        assert_eq!(cluster_act_tag("arp"), "arp_nd");
        assert_eq!(cluster_act_tag("fw"), "fo_o_fw_\"_by_bc");
        assert_eq!(cluster_act_tag("\""), "fo_o_fw_\"_by_bc");
        assert_eq!(cluster_act_tag("^2"), "^2");
        assert_eq!(cluster_act_tag("^g^r"), "^g");
        assert_eq!(cluster_act_tag("sd(^q)"), "sd");
        assert_eq!(cluster_act_tag("sd,sv"), "sd");
        assert_eq!(cluster_act_tag("+"), "+");
        assert_eq!(cluster_act_tag("b^m^r"), "b");
    }

    #[test]
    fn swda_label_set_has_42_dense_ids() {
        let labels = swda_label_set();
        assert_eq!(labels.len(), 42);
        for (i, name) in labels.names().iter().enumerate() {
            assert_eq!(labels.id(name), Some(i));
        }
        // Every clustered tag of the mapping lands in the set.
        for raw in ["sd", "qy^d", "nn^e", "ny^e", "fx", "qr", "fe", "oo", "arp", "fo"] {
            assert!(labels.id(&cluster_act_tag(raw)).is_some(), "{raw}");
        }
    }

    fn write_conv_csv(dir: &Path, name: &str, rows: &[(&str, &str, &str, &str)]) {
        let mut f = std::fs::File::create(dir.join(name)).unwrap();
        writeln!(f, "swda_filename,conversation_no,act_tag,caller,text").unwrap();
        for (conv, caller, act, text) in rows {
            writeln!(f, "sw{conv}.csv,{conv},{act},{caller},\"{text}\"").unwrap();
        }
    }

    #[test]
    fn parse_swda_splits_and_merges_segments() {
        let dir = tempfile::tempdir().unwrap();
        write_conv_csv(
            dir.path(),
            "sw_0001_1001.utt.csv",
            &[
                ("1001", "A", "qw", "What do you do?"),
                ("1001", "B", "sd", "I work, uh,"),
                ("1001", "A", "b", "Uh-huh."),
                ("1001", "B", "+", "at a big firm."),
            ],
        );
        write_conv_csv(
            dir.path(),
            "sw_0002_1002.utt.csv",
            &[("1002", "A", "sv", "I think so."), ("1002", "B", "aa", "Yes, exactly.")],
        );
        let manifest = dir.path().join("split.txt");
        std::fs::write(&manifest, "# test ids\nsw1002\n").unwrap();

        let parsed =
            parse_swda(dir.path(), Some(&manifest), &ColumnMap::default()).unwrap();
        assert_eq!(parsed.train.len(), 1);
        assert_eq!(parsed.test.len(), 1);
        assert_eq!(parsed.skipped_rows, 0);
        assert_eq!(parsed.labels.len(), 42);

        // The `+` segment merged into B's earlier turn.
        let train = &parsed.train[0];
        assert_eq!(train.utterances.len(), 3);
        let merged = &train.utterances[1];
        assert_eq!(merged.agent, Agent::B);
        assert_eq!(
            merged.tokens,
            vec!["i", "work", "uh", "at", "a", "big", "firm", "."]
        );
        // Positions contiguous from 1.
        for (i, u) in train.utterances.iter().enumerate() {
            assert_eq!(u.position, i + 1);
        }
        assert_eq!(parsed.test[0].utterances.len(), 2);
    }

    #[test]
    fn parse_swda_empty_manifest_means_all_train() {
        let dir = tempfile::tempdir().unwrap();
        write_conv_csv(dir.path(), "c.csv", &[("42", "A", "sd", "Hello.")]);
        let manifest = dir.path().join("empty.txt");
        std::fs::write(&manifest, "# nothing\n").unwrap();
        let parsed = parse_swda(dir.path(), Some(&manifest), &ColumnMap::default()).unwrap();
        assert_eq!(parsed.train.len(), 1);
        assert!(parsed.test.is_empty());
    }

    #[test]
    fn parse_swda_rejects_unknown_manifest_ids() {
        let dir = tempfile::tempdir().unwrap();
        write_conv_csv(dir.path(), "c.csv", &[("42", "A", "sd", "Hello.")]);
        let manifest = dir.path().join("bad.txt");
        std::fs::write(&manifest, "9999\n").unwrap();
        let err = parse_swda(dir.path(), Some(&manifest), &ColumnMap::default());
        assert!(err.is_err());
    }

    #[test]
    fn parse_swda_skips_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = std::fs::File::create(dir.path().join("c.csv")).unwrap();
        writeln!(f, "conversation_no,act_tag,caller,text").unwrap();
        writeln!(f, "7,sd,A,\"Fine.\"").unwrap();
        writeln!(f, "7,sd,X,\"Bad caller.\"").unwrap();
        writeln!(f, ",sd,A,\"No conversation id.\"").unwrap();
        drop(f);
        let manifest = dir.path().join("m.txt");
        std::fs::write(&manifest, "").unwrap();
        let parsed = parse_swda(dir.path(), Some(&manifest), &ColumnMap::default()).unwrap();
        assert_eq!(parsed.skipped_rows, 2);
        assert_eq!(parsed.train[0].utterances.len(), 1);
    }

    #[test]
    fn parse_swda_missing_dir_is_an_error() {
        let err = parse_swda(Path::new("/nonexistent/nowhere"), None, &ColumnMap::default());
        assert!(err.is_err());
    }

    #[test]
    fn synth_corpus_is_deterministic_and_rule_recoverable() {
        let (train1, test1, labels) = synth_corpus(50, 5, 20, 7);
        let (train2, test2, _) = synth_corpus(50, 5, 20, 7);
        assert_eq!(train1.len(), 45);
        assert_eq!(test1.len(), 5);
        assert_eq!(labels.len(), 5);
        for (a, b) in train1.iter().zip(&train2) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.utterances.iter().zip(&b.utterances) {
                assert_eq!(x.tokens, y.tokens);
                assert_eq!(x.act, y.act);
                assert_eq!(x.agent, y.agent);
            }
        }
        assert_eq!(test1.len(), test2.len());

        // The generating rule recovers every label: keyword wins, otherwise
        // the previous act continues.
        for d in train1.iter().chain(&test1) {
            let mut prev = 0usize;
            for u in &d.utterances {
                let cue = u.tokens.iter().find_map(|t| {
                    t.strip_prefix("cue").and_then(|x| x.parse::<usize>().ok())
                });
                let expect = cue.unwrap_or(prev);
                assert_eq!(u.act, expect, "dialogue {} position {}", d.id, u.position);
                prev = u.act;
            }
        }
    }

    #[test]
    fn synth_corpus_size_is_in_expected_range() {
        let (train, test, _) = synth_corpus(200, 5, 30, 7);
        let total: usize =
            train.iter().chain(&test).map(|d| d.utterances.len()).sum();
        assert!(total >= 2000, "got {total} utterances");
        assert_eq!(train.len() + test.len(), 200);
    }

    #[test]
    fn summary_report_counts() {
        let (train, test, labels) = synth_corpus(20, 3, 10, 1);
        let report = summary_report(&train, &test, &labels);
        assert!(report.contains("act0"));
        assert!(report.contains("total_utterances"));
        let total: usize = train.iter().map(|d| d.utterances.len()).sum();
        assert!(report.contains(&total.to_string()));
    }
}
