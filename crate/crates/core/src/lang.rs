//! Instruction encoding: tokenizer, vocabulary, and the two bidirectional
//! LSTM encoders that map a token sequence to the block distribution `d_a`
//! and the operation distribution `d_op`.
//!
//! The argument encoder and the operation encoder share the vocabulary
//! embedding matrix and nothing else, so gradients meeting at the
//! embedding are the only channel between the two heads. Each sentence
//! representation is the concatenation of the final forward and final
//! backward hidden states, giving `h_a, h_o ∈ R^{2·hidden}`; distributions
//! are affine projections of those followed by a softmax.

use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;
use std::collections::BTreeMap;

// ── Tokenizer ───────────────────────────────────────────────────────────

/// Clitics split off word ends, longest first ("n't" before "'t").
const CLITICS: [&str; 6] = ["n't", "'re", "'ve", "'ll", "'s", "'m"];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Split one lowercase word-run into stem + trailing clitic chains.
fn split_clitics(word: &str, out: &mut Vec<String>) {
    for clitic in CLITICS {
        if let Some(stem) = word.strip_suffix(clitic) {
            if !stem.is_empty() && stem.chars().any(|c| c != '\'') {
                split_clitics(stem, out);
                out.push(clitic.to_string());
                return;
            }
        }
    }
    // "'d" needs care: strip only when a stem remains ("he'd" → he + 'd).
    if let Some(stem) = word.strip_suffix("'d") {
        if !stem.is_empty() {
            split_clitics(stem, out);
            out.push("'d".to_string());
            return;
        }
    }
    out.push(word.to_string());
}

/// Lowercase, split on whitespace, break punctuation into standalone
/// tokens, and split treebank-style contractions ("don't" → do + n't).
/// Empty input yields an empty sequence; encoding rejects that later.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for raw in text.to_lowercase().split_whitespace() {
        let mut word = String::new();
        for c in raw.chars() {
            if is_word_char(c) {
                word.push(c);
            } else {
                if !word.is_empty() {
                    split_clitics(&word, &mut tokens);
                    word.clear();
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            split_clitics(&word, &mut tokens);
        }
    }
    tokens
}

// ── Vocabulary ──────────────────────────────────────────────────────────

/// Reserved index for out-of-vocabulary tokens.
pub const UNK: usize = 0;
/// Reserved index for padding (kept for fixed-width tooling; the encoders
/// themselves run ragged sequences and never consume it).
pub const PAD: usize = 1;

/// Token → dense index map with stable reserved slots: 0 = unknown,
/// 1 = padding, then corpus tokens in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Build from any iterator of tokens; duplicates collapse and ordering
    /// of the input does not matter.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = corpus
            .into_iter()
            .map(|t| t.to_string())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        uniq.sort();
        let mut tokens = vec!["<unk>".to_string(), "<pad>".to_string()];
        tokens.extend(uniq);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { index, tokens }
    }

    /// Rebuild from the exact token list stored in a checkpoint.
    pub fn from_token_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a token, or the unknown index for out-of-vocabulary input.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens in index order, for serialization.
    pub fn token_list(&self) -> &[String] {
        &self.tokens
    }
}

// ── Encoder graphs ──────────────────────────────────────────────────────

/// Tape handles for one LSTM direction, gates fused as `[i; f; g; o]`:
/// `w_x: [4·hidden, d_in]`, `w_h: [4·hidden, hidden]`, `b: [4·hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

/// Forward and backward directions of one bidirectional encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
}

/// All language-side parameters as tape handles for one batch graph.
#[derive(Debug, Clone, Copy)]
pub struct LangVars {
    /// Shared embedding matrix `[V, d_e]` — the only parameter both
    /// encoders touch.
    pub embed: Var,
    pub arg: EncoderVars,
    pub op: EncoderVars,
    /// Projections to block logits (`w_a: [K, 2·hidden]`, `b_a: [K]`) and
    /// operation logits (`w_o: [N_op, 2·hidden]`, `b_o: [N_op]`).
    pub w_a: Var,
    pub b_a: Var,
    pub w_o: Var,
    pub b_o: Var,
}

/// Everything the rest of the model needs from one encoded sentence.
#[derive(Debug, Clone, Copy)]
pub struct LangOut {
    pub h_a: Var,
    pub h_o: Var,
    pub arg_logits: Var,
    pub op_logits: Var,
    pub d_a: Var,
    pub d_op: Var,
}

/// Run one LSTM direction over embedded tokens and return the final
/// hidden state `[hidden]`.
fn lstm_final<R: Real>(
    tape: &mut Tape<R>,
    cell: &LstmVars,
    inputs: &[Var],
    hidden: usize,
) -> Result<Var, TensorError> {
    let mut h = tape.constant(crate::tensor::Tensor::zeros(&[hidden]));
    let mut c = tape.constant(crate::tensor::Tensor::zeros(&[hidden]));
    for &x in inputs {
        let zx = tape.matmul(cell.w_x, x)?;
        let zh = tape.matmul(cell.w_h, h)?;
        let za = tape.add(zx, zh)?;
        let z = tape.add(za, cell.b)?;
        let i = {
            let s = tape.slice(z, 0, hidden)?;
            tape.sigmoid(s)
        };
        let f = {
            let s = tape.slice(z, hidden, hidden)?;
            tape.sigmoid(s)
        };
        let g = {
            let s = tape.slice(z, 2 * hidden, hidden)?;
            tape.tanh(s)
        };
        let o = {
            let s = tape.slice(z, 3 * hidden, hidden)?;
            tape.sigmoid(s)
        };
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
    }
    Ok(h)
}

/// Bidirectional pass: concatenated final forward and final backward
/// hidden states, `[2·hidden]`.
fn encode_bidi<R: Real>(
    tape: &mut Tape<R>,
    enc: &EncoderVars,
    embeds: &[Var],
    hidden: usize,
) -> Result<Var, TensorError> {
    let fwd = lstm_final(tape, &enc.fwd, embeds, hidden)?;
    let reversed: Vec<Var> = embeds.iter().rev().copied().collect();
    let bwd = lstm_final(tape, &enc.bwd, &reversed, hidden)?;
    tape.concat(&[fwd, bwd])
}

/// Encode one token-id sequence into sentence vectors and distributions.
/// Both encoders read the same embedded tokens; everything after the
/// embedding lookup is per-encoder.
pub fn encode_sentence<R: Real>(
    tape: &mut Tape<R>,
    vars: &LangVars,
    ids: &[usize],
    hidden: usize,
) -> Result<LangOut, TensorError> {
    if ids.is_empty() {
        return Err(TensorError::Empty { op: "encode" });
    }
    let table = tape.embed_rows(vars.embed, ids)?;
    let d_e = tape.value(table).shape()[1];
    let embeds: Vec<Var> = (0..ids.len())
        .map(|t| tape.slice(table, t * d_e, d_e))
        .collect::<Result<_, _>>()?;

    let h_a = encode_bidi(tape, &vars.arg, &embeds, hidden)?;
    let h_o = encode_bidi(tape, &vars.op, &embeds, hidden)?;

    let wa_h = tape.matmul(vars.w_a, h_a)?;
    let arg_logits = tape.add(wa_h, vars.b_a)?;
    let d_a = tape.softmax(arg_logits, 0)?;

    let wo_h = tape.matmul(vars.w_o, h_o)?;
    let op_logits = tape.add(wo_h, vars.b_o)?;
    let d_op = tape.softmax(op_logits, 0)?;

    Ok(LangOut {
        h_a,
        h_o,
        arg_logits,
        op_logits,
        d_a,
        d_op,
    })
}
