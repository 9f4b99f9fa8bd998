//! Text side of the network: a whitespace tokenizer over a corpus-built
//! vocabulary and a compact causal transformer that mean-pools its hidden
//! states into a single report embedding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttnMask, Bound, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Ordered token list with reserved PAD (0) and UNK (1) entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from whitespace-split, lowercased corpus
    /// tokens, ordered by descending frequency with lexicographic
    /// tie-breaks. Deterministic for identical corpora.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for report in corpus {
            for token in report.as_ref().split_whitespace() {
                *counts.entry(token.to_lowercase()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ordered: Vec<(String, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ordered.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Maps a report to ids, truncated/padded to `max_len`. Total by design:
    /// an empty report becomes a single UNK token.
    pub fn tokenize(&self, report: &str, max_len: usize) -> TokenSequence {
        debug_assert!(max_len >= 1);
        let mut ids: Vec<usize> = report
            .split_whitespace()
            .take(max_len)
            .map(|t| self.id(&t.to_lowercase()))
            .collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        let len = ids.len();
        ids.resize(max_len, PAD_ID);
        TokenSequence { ids, len }
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let body =
            fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::format(format!(
                "vocabulary file {} lacks the reserved PAD/UNK entries",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::format("token list lacks the reserved PAD/UNK entries".to_string()));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Fixed-width id buffer with the true (unpadded) length.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub len: usize,
}

/// Causal transformer over token embeddings; the report embedding is the
/// mean of the final hidden states over non-PAD positions.
pub struct ReportEncoder {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub max_len: usize,
    pub dim: usize,
}

impl ReportEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Result<ReportEncoder> {
        if cfg.vocab_size < 2 {
            return Err(Error::config(format!(
                "vocab_size {} too small (needs PAD and UNK)",
                cfg.vocab_size
            )));
        }
        let trainable = !cfg.freeze_text;
        let token_emb = store.add_uniform(
            "report.token_emb",
            vec![cfg.vocab_size, cfg.d_text],
            cfg.d_text,
            trainable,
            rng,
        );
        let pos_emb = store.add_uniform(
            "report.pos_emb",
            vec![cfg.max_len, cfg.d_text],
            cfg.d_text,
            trainable,
            rng,
        );
        let blocks = (0..cfg.text_depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    rng,
                    &format!("report.block{i}"),
                    cfg.d_text,
                    cfg.heads,
                    trainable,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReportEncoder { token_emb, pos_emb, blocks, max_len: cfg.max_len, dim: cfg.d_text })
    }

    /// Encodes the first `seq.len` positions only; PAD positions beyond the
    /// true length never enter the computation, and the causal mask keeps
    /// position p from seeing positions after it. Output [1, d_t].
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seq: &TokenSequence,
    ) -> Result<TensorId> {
        if seq.len == 0 || seq.len > self.max_len || seq.ids.len() != self.max_len {
            return Err(Error::shape(
                "encode_report",
                format!("sequence length {} with buffer {} (max_len {})", seq.len, seq.ids.len(), self.max_len),
            ));
        }
        let active = &seq.ids[..seq.len];
        let tok = tape.embed_rows(bound.id(self.token_emb), active)?;
        let positions: Vec<usize> = (0..seq.len).collect();
        let pos = tape.embed_rows(bound.id(self.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, bound, x, &AttnMask::Causal)?;
        }
        tape.mean_rows(x, seq.len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let vocab = Vocabulary::build(&["a b", "b c"]).unwrap();
        assert_eq!(vocab.tokens(), &["<pad>", "<unk>", "b", "a", "c"]);
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        assert!(matches!(Vocabulary::build(&[""]), Err(Error::EmptyCorpus)));
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocab_deterministic() {
        let a = Vocabulary::build(&["x y z", "z y"]).unwrap();
        let b = Vocabulary::build(&["x y z", "z y"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tokenize_known_unknown_empty() {
        let vocab = Vocabulary::build(&["a b", "b c"]).unwrap();
        let seq = vocab.tokenize("b b", 4);
        assert_eq!(seq.ids, vec![2, 2, 0, 0]);
        assert_eq!(seq.len, 2);

        let unk = vocab.tokenize("zzz", 4);
        assert_eq!(unk.ids[0], UNK_ID);

        let empty = vocab.tokenize("", 4);
        assert_eq!(empty.ids, vec![1, 0, 0, 0]);
        assert_eq!(empty.len, 1);

        let truncated = vocab.tokenize("a b c a b", 3);
        assert_eq!(truncated.len, 3);
        assert_eq!(truncated.ids.len(), 3);
    }

    fn text_cfg() -> ModelConfig {
        ModelConfig {
            d_text: 8,
            text_depth: 1,
            heads: 2,
            max_len: 4,
            vocab_size: 6,
            ..ModelConfig::default()
        }
    }

    fn build_encoder(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, ReportEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ReportEncoder::new(&mut store, &mut rng, cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn pad_positions_do_not_affect_embedding() {
        let cfg = text_cfg();
        let (store, enc) = build_encoder(&cfg, 21);
        let run = |ids: Vec<usize>, len: usize| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false).unwrap();
            let out = enc.encode(&mut tape, &bound, &TokenSequence { ids, len }).unwrap();
            tape.data(out).to_vec()
        };
        // Same first two tokens, different garbage in the padded tail.
        let a = run(vec![2, 3, 0, 0], 2);
        let b = run(vec![2, 3, 5, 4], 2);
        assert_eq!(a, b);
    }

    #[test]
    fn single_token_pooling_is_identity() {
        let cfg = text_cfg();
        let (store, enc) = build_encoder(&cfg, 22);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false).unwrap();
        let seq = TokenSequence { ids: vec![3, 0, 0, 0], len: 1 };

        // Recompute the single position by hand: with one token the mean
        // pool must equal that position's hidden state, i.e. the block
        // output at row 0.
        let out = enc.encode(&mut tape, &bound, &seq).unwrap();
        let tok = tape.embed_rows(bound.id(enc.token_emb), &[3]).unwrap();
        let pos = tape.embed_rows(bound.id(enc.pos_emb), &[0]).unwrap();
        let mut x = tape.add(tok, pos).unwrap();
        for block in &enc.blocks {
            x = block.forward(&mut tape, &bound, x, &AttnMask::Causal).unwrap();
        }
        assert_eq!(tape.data(out), tape.data(x));
    }

    #[test]
    fn causal_mask_hidden_state_prefix_property() {
        // Perturbing the token at position p+1 must not change the hidden
        // state (and hence the pooled mean over the prefix) at positions <= p.
        let cfg = text_cfg();
        let (store, enc) = build_encoder(&cfg, 23);
        let prefix_mean = |ids: Vec<usize>, pool_len: usize| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false).unwrap();
            let tok = tape.embed_rows(bound.id(enc.token_emb), &ids).unwrap();
            let positions: Vec<usize> = (0..ids.len()).collect();
            let pos = tape.embed_rows(bound.id(enc.pos_emb), &positions).unwrap();
            let mut x = tape.add(tok, pos).unwrap();
            for block in &enc.blocks {
                x = block.forward(&mut tape, &bound, x, &AttnMask::Causal).unwrap();
            }
            let pooled = tape.mean_rows(x, pool_len).unwrap();
            tape.data(pooled).to_vec()
        };
        let a = prefix_mean(vec![2, 3, 4], 2);
        let b = prefix_mean(vec![2, 3, 5], 2);
        assert_eq!(a, b);
    }

    #[test]
    fn report_encoder_gradcheck() {
        let cfg = text_cfg();
        let (mut store, enc) = build_encoder(&cfg, 24);
        let seq = TokenSequence { ids: vec![2, 4, 3, 0], len: 3 };

        let run_loss = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false).unwrap();
            let t = enc.encode(&mut tape, &bound, &seq).unwrap();
            let loss = tape.sum(t).unwrap();
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false).unwrap();
        let t = enc.encode(&mut tape, &bound, &seq).unwrap();
        let loss = tape.sum(t).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(bound.id(enc.token_emb)).unwrap().to_vec();

        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..analytic.len() {
            let orig = store.entry(enc.token_emb).data[i];
            store.data_mut(enc.token_emb)[i] = orig + h;
            let fp = run_loss(&store);
            store.data_mut(enc.token_emb)[i] = orig - h;
            let fm = run_loss(&store);
            store.data_mut(enc.token_emb)[i] = orig;
            worst = worst.max(crate::tensor::rel_err(analytic[i], (fp - fm) / (2.0 * h)));
        }
        assert!(worst <= 1e-5, "worst rel err {worst}");
    }
}
