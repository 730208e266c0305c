//! Bounded-order tabular policy with uniform smoothing.
//!
//! Text is segmented into whitespace-separated words plus an optional
//! separator token whose surface form is the step delimiter. Leading
//! whitespace belongs to the following token, so token surfaces concatenate
//! back to the original text.
//!
//! The smoothed conditional is `(1 - λ) p(x | ctx) + λ / |V|` for contexts
//! with a table row. Contexts without a row are out of the table's support
//! and get the uniform distribution; tokens outside the vocabulary receive
//! the smoothing floor of the context.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FinishReason, GenerateRequest, GeneratedStep, PolicyBackend, PolicyError};
use crate::types::TokenScore;

pub type TokenId = u32;

/// Context id for words outside the vocabulary.
pub const UNK: TokenId = TokenId::MAX;

pub const MAX_VOCAB: usize = 64;
pub const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid tabular policy: {0}")]
pub struct TabularError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorSpec {
    pub token: String,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub context: Vec<String>,
    pub next: BTreeMap<String, f64>,
}

/// Serializable description of a tabular policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSpec {
    pub name: String,
    pub vocabulary: Vec<String>,
    pub order: usize,
    pub smoothing_lambda: f64,
    pub terminal_token: String,
    #[serde(default)]
    pub separator: Option<SeparatorSpec>,
    pub rows: Vec<RowSpec>,
}

#[derive(Debug, Clone)]
pub struct TabularPolicy {
    spec: TabularSpec,
    index: HashMap<String, TokenId>,
    terminal: TokenId,
    separator: Option<(TokenId, String)>,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
}

/// One segmented token with its span text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece<'a> {
    pub id: TokenId,
    pub word: &'a str,
    pub surface: &'a str,
}

impl TabularPolicy {
    pub fn from_spec(spec: TabularSpec) -> Result<Self, TabularError> {
        let err = |m: String| Err(TabularError(m));
        let v = spec.vocabulary.len();
        if !(2..=MAX_VOCAB).contains(&v) {
            return err(format!("vocabulary size {v} outside 2..={MAX_VOCAB}"));
        }
        if spec.order == 0 || spec.order > MAX_ORDER {
            return err(format!("order {} outside 1..={MAX_ORDER}", spec.order));
        }
        if !(0.0..1.0).contains(&spec.smoothing_lambda) {
            return err(format!("smoothing lambda {} outside [0, 1)", spec.smoothing_lambda));
        }
        let mut index = HashMap::new();
        for (i, w) in spec.vocabulary.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return err(format!("token {w:?} is empty or contains whitespace"));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return err(format!("duplicate token {w:?}"));
            }
        }
        let id = |w: &str| index.get(w).copied().ok_or_else(|| TabularError(format!("unknown token {w:?}")));
        let terminal = id(&spec.terminal_token)?;
        let separator = match &spec.separator {
            Some(s) if s.surface.is_empty() => return err("separator surface is empty".into()),
            Some(s) => Some((id(&s.token)?, s.surface.clone())),
            None => None,
        };
        let mut rows = HashMap::new();
        for row in &spec.rows {
            if row.context.len() > spec.order {
                return err(format!("row context {:?} longer than order {}", row.context, spec.order));
            }
            let key = row.context.iter().map(|w| id(w)).collect::<Result<Vec<_>, _>>()?;
            let mut probs = vec![0.0; v];
            for (w, &p) in &row.next {
                if !(p >= 0.0 && p.is_finite()) {
                    return err(format!("row {:?}: bad probability {p}", row.context));
                }
                probs[id(w)? as usize] += p;
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return err(format!("row {:?} sums to {total}", row.context));
            }
            if rows.insert(key, probs).is_some() {
                return err(format!("duplicate row {:?}", row.context));
            }
        }
        Ok(Self { spec, index, terminal, separator, rows })
    }

    pub fn from_json(json: &str) -> Result<Self, TabularError> {
        let spec: TabularSpec = serde_json::from_str(json).map_err(|e| TabularError(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn spec(&self) -> &TabularSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocabulary.len()
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn lambda(&self) -> f64 {
        self.spec.smoothing_lambda
    }

    pub fn terminal(&self) -> TokenId {
        self.terminal
    }

    pub fn separator(&self) -> Option<TokenId> {
        self.separator.as_ref().map(|(id, _)| *id)
    }

    pub fn token_id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token_name(&self, id: TokenId) -> &str {
        self.spec.vocabulary.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Ids for a sequence of token names; unknown names map to [`UNK`].
    pub fn ids(&self, words: &[&str]) -> Vec<TokenId> {
        words.iter().map(|w| self.token_id(w).unwrap_or(UNK)).collect()
    }

    fn key<'c>(&self, context: &'c [TokenId]) -> &'c [TokenId] {
        &context[context.len().saturating_sub(self.spec.order)..]
    }

    /// Unsmoothed row for the context window, if the table has one.
    pub fn raw_row(&self, context: &[TokenId]) -> Option<&[f64]> {
        self.rows.get(self.key(context)).map(Vec::as_slice)
    }

    /// Whether the context window has a table row.
    pub fn in_support(&self, context: &[TokenId]) -> bool {
        self.raw_row(context).is_some()
    }

    /// Smoothed next-token distribution over the vocabulary.
    pub fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size() as f64;
        match self.raw_row(context) {
            Some(row) => {
                let lambda = self.spec.smoothing_lambda;
                row.iter().map(|p| (1.0 - lambda) * p + lambda / v).collect()
            }
            None => vec![1.0 / v; self.vocab_size()],
        }
    }

    /// Smoothed probability of `token` after `context`.
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let v = self.vocab_size() as f64;
        match self.raw_row(context) {
            Some(row) => {
                let lambda = self.spec.smoothing_lambda;
                let p = row.get(token as usize).copied().unwrap_or(0.0);
                (1.0 - lambda) * p + lambda / v
            }
            None => 1.0 / v,
        }
    }

    /// Probability of a whole token sequence continuing `start`.
    pub fn sequence_prob(&self, start: &[TokenId], tokens: &[TokenId]) -> f64 {
        let mut ctx = start.to_vec();
        let mut p = 1.0;
        for &t in tokens {
            p *= self.prob(&ctx, t);
            if p == 0.0 {
                return 0.0;
            }
            ctx.push(t);
        }
        p
    }

    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<Piece<'a>> {
        let sep = self.separator.as_ref();
        let mut pieces: Vec<Piece<'a>> = Vec::new();
        let mut pos = 0;
        let mut ws_start: Option<usize> = None;
        while pos < text.len() {
            let rest = &text[pos..];
            if let Some((sid, surface)) = sep {
                if rest.starts_with(surface.as_str()) {
                    let start = ws_start.take().unwrap_or(pos);
                    let end = pos + surface.len();
                    pieces.push(Piece { id: *sid, word: &text[pos..end], surface: &text[start..end] });
                    pos = end;
                    continue;
                }
            }
            let c = rest.chars().next().expect("non-empty");
            if c.is_whitespace() {
                ws_start.get_or_insert(pos);
                pos += c.len_utf8();
                continue;
            }
            let start = pos;
            while pos < text.len() {
                let r = &text[pos..];
                let ch = r.chars().next().expect("non-empty");
                if ch.is_whitespace() || sep.is_some_and(|(_, s)| r.starts_with(s.as_str())) {
                    break;
                }
                pos += ch.len_utf8();
            }
            let word = &text[start..pos];
            let surface = &text[ws_start.take().unwrap_or(start)..pos];
            pieces.push(Piece { id: self.token_id(word).unwrap_or(UNK), word, surface });
        }
        if let (Some(ws), Some(last)) = (ws_start, pieces.last_mut()) {
            // Trailing whitespace rides on the last token so spans cover the text.
            let begin = last.surface.as_ptr() as usize - text.as_ptr() as usize;
            last.surface = &text[begin..];
            debug_assert!(ws >= begin);
        }
        pieces
    }

    pub fn context_ids(&self, text: &str) -> Vec<TokenId> {
        self.tokenize(text).iter().map(|p| p.id).collect()
    }

    /// Surface of `token` when emitted after `out`.
    pub fn render_after(&self, token: TokenId, out: &str) -> String {
        if let Some((sid, surface)) = &self.separator {
            if *sid == token {
                return surface.clone();
            }
        }
        let word = self.token_name(token);
        if out.is_empty() || out.ends_with(char::is_whitespace) {
            word.to_string()
        } else {
            format!(" {word}")
        }
    }

    fn sample(dist: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
        if temperature == 0.0 {
            let mut best = 0;
            for (i, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = i;
                }
            }
            return best as TokenId;
        }
        let logs: Vec<f64> = dist.iter().map(|p| p.ln() / temperature).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i as TokenId;
            }
            u -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0) as TokenId
    }

    /// Samples a continuation of `context` as token ids (no text rendering).
    pub fn sample_ids(&self, context: &[TokenId], len: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let mut ctx = context.to_vec();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let t = Self::sample(&self.next_distribution(&ctx), 1.0, rng);
            out.push(t);
            ctx.push(t);
        }
        out
    }
}

impl PolicyBackend for TabularPolicy {
    fn identity(&self) -> String {
        format!("tabular:{}", self.spec.name)
    }

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GeneratedStep, PolicyError> {
        let mut ctx = self.context_ids(req.context);
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let mut out = String::new();
        let mut tokens: Vec<TokenScore> = Vec::new();
        let mut generated = 0;
        let mut finish = FinishReason::Length;
        while generated < req.max_tokens {
            let dist = self.next_distribution(&ctx);
            let tok = Self::sample(&dist, req.temperature, &mut rng);
            let lp = dist[tok as usize].ln();
            generated += 1;
            if tok == self.terminal {
                finish = FinishReason::Terminal;
                break;
            }
            let surface = self.render_after(tok, &out);
            let checked_from = out.len().saturating_sub(req.stop.map_or(0, str::len));
            out.push_str(&surface);
            tokens.push(TokenScore::new(surface, lp));
            ctx.push(tok);
            if let Some(stop) = req.stop {
                if let Some(rel) = out[checked_from..].find(stop) {
                    let pos = checked_from + rel;
                    out.truncate(pos);
                    let mut end: usize = tokens.iter().map(|t| t.token.len()).sum();
                    while end > pos {
                        end -= tokens.pop().expect("token covers text").token.len();
                    }
                    finish = FinishReason::Stop;
                    break;
                }
            }
        }
        Ok(GeneratedStep { text: out, tokens, finish, generated_tokens: generated })
    }

    fn score(&self, context: &str, text: &str) -> Result<Vec<TokenScore>, PolicyError> {
        let mut ctx = self.context_ids(context);
        let pieces = self.tokenize(text);
        if pieces.is_empty() {
            return Err(PolicyError::InvalidInput("text has no tokens".into()));
        }
        Ok(pieces
            .iter()
            .map(|p| {
                let lp = self.prob(&ctx, p.id).ln();
                ctx.push(p.id);
                TokenScore::new(p.surface, lp)
            })
            .collect())
    }

    fn top_k(&self, context: &str, k: usize) -> Result<Vec<(String, f64)>, PolicyError> {
        let dist = self.next_distribution(&self.context_ids(context));
        let mut pairs: Vec<(String, f64)> = dist
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (self.spec.vocabulary[i].clone(), p.ln()))
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
        pairs.truncate(k);
        Ok(pairs)
    }
}

/// Small builder used by fixtures and tests.
#[derive(Debug, Clone)]
pub struct TabularBuilder {
    spec: TabularSpec,
}

impl TabularBuilder {
    pub fn new(name: &str, vocabulary: &[&str], order: usize, terminal: &str) -> Self {
        Self {
            spec: TabularSpec {
                name: name.into(),
                vocabulary: vocabulary.iter().map(|s| s.to_string()).collect(),
                order,
                smoothing_lambda: 0.0,
                terminal_token: terminal.into(),
                separator: None,
                rows: Vec::new(),
            },
        }
    }

    pub fn lambda(mut self, lambda: f64) -> Self {
        self.spec.smoothing_lambda = lambda;
        self
    }

    pub fn separator(mut self, token: &str, surface: &str) -> Self {
        self.spec.separator = Some(SeparatorSpec { token: token.into(), surface: surface.into() });
        self
    }

    pub fn row(mut self, context: &[&str], next: &[(&str, f64)]) -> Self {
        let mut map = BTreeMap::new();
        for (w, p) in next {
            *map.entry(w.to_string()).or_insert(0.0) += p;
        }
        self.spec.rows.push(RowSpec { context: context.iter().map(|s| s.to_string()).collect(), next: map });
        self
    }

    pub fn build(self) -> Result<TabularPolicy, TabularError> {
        TabularPolicy::from_spec(self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{generate_step, score_tokens, top_k_next};

    fn chain() -> TabularPolicy {
        TabularBuilder::new("chain", &["a", "b", "c", "STOP", "<eos>"], 1, "<eos>")
            .separator("STOP", ".\n\n")
            .row(&["a"], &[("b", 1.0)])
            .row(&["b"], &[("c", 1.0)])
            .row(&["c"], &[("STOP", 1.0)])
            .build()
            .unwrap()
    }

    fn req<'a>(ctx: &'a str, stop: Option<&'a str>, max: usize) -> GenerateRequest<'a> {
        GenerateRequest { context: ctx, stop, max_tokens: max, temperature: 0.0, seed: 7 }
    }

    #[test]
    fn argmax_chain_stops_at_delimiter() {
        let p = chain();
        let g = generate_step(&p, &req("a", Some(".\n\n"), 16)).unwrap();
        assert_eq!(g.text, "b c");
        assert_eq!(g.finish, FinishReason::Stop);
        assert_eq!(g.generated_tokens, 3);
        assert_eq!(g.tokens.len(), 2);
    }

    #[test]
    fn cap_forces_length() {
        let p = chain();
        let g = generate_step(&p, &req("a", Some(".\n\n"), 1)).unwrap();
        assert_eq!(g.text, "b");
        assert_eq!(g.finish, FinishReason::Length);
    }

    #[test]
    fn scores_match_generation_logprobs() {
        let p = TabularBuilder::new("mix", &["a", "b", "c", "<eos>"], 2, "<eos>")
            .lambda(0.1)
            .row(&["a"], &[("b", 0.6), ("c", 0.4)])
            .row(&["a", "b"], &[("c", 0.5), ("<eos>", 0.5)])
            .row(&["b", "c"], &[("a", 1.0)])
            .build()
            .unwrap();
        for seed in 0..20 {
            let g = generate_step(
                &p,
                &GenerateRequest { context: "a", stop: None, max_tokens: 6, temperature: 1.0, seed },
            )
            .unwrap();
            if g.text.is_empty() {
                continue;
            }
            let s = score_tokens(&p, "a", &g.text).unwrap();
            assert_eq!(s.len(), g.tokens.len());
            for (x, y) in s.iter().zip(&g.tokens) {
                assert!((x.logprob - y.logprob).abs() < 1e-6);
                assert_eq!(x.token, y.token);
            }
        }
    }

    #[test]
    fn direct_lookup_score() {
        let p = TabularBuilder::new("half", &["a", "b", "c", "<eos>"], 1, "<eos>")
            .row(&["a"], &[("b", 0.5), ("c", 0.5)])
            .build()
            .unwrap();
        let s = score_tokens(&p, "a", "b").unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].logprob - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_vocabulary_gets_smoothing_floor() {
        let lambda = 0.01;
        let p = TabularBuilder::new("s", &["a", "b", "c", "<eos>"], 1, "<eos>")
            .lambda(lambda)
            .row(&["a"], &[("b", 1.0)])
            .build()
            .unwrap();
        let s = score_tokens(&p, "a", "zebra").unwrap();
        assert!((s[0].logprob - (lambda / 4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(score_tokens(&chain(), "a", "").is_err());
    }

    #[test]
    fn top_k_uniform_and_truncated() {
        let u = TabularBuilder::new("u", &["w", "x", "y", "z"], 1, "z")
            .row(&[], &[("w", 0.25), ("x", 0.25), ("y", 0.25), ("z", 0.25)])
            .build()
            .unwrap();
        let d = top_k_next(&u, "", 20).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|(_, l)| (l - 0.25f64.ln()).abs() < 1e-15));

        let p = TabularBuilder::new("p", &["t1", "t2", "t3", "e"], 1, "e")
            .row(&["t1"], &[("t1", 0.7), ("t2", 0.2), ("t3", 0.1)])
            .build()
            .unwrap();
        let d = top_k_next(&p, "t1", 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].0, "t1");
        assert!((d[0].1 - 0.7f64.ln()).abs() < 1e-15);
        assert_eq!(d[1].0, "t2");
        assert!((d[1].1 - 0.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tokenizer_spans_cover_text() {
        let p = chain();
        let text = "Q\n a  b.\n\nc .\n\n zz  ";
        let pieces = p.tokenize(text);
        let joined: String = pieces.iter().map(|x| x.surface).collect();
        assert_eq!(joined, text);
        let words: Vec<&str> = pieces.iter().map(|x| x.word).collect();
        assert_eq!(words, vec!["Q", "a", "b", ".\n\n", "c", ".\n\n", "zz"]);
        assert_eq!(pieces[0].id, UNK);
        assert_eq!(pieces[3].id, p.token_id("STOP").unwrap());
    }

    #[test]
    fn distributions_sum_to_one() {
        let p = TabularBuilder::new("m", &["a", "b", "c", "<eos>"], 2, "<eos>")
            .lambda(0.3)
            .row(&["a", "b"], &[("c", 0.9), ("a", 0.1)])
            .build()
            .unwrap();
        for ctx in [vec![], vec![0, 1], vec![2, 2], vec![UNK]] {
            let s: f64 = p.next_distribution(&ctx).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.next_distribution(&ctx).iter().all(|&q| q >= 0.3 / 4.0 - 1e-15));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(TabularBuilder::new("x", &["a"], 1, "a").build().is_err());
        assert!(TabularBuilder::new("x", &["a", "b"], 4, "a").build().is_err());
        assert!(TabularBuilder::new("x", &["a", "a"], 1, "a").build().is_err());
        assert!(TabularBuilder::new("x", &["a", "b"], 1, "c").build().is_err());
        assert!(TabularBuilder::new("x", &["a", "b"], 1, "a").row(&["a"], &[("b", 0.5)]).build().is_err());
        assert!(TabularBuilder::new("x", &["a", "b"], 1, "a").lambda(1.0).build().is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = chain();
        let json = serde_json::to_string(p.spec()).unwrap();
        let q = TabularPolicy::from_json(&json).unwrap();
        assert_eq!(q.spec(), p.spec());
    }
}
