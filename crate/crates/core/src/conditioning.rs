//! Caption vocabulary, tokenizer and the text encoder that produces token
//! sequences for cross-attention, pooled caption features and category
//! features.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

pub const NULL_TOKEN: &str = "<null>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NULL_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Words of the caption template, in vocabulary order after NULL and UNK.
pub const GRAMMAR_WORDS: [&str; 8] = ["a", "patch", "with", "few", "many", "small", "large", "nuclei"];

pub const DEFAULT_TEXT_WIDTH: usize = 64;
pub const DEFAULT_MAX_TOKENS: usize = 24;
pub const DEFAULT_CAPTION_DROPOUT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// NULL, UNK, the template words, then the category names.
    pub fn for_categories<S: AsRef<str>>(categories: &[S]) -> Result<Self> {
        let mut tokens = vec![NULL_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(GRAMMAR_WORDS.iter().map(|w| w.to_string()));
        for c in categories {
            let c = c.as_ref();
            if c.is_empty() || c.chars().any(|ch| !ch.is_ascii_alphanumeric() || ch.is_ascii_uppercase()) {
                return Err(Error::InvalidArgument(format!("category name {c:?} is not a lowercase word")));
            }
            tokens.push(c.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(NULL_TOKEN) {
            return Err(Error::Format("vocabulary must start with the NULL token".into()));
        }
        if tokens.get(1).map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Format("vocabulary must have UNK at index 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid token {t:?}")));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Format(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens })
    }

    /// One token per line, line order equals id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }
}

/// Lowercased alphanumeric words, split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Vocabulary ids of the first `max_len` words, padded with NULL.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = words(caption)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect();
    ids.resize(max_len, NULL_ID);
    ids
}

/// A batch of fixed-length token rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    len: usize,
    ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        let len = rows.first().map(Vec::len).ok_or_else(|| shape_err("token batch must be non-empty"))?;
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(shape_err("token rows must share a positive length"));
        }
        Ok(Self { len, ids: rows.concat() })
    }

    pub fn from_captions<S: AsRef<str>>(captions: &[S], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Self::new(captions.iter().map(|c| tokenize(c.as_ref(), vocab, max_len)).collect())
    }

    pub fn nulls(batch: usize, len: usize) -> Result<Self> {
        Self::new(vec![vec![NULL_ID; len]; batch])
    }

    pub fn batch(&self) -> usize {
        self.ids.len() / self.len
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != NULL_ID).collect()
    }
}

/// Replaces each row by the all-NULL sequence with probability `p`. Returns
/// the new batch and which rows were dropped. One uniform draw per row.
pub fn apply_caption_dropout<R: Rng + ?Sized>(
    tokens: &TokenBatch,
    p: f64,
    rng: &mut R,
) -> Result<(TokenBatch, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Range(format!("dropout probability {p} outside [0, 1]")));
    }
    let mut out = tokens.clone();
    let mut dropped = Vec::with_capacity(tokens.batch());
    for i in 0..tokens.batch() {
        let d = rng.gen::<f64>() < p;
        if d {
            out.ids[i * out.len..(i + 1) * out.len].fill(NULL_ID);
        }
        dropped.push(d);
    }
    Ok((out, dropped))
}

/// Encoded conditioning for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBatch<T = f32> {
    tokens: TokenBatch,
    sequence: Tensor<T>,
    pooled: Tensor<T>,
    category_ids: Option<Vec<usize>>,
    category_features: Option<Tensor<T>>,
}

impl<T: Real> ConditioningBatch<T> {
    /// `sequence: [B, L, d]`, `pooled: [B, d]`.
    pub fn new(tokens: TokenBatch, sequence: Tensor<T>, pooled: Tensor<T>) -> Result<Self> {
        let (b, l) = (tokens.batch(), tokens.seq_len());
        let s = sequence.shape();
        if s.len() != 3 || s[0] != b || s[1] != l {
            return Err(shape_err(format!("sequence shape {s:?} does not match tokens [{b}, {l}]")));
        }
        if pooled.shape() != [b, s[2]] {
            return Err(shape_err(format!("pooled shape {:?}, expected [{b}, {}]", pooled.shape(), s[2])));
        }
        for row in pooled.data().chunks(s[2]) {
            let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            if !(n.sqrt() > crate::alignment::MIN_ROW_NORM) {
                return Err(Error::Degenerate("pooled text row has zero norm".into()));
            }
        }
        Ok(Self { tokens, sequence, pooled, category_ids: None, category_features: None })
    }

    /// Attaches category labels and their `[B, d]` features.
    pub fn with_categories(mut self, ids: Vec<usize>, features: Tensor<T>) -> Result<Self> {
        if ids.len() != self.len() || features.shape() != self.pooled.shape() {
            return Err(shape_err("category ids/features do not match the batch"));
        }
        self.category_ids = Some(ids);
        self.category_features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.pooled.shape()[1]
    }

    pub fn tokens(&self) -> &TokenBatch {
        &self.tokens
    }

    pub fn sequence(&self) -> &Tensor<T> {
        &self.sequence
    }

    pub fn pooled(&self) -> &Tensor<T> {
        &self.pooled
    }

    pub fn category_ids(&self) -> Option<&[usize]> {
        self.category_ids.as_deref()
    }

    pub fn category_features(&self) -> Option<&Tensor<T>> {
        self.category_features.as_ref()
    }
}

/// Text encoder dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub max_tokens: usize,
}

impl TextConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, width: DEFAULT_TEXT_WIDTH, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

const POSITION_STD: f64 = 0.1;

/// Adds `text.*` parameters: token and position tables, one self-attention
/// layer with a residual output projection.
pub fn init_text_params<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &TextConfig,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.width;
    let proj = 1.0 / (d as f64).sqrt();
    store.insert("text.token", Tensor::randn(&[cfg.vocab_size, d], 1.0, rng))?;
    store.insert("text.pos", Tensor::randn(&[cfg.max_tokens, d], POSITION_STD, rng))?;
    for name in ["text.wq", "text.wk", "text.wv", "text.wo"] {
        store.insert(name, Tensor::randn(&[d, d], proj, rng))?;
    }
    store.insert("text.bo", Tensor::zeros(&[d]))?;
    Ok(())
}

/// Graph nodes for one encoded batch.
pub struct TextNodes {
    /// `[B, L, d]`
    pub sequence: Var,
    /// `[B, d]`
    pub pooled: Var,
}

/// Encodes `tokens` inside `g`. Pooled features are the mean over non-NULL
/// positions; an all-NULL row pools to the NULL token embedding.
pub fn text_forward<T: Real>(g: &mut Graph<'_, T>, cfg: &TextConfig, tokens: &TokenBatch) -> Result<TextNodes> {
    let (b, l, d) = (tokens.batch(), tokens.seq_len(), cfg.width);
    if l != cfg.max_tokens {
        return Err(shape_err(format!("token rows have length {l}, encoder expects {}", cfg.max_tokens)));
    }
    if let Some(&bad) = tokens.ids().iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Range(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let table = g.param_named("text.token")?;
    let pos = g.param_named("text.pos")?;
    let rows = g.gather_rows(table, tokens.ids());
    let rows = g.reshape(rows, &[b, l, d]);
    let h0 = g.add_broadcast(rows, pos);
    let wq = g.param_named("text.wq")?;
    let wk = g.param_named("text.wk")?;
    let wv = g.param_named("text.wv")?;
    let wo = g.param_named("text.wo")?;
    let bo = g.param_named("text.bo")?;
    let q = g.linear(h0, wq, None);
    let k = g.linear(h0, wk, None);
    let v = g.linear(h0, wv, None);
    let a = g.attention(q, k, v);
    let o = g.linear(a, wo, Some(bo));
    let sequence = g.add(h0, o);
    let null_row = g.gather_rows(table, &[NULL_ID]);
    let null_row = g.reshape(null_row, &[d]);
    let pooled = g.masked_mean_or(sequence, &tokens.mask(), null_row);
    Ok(TextNodes { sequence, pooled })
}

/// Non-differentiable encoding of a token batch.
pub fn encode_text<T: Real>(
    params: &ParamStore<T>,
    cfg: &TextConfig,
    tokens: &TokenBatch,
) -> Result<ConditioningBatch<T>> {
    let mut g = Graph::new(params);
    let nodes = text_forward(&mut g, cfg, tokens)?;
    ConditioningBatch::new(tokens.clone(), g.value(nodes.sequence).clone(), g.value(nodes.pooled).clone())
}

/// Pooled encodings of each category name, `[K, d]` row-major.
pub fn encode_categories<T: Real>(
    params: &ParamStore<T>,
    cfg: &TextConfig,
    vocab: &Vocabulary,
    names: &[String],
) -> Result<Tensor<T>> {
    let tokens = TokenBatch::from_captions(names, vocab, cfg.max_tokens)?;
    Ok(encode_text(params, cfg, &tokens)?.pooled().clone())
}

/// Category feature table computed once and looked up by label.
#[derive(Clone, Debug)]
pub struct CategoryFeatures<T> {
    width: usize,
    table: Tensor<T>,
}

impl<T: Real> CategoryFeatures<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TextConfig, vocab: &Vocabulary, names: &[String]) -> Result<Self> {
        Ok(Self { width: cfg.width, table: encode_categories(params, cfg, vocab, names)? })
    }

    pub fn count(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn get(&self, label: usize) -> Result<&[T]> {
        if label >= self.count() {
            return Err(Error::Range(format!("unknown category {label}")));
        }
        Ok(&self.table.data()[label * self.width..(label + 1) * self.width])
    }
}

/// Category name token rows for a batch of labels.
pub fn category_tokens(labels: &[usize], names: &[String], vocab: &Vocabulary, max_len: usize) -> Result<TokenBatch> {
    let rows = labels
        .iter()
        .map(|&k| {
            names
                .get(k)
                .map(|n| tokenize(n, vocab, max_len))
                .ok_or_else(|| Error::Range(format!("unknown category {k}")))
        })
        .collect::<Result<Vec<_>>>()?;
    TokenBatch::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::cosine_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names() -> Vec<String> {
        ["carcinoma", "sarcoma", "lymphoma", "melanoma"].iter().map(|s| s.to_string()).collect()
    }

    fn setup<T: Real>(seed: u64) -> (Vocabulary, TextConfig, ParamStore<T>) {
        let vocab = Vocabulary::for_categories(&names()).unwrap();
        let cfg = TextConfig { vocab_size: vocab.len(), width: 16, max_tokens: 12 };
        let mut store = ParamStore::new();
        init_text_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (vocab, cfg, store)
    }

    #[test]
    fn vocabulary_layout_and_text_round_trip() {
        let v = Vocabulary::for_categories(&names()).unwrap();
        assert_eq!(v.tokens()[NULL_ID], NULL_TOKEN);
        assert_eq!(v.tokens()[UNK_ID], UNK_TOKEN);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::for_categories(&["patch"]).is_err());
        assert!(Vocabulary::for_categories(&["Bad"]).is_err());
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::for_categories(&names()).unwrap();
        assert_eq!(tokenize("", &v, 5), vec![NULL_ID; 5]);
        let ids = tokenize("many large nuclei", &v, 5);
        assert_eq!(
            ids,
            vec![v.id("many").unwrap(), v.id("large").unwrap(), v.id("nuclei").unwrap(), NULL_ID, NULL_ID]
        );
        let long = "a patch with few small nuclei a patch";
        let ids = tokenize(long, &v, 4);
        assert_eq!(ids, vec![v.id("a").unwrap(), v.id("patch").unwrap(), v.id("with").unwrap(), v.id("few").unwrap()]);
        assert_eq!(tokenize("MANY, Large!! zebra", &v, 3), vec![v.id("many").unwrap(), v.id("large").unwrap(), UNK_ID]);
    }

    #[test]
    fn all_null_row_pools_to_null_embedding() {
        let (_, cfg, store) = setup::<f64>(1);
        let tokens = TokenBatch::nulls(2, cfg.max_tokens).unwrap();
        let enc = encode_text(&store, &cfg, &tokens).unwrap();
        let null_row = &store.by_name("text.token").unwrap().data()[..cfg.width];
        assert_eq!(&enc.pooled().data()[..cfg.width], null_row);
        assert_eq!(&enc.pooled().data()[cfg.width..], null_row);
    }

    #[test]
    fn identical_rows_encode_identically() {
        let (vocab, cfg, store) = setup::<f64>(2);
        let caps = ["a sarcoma patch with many small nuclei"; 3];
        let tokens = TokenBatch::from_captions(&caps, &vocab, cfg.max_tokens).unwrap();
        let enc = encode_text(&store, &cfg, &tokens).unwrap();
        let d = cfg.width;
        let p = enc.pooled().data();
        assert_eq!(&p[..d], &p[d..2 * d]);
        let m = cosine_matrix(p, 3, d).unwrap();
        assert!(m.values().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn token_order_matters_only_through_positions() {
        let (vocab, cfg, mut store) = setup::<f64>(3);
        let a = "a carcinoma patch with few large nuclei";
        let b = "a patch carcinoma with few large nuclei";
        let tokens = TokenBatch::from_captions(&[a, b], &vocab, cfg.max_tokens).unwrap();
        let d = cfg.width;
        let enc = encode_text(&store, &cfg, &tokens).unwrap();
        let p = enc.pooled().data();
        assert!(p[..d].iter().zip(&p[d..]).any(|(x, y)| (x - y).abs() > 1e-6));
        let pos = store.id("text.pos").unwrap();
        store.get_mut(pos).data_mut().fill(0.0);
        let enc = encode_text(&store, &cfg, &tokens).unwrap();
        let p = enc.pooled().data();
        for (x, y) in p[..d].iter().zip(&p[d..]) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn category_features_are_cached_and_distinct() {
        let (vocab, cfg, store) = setup::<f64>(4);
        let cats = CategoryFeatures::new(&store, &cfg, &vocab, &names()).unwrap();
        let again = CategoryFeatures::new(&store, &cfg, &vocab, &names()).unwrap();
        assert_eq!(cats.get(2).unwrap(), again.get(2).unwrap());
        for i in 0..4 {
            for j in (i + 1)..4 {
                let (x, y) = (cats.get(i).unwrap(), cats.get(j).unwrap());
                assert!(x.iter().zip(y).any(|(a, b)| (a - b).abs() > 1e-6));
            }
        }
        assert!(cats.get(4).is_err());
        let tokens = TokenBatch::from_captions(&["sarcoma"], &vocab, cfg.max_tokens).unwrap();
        let enc = encode_text(&store, &cfg, &tokens).unwrap();
        let s = crate::alignment::support_score(cats.get(1).unwrap(), enc.pooled().data()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let (_, cfg, store) = setup::<f64>(5);
        let mut row = vec![NULL_ID; cfg.max_tokens];
        row[0] = cfg.vocab_size;
        let tokens = TokenBatch::new(vec![row]).unwrap();
        assert!(matches!(encode_text(&store, &cfg, &tokens), Err(Error::Range(_))));
    }

    #[test]
    fn caption_dropout_extremes_and_rate() {
        let v = Vocabulary::for_categories(&names()).unwrap();
        let tokens = TokenBatch::from_captions(&["a carcinoma patch"; 4], &v, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (same, d) = apply_caption_dropout(&tokens, 0.0, &mut rng).unwrap();
        assert_eq!(same, tokens);
        assert!(d.iter().all(|&x| !x));
        let (gone, d) = apply_caption_dropout(&tokens, 1.0, &mut rng).unwrap();
        assert!(gone.ids().iter().all(|&i| i == NULL_ID));
        assert!(d.iter().all(|&x| x));
        assert!(apply_caption_dropout(&tokens, 1.5, &mut rng).is_err());

        let big = TokenBatch::new(vec![vec![5]; 100_000]).unwrap();
        let (_, d) = apply_caption_dropout(&big, 0.1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let frac = d.iter().filter(|&&x| x).count() as f64 / d.len() as f64;
        assert!((frac - 0.1).abs() <= 0.005, "{frac}");
        let (_, again) = apply_caption_dropout(&big, 0.1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (vocab, cfg, store) = setup::<f64>(6);
        let caps = [
            "a carcinoma patch with few small nuclei",
            "a melanoma patch with many large nuclei",
            "",
            "a sarcoma patch",
        ];
        let tokens = TokenBatch::from_captions(&caps, &vocab, cfg.max_tokens).unwrap();
        let loss = |p: &ParamStore<f64>| -> (f64, Option<ParamStore<f64>>) {
            let mut g = Graph::new(p);
            let n = text_forward(&mut g, &cfg, &tokens).unwrap();
            let m = g.cosine_matrix(n.pooled).unwrap();
            let seq_target = Tensor::zeros(g.shape(n.sequence));
            let a = g.mse(n.sequence, &seq_target);
            let target = Tensor::full(&[4, 4], 0.2);
            let tv = g.input(target);
            let c = g.mat_sq_diff(m, tv, None);
            let l = g.lin_comb(&[(a, 0.01), (c, 1.0)]);
            let v = g.value(l).item();
            let grads = g.backward(l);
            (v, Some(grads.params))
        };
        let (_, grads) = loss(&store);
        let grads = grads.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (id, name) in store.names().iter().enumerate() {
            let n = store.get(id).len();
            for _ in 0..5 {
                let i = if name == "text.token" {
                    // rows actually used by the batch
                    let row = tokens.ids()[rng.gen_range(0..tokens.ids().len())];
                    row * cfg.width + rng.gen_range(0..cfg.width)
                } else {
                    rng.gen_range(0..n)
                };
                let h = 1e-5;
                let mut p = store.clone();
                p.get_mut(id).data_mut()[i] += h;
                let up = loss(&p).0;
                p.get_mut(id).data_mut()[i] -= 2.0 * h;
                let down = loss(&p).0;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id).data()[i];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{name}[{i}]: analytic {an}, numeric {fd}");
            }
        }
    }
}
