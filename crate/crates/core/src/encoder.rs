//! Token embeddings and the stacked bidirectional sentence encoder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{IndexedSentence, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::numerics::{BiLstmParams, Graph, ParamId, ParameterSet, Real, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub word_dim: usize,
    /// Width of the character embeddings fed to the convolution.
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_width: usize,
    pub pos_dim: usize,
    /// Per-direction recurrent size.
    pub hidden: usize,
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            word_dim: 300,
            char_dim: 50,
            char_filters: 50,
            char_width: 3,
            pos_dim: 50,
            hidden: 150,
            layers: 2,
        }
    }
}

impl EncoderConfig {
    /// Width of `x_i = [word; chars; pos]`.
    pub fn input_dim(&self) -> usize {
        self.word_dim + self.char_filters + self.pos_dim
    }

    /// Width of a contextual token representation.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.word_dim", self.word_dim),
            ("encoder.char_dim", self.char_dim),
            ("encoder.char_filters", self.char_filters),
            ("encoder.char_width", self.char_width),
            ("encoder.pos_dim", self.pos_dim),
            ("encoder.hidden", self.hidden),
            ("encoder.layers", self.layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub word_table: ParamId,
    pub char_table: ParamId,
    pub pos_table: ParamId,
    pub conv_filters: ParamId,
    pub conv_bias: ParamId,
    pub layers: Vec<BiLstmParams>,
}

impl EncoderParams {
    pub const WORD_TABLE: &'static str = "embed.word";
    pub const CHAR_TABLE: &'static str = "embed.char";
    pub const POS_TABLE: &'static str = "embed.pos";
    pub const CONV_FILTERS: &'static str = "char_cnn.filters";
    pub const CONV_BIAS: &'static str = "char_cnn.bias";

    pub fn layer_prefix(k: usize) -> String {
        format!("encoder.layer{k}")
    }

    pub fn bind<T: Real>(config: &EncoderConfig, params: &ParameterSet<T>) -> Result<Self> {
        Ok(EncoderParams {
            config: config.clone(),
            word_table: params.id(Self::WORD_TABLE)?,
            char_table: params.id(Self::CHAR_TABLE)?,
            pos_table: params.id(Self::POS_TABLE)?,
            conv_filters: params.id(Self::CONV_FILTERS)?,
            conv_bias: params.id(Self::CONV_BIAS)?,
            layers: (0..config.layers)
                .map(|k| BiLstmParams::bind(params, &Self::layer_prefix(k), config.hidden))
                .collect::<Result<_>>()?,
        })
    }
}

/// Contextual representations of one sentence.
#[derive(Debug, Clone)]
pub struct SentenceEncoding {
    /// `n x output_dim` matrix whose row i is token i's representation.
    pub states: Var,
    /// Row i of `states` as its own node.
    pub rows: Vec<Var>,
    /// Per-layer `(forward, backward)` directional states.
    pub directional: Vec<(Vec<Var>, Vec<Var>)>,
}

impl SentenceEncoding {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Character convolution with max pooling. Words shorter than the filter
/// width are right-padded with PAD characters.
pub fn char_encode<T: Real>(g: &mut Graph<'_, T>, p: &EncoderParams, chars: &[usize]) -> Result<Var> {
    let width = p.config.char_width;
    let mut ids = chars.to_vec();
    while ids.len() < width {
        ids.push(PAD);
    }
    let table = g.param(p.char_table);
    let embedded = g.gather(table, &ids)?;
    let filters = g.param(p.conv_filters);
    let bias = g.param(p.conv_bias);
    g.conv1d_max(embedded, filters, bias, width)
}

/// `[word vector; char encoding; POS vector]`.
pub fn embed_token<T: Real>(
    g: &mut Graph<'_, T>,
    p: &EncoderParams,
    word: usize,
    pos: usize,
    chars: &[usize],
) -> Result<Var> {
    let words = g.param(p.word_table);
    let w = g.lookup(words, word)?;
    let c = char_encode(g, p, chars)?;
    let tags = g.param(p.pos_table);
    let t = g.lookup(tags, pos)?;
    g.concat(&[w, c, t])
}

pub fn encode_sentence<T: Real>(
    g: &mut Graph<'_, T>,
    p: &EncoderParams,
    sentence: &IndexedSentence,
) -> Result<SentenceEncoding> {
    if sentence.is_empty() {
        return Err(Error::shape("encode_sentence", "empty sentence"));
    }
    let mut inputs = Vec::with_capacity(sentence.len());
    for i in 0..sentence.len() {
        let x = embed_token(g, p, sentence.words[i], sentence.pos[i], &sentence.chars[i])?;
        inputs.push(g.dropout(x)?);
    }
    let mut directional = Vec::with_capacity(p.layers.len());
    for (k, layer) in p.layers.iter().enumerate() {
        if k > 0 {
            inputs = inputs.into_iter().map(|x| g.dropout(x)).collect::<Result<_>>()?;
        }
        let (fwd, bwd) = layer.run(g, &inputs)?;
        inputs = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| g.concat(&[f, b]))
            .collect::<Result<_>>()?;
        directional.push((fwd, bwd));
    }
    let states = g.stack_rows(&inputs)?;
    Ok(SentenceEncoding {
        states,
        rows: inputs,
        directional,
    })
}

/// Copies vectors from a whitespace-separated text file (`token v1 ... vD`
/// per line) into the rows of `table` for every vocabulary word found,
/// trying the exact surface form before its lowercase form. A leading
/// `count dim` header line is skipped. Returns the number of rows filled.
pub fn load_pretrained<T: Real>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    params: &mut ParameterSet<T>,
    table: ParamId,
) -> Result<usize> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_pretrained(BufReader::new(file), vocab, params, table)
}

pub fn read_pretrained<T: Real, R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    params: &mut ParameterSet<T>,
    table: ParamId,
) -> Result<usize> {
    let dim = params.value(table).cols();
    let mut wanted: HashMap<String, Option<Vec<T>>> = HashMap::new();
    for w in vocab.words.items().iter().skip(2) {
        wanted.insert(w.clone(), None);
        wanted.insert(w.to_lowercase(), None);
    }
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() < dim + 1 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected a token and {} values, found {} fields", dim, fields.len()),
            });
        }
        // Tokens may themselves contain spaces; the vector is always the tail.
        let split = fields.len() - dim;
        let token = fields[..split].join(" ");
        let Some(slot) = wanted.get_mut(&token) else {
            continue;
        };
        let values = fields[split..]
            .iter()
            .map(|f| f.parse::<f64>().map(T::of))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        *slot = Some(values);
    }
    let mut filled = 0;
    let rows = params.value_mut(table);
    for (id, w) in vocab.words.items().iter().enumerate().skip(2) {
        let found = wanted
            .get(w)
            .and_then(Option::as_ref)
            .or_else(|| wanted.get(&w.to_lowercase()).and_then(Option::as_ref));
        if let Some(v) = found {
            rows.row_mut(id).copy_from_slice(v);
            filled += 1;
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, AnnotatedExample, Token};
    use crate::model::{Model, ModelConfig};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sentence(words: &[&str]) -> AnnotatedExample {
        let tokens = words.iter().map(|w| Token::new(*w, "NN").unwrap()).collect();
        AnnotatedExample::new(None, tokens, vec![]).unwrap()
    }

    fn setup(words: &[&str]) -> (Model, ParameterSet<f64>, Vocabulary) {
        let ex = sentence(words);
        let vocab = build_vocabulary(std::slice::from_ref(&ex), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (model, params) = Model::init(ModelConfig::tiny(), &vocab, &mut rng).unwrap();
        (model, params, vocab)
    }

    #[test]
    fn default_dimensions() {
        let c = EncoderConfig::default();
        assert_eq!(c.input_dim(), 400);
        assert_eq!(c.output_dim(), 300);
    }

    #[test]
    fn short_tokens_are_padded_to_the_filter_width() {
        let (model, params, vocab) = setup(&["I", "Pizza"]);
        let mut g = Graph::new(params.table());
        let ids = vocab.index(sentence(&["I"]).tokens()).chars;
        let out = char_encode(&mut g, &model.encoder, &ids[0]).unwrap();
        assert_eq!(g.shape(out), &[model.config.encoder.char_filters]);
    }

    #[test]
    fn char_encoding_depends_only_on_characters() {
        let (model, params, vocab) = setup(&["Pizza", "pizza", "Pizza"]);
        let s = vocab.index(sentence(&["Pizza", "pizza", "Pizza"]).tokens());
        let mut g = Graph::new(params.table());
        let a = char_encode(&mut g, &model.encoder, &s.chars[0]).unwrap();
        let b = char_encode(&mut g, &model.encoder, &s.chars[2]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn permuting_filters_permutes_outputs() {
        let (model, mut params, vocab) = setup(&["Pizza"]);
        let s = vocab.index(sentence(&["Pizza"]).tokens());
        let before = {
            let mut g = Graph::new(params.table());
            let v = char_encode(&mut g, &model.encoder, &s.chars[0]).unwrap();
            g.value(v).data().to_vec()
        };
        let f = params.value(model.encoder.conv_filters).clone();
        let b = params.value(model.encoder.conv_bias).clone();
        let nf = f.rows();
        // Reverse filter order.
        let mut rf = Vec::new();
        for k in (0..nf).rev() {
            rf.extend_from_slice(f.row(k));
        }
        *params.value_mut(model.encoder.conv_filters) = Tensor::from_vec(f.shape(), rf).unwrap();
        *params.value_mut(model.encoder.conv_bias) = Tensor::vector(b.data().iter().rev().copied().collect());
        let mut g = Graph::new(params.table());
        let v = char_encode(&mut g, &model.encoder, &s.chars[0]).unwrap();
        let after: Vec<f64> = g.value(v).data().to_vec();
        let reversed: Vec<f64> = before.into_iter().rev().collect();
        assert_eq!(after, reversed);
    }

    #[test]
    fn embedding_layout_is_word_char_pos() {
        let (model, params, vocab) = setup(&["good", "food"]);
        let s = vocab.index(sentence(&["good", "unseen"]).tokens());
        let mut g = Graph::new(params.table());
        let known = embed_token(&mut g, &model.encoder, s.words[0], s.pos[0], &s.chars[0]).unwrap();
        let unknown = embed_token(&mut g, &model.encoder, s.words[1], s.pos[1], &s.chars[1]).unwrap();
        let cfg = &model.config.encoder;
        assert_eq!(g.value(known).len(), cfg.input_dim());
        let table = params.value(model.encoder.word_table);
        assert_eq!(&g.value(known).data()[..cfg.word_dim], table.row(s.words[0]));
        assert_eq!(&g.value(unknown).data()[..cfg.word_dim], table.row(crate::corpus::UNK));
        let pos = params.value(model.encoder.pos_table);
        assert_eq!(&g.value(known).data()[cfg.word_dim + cfg.char_filters..], pos.row(s.pos[0]));
    }

    #[test]
    fn output_has_one_row_per_token() {
        for words in [vec!["solo"], vec!["a", "b", "c", "d", "e"]] {
            let (model, params, vocab) = setup(&words);
            let s = vocab.index(sentence(&words).tokens());
            let mut g = Graph::new(params.table());
            let enc = encode_sentence(&mut g, &model.encoder, &s).unwrap();
            assert_eq!(g.shape(enc.states), &[words.len(), model.config.encoder.output_dim()]);
        }
    }

    #[test]
    fn tied_directions_mirror_each_other() {
        let (model, mut params, vocab) = setup(&["x", "y", "z"]);
        let layer = &model.encoder.layers[0];
        let (fw, fb) = (params.value(layer.forward.weight).clone(), params.value(layer.forward.bias).clone());
        *params.value_mut(layer.backward.weight) = fw;
        *params.value_mut(layer.backward.bias) = fb;
        for words in [["x", "y", "x"], ["x", "y", "z"]] {
            let s = vocab.index(sentence(&words).tokens());
            let mut rev = s.clone();
            rev.words.reverse();
            rev.pos.reverse();
            rev.chars.reverse();
            let mut g = Graph::new(params.table());
            let orig = encode_sentence(&mut g, &model.encoder, &s).unwrap();
            let flipped = encode_sentence(&mut g, &model.encoder, &rev).unwrap();
            for i in 0..3 {
                let a = g.value(flipped.directional[0].0[i]).data();
                let b = g.value(orig.directional[0].1[2 - i]).data();
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn swapping_tokens_changes_the_encoding() {
        let (model, params, vocab) = setup(&["the", "pasta", "was", "cold"]);
        let s = vocab.index(sentence(&["the", "pasta", "was", "cold"]).tokens());
        let t = vocab.index(sentence(&["pasta", "the", "was", "cold"]).tokens());
        let mut g = Graph::new(params.table());
        let a = encode_sentence(&mut g, &model.encoder, &s).unwrap();
        let b = encode_sentence(&mut g, &model.encoder, &t).unwrap();
        assert_ne!(g.value(a.states), g.value(b.states));
    }

    #[test]
    fn pretrained_rows_are_copied() {
        let (_, mut params, vocab) = setup(&["Good", "food", "zzz"]);
        let table = params.id(EncoderParams::WORD_TABLE).unwrap();
        let dim = params.value(table).cols();
        let vec_line = |w: &str, v: f64| format!("{w} {}\n", vec![v.to_string(); dim].join(" "));
        let text = format!("3 {dim}\n{}{}{}", vec_line("good", 0.5), vec_line("food", -1.0), vec_line("Good", 2.0));
        let before_zzz = params.value(table).row(vocab.word_id("zzz")).to_vec();
        let filled = read_pretrained(text.as_bytes(), &vocab, &mut params, table).unwrap();
        assert_eq!(filled, 2);
        assert!(params.value(table).row(vocab.word_id("Good")).iter().all(|&x| x == 2.0));
        assert!(params.value(table).row(vocab.word_id("food")).iter().all(|&x| x == -1.0));
        assert_eq!(params.value(table).row(vocab.word_id("zzz")), &before_zzz[..]);
    }

    #[test]
    fn pretrained_dimension_mismatch_is_reported() {
        let (_, mut params, vocab) = setup(&["good"]);
        let table = params.id(EncoderParams::WORD_TABLE).unwrap();
        let err = read_pretrained("good 1.0 2.0\n".as_bytes(), &vocab, &mut params, table).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
