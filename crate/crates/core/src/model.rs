//! Full parameter layout of the tagger and its initialisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHead, AttentionParams};
use crate::corpus::{Vocabulary, PAD};
use crate::decoder::{DecoderConfig, DecoderParams, ARG_ROWS};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{glorot, uniform, ParameterSet, Real, Tensor};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Small dimensions used by tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                word_dim: 8,
                char_dim: 4,
                char_filters: 4,
                char_width: 3,
                pos_dim: 4,
                hidden: 4,
                layers: 2,
            },
            decoder: DecoderConfig {
                hidden: 8,
                arg_dim: 8,
                attention_dim: 8,
                aspect_hidden: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Width of the aspect representation `[h_s; fwd; bwd; h_e]`.
    pub fn aspect_dim(&self) -> usize {
        2 * self.encoder.output_dim() + 2 * self.decoder.aspect_hidden
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Glorot,
    Zeros,
    /// Uniform in `±sqrt(3 / cols)` with the PAD row zeroed.
    Embedding,
    /// Zeros except the forget-gate block, which is one.
    LstmBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Every parameter of a model with `config` over `vocab`, in declaration
/// order.
pub fn layout(config: &ModelConfig, vocab: &Vocabulary) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    let e = &config.encoder;
    let d = &config.decoder;
    let de = e.output_dim();

    push(EncoderParams::WORD_TABLE.into(), vec![vocab.words.len(), e.word_dim], Init::Embedding);
    push(EncoderParams::CHAR_TABLE.into(), vec![vocab.chars.len(), e.char_dim], Init::Embedding);
    push(EncoderParams::POS_TABLE.into(), vec![vocab.pos.len(), e.pos_dim], Init::Embedding);
    push(
        EncoderParams::CONV_FILTERS.into(),
        vec![e.char_filters, e.char_width * e.char_dim],
        Init::Glorot,
    );
    push(EncoderParams::CONV_BIAS.into(), vec![e.char_filters], Init::Zeros);

    let lstm = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: String, input: usize, hidden: usize| {
        push(format!("{prefix}.weight"), vec![4 * hidden, input + hidden], Init::Glorot);
        push(format!("{prefix}.bias"), vec![4 * hidden], Init::LstmBias);
    };
    for k in 0..e.layers {
        let input = if k == 0 { e.input_dim() } else { de };
        let prefix = EncoderParams::layer_prefix(k);
        lstm(&mut push, format!("{prefix}.fwd"), input, e.hidden);
        lstm(&mut push, format!("{prefix}.bwd"), input, e.hidden);
    }

    for prefix in [AttentionParams::BOUNDARY, AttentionParams::POLARITY] {
        let [sp, sb, tp, sc] = AttentionHead::names(prefix);
        push(sp, vec![d.attention_dim, d.hidden], Init::Glorot);
        push(sb, vec![d.attention_dim], Init::Zeros);
        push(tp, vec![d.attention_dim, de], Init::Glorot);
        push(sc, vec![1, d.attention_dim], Init::Glorot);
    }

    push(DecoderParams::INPUT_PROJ.into(), vec![d.hidden, d.arg_dim + de], Init::Glorot);
    lstm(&mut push, DecoderParams::CELL.into(), d.hidden, d.hidden);
    push(DecoderParams::ARG_TABLE.into(), vec![ARG_ROWS, d.arg_dim], Init::Glorot);
    push(DecoderParams::POSITION_PROJ.into(), vec![d.arg_dim, de], Init::Glorot);
    for prefix in [DecoderParams::START, DecoderParams::END] {
        push(format!("{prefix}.w_state"), vec![1, d.hidden], Init::Glorot);
        push(format!("{prefix}.w_token"), vec![1, de], Init::Glorot);
        push(format!("{prefix}.bias"), vec![1], Init::Zeros);
    }
    push(format!("{}.weight", DecoderParams::NA), vec![1, d.hidden], Init::Glorot);
    push(format!("{}.bias", DecoderParams::NA), vec![1], Init::Zeros);
    lstm(&mut push, format!("{}.fwd", DecoderParams::ASPECT), de, d.aspect_hidden);
    lstm(&mut push, format!("{}.bwd", DecoderParams::ASPECT), de, d.aspect_hidden);
    push(
        format!("{}.weight", DecoderParams::POLARITY),
        vec![3, config.aspect_dim() + d.hidden],
        Init::Glorot,
    );
    push(format!("{}.bias", DecoderParams::POLARITY), vec![3], Init::Zeros);
    push(format!("{}.weight", DecoderParams::POLARITY_NA), vec![1, d.hidden], Init::Glorot);
    push(format!("{}.bias", DecoderParams::POLARITY_NA), vec![1], Init::Zeros);
    out
}

fn initialise<T: Real, R: Rng>(spec: &ParamSpec, rng: &mut R) -> Tensor<T> {
    match spec.init {
        Init::Glorot => glorot(&spec.shape, rng),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Embedding => {
            let bound = (3.0 / spec.shape[1] as f64).sqrt();
            let mut t = uniform(&spec.shape, bound, rng);
            t.row_mut(PAD).fill(T::zero());
            t
        }
        Init::LstmBias => {
            let h = spec.shape[0] / 4;
            let mut t = Tensor::zeros(&spec.shape);
            t.data_mut()[h..2 * h].fill(T::one());
            t
        }
    }
}

/// Parameter handles of the whole tagger.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub decoder: DecoderParams,
}

impl Model {
    /// Declares and initialises every parameter.
    pub fn init<T: Real, R: Rng>(
        config: ModelConfig,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<(Model, ParameterSet<T>)> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for spec in layout(&config, vocab) {
            let value = initialise(&spec, rng);
            params.insert(spec.name, value)?;
        }
        let model = Model::bind(config, vocab, &params)?;
        Ok((model, params))
    }

    /// Attaches to an existing parameter set, which must match the layout
    /// for `config` and `vocab` exactly.
    pub fn bind<T: Real>(config: ModelConfig, vocab: &Vocabulary, params: &ParameterSet<T>) -> Result<Model> {
        config.validate()?;
        let expected = layout(&config, vocab);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for spec in &expected {
            let id = params.id(&spec.name)?;
            let found = params.value(id).shape();
            if found != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name, found, spec.shape
                )));
            }
        }
        Ok(Model {
            encoder: EncoderParams::bind(&config.encoder, params)?,
            attention: AttentionParams::bind(params)?,
            decoder: DecoderParams::bind(&config.decoder, params)?,
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, AnnotatedExample, Token};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        let tokens = ["great", "food", "but", "slow", "service"]
            .iter()
            .map(|w| Token::new(*w, "NN").unwrap())
            .collect();
        build_vocabulary(&[AnnotatedExample::new(None, tokens, vec![]).unwrap()], 1).unwrap()
    }

    #[test]
    fn layout_names_are_unique_and_all_bound() {
        let v = vocab();
        let specs = layout(&ModelConfig::tiny(), &v);
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        let (_, params) = Model::init::<f32, _>(ModelConfig::tiny(), &v, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(params.len(), specs.len());
    }

    #[test]
    fn init_follows_the_declared_schemes() {
        let v = vocab();
        let (m, p) = Model::init::<f64, _>(ModelConfig::tiny(), &v, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let words = p.value(m.encoder.word_table);
        assert!(words.row(PAD).iter().all(|&x| x == 0.0));
        let bound = (3.0f64 / 8.0).sqrt();
        assert!(words.data().iter().all(|&x| x.abs() <= bound));
        let h = m.decoder.cell.hidden;
        let b = p.value(m.decoder.cell.bias).data();
        assert!(b[..h].iter().all(|&x| x == 0.0));
        assert!(b[h..2 * h].iter().all(|&x| x == 1.0));
        assert!(b[2 * h..].iter().all(|&x| x == 0.0));
        assert!(p.value(m.decoder.polarity.bias).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn default_sized_layout() {
        let v = vocab();
        let c = ModelConfig::default();
        let specs = layout(&c, &v);
        let shape = |n: &str| specs.iter().find(|s| s.name == n).unwrap().shape.clone();
        assert_eq!(shape("encoder.layer0.fwd.weight"), vec![600, 550]);
        assert_eq!(shape("encoder.layer1.bwd.weight"), vec![600, 450]);
        assert_eq!(shape("decoder.polarity.weight"), vec![3, 900 + 300]);
        assert_eq!(shape("char_cnn.filters"), vec![50, 150]);
    }

    #[test]
    fn bind_rejects_a_foreign_layout() {
        let v = vocab();
        let (_, p) = Model::init::<f32, _>(ModelConfig::tiny(), &v, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut other = ModelConfig::tiny();
        other.decoder.hidden = 6;
        assert!(Model::bind(other, &v, &p).is_err());
        assert!(Model::bind(ModelConfig::tiny(), &v, &p).is_ok());
    }
}
