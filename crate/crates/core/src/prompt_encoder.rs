//! Style-initialised prompt tuning of the frozen transformer.
//!
//! Every layer `i` consumes `[cls, P_i, patches]`. The prompt rows of the
//! layer output are dropped and the next layer receives fresh prompts, so
//! prompts only influence the class and patch tokens through attention.
//! Prompts are generated per input: shallow layers project one source
//! (style vector by default), deep layers project another (flattened Gram by
//! default), and every layer adds its own learnable free tokens.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BlockCache, Embedding, TokenSequence, Transformer};
use crate::error::{Error, Result};
use crate::linalg::{norm, normalize_backward, uniform_matrix};
use crate::nn::{LayerNormCache, Linear};
use crate::style::{GramMatrix, StyleVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    StyleSpace,
    Gram,
    Random,
}

impl std::str::FromStr for PromptSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style_space" | "style" => Ok(Self::StyleSpace),
            "gram" => Ok(Self::Gram),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown prompt source `{other}`"))),
        }
    }
}

/// Which layer groups receive prompt tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInsertion {
    Both,
    ShallowOnly,
    DeepOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// `m`, prompt tokens per prompted layer.
    pub tokens_per_layer: usize,
    /// Layers `[0, split_layer)` are shallow, `[split_layer, depth)` deep.
    /// `None` splits at `depth / 2`.
    #[serde(default)]
    pub split_layer: Option<usize>,
    pub shallow_source: PromptSource,
    pub deep_source: PromptSource,
    pub insertion: PromptInsertion,
    /// Multiplier on the uniform init bound of projections and random free tokens.
    pub init_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            tokens_per_layer: 4,
            split_layer: None,
            shallow_source: PromptSource::StyleSpace,
            deep_source: PromptSource::Gram,
            insertion: PromptInsertion::Both,
            init_scale: 1.0,
        }
    }
}

impl PromptConfig {
    /// Both layer groups fed by learnable free tokens only.
    pub fn random_init() -> Self {
        Self {
            shallow_source: PromptSource::Random,
            deep_source: PromptSource::Random,
            ..Self::default()
        }
    }

    pub fn split(&self, depth: usize) -> usize {
        self.split_layer.unwrap_or(depth / 2)
    }

    pub fn shallow_layers(&self, depth: usize) -> Range<usize> {
        0..self.split(depth)
    }

    pub fn deep_layers(&self, depth: usize) -> Range<usize> {
        self.split(depth)..depth
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.tokens_per_layer == 0 {
            return Err(Error::Config("tokens_per_layer must be at least 1".into()));
        }
        if self.split(depth) > depth {
            return Err(Error::Config(format!(
                "split layer {} exceeds depth {depth}",
                self.split(depth)
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Prompt count injected at `layer`.
    pub fn tokens_at(&self, layer: usize, depth: usize) -> usize {
        let shallow = layer < self.split(depth);
        match (self.insertion, shallow) {
            (PromptInsertion::Both, _) | (PromptInsertion::ShallowOnly, true) | (PromptInsertion::DeepOnly, false) => {
                self.tokens_per_layer
            }
            _ => 0,
        }
    }
}

/// One projection per layer group, `source_dim x (m * d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupProjection {
    pub source: PromptSource,
    /// Empty (`0 x m*d`) for the random source.
    pub weight: Array2<f64>,
}

/// All learnable prompt parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub config: PromptConfig,
    pub depth: usize,
    pub width: usize,
    pub source_dim: usize,
    /// Fixed multiplier applied to sources before projection.
    pub source_scale: f64,
    pub shallow: GroupProjection,
    pub deep: GroupProjection,
    /// Per layer `m_l x d`; rows are free tokens added to the projection.
    pub free_tokens: Vec<Array2<f64>>,
}

/// Per-layer prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub layers: Vec<Array2<f64>>,
}

impl PromptSet {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

impl PromptParams {
    pub fn new(
        rng: &mut ChaCha8Rng,
        config: PromptConfig,
        depth: usize,
        width: usize,
        source_dim: usize,
        source_scale: f64,
    ) -> Result<Self> {
        config.validate(depth)?;
        let m = config.tokens_per_layer;
        let out = m * width;
        let proj_bound = config.init_scale * (3.0 / source_dim.max(1) as f64).sqrt();
        let make = |rng: &mut ChaCha8Rng, source: PromptSource| GroupProjection {
            source,
            weight: match source {
                PromptSource::Random => Array2::zeros((0, out)),
                _ => uniform_matrix(rng, source_dim, out, proj_bound),
            },
        };
        let shallow = make(rng, config.shallow_source);
        let deep = make(rng, config.deep_source);
        let split = config.split(depth);
        let free_tokens = (0..depth)
            .map(|layer| {
                let count = config.tokens_at(layer, depth);
                let source = if layer < split { config.shallow_source } else { config.deep_source };
                match source {
                    PromptSource::Random => uniform_matrix(rng, count, width, config.init_scale),
                    _ => Array2::zeros((count, width)),
                }
            })
            .collect();
        Ok(Self {
            config,
            depth,
            width,
            source_dim,
            source_scale,
            shallow,
            deep,
            free_tokens,
        })
    }

    fn source<'a>(&self, source: PromptSource, gram: &'a GramMatrix, style: &'a StyleVector) -> Option<&'a [f64]> {
        match source {
            PromptSource::StyleSpace => Some(&style.vector),
            PromptSource::Gram => Some(gram.flattened()),
            PromptSource::Random => None,
        }
    }

    fn check_sources(&self, gram: &GramMatrix, style: &StyleVector) -> Result<()> {
        for group in [&self.shallow, &self.deep] {
            if let Some(src) = self.source(group.source, gram, style) {
                if src.len() != self.source_dim {
                    return Err(Error::Shape(format!(
                        "{:?} source has dimension {}, projection expects {}",
                        group.source,
                        src.len(),
                        self.source_dim
                    )));
                }
            }
        }
        Ok(())
    }

    fn projected(&self, group: &GroupProjection, gram: &GramMatrix, style: &StyleVector) -> Option<Array1<f64>> {
        self.source(group.source, gram, style).map(|src| {
            let x = Array1::from_iter(src.iter().map(|v| v * self.source_scale));
            x.dot(&group.weight)
        })
    }

    /// Generates the prompt tokens of every layer for one input.
    pub fn init_prompts(&self, gram: &GramMatrix, style: &StyleVector) -> Result<PromptSet> {
        self.check_sources(gram, style)?;
        let shallow = self.projected(&self.shallow, gram, style);
        let deep = self.projected(&self.deep, gram, style);
        let split = self.config.split(self.depth);
        let layers = self
            .free_tokens
            .iter()
            .enumerate()
            .map(|(layer, free)| {
                let mut tokens = free.clone();
                let count = tokens.nrows();
                let proj = if layer < split { &shallow } else { &deep };
                if let (Some(p), true) = (proj, count > 0) {
                    let p = p.view().into_shape_with_order((count, self.width)).expect("m*d projection");
                    tokens += &p;
                }
                tokens
            })
            .collect();
        Ok(PromptSet { layers })
    }

    /// Accumulates gradients given upstream gradients on every layer's prompts.
    pub fn accumulate_grad(&self, gram: &GramMatrix, style: &StyleVector, d_prompts: &[Array2<f64>], grad: &mut PromptParams) {
        let out = self.config.tokens_per_layer * self.width;
        let mut group_sums = [Array1::<f64>::zeros(out), Array1::<f64>::zeros(out)];
        let mut touched = [false, false];
        let split = self.config.split(self.depth);
        for (layer, dp) in d_prompts.iter().enumerate() {
            if dp.nrows() == 0 {
                continue;
            }
            grad.free_tokens[layer] += dp;
            let g = usize::from(layer >= split);
            group_sums[g] += &dp.view().into_shape_with_order(out).expect("flatten prompts");
            touched[g] = true;
        }
        for (g, (group, grad_group)) in [(&self.shallow, &mut grad.shallow), (&self.deep, &mut grad.deep)]
            .into_iter()
            .enumerate()
        {
            if !touched[g] {
                continue;
            }
            if let Some(src) = self.source(group.source, gram, style) {
                for (i, v) in src.iter().enumerate() {
                    let x = v * self.source_scale;
                    if x != 0.0 {
                        grad_group.weight.row_mut(i).scaled_add(x, &group_sums[g]);
                    }
                }
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.shallow.weight.fill(0.0);
        z.deep.weight.fill(0.0);
        z.free_tokens.iter_mut().for_each(|t| t.fill(0.0));
        z
    }

    /// Mutable views of every learnable block, in a fixed order.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.shallow.weight.as_slice_mut().expect("contiguous"),
            self.deep.weight.as_slice_mut().expect("contiguous"),
        ];
        out.extend(self.free_tokens.iter_mut().map(|t| t.as_slice_mut().expect("contiguous")));
        out
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.shallow.weight.as_slice().expect("contiguous"),
            self.deep.weight.as_slice().expect("contiguous"),
        ];
        out.extend(self.free_tokens.iter().map(|t| t.as_slice().expect("contiguous")));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Embedding,
    /// Class token entering each layer plus the final one, when requested.
    pub layer_states: Option<Vec<Array1<f64>>>,
}

/// Saved activations for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    blocks: Vec<BlockCache>,
    prompt_counts: Vec<usize>,
    final_norm: LayerNormCache,
    pooled: Array1<f64>,
    z_norm: f64,
    unit: Vec<f64>,
}

/// Frozen transformer plus the `d -> d` head.
#[derive(Clone, Copy, Debug)]
pub struct PromptedEncoder<'a> {
    pub transformer: &'a Transformer,
    pub head: &'a Linear,
}

impl<'a> PromptedEncoder<'a> {
    pub fn new(transformer: &'a Transformer, head: &'a Linear) -> Self {
        Self { transformer, head }
    }

    fn check(&self, tokens: &TokenSequence, prompts: &PromptSet) -> Result<()> {
        let d = self.transformer.width();
        if prompts.depth() != self.transformer.depth() {
            return Err(Error::Config(format!(
                "prompt set covers {} layers, encoder has {}",
                prompts.depth(),
                self.transformer.depth()
            )));
        }
        if tokens.dim() != d || tokens.patch_tokens.ncols() != d {
            return Err(Error::Shape(format!("token dimension {} does not match width {d}", tokens.dim())));
        }
        if let Some(bad) = prompts.layers.iter().position(|p| p.nrows() > 0 && p.ncols() != d) {
            return Err(Error::Shape(format!("prompts of layer {bad} do not have width {d}")));
        }
        if self.head.in_dim() != d {
            return Err(Error::Shape("head input does not match width".into()));
        }
        Ok(())
    }

    fn run(&self, tokens: &TokenSequence, prompts: &PromptSet, keep_states: bool) -> Result<(EncoderOutput, EncoderTrace)> {
        self.check(tokens, prompts)?;
        let d = self.transformer.width();
        let patches = tokens.patch_count();
        let mut cls = tokens.class_token.clone();
        let mut patch_tokens = tokens.patch_tokens.clone();
        let mut caches = Vec::with_capacity(self.transformer.depth());
        let mut counts = Vec::with_capacity(self.transformer.depth());
        let mut states = keep_states.then(Vec::new);
        for (block, prompt) in self.transformer.blocks.iter().zip(&prompts.layers) {
            if let Some(st) = states.as_mut() {
                st.push(cls.clone());
            }
            let m = prompt.nrows();
            let mut input = Array2::<f64>::zeros((1 + m + patches, d));
            input.row_mut(0).assign(&cls);
            if m > 0 {
                input.slice_mut(s![1..1 + m, ..]).assign(prompt);
            }
            input.slice_mut(s![1 + m.., ..]).assign(&patch_tokens);
            let (output, cache) = block.forward(&input);
            cls = output.row(0).to_owned();
            patch_tokens = output.slice(s![1 + m.., ..]).to_owned();
            caches.push(cache);
            counts.push(m);
        }
        if let Some(st) = states.as_mut() {
            st.push(cls.clone());
        }
        let (normed, final_cache) = self.transformer.final_norm.forward(&cls.insert_axis(Axis(0)));
        let pooled = normed.row(0).to_owned();
        let z = self.head.forward_vec(&pooled);
        let z_norm = norm(z.as_slice().expect("contiguous"));
        let embedding = Embedding::unit(z.to_vec())?;
        let trace = EncoderTrace {
            blocks: caches,
            prompt_counts: counts,
            final_norm: final_cache,
            pooled,
            z_norm,
            unit: embedding.vector.clone(),
        };
        Ok((
            EncoderOutput {
                embedding,
                layer_states: states,
            },
            trace,
        ))
    }

    pub fn encode_query(&self, tokens: &TokenSequence, prompts: &PromptSet) -> Result<EncoderOutput> {
        self.run(tokens, prompts, false).map(|(o, _)| o)
    }

    pub fn encode_with_states(&self, tokens: &TokenSequence, prompts: &PromptSet) -> Result<EncoderOutput> {
        self.run(tokens, prompts, true).map(|(o, _)| o)
    }

    pub fn encode_traced(&self, tokens: &TokenSequence, prompts: &PromptSet) -> Result<(EncoderOutput, EncoderTrace)> {
        self.run(tokens, prompts, false)
    }

    /// Backpropagates a gradient on the unit embedding. Returns gradients on
    /// every layer's prompts; head gradients are accumulated when requested.
    pub fn backward(&self, trace: &EncoderTrace, d_unit: &[f64], head_grad: Option<&mut Linear>) -> Vec<Array2<f64>> {
        let d = self.transformer.width();
        let dz = Array1::from(normalize_backward(&trace.unit, trace.z_norm, d_unit));
        if let Some(g) = head_grad {
            self.head.accumulate_grad_vec(&trace.pooled, &dz, g);
        }
        let dpooled = self.head.backward_input_vec(&dz).insert_axis(Axis(0));
        let dcls = self.transformer.final_norm.backward(&trace.final_norm, &dpooled);
        let mut dcls = dcls.row(0).to_owned();
        let patches = trace.blocks[0].rows() - 1 - trace.prompt_counts[0];
        let mut dpatches = Array2::<f64>::zeros((patches, d));
        let mut d_prompts = vec![Array2::<f64>::zeros((0, d)); trace.blocks.len()];
        for (layer, block) in self.transformer.blocks.iter().enumerate().rev() {
            let m = trace.prompt_counts[layer];
            let mut dout = Array2::<f64>::zeros((1 + m + patches, d));
            dout.row_mut(0).assign(&dcls);
            // prompt outputs are discarded: zero gradient on those rows
            dout.slice_mut(s![1 + m.., ..]).assign(&dpatches);
            let din = block.backward(&trace.blocks[layer], &dout);
            dcls = din.row(0).to_owned();
            d_prompts[layer] = din.slice(s![1..1 + m, ..]).to_owned();
            dpatches = din.slice(s![1 + m.., ..]).to_owned();
        }
        d_prompts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, seeded_rng, uniform_vector};

    fn gram(values: Vec<f64>) -> GramMatrix {
        let c = (values.len() as f64).sqrt() as usize;
        GramMatrix {
            data: values,
            channels: c,
            normalizer: 1.0,
        }
    }

    fn style(vector: Vec<f64>) -> StyleVector {
        StyleVector {
            vector,
            weights: vec![1.0],
        }
    }

    fn toy(depth: usize, width: usize, config: PromptConfig) -> (Transformer, Linear, PromptParams) {
        let mut rng = seeded_rng(21, 0);
        let transformer = Transformer::new(&mut rng, width, depth, 2, 2 * width);
        let head = Linear::xavier(&mut rng, width, width);
        let params = PromptParams::new(&mut rng, config, depth, width, 4, 1.0).unwrap();
        (transformer, head, params)
    }

    fn tokens(rng: &mut ChaCha8Rng, patches: usize, width: usize) -> TokenSequence {
        TokenSequence {
            class_token: uniform_vector(rng, width, 1.0),
            patch_tokens: uniform_matrix(rng, patches, width, 1.0),
        }
    }

    #[test]
    fn every_layer_gets_m_tokens() {
        let (_, _, params) = toy(6, 8, PromptConfig::default());
        let set = params
            .init_prompts(&gram(vec![1.0, 0.5, 0.5, 2.0]), &style(vec![0.1, 0.2, 0.3, 0.4]))
            .unwrap();
        assert_eq!(set.depth(), 6);
        assert!(set.layers.iter().all(|l| l.dim() == (4, 8)));
    }

    #[test]
    fn zero_sources_give_zero_prompts() {
        let (_, _, params) = toy(4, 8, PromptConfig::default());
        let set = params.init_prompts(&gram(vec![0.0; 4]), &style(vec![0.0; 4])).unwrap();
        assert!(set.layers.iter().all(|l| l.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn identity_projection_copies_the_style_vector() {
        let config = PromptConfig {
            tokens_per_layer: 1,
            ..PromptConfig::default()
        };
        let mut rng = seeded_rng(0, 0);
        let mut params = PromptParams::new(&mut rng, config, 2, 4, 2, 1.0).unwrap();
        params.shallow.weight = Array2::eye(4).slice(s![0..2, ..]).to_owned();
        let v = style(vec![0.7311, 0.2689]);
        let g = GramMatrix {
            data: vec![0.0, 0.0],
            channels: 1,
            normalizer: 1.0,
        };
        let set = params.init_prompts(&g, &v).unwrap();
        assert_eq!(set.layers[0].row(0).to_vec(), vec![0.7311, 0.2689, 0.0, 0.0]);
    }

    #[test]
    fn source_dimension_mismatch_is_a_shape_error() {
        let (_, _, params) = toy(2, 8, PromptConfig::default());
        let err = params.init_prompts(&gram(vec![1.0; 9]), &style(vec![0.0; 4]));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn random_source_ignores_the_query() {
        let (_, _, params) = toy(4, 8, PromptConfig::random_init());
        let a = params.init_prompts(&gram(vec![1.0; 4]), &style(vec![1.0; 4])).unwrap();
        let b = params.init_prompts(&gram(vec![-3.0; 4]), &style(vec![9.0; 4])).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn insertion_strategies_control_prompted_layers() {
        let depth = 4;
        let shallow_only = PromptConfig {
            insertion: PromptInsertion::ShallowOnly,
            ..PromptConfig::default()
        };
        let counts: Vec<_> = (0..depth).map(|l| shallow_only.tokens_at(l, depth)).collect();
        assert_eq!(counts, vec![4, 4, 0, 0]);
        let deep_only = PromptConfig {
            insertion: PromptInsertion::DeepOnly,
            tokens_per_layer: 2,
            ..PromptConfig::default()
        };
        let counts: Vec<_> = (0..depth).map(|l| deep_only.tokens_at(l, depth)).collect();
        assert_eq!(counts, vec![0, 0, 2, 2]);
        assert_eq!(PromptConfig::default().shallow_layers(4), 0..2);
        assert_eq!(PromptConfig::default().deep_layers(4), 2..4);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let bad = PromptConfig {
            tokens_per_layer: 0,
            ..PromptConfig::default()
        };
        assert!(bad.validate(4).is_err());
        let bad = PromptConfig {
            split_layer: Some(5),
            ..PromptConfig::default()
        };
        assert!(bad.validate(4).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_normalised() {
        let (tf, head, params) = toy(3, 8, PromptConfig::default());
        let mut rng = seeded_rng(5, 0);
        let toks = tokens(&mut rng, 4, 8);
        let prompts = params.init_prompts(&gram(vec![0.3; 4]), &style(vec![0.2; 4])).unwrap();
        let enc = PromptedEncoder::new(&tf, &head);
        let a = enc.encode_query(&toks, &prompts).unwrap();
        let b = enc.encode_query(&toks, &prompts).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a.embedding.vector) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedding_is_sensitive_to_a_single_prompt_token() {
        let (tf, head, params) = toy(2, 8, PromptConfig::default());
        let mut rng = seeded_rng(6, 0);
        let toks = tokens(&mut rng, 4, 8);
        let prompts = params.init_prompts(&gram(vec![0.3; 4]), &style(vec![0.2; 4])).unwrap();
        let mut other = prompts.clone();
        other.layers[1][[2, 3]] += 0.5;
        let enc = PromptedEncoder::new(&tf, &head);
        let a = enc.encode_query(&toks, &prompts).unwrap().embedding;
        let b = enc.encode_query(&toks, &other).unwrap().embedding;
        assert!(1.0 - dot(&a.vector, &b.vector) > 0.0);
    }

    #[test]
    fn layer_count_mismatch_is_a_config_error() {
        let (tf, head, _) = toy(3, 8, PromptConfig::default());
        let mut rng = seeded_rng(7, 0);
        let toks = tokens(&mut rng, 4, 8);
        let prompts = PromptSet {
            layers: vec![Array2::zeros((4, 8)); 2],
        };
        let enc = PromptedEncoder::new(&tf, &head);
        assert!(matches!(enc.encode_query(&toks, &prompts), Err(Error::Config(_))));
    }

    /// Hand-rolled two-layer forward: explicit concat, explicit discard.
    #[test]
    fn prompt_outputs_never_reach_the_next_layer() {
        let (tf, head, params) = toy(2, 8, PromptConfig::default());
        let mut rng = seeded_rng(8, 0);
        let toks = tokens(&mut rng, 3, 8);
        let prompts = params.init_prompts(&gram(vec![0.5; 4]), &style(vec![0.25; 4])).unwrap();

        let concat = |cls: &Array1<f64>, p: &Array2<f64>, e: &Array2<f64>| {
            let mut rows = vec![cls.clone()];
            rows.extend(p.rows().into_iter().map(|r| r.to_owned()));
            rows.extend(e.rows().into_iter().map(|r| r.to_owned()));
            let flat: Vec<f64> = rows.iter().flat_map(|r| r.to_vec()).collect();
            Array2::from_shape_vec((rows.len(), 8), flat).unwrap()
        };
        let x0 = concat(&toks.class_token, &prompts.layers[0], &toks.patch_tokens);
        assert_eq!(x0.nrows(), 1 + 4 + 3);
        let (y0, _) = tf.blocks[0].forward(&x0);
        let cls1 = y0.row(0).to_owned();
        let e1 = y0.slice(s![5.., ..]).to_owned();
        let x1 = concat(&cls1, &prompts.layers[1], &e1);
        let (y1, _) = tf.blocks[1].forward(&x1);
        let (n, _) = tf.final_norm.forward(&y1.slice(s![0..1, ..]).to_owned());
        let z = head.forward_vec(&n.row(0).to_owned());
        let expected = Embedding::unit(z.to_vec()).unwrap();

        let enc = PromptedEncoder::new(&tf, &head);
        let got = enc.encode_with_states(&toks, &prompts).unwrap();
        for (a, b) in got.embedding.vector.iter().zip(&expected.vector) {
            assert!((a - b).abs() < 1e-12);
        }
        let states = got.layer_states.unwrap();
        assert_eq!(states.len(), 3);
        assert_eq!(states[1], cls1);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (tf, head, params) = toy(2, 8, PromptConfig::default());
        let mut rng = seeded_rng(9, 0);
        let toks = tokens(&mut rng, 3, 8);
        let g = gram(vec![0.4, -0.1, -0.1, 0.9]);
        let st = style(vec![0.3, 0.1, 0.2, 0.6]);
        let target: Vec<f64> = (0..8).map(|i| ((i * 5) as f64).cos()).collect();
        let enc = PromptedEncoder::new(&tf, &head);
        let loss = |p: &PromptParams| {
            let prompts = p.init_prompts(&g, &st).unwrap();
            dot(&enc.encode_query(&toks, &prompts).unwrap().embedding.vector, &target)
        };
        let prompts = params.init_prompts(&g, &st).unwrap();
        let (_, trace) = enc.encode_traced(&toks, &prompts).unwrap();
        let d_prompts = enc.backward(&trace, &target, None);
        let mut grad = params.zeros_like();
        params.accumulate_grad(&g, &st, &d_prompts, &mut grad);
        let h = 1e-6;
        for (block, idx) in [(0usize, 3usize), (0, 17), (1, 5), (1, 30), (2, 4), (3, 11)] {
            let mut p = params.clone();
            p.blocks_mut()[block][idx] += h;
            let mut m = params.clone();
            m.blocks_mut()[block][idx] -= h;
            let num = (loss(&p) - loss(&m)) / (2.0 * h);
            let ana = grad.blocks()[block][idx];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "block {block} idx {idx}: {ana} vs {num}");
        }
    }
}
