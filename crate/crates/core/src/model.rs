//! Decoder-only transformer over return tokens.
//!
//! Embeddings (token + learned position) feed `n_blocks` pre-norm attention
//! blocks, then a final layer norm and a bias-free projection to vocabulary
//! logits. Each block computes
//!
//! ```text
//! h = x + Dropout(Proj(MultiHead(LN1(x))))
//! y = h + Dropout(Contract(ReLU(Expand(LN2(h)))))
//! ```
//!
//! where the expansion is 4× the model width. Dropout is also applied to the
//! summed embeddings.

use rand::Rng;

use crate::autograd::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenId, VOCAB_SIZE};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub block_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            block_size: 256,
            d_model: 128,
            n_blocks: 4,
            n_heads: 4,
            dropout_p: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.block_size < 1 || self.d_model < 1 || self.n_blocks < 1 || self.n_heads < 1 {
            return Err(Error::Config(
                "block_size, d_model, n_blocks and n_heads must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Learnable scalars in one attention block.
    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        let norms = 2 * 2 * d;
        let attention = 4 * (d * d + d);
        let mlp = (d * 4 * d + 4 * d) + (4 * d * d + d);
        norms + attention + mlp
    }
}

/// Exact number of learnable scalars for a configuration.
pub fn count_params(config: &ModelConfig) -> usize {
    let (v, d) = (config.vocab_size, config.d_model);
    v * d + config.block_size * d + config.n_blocks * config.block_param_count() + 2 * d + d * v
}

/// Learnable tensors of one attention block. Generic so the same layout can
/// hold tensors, tape handles or optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wproj: T,
    pub bproj: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_expand: T,
    pub b_expand: T,
    pub w_contract: T,
    pub b_contract: T,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(
            ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wproj, bproj, ln2_gain, ln2_bias, w_expand,
            b_expand, w_contract, b_contract
        )
    };
}

impl<T> Block<T> {
    fn try_build<E>(mut f: impl FnMut(&'static str) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        macro_rules! build {
            ($($field:ident),*) => { Block { $($field: f(stringify!($field))?,)* } };
        }
        Ok(block_fields!(build))
    }

    fn entries(&self) -> Vec<(&'static str, &T)> {
        macro_rules! list {
            ($($field:ident),*) => { vec![$((stringify!($field), &self.$field),)*] };
        }
        block_fields!(list)
    }

    fn entries_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        macro_rules! list {
            ($($field:ident),*) => { vec![$((stringify!($field), &mut self.$field),)*] };
        }
        block_fields!(list)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub token_embedding: T,
    pub positional_embedding: T,
    pub blocks: Vec<Block<T>>,
    pub final_ln_gain: T,
    pub final_ln_bias: T,
    pub head: T,
}

pub type ModelParams<F = f32> = Params<Tensor<F>>;

impl<T> Params<T> {
    /// Builds every entry from its canonical name, in canonical order.
    pub fn try_build<E>(
        n_blocks: usize,
        mut f: impl FnMut(&str) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        let token_embedding = f("token_embedding")?;
        let positional_embedding = f("positional_embedding")?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            blocks.push(Block::try_build(|name| f(&format!("blocks.{i}.{name}")))?);
        }
        Ok(Params {
            token_embedding,
            positional_embedding,
            blocks,
            final_ln_gain: f("final_ln_gain")?,
            final_ln_bias: f("final_ln_bias")?,
            head: f("head")?,
        })
    }

    /// All entries with their canonical names, in canonical order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.entries().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("final_ln_gain".into(), &self.final_ln_gain));
        out.push(("final_ln_bias".into(), &self.final_ln_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("positional_embedding".to_string(), &mut self.positional_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.entries_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        out.push(("final_ln_gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln_bias".into(), &mut self.final_ln_bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let entries = self.entries();
        let mut it = entries.iter();
        let built: std::result::Result<Params<U>, ()> = Params::try_build(self.blocks.len(), |name| {
            let (n, t) = it.next().expect("same layout");
            debug_assert_eq!(n, name);
            Ok(f(name, t))
        });
        built.expect("infallible")
    }
}

/// Shape of every learnable tensor, keyed by canonical name.
pub fn param_shapes(config: &ModelConfig) -> Params<Vec<usize>> {
    let (v, d, b) = (config.vocab_size, config.d_model, config.block_size);
    let shapes: std::result::Result<_, ()> = Params::try_build(config.n_blocks, |name| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        Ok(match leaf {
            "token_embedding" => vec![v, d],
            "positional_embedding" => vec![b, d],
            "head" => vec![d, v],
            "wq" | "wk" | "wv" | "wproj" => vec![d, d],
            "w_expand" => vec![d, 4 * d],
            "b_expand" => vec![4 * d],
            "w_contract" => vec![4 * d, d],
            _ => vec![d],
        })
    });
    shapes.expect("infallible")
}

/// Initial value conventions: N(0, 0.02) for matrices and embeddings, ones
/// for norm gains, zeros for biases.
fn init_tensor<F: Scalar>(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let t = if leaf.ends_with("_gain") {
        Tensor::full(shape, F::one())
    } else if shape.len() == 1 {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, INIT_STD, rng)
    };
    t.with_requires_grad(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gpt<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
}

impl<F: Scalar> Gpt<F> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(&config).map(|name, shape| init_tensor(name, shape, rng));
        Ok(Gpt { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.blocks.len() != params.blocks.len() {
            return Err(Error::Config(format!(
                "config has {} blocks, params have {}",
                expected.blocks.len(),
                params.blocks.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.entries().into_iter().zip(params.entries()) {
            if shape.as_slice() != t.shape() {
                return Err(Error::CheckpointShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
        }
        Ok(Gpt { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same weights in another storage width.
    pub fn cast<G: Scalar>(&self) -> Gpt<G> {
        Gpt {
            config: self.config.clone(),
            params: self.params.map(|_, t| t.cast()),
        }
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<F>) -> Params<Var> {
        self.params.map(|_, t| tape.leaf(t))
    }

    fn check_tokens(&self, seq: &[TokenId]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if seq.len() > self.config.block_size {
            return Err(Error::ContextLength {
                len: seq.len(),
                block_size: self.config.block_size,
            });
        }
        if let Some(t) = seq.iter().find(|t| t.index() >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: t.index(),
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward pass of equal-length sequences on an existing tape; returns
    /// logits of shape `[batch·seq × vocab]`, row `b·seq + t` scoring the
    /// token after position `t` of sequence `b`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Params<Var>,
        batch: &[&[TokenId]],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let seq = first.len();
        for s in batch {
            self.check_tokens(s)?;
            if s.len() != seq {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    left: vec![seq],
                    right: vec![s.len()],
                });
            }
        }
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|t| t.index())).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(bound.token_embedding, &ids)?;
        let pos = tape.embedding(bound.positional_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = tape.dropout(x, self.config.dropout_p, mode, rng)?;
        for block in &bound.blocks {
            x = attention_block(tape, block, x, batch.len(), seq, &self.config, mode, rng)?;
        }
        let x = tape.layer_norm(x, bound.final_ln_gain, bound.final_ln_bias, LAYER_NORM_EPS)?;
        tape.matmul(x, bound.head)
    }

    /// Logits `[T × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[TokenId], mode: Mode, rng: &mut impl Rng) -> Result<Tensor<F>> {
        self.forward_batch(&[tokens], mode, rng)
    }

    /// Logits `[batch·T × vocab]` for equal-length sequences.
    pub fn forward_batch(
        &self,
        batch: &[&[TokenId]],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_tape(&mut tape, &bound, batch, mode, rng)?;
        Ok(tape.value(out).clone())
    }

    /// Adds the tape's gradients into each parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, bound: &Params<Var>) -> Result<()> {
        for ((_, t), (_, v)) in self.params.entries_mut().into_iter().zip(bound.entries()) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params.entries_mut() {
            t.zero_grad();
        }
    }
}

/// One pre-norm attention block over `[batch·seq × d_model]` activations.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<F: Scalar>(
    tape: &mut Tape<F>,
    p: &Block<Var>,
    x: Var,
    batch: usize,
    seq: usize,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS)?;
    let q = linear(tape, h, p.wq, p.bq)?;
    let k = linear(tape, h, p.wk, p.bk)?;
    let v = linear(tape, h, p.wv, p.bv)?;
    let att = tape.causal_attention(q, k, v, batch, seq, config.n_heads)?;
    let proj = linear(tape, att, p.wproj, p.bproj)?;
    let proj = tape.dropout(proj, config.dropout_p, mode, rng)?;
    let x = tape.add(x, proj)?;

    let h = tape.layer_norm(x, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS)?;
    let h = linear(tape, h, p.w_expand, p.b_expand)?;
    let h = tape.relu(h);
    let h = linear(tape, h, p.w_contract, p.b_contract)?;
    let h = tape.dropout(h, config.dropout_p, mode, rng)?;
    tape.add(x, h)
}

fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            block_size: 4,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            dropout_p: 0.0,
        }
    }

    #[test]
    fn default_count_by_hand() {
        // token 402·128 + position 256·128 + 4 blocks + final norm 2·128 + head 128·402
        let per_block = 2 * 128 + 4 * (128 * 128 + 128) + 2 * 128 + (128 * 512 + 512) + (512 * 128 + 128);
        assert_eq!(per_block, 198_272);
        let expected = 51_456 + 32_768 + 4 * per_block + 256 + 51_456;
        assert_eq!(expected, 929_024);
        let cfg = ModelConfig::default();
        assert_eq!(count_params(&cfg), expected);
        assert!((910_000..=950_000).contains(&count_params(&cfg)));
        let model = Gpt::<f32>::new(cfg, &mut rng(0)).unwrap();
        assert_eq!(model.num_params(), expected);
    }

    #[test]
    fn smallest_config_count_by_hand() {
        let cfg = ModelConfig {
            vocab_size: 2,
            block_size: 1,
            d_model: 2,
            n_blocks: 1,
            n_heads: 1,
            dropout_p: 0.0,
        };
        // tok 4 + pos 2 + block (norms 8, attn 4·6=24, expand 2·8+8=24, contract 8·2+2=18) + final 4 + head 4
        assert_eq!(count_params(&cfg), 4 + 2 + (8 + 24 + 24 + 18) + 4 + 4);
    }

    #[test]
    fn count_is_linear_in_blocks() {
        let mut cfg = ModelConfig::default();
        let base = count_params(&cfg);
        cfg.n_blocks *= 2;
        assert_eq!(count_params(&cfg) - base, 4 * cfg.block_param_count());
    }

    #[test]
    fn config_validation() {
        let cfg = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig { vocab_size: 1, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_token_forward() {
        let model = Gpt::<f32>::new(ModelConfig::default(), &mut rng(1)).unwrap();
        let logits = model.forward(&[TokenId(200)], Mode::Eval, &mut rng(2)).unwrap();
        assert_eq!(logits.shape(), &[1, 402]);
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(logits);
        let p = tape.softmax(l).unwrap();
        let s: f64 = tape.value(p).data().iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let model = Gpt::<f32>::new(tiny(), &mut rng(3)).unwrap();
        let too_long = vec![TokenId(1); 5];
        assert!(matches!(
            model.forward(&too_long, Mode::Eval, &mut rng(0)),
            Err(Error::ContextLength { len: 5, block_size: 4 })
        ));
        assert!(matches!(
            model.forward(&[TokenId(11)], Mode::Eval, &mut rng(0)),
            Err(Error::IndexOutOfRange { index: 11, bound: 11 })
        ));
    }

    #[test]
    fn earlier_positions_ignore_later_tokens() {
        let cfg = ModelConfig {
            vocab_size: 31,
            block_size: 12,
            d_model: 16,
            n_blocks: 2,
            n_heads: 4,
            dropout_p: 0.2,
        };
        let model = Gpt::<f32>::new(cfg, &mut rng(4)).unwrap();
        let base: Vec<TokenId> = (0..12).map(|i| TokenId((i * 7 % 31) as u16)).collect();
        let ref_logits = model.forward(&base, Mode::Eval, &mut rng(0)).unwrap();
        for j in 0..12 {
            let mut pert = base.clone();
            pert[j] = TokenId(((base[j].0 as usize + 5) % 31) as u16);
            let out = model.forward(&pert, Mode::Eval, &mut rng(0)).unwrap();
            for i in 0..j {
                assert_eq!(out.row(i), ref_logits.row(i), "position {i} changed when {j} moved");
            }
            assert_ne!(out.row(j), ref_logits.row(j));
        }
    }

    #[test]
    fn batched_rows_match_single_sequences() {
        let model = Gpt::<f32>::new(tiny(), &mut rng(5)).unwrap();
        let a = [TokenId(1), TokenId(4), TokenId(9)];
        let b = [TokenId(3), TokenId(3), TokenId(0)];
        let batched = model.forward_batch(&[&a, &b], Mode::Eval, &mut rng(0)).unwrap();
        let sa = model.forward(&a, Mode::Eval, &mut rng(0)).unwrap();
        let sb = model.forward(&b, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(&batched.data()[..33], sa.data());
        assert_eq!(&batched.data()[33..], sb.data());
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_is_not() {
        let mut cfg = tiny();
        cfg.dropout_p = 0.5;
        let model = Gpt::<f32>::new(cfg, &mut rng(6)).unwrap();
        let toks = [TokenId(2), TokenId(5)];
        let e1 = model.forward(&toks, Mode::Eval, &mut rng(1)).unwrap();
        let e2 = model.forward(&toks, Mode::Eval, &mut rng(2)).unwrap();
        assert_eq!(e1, e2);
        let t1 = model.forward(&toks, Mode::Train, &mut rng(1)).unwrap();
        let t2 = model.forward(&toks, Mode::Train, &mut rng(2)).unwrap();
        assert_ne!(t1, t2);
        let t3 = model.forward(&toks, Mode::Train, &mut rng(1)).unwrap();
        assert_eq!(t1, t3);
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            vocab_size: 11,
            block_size: 3,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            dropout_p: 0.0,
        };
        let mut r = rng(7);
        let shapes = param_shapes(&cfg);
        let block: Vec<Tensor<f64>> = shapes.blocks[0]
            .entries()
            .iter()
            .map(|(_, s)| Tensor::randn(s, 0.3, &mut r).with_requires_grad(true))
            .collect();
        let mut inputs = vec![Tensor::<f64>::randn(&[3, 8], 1.0, &mut r).with_requires_grad(true)];
        inputs.extend(block);
        let w = Tensor::<f64>::randn(&[3, 8], 1.0, &mut r);
        let err = crate::gradcheck::check_gradients(&inputs, 1e-3, |tape, vs| {
            let mut it = vs[1..].iter().copied();
            let bp: std::result::Result<Block<Var>, ()> = Block::try_build(|_| Ok(it.next().unwrap()));
            let bp = bp.unwrap();
            let y = attention_block(tape, &bp, vs[0], 1, 3, &cfg, Mode::Eval, &mut rng(0)).unwrap();
            let c = tape.constant(w.clone());
            let z = tape.mul(y, c).unwrap();
            tape.sum(z)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn whole_model_f32_gradient() {
        let err = crate::gradcheck::model_gradient_error();
        assert!(err < 1e-2, "{err}");
    }
}
