//! Attention encoder-decoder over GRUs.
//!
//! The encoder runs a GRU over the embedded source. At step `t` the decoder
//! attends over the encoder states with its previous state `r_{t-1}`, feeds
//! `[emb(y_{t-1}); c_t]` to its own GRU to get `r_t`, and predicts `y_t` from
//! a linear readout of `[r_t; c_t; emb(y_{t-1})]`.
//!
//! Everything is recorded on a [`Tape`], including sampling and decoding, so
//! the log-probability accumulated while sampling is the same value that
//! teacher forcing produces and can be differentiated directly.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{check_ids, TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::{meta_field, ArrayContainer, ParamId, ParameterStore, Tape, Tensor, Var};

/// Half-width of the uniform parameter initialization.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Source vocabulary size, reserved ids included.
    pub src_vocab: usize,
    /// Target vocabulary size, reserved ids included.
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    /// Reserved for a bidirectional encoder; must be `false`.
    pub bidirectional: bool,
}

impl GeneratorConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize, emb_dim: usize, hidden_dim: usize) -> Self {
        GeneratorConfig {
            src_vocab,
            tgt_vocab,
            emb_dim,
            hidden_dim,
            bidirectional: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bidirectional {
            return Err(Error::Config(
                "bidirectional encoder is not implemented; set bidirectional = false".into(),
            ));
        }
        if self.emb_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embedding and hidden dims must be positive".into()));
        }
        if self.src_vocab == 0 || self.tgt_vocab <= BOS as usize {
            return Err(Error::Config(format!(
                "vocabulary sizes too small (source {}, target {})",
                self.src_vocab, self.tgt_vocab
            )));
        }
        Ok(())
    }

    fn to_meta(self) -> String {
        format!(
            "kind = generator\nsrc_vocab = {}\ntgt_vocab = {}\nemb_dim = {}\nhidden_dim = {}\nbidirectional = {}\n",
            self.src_vocab, self.tgt_vocab, self.emb_dim, self.hidden_dim, self.bidirectional
        )
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_r: ParamId,
    w_z: ParamId,
    w_n: ParamId,
    u_r: ParamId,
    u_z: ParamId,
    u_n: ParamId,
    b_r: ParamId,
    b_z: ParamId,
    b_n: ParamId,
}

impl GruIds {
    fn add(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize) -> Self {
        let mut p = |n: &str, shape: &[usize]| store.add(format!("{prefix}.{n}"), Tensor::zeros(shape));
        GruIds {
            w_r: p("w_r", &[hidden, input]),
            w_z: p("w_z", &[hidden, input]),
            w_n: p("w_n", &[hidden, input]),
            u_r: p("u_r", &[hidden, hidden]),
            u_z: p("u_z", &[hidden, hidden]),
            u_n: p("u_n", &[hidden, hidden]),
            b_r: p("b_r", &[hidden]),
            b_z: p("b_z", &[hidden]),
            b_n: p("b_n", &[hidden]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc: GruIds,
    dec: GruIds,
    att_key: ParamId,
    att_query: ParamId,
    att_bias: ParamId,
    att_v: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Encoder states of one source sentence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[T, hidden]`
    pub states: Var,
    /// Attention keys `states x W_key`, `[T, hidden]`.
    keys: Var,
    /// Last encoder state.
    pub last: Var,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Decoder state after a step: `r_t`, and the context and attention weights
/// used to produce it (absent before the first step).
#[derive(Clone, Copy, Debug)]
pub struct DecodeState {
    pub r: Var,
    pub context: Option<Var>,
    pub attention: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Log-distribution over the target vocabulary.
    pub log_probs: Var,
    pub state: DecodeState,
}

/// Teacher-forced score of a target sequence.
#[derive(Clone, Debug)]
pub struct SequenceScore {
    /// Scalar `sum_t log G(y_t | y_<t, x)`.
    pub total: Var,
    /// Per-step log-probabilities.
    pub steps: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub max_len: usize,
    /// Stop at EOS (included in the output). When `false` exactly `max_len`
    /// tokens are drawn.
    pub stop_at_eos: bool,
}

impl SampleOptions {
    pub fn new(max_len: usize) -> Self {
        SampleOptions {
            max_len,
            stop_at_eos: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Drawn tokens, including the final EOS when one was drawn.
    pub tokens: Vec<TokenId>,
    /// Scalar log-probability of `tokens` on the sampling tape.
    pub log_prob: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParameterStore,
    ids: Ids,
}

impl Generator {
    /// Fresh model with weights drawn uniformly from `[-0.08, 0.08]`.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let mut g = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in g.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        Ok(g)
    }

    /// Model with every weight set to zero.
    pub fn zeros(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let GeneratorConfig {
            src_vocab,
            tgt_vocab,
            emb_dim: e,
            hidden_dim: h,
            ..
        } = config;
        let mut s = ParameterStore::new();
        let src_emb = s.add("src_emb", Tensor::zeros(&[src_vocab, e]));
        let tgt_emb = s.add("tgt_emb", Tensor::zeros(&[tgt_vocab, e]));
        let enc = GruIds::add(&mut s, "enc", e, h);
        let dec = GruIds::add(&mut s, "dec", e + h, h);
        let ids = Ids {
            src_emb,
            tgt_emb,
            enc,
            dec,
            att_key: s.add("att.w_key", Tensor::zeros(&[h, h])),
            att_query: s.add("att.w_query", Tensor::zeros(&[h, h])),
            att_bias: s.add("att.b", Tensor::zeros(&[h])),
            att_v: s.add("att.v", Tensor::zeros(&[h])),
            init_w: s.add("init.w", Tensor::zeros(&[h, h])),
            init_b: s.add("init.b", Tensor::zeros(&[h])),
            out_w: s.add("out.w", Tensor::zeros(&[tgt_vocab, 2 * h + e])),
            out_b: s.add("out.b", Tensor::zeros(&[tgt_vocab])),
        };
        Ok(Generator {
            config,
            params: s,
            ids,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn source_embeddings(&self) -> &Tensor {
        self.params.value(self.ids.src_emb)
    }

    pub fn target_embeddings(&self) -> &Tensor {
        self.params.value(self.ids.tgt_emb)
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn gru(&self, tape: &mut Tape, g: &GruIds, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, hin: Var| -> Result<Var> {
            let (w, u, b) = (self.p(tape, w), self.p(tape, u), self.p(tape, b));
            let wx = tape.matvec(w, x)?;
            let uh = tape.matvec(u, hin)?;
            tape.add_n(&[wx, uh, b])
        };
        let r = gate(tape, g.w_r, g.u_r, g.b_r, h)?;
        let r = tape.sigmoid(r);
        let z = gate(tape, g.w_z, g.u_z, g.b_z, h)?;
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, h)?;
        let n = gate(tape, g.w_n, g.u_n, g.b_n, rh)?;
        let n = tape.tanh(n);
        let keep = tape.one_minus(z);
        let fresh = tape.mul(keep, n)?;
        let carried = tape.mul(z, h)?;
        tape.add(fresh, carried)
    }

    /// Runs the encoder over the (unpadded) source tokens.
    pub fn encode(&self, tape: &mut Tape, source: &[TokenId]) -> Result<EncoderOutput> {
        if source.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        check_ids(source, self.config.src_vocab)?;
        let emb = self.p(tape, self.ids.src_emb);
        let mut h = tape.constant(Tensor::zeros(&[self.config.hidden_dim]));
        let mut states = Vec::with_capacity(source.len());
        for &tok in source {
            let x = tape.row(emb, tok as usize)?;
            h = self.gru(tape, &self.ids.enc, x, h)?;
            states.push(h);
        }
        let states_m = tape.stack_rows(&states)?;
        let w_key = self.p(tape, self.ids.att_key);
        let keys = tape.matmul(states_m, w_key)?;
        Ok(EncoderOutput {
            states: states_m,
            keys,
            last: h,
            mask: vec![true; source.len()],
        })
    }

    /// Encodes a padded row, reading only positions whose mask is set.
    pub fn encode_masked(&self, tape: &mut Tape, row: &[TokenId], mask: &[bool]) -> Result<EncoderOutput> {
        let tokens: Vec<TokenId> = row.iter().zip(mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        self.encode(tape, &tokens)
    }

    /// `r_0 = tanh(W h_last + b)`
    pub fn initial_state(&self, tape: &mut Tape, enc: &EncoderOutput) -> Result<DecodeState> {
        let w = self.p(tape, self.ids.init_w);
        let b = self.p(tape, self.ids.init_b);
        let pre = tape.matvec(w, enc.last)?;
        let pre = tape.add(pre, b)?;
        Ok(DecodeState {
            r: tape.tanh(pre),
            context: None,
            attention: None,
        })
    }

    /// Attention of `r_prev` over the encoder states: returns `(c, alpha)`
    /// with `alpha_i` proportional to `exp(v . tanh(W_key h_i + W_query r_prev + b))`.
    pub fn attend(&self, tape: &mut Tape, enc: &EncoderOutput, r_prev: Var) -> Result<(Var, Var)> {
        let w_q = self.p(tape, self.ids.att_query);
        let b = self.p(tape, self.ids.att_bias);
        let v = self.p(tape, self.ids.att_v);
        let q = tape.matvec(w_q, r_prev)?;
        let q = tape.add(q, b)?;
        let pre = tape.add_row(enc.keys, q)?;
        let pre = tape.tanh(pre);
        let scores = tape.matvec(pre, v)?;
        let alpha = tape.masked_softmax(scores, &enc.mask)?;
        let c = tape.vecmat(alpha, enc.states)?;
        Ok((c, alpha))
    }

    pub fn decode_step(
        &self,
        tape: &mut Tape,
        state: &DecodeState,
        y_prev: TokenId,
        enc: &EncoderOutput,
    ) -> Result<StepOutput> {
        check_ids(&[y_prev], self.config.tgt_vocab)?;
        let (c, alpha) = self.attend(tape, enc, state.r)?;
        let emb = self.p(tape, self.ids.tgt_emb);
        let e = tape.row(emb, y_prev as usize)?;
        let input = tape.concat(&[e, c])?;
        let r = self.gru(tape, &self.ids.dec, input, state.r)?;
        let readout_in = tape.concat(&[r, c, e])?;
        let w = self.p(tape, self.ids.out_w);
        let b = self.p(tape, self.ids.out_b);
        let logits = tape.matvec(w, readout_in)?;
        let logits = tape.add(logits, b)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(StepOutput {
            log_probs,
            state: DecodeState {
                r,
                context: Some(c),
                attention: Some(alpha),
            },
        })
    }

    /// Teacher-forced `log G(target | source)`. `target` is scored exactly
    /// as given, so callers append EOS when the sequence should end.
    pub fn sequence_log_prob(
        &self,
        tape: &mut Tape,
        source: &[TokenId],
        target: &[TokenId],
    ) -> Result<SequenceScore> {
        if target.is_empty() {
            return Err(Error::Empty("target sentence"));
        }
        check_ids(target, self.config.tgt_vocab)?;
        let enc = self.encode(tape, source)?;
        let mut state = self.initial_state(tape, &enc)?;
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(target.len());
        let mut steps = Vec::with_capacity(target.len());
        for &y in target {
            let out = self.decode_step(tape, &state, prev, &enc)?;
            let lp = tape.pick(out.log_probs, y as usize)?;
            steps.push(tape.value(lp).item());
            terms.push(lp);
            state = out.state;
            prev = y;
        }
        let total = tape.add_n(&terms)?;
        Ok(SequenceScore { total, steps })
    }

    /// Ancestral sampling from the full output distribution.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        source: &[TokenId],
        opts: SampleOptions,
        rng: &mut R,
    ) -> Result<Sample> {
        if opts.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let enc = self.encode(tape, source)?;
        let mut state = self.initial_state(tape, &enc)?;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut terms = Vec::new();
        while tokens.len() < opts.max_len {
            let out = self.decode_step(tape, &state, prev, &enc)?;
            let probs: Vec<f64> = tape.value(out.log_probs).data().iter().map(|l| l.exp()).collect();
            let dist = WeightedIndex::new(&probs)
                .map_err(|e| Error::Diverged(format!("invalid output distribution: {e}")))?;
            let y = dist.sample(rng) as TokenId;
            terms.push(tape.pick(out.log_probs, y as usize)?);
            tokens.push(y);
            state = out.state;
            prev = y;
            if opts.stop_at_eos && y == EOS {
                break;
            }
        }
        let log_prob = tape.add_n(&terms)?;
        Ok(Sample { tokens, log_prob })
    }

    /// `log G(target | source)` without keeping a tape around.
    pub fn score(&self, source: &[TokenId], target: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let s = self.sequence_log_prob(&mut tape, source, target)?;
        Ok(tape.value(s.total).item())
    }

    pub fn to_container(&self) -> ArrayContainer {
        ArrayContainer::from_store(self.config.to_meta(), &self.params, false)
    }

    pub fn from_container(c: &ArrayContainer) -> Result<Self> {
        let meta = c.meta_map();
        if meta.get("kind").map(String::as_str) != Some("generator") {
            return Err(Error::Checkpoint("not a generator checkpoint".into()));
        }
        let config = GeneratorConfig {
            src_vocab: meta_field(&meta, "src_vocab")?,
            tgt_vocab: meta_field(&meta, "tgt_vocab")?,
            emb_dim: meta_field(&meta, "emb_dim")?,
            hidden_dim: meta_field(&meta, "hidden_dim")?,
            bidirectional: meta_field(&meta, "bidirectional")?,
        };
        let mut g = Self::zeros(config)?;
        c.restore_store(&mut g.params)?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&ArrayContainer::load(path)?)
    }
}
