//! Training stages: MLE warm start, adversary pretraining and the joint
//! loop that mixes policy-gradient and MLE mini-batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{accuracy, Adversary, AdversaryStep, PairRef};
use crate::data::{adversary_input, make_batches, SentencePair, TokenId};
use crate::decode_eval::{corpus_bleu, decode_all};
use crate::error::{Error, Result};
use crate::generator::{Generator, SampleOptions};
use crate::tensor::{sgd_step, Gradients, Tape, Var, PROB_EPS};

/// Exponential moving average of observed rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBaseline {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Self {
        RewardBaseline {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    /// Current baseline; 0 before the first reward.
    pub fn current(&self) -> f64 {
        if self.initialized {
            self.value
        } else {
            0.0
        }
    }

    /// The first reward sets the value; later ones blend in with weight
    /// `1 - decay`.
    pub fn update(&mut self, reward: f64) {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * reward;
        } else {
            self.value = reward;
            self.initialized = true;
        }
    }
}

/// `-ln(1 - D)` with `D` clamped away from 0 and 1. Strictly increasing in `D`.
pub fn reward_from_probability(d: f64) -> f64 {
    -(1.0 - d.clamp(PROB_EPS, 1.0 - PROB_EPS)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Generator learning rate (MLE and policy-gradient steps).
    pub lr_g: f64,
    /// Adversary learning rate.
    pub lr_d: f64,
    pub momentum_d: f64,
    /// Global-norm clip for generator gradients.
    pub clip_g: f64,
    pub batch_size: usize,
    pub d_batch_size: usize,
    /// Probability that a joint-training mini-batch is adversarial.
    pub adv_fraction: f64,
    pub baseline_decay: f64,
    /// Halve `lr_g` every this many epochs (0 disables).
    pub halve_every_epochs: usize,
    /// Beam size used to generate adversary negatives.
    pub neg_beam: usize,
    /// Beam size for dev BLEU.
    pub eval_beam: usize,
    /// One adversary update every this many joint iterations.
    pub d_refresh_every: usize,
    pub epochs: usize,
    pub d_epochs: usize,
    /// Length cap for sampling and decoding.
    pub max_len: usize,
    pub seed: u64,
    /// Stop MLE pretraining after the first epoch whose dev BLEU reaches
    /// this value.
    pub target_dev_bleu: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_g: 0.02,
            lr_d: 0.01,
            momentum_d: 0.9,
            clip_g: 1.0,
            batch_size: 32,
            d_batch_size: 32,
            adv_fraction: 0.5,
            baseline_decay: 0.95,
            halve_every_epochs: 10,
            neg_beam: 4,
            eval_beam: 4,
            d_refresh_every: 1,
            epochs: 10,
            d_epochs: 5,
            max_len: crate::data::DEFAULT_MAX_LEN,
            seed: 1,
            target_dev_bleu: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.adv_fraction) {
            return bad(format!("adv_fraction {} outside [0, 1]", self.adv_fraction));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("clip_g", self.clip_g)] {
            // written this way so NaN is rejected too
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay {} outside [0, 1)", self.baseline_decay));
        }
        if !(0.0..1.0).contains(&self.momentum_d) {
            return bad(format!("momentum_d {} outside [0, 1)", self.momentum_d));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("d_batch_size", self.d_batch_size),
            ("neg_beam", self.neg_beam),
            ("eval_beam", self.eval_beam),
            ("d_refresh_every", self.d_refresh_every),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// Generator learning rate in effect during `epoch` (0-based).
    pub fn lr_g_at(&self, epoch: usize) -> f64 {
        match self.halve_every_epochs {
            0 => self.lr_g,
            k => self.lr_g * 0.5f64.powi((epoch / k) as i32),
        }
    }
}

/// Independent random stream for `(seed, epoch, purpose)`.
fn stream_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64) << 8 | purpose);
    rng
}

const STREAM_SHUFFLE: u64 = 0;
const STREAM_MIX: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

fn epoch_batches(pairs: &[SentencePair], cfg: &TrainingConfig, epoch: usize) -> Result<Vec<Vec<SentencePair>>> {
    let seed = stream_rng(cfg.seed, epoch, STREAM_SHUFFLE).gen::<u64>();
    Ok(make_batches(pairs, cfg.batch_size, Some(seed))?
        .iter()
        .map(|b| b.pairs())
        .collect())
}

/// Runs `f` on every item in parallel, each on its own tape against the
/// current generator, then adds the gradients into it in input order.
fn accumulate_parallel<T: Sync>(
    g: &mut Generator,
    items: &[T],
    f: impl Fn(&T, &Generator) -> Result<(f64, Gradients)> + Sync,
) -> Result<Vec<f64>> {
    let results: Vec<(f64, Gradients)> = {
        let model = &*g;
        items.par_iter().map(|it| f(it, model)).collect::<Result<_>>()?
    };
    let store = g.params_mut();
    store.zero_grad();
    let mut values = Vec::with_capacity(results.len());
    for (v, grads) in results {
        grads.accumulate_into(store);
        values.push(v);
    }
    Ok(values)
}

/// Metrics of one MLE mini-batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MleStep {
    /// Summed negative log-likelihood over the batch.
    pub nll: f64,
    pub tokens: usize,
}

/// One clipped SGD step on `(1/B) sum_i -log G(y_i | x_i)`.
pub fn mle_step(g: &mut Generator, batch: &[SentencePair], lr: f64, clip: f64) -> Result<MleStep> {
    if batch.is_empty() {
        return Err(Error::Empty("MLE batch"));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let nlls = accumulate_parallel(g, batch, |p, model| {
        let mut tape = Tape::new();
        let s = model.sequence_log_prob(&mut tape, &p.source, &p.target_with_eos())?;
        let loss = tape.scale(s.total, -inv_b);
        Ok((-tape.value(s.total).item(), tape.backward(loss)?))
    })?;
    let nll: f64 = nlls.iter().sum();
    if !nll.is_finite() {
        return Err(Error::Diverged(format!("MLE loss is {nll}")));
    }
    sgd_step(g.params_mut(), lr, clip)?;
    Ok(MleStep {
        nll,
        tokens: batch.iter().map(|p| p.target.len() + 1).sum(),
    })
}

/// Per-token negative log-likelihood of `pairs` (EOS included).
pub fn mle_loss(g: &Generator, pairs: &[SentencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let nll: f64 = pairs
        .par_iter()
        .map(|p| g.score(&p.source, &p.target_with_eos()).map(|l| -l))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    let tokens: usize = pairs.iter().map(|p| p.target.len() + 1).sum();
    Ok(nll / tokens as f64)
}

/// Corpus BLEU of beam outputs against the references.
pub fn dev_bleu(g: &Generator, pairs: &[SentencePair], beam: usize, max_len: usize) -> Result<f64> {
    let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    let hyps = decode_all(g, &sources, beam, max_len)?;
    let bodies: Vec<&[TokenId]> = hyps.iter().map(|h| h.body()).collect();
    let refs: Vec<&[TokenId]> = pairs.iter().map(|p| p.target.as_slice()).collect();
    Ok(corpus_bleu(&bodies, &refs)?.bleu)
}

/// Summary of one MLE pretraining epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MleEpoch {
    pub epoch: usize,
    /// Per-token training NLL.
    pub train_loss: f64,
    /// Per-token dev NLL (NaN without a dev set).
    pub dev_loss: f64,
    /// Only computed when a BLEU target is set.
    pub dev_bleu: Option<f64>,
}

impl MleEpoch {
    pub fn dev_perplexity(&self) -> f64 {
        self.dev_loss.exp()
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "epoch={} train_loss={:.6} dev_loss={:.6} dev_ppl={:.4}",
            self.epoch,
            self.train_loss,
            self.dev_loss,
            self.dev_perplexity()
        );
        if let Some(b) = self.dev_bleu {
            s.push_str(&format!(" dev_bleu={b:.2}"));
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MleReport {
    /// Per-token dev NLL before training.
    pub initial_dev_loss: Option<f64>,
    pub epochs: Vec<MleEpoch>,
}

/// MLE warm start. On a non-finite loss or gradient the generator is rolled
/// back to the start of the failing epoch and `Error::Diverged` is returned.
pub fn pretrain_mle(
    g: &mut Generator,
    train: &[SentencePair],
    dev: &[SentencePair],
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&MleEpoch),
) -> Result<MleReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if cfg.target_dev_bleu.is_some() && dev.is_empty() {
        return Err(Error::Config("a dev BLEU target needs a dev set".into()));
    }
    let mut report = MleReport::default();
    if !dev.is_empty() {
        report.initial_dev_loss = Some(mle_loss(g, dev)?);
    }
    for epoch in 0..cfg.epochs {
        let snapshot = g.params().flat_values();
        let lr = cfg.lr_g_at(epoch);
        let (mut nll, mut tokens) = (0.0, 0);
        for batch in epoch_batches(train, cfg, epoch)? {
            match mle_step(g, &batch, lr, cfg.clip_g) {
                Ok(s) => {
                    nll += s.nll;
                    tokens += s.tokens;
                }
                Err(e @ (Error::Diverged(_) | Error::NonFiniteGradient(_))) => {
                    g.params_mut().set_flat_values(&snapshot)?;
                    g.params_mut().zero_grad();
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}: {e}; generator restored to the start of the epoch"
                    )));
                }
                Err(e) => return Err(e),
            }
        }
        let record = MleEpoch {
            epoch,
            train_loss: nll / tokens as f64,
            dev_loss: if dev.is_empty() { f64::NAN } else { mle_loss(g, dev)? },
            dev_bleu: match cfg.target_dev_bleu {
                Some(_) => Some(dev_bleu(g, dev, cfg.eval_beam, cfg.max_len)?),
                None => None,
            },
        };
        on_epoch(&record);
        report.epochs.push(record);
        if let (Some(target), Some(b)) = (cfg.target_dev_bleu, record.dev_bleu) {
            if b >= target {
                break;
            }
        }
    }
    Ok(report)
}

/// Adversary negatives for `pairs`: beam outputs of `g` (EOS stripped).
pub fn generate_negatives(g: &Generator, pairs: &[SentencePair], beam: usize, max_len: usize) -> Result<Vec<Vec<TokenId>>> {
    let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    Ok(decode_all(g, &sources, beam, max_len)?
        .iter()
        .map(|h| adversary_input(&h.tokens))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorReport {
    /// Held-out accuracy before any update.
    pub initial_accuracy: f64,
    /// Mean training loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Held-out accuracy after each epoch.
    pub heldout_accuracy: Vec<f64>,
    /// Fraction of training pairs whose negative equals the reference.
    pub coinciding: f64,
}

impl DiscriminatorReport {
    pub fn final_accuracy(&self) -> f64 {
        self.heldout_accuracy.last().copied().unwrap_or(self.initial_accuracy)
    }
}

fn heldout_accuracy(d: &Adversary, pairs: &[SentencePair], negatives: &[Vec<TokenId>]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let pos: Vec<PairRef<'_>> = pairs.iter().map(|p| (p.source.as_slice(), p.target.as_slice())).collect();
    let neg: Vec<PairRef<'_>> = pairs
        .iter()
        .zip(negatives)
        .map(|(p, n)| (p.source.as_slice(), n.as_slice()))
        .collect();
    let sp = d.score_batch(&pos)?;
    let sn = d.score_batch(&neg)?;
    Ok(accuracy(&sp, &sn))
}

/// Trains the adversary on references (label 1) against beam outputs of the
/// frozen generator (label 0).
pub fn pretrain_discriminator(
    d: &mut Adversary,
    g: &Generator,
    train: &[SentencePair],
    heldout: &[SentencePair],
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<DiscriminatorReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let negatives = generate_negatives(g, train, cfg.neg_beam, cfg.max_len)?;
    let held_neg = generate_negatives(g, heldout, cfg.neg_beam, cfg.max_len)?;
    let same = train.iter().zip(&negatives).filter(|(p, n)| &p.target == *n).count();
    let coinciding = same as f64 / train.len() as f64;
    if same == train.len() {
        log::warn!("every generated negative equals its reference; positives and negatives coincide");
    }
    let mut report = DiscriminatorReport {
        initial_accuracy: heldout_accuracy(d, heldout, &held_neg)?,
        train_loss: Vec::new(),
        heldout_accuracy: Vec::new(),
        coinciding,
    };
    let indexed: Vec<SentencePair> = (0..train.len())
        .map(|i| SentencePair::new(vec![i as TokenId], vec![]))
        .collect();
    for epoch in 0..cfg.d_epochs {
        let seed = stream_rng(cfg.seed, epoch, STREAM_SHUFFLE).gen::<u64>() ^ 0x5eed_d15c;
        let (mut loss, mut steps) = (0.0, 0);
        for batch in make_batches(&indexed, cfg.d_batch_size, Some(seed))? {
            let idx: Vec<usize> = (0..batch.len()).map(|k| batch.source[k][0] as usize).collect();
            let pos: Vec<PairRef<'_>> = idx.iter().map(|&i| (train[i].source.as_slice(), train[i].target.as_slice())).collect();
            let neg: Vec<PairRef<'_>> = idx.iter().map(|&i| (train[i].source.as_slice(), negatives[i].as_slice())).collect();
            loss += d.train_step(&pos, &neg, cfg.lr_d, cfg.momentum_d)?.loss;
            steps += 1;
        }
        let loss = loss / steps as f64;
        let acc = heldout_accuracy(d, heldout, &held_neg)?;
        report.train_loss.push(loss);
        report.heldout_accuracy.push(acc);
        on_epoch(epoch, loss, acc);
    }
    Ok(report)
}

/// Policy-gradient surrogate `-(advantage / batch) * log G(y'|x)`, whose
/// gradient is the single-sample REINFORCE estimate scaled by `1/batch`.
///
/// With advantage `r - b` and `r = -log(1 - D)`, descending this loss is the
/// same direction as descending `log(1 - D) * grad log G` when `b = 0`; the
/// baseline only shifts the reward.
pub fn surrogate_loss(tape: &mut Tape, log_prob: Var, advantage: f64, batch: usize) -> Var {
    tape.scale(log_prob, -advantage / batch as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReinforceMetrics {
    pub mean_reward: f64,
    pub mean_advantage: f64,
    /// Mean `D(x, y')` of the samples.
    pub mean_d: f64,
}

/// One policy-gradient update of the generator against a fixed adversary.
///
/// One sample per source. Advantages use the baseline value before each
/// reward is folded in, in batch order.
pub fn reinforce_step(
    g: &mut Generator,
    d: &Adversary,
    baseline: &mut RewardBaseline,
    batch: &[SentencePair],
    cfg: &TrainingConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ReinforceMetrics> {
    if batch.is_empty() {
        return Err(Error::Empty("policy-gradient batch"));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
    let opts = SampleOptions::new(cfg.max_len);
    let mut samples: Vec<(Tape, Var, Vec<TokenId>)> = {
        let model = &*g;
        batch
            .par_iter()
            .zip(&seeds)
            .map(|(p, &s)| {
                let mut tape = Tape::new();
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let smp = model.sample(&mut tape, &p.source, opts, &mut r)?;
                Ok((tape, smp.log_prob, adversary_input(&smp.tokens)))
            })
            .collect::<Result<_>>()?
    };
    let pairs: Vec<PairRef<'_>> = batch
        .iter()
        .zip(&samples)
        .map(|(p, s)| (p.source.as_slice(), s.2.as_slice()))
        .collect();
    let probs = d.score_batch(&pairs)?;
    let mut advantages = Vec::with_capacity(batch.len());
    let mut total_reward = 0.0;
    for &p in &probs {
        let r = reward_from_probability(p);
        let adv = r - baseline.current();
        if !adv.is_finite() {
            return Err(Error::Diverged(format!("non-finite advantage (D = {p})")));
        }
        baseline.update(r);
        advantages.push(adv);
        total_reward += r;
    }
    let n = batch.len();
    let grads: Vec<Gradients> = samples
        .par_iter_mut()
        .zip(&advantages)
        .map(|((tape, lp, _), &adv)| {
            let loss = surrogate_loss(tape, *lp, adv, n);
            tape.backward(loss)
        })
        .collect::<Result<_>>()?;
    let store = g.params_mut();
    store.zero_grad();
    for gr in &grads {
        gr.accumulate_into(store);
    }
    sgd_step(store, lr, cfg.clip_g)?;
    Ok(ReinforceMetrics {
        mean_reward: total_reward / n as f64,
        mean_advantage: advantages.iter().sum::<f64>() / n as f64,
        mean_d: probs.iter().sum::<f64>() / n as f64,
    })
}

/// Single-sample estimate `-(r - b) grad log G(y'|x)` as a flat vector in
/// parameter order, for a caller-supplied reward. Returns the estimate and
/// the sampled tokens.
pub fn reinforce_estimate(
    g: &Generator,
    source: &[TokenId],
    opts: SampleOptions,
    reward: impl Fn(&[TokenId]) -> f64,
    baseline: Option<&mut RewardBaseline>,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<TokenId>)> {
    let mut tape = Tape::new();
    let s = g.sample(&mut tape, source, opts, rng)?;
    let r = reward(&s.tokens);
    let adv = match baseline {
        Some(b) => {
            let a = r - b.current();
            b.update(r);
            a
        }
        None => r,
    };
    let loss = surrogate_loss(&mut tape, s.log_prob, adv, 1);
    let flat = tape.backward(loss)?.flat_for(g.params());
    Ok((flat, s.tokens))
}

/// Kind of a joint-training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Adversarial,
    Mle,
}

impl std::fmt::Display for StepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepKind::Adversarial => "adv",
            StepKind::Mle => "mle",
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration counter over the whole run.
    pub iteration: usize,
    pub epoch: usize,
    pub kind: StepKind,
    pub reward: Option<f64>,
    pub mle_loss: Option<f64>,
    pub d_pos: Option<f64>,
    pub d_neg: Option<f64>,
    pub d_acc: Option<f64>,
    /// Set on the last iteration of an epoch.
    pub dev_bleu: Option<f64>,
    pub lr_g: f64,
    pub lr_d: f64,
}

/// Field order of [`IterationRecord::to_line`].
pub const METRICS_FIELDS: [&str; 11] = [
    "iter", "epoch", "kind", "reward", "mle_loss", "d_pos", "d_neg", "d_acc", "dev_bleu", "lr_g", "lr_d",
];

impl IterationRecord {
    /// `key=value` pairs in [`METRICS_FIELDS`] order; `-` marks a missing value.
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        format!(
            "iter={} epoch={} kind={} reward={} mle_loss={} d_pos={} d_neg={} d_acc={} dev_bleu={} lr_g={} lr_d={}",
            self.iteration,
            self.epoch,
            self.kind,
            opt(self.reward),
            opt(self.mle_loss),
            opt(self.d_pos),
            opt(self.d_neg),
            opt(self.d_acc),
            self.dev_bleu.map_or_else(|| "-".to_string(), |b| format!("{b:.2}")),
            self.lr_g,
            self.lr_d
        )
    }
}

/// Resumable position of the joint loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Iterations completed so far.
    pub iteration: usize,
    pub baseline: RewardBaseline,
}

impl TrainState {
    pub fn new(cfg: &TrainingConfig) -> Self {
        TrainState {
            epoch: 0,
            iteration: 0,
            baseline: RewardBaseline::new(cfg.baseline_decay),
        }
    }
}

/// Receives metrics and epoch boundaries from [`adversarial_train`].
pub trait TrainObserver {
    fn iteration(&mut self, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each epoch with the state to resume from.
    fn epoch_end(&mut self, _g: &Generator, _d: &Adversary, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects records in memory.
impl TrainObserver for Vec<IterationRecord> {
    fn iteration(&mut self, record: &IterationRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialReport {
    pub dev_bleu: Vec<f64>,
    pub state: TrainState,
}

/// Joint training from `state` (or from scratch) until `cfg.epochs`.
///
/// Each mini-batch is adversarial with probability `adv_fraction` (a
/// Bernoulli draw on its own random stream), otherwise an MLE step. Every
/// `d_refresh_every` iterations the adversary takes one step on the
/// batch's references against fresh beam outputs of the current generator.
/// The shuffle stream and learning-rate schedule match [`pretrain_mle`], so
/// with `adv_fraction = 0` the generator follows pure MLE training exactly.
pub fn adversarial_train(
    g: &mut Generator,
    d: &mut Adversary,
    train: &[SentencePair],
    dev: &[SentencePair],
    cfg: &TrainingConfig,
    state: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<AdversarialReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(cfg));
    let mut report = AdversarialReport {
        dev_bleu: Vec::new(),
        state,
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr_g = cfg.lr_g_at(epoch);
        let mut mix = stream_rng(cfg.seed, epoch, STREAM_MIX);
        let mut sampling = stream_rng(cfg.seed, epoch, STREAM_SAMPLE);
        let batches = epoch_batches(train, cfg, epoch)?;
        let mut d_accs = Vec::new();
        let last = batches.len() - 1;
        for (b, batch) in batches.iter().enumerate() {
            state.iteration += 1;
            let adversarial = mix.gen_bool(cfg.adv_fraction);
            let mut rec = IterationRecord {
                iteration: state.iteration,
                epoch,
                kind: if adversarial { StepKind::Adversarial } else { StepKind::Mle },
                reward: None,
                mle_loss: None,
                d_pos: None,
                d_neg: None,
                d_acc: None,
                dev_bleu: None,
                lr_g,
                lr_d: cfg.lr_d,
            };
            if adversarial {
                let m = reinforce_step(g, d, &mut state.baseline, batch, cfg, lr_g, &mut sampling)?;
                rec.reward = Some(m.mean_reward);
            } else {
                let s = mle_step(g, batch, lr_g, cfg.clip_g)?;
                rec.mle_loss = Some(s.nll / s.tokens as f64);
            }
            if state.iteration % cfg.d_refresh_every == 0 {
                let AdversaryStep {
                    accuracy, mean_pos, mean_neg, ..
                } = refresh_adversary(d, g, batch, cfg)?;
                rec.d_pos = Some(mean_pos);
                rec.d_neg = Some(mean_neg);
                rec.d_acc = Some(accuracy);
                d_accs.push(accuracy);
            }
            if b == last && !dev.is_empty() {
                let bleu = dev_bleu(g, dev, cfg.eval_beam, cfg.max_len)?;
                rec.dev_bleu = Some(bleu);
                report.dev_bleu.push(bleu);
            }
            observer.iteration(&rec)?;
        }
        if !d_accs.is_empty() && d_accs.iter().all(|&a| a < 0.5) {
            log::warn!("adversary accuracy below 0.5 for all of epoch {epoch}");
        }
        state.epoch += 1;
        observer.epoch_end(g, d, &state)?;
    }
    report.state = state;
    Ok(report)
}

/// One adversary step on `batch` references against current beam outputs.
fn refresh_adversary(d: &mut Adversary, g: &Generator, batch: &[SentencePair], cfg: &TrainingConfig) -> Result<AdversaryStep> {
    let negatives = generate_negatives(g, batch, cfg.neg_beam, cfg.max_len)?;
    let pos: Vec<PairRef<'_>> = batch.iter().map(|p| (p.source.as_slice(), p.target.as_slice())).collect();
    let neg: Vec<PairRef<'_>> = batch
        .iter()
        .zip(&negatives)
        .map(|(p, n)| (p.source.as_slice(), n.as_slice()))
        .collect();
    d.train_step(&pos, &neg, cfg.lr_d, cfg.momentum_d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_updates() {
        let mut b = RewardBaseline::new(0.9);
        assert_eq!(b.current(), 0.0);
        b.update(0.7);
        assert_eq!(b.current(), 0.7);
        let mut b = RewardBaseline {
            value: 1.0,
            decay: 0.9,
            initialized: true,
        };
        b.update(0.0);
        assert!((b.current() - 0.9).abs() < 1e-15);
        for _ in 0..2000 {
            b.update(0.25);
        }
        assert!((b.current() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reward_is_increasing_in_d() {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=100 {
            let r = reward_from_probability(k as f64 / 100.0);
            assert!(r.is_finite());
            if k > 0 && k < 100 {
                assert!(r > prev);
            }
            prev = r;
        }
        assert!((reward_from_probability(0.5) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_halves() {
        let cfg = TrainingConfig {
            lr_g: 0.8,
            halve_every_epochs: 2,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..5).map(|e| cfg.lr_g_at(e)).collect();
        assert_eq!(lrs, vec![0.8, 0.8, 0.4, 0.4, 0.2]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        for bad in [
            TrainingConfig { adv_fraction: 1.5, ..Default::default() },
            TrainingConfig { lr_g: 0.0, ..Default::default() },
            TrainingConfig { batch_size: 0, ..Default::default() },
            TrainingConfig { baseline_decay: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn metrics_line_field_order() {
        let rec = IterationRecord {
            iteration: 3,
            epoch: 0,
            kind: StepKind::Mle,
            reward: None,
            mle_loss: Some(1.5),
            d_pos: Some(0.75),
            d_neg: Some(0.25),
            d_acc: Some(1.0),
            dev_bleu: None,
            lr_g: 0.5,
            lr_d: 0.01,
        };
        let line = rec.to_line();
        let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
        assert_eq!(keys, METRICS_FIELDS);
        assert!(line.contains("kind=mle reward=- mle_loss=1.500000"));
    }
}
