//! Convolutional sentence-pair classifier.
//!
//! A pair `(x, y)` becomes an `L x L` image whose cell `(i, j)` holds
//! `[emb(x_i); emb(y_j)]` as channels. Two blocks of
//! `conv 3x3 + sigmoid -> batch norm -> max-pool 2x2` feed a sigmoid MLP and
//! a single sigmoid output, the probability that the pair is a human
//! translation.
//!
//! The embedding tables are frozen: they live outside the trainable store,
//! so no update can touch them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::generator::{Generator, INIT_RANGE};
use crate::tensor::{
    meta_field, nesterov_step, pooled_len, ArrayContainer, BatchStats, NormMode, ParamId,
    ParameterStore, RunningStats, Tape, Tensor, Var,
};

pub const DEFAULT_FEATURES: usize = 20;
pub const DEFAULT_MLP_HIDDEN: usize = 20;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Where the frozen embedding tables come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    /// Copies of the generator's (warm-start) tables.
    Shared,
    /// Random tables drawn at construction, then frozen.
    Independent,
}

impl std::str::FromStr for EmbeddingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(EmbeddingSource::Shared),
            "independent" => Ok(EmbeddingSource::Independent),
            other => Err(Error::Config(format!("unknown embedding source `{other}`"))),
        }
    }
}

impl std::fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingSource::Shared => "shared",
            EmbeddingSource::Independent => "independent",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversaryConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    /// Side length of the pair image; longer sentences are truncated.
    pub image_len: usize,
    pub features: usize,
    pub mlp_hidden: usize,
    pub bn_momentum: f64,
    pub embeddings: EmbeddingSource,
}

impl AdversaryConfig {
    /// Config matching a generator's vocabularies and embedding size.
    pub fn for_generator(g: &Generator, image_len: usize) -> Self {
        let gc = g.config();
        AdversaryConfig {
            src_vocab: gc.src_vocab,
            tgt_vocab: gc.tgt_vocab,
            emb_dim: gc.emb_dim,
            image_len,
            features: DEFAULT_FEATURES,
            mlp_hidden: DEFAULT_MLP_HIDDEN,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            embeddings: EmbeddingSource::Shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_len == 0 || self.features == 0 || self.mlp_hidden == 0 || self.emb_dim == 0 {
            return Err(Error::Config(
                "adversary image length, features, MLP size and embedding dim must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn momentum {} outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }

    /// Side length of the final feature map.
    pub fn final_len(&self) -> usize {
        pooled_len(pooled_len(self.image_len))
    }

    fn flat_dim(&self) -> usize {
        self.features * self.final_len() * self.final_len()
    }

    fn to_meta(self) -> String {
        format!(
            "kind = adversary\nsrc_vocab = {}\ntgt_vocab = {}\nemb_dim = {}\nimage_len = {}\nfeatures = {}\nmlp_hidden = {}\nbn_momentum = {}\nembeddings = {}\n",
            self.src_vocab,
            self.tgt_vocab,
            self.emb_dim,
            self.image_len,
            self.features,
            self.mlp_hidden,
            self.bn_momentum,
            self.embeddings
        )
    }
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    conv1_w: ParamId,
    conv1_b: ParamId,
    bn1_scale: ParamId,
    bn1_shift: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    bn2_scale: ParamId,
    bn2_shift: ParamId,
    mlp_w: ParamId,
    mlp_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Forward result over a batch of pairs.
#[derive(Clone, Debug)]
pub struct Discrimination {
    /// `[N]` probabilities.
    pub probs: Var,
    /// Batch statistics of both norm layers (train mode only).
    pub stats: Option<[BatchStats; 2]>,
}

/// Metrics of one adversary update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversaryStep {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
}

/// A sentence pair as token slices.
pub type PairRef<'a> = (&'a [TokenId], &'a [TokenId]);

#[derive(Clone, Debug)]
pub struct Adversary {
    config: AdversaryConfig,
    params: ParameterStore,
    ids: Ids,
    running: [RunningStats; 2],
    src_emb: Tensor,
    tgt_emb: Tensor,
}

impl Adversary {
    /// New adversary whose frozen embeddings come from `generator` (or are
    /// drawn at random for [`EmbeddingSource::Independent`]).
    pub fn new(config: AdversaryConfig, generator: &Generator, seed: u64) -> Result<Self> {
        let gc = generator.config();
        for (what, want, have) in [
            ("source vocabulary", config.src_vocab, gc.src_vocab),
            ("target vocabulary", config.tgt_vocab, gc.tgt_vocab),
            ("embedding dim", config.emb_dim, gc.emb_dim),
        ] {
            if want != have {
                return Err(Error::DimMismatch {
                    what: format!("adversary {what} vs generator"),
                    expected: want,
                    found: have,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (src_emb, tgt_emb) = match config.embeddings {
            EmbeddingSource::Shared => (
                generator.source_embeddings().clone(),
                generator.target_embeddings().clone(),
            ),
            EmbeddingSource::Independent => {
                let mut draw = |rows: usize| {
                    let vals = (0..rows * config.emb_dim)
                        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
                        .collect();
                    Tensor::new(&[rows, config.emb_dim], vals)
                };
                (draw(config.src_vocab)?, draw(config.tgt_vocab)?)
            }
        };
        let mut d = Self::with_embeddings(config, src_emb, tgt_emb)?;
        for p in d.params.iter_mut() {
            if p.name.starts_with("bn") {
                continue;
            }
            for v in p.value.data_mut() {
                *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        Ok(d)
    }

    /// Adversary with zero weights, unit norm scales and the given tables.
    pub fn with_embeddings(config: AdversaryConfig, src_emb: Tensor, tgt_emb: Tensor) -> Result<Self> {
        config.validate()?;
        for (what, t, rows) in [("source", &src_emb, config.src_vocab), ("target", &tgt_emb, config.tgt_vocab)] {
            if t.shape() != [rows, config.emb_dim] {
                return Err(Error::Shape {
                    op: if what == "source" { "source embeddings" } else { "target embeddings" },
                    left: t.shape().to_vec(),
                    right: vec![rows, config.emb_dim],
                });
            }
        }
        let (c, f, m) = (2 * config.emb_dim, config.features, config.mlp_hidden);
        let mut s = ParameterStore::new();
        let ids = Ids {
            conv1_w: s.add("conv1.w", Tensor::zeros(&[f, c, 3, 3])),
            conv1_b: s.add("conv1.b", Tensor::zeros(&[f])),
            bn1_scale: s.add("bn1.scale", Tensor::filled(&[f], 1.0)),
            bn1_shift: s.add("bn1.shift", Tensor::zeros(&[f])),
            conv2_w: s.add("conv2.w", Tensor::zeros(&[f, f, 3, 3])),
            conv2_b: s.add("conv2.b", Tensor::zeros(&[f])),
            bn2_scale: s.add("bn2.scale", Tensor::filled(&[f], 1.0)),
            bn2_shift: s.add("bn2.shift", Tensor::zeros(&[f])),
            mlp_w: s.add("mlp.w", Tensor::zeros(&[config.flat_dim(), m])),
            mlp_b: s.add("mlp.b", Tensor::zeros(&[m])),
            out_w: s.add("out.w", Tensor::zeros(&[m, 1])),
            out_b: s.add("out.b", Tensor::zeros(&[1])),
        };
        let running = [
            RunningStats::new(f, config.bn_momentum),
            RunningStats::new(f, config.bn_momentum),
        ];
        Ok(Adversary {
            config,
            params: s,
            ids,
            running,
            src_emb,
            tgt_emb,
        })
    }

    pub fn config(&self) -> &AdversaryConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats; 2] {
        &self.running
    }

    pub fn source_embeddings(&self) -> &Tensor {
        &self.src_emb
    }

    pub fn target_embeddings(&self) -> &Tensor {
        &self.tgt_emb
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[BatchStats; 2]) {
        self.running[0].update(&stats[0]);
        self.running[1].update(&stats[1]);
    }

    fn embedding_row(table: &Tensor, id: TokenId) -> Result<&[f64]> {
        let size = table.shape()[0];
        if id as usize >= size {
            return Err(Error::TokenOutOfRange { id, size });
        }
        Ok(table.row(id as usize))
    }

    /// Layer-0 feature map `[2E, L, L]` of one pair, written into `out`.
    fn fill_image(&self, x: &[TokenId], y: &[TokenId], out: &mut [f64]) -> Result<()> {
        let (e, l) = (self.config.emb_dim, self.config.image_len);
        let plane = l * l;
        let pad = vec![0.0; e];
        let lookup = |table: &Tensor, seq: &[TokenId], pos: usize| -> Result<Vec<f64>> {
            match seq.get(pos) {
                Some(&t) if t != PAD => Ok(Self::embedding_row(table, t)?.to_vec()),
                _ => Ok(pad.clone()),
            }
        };
        for i in 0..l {
            let ex = lookup(&self.src_emb, x, i)?;
            for j in 0..l {
                let cell = i * l + j;
                for (k, v) in ex.iter().enumerate() {
                    out[k * plane + cell] = *v;
                }
            }
        }
        for j in 0..l {
            let ey = lookup(&self.tgt_emb, y, j)?;
            for i in 0..l {
                let cell = i * l + j;
                for (k, v) in ey.iter().enumerate() {
                    out[(e + k) * plane + cell] = *v;
                }
            }
        }
        Ok(())
    }

    /// `[2E, L, L]` pair image: channels `0..E` hold `emb(x_i)` on row `i`,
    /// channels `E..2E` hold `emb(y_j)` on column `j`. Positions past the
    /// end of a sentence (and PAD tokens) are zero vectors; tokens past
    /// `image_len` are dropped.
    pub fn build_pair_image(&self, x: &[TokenId], y: &[TokenId]) -> Result<Tensor> {
        let (e, l) = (self.config.emb_dim, self.config.image_len);
        let mut data = vec![0.0; 2 * e * l * l];
        self.fill_image(x, y, &mut data)?;
        Tensor::new(&[2 * e, l, l], data)
    }

    fn batch_image(&self, pairs: &[PairRef<'_>]) -> Result<Tensor> {
        let (e, l) = (self.config.emb_dim, self.config.image_len);
        let per = 2 * e * l * l;
        let mut data = vec![0.0; per * pairs.len()];
        for (n, (x, y)) in pairs.iter().enumerate() {
            if x.is_empty() || y.is_empty() {
                return Err(Error::Empty("adversary input sentence"));
            }
            self.fill_image(x, y, &mut data[n * per..(n + 1) * per])?;
        }
        Tensor::new(&[pairs.len(), 2 * e, l, l], data)
    }

    /// `D(x, y)` for every pair in the batch. Train mode normalizes with the
    /// batch statistics (and needs at least two pairs); the caller decides
    /// whether to fold them into the running estimates.
    pub fn discriminate(&self, tape: &mut Tape, pairs: &[PairRef<'_>], mode: NormMode) -> Result<Discrimination> {
        if pairs.is_empty() {
            return Err(Error::Empty("adversary batch"));
        }
        let n = pairs.len();
        let image = tape.constant(self.batch_image(pairs)?);
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let ids = self.ids;
        let mut stats = Vec::new();
        let mut z = image;
        for (layer, (w, b, scale, shift)) in [
            (ids.conv1_w, ids.conv1_b, ids.bn1_scale, ids.bn1_shift),
            (ids.conv2_w, ids.conv2_b, ids.bn2_scale, ids.bn2_shift),
        ]
        .into_iter()
        .enumerate()
        {
            let (w, b, scale, shift) = (p(tape, w), p(tape, b), p(tape, scale), p(tape, shift));
            let conv = tape.conv2d_3x3(z, w, b)?;
            let normed = match mode {
                NormMode::Train => {
                    let (v, s) = tape.batch_norm_train(conv, scale, shift)?;
                    stats.push(s);
                    v
                }
                NormMode::Eval => tape.batch_norm_eval(conv, scale, shift, &self.running[layer])?,
            };
            z = tape.maxpool_2x2(normed)?;
        }
        let flat = tape.reshape(z, &[n, self.config.flat_dim()])?;
        let (mw, mb) = (p(tape, ids.mlp_w), p(tape, ids.mlp_b));
        let hidden = tape.matmul(flat, mw)?;
        let hidden = tape.add_row(hidden, mb)?;
        let hidden = tape.sigmoid(hidden);
        let (ow, ob) = (p(tape, ids.out_w), p(tape, ids.out_b));
        let logit = tape.matmul(hidden, ow)?;
        let logit = tape.add_row(logit, ob)?;
        let prob = tape.sigmoid(logit);
        let probs = tape.reshape(prob, &[n])?;
        let stats = match mode {
            NormMode::Train => {
                let mut it = stats.into_iter();
                Some([it.next().unwrap(), it.next().unwrap()])
            }
            NormMode::Eval => None,
        };
        Ok(Discrimination { probs, stats })
    }

    /// Eval-mode probabilities, one per pair.
    pub fn score_batch(&self, pairs: &[PairRef<'_>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let d = self.discriminate(&mut tape, pairs, NormMode::Eval)?;
        Ok(tape.value(d.probs).data().to_vec())
    }

    /// Eval-mode `D(x, y)`.
    pub fn score(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        Ok(self.score_batch(&[(x, y)])?[0])
    }

    /// Mean cross-entropy with label 1 on `positives` and 0 on `negatives`,
    /// all normalized as one batch. Returns the loss, the probabilities
    /// (positives first) and the batch statistics in train mode.
    pub fn adversary_loss(
        &self,
        tape: &mut Tape,
        positives: &[PairRef<'_>],
        negatives: &[PairRef<'_>],
        mode: NormMode,
    ) -> Result<(Var, Discrimination)> {
        let pairs: Vec<PairRef<'_>> = positives.iter().chain(negatives).copied().collect();
        if pairs.is_empty() {
            return Err(Error::Empty("adversary loss examples"));
        }
        let mut labels = vec![1.0; positives.len()];
        labels.resize(pairs.len(), 0.0);
        let d = self.discriminate(tape, &pairs, mode)?;
        let loss = tape.bce_mean(d.probs, &labels)?;
        Ok((loss, d))
    }

    /// One Nesterov step on the adversary loss. Running statistics are
    /// updated with this batch.
    pub fn train_step(
        &mut self,
        positives: &[PairRef<'_>],
        negatives: &[PairRef<'_>],
        lr: f64,
        momentum: f64,
    ) -> Result<AdversaryStep> {
        let mut tape = Tape::new();
        let (loss, d) = self.adversary_loss(&mut tape, positives, negatives, NormMode::Train)?;
        let grads = tape.backward(loss)?;
        self.params.zero_grad();
        grads.accumulate_into(&mut self.params);
        nesterov_step(&mut self.params, lr, momentum)?;
        if let Some(stats) = &d.stats {
            self.update_running(stats);
        }
        let probs = tape.value(d.probs).data();
        let (pos, neg) = probs.split_at(positives.len());
        Ok(AdversaryStep {
            loss: tape.value(loss).item(),
            accuracy: accuracy(pos, neg),
            mean_pos: mean(pos),
            mean_neg: mean(neg),
        })
    }

    pub fn to_container(&self) -> ArrayContainer {
        let mut c = ArrayContainer::from_store(self.config.to_meta(), &self.params, true);
        for (k, rs) in self.running.iter().enumerate() {
            c.push(format!("running/bn{}.mean", k + 1), Tensor::vector(rs.mean.clone()));
            c.push(format!("running/bn{}.var", k + 1), Tensor::vector(rs.var.clone()));
        }
        c.push("frozen/src_emb", self.src_emb.clone());
        c.push("frozen/tgt_emb", self.tgt_emb.clone());
        c
    }

    pub fn from_container(c: &ArrayContainer) -> Result<Self> {
        let meta = c.meta_map();
        if meta.get("kind").map(String::as_str) != Some("adversary") {
            return Err(Error::Checkpoint("not an adversary checkpoint".into()));
        }
        let config = AdversaryConfig {
            src_vocab: meta_field(&meta, "src_vocab")?,
            tgt_vocab: meta_field(&meta, "tgt_vocab")?,
            emb_dim: meta_field(&meta, "emb_dim")?,
            image_len: meta_field(&meta, "image_len")?,
            features: meta_field(&meta, "features")?,
            mlp_hidden: meta_field(&meta, "mlp_hidden")?,
            bn_momentum: meta_field(&meta, "bn_momentum")?,
            embeddings: meta_field(&meta, "embeddings")?,
        };
        let mut d = Self::with_embeddings(
            config,
            c.require("frozen/src_emb")?.clone(),
            c.require("frozen/tgt_emb")?.clone(),
        )?;
        c.restore_store(&mut d.params)?;
        for (k, rs) in d.running.iter_mut().enumerate() {
            for (field, slot) in [("mean", &mut rs.mean), ("var", &mut rs.var)] {
                let t = c.require(&format!("running/bn{}.{field}", k + 1))?;
                if t.len() != slot.len() {
                    return Err(Error::Checkpoint(format!("running/bn{}.{field} has the wrong length", k + 1)));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&ArrayContainer::load(path)?)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fraction of positives scored above 0.5 and negatives at or below it.
pub fn accuracy(pos: &[f64], neg: &[f64]) -> f64 {
    let total = pos.len() + neg.len();
    if total == 0 {
        return 0.0;
    }
    let right = pos.iter().filter(|&&p| p > 0.5).count() + neg.iter().filter(|&&p| p <= 0.5).count();
    right as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;

    fn setup(image_len: usize) -> (Generator, Adversary) {
        let g = Generator::new(GeneratorConfig::new(8, 8, 3, 4), 1).unwrap();
        let mut cfg = AdversaryConfig::for_generator(&g, image_len);
        cfg.features = 4;
        cfg.mlp_hidden = 5;
        let d = Adversary::new(cfg, &g, 2).unwrap();
        (g, d)
    }

    #[test]
    fn image_cells_hold_both_embeddings() {
        let (g, d) = setup(4);
        let img = d.build_pair_image(&[4, 5, 6], &[7, 4]).unwrap();
        let plane = 16;
        for k in 0..3 {
            assert_eq!(img.data()[k * plane + 4 + 2], g.source_embeddings().at2(5, k));
            assert_eq!(img.data()[(3 + k) * plane + 4 + 1], g.target_embeddings().at2(4, k));
            // column 3 is past the target end
            assert_eq!(img.data()[(3 + k) * plane + 3], 0.0);
        }
    }

    #[test]
    fn swapping_target_words_permutes_columns() {
        let (_, d) = setup(4);
        let a = d.build_pair_image(&[4, 5], &[6, 7]).unwrap();
        let b = d.build_pair_image(&[4, 5], &[7, 6]).unwrap();
        for c in 0..6 {
            for i in 0..4 {
                let at = |t: &Tensor, j: usize| t.data()[c * 16 + i * 4 + j];
                assert_eq!(at(&a, 0), at(&b, 1));
                assert_eq!(at(&a, 1), at(&b, 0));
                assert_eq!(at(&a, 2), at(&b, 2));
            }
        }
    }

    #[test]
    fn pad_target_gives_zero_half() {
        let (_, d) = setup(3);
        let img = d.build_pair_image(&[4, 5, 6], &[PAD, PAD, PAD]).unwrap();
        assert!(img.data()[3 * 9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let (_, mut d) = setup(5);
        for name in ["out.w", "out.b"] {
            let id = d.params.find(name).unwrap();
            d.params.value_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(d.score(&[4, 5], &[6]).unwrap(), 0.5);
    }

    #[test]
    fn eval_is_deterministic_and_in_range() {
        let (_, d) = setup(5);
        let a = d.score_batch(&[(&[4, 5], &[6, 7, 7]), (&[6], &[4])]).unwrap();
        let b = d.score_batch(&[(&[4, 5], &[6, 7, 7]), (&[6], &[4])]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn layer_shapes_follow_pooling() {
        let cfg = AdversaryConfig {
            image_len: 32,
            ..setup(4).1.config
        };
        assert_eq!(cfg.final_len(), 8);
        assert_eq!(AdversaryConfig { image_len: 5, ..cfg }.final_len(), 2);
    }

    #[test]
    fn constant_half_loss_is_ln2() {
        let (_, mut d) = setup(4);
        for name in ["out.w", "out.b"] {
            let id = d.params.find(name).unwrap();
            d.params.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let (loss, _) = d
            .adversary_loss(&mut tape, &[(&[4], &[5])], &[(&[4], &[6])], NormMode::Train)
            .unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);
        assert!(d.adversary_loss(&mut tape, &[], &[], NormMode::Train).is_err());
    }

    #[test]
    fn training_leaves_embeddings_alone() {
        let (_, mut d) = setup(4);
        let (src, tgt) = (d.src_emb.clone(), d.tgt_emb.clone());
        for _ in 0..3 {
            d.train_step(&[(&[4, 5], &[5, 4])], &[(&[4, 5], &[6, 6])], 0.1, 0.9).unwrap();
        }
        assert_eq!(d.src_emb, src);
        assert_eq!(d.tgt_emb, tgt);
    }

    #[test]
    fn checkpoint_round_trip_keeps_running_stats() {
        let (_, mut d) = setup(4);
        d.train_step(&[(&[4, 5], &[5, 4])], &[(&[4, 5], &[6, 6])], 0.1, 0.9).unwrap();
        let back = Adversary::from_container(&ArrayContainer::from_bytes(&d.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.running, d.running);
        assert_eq!(back.params.flat_values(), d.params.flat_values());
        assert_eq!(back.score(&[4], &[5]).unwrap(), d.score(&[4], &[5]).unwrap());
    }

    #[test]
    fn dimension_mismatch_names_both_dims() {
        let (_, d) = setup(4);
        let other = Generator::new(GeneratorConfig::new(8, 8, 5, 4), 0).unwrap();
        let err = Adversary::new(d.config, &other, 0).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('5'), "{err}");
    }
}
