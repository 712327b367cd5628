//! Finite-difference checks of the backward passes that training relies on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{Adversary, AdversaryConfig, PairRef};
use crate::data::{with_eos, TokenId, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, SampleOptions};
use crate::tensor::{NormMode, ParameterStore, Tape};
use crate::trainer::surrogate_loss;

/// Five-point central-difference step for the smooth generator losses.
pub const STEP: f64 = 1e-3;
/// Step for the adversary, whose max-pooling is only piecewise smooth: a
/// large step can flip a pooling winner.
pub const POOL_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error of a parameter group.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    Generator,
    Adversary,
    Reinforce,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "generator" => Ok(Scope::Generator),
            "adversary" => Ok(Scope::Adversary),
            "reinforce" => Ok(Scope::Reinforce),
            _ => Err(Error::InvalidArgument(format!(
                "unknown grad-check scope `{s}` (expected all, generator, adversary or reinforce)"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::All => "all",
            Scope::Generator => "generator",
            Scope::Adversary => "adversary",
            Scope::Reinforce => "reinforce",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Perturb every analytic gradient before comparing. Negative control:
    /// a run with this set must fail.
    pub inject_fault: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub scope: Scope,
    pub group: String,
    pub values: usize,
    pub max_rel_err: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::passed)
    }

    /// Largest error within `scope`, or over everything for `Scope::All`.
    pub fn max_rel_err(&self, scope: Scope) -> f64 {
        self.groups
            .iter()
            .filter(|g| scope == Scope::All || g.scope == scope)
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn lines(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|g| {
                format!(
                    "{:<10} {:<14} values={:<5} max_rel_err={:.3e} {}",
                    g.scope.to_string(),
                    g.group,
                    g.values,
                    g.max_rel_err,
                    if g.passed() { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic` (flat, parameter order) against central differences
/// of `value`, one group per named parameter.
fn compare<M>(
    scope: Scope,
    model: &mut M,
    store: fn(&mut M) -> &mut ParameterStore,
    analytic: &[f64],
    value: impl Fn(&M) -> Result<f64>,
    step: f64,
    inject_fault: bool,
) -> Result<Vec<GroupResult>> {
    let ids: Vec<_> = store(model).iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    let mut out = Vec::with_capacity(ids.len());
    let mut offset = 0;
    for (id, name, len) in ids {
        let mut worst = 0.0f64;
        for k in 0..len {
            let orig = store(model).value(id).data()[k];
            let mut at = |delta: f64| -> Result<f64> {
                store(model).value_mut(id).data_mut()[k] = orig + delta;
                value(model)
            };
            // O(h^4) stencil; the two-point rule leaves ~1e-10 absolute
            // error, which swamps gradients near 1e-6
            let numeric = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step);
            store(model).value_mut(id).data_mut()[k] = orig;
            let mut a = analytic[offset + k];
            if inject_fault {
                a = a * 1.01 + 1e-3;
            }
            worst = worst.max(rel_err(a, numeric));
        }
        offset += len;
        out.push(GroupResult {
            scope,
            group: name,
            values: len,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Scales every parameter so activations leave the near-linear regime.
fn spread(store: &mut ParameterStore, factor: f64, skip_prefix: &str) {
    for p in store.iter_mut() {
        if !p.name.starts_with(skip_prefix) {
            p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

const VOCAB: usize = 8;
const EMB: usize = 6;
const HIDDEN: usize = 8;

fn tiny_generator(seed: u64) -> Result<Generator> {
    let mut g = Generator::new(GeneratorConfig::new(VOCAB, VOCAB, EMB, HIDDEN), seed)?;
    spread(g.params_mut(), 6.0, "\u{0}");
    Ok(g)
}

fn random_sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<TokenId> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(NUM_RESERVED..VOCAB) as TokenId).collect()
}

fn check_generator(opts: GradCheckOptions) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut g = tiny_generator(rng.gen())?;
    let x = random_sentence(&mut rng, 2, 5);
    let y = with_eos(&random_sentence(&mut rng, 2, 5));
    let mut tape = Tape::new();
    let s = g.sequence_log_prob(&mut tape, &x, &y)?;
    let analytic = tape.backward(s.total)?.flat_for(g.params());
    compare(
        Scope::Generator,
        &mut g,
        Generator::params_mut,
        &analytic,
        |m| m.score(&x, &y),
        STEP,
        opts.inject_fault,
    )
}

fn check_adversary(opts: GradCheckOptions) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xad);
    let g = tiny_generator(rng.gen())?;
    let cfg = AdversaryConfig {
        features: 4,
        mlp_hidden: 6,
        ..AdversaryConfig::for_generator(&g, 8)
    };
    let mut d = Adversary::new(cfg, &g, rng.gen())?;
    spread(d.params_mut(), 8.0, "bn");
    let sents: Vec<Vec<TokenId>> = (0..12).map(|_| random_sentence(&mut rng, 2, 7)).collect();
    let pos: Vec<PairRef<'_>> = (0..3).map(|i| (sents[i].as_slice(), sents[i + 3].as_slice())).collect();
    let neg: Vec<PairRef<'_>> = (6..9).map(|i| (sents[i].as_slice(), sents[i + 3].as_slice())).collect();
    let mut tape = Tape::new();
    let (loss, _) = d.adversary_loss(&mut tape, &pos, &neg, NormMode::Train)?;
    let analytic = tape.backward(loss)?.flat_for(d.params());
    compare(
        Scope::Adversary,
        &mut d,
        Adversary::params_mut,
        &analytic,
        |m| {
            let mut t = Tape::new();
            let (l, _) = m.adversary_loss(&mut t, &pos, &neg, NormMode::Train)?;
            Ok(t.value(l).item())
        },
        POOL_STEP,
        opts.inject_fault,
    )
}

fn check_reinforce(opts: GradCheckOptions) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5e1f);
    let mut g = tiny_generator(rng.gen())?;
    let sources: Vec<Vec<TokenId>> = (0..2).map(|_| random_sentence(&mut rng, 2, 5)).collect();
    let advantages = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let mut analytic = vec![0.0; g.params().num_values()];
    let mut samples = Vec::new();
    for (x, &adv) in sources.iter().zip(&advantages) {
        let mut tape = Tape::new();
        let s = g.sample(&mut tape, x, SampleOptions::new(6), &mut rng)?;
        let loss = surrogate_loss(&mut tape, s.log_prob, adv, sources.len());
        let grads = tape.backward(loss)?.flat_for(g.params());
        analytic.iter_mut().zip(grads).for_each(|(a, v)| *a += v);
        samples.push(s.tokens);
    }
    compare(
        Scope::Reinforce,
        &mut g,
        Generator::params_mut,
        &analytic,
        |m| {
            let mut total = 0.0;
            for ((x, y), &adv) in sources.iter().zip(&samples).zip(&advantages) {
                total += -adv / sources.len() as f64 * m.score(x, y)?;
            }
            Ok(total)
        },
        STEP,
        opts.inject_fault,
    )
}

/// Runs the finite-difference suites of `scope` on fresh tiny models.
pub fn run(scope: Scope, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut groups = Vec::new();
    if matches!(scope, Scope::All | Scope::Generator) {
        groups.extend(check_generator(opts)?);
    }
    if matches!(scope, Scope::All | Scope::Adversary) {
        groups.extend(check_adversary(opts)?);
    }
    if matches!(scope, Scope::All | Scope::Reinforce) {
        groups.extend(check_reinforce(opts)?);
    }
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parsing() {
        for s in ["all", "generator", "adversary", "reinforce"] {
            assert_eq!(s.parse::<Scope>().unwrap().to_string(), s);
        }
        assert!("decoder".parse::<Scope>().is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert_eq!(rel_err(1e-12, 0.0), 1e-12 / REL_FLOOR);
    }
}
