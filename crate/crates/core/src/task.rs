//! Synthetic verifiable-reward tasks.
//!
//! A task applies one rule from a small family of token-sequence
//! transformations. Every rule owns a window of the content alphabet and the
//! windows overlap. The rule of a query is a fixed function of the query:
//! among the rules whose window holds every query token, the first query
//! token picks one. The answer is therefore unique, but the assignment is
//! hard to learn from bare queries, while a single demonstration of the same
//! rule reveals it. Reserved marker tokens sit at the top of the vocabulary:
//!
//! ```text
//! content ids: 0 .. V-3     QRY = V-3     SEP = V-2     EOS = V-1
//! ```
//!
//! The instance space of every rule is split by a fixed hash into three
//! disjoint parts: training prompts, demonstration bank, held-out evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{IcpoError, Result};
use crate::rng::{derive_seed, rng_from, stream};

pub type Token = usize;

/// Number of reserved marker ids at the top of the vocabulary.
pub const RESERVED_TOKENS: usize = 3;

/// Draws used at construction to check that each split is non-empty.
const SPLIT_PROBE_DRAWS: usize = 100_000;

/// Vocabulary layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size <= RESERVED_TOKENS + 1 {
            return Err(IcpoError::Config(format!(
                "vocabulary of {size} leaves no room for content tokens"
            )));
        }
        Ok(Self { size })
    }

    /// Size of the content alphabet that rules operate on.
    pub fn alphabet(&self) -> usize {
        self.size - RESERVED_TOKENS
    }

    pub fn qry(&self) -> Token {
        self.size - 3
    }

    pub fn sep(&self) -> Token {
        self.size - 2
    }

    pub fn eos(&self) -> Token {
        self.size - 1
    }

    pub fn is_reserved(&self, t: Token) -> bool {
        t >= self.alphabet()
    }
}

/// A hidden transformation from query to answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rule {
    Reverse,
    /// Left rotation by `r` positions.
    Rotate(usize),
    /// Adds `c` to every token modulo the alphabet size.
    AddMod(usize),
    /// Maps every token through a fixed permutation of the alphabet, drawn
    /// from the given seed when the family is built.
    Permute {
        seed: u64,
        table: Vec<Token>,
    },
}

impl Rule {
    /// Applies the rule over an alphabet of `modulus` tokens.
    pub fn apply(&self, query: &[Token], modulus: usize) -> Vec<Token> {
        match self {
            Rule::Reverse => query.iter().rev().copied().collect(),
            Rule::Rotate(r) => {
                if query.is_empty() {
                    return Vec::new();
                }
                let r = r % query.len();
                query[r..].iter().chain(&query[..r]).copied().collect()
            }
            Rule::AddMod(c) => query.iter().map(|&t| (t + c) % modulus).collect(),
            Rule::Permute { table, .. } => query.iter().map(|&t| table[t % table.len()]).collect(),
        }
    }

    /// Materialises a permutation rule over `alphabet` tokens.
    pub fn permutation(seed: u64, alphabet: usize) -> Self {
        let mut table: Vec<Token> = (0..alphabet).collect();
        table.shuffle(&mut rng_from(derive_seed(
            seed,
            &[stream::BANK, alphabet as u64],
        )));
        Rule::Permute { seed, table }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Reverse => write!(f, "reverse"),
            Rule::Rotate(r) => write!(f, "rotate:{r}"),
            Rule::AddMod(c) => write!(f, "add:{c}"),
            Rule::Permute { seed, .. } => write!(f, "perm:{seed}"),
        }
    }
}

/// Textual rule spec as it appears in configuration files, e.g. `"add:3"`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RuleSpec {
    Reverse,
    Rotate(usize),
    AddMod(usize),
    Permute(u64),
}

impl FromStr for RuleSpec {
    type Err = IcpoError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = |a: Option<&str>| -> Result<u64> {
            a.ok_or_else(|| IcpoError::Config(format!("rule '{s}' needs an argument")))?
                .parse::<u64>()
                .map_err(|e| IcpoError::Config(format!("rule '{s}': {e}")))
        };
        match name {
            "reverse" if arg.is_none() => Ok(RuleSpec::Reverse),
            "rotate" => Ok(RuleSpec::Rotate(num(arg)? as usize)),
            "add" => Ok(RuleSpec::AddMod(num(arg)? as usize)),
            "perm" => Ok(RuleSpec::Permute(num(arg)?)),
            _ => Err(IcpoError::Config(format!("unknown rule '{s}'"))),
        }
    }
}

impl RuleSpec {
    pub fn build(&self, alphabet: usize) -> Rule {
        match *self {
            RuleSpec::Reverse => Rule::Reverse,
            RuleSpec::Rotate(r) => Rule::Rotate(r),
            RuleSpec::AddMod(c) => Rule::AddMod(c % alphabet),
            RuleSpec::Permute(seed) => Rule::permutation(seed, alphabet),
        }
    }
}

/// Shape of the task family, as read from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleFamilyConfig {
    pub vocab_size: usize,
    pub query_len: usize,
    pub answer_len: usize,
    pub rules: Vec<String>,
    /// Number of consecutive alphabet tokens each rule draws its queries from.
    pub query_window: usize,
    /// Demonstrations stored per rule in the bank.
    pub bank_per_rule: usize,
    /// Percentages of the per-rule instance space reserved for the
    /// demonstration bank and for held-out evaluation.
    pub bank_percent: u64,
    pub eval_percent: u64,
}

/// Which disjoint slice of the instance space a task belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Bank,
    Eval,
}

/// A validated, materialised rule family.
#[derive(Clone, Debug)]
pub struct TaskFamily {
    pub vocab: Vocab,
    pub query_len: usize,
    pub answer_len: usize,
    pub rules: Vec<Rule>,
    pub windows: Vec<Vec<Token>>,
    bank_percent: u64,
    eval_percent: u64,
    pub bank_per_rule: usize,
}

impl TaskFamily {
    pub fn new(cfg: &RuleFamilyConfig) -> Result<Self> {
        let vocab = Vocab::new(cfg.vocab_size)?;
        let alphabet = vocab.alphabet();
        if cfg.rules.is_empty() {
            return Err(IcpoError::Config("rule family has zero rules".into()));
        }
        if cfg.query_len == 0 {
            return Err(IcpoError::Config("query_len must be positive".into()));
        }
        if cfg.answer_len != cfg.query_len {
            return Err(IcpoError::Config(format!(
                "all rules preserve length, so answer_len ({}) must equal query_len ({})",
                cfg.answer_len, cfg.query_len
            )));
        }
        if cfg.query_window == 0 {
            return Err(IcpoError::Config("query_window must be positive".into()));
        }
        if cfg.bank_percent + cfg.eval_percent >= 100
            || cfg.bank_percent == 0
            || cfg.eval_percent == 0
        {
            return Err(IcpoError::Config(
                "bank_percent and eval_percent must be positive and leave room for training".into(),
            ));
        }
        let rules = cfg
            .rules
            .iter()
            .map(|s| s.parse::<RuleSpec>().map(|r| r.build(alphabet)))
            .collect::<Result<Vec<_>>>()?;
        let n = rules.len();
        let width = cfg.query_window.min(alphabet);
        let windows = (0..n)
            .map(|r| {
                let start = (r * alphabet) / n;
                (0..width).map(|i| (start + i) % alphabet).collect()
            })
            .collect();
        let family = Self {
            vocab,
            query_len: cfg.query_len,
            answer_len: cfg.answer_len,
            rules,
            windows,
            bank_percent: cfg.bank_percent,
            eval_percent: cfg.eval_percent,
            bank_per_rule: cfg.bank_per_rule,
        };
        for split in [Split::Train, Split::Bank, Split::Eval] {
            if family.draw_in(0, split, SPLIT_PROBE_DRAWS).is_none() {
                return Err(IcpoError::Config(format!(
                    "no {split:?} instances found in {SPLIT_PROBE_DRAWS} draws; the instance space is too small for the split percentages"
                )));
            }
        }
        Ok(family)
    }

    pub fn n_rules(&self) -> usize {
        self.rules.len()
    }

    /// The rule a query belongs to, or `None` when no window holds it.
    pub fn owner(&self, query: &[Token]) -> Option<usize> {
        let holders: Vec<usize> = (0..self.n_rules())
            .filter(|&r| query.iter().all(|t| self.windows[r].contains(t)))
            .collect();
        match (holders.len(), query.first()) {
            (0, _) | (_, None) => None,
            (n, Some(&first)) => Some(holders[first % n]),
        }
    }

    pub fn apply_rule(&self, rule_id: usize, query: &[Token]) -> Vec<Token> {
        self.rules[rule_id].apply(query, self.vocab.alphabet())
    }

    /// Deterministic split assignment of a `(rule, query)` instance.
    pub fn split_of(&self, rule_id: usize, query: &[Token]) -> Split {
        let mut path = Vec::with_capacity(query.len() + 1);
        path.push(rule_id as u64);
        path.extend(query.iter().map(|&t| t as u64));
        let bucket = derive_seed(0x5EED_5EED, &path) % 100;
        if bucket < self.bank_percent {
            Split::Bank
        } else if bucket < self.bank_percent + self.eval_percent {
            Split::Eval
        } else {
            Split::Train
        }
    }

    /// Draws a task from the given split; identical seeds give identical tasks.
    /// Terminates because construction checked that every split is reachable.
    pub fn generate_in(&self, rng_seed: u64, split: Split) -> TaskInstance {
        self.draw_in(rng_seed, split, usize::MAX)
            .expect("every split is reachable")
    }

    fn draw_in(&self, rng_seed: u64, split: Split, max_draws: usize) -> Option<TaskInstance> {
        let mut rng = rng_from(derive_seed(rng_seed, &[stream::TASK]));
        for _ in 0..max_draws {
            let window = &self.windows[rng.gen_range(0..self.n_rules())];
            let query: Vec<Token> = (0..self.query_len)
                .map(|_| window[rng.gen_range(0..window.len())])
                .collect();
            // drawn from a window, so some rule always owns it
            let rule_id = self.owner(&query).expect("window query has an owner");
            if self.split_of(rule_id, &query) == split {
                let gold_answer = self.apply_rule(rule_id, &query);
                return Some(TaskInstance {
                    rule_id,
                    query,
                    gold_answer,
                });
            }
        }
        None
    }

    /// Builds a demonstration bank with `bank_per_rule` distinct demos per rule.
    pub fn build_bank(&self, rng_seed: u64) -> Result<DemoBank> {
        let mut by_rule = Vec::with_capacity(self.n_rules());
        for rule_id in 0..self.n_rules() {
            let mut rng = rng_from(derive_seed(rng_seed, &[stream::BANK, rule_id as u64]));
            let window = &self.windows[rule_id];
            let mut demos: Vec<Demonstration> = Vec::with_capacity(self.bank_per_rule);
            let mut attempts = 0usize;
            while demos.len() < self.bank_per_rule {
                attempts += 1;
                if attempts > 1000 * self.bank_per_rule.max(1) {
                    return Err(IcpoError::Config(format!(
                        "cannot find {} distinct bank demonstrations for rule {rule_id}",
                        self.bank_per_rule
                    )));
                }
                let query: Vec<Token> = (0..self.query_len)
                    .map(|_| window[rng.gen_range(0..window.len())])
                    .collect();
                if self.owner(&query) != Some(rule_id)
                    || self.split_of(rule_id, &query) != Split::Bank
                    || demos.iter().any(|d| d.query == query)
                {
                    continue;
                }
                let answer = self.apply_rule(rule_id, &query);
                demos.push(Demonstration {
                    query,
                    answer,
                    rule_id,
                });
            }
            by_rule.push(demos);
        }
        Ok(DemoBank { by_rule })
    }
}

/// One synthetic query with its gold answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub rule_id: usize,
    pub query: Vec<Token>,
    pub gold_answer: Vec<Token>,
}

/// An expert `(query, answer)` pair used for in-context conditioning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub query: Vec<Token>,
    pub answer: Vec<Token>,
    pub rule_id: usize,
}

/// Demonstrations grouped by rule id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoBank {
    by_rule: Vec<Vec<Demonstration>>,
}

impl DemoBank {
    /// A bank with no demonstrations at all.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn for_rule(&self, rule_id: usize) -> &[Demonstration] {
        self.by_rule.get(rule_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.by_rule.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn from_demos(demos: Vec<Demonstration>) -> Self {
        let n = demos.iter().map(|d| d.rule_id + 1).max().unwrap_or(0);
        let mut by_rule = vec![Vec::new(); n];
        for d in demos {
            by_rule[d.rule_id].push(d);
        }
        Self { by_rule }
    }
}

/// Generates a training-split task.
pub fn generate_task(rng_seed: u64, family: &TaskFamily) -> TaskInstance {
    family.generate_in(rng_seed, Split::Train)
}

/// True iff the tokens before the first EOS (or all tokens when there is no
/// EOS) equal the gold answer.
pub fn verify(task: &TaskInstance, answer: &[Token], vocab: &Vocab) -> bool {
    let end = answer
        .iter()
        .position(|&t| t == vocab.eos())
        .unwrap_or(answer.len());
    answer[..end] == task.gold_answer[..]
}

/// `k` distinct demonstrations of `rule_id`, excluding any that coincide
/// with `exclude_query`.
pub fn sample_demonstrations(
    bank: &DemoBank,
    rule_id: usize,
    k: usize,
    rng_seed: u64,
    exclude_query: Option<&[Token]>,
) -> Result<Vec<Demonstration>> {
    if k == 0 {
        return Err(IcpoError::Precondition("k must be at least 1".into()));
    }
    let pool: Vec<&Demonstration> = bank
        .for_rule(rule_id)
        .iter()
        .filter(|d| exclude_query != Some(d.query.as_slice()))
        .collect();
    if pool.len() < k {
        return Err(IcpoError::BankExhausted {
            rule_id,
            available: pool.len(),
            requested: k,
        });
    }
    let mut rng = rng_from(derive_seed(rng_seed, &[stream::IEF_DEMOS]));
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// `QRY query SEP`: the bare prompt an on-policy rollout continues from.
pub fn build_query_context(query: &[Token], vocab: &Vocab) -> Vec<Token> {
    let mut ctx = Vec::with_capacity(query.len() + 2);
    ctx.push(vocab.qry());
    ctx.extend_from_slice(query);
    ctx.push(vocab.sep());
    ctx
}

/// `QRY d.query SEP d.answer EOS` for every demo, followed by the bare prompt.
pub fn build_expert_context(
    demos: &[Demonstration],
    query: &[Token],
    vocab: &Vocab,
    max_context: usize,
) -> Result<Vec<Token>> {
    if demos.is_empty() {
        return Err(IcpoError::Precondition(
            "expert context needs at least one demonstration".into(),
        ));
    }
    let len = expert_context_len(demos, query.len());
    if len > max_context {
        return Err(IcpoError::ContextOverflow {
            len,
            max: max_context,
        });
    }
    let mut ctx = Vec::with_capacity(len);
    for d in demos {
        ctx.push(vocab.qry());
        ctx.extend_from_slice(&d.query);
        ctx.push(vocab.sep());
        ctx.extend_from_slice(&d.answer);
        ctx.push(vocab.eos());
    }
    ctx.extend(build_query_context(query, vocab));
    Ok(ctx)
}

fn expert_context_len(demos: &[Demonstration], query_len: usize) -> usize {
    demos
        .iter()
        .map(|d| d.query.len() + d.answer.len() + 3)
        .sum::<usize>()
        + query_len
        + 2
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn family_cfg() -> RuleFamilyConfig {
        RuleFamilyConfig {
            vocab_size: 32,
            query_len: 4,
            answer_len: 4,
            rules: [
                "reverse", "rotate:1", "add:1", "add:5", "perm:1", "perm:2", "rotate:2", "add:9",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            query_window: 10,
            bank_per_rule: 16,
            bank_percent: 20,
            eval_percent: 10,
        }
    }

    fn family() -> TaskFamily {
        TaskFamily::new(&family_cfg()).unwrap()
    }

    #[test]
    fn reverse_rule() {
        assert_eq!(Rule::Reverse.apply(&[3, 1, 4, 2], 29), vec![2, 4, 1, 3]);
    }

    #[test]
    fn add_rule_wraps_modulo() {
        assert_eq!(Rule::AddMod(1).apply(&[0, 31], 32), vec![1, 0]);
    }

    #[test]
    fn rotate_and_permute() {
        assert_eq!(Rule::Rotate(1).apply(&[1, 2, 3, 4], 29), vec![2, 3, 4, 1]);
        let p = Rule::permutation(7, 29);
        let out = p.apply(&(0..29).collect::<Vec<_>>(), 29);
        let mut sorted = out.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..29).collect::<Vec<_>>());
        assert_eq!(p, Rule::permutation(7, 29));
    }

    #[test]
    fn rule_specs_parse() {
        assert_eq!("add:3".parse::<RuleSpec>().unwrap(), RuleSpec::AddMod(3));
        assert_eq!("reverse".parse::<RuleSpec>().unwrap(), RuleSpec::Reverse);
        assert!("shuffle".parse::<RuleSpec>().is_err());
        assert!("add".parse::<RuleSpec>().is_err());
    }

    #[test]
    fn unreachable_split_is_a_config_error() {
        // two one-token queries cannot fill three splits
        let cfg = RuleFamilyConfig {
            vocab_size: 5,
            query_len: 1,
            answer_len: 1,
            rules: vec!["add:1".into()],
            query_window: 2,
            bank_per_rule: 1,
            bank_percent: 40,
            eval_percent: 40,
        };
        assert!(matches!(TaskFamily::new(&cfg), Err(IcpoError::Config(_))));
    }

    #[test]
    fn empty_family_is_a_config_error() {
        let mut cfg = family_cfg();
        cfg.rules.clear();
        assert!(matches!(TaskFamily::new(&cfg), Err(IcpoError::Config(_))));
    }

    #[test]
    fn same_seed_same_task() {
        let f = family();
        assert_eq!(generate_task(42, &f), generate_task(42, &f));
    }

    #[test]
    fn gold_is_rule_application_and_verifies() {
        let f = family();
        for seed in 0..200 {
            let t = generate_task(seed, &f);
            assert_eq!(t.gold_answer, f.apply_rule(t.rule_id, &t.query));
            let mut ans = t.gold_answer.clone();
            ans.push(f.vocab.eos());
            assert!(verify(&t, &ans, &f.vocab));
            assert_eq!(f.split_of(t.rule_id, &t.query), Split::Train);
        }
    }

    #[test]
    fn owner_is_picked_by_the_first_token() {
        let f = family();
        // windows start at r * 29 / 8: 0, 3, 7, 10, 14, 18, 21, 25
        // [7, 9, 8, 7] lies in the windows of rules 0, 1 and 2; 7 % 3 = 1
        assert_eq!(f.owner(&[7, 9, 8, 7]), Some(1));
        // [9, 7, 8, 7]: 9 % 3 = 0
        assert_eq!(f.owner(&[9, 7, 8, 7]), Some(0));
        // 0 and 15 share no window
        assert_eq!(f.owner(&[0, 15, 1, 2]), None);
        assert_eq!(f.owner(&[]), None);
    }

    #[test]
    fn every_instance_belongs_to_its_owner() {
        let f = family();
        let bank = f.build_bank(5).unwrap();
        for seed in 0..300 {
            let t = f.generate_in(seed, Split::Eval);
            assert_eq!(f.owner(&t.query), Some(t.rule_id));
        }
        for r in 0..f.n_rules() {
            assert_eq!(bank.for_rule(r).len(), f.bank_per_rule);
            assert!(bank
                .for_rule(r)
                .iter()
                .all(|d| f.owner(&d.query) == Some(r)));
        }
    }

    #[test]
    fn verify_cases() {
        let v = Vocab::new(32).unwrap();
        let t = TaskInstance {
            rule_id: 0,
            query: vec![3, 1, 4, 2],
            gold_answer: vec![2, 4, 1, 3],
        };
        assert!(verify(&t, &[2, 4, 1, 3, v.eos()], &v));
        assert!(!verify(&t, &[2, 4, 1, 2, v.eos()], &v));
        assert!(!verify(&t, &[], &v));
        assert!(!verify(&t, &[2, 4, 1, 3, 5, 6], &v));
        assert!(!verify(&t, &[2, 4, 1, v.eos(), 3], &v));
    }

    #[test]
    fn demo_sampling_contract() {
        let f = family();
        let bank = f.build_bank(3).unwrap();
        let one = sample_demonstrations(&bank, 2, 1, 9, None).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].rule_id, 2);
        assert_eq!(one, sample_demonstrations(&bank, 2, 1, 9, None).unwrap());

        let three = sample_demonstrations(&bank, 4, 3, 1, None).unwrap();
        assert_eq!(three.len(), 3);
        assert_ne!(three[0], three[1]);
        assert_ne!(three[1], three[2]);
        assert_ne!(three[0], three[2]);

        let small = DemoBank::from_demos(bank.for_rule(1)[..2].to_vec());
        assert!(matches!(
            sample_demonstrations(&small, 1, 3, 0, None),
            Err(IcpoError::BankExhausted {
                available: 2,
                requested: 3,
                ..
            })
        ));
    }

    #[test]
    fn bank_is_disjoint_from_training_stream() {
        let f = family();
        let bank = f.build_bank(11).unwrap();
        for seed in 0..300 {
            let t = generate_task(seed, &f);
            assert!(bank.for_rule(t.rule_id).iter().all(|d| d.query != t.query));
        }
        for r in 0..f.n_rules() {
            for d in bank.for_rule(r) {
                assert_eq!(d.answer, f.apply_rule(r, &d.query));
            }
        }
    }

    #[test]
    fn expert_context_layout() {
        let v = Vocab::new(32).unwrap();
        let d = Demonstration {
            query: vec![1, 2, 3, 4],
            answer: vec![4, 3, 2, 1],
            rule_id: 0,
        };
        let ctx = build_expert_context(std::slice::from_ref(&d), &[5, 6, 7, 8], &v, 64).unwrap();
        assert_eq!(ctx.len(), 17);
        assert_eq!(ctx.iter().filter(|&&t| t == v.qry()).count(), 2);
        assert_eq!(
            ctx,
            vec![
                v.qry(),
                1,
                2,
                3,
                4,
                v.sep(),
                4,
                3,
                2,
                1,
                v.eos(),
                v.qry(),
                5,
                6,
                7,
                8,
                v.sep()
            ]
        );
        let two = build_expert_context(&[d.clone(), d.clone()], &[5, 6, 7, 8], &v, 64).unwrap();
        assert_eq!(two.iter().filter(|&&t| t == v.qry()).count(), 3);
        assert!(matches!(
            build_expert_context(&[], &[5, 6, 7, 8], &v, 64),
            Err(IcpoError::Precondition(_))
        ));
        assert!(matches!(
            build_expert_context(&[d], &[5, 6, 7, 8], &v, 10),
            Err(IcpoError::ContextOverflow { len: 17, max: 10 })
        ));
    }

    proptest::proptest! {
        #[test]
        fn expert_context_length_formula(k in 1usize..5, lq in 1usize..7) {
            let v = Vocab::new(32).unwrap();
            let demos: Vec<_> = (0..k)
                .map(|i| Demonstration { query: vec![i % 29; lq], answer: vec![1; lq], rule_id: 0 })
                .collect();
            let ctx = build_expert_context(&demos, &vec![0; lq], &v, 1000).unwrap();
            proptest::prop_assert_eq!(ctx.len(), k * (2 * lq + 3) + lq + 2);
            proptest::prop_assert_eq!(ctx.iter().filter(|&&t| t == v.qry()).count(), k + 1);
            proptest::prop_assert_eq!(*ctx.last().unwrap(), v.sep());
        }
    }
}
