//! Synthetic sequence tasks with a single answer token.
//!
//! Every sample is `[symbols..., QUERY]` and the answer is predicted at the
//! query position. The answer is the last symbol of the transformed
//! sequence: copy keeps the sequence (answer = last symbol), reverse flips
//! it (answer = first symbol), sort orders it ascending (answer = maximum),
//! parity emits the parity bit of a 0/1 sequence and modadd the sum of its
//! operands modulo `p`. Pretraining samples carry a task prefix token in
//! front.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, RngState};

/// Number of data symbols; tokens `0..NUM_SYMBOLS`.
pub const NUM_SYMBOLS: usize = 16;
/// Marks the answer position.
pub const QUERY: usize = NUM_SYMBOLS;
/// First task prefix token; one per generator kind.
pub const PREFIX_BASE: usize = QUERY + 1;
pub const VOCAB_SIZE: usize = PREFIX_BASE + 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    Parity,
    ModAdd { p: usize },
}

impl TaskKind {
    pub fn ordinal(self) -> usize {
        match self {
            TaskKind::Copy => 0,
            TaskKind::Reverse => 1,
            TaskKind::Sort => 2,
            TaskKind::Parity => 3,
            TaskKind::ModAdd { .. } => 4,
        }
    }

    pub fn prefix_token(self) -> usize {
        PREFIX_BASE + self.ordinal()
    }

    /// Number of distinct symbols the generator draws from.
    fn alphabet(self, symbols: usize) -> usize {
        match self {
            TaskKind::Parity => 2,
            TaskKind::ModAdd { p } => p,
            _ => symbols,
        }
    }

    /// Closed-form answer for a symbol sequence.
    pub fn answer(self, seq: &[usize]) -> usize {
        match self {
            TaskKind::Copy => *seq.last().expect("non-empty"),
            TaskKind::Reverse => seq[0],
            TaskKind::Sort => *seq.iter().max().expect("non-empty"),
            TaskKind::Parity => seq.iter().sum::<usize>() % 2,
            TaskKind::ModAdd { p } => seq.iter().sum::<usize>() % p,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Copy => write!(f, "copy"),
            TaskKind::Reverse => write!(f, "reverse"),
            TaskKind::Sort => write!(f, "sort"),
            TaskKind::Parity => write!(f, "parity"),
            TaskKind::ModAdd { p } => write!(f, "modadd{p}"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            "parity" => Ok(TaskKind::Parity),
            _ => s
                .strip_prefix("modadd")
                .and_then(|p| p.parse().ok())
                .map(|p| TaskKind::ModAdd { p })
                .ok_or_else(|| Error::config(format!("unknown task kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    pub pretrain: usize,
    pub train: usize,
    pub eval: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub min_len: usize,
    pub max_len: usize,
    /// Symbols `0..symbols` are available to the generator.
    pub symbols: usize,
    pub counts: SampleCounts,
    pub seed: u64,
    /// Whether train/eval samples carry the task prefix token.
    #[serde(default)]
    pub prefixed: bool,
}

impl TaskSpec {
    pub fn new(
        kind: TaskKind,
        min_len: usize,
        max_len: usize,
        counts: SampleCounts,
        seed: u64,
    ) -> Self {
        Self {
            id: kind.to_string(),
            kind,
            min_len,
            max_len,
            symbols: NUM_SYMBOLS,
            counts,
            seed,
            prefixed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("task `{}`: {m}", self.id)));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "length range {}..={} is empty",
                self.min_len, self.max_len
            ));
        }
        if self.symbols < 2 || self.symbols > NUM_SYMBOLS {
            return bad(format!(
                "needs between 2 and {NUM_SYMBOLS} symbols, got {}",
                self.symbols
            ));
        }
        if let TaskKind::ModAdd { p } = self.kind {
            if p < 2 || p > self.symbols {
                return bad(format!("modulus {p} outside 2..={}", self.symbols));
            }
        }
        if self.id.is_empty() || self.id.contains(['\t', '\n']) {
            return bad("task id must be non-empty without tabs".into());
        }
        Ok(())
    }

    /// Number of distinct inputs the spec can produce.
    pub fn input_space(&self) -> f64 {
        let a = self.kind.alphabet(self.symbols) as f64;
        (self.min_len..=self.max_len)
            .map(|l| a.powi(l as i32))
            .sum()
    }

    /// Sequence length including the query token and optional prefix.
    pub fn max_tokens(&self) -> usize {
        self.max_len + 1 + self.prefixed as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Eval,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Pretrain => streams::DATA_PRETRAIN,
            Split::Train => streams::DATA_TRAIN,
            Split::Eval => streams::DATA_EVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub task_id: String,
    pub input: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub task_id: String,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by input length, in ascending length order.
    pub fn buckets(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            out.entry(s.input.len()).or_default().push(i);
        }
        out
    }

    pub fn max_tokens(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.input.len())
            .max()
            .unwrap_or(0)
    }

    /// Writes `task_id<TAB>input tokens<TAB>target` lines.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.samples {
            let toks: Vec<String> = s.input.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}\t{}\t{}", s.task_id, toks.join(" "), s.target)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R, task_id: &str, split: Split) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("corpus line {}: `{line}`", n + 1));
            let mut parts = line.split('\t');
            let (id, toks, target) = match (parts.next(), parts.next(), parts.next(), parts.next())
            {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => return Err(bad()),
            };
            let input = toks
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            if input.is_empty() {
                return Err(bad());
            }
            samples.push(Sample {
                task_id: id.to_string(),
                input,
                target: target.parse().map_err(|_| bad())?,
            });
        }
        Ok(Self {
            task_id: task_id.to_string(),
            split,
            samples,
        })
    }
}

fn draw_sequence(spec: &TaskSpec, rng: &mut RngState) -> Vec<usize> {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let a = spec.kind.alphabet(spec.symbols);
    (0..len).map(|_| rng.below(a)).collect()
}

/// Draws `count` sequences not in `exclude`; unique among themselves when
/// `unique`.
fn draw_many(
    spec: &TaskSpec,
    split: Split,
    count: usize,
    exclude: &HashSet<Vec<usize>>,
    unique: bool,
) -> Result<Vec<Vec<usize>>> {
    let available = spec.input_space() - exclude.len() as f64;
    if count > 0 && (available < 1.0 || (unique && (count as f64) > available)) {
        return Err(Error::config(format!(
            "task `{}`: cannot draw {count} {split:?} inputs from {available} available",
            spec.id
        )));
    }
    let mut rng = RngState::new(spec.seed, split.stream());
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let budget = 200 * count + 10_000;
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > budget {
            return Err(Error::config(format!(
                "task `{}`: gave up drawing {count} distinct {split:?} inputs",
                spec.id
            )));
        }
        let s = draw_sequence(spec, &mut rng);
        if exclude.contains(&s) || (unique && !seen.insert(s.clone())) {
            continue;
        }
        out.push(s);
    }
    Ok(out)
}

fn to_sample(spec: &TaskSpec, seq: Vec<usize>, prefixed: bool) -> Sample {
    let target = spec.kind.answer(&seq);
    let mut input = Vec::with_capacity(seq.len() + 2);
    if prefixed {
        input.push(spec.kind.prefix_token());
    }
    input.extend(seq);
    input.push(QUERY);
    Sample {
        task_id: spec.id.clone(),
        input,
        target,
    }
}

/// Generates one split. Evaluation inputs are drawn first and are distinct;
/// train and pretrain inputs never coincide with an evaluation input.
pub fn generate(spec: &TaskSpec, split: Split) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let eval = draw_many(spec, Split::Eval, spec.counts.eval, &HashSet::new(), true)?;
    let seqs = match split {
        Split::Eval => eval,
        Split::Train | Split::Pretrain => {
            let exclude: HashSet<Vec<usize>> = eval.into_iter().collect();
            let count = if split == Split::Train {
                spec.counts.train
            } else {
                spec.counts.pretrain
            };
            draw_many(spec, split, count, &exclude, false)?
        }
    };
    let prefixed = spec.prefixed || split == Split::Pretrain;
    Ok(SyntheticCorpus {
        task_id: spec.id.clone(),
        split,
        samples: seqs
            .into_iter()
            .map(|s| to_sample(spec, s, prefixed))
            .collect(),
    })
}

/// Splits `total` into integer parts proportional to `weights` (largest
/// remainder, ties to the earlier entry).
pub fn apportion(weights: &[f64], total: usize) -> Result<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || sum <= 0.0 {
        return Err(Error::config(
            "mixture weights must be non-negative with a positive sum",
        ));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    Ok(counts)
}

/// Prefixed multi-task corpus of `size` pretraining samples, split between
/// tasks by `weights` and interleaved evenly.
pub fn pretrain_mixture(
    specs: &[TaskSpec],
    weights: &[f64],
    size: usize,
) -> Result<SyntheticCorpus> {
    if specs.is_empty() || weights.len() != specs.len() {
        return Err(Error::config("mixture needs one weight per task"));
    }
    let counts = apportion(weights, size)?;
    let mut per_task = Vec::with_capacity(specs.len());
    for (spec, &n) in specs.iter().zip(&counts) {
        let spec = TaskSpec {
            counts: SampleCounts {
                pretrain: n,
                ..spec.counts
            },
            ..spec.clone()
        };
        per_task.push(generate(&spec, Split::Pretrain)?.samples);
    }
    // Sample j of task i sits at fractional position (j + 0.5) / n_i.
    let mut keyed: Vec<(f64, usize, Sample)> = Vec::with_capacity(size);
    for (i, samples) in per_task.into_iter().enumerate() {
        let n = samples.len() as f64;
        for (j, s) in samples.into_iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n, i, s));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(SyntheticCorpus {
        task_id: "mixture".to_string(),
        split: Split::Pretrain,
        samples: keyed.into_iter().map(|(_, _, s)| s).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(train: usize, eval: usize) -> SampleCounts {
        SampleCounts {
            pretrain: 0,
            train,
            eval,
        }
    }

    #[test]
    fn copy_answers_last_symbol() {
        assert_eq!(TaskKind::Copy.answer(&[0, 1, 2]), 2);
        assert_eq!(TaskKind::Reverse.answer(&[0, 1, 2]), 0);
        assert_eq!(TaskKind::Sort.answer(&[5, 1, 2]), 5);
    }

    #[test]
    fn modadd_three_plus_five_mod_seven() {
        assert_eq!(TaskKind::ModAdd { p: 7 }.answer(&[3, 5]), 1);
    }

    #[test]
    fn sort_with_one_symbol_is_infeasible() {
        let mut spec = TaskSpec::new(TaskKind::Sort, 2, 3, counts(4, 4), 0);
        spec.symbols = 1;
        assert!(matches!(
            generate(&spec, Split::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_larger_than_input_space_is_infeasible() {
        let spec = TaskSpec::new(TaskKind::Parity, 2, 2, counts(1, 5), 0);
        assert!(matches!(
            generate(&spec, Split::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn task_kind_names_round_trip() {
        for k in [
            TaskKind::Copy,
            TaskKind::Reverse,
            TaskKind::Sort,
            TaskKind::Parity,
            TaskKind::ModAdd { p: 11 },
        ] {
            assert_eq!(k.to_string().parse::<TaskKind>().unwrap(), k);
        }
    }

    #[test]
    fn apportion_uses_largest_remainder() {
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 10).unwrap(), vec![4, 3, 3]);
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 7).unwrap(), vec![3, 2, 2]);
        assert!(apportion(&[0.0, 0.0], 3).is_err());
    }
}
