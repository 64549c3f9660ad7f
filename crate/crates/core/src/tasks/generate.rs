use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::{Family, MetricMode, MetricSpec, TaskExample, TaskSpec, ToyVocab};

/// Seed of the permutation pairing `x` entities with `y` entities. Fixed so
/// that both retrieval directions transcribe one fact table.
const FACT_TABLE_SEED: u64 = 0x0fac_7ab1e;

/// Smallest start year used by the greater-than task; its corruption sets the
/// start year to `00`.
const GT_MIN_YEAR: usize = 10;

/// Number of years after the start year that a well-behaved model favours on
/// the greater-than task (the ideal continuation is an end year shortly after
/// the start year).
const GT_SPAN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    /// `<ab> x =` → the `y` paired with `x`.
    #[serde(rename = "mirror-retrieval-AB")]
    MirrorRetrievalAb,
    /// `<ba> y =` → the `x` paired with `y`.
    #[serde(rename = "mirror-retrieval-BA")]
    MirrorRetrievalBa,
    /// `<gt> event YY to` → a year greater than `YY`.
    #[serde(rename = "greater-than-2digit")]
    GreaterThan2Digit,
    /// `<rl> a b c` with `c ∈ {a, b}` → whichever of `a, b` is not `c`.
    #[serde(rename = "repeat-last-distinct")]
    RepeatLastDistinct,
    /// `<pa> noun prep noun` → verb agreeing in number with the first noun.
    #[serde(rename = "parity-agreement")]
    ParityAgreement,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::MirrorRetrievalAb,
        TaskKind::MirrorRetrievalBa,
        TaskKind::GreaterThan2Digit,
        TaskKind::RepeatLastDistinct,
        TaskKind::ParityAgreement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::MirrorRetrievalAb => "mirror-retrieval-AB",
            TaskKind::MirrorRetrievalBa => "mirror-retrieval-BA",
            TaskKind::GreaterThan2Digit => "greater-than-2digit",
            TaskKind::RepeatLastDistinct => "repeat-last-distinct",
            TaskKind::ParityAgreement => "parity-agreement",
        }
    }

    pub fn family(self) -> Family {
        match self {
            TaskKind::ParityAgreement => Family::Formal,
            _ => Family::Functional,
        }
    }

    pub fn metric_mode(self) -> MetricMode {
        match self {
            TaskKind::GreaterThan2Digit | TaskKind::ParityAgreement => MetricMode::ProbDiff,
            _ => MetricMode::LogitDiff,
        }
    }

    /// Number of distinct clean/corrupted pairs the kind can produce.
    pub fn capacity(self) -> usize {
        let n = ToyVocab::N_ENTITIES;
        match self {
            TaskKind::MirrorRetrievalAb | TaskKind::MirrorRetrievalBa => n * (n - 1),
            TaskKind::GreaterThan2Digit => ToyVocab::N_EVENTS * (ToyVocab::N_YEARS - 1 - GT_MIN_YEAR),
            TaskKind::RepeatLastDistinct => ToyVocab::N_NAMES * (ToyVocab::N_NAMES - 1) * 2,
            TaskKind::ParityAgreement => {
                ToyVocab::N_NOUNS * 2 * ToyVocab::N_NOUNS * 2 * ToyVocab::PREPOSITIONS.len()
            }
        }
    }

    /// Answer set a perfect model assigns to a well-formed input of this
    /// kind; `None` for inputs the kind does not describe.
    pub fn ideal_answers(self, tokens: &[u32]) -> Option<Vec<u32>> {
        let table = fact_table();
        match (self, tokens) {
            (TaskKind::MirrorRetrievalAb, &[m, x, eq]) if m == ToyVocab::ab() && eq == ToyVocab::equals() => {
                let i = (0..ToyVocab::N_ENTITIES).find(|&i| ToyVocab::x(i) == x)?;
                Some(vec![ToyVocab::y(table[i])])
            }
            (TaskKind::MirrorRetrievalBa, &[m, y, eq]) if m == ToyVocab::ba() && eq == ToyVocab::equals() => {
                let j = (0..ToyVocab::N_ENTITIES).find(|&j| ToyVocab::y(j) == y)?;
                let i = table.iter().position(|&t| t == j)?;
                Some(vec![ToyVocab::x(i)])
            }
            (TaskKind::GreaterThan2Digit, &[m, _event, year, to]) if m == ToyVocab::gt() && to == ToyVocab::to() => {
                let yy = ToyVocab::year_value(year)?;
                if yy >= ToyVocab::N_YEARS - 1 {
                    return None;
                }
                let hi = (yy + GT_SPAN).min(ToyVocab::N_YEARS - 1);
                Some((yy + 1..=hi).map(ToyVocab::year).collect())
            }
            (TaskKind::RepeatLastDistinct, &[m, a, b, c]) if m == ToyVocab::rl() && a != b => {
                if c == a {
                    Some(vec![b])
                } else if c == b {
                    Some(vec![a])
                } else {
                    None
                }
            }
            (TaskKind::ParityAgreement, &[m, subject, _prep, _attractor]) if m == ToyVocab::pa() => {
                ToyVocab::noun_number(subject).map(|plural| vec![ToyVocab::verb(plural)])
            }
            _ => None,
        }
    }

    fn example(self, combo: usize) -> TaskExample {
        let mode = self.metric_mode();
        let spec = |positive: Vec<u32>, negative: Vec<u32>| MetricSpec { mode, positive, negative };
        match self {
            TaskKind::MirrorRetrievalAb | TaskKind::MirrorRetrievalBa => {
                let n = ToyVocab::N_ENTITIES;
                let (i, j) = (combo / (n - 1), combo % (n - 1));
                let j = if j >= i { j + 1 } else { j };
                let table = fact_table();
                // Fact i pairs x(i) with y(table[i]).
                let (marker, ki, kj, ai, aj) = if self == TaskKind::MirrorRetrievalAb {
                    (ToyVocab::ab(), ToyVocab::x(i), ToyVocab::x(j), ToyVocab::y(table[i]), ToyVocab::y(table[j]))
                } else {
                    (ToyVocab::ba(), ToyVocab::y(table[i]), ToyVocab::y(table[j]), ToyVocab::x(i), ToyVocab::x(j))
                };
                TaskExample {
                    clean: vec![marker, ki, ToyVocab::equals()],
                    corrupted: vec![marker, kj, ToyVocab::equals()],
                    metric: spec(vec![ai], vec![aj]),
                }
            }
            TaskKind::GreaterThan2Digit => {
                let span = ToyVocab::N_YEARS - 1 - GT_MIN_YEAR;
                let (event, yy) = (combo / span, GT_MIN_YEAR + combo % span);
                let e = ToyVocab::event(event);
                TaskExample {
                    clean: vec![ToyVocab::gt(), e, ToyVocab::year(yy), ToyVocab::to()],
                    corrupted: vec![ToyVocab::gt(), e, ToyVocab::year(0), ToyVocab::to()],
                    metric: spec(
                        (yy + 1..ToyVocab::N_YEARS).map(ToyVocab::year).collect(),
                        (0..=yy).map(ToyVocab::year).collect(),
                    ),
                }
            }
            TaskKind::RepeatLastDistinct => {
                let n = ToyVocab::N_NAMES;
                let (pair, repeat_first) = (combo / 2, combo % 2 == 0);
                let (i, j) = (pair / (n - 1), pair % (n - 1));
                let j = if j >= i { j + 1 } else { j };
                let (a, b) = (ToyVocab::name(i), ToyVocab::name(j));
                let (last, answer, other) = if repeat_first { (a, b, a) } else { (b, a, b) };
                let corrupt_last = if repeat_first { b } else { a };
                TaskExample {
                    clean: vec![ToyVocab::rl(), a, b, last],
                    corrupted: vec![ToyVocab::rl(), a, b, corrupt_last],
                    metric: spec(vec![answer], vec![other]),
                }
            }
            TaskKind::ParityAgreement => {
                let n = ToyVocab::N_NOUNS;
                let n_prep = ToyVocab::PREPOSITIONS.len();
                let mut c = combo;
                let prep = c % n_prep;
                c /= n_prep;
                let attractor_plural = c % 2 == 1;
                c /= 2;
                let attractor = c % n;
                c /= n;
                let subject_plural = c % 2 == 1;
                let subject = c / 2;
                let tail = [ToyVocab::preposition(prep), ToyVocab::noun(attractor, attractor_plural)];
                let clean = [&[ToyVocab::pa(), ToyVocab::noun(subject, subject_plural)][..], &tail].concat();
                let corrupted = [&[ToyVocab::pa(), ToyVocab::noun(subject, !subject_plural)][..], &tail].concat();
                TaskExample {
                    clean,
                    corrupted,
                    metric: spec(vec![ToyVocab::verb(subject_plural)], vec![ToyVocab::verb(!subject_plural)]),
                }
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Task(format!("unknown task kind {s:?}")))
    }
}

/// `table[i]` is the `y` entity paired with `x(i)`.
fn fact_table() -> Vec<usize> {
    let mut table: Vec<usize> = (0..ToyVocab::N_ENTITIES).collect();
    table.shuffle(&mut rng::seeded(FACT_TABLE_SEED));
    table
}

/// Deterministic synthetic task: `size` distinct pairs drawn without
/// replacement from the kind's combination space.
pub fn generate_task(kind: TaskKind, size: usize, seed: u64) -> Result<TaskSpec> {
    let capacity = kind.capacity();
    if size > capacity {
        return Err(Error::CapacityExceeded { requested: size, capacity });
    }
    if size == 0 {
        return Err(Error::Task("a task needs at least one example".into()));
    }
    let mut combos: Vec<usize> = (0..capacity).collect();
    combos.shuffle(&mut rng::seeded(seed));
    let examples = combos[..size].iter().map(|&c| kind.example(c)).collect();
    Ok(TaskSpec {
        id: kind.as_str().to_string(),
        family: kind.family(),
        kind: Some(kind),
        examples,
        vocab: ToyVocab::vocab(),
    })
}
