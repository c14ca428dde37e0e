//! Synthetic classification tasks with closed-form labels.

use std::collections::HashSet;

use anyhow::{bail, Result};
use minidisc::data::{Dataset, Example};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Token 0 pads; token 1 is the mark (parity) or separator (pairs).
pub const PAD: usize = 0;
pub const MARK: usize = 1;
const FIRST_PLAIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label is the parity of the number of marked tokens (0 to 3 marks).
    ParityOfMarkedTokens,
    /// Plain tokens belong to classes by `(id − 2) mod n_classes`; the label
    /// is the class with the most tokens.
    MajorityClass,
    /// `A SEP B`; plain tokens fall into topics by `(id − 2) mod 4`. Label 1
    /// iff both halves have the same dominant topic.
    PairSimilarity,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [Self::ParityOfMarkedTokens, Self::MajorityClass, Self::PairSimilarity];

    pub fn name(self) -> &'static str {
        match self {
            Self::ParityOfMarkedTokens => "parity-of-marked-tokens",
            Self::MajorityClass => "majority-class",
            Self::PairSimilarity => "pair-similarity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub length: usize,
    pub n_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let name = self.kind.name();
        if self.vocab < 4 {
            bail!("task {name}: vocab ({}) must be >= 4", self.vocab);
        }
        if self.n_classes < 2 {
            bail!("task {name}: n_classes ({}) must be >= 2", self.n_classes);
        }
        if self.train_size == 0 || self.dev_size == 0 {
            bail!("task {name}: train_size and dev_size must be >= 1");
        }
        match self.kind {
            TaskKind::ParityOfMarkedTokens | TaskKind::PairSimilarity if self.n_classes != 2 => {
                bail!("task {name}: n_classes must be 2")
            }
            TaskKind::ParityOfMarkedTokens if self.length < 3 => bail!("task {name}: length must be >= 3"),
            TaskKind::MajorityClass if self.vocab - FIRST_PLAIN < self.n_classes => {
                bail!("task {name}: vocab too small for {} classes", self.n_classes)
            }
            TaskKind::MajorityClass if self.length < 2 => bail!("task {name}: length must be >= 2"),
            TaskKind::PairSimilarity if self.length < 5 || self.vocab < FIRST_PLAIN + TOPICS => {
                bail!("task {name}: needs length >= 5 and vocab >= {}", FIRST_PLAIN + TOPICS)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub dev: Dataset,
}

fn plain<R: Rng>(spec: &TaskSpec, rng: &mut R) -> usize {
    rng.gen_range(FIRST_PLAIN..spec.vocab)
}

/// Number of token topics in the pair task.
pub const TOPICS: usize = 4;

fn dominant_topic(ids: &[usize]) -> Option<usize> {
    let mut counts = [0usize; TOPICS];
    for &t in ids.iter().filter(|&&t| t >= FIRST_PLAIN) {
        counts[(t - FIRST_PLAIN) % TOPICS] += 1;
    }
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
    let (best, _) = winners.next()?;
    winners.next().is_none().then_some(best)
}

/// A plain token of topic `topic` four times out of five, else of any
/// other topic.
fn topic_token<R: Rng>(spec: &TaskSpec, topic: usize, rng: &mut R) -> usize {
    let on_topic = rng.gen_bool(0.8);
    loop {
        let t = plain(spec, rng);
        if ((t - FIRST_PLAIN) % TOPICS == topic) == on_topic {
            return t;
        }
    }
}

/// The closed-form labelling rule of each task.
pub fn label_of(kind: TaskKind, n_classes: usize, ids: &[usize]) -> Option<usize> {
    match kind {
        TaskKind::ParityOfMarkedTokens => Some(ids.iter().filter(|&&t| t == MARK).count() % 2),
        TaskKind::MajorityClass => {
            let mut counts = vec![0usize; n_classes];
            for &t in ids.iter().filter(|&&t| t >= FIRST_PLAIN) {
                counts[(t - FIRST_PLAIN) % n_classes] += 1;
            }
            let max = *counts.iter().max()?;
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
            let (best, _) = winners.next()?;
            winners.next().is_none().then_some(best)
        }
        TaskKind::PairSimilarity => {
            let sep = ids.iter().position(|&t| t == MARK)?;
            let (a, b) = (dominant_topic(&ids[..sep])?, dominant_topic(&ids[sep + 1..])?);
            Some(usize::from(a == b))
        }
    }
}

fn generate<R: Rng>(spec: &TaskSpec, label: usize, rng: &mut R) -> Vec<usize> {
    let n = spec.length;
    match spec.kind {
        TaskKind::ParityOfMarkedTokens => {
            let marks = if label == 0 { [0, 2][rng.gen_range(0..2)] } else { [1, 3][rng.gen_range(0..2)] };
            let mut ids: Vec<usize> = (0..n).map(|_| plain(spec, rng)).collect();
            for p in rand::seq::index::sample(rng, n, marks) {
                ids[p] = MARK;
            }
            ids
        }
        TaskKind::MajorityClass => loop {
            let ids: Vec<usize> = (0..n).map(|_| plain(spec, rng)).collect();
            if label_of(spec.kind, spec.n_classes, &ids) == Some(label) {
                return ids;
            }
        },
        TaskKind::PairSimilarity => loop {
            let half = (n - 1) / 2;
            let ta = rng.gen_range(0..TOPICS);
            let tb = if label == 1 { ta } else { (ta + rng.gen_range(1..TOPICS)) % TOPICS };
            let mut ids: Vec<usize> = (0..half).map(|_| topic_token(spec, ta, rng)).collect();
            ids.push(MARK);
            ids.extend((0..n - 1 - half).map(|_| topic_token(spec, tb, rng)));
            if label_of(spec.kind, spec.n_classes, &ids) == Some(label) {
                return ids;
            }
        },
    }
}

/// Deterministic train and dev sets with exactly balanced labels and no
/// sequence shared between them.
pub fn make_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut draw = |size: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        let mut labels: Vec<usize> = (0..size).map(|i| i % spec.n_classes).collect();
        labels.shuffle(rng);
        let mut out = Vec::with_capacity(size);
        for label in labels {
            let mut tries = 0;
            let ids = loop {
                let ids = generate(spec, label, rng);
                if seen.insert(ids.clone()) {
                    break ids;
                }
                tries += 1;
                if tries > 1000 {
                    bail!("task {}: sequence space too small for {size} distinct examples", spec.kind.name());
                }
            };
            out.push(Example { ids, label });
        }
        Ok(out)
    };
    let train = draw(spec.train_size, &mut rng)?;
    let dev = draw(spec.dev_size, &mut rng)?;
    let seq_len = train.iter().chain(&dev).map(|e| e.ids.len()).max().unwrap_or(1);
    Ok(TaskData {
        spec: spec.clone(),
        train: Dataset::new(train, seq_len)?,
        dev: Dataset::new(dev, seq_len)?,
    })
}
