//! Synthetic tasks over integer token ids.
//!
//! Ids 0–3 are reserved (`PAD`, `BOS`, `SEP`, `EOS`). A prompt is
//! `BOS, task marker, payload…, SEP`; the expected continuation is the answer followed by `EOS`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, TaqError};
use crate::linalg::SeededRng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
pub const FIRST_DATA: u32 = 4;

const MIN_PAYLOAD: u64 = 3;
const MAX_PAYLOAD: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Copy,
    ModAdd,
    SortSeq,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Copy, TaskKind::ModAdd, TaskKind::SortSeq];

    pub fn id(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::ModAdd => "modadd",
            TaskKind::SortSeq => "sortseq",
        }
    }

    /// Token at position 1 of every prompt of this task.
    pub fn marker(self) -> u32 {
        FIRST_DATA
            + match self {
                TaskKind::Copy => 0,
                TaskKind::ModAdd => 1,
                TaskKind::SortSeq => 2,
            }
    }

    /// Deterministic answer for a prompt of this task.
    pub fn answer(self, prompt: &[u32], vocab: usize) -> Result<Vec<u32>> {
        let body = prompt
            .strip_prefix(&[BOS, self.marker()])
            .and_then(|p| p.strip_suffix(&[SEP]))
            .ok_or_else(|| {
                TaqError::InvalidInput(format!("not a {} prompt: {prompt:?}", self.id()))
            })?;
        match self {
            TaskKind::Copy => Ok(body.to_vec()),
            TaskKind::SortSeq => {
                let mut v = body.to_vec();
                v.sort_unstable();
                Ok(v)
            }
            TaskKind::ModAdd => match body {
                [a, b] => Ok(vec![modadd_answer(*a, *b, vocab)]),
                _ => Err(TaqError::InvalidInput(format!(
                    "modadd prompt needs two operands: {prompt:?}"
                ))),
            },
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TaskKind {
    type Err = TaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "modadd" => Ok(TaskKind::ModAdd),
            "sortseq" => Ok(TaskKind::SortSeq),
            _ => Err(TaqError::InvalidConfig(format!(
                "unknown task '{s}' (copy|modadd|sortseq)"
            ))),
        }
    }
}

pub fn modadd_answer(a: u32, b: u32, vocab: usize) -> u32 {
    ((a as u64 + b as u64) % vocab as u64) as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub task: TaskKind,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

fn gen_one(task: TaskKind, vocab: usize, rng: &mut SeededRng) -> Item {
    let v = vocab as u64;
    let data = |rng: &mut SeededRng| rng.range(FIRST_DATA as u64, v) as u32;
    let payload: Vec<u32> = match task {
        TaskKind::Copy | TaskKind::SortSeq => {
            let len = rng.range(MIN_PAYLOAD, MAX_PAYLOAD + 1);
            (0..len).map(|_| data(rng)).collect()
        }
        TaskKind::ModAdd => loop {
            // keep the sum clear of the reserved ids
            let (a, b) = (data(rng), data(rng));
            if modadd_answer(a, b, vocab) >= FIRST_DATA {
                break vec![a, b];
            }
        },
    };
    let mut prompt = vec![BOS, task.marker()];
    prompt.extend(&payload);
    prompt.push(SEP);
    let answer = task
        .answer(&prompt, vocab)
        .expect("generated prompt is well formed");
    Item {
        task,
        prompt,
        answer,
    }
}

/// `n` items of one task, fully determined by `seed`.
pub fn gen_task(task: TaskKind, n: usize, vocab: usize, seed: u64) -> Vec<Item> {
    let mut rng = SeededRng::new(seed ^ (task.marker() as u64).wrapping_mul(0x9E37_79B9));
    (0..n).map(|_| gen_one(task, vocab, &mut rng)).collect()
}

pub(crate) fn sample_item(tasks: &[TaskKind], vocab: usize, rng: &mut SeededRng) -> Item {
    let task = tasks[rng.below(tasks.len() as u64) as usize];
    gen_one(task, vocab, rng)
}

/// Teacher-forced sequence `prompt ++ answer ++ [EOS]` and its `(position, next token)` targets
/// over the answer part.
pub fn training_sequence(item: &Item) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut seq = item.prompt.clone();
    seq.extend(&item.answer);
    seq.push(EOS);
    let start = item.prompt.len() - 1;
    let targets = (start..seq.len() - 1).map(|p| (p, seq[p + 1])).collect();
    (seq, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers() {
        let p = |t: TaskKind, body: &[u32]| {
            let mut v = vec![BOS, t.marker()];
            v.extend(body);
            v.push(SEP);
            v
        };
        assert_eq!(
            TaskKind::Copy
                .answer(&p(TaskKind::Copy, &[3, 1, 4]), 64)
                .unwrap(),
            vec![3, 1, 4]
        );
        assert_eq!(
            TaskKind::SortSeq
                .answer(&p(TaskKind::SortSeq, &[5, 2, 9]), 64)
                .unwrap(),
            vec![2, 5, 9]
        );
        assert_eq!(modadd_answer(60, 10, 64), 6);
        assert_eq!(
            TaskKind::ModAdd
                .answer(&p(TaskKind::ModAdd, &[60, 10]), 64)
                .unwrap(),
            vec![6]
        );
        assert!(TaskKind::Copy.answer(&[1, 2, 3], 64).is_err());
    }

    #[test]
    fn generation_is_seeded_and_valid() {
        for task in TaskKind::ALL {
            let a = gen_task(task, 50, 64, 9);
            assert_eq!(a, gen_task(task, 50, 64, 9));
            assert_ne!(a, gen_task(task, 50, 64, 10));
            for item in &a {
                assert_eq!(task.answer(&item.prompt, 64).unwrap(), item.answer);
                assert!(item.answer.iter().all(|&t| (FIRST_DATA..64).contains(&t)));
                assert!(item.prompt.len() + item.answer.len() < 32);
            }
        }
    }

    #[test]
    fn training_targets() {
        let item = Item {
            task: TaskKind::Copy,
            prompt: vec![BOS, 4, 9, 8, SEP],
            answer: vec![9, 8],
        };
        let (seq, tg) = training_sequence(&item);
        assert_eq!(seq, vec![BOS, 4, 9, 8, SEP, 9, 8, EOS]);
        assert_eq!(tg, vec![(4, 9), (5, 8), (6, EOS)]);
    }

    #[test]
    fn parse_ids() {
        for t in TaskKind::ALL {
            assert_eq!(t.id().parse::<TaskKind>().unwrap(), t);
        }
        assert!("qa".parse::<TaskKind>().is_err());
    }
}
