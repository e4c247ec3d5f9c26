//! Synthetic tasks with exactly checkable answers.
//!
//! Every task renders an instance as `prompt ++ answer`, where the prompt
//! ends in a separator token and the answer has a fixed length.
//!
//! | task      | prompt                      | answer                         |
//! |-----------|-----------------------------|--------------------------------|
//! | `copy`    | `k` symbols, `\|`           | the same `k` symbols           |
//! | `sort`    | `k` distinct symbols, `\|`  | those symbols in sorted order  |
//! | `mod_add` | `a` `+` `b` `=` in digits   | `(a + b) mod base^digits`      |
//! | `sudoku4` | 16 cells (`_` blank), `\|`  | the unique completed grid      |

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sudoku::{self, Grid};
use crate::error::{invalid_config, invalid_input, Result};
use crate::types::{TokenId, TokenSeq, Vocab};

pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSpec {
    Copy { k: usize, alphabet: usize },
    Sort { k: usize, alphabet: usize },
    ModAdd { base: u32, digits: usize },
    Sudoku4,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instance {
    pub prompt: TokenSeq,
    pub answer: Vec<TokenId>,
}

impl Instance {
    /// `prompt ++ answer`, with the prompt length marked.
    pub fn full_sequence(&self) -> TokenSeq {
        let mut ids = self.prompt.ids.clone();
        ids.extend_from_slice(&self.answer);
        TokenSeq {
            ids,
            prompt_len: self.prompt.ids.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TokenSeq>,
    pub eval: Vec<Instance>,
}

impl TaskSpec {
    pub const NAMES: [&'static str; 4] = ["copy", "sort", "mod_add", "sudoku4"];

    /// Task with its default parameters.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "copy" => Ok(TaskSpec::Copy { k: 6, alphabet: 6 }),
            "sort" => Ok(TaskSpec::Sort { k: 8, alphabet: 8 }),
            "mod_add" => Ok(TaskSpec::ModAdd { base: 10, digits: 2 }),
            "sudoku4" => Ok(TaskSpec::Sudoku4),
            other => Err(invalid_config(format!(
                "unknown task {other:?}; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Copy { .. } => "copy",
            TaskSpec::Sort { .. } => "sort",
            TaskSpec::ModAdd { .. } => "mod_add",
            TaskSpec::Sudoku4 => "sudoku4",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Copy { k, alphabet } | TaskSpec::Sort { k, alphabet } => {
                if k == 0 || !(1..=26).contains(&alphabet) {
                    return Err(invalid_config("symbol tasks need k >= 1 and 1 <= alphabet <= 26"));
                }
                if matches!(self, TaskSpec::Sort { .. }) && k > alphabet {
                    return Err(invalid_config(format!(
                        "sort draws k distinct symbols, so k ({k}) cannot exceed alphabet ({alphabet})"
                    )));
                }
            }
            TaskSpec::ModAdd { base, digits } => {
                if !(2..=10).contains(&base) || !(1..=9).contains(&digits) {
                    return Err(invalid_config("mod_add needs 2 <= base <= 10 and 1 <= digits <= 9"));
                }
            }
            TaskSpec::Sudoku4 => {}
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let mut tokens: Vec<String> = match *self {
            TaskSpec::Copy { alphabet, .. } | TaskSpec::Sort { alphabet, .. } => (0..alphabet)
                .map(|i| char::from(b'a' + i as u8).to_string())
                .chain(["|".to_string()])
                .collect(),
            TaskSpec::ModAdd { base, .. } => (0..base)
                .map(|d| d.to_string())
                .chain(["+".to_string(), "=".to_string()])
                .collect(),
            TaskSpec::Sudoku4 => ["1", "2", "3", "4", "_", "|"].map(String::from).to_vec(),
        };
        tokens.push(MASK_TOKEN.to_string());
        Vocab::from_strings(tokens, MASK_TOKEN).expect("task vocabulary contains the mask token")
    }

    pub fn prompt_len(&self) -> usize {
        match *self {
            TaskSpec::Copy { k, .. } | TaskSpec::Sort { k, .. } => k + 1,
            TaskSpec::ModAdd { digits, .. } => 2 * digits + 2,
            TaskSpec::Sudoku4 => 17,
        }
    }

    pub fn answer_len(&self) -> usize {
        match *self {
            TaskSpec::Copy { k, .. } | TaskSpec::Sort { k, .. } => k,
            TaskSpec::ModAdd { digits, .. } => digits,
            TaskSpec::Sudoku4 => 16,
        }
    }

    /// Number of distinct instances, when the space is enumerable.
    pub fn distinct_instances(&self) -> Option<u128> {
        match *self {
            TaskSpec::Copy { k, alphabet } => (alphabet as u128).checked_pow(k as u32),
            TaskSpec::Sort { k, alphabet } => {
                ((alphabet - k + 1)..=alphabet).try_fold(1u128, |acc, x| acc.checked_mul(x as u128))
            }
            TaskSpec::ModAdd { base, digits } => (base as u128).checked_pow(2 * digits as u32),
            TaskSpec::Sudoku4 => None,
        }
    }

    fn separator(&self) -> TokenId {
        match *self {
            TaskSpec::Copy { alphabet, .. } | TaskSpec::Sort { alphabet, .. } => alphabet as TokenId,
            TaskSpec::ModAdd { .. } => unreachable!("mod_add has no separator"),
            TaskSpec::Sudoku4 => 5,
        }
    }

    /// The instance with the given index in a fixed enumeration order.
    fn instance_at(&self, mut index: u128) -> Instance {
        let (prompt, answer) = match *self {
            TaskSpec::Copy { k, alphabet } => {
                let mut symbols = Vec::with_capacity(k);
                for _ in 0..k {
                    symbols.push((index % alphabet as u128) as TokenId);
                    index /= alphabet as u128;
                }
                let mut prompt = symbols.clone();
                prompt.push(self.separator());
                (prompt, symbols)
            }
            TaskSpec::Sort { k, alphabet } => {
                let mut pool: Vec<TokenId> = (0..alphabet as TokenId).collect();
                let mut symbols = Vec::with_capacity(k);
                for _ in 0..k {
                    let n = pool.len() as u128;
                    symbols.push(pool.remove((index % n) as usize));
                    index /= n;
                }
                let mut answer = symbols.clone();
                answer.sort_unstable();
                let mut prompt = symbols;
                prompt.push(self.separator());
                (prompt, answer)
            }
            TaskSpec::ModAdd { base, digits } => {
                let modulus = (base as u128).pow(digits as u32);
                let (a, b) = (index / modulus, index % modulus);
                let mut prompt = to_digits(a, base, digits);
                prompt.push(base);
                prompt.extend(to_digits(b, base, digits));
                prompt.push(base + 1);
                (prompt, to_digits((a + b) % modulus, base, digits))
            }
            TaskSpec::Sudoku4 => unreachable!("sudoku instances are not enumerated"),
        };
        Instance {
            prompt: TokenSeq::prompt(prompt),
            answer,
        }
    }

    fn sudoku_instance(puzzle: &Grid, solution: &Grid) -> Instance {
        let mut prompt: Vec<TokenId> = puzzle
            .iter()
            .map(|&d| if d == 0 { 4 } else { d as TokenId - 1 })
            .collect();
        prompt.push(5);
        Instance {
            prompt: TokenSeq::prompt(prompt),
            answer: solution.iter().map(|&d| d as TokenId - 1).collect(),
        }
    }

    fn puzzle_from_prompt(prompt: &[TokenId]) -> Option<Grid> {
        if prompt.len() != 17 || prompt[16] != 5 {
            return None;
        }
        let mut grid = [0u8; 16];
        for (cell, &t) in grid.iter_mut().zip(prompt) {
            *cell = match t {
                0..=3 => t as u8 + 1,
                4 => 0,
                _ => return None,
            };
        }
        Some(grid)
    }

    /// The correct completion for a prompt, computed from the task
    /// definition.
    pub fn reference_answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        if prompt.len() != self.prompt_len() {
            return Err(invalid_input(format!(
                "{} prompt must have {} tokens, got {}",
                self.name(),
                self.prompt_len(),
                prompt.len()
            )));
        }
        match *self {
            TaskSpec::Copy { alphabet, .. } | TaskSpec::Sort { alphabet, .. } => {
                let body = &prompt[..prompt.len() - 1];
                if prompt[prompt.len() - 1] != self.separator() || body.iter().any(|&t| t as usize >= alphabet) {
                    return Err(invalid_input("malformed symbol prompt"));
                }
                let mut answer = body.to_vec();
                if matches!(self, TaskSpec::Sort { .. }) {
                    answer.sort_unstable();
                }
                Ok(answer)
            }
            TaskSpec::ModAdd { base, digits } => {
                let well_formed = prompt[digits] == base
                    && prompt[2 * digits + 1] == base + 1
                    && prompt[..digits]
                        .iter()
                        .chain(&prompt[digits + 1..2 * digits + 1])
                        .all(|&t| t < base);
                if !well_formed {
                    return Err(invalid_input("malformed mod_add prompt"));
                }
                let a = from_digits(&prompt[..digits], base);
                let b = from_digits(&prompt[digits + 1..2 * digits + 1], base);
                let modulus = (base as u128).pow(digits as u32);
                Ok(to_digits((a + b) % modulus, base, digits))
            }
            TaskSpec::Sudoku4 => {
                let puzzle =
                    Self::puzzle_from_prompt(prompt).ok_or_else(|| invalid_input("malformed sudoku4 prompt"))?;
                match sudoku::solve_all(&puzzle, 2).as_slice() {
                    [only] => Ok(only.iter().map(|&d| d as TokenId - 1).collect()),
                    _ => Err(invalid_input("sudoku4 prompt does not have a unique solution")),
                }
            }
        }
    }

    /// Exact-match predicate over the generated region.
    pub fn check(&self, prompt: &[TokenId], generated: &[TokenId]) -> bool {
        if generated.len() != self.answer_len() {
            return false;
        }
        match self {
            TaskSpec::Sudoku4 => {
                let Some(puzzle) = Self::puzzle_from_prompt(prompt) else {
                    return false;
                };
                let mut grid = [0u8; 16];
                for (cell, &t) in grid.iter_mut().zip(generated) {
                    if t > 3 {
                        return false;
                    }
                    *cell = t as u8 + 1;
                }
                sudoku::is_solution(&puzzle, &grid)
            }
            _ => self.reference_answer(prompt).is_ok_and(|answer| answer == generated),
        }
    }

    /// Parses whitespace-separated display tokens into a prompt. The
    /// trailing separator (or `=`) may be omitted.
    pub fn parse_prompt(&self, text: &str) -> Result<TokenSeq> {
        let vocab = self.vocab();
        let mut ids = text
            .split_whitespace()
            .map(|tok| {
                vocab
                    .lookup(tok)
                    .filter(|&id| id != vocab.mask_id())
                    .ok_or_else(|| invalid_input(format!("unknown token {tok:?} for task {}", self.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.len() + 1 == self.prompt_len() {
            ids.push(match self {
                TaskSpec::ModAdd { base, .. } => base + 1,
                _ => self.separator(),
            });
        }
        self.reference_answer(&ids)?;
        Ok(TokenSeq::prompt(ids))
    }

    /// Draws `n_train + n_eval` distinct instances; the first `n_train`
    /// become the training corpus.
    pub fn generate_dataset(&self, n_train: usize, n_eval: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let total = n_train + n_eval;
        if total == 0 {
            return Err(invalid_input("dataset must contain at least one instance"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instances: Vec<Instance> = match self.distinct_instances() {
            Some(space) => {
                if total as u128 > space {
                    return Err(invalid_input(format!(
                        "{} has only {space} distinct instances, {total} requested",
                        self.name()
                    )));
                }
                if space <= 10_000_000 {
                    index::sample(&mut rng, space as usize, total)
                        .into_iter()
                        .map(|i| self.instance_at(i as u128))
                        .collect()
                } else {
                    let mut seen = HashSet::with_capacity(total);
                    let mut out = Vec::with_capacity(total);
                    while out.len() < total {
                        let i = rng.gen_range(0..space);
                        if seen.insert(i) {
                            out.push(self.instance_at(i));
                        }
                    }
                    out
                }
            }
            None => {
                let mut seen = HashSet::with_capacity(total);
                let mut out = Vec::with_capacity(total);
                let budget = 20 * total + 1000;
                for _ in 0..budget {
                    if out.len() == total {
                        break;
                    }
                    let (puzzle, solution) = sudoku::generate_puzzle(&mut rng);
                    if seen.insert(puzzle) {
                        out.push(Self::sudoku_instance(&puzzle, &solution));
                    }
                }
                if out.len() < total {
                    return Err(invalid_input(format!(
                        "could only draw {} distinct sudoku4 puzzles, {total} requested",
                        out.len()
                    )));
                }
                out
            }
        };
        let mut it = instances.into_iter();
        let train = it.by_ref().take(n_train).map(|i| i.full_sequence()).collect();
        Ok(Dataset {
            train,
            eval: it.collect(),
        })
    }
}

fn to_digits(mut value: u128, base: u32, digits: usize) -> Vec<TokenId> {
    let mut out = vec![0; digits];
    for slot in out.iter_mut().rev() {
        *slot = (value % base as u128) as TokenId;
        value /= base as u128;
    }
    out
}

fn from_digits(digits: &[TokenId], base: u32) -> u128 {
    digits.iter().fold(0, |acc, &d| acc * base as u128 + d as u128)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(task: &TaskSpec, ids: &[TokenId]) -> String {
        task.vocab().render_all(ids)
    }

    #[test]
    fn copy_and_sort_definitions() {
        let copy = TaskSpec::Copy { k: 3, alphabet: 3 };
        let p = copy.parse_prompt("a c b").unwrap();
        assert_eq!(render(&copy, &copy.reference_answer(&p.ids).unwrap()), "a c b");

        let sort = TaskSpec::Sort { k: 3, alphabet: 3 };
        let p = sort.parse_prompt("c a b").unwrap();
        assert_eq!(render(&sort, &p.ids), "c a b |");
        assert_eq!(render(&sort, &sort.reference_answer(&p.ids).unwrap()), "a b c");
    }

    #[test]
    fn mod_add_definition() {
        let t = TaskSpec::ModAdd { base: 10, digits: 2 };
        let p = t.parse_prompt("7 5 + 4 9").unwrap();
        assert_eq!(render(&t, &p.ids), "7 5 + 4 9 =");
        // 75 + 49 = 124 -> 24
        assert_eq!(render(&t, &t.reference_answer(&p.ids).unwrap()), "2 4");
        assert!(t.parse_prompt("7 5 4 9").is_err());
    }

    #[test]
    fn distinct_counts() {
        assert_eq!(TaskSpec::Copy { k: 3, alphabet: 3 }.distinct_instances(), Some(27));
        assert_eq!(TaskSpec::Sort { k: 8, alphabet: 8 }.distinct_instances(), Some(40320));
        assert_eq!(TaskSpec::Sort { k: 2, alphabet: 5 }.distinct_instances(), Some(20));
        assert_eq!(
            TaskSpec::ModAdd { base: 10, digits: 2 }.distinct_instances(),
            Some(10_000)
        );
    }

    #[test]
    fn enumeration_is_a_bijection() {
        for task in [
            TaskSpec::Copy { k: 3, alphabet: 3 },
            TaskSpec::Sort { k: 3, alphabet: 4 },
            TaskSpec::ModAdd { base: 3, digits: 2 },
        ] {
            let n = task.distinct_instances().unwrap();
            let all: HashSet<_> = (0..n).map(|i| task.instance_at(i).prompt).collect();
            assert_eq!(all.len() as u128, n, "{}", task.name());
        }
    }

    #[test]
    fn dataset_splits_are_disjoint_and_correct() {
        for name in TaskSpec::NAMES {
            let task = TaskSpec::by_name(name).unwrap();
            let ds = task.generate_dataset(200, 50, 11).unwrap();
            assert_eq!((ds.train.len(), ds.eval.len()), (200, 50));
            let train_prompts: HashSet<Vec<TokenId>> =
                ds.train.iter().map(|s| s.ids[..s.prompt_len].to_vec()).collect();
            assert_eq!(train_prompts.len(), 200);
            for inst in &ds.eval {
                assert!(!train_prompts.contains(&inst.prompt.ids));
                assert!(task.check(&inst.prompt.ids, &inst.answer));
                assert_eq!(task.reference_answer(&inst.prompt.ids).unwrap(), inst.answer);
            }
            for s in &ds.train {
                assert_eq!(s.len(), task.prompt_len() + task.answer_len());
                assert!(task.check(&s.ids[..s.prompt_len], s.generated()));
            }
            assert_eq!(ds, task.generate_dataset(200, 50, 11).unwrap());
        }
    }

    #[test]
    fn too_many_instances_rejected() {
        let t = TaskSpec::Copy { k: 3, alphabet: 3 };
        assert!(t.generate_dataset(20, 7, 0).is_ok());
        assert!(matches!(
            t.generate_dataset(20, 8, 0),
            Err(crate::Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sudoku_checker_agrees_with_solver() {
        let task = TaskSpec::Sudoku4;
        let ds = task.generate_dataset(0, 300, 5).unwrap();
        for inst in &ds.eval {
            let puzzle = TaskSpec::puzzle_from_prompt(&inst.prompt.ids).unwrap();
            let sols = sudoku::solve_all(&puzzle, 3);
            assert_eq!(sols.len(), 1);
            assert!(task.check(&inst.prompt.ids, &inst.answer));
            // every other complete grid is rejected by the checker
            for g in sudoku::all_grids() {
                let ids: Vec<TokenId> = g.iter().map(|&d| d as TokenId - 1).collect();
                assert_eq!(task.check(&inst.prompt.ids, &ids), *g == sols[0]);
            }
        }
    }

    #[test]
    fn checker_rejects_wrong_answers() {
        let t = TaskSpec::Sort { k: 3, alphabet: 3 };
        let p = t.parse_prompt("c a b").unwrap();
        assert!(t.check(&p.ids, &[0, 1, 2]));
        assert!(!t.check(&p.ids, &[0, 2, 1]));
        assert!(!t.check(&p.ids, &[0, 1]));
    }

    #[test]
    fn invalid_specs() {
        assert!(TaskSpec::Sort { k: 5, alphabet: 4 }.validate().is_err());
        assert!(TaskSpec::ModAdd { base: 11, digits: 1 }.validate().is_err());
        assert!(TaskSpec::by_name("parity").unwrap_err().is_config());
    }
}
