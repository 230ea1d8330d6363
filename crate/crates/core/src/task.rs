//! Synthetic arithmetic chain-of-thought task: three-operand questions
//! with a canonical two-step derivation, a character-level tokenizer, and
//! answer extraction/verification.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TokenId = usize;

pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";
const ANSWER_MARKER: &str = "Answer:";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("symbol not in vocabulary: {symbol:?}")]
    OutOfVocab { symbol: char },
    #[error("token id {0} out of range")]
    UnknownTokenId(usize),
    #[error("dataset line {line}: {reason}")]
    DatasetFormat { line: usize, reason: String },
    #[error("train/test request exceeds the disjoint question pools")]
    PoolExhausted,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Bijective token-string <-> token-id map for the arithmetic task.
pub struct Vocab {
    tokens: Vec<String>,
    by_str: HashMap<String, TokenId>,
    max_token_len: usize,
}

impl Vocab {
    /// The fixed vocabulary: digits, operators, structural markers, a
    /// space, end-of-sequence, and padding.
    pub fn arithmetic() -> Self {
        let mut tokens: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        for t in ["+", "*", "=", ";", "?", "Q:", "A:", ANSWER_MARKER, " "] {
            tokens.push(t.to_string());
        }
        tokens.push(EOS_TOKEN.to_string());
        tokens.push(PAD_TOKEN.to_string());

        let by_str = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let max_token_len = tokens.iter().map(|t| t.len()).max().unwrap();
        Self {
            tokens,
            by_str,
            max_token_len,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.by_str.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str, TaskError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(TaskError::UnknownTokenId(id))
    }

    pub fn eos_id(&self) -> TokenId {
        self.by_str[EOS_TOKEN]
    }

    pub fn pad_id(&self) -> TokenId {
        self.by_str[PAD_TOKEN]
    }

    /// Greedy longest-match tokenization; rejects the first symbol that
    /// starts no vocabulary token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, TaskError> {
        let mut out = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let mut matched = None;
            let max = self.max_token_len.min(bytes.len() - i);
            for len in (1..=max).rev() {
                if let Ok(cand) = std::str::from_utf8(&bytes[i..i + len]) {
                    if let Some(&id) = self.by_str.get(cand) {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    let symbol = text[i..].chars().next().unwrap();
                    return Err(TaskError::OutOfVocab { symbol });
                }
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, TaskError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token(id)?);
        }
        Ok(out)
    }
}

/// Three-way answer verdict used by reward assignment and the contrastive
/// masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Correct,
    WrongExtractable,
    Unextractable,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Outcome::Correct => "correct",
            Outcome::WrongExtractable => "wrong-extractable",
            Outcome::Unextractable => "unextractable",
        };
        f.write_str(s)
    }
}

/// One training triplet: question text, annotated CoT text, gold answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub question: String,
    pub cot: String,
    pub gold: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy)]
struct Question {
    a: i64,
    op1: char,
    b: i64,
    op2: char,
    c: i64,
}

impl Question {
    fn text(&self) -> String {
        format!(
            "Q: {} {} {} {} {} = ? A:",
            self.a, self.op1, self.b, self.op2, self.c
        )
    }

    /// Canonical precedence-ordered two-step derivation. Multiplication
    /// binds tighter; equal-precedence chains evaluate left to right.
    fn derive(&self) -> (String, i64) {
        let (s1l, s1o, s1r, s2o, s2r, first_then_left) =
            if self.op1 == '+' && self.op2 == '*' {
                (self.b, '*', self.c, '+', self.a, false)
            } else {
                (self.a, self.op1, self.b, self.op2, self.c, true)
            };
        let apply = |x: i64, op: char, y: i64| if op == '*' { x * y } else { x + y };
        let p = apply(s1l, s1o, s1r);
        let (l2, r2) = if first_then_left { (p, s2r) } else { (s2r, p) };
        let total = apply(l2, s2o, r2);
        let cot = format!(
            "{s1l} {s1o} {s1r} = {p} ; {l2} {s2o} {r2} = {total} ; {ANSWER_MARKER} {total}"
        );
        (cot, total)
    }
}

/// All questions in a fixed enumeration order. Double multiplication is
/// excluded so every intermediate and final value stays within two digits.
fn question_space() -> Vec<Question> {
    let mut qs = Vec::new();
    for &(op1, op2) in &[('+', '+'), ('+', '*'), ('*', '+')] {
        for a in 0..10 {
            for b in 0..10 {
                for c in 0..10 {
                    qs.push(Question { a, op1, b, op2, c });
                }
            }
        }
    }
    qs
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Generates `n` samples for the given split. The two splits draw from
/// disjoint question pools derived from the same seed, so a train/test
/// pair generated with one seed never shares a question string.
pub fn gen_dataset(n: usize, seed: u64, split: Split) -> Result<Vec<Sample>, TaskError> {
    assert!(n > 0, "dataset size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut space = question_space();
    shuffle(&mut space, &mut rng);
    let test_size = space.len() / 5;
    let pool: &[Question] = match split {
        Split::Test => &space[..test_size],
        Split::Train => &space[test_size..],
    };
    if pool.is_empty() {
        return Err(TaskError::PoolExhausted);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let q = pool[rng.random_range(0..pool.len())];
        let (cot, gold) = q.derive();
        out.push(Sample {
            question: q.text(),
            cot,
            gold,
        });
    }
    Ok(out)
}

/// Extracts the integer after the last `Answer:` marker: skip spaces, then
/// take the maximal digit run. Returns `None` when no marker exists or no
/// digits follow it.
pub fn extract_answer(text: &str) -> Option<i64> {
    let at = text.rfind(ANSWER_MARKER)?;
    let rest = text[at + ANSWER_MARKER.len()..].trim_start_matches(' ');
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        None
    } else {
        // Absurdly long runs cannot match any gold answer; saturate.
        Some(digits.parse::<i64>().unwrap_or(i64::MAX))
    }
}

/// Token-sequence variant of [`extract_answer`].
pub fn extract_answer_tokens(vocab: &Vocab, ids: &[TokenId]) -> Option<i64> {
    let text = vocab.detokenize(ids).ok()?;
    extract_answer(&text)
}

/// Classifies an extracted answer against the gold answer.
pub fn check(extracted: Option<i64>, gold: i64) -> Outcome {
    match extracted {
        None => Outcome::Unextractable,
        Some(v) if v == gold => Outcome::Correct,
        Some(_) => Outcome::WrongExtractable,
    }
}

/// Writes one sample per line: question, CoT, gold answer, tab-separated.
pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<(), TaskError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(f, "{}\t{}\t{}", s.question, s.cot, s.gold)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, TaskError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let mut fields = line.split('\t');
        let (q, c, g) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(q), Some(c), Some(g), None) => (q, c, g),
            _ => {
                return Err(TaskError::DatasetFormat {
                    line: lineno,
                    reason: "expected exactly 3 tab-separated fields".into(),
                })
            }
        };
        let gold: i64 = g.parse().map_err(|_| TaskError::DatasetFormat {
            line: lineno,
            reason: format!("gold answer {g:?} is not an integer"),
        })?;
        if check(extract_answer(c), gold) != Outcome::Correct {
            return Err(TaskError::DatasetFormat {
                line: lineno,
                reason: "annotated CoT does not verify against the gold answer".into(),
            });
        }
        out.push(Sample {
            question: q.to_string(),
            cot: c.to_string(),
            gold,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_example_multiplication_first() {
        let q = Question {
            a: 3,
            op1: '*',
            b: 4,
            op2: '+',
            c: 5,
        };
        let (cot, gold) = q.derive();
        assert_eq!(gold, 17);
        assert_eq!(cot, "3 * 4 = 12 ; 12 + 5 = 17 ; Answer: 17");
    }

    #[test]
    fn precedence_example_right_multiplication() {
        let q = Question {
            a: 2,
            op1: '+',
            b: 3,
            op2: '*',
            c: 4,
        };
        let (cot, gold) = q.derive();
        assert_eq!(gold, 14);
        assert!(cot.starts_with("3 * 4 = 12"));
        assert_eq!(cot, "3 * 4 = 12 ; 2 + 12 = 14 ; Answer: 14");
    }

    #[test]
    fn tokenize_round_trips() {
        let v = Vocab::arithmetic();
        for text in ["17", "", "Q: 3 * 4 + 5 = ? A:", "Answer: 90", "A:Answer:;"] {
            let ids = v.tokenize(text).unwrap();
            assert_eq!(v.detokenize(&ids).unwrap(), text);
        }
        assert_eq!(v.tokenize("17").unwrap().len(), 2);
        assert!(v.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn tokenize_rejects_unknown_symbol() {
        let v = Vocab::arithmetic();
        match v.tokenize("3 x 4") {
            Err(TaskError::OutOfVocab { symbol }) => assert_eq!(symbol, 'x'),
            other => panic!("expected OutOfVocab, got {other:?}"),
        }
    }

    #[test]
    fn generated_corpus_round_trips() {
        let v = Vocab::arithmetic();
        let samples = gen_dataset(1000, 11, Split::Train).unwrap();
        for s in &samples {
            let text = format!("{} {}", s.question, s.cot);
            let ids = v.tokenize(&text).unwrap();
            assert_eq!(v.detokenize(&ids).unwrap(), text);
        }
    }

    #[test]
    fn extract_answer_rules() {
        assert_eq!(extract_answer("3 * 4 = 12 ; Answer: 42"), Some(42));
        assert_eq!(extract_answer("no marker here"), None);
        assert_eq!(extract_answer("Answer: 7 ; Answer: 19"), Some(19));
        assert_eq!(extract_answer("Answer: ;"), None);
        assert_eq!(extract_answer("Answer:90"), Some(90));
    }

    #[test]
    fn check_three_way() {
        assert_eq!(check(Some(17), 17), Outcome::Correct);
        assert_eq!(check(Some(16), 17), Outcome::WrongExtractable);
        assert_eq!(check(None, 17), Outcome::Unextractable);
    }

    #[test]
    fn all_generated_cots_verify() {
        for split in [Split::Train, Split::Test] {
            let samples = gen_dataset(10_000, 3, split).unwrap();
            for s in &samples {
                assert_eq!(check(extract_answer(&s.cot), s.gold), Outcome::Correct);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let train = gen_dataset(2000, 5, Split::Train).unwrap();
        let test = gen_dataset(500, 5, Split::Test).unwrap();
        let train_qs: std::collections::HashSet<_> =
            train.iter().map(|s| s.question.clone()).collect();
        for s in &test {
            assert!(!train_qs.contains(&s.question));
        }
        assert_eq!(train, gen_dataset(2000, 5, Split::Train).unwrap());
        assert_ne!(train, gen_dataset(2000, 6, Split::Train).unwrap());
    }

    #[test]
    fn dataset_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        let samples = gen_dataset(64, 9, Split::Test).unwrap();
        save_dataset(&path, &samples).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn corrupt_dataset_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "q only\n").unwrap();
        match load_dataset(&path) {
            Err(TaskError::DatasetFormat { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected DatasetFormat, got {other:?}"),
        }
    }
}
