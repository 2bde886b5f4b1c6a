//! Instruction triplets for the four tasks, sequence packing and splitting.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::FunctionPair;
use crate::tokenizer::{TokenizerModel, BOS, EOS, SEP};

/// Packed length used for the paper-scale configuration.
pub const PAPER_MAX_LEN: usize = 512;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no seed instructions for task {0:?}")]
    MissingSeeds(Task),
    #[error("record output encodes to zero tokens")]
    EmptyOutput,
    #[error("output of {q} tokens cannot fit in max_len {max_len}")]
    OutputTooLong { q: usize, max_len: usize },
    #[error("max_len must be at least 8, got {0}")]
    MaxLenTooSmall(usize),
    #[error("need at least 10 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("dataset line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Identify,
    Repair,
    Describe,
    Comment,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Identify, Task::Repair, Task::Describe, Task::Comment];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Identify => "identify",
            Task::Repair => "repair",
            Task::Describe => "describe",
            Task::Comment => "comment",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task {s:?} (expected identify, repair, describe or comment)"))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructRecord {
    pub task: Task,
    pub instruction: String,
    pub input: String,
    pub output: String,
    /// Index of the source pair; records sharing a group never straddle splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

impl InstructRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidRecord(format!("{} record: {m}", self.task)));
        if self.instruction.trim().is_empty() {
            return bad("empty instruction");
        }
        if self.input.trim().is_empty() {
            return bad("empty input");
        }
        match self.task {
            Task::Identify if self.output != "yes" && self.output != "no" => bad("output must be yes or no"),
            Task::Comment if !(1..=3).contains(&self.output.lines().count()) => bad("comment must have 1-3 lines"),
            _ if self.output.is_empty() => bad("empty output"),
            _ => Ok(()),
        }
    }

    /// Prompt text before encoding: instruction, newline, context input.
    pub fn prompt_text(&self) -> String {
        prompt_text(&self.instruction, &self.input)
    }
}

pub fn prompt_text(instruction: &str, input: &str) -> String {
    format!("{instruction}\n{input}")
}

pub type SeedInstructions = BTreeMap<Task, Vec<String>>;

/// Twenty seed instructions per task.
pub fn default_seed_instructions() -> SeedInstructions {
    let identify = [
        "Is this code vulnerable? Answer yes or no.",
        "Does the following function contain a security vulnerability?",
        "Identify whether this C function is vulnerable.",
        "Answer yes if the code below has a vulnerability, otherwise no.",
        "Check this function for a memory-safety bug.",
        "Is there an exploitable flaw in this code?",
        "Decide whether the function is vulnerable.",
        "Does this code need a security fix?",
        "Classify the function as vulnerable or not.",
        "Can this function be exploited by an attacker?",
        "Is this implementation safe? Answer yes if it is vulnerable.",
        "Report whether the snippet contains a vulnerability.",
        "Does the code below have a CWE weakness?",
        "Is the following C code insecure?",
        "Tell me if this function is vulnerable.",
        "Audit this function: is it vulnerable?",
        "Would a security review flag this function?",
        "Does this function contain undefined behaviour an attacker could use?",
        "Is a vulnerability present in this code?",
        "Vulnerable or not?",
    ];
    let repair = [
        "Repair the vulnerability in this function.",
        "Fix the security bug in the following code.",
        "Rewrite this function so that it is no longer vulnerable.",
        "Provide a patched version of this code.",
        "Remove the vulnerability from the function below.",
        "Make this C function safe.",
        "Patch the flaw in this code.",
        "Return the repaired function.",
        "Correct the memory-safety issue in this function.",
        "Generate a secure version of the code.",
        "Apply a minimal fix to this vulnerable function.",
        "How should this function be fixed? Give the code.",
        "Harden this function against the vulnerability.",
        "Write the fixed code for this function.",
        "Eliminate the security weakness in this snippet.",
        "Produce a vulnerability-free version of this function.",
        "Fix this code.",
        "Repair the following C function.",
        "Suggest the patched function.",
        "Resolve the vulnerability and return the code.",
    ];
    let describe = [
        "Describe the vulnerability in this function.",
        "Explain why this code is vulnerable.",
        "What is the security problem in the following function?",
        "Give a developer-friendly description of the flaw.",
        "Explain the vulnerability to a developer.",
        "What goes wrong in this code?",
        "Summarize the weakness in this function.",
        "Describe how this function can be exploited.",
        "Why is this function unsafe?",
        "Write a description of the bug in this code.",
        "Explain the root cause of the vulnerability.",
        "What does an attacker gain from this function?",
        "Describe the security issue in plain words.",
        "Explain the flaw in the following C code.",
        "Provide a vulnerability description for this function.",
        "Tell the developer what is wrong with this code.",
        "Characterize the vulnerability in this snippet.",
        "What kind of vulnerability is present here?",
        "Document the weakness in this function.",
        "Explain the bug.",
    ];
    let comment = [
        "Write a short code comment for this vulnerability description.",
        "Condense this description into a commit comment.",
        "Summarize the description as a one to three line comment.",
        "Write a commit message for this fix.",
        "Turn this description into a concise code comment.",
        "Give a brief comment a developer can place at the fix.",
        "Shorten this vulnerability description.",
        "Write a comment for the repair.",
        "Compress the description into a comment.",
        "Provide a concise commit comment.",
        "Write a brief note about this fix.",
        "Summarize this in a short comment.",
        "Write a code comment describing the fix.",
        "What comment should accompany this patch?",
        "Give a concise version of this description.",
        "Write the commit comment.",
        "Make this description short enough for a code comment.",
        "Condense the explanation.",
        "Write a one-line summary of the fix.",
        "Comment on this fix briefly.",
    ];
    [
        (Task::Identify, &identify[..]),
        (Task::Repair, &repair[..]),
        (Task::Describe, &describe[..]),
        (Task::Comment, &comment[..]),
    ]
    .into_iter()
    .map(|(t, xs)| (t, xs.iter().map(|s| s.to_string()).collect()))
    .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOutcome {
    pub records: Vec<InstructRecord>,
    /// Records dropped because their description or comment was missing or
    /// violated the record invariants.
    pub skipped: usize,
}

/// Expands pairs into instruction records. Per pair: identify/yes on the
/// vulnerable code, identify/no on the repair, repair, describe and comment.
pub fn build_records(pairs: &[FunctionPair], seeds: &SeedInstructions, seed: u64) -> Result<BuildOutcome, DatasetError> {
    for task in Task::ALL {
        if seeds.get(&task).is_none_or(Vec::is_empty) {
            return Err(DatasetError::MissingSeeds(task));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BuildOutcome::default();
    let push = |out: &mut BuildOutcome, rng: &mut ChaCha8Rng, task: Task, input: &str, output: &str, group: usize| {
        let instruction = seeds[&task].choose(rng).expect("non-empty seeds").clone();
        let rec = InstructRecord { task, instruction, input: input.to_string(), output: output.to_string(), group: Some(group) };
        match rec.validate() {
            Ok(()) => out.records.push(rec),
            Err(e) => {
                log::warn!("skipping record: {e}");
                out.skipped += 1;
            }
        }
    };
    for (g, pair) in pairs.iter().enumerate() {
        push(&mut out, &mut rng, Task::Identify, &pair.vulnerable_code, "yes", g);
        if let Some(fix) = &pair.repaired_code {
            push(&mut out, &mut rng, Task::Identify, fix, "no", g);
            push(&mut out, &mut rng, Task::Repair, &pair.vulnerable_code, fix, g);
        }
        match &pair.description {
            Some(d) => push(&mut out, &mut rng, Task::Describe, &pair.vulnerable_code, d, g),
            None => out.skipped += 1,
        }
        match (&pair.description, &pair.comment) {
            (Some(d), Some(c)) => push(&mut out, &mut rng, Task::Comment, d, c, g),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Which next-token targets contribute to the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Every position after `BOS`.
    #[default]
    Full,
    /// Only the output tokens and the closing `EOS`.
    OutputOnly,
}

/// `[BOS, t_1..t_p, SEP, y_1..y_q, EOS]` with a per-position target mask:
/// `loss_mask[j]` says whether predicting `ids[j]` from `ids[..j]` is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<u32>,
    pub p: usize,
    pub q: usize,
    pub loss_mask: Vec<bool>,
}

impl PackedSequence {
    pub fn new(input: &[u32], output: &[u32], mode: LossMode) -> Self {
        let (p, q) = (input.len(), output.len());
        let mut ids = Vec::with_capacity(p + q + 3);
        ids.push(BOS);
        ids.extend_from_slice(input);
        ids.push(SEP);
        ids.extend_from_slice(output);
        ids.push(EOS);
        let first_scored = match mode {
            LossMode::Full => 1,
            LossMode::OutputOnly => p + 2,
        };
        let loss_mask = (0..ids.len()).map(|j| j >= first_scored).collect();
        Self { ids, p, q, loss_mask }
    }

    /// `BOS`, input tokens and `SEP`: what the model is conditioned on.
    pub fn prompt(&self) -> &[u32] {
        &self.ids[..self.p + 2]
    }

    pub fn input_tokens(&self) -> &[u32] {
        &self.ids[1..self.p + 1]
    }

    pub fn output_tokens(&self) -> &[u32] {
        &self.ids[self.p + 2..self.p + 2 + self.q]
    }

    pub fn scored_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Encodes and packs a record, dropping input tokens from the left when the
/// sequence would exceed `max_len`. The output is never truncated.
pub fn pack_sequence(rec: &InstructRecord, tok: &TokenizerModel, max_len: usize, mode: LossMode) -> Result<PackedSequence, DatasetError> {
    if max_len < 8 {
        return Err(DatasetError::MaxLenTooSmall(max_len));
    }
    let output = tok.encode(&rec.output);
    if output.is_empty() {
        return Err(DatasetError::EmptyOutput);
    }
    if output.len() + 3 > max_len {
        return Err(DatasetError::OutputTooLong { q: output.len(), max_len });
    }
    let input = tok.encode(&rec.prompt_text());
    let keep = (max_len - 3 - output.len()).min(input.len());
    Ok(PackedSequence::new(&input[input.len() - keep..], &output, mode))
}

/// Prompt ids for generation: `BOS`, left-truncated prompt text, `SEP`,
/// leaving room for `reserve` generated tokens within `max_len`.
pub fn encode_prompt(tok: &TokenizerModel, instruction: &str, input: &str, max_len: usize, reserve: usize) -> Vec<u32> {
    let body = tok.encode(&prompt_text(instruction, input));
    let keep = max_len.saturating_sub(2 + reserve).min(body.len());
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend_from_slice(&body[body.len() - keep..]);
    ids.push(SEP);
    ids
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).map_err(|source| DatasetError::Json { line: 0, source })?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Json { line: 0, source })
    }
}

/// Shuffles record groups by `seed` and cuts them 80:10:10 by cumulative
/// record count. Records without a group are their own group.
pub fn split_dataset(records: &[InstructRecord], seed: u64) -> Result<SplitManifest, DatasetError> {
    let n = records.len();
    if n < 10 {
        return Err(DatasetError::TooFewRecords(n));
    }
    let mut groups: BTreeMap<(bool, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = match r.group {
            Some(g) => (true, g),
            None => (false, i),
        };
        groups.entry(key).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = (n as f64 * 0.8).round() as usize;
    let n_valid = (n as f64 * 0.1).round() as usize;
    let mut manifest = SplitManifest { train: Vec::new(), valid: Vec::new(), test: Vec::new(), seed };
    let mut seen = 0;
    for g in groups {
        let bucket = if seen < n_train {
            &mut manifest.train
        } else if seen < n_train + n_valid {
            &mut manifest.valid
        } else {
            &mut manifest.test
        };
        seen += g.len();
        bucket.extend(g);
    }
    Ok(manifest)
}

pub fn write_records<W: Write>(mut w: W, records: &[InstructRecord]) -> Result<(), DatasetError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|source| DatasetError::Json { line: 0, source })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<InstructRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructRecord = serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[InstructRecord]) -> Result<(), DatasetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<InstructRecord>, DatasetError> {
    read_records(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthesize_pairs;
    use crate::tokenizer::{train_bpe, NUM_SPECIALS};
    use std::collections::HashSet;

    fn one_seed_each() -> SeedInstructions {
        Task::ALL.into_iter().map(|t| (t, vec![format!("Do {t}.")])).collect()
    }

    fn rec(task: Task, input: &str, output: &str) -> InstructRecord {
        InstructRecord { task, instruction: "Fix.".into(), input: input.into(), output: output.into(), group: None }
    }

    #[test]
    fn one_full_pair_gives_five_records() {
        let pairs = synthesize_pairs(1, 1);
        let out = build_records(&pairs, &one_seed_each(), 0).unwrap();
        assert_eq!(out.records.len(), 5);
        assert_eq!(out.skipped, 0);
        let tasks: Vec<Task> = out.records.iter().map(|r| r.task).collect();
        assert_eq!(tasks, [Task::Identify, Task::Identify, Task::Repair, Task::Describe, Task::Comment]);
        assert_eq!(out.records[0].output, "yes");
        assert_eq!(out.records[1].output, "no");
        assert_eq!(out.records[4].input, pairs[0].description.clone().unwrap());
    }

    #[test]
    fn unfixed_pair_has_no_repair_record() {
        let mut pairs = synthesize_pairs(1, 1);
        pairs[0].repaired_code = None;
        pairs[0].comment = None;
        let out = build_records(&pairs, &one_seed_each(), 0).unwrap();
        assert!(out.records.iter().all(|r| r.task != Task::Repair));
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn missing_seeds_are_rejected() {
        let mut seeds = one_seed_each();
        seeds.insert(Task::Describe, vec![]);
        assert!(matches!(build_records(&[], &seeds, 0), Err(DatasetError::MissingSeeds(Task::Describe))));
    }

    #[test]
    fn default_seeds_have_twenty_per_task() {
        let seeds = default_seed_instructions();
        for t in Task::ALL {
            assert_eq!(seeds[&t].len(), 20);
        }
    }

    #[test]
    fn record_invariants() {
        assert!(rec(Task::Identify, "int f(){}", "maybe").validate().is_err());
        assert!(rec(Task::Identify, "int f(){}", "no").validate().is_ok());
        assert!(rec(Task::Comment, "d", "a\nb\nc\nd").validate().is_err());
        assert!(rec(Task::Comment, "d", "a\nb").validate().is_ok());
        assert!(rec(Task::Repair, "", "x").validate().is_err());
    }

    #[test]
    fn packing_layout_by_construction() {
        let s = PackedSequence::new(&[5, 6], &[7], LossMode::Full);
        assert_eq!(s.ids, vec![1, 5, 6, 2, 7, 3]);
        assert_eq!((s.p, s.q), (2, 1));
        assert_eq!(s.loss_mask, vec![false, true, true, true, true, true]);
        let s = PackedSequence::new(&[5, 6], &[7], LossMode::OutputOnly);
        assert_eq!(s.loss_mask, vec![false, false, false, false, true, true]);
        assert_eq!(s.prompt(), &[1, 5, 6, 2]);
        assert_eq!(s.output_tokens(), &[7]);
    }

    #[test]
    fn packing_truncates_input_from_the_left() {
        let tok = TokenizerModel::byte_level();
        let r = rec(Task::Repair, "abcdefghijklmnopqrstuvwxyz", "XYZ");
        let s = pack_sequence(&r, &tok, 12, LossMode::Full).unwrap();
        assert_eq!(s.ids.len(), 12);
        assert_eq!((s.p, s.q), (6, 3));
        assert_eq!(tok.decode(s.input_tokens()).unwrap(), "uvwxyz");
        assert_eq!(tok.decode(s.output_tokens()).unwrap(), "XYZ");

        assert!(matches!(pack_sequence(&rec(Task::Repair, "a", ""), &tok, 12, LossMode::Full), Err(DatasetError::EmptyOutput)));
        assert!(matches!(pack_sequence(&r, &tok, 4, LossMode::Full), Err(DatasetError::MaxLenTooSmall(4))));
        let long = rec(Task::Repair, "a", "0123456789");
        assert!(matches!(pack_sequence(&long, &tok, 12, LossMode::Full), Err(DatasetError::OutputTooLong { .. })));
    }

    #[test]
    fn packed_records_decode_back() {
        let pairs = synthesize_pairs(12, 4);
        let out = build_records(&pairs, &default_seed_instructions(), 9).unwrap();
        let corpus: Vec<String> = out.records.iter().flat_map(|r| [r.prompt_text(), r.output.clone()]).collect();
        let tok = train_bpe(&corpus, 400).unwrap();
        for r in &out.records {
            let s = pack_sequence(r, &tok, PAPER_MAX_LEN, LossMode::Full).unwrap();
            assert_eq!(s.ids.len(), s.p + s.q + 3);
            assert_eq!(s.ids.iter().filter(|&&id| id == SEP).count(), 1);
            assert!(s.input_tokens().iter().chain(s.output_tokens()).all(|&id| id >= NUM_SPECIALS));
            assert_eq!(tok.decode(s.input_tokens()).unwrap(), r.prompt_text());
            assert_eq!(tok.decode(s.output_tokens()).unwrap(), r.output);
        }
    }

    #[test]
    fn split_of_singletons_is_exact() {
        let records: Vec<_> = (0..100).map(|i| rec(Task::Identify, &format!("int f{i}(){{}}"), "yes")).collect();
        let m = split_dataset(&records, 3).unwrap();
        assert_eq!((m.train.len(), m.valid.len(), m.test.len()), (80, 10, 10));
        assert_eq!(m, split_dataset(&records, 3).unwrap());
        assert_ne!(m, split_dataset(&records, 4).unwrap());
        let all: HashSet<usize> = m.train.iter().chain(&m.valid).chain(&m.test).copied().collect();
        assert_eq!(all.len(), 100);
        assert!(matches!(split_dataset(&records[..9], 0), Err(DatasetError::TooFewRecords(9))));
    }

    #[test]
    fn split_keeps_groups_together() {
        let pairs = synthesize_pairs(60, 2);
        let records = build_records(&pairs, &one_seed_each(), 0).unwrap().records;
        let m = split_dataset(&records, 11).unwrap();
        let which = |i: usize| {
            if m.train.contains(&i) {
                0
            } else if m.valid.contains(&i) {
                1
            } else {
                assert!(m.test.contains(&i));
                2
            }
        };
        let mut by_group: BTreeMap<usize, HashSet<u8>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_group.entry(r.group.unwrap()).or_default().insert(which(i));
        }
        assert!(by_group.values().all(|s| s.len() == 1));
        assert_eq!(m.train.len() + m.valid.len() + m.test.len(), records.len());
        let frac = m.train.len() as f64 / records.len() as f64;
        assert!((frac - 0.8).abs() < 0.05, "{frac}");
    }

    #[test]
    fn jsonl_round_trip() {
        let records = build_records(&synthesize_pairs(3, 5), &one_seed_each(), 1).unwrap().records;
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"task\":\"identify\",\"instruction\":"));
        assert_eq!(read_records(&buf[..]).unwrap(), records);
    }
}
