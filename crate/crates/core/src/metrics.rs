//! BLEU, Rouge-L and yes/no classification metrics over token sequences.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub const BLEU_MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in seq.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions up to order
/// `min(4, |candidate|)`, times the brevity penalty `exp(1 - r/c)` when the
/// candidate is shorter. A zero match count for n ≥ 2 is smoothed to
/// `1 / (total + 1)`; a zero unigram count gives 0.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let max_order = BLEU_MAX_ORDER.min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total = candidate.len() + 1 - n;
        let matched: usize = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        let precision = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    brevity * (log_sum / max_order as f64).exp()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with equal weight on precision (LCS/|candidate|) and
/// recall (LCS/|reference|).
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Reads a yes/no answer from the first whitespace-delimited word.
pub fn parse_label(text: &str) -> Option<bool> {
    let word = text.split_whitespace().next()?.to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    /// Includes unparseable predictions on "yes" records.
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Predictions that were neither yes nor no.
    pub invalid: usize,
    pub total: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Confusion counts with "yes" as the positive class. An unparseable
/// prediction is always wrong: a false negative on a "yes" record, and only
/// an accuracy miss on a "no" record.
pub fn classification_metrics<S: AsRef<str>>(predictions: &[S], labels: &[bool]) -> Classification {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    let mut c = Classification { total: labels.len(), ..Classification::default() };
    for (pred, &label) in predictions.iter().zip(labels) {
        match (parse_label(pred.as_ref()), label) {
            (Some(true), true) => c.tp += 1,
            (Some(true), false) => c.fp += 1,
            (Some(false), false) => c.tn += 1,
            (Some(false), true) => c.fn_ += 1,
            (None, true) => {
                c.fn_ += 1;
                c.invalid += 1;
            }
            (None, false) => c.invalid += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    c.precision = ratio(c.tp, c.tp + c.fp);
    c.recall = ratio(c.tp, c.tp + c.fn_);
    c.f1 = if c.precision + c.recall > 0.0 { 2.0 * c.precision * c.recall / (c.precision + c.recall) } else { 0.0 };
    c.accuracy = ratio(c.tp + c.tn, c.total);
    c
}

/// Aggregate scores for one task; fields that do not apply stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub records: usize,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub classification: Option<Classification>,
}

/// Scores for one evaluated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub index: usize,
    pub task: String,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub correct: Option<bool>,
}

/// Mean BLEU and Rouge-L over candidate/reference pairs.
pub fn generation_report<T: Eq + Hash>(task: &str, pairs: &[(Vec<T>, Vec<T>)]) -> MetricReport {
    let n = pairs.len();
    let mean = |f: &dyn Fn(&[T], &[T]) -> f64| {
        if n == 0 {
            None
        } else {
            Some(pairs.iter().map(|(c, r)| f(c, r)).sum::<f64>() / n as f64)
        }
    };
    MetricReport {
        task: task.to_string(),
        records: n,
        bleu: mean(&|c, r| bleu(c, r)),
        rouge_l: mean(&|c, r| rouge_l(c, r)),
        classification: None,
    }
}

/// Long-format CSV: `kind,task,index,metric,value`, one row per record metric
/// followed by the aggregate rows.
pub fn write_eval_csv<W: Write>(mut w: W, records: &[RecordScore], reports: &[MetricReport]) -> std::io::Result<()> {
    writeln!(w, "kind,task,index,metric,value")?;
    for r in records {
        if let Some(b) = r.bleu {
            writeln!(w, "record,{},{},bleu,{b}", r.task, r.index)?;
        }
        if let Some(l) = r.rouge_l {
            writeln!(w, "record,{},{},rouge_l,{l}", r.task, r.index)?;
        }
        if let Some(ok) = r.correct {
            writeln!(w, "record,{},{},correct,{}", r.task, r.index, u8::from(ok))?;
        }
    }
    for rep in reports {
        let t = &rep.task;
        writeln!(w, "aggregate,{t},,records,{}", rep.records)?;
        if let Some(b) = rep.bleu {
            writeln!(w, "aggregate,{t},,bleu,{b}")?;
        }
        if let Some(l) = rep.rouge_l {
            writeln!(w, "aggregate,{t},,rouge_l,{l}")?;
        }
        if let Some(c) = &rep.classification {
            let rows: [(&str, f64); 9] = [
                ("tp", c.tp as f64),
                ("fp", c.fp as f64),
                ("tn", c.tn as f64),
                ("fn", c.fn_ as f64),
                ("invalid", c.invalid as f64),
                ("precision", c.precision),
                ("recall", c.recall),
                ("f1", c.f1),
                ("accuracy", c.accuracy),
            ];
            for (name, v) in rows {
                writeln!(w, "aggregate,{t},,{name},{v}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Longest common subsequence by trying every subsequence of `a`.
    fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
        fn is_subseq(s: &[u8], b: &[u8]) -> bool {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        }
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            if sub.len() > best && is_subseq(&sub, b) {
                best = sub.len();
            }
        }
        best
    }

    /// BLEU by scanning every n-gram position directly.
    fn bleu_direct(c: &[u8], r: &[u8]) -> f64 {
        if c.is_empty() {
            return 0.0;
        }
        let order = 4.min(c.len());
        let mut logp = 0.0;
        for n in 1..=order {
            let grams: Vec<&[u8]> = c.windows(n).collect();
            let mut matched = 0;
            for (i, g) in grams.iter().enumerate() {
                if grams[..i].contains(g) {
                    continue;
                }
                let in_c = grams.iter().filter(|x| *x == g).count();
                let in_r = r.windows(n).filter(|x| x == g).count();
                matched += in_c.min(in_r);
            }
            let p = match (matched, n) {
                (0, 1) => return 0.0,
                (0, _) => 1.0 / (grams.len() as f64 + 1.0),
                _ => matched as f64 / grams.len() as f64,
            };
            logp += p.ln() / order as f64;
        }
        let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
        bp * logp.exp()
    }

    fn random_seq(rng: &mut ChaCha8Rng, max: usize, alphabet: u8) -> Vec<u8> {
        let n = rng.gen_range(0..=max);
        (0..n).map(|_| rng.gen_range(0..alphabet)).collect()
    }

    #[test]
    fn rouge_matches_brute_force_lcs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let a = random_seq(&mut rng, 10, 4);
            let b = random_seq(&mut rng, 10, 4);
            assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
        }
    }

    #[test]
    fn rouge_examples() {
        let r = rouge_l(&["a", "c", "d"], &["a", "b", "c", "d"]);
        assert!((r - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(rouge_l::<u8>(&[], &[]), 1.0);
        assert_eq!(rouge_l(&[], &[1]), 0.0);
    }

    #[test]
    fn bleu_matches_direct_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = random_seq(&mut rng, 14, 3);
            let r = random_seq(&mut rng, 14, 3);
            let (a, b) = (bleu(&c, &r), bleu_direct(&c, &r));
            assert!((a - b).abs() < 1e-9, "{c:?} {r:?}: {a} vs {b}");
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&[5, 6, 7, 8, 9, 10], &[5, 6, 7, 8, 9, 10]), 1.0);
        assert_eq!(bleu(&[5, 6], &[5, 6]), 1.0);
        assert_eq!(bleu(&[1, 2, 3], &[4, 5, 6]), 0.0);
        assert_eq!(bleu::<u8>(&[], &[1]), 0.0);
        // Clipped unigrams 1/3; no bigram matches, smoothed to 1/3; no brevity penalty.
        let v = bleu(&["the", "the", "the"], &["the", "cat"]);
        let expected = ((1.0f64 / 3.0).ln() / 3.0 + (1.0f64 / 3.0).ln() / 3.0 + (1.0f64 / 2.0).ln() / 3.0).exp();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn classification_counts() {
        let c = classification_metrics(&["Yes", "garbage"], &[true, false]);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_, c.invalid), (1, 0, 0, 0, 1));
        assert_eq!(c.accuracy, 0.5);
        assert_eq!(c.f1, 1.0);

        let c = classification_metrics(&["maybe so", "no", "YES it is", "no"], &[true, false, true, true]);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_, c.invalid), (1, 0, 1, 2, 1));
        assert!((c.recall - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.precision, 1.0);
        assert_eq!(c.accuracy, 0.5);

        let perfect = classification_metrics(&["yes", "no"], &[true, false]);
        assert_eq!((perfect.f1, perfect.accuracy), (1.0, 1.0));
        let none = classification_metrics(&["no"], &[false]);
        assert_eq!(none.f1, 0.0);
    }

    #[test]
    fn eval_csv_layout() {
        let recs = vec![RecordScore { index: 0, task: "repair".into(), bleu: Some(0.5), rouge_l: Some(1.0), correct: None }];
        let mut rep = generation_report("repair", &[(vec![1, 2], vec![1, 2])]);
        rep.classification = Some(classification_metrics(&["yes"], &[true]));
        let mut buf = Vec::new();
        write_eval_csv(&mut buf, &recs, &[rep]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "kind,task,index,metric,value");
        assert_eq!(lines[1], "record,repair,0,bleu,0.5");
        assert!(lines.contains(&"aggregate,repair,,bleu,1"));
        assert!(lines.contains(&"aggregate,repair,,f1,1"));
    }
}
