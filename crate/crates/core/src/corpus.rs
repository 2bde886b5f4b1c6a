//! C function extraction and vulnerable/repaired pair assembly.
//!
//! Function boundaries come from a signature regex applied at brace depth 0
//! plus brace matching over a neutralized copy of the source, in which
//! comments, string/char literals and preprocessor lines are overwritten with
//! spaces of the same length (newlines kept, so offsets and line numbers agree
//! with the original text).

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unbalanced braces: block opened at line {line} is never closed")]
    UnclosedBlock { line: usize },
    #[error("unbalanced braces: stray closing brace at line {line}")]
    StrayClose { line: usize },
    #[error("metadata references unknown fragment id {0:?}")]
    DanglingReference(String),
    #[error("repaired code for {0:?} is identical to the vulnerable code")]
    IdenticalRepair(String),
    #[error("fragment {0:?} is not a brace-balanced function")]
    Unbalanced(String),
    #[error("sidecar metadata line {line}: {source}")]
    Metadata { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedFunction {
    pub name: String,
    pub text: String,
    pub line_start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionPair {
    pub vulnerable_code: String,
    pub repaired_code: Option<String>,
    pub description: Option<String>,
    pub comment: Option<String>,
    pub source_file: PathBuf,
    pub line_start: usize,
}

/// An extracted function addressable by sidecar metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub id: String,
    pub code: String,
    pub source_file: PathBuf,
    pub line_start: usize,
}

/// One sidecar record: `{"vul_id", "fix_id", "description", "comment"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMetadata {
    pub vul_id: String,
    #[serde(default)]
    pub fix_id: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairingReport {
    /// Pairs with a repaired function; eligible for every task.
    pub repair_pairs: Vec<FunctionPair>,
    /// Vulnerable functions without a fix; identification data only.
    pub vulnerable_only: Vec<FunctionPair>,
    pub excluded_no_fix: usize,
    /// Fragments no metadata record mentions.
    pub unreferenced: usize,
}

/// Overwrites comments, string/char literals and preprocessor directives with
/// spaces. Output has the same byte length and the same newline positions.
pub fn neutralize(src: &str) -> String {
    #[derive(PartialEq)]
    enum St {
        Code,
        Line,
        Block,
        Str,
        Chr,
        Directive,
    }
    let b = src.as_bytes();
    let mut out = b.to_vec();
    let mut st = St::Code;
    let mut line_has_code = false;
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        let next = b.get(i + 1).copied();
        match st {
            St::Code => match c {
                b'/' if next == Some(b'/') => {
                    st = St::Line;
                    out[i] = b' ';
                }
                b'/' if next == Some(b'*') => {
                    st = St::Block;
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    i += 1;
                }
                b'"' => {
                    st = St::Str;
                    out[i] = b' ';
                }
                b'\'' => {
                    st = St::Chr;
                    out[i] = b' ';
                }
                b'#' if !line_has_code => {
                    st = St::Directive;
                    out[i] = b' ';
                }
                b'\n' => line_has_code = false,
                _ if !c.is_ascii_whitespace() => line_has_code = true,
                _ => {}
            },
            St::Line | St::Directive => {
                if c == b'\\' && next == Some(b'\n') {
                    out[i] = b' ';
                    i += 1;
                } else if c == b'\n' {
                    st = St::Code;
                    line_has_code = false;
                } else {
                    out[i] = b' ';
                }
            }
            St::Block => {
                if c == b'*' && next == Some(b'/') {
                    out[i] = b' ';
                    out[i + 1] = b' ';
                    i += 1;
                    st = St::Code;
                } else if c != b'\n' {
                    out[i] = b' ';
                }
            }
            St::Str | St::Chr => {
                let quote = if st == St::Str { b'"' } else { b'\'' };
                if c == b'\\' && next.is_some() {
                    out[i] = b' ';
                    if next != Some(b'\n') {
                        out[i + 1] = b' ';
                    }
                    i += 1;
                } else if c == quote {
                    out[i] = b' ';
                    st = St::Code;
                } else if c == b'\n' {
                    // Unterminated literal; resume scanning on the next line.
                    st = St::Code;
                    line_has_code = false;
                } else {
                    out[i] = b' ';
                }
            }
        }
        i += 1;
    }
    // Multi-byte chars are either untouched or blanked byte for byte.
    String::from_utf8(out).expect("neutralized text stays valid UTF-8")
}

fn signature_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?P<pre>[\w\s\*&:<>,~\[\]]*?[\s\*&])(?P<name>[A-Za-z_~][\w:~]*)\s*\((?P<params>[^{};]*)\)\s*(?:(?:const|noexcept|override|final)\s*)*$",
        )
        .expect("valid signature regex")
    })
}

fn transparent_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // String contents are blanked, so `extern "C"` reads as `extern    `.
    RE.get_or_init(|| Regex::new(r"^(?:namespace(?:\s+[\w:]+)?|extern)\s*$").expect("valid regex"))
}

const NOT_FUNCTIONS: &[&str] = &["if", "for", "while", "switch", "return", "sizeof", "do", "else", "case"];

/// Returns the function name when `header` (text between the previous
/// top-level terminator and a depth-0 `{`) is a function signature.
fn match_signature(header: &str) -> Option<String> {
    let caps = signature_regex().captures(header)?;
    let name = caps.name("name")?.as_str();
    let pre = caps.name("pre")?.as_str().trim();
    if pre.is_empty() || NOT_FUNCTIONS.contains(&name) {
        return None;
    }
    let last = pre.split_whitespace().last().unwrap_or("");
    if matches!(last, "struct" | "union" | "enum" | "class" | "return" | "else") {
        return None;
    }
    Some(name.to_string())
}

fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset].iter().filter(|&&c| c == b'\n').count() + 1
}

/// Extracts every top-level function definition with its 1-based start line.
pub fn extract_functions(file_text: &str) -> Result<Vec<ExtractedFunction>, CorpusError> {
    let clean = neutralize(file_text);
    let b = clean.as_bytes();
    let mut out = Vec::new();
    // Open transparent blocks (namespace / extern "C") as offsets of their `{`.
    let mut transparent: Vec<usize> = Vec::new();
    let mut seg_start = 0;
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b';' => seg_start = i + 1,
            b'}' => {
                if transparent.pop().is_none() {
                    return Err(CorpusError::StrayClose { line: line_of(file_text, i) });
                }
                seg_start = i + 1;
            }
            b'{' => {
                let header = &clean[seg_start..i];
                let trimmed = header.trim();
                if transparent_regex().is_match(trimmed) {
                    transparent.push(i);
                    seg_start = i + 1;
                } else {
                    let close = matching_brace(b, i).ok_or_else(|| CorpusError::UnclosedBlock {
                        line: line_of(file_text, seg_start + (header.len() - header.trim_start().len())),
                    })?;
                    if let Some(name) = match_signature(trimmed) {
                        let start = seg_start + (header.len() - header.trim_start().len());
                        out.push(ExtractedFunction {
                            name,
                            text: file_text[start..=close].to_string(),
                            line_start: line_of(file_text, start),
                        });
                        seg_start = close + 1;
                    }
                    // Non-function blocks (struct bodies, initializers) keep the
                    // segment open until their terminating `;`.
                    i = close;
                }
            }
            _ => {}
        }
        i += 1;
    }
    if let Some(&open) = transparent.last() {
        return Err(CorpusError::UnclosedBlock { line: line_of(file_text, open) });
    }
    Ok(out)
}

fn matching_brace(b: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (k, &c) in b.iter().enumerate().skip(open) {
        match c {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(k);
                }
            }
            _ => {}
        }
    }
    None
}

/// True when the neutralized text has balanced braces, contains at least one
/// block, and never closes more than it opened.
pub fn brace_balanced(code: &str) -> bool {
    let mut depth: i64 = 0;
    let mut opened = false;
    for c in neutralize(code).bytes() {
        match c {
            b'{' => {
                depth += 1;
                opened = true;
            }
            b'}' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0 && opened
}

/// Parses JSON Lines sidecar metadata; blank lines are skipped.
pub fn parse_metadata(text: &str) -> Result<Vec<PairMetadata>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| CorpusError::Metadata { line: i + 1, source }))
        .collect()
}

/// Joins extracted fragments through sidecar metadata.
///
/// Vulnerable functions without a fix are excluded from the repair pairs but
/// kept as identification-only entries.
pub fn pair_functions(fragments: &[Fragment], metadata: &[PairMetadata]) -> Result<PairingReport, CorpusError> {
    let by_id: HashMap<&str, &Fragment> = fragments.iter().map(|f| (f.id.as_str(), f)).collect();
    let mut referenced = std::collections::HashSet::new();
    let mut report = PairingReport::default();
    for meta in metadata {
        let vul = by_id
            .get(meta.vul_id.as_str())
            .ok_or_else(|| CorpusError::DanglingReference(meta.vul_id.clone()))?;
        if !brace_balanced(&vul.code) {
            return Err(CorpusError::Unbalanced(vul.id.clone()));
        }
        referenced.insert(vul.id.as_str());
        let repaired = match &meta.fix_id {
            Some(fix_id) => {
                let fix = by_id
                    .get(fix_id.as_str())
                    .ok_or_else(|| CorpusError::DanglingReference(fix_id.clone()))?;
                if !brace_balanced(&fix.code) {
                    return Err(CorpusError::Unbalanced(fix.id.clone()));
                }
                if fix.code == vul.code {
                    return Err(CorpusError::IdenticalRepair(meta.vul_id.clone()));
                }
                referenced.insert(fix.id.as_str());
                Some(fix.code.clone())
            }
            None => None,
        };
        let pair = FunctionPair {
            vulnerable_code: vul.code.clone(),
            repaired_code: repaired,
            description: meta.description.clone(),
            comment: meta.comment.clone(),
            source_file: vul.source_file.clone(),
            line_start: vul.line_start,
        };
        if pair.repaired_code.is_some() {
            report.repair_pairs.push(pair);
        } else {
            report.excluded_no_fix += 1;
            report.vulnerable_only.push(pair);
        }
    }
    report.unreferenced = fragments.iter().filter(|f| !referenced.contains(f.id.as_str())).count();
    if report.excluded_no_fix > 0 {
        log::info!("{} vulnerable functions have no fix and are excluded from repair data", report.excluded_no_fix);
    }
    Ok(report)
}

/// Injected vulnerability family of a synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    UnboundedCopy,
    OffByOne,
    NullDeref,
}

const VERBS: &[&str] = &["copy", "read", "load", "parse", "store", "fetch", "init", "update", "scan", "build", "fill", "sync"];
const NOUNS: &[&str] = &["name", "path", "header", "token", "label", "entry", "record", "field", "packet", "slot", "key", "user"];
const STR_PARAMS: &[&str] = &["src", "input", "data", "str", "msg", "text"];
const ARR_PARAMS: &[&str] = &["values", "items", "table", "counts", "vec", "row"];
const HELPERS: &[&str] = &["log_value", "emit", "consume", "report", "push", "commit"];
const STRUCTS: &[&str] = &["node", "item", "conn", "session", "entry", "cache"];
const FIELDS: &[&str] = &["len", "id", "value", "flags", "size", "count"];
const SIZES: &[usize] = &[8, 16, 24, 32, 48, 64, 128];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty word list")
}

/// Emits `n` deterministic vulnerable/repaired pairs built from the three
/// templates over randomized scaffolds.
pub fn synthesize_pairs(n: usize, seed: u64) -> Vec<FunctionPair> {
    synthesize_labeled(n, seed).into_iter().map(|(_, p)| p).collect()
}

/// [`synthesize_pairs`] together with the template injected into each pair.
pub fn synthesize_labeled(n: usize, seed: u64) -> Vec<(Template, FunctionPair)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let template = match i % 3 {
                0 => Template::UnboundedCopy,
                1 => Template::OffByOne,
                _ => Template::NullDeref,
            };
            let (vul, fix, desc, comment) = render_template(template, &mut rng);
            let pair = FunctionPair {
                vulnerable_code: vul,
                repaired_code: Some(fix),
                description: Some(desc),
                comment: Some(comment),
                source_file: PathBuf::from(format!("synthetic/{i:05}.c")),
                line_start: 1,
            };
            (template, pair)
        })
        .collect()
}

fn render_template(template: Template, rng: &mut ChaCha8Rng) -> (String, String, String, String) {
    let func = format!("{}_{}", pick(rng, VERBS), pick(rng, NOUNS));
    let helper = pick(rng, HELPERS);
    let size = *SIZES.choose(rng).expect("sizes");
    let preamble = if rng.gen_bool(0.5) { format!("    int status = {};\n", rng.gen_range(0..4)) } else { String::new() };
    let lines = rng.gen_range(1..=3);
    match template {
        Template::UnboundedCopy => {
            let p = pick(rng, STR_PARAMS);
            let head = format!("int {func}(const char *{p}) {{\n{preamble}    char buf[{size}];\n");
            let tail = format!("    return {helper}(buf);\n}}");
            let vul = format!("{head}    strcpy(buf, {p});\n{tail}");
            let fix = format!("{head}    strncpy(buf, {p}, sizeof(buf) - 1);\n    buf[sizeof(buf) - 1] = '\\0';\n{tail}");
            let desc = format!(
                "{func} copies {p} into the {size}-byte stack buffer buf with strcpy and never checks the length, so a longer input overflows buf."
            );
            let comment = ["Bound the copy into buf", "to sizeof(buf) - 1 bytes", "and terminate the string."];
            (vul, fix, desc, comment_lines(&comment, lines))
        }
        Template::OffByOne => {
            let arr = pick(rng, ARR_PARAMS);
            let head = format!("void {func}(int *{arr}, int v) {{\n{preamble}    int tmp[{size}];\n    int i;\n");
            let body = format!("; i++) {{\n        tmp[i] = {arr}[i] + v;\n    }}\n    {helper}(tmp, {size});\n}}");
            let vul = format!("{head}    for (i = 0; i <= {size}{body}");
            let fix = format!("{head}    for (i = 0; i < {size}{body}");
            let desc = format!(
                "The loop in {func} runs while i <= {size}, one past the end of tmp, so the last iteration writes outside the array."
            );
            let comment = ["Stop the loop at i < {size}", "so tmp is never written", "past its last element."];
            let comment: Vec<String> = comment.iter().map(|l| l.replace("{size}", &size.to_string())).collect();
            let refs: Vec<&str> = comment.iter().map(String::as_str).collect();
            (vul, fix, desc, comment_lines(&refs, lines))
        }
        Template::NullDeref => {
            let st = pick(rng, STRUCTS);
            let field = pick(rng, FIELDS);
            let lookup = format!("find_{st}");
            let head = format!("int {func}(struct {st} *p, int key) {{\n{preamble}    struct {st} *n = {lookup}(p, key);\n");
            let tail = format!("    return n->{field};\n}}");
            let vul = format!("{head}{tail}");
            let fix = format!("{head}    if (n == NULL) {{\n        return -1;\n    }}\n{tail}");
            let desc = format!(
                "{func} dereferences the result of {lookup} without checking it, so a missing key leads to a NULL pointer dereference."
            );
            let comment = ["Check the {lookup} result", "for NULL before reading", "n->{field}."];
            let comment: Vec<String> =
                comment.iter().map(|l| l.replace("{lookup}", &lookup).replace("{field}", field)).collect();
            let refs: Vec<&str> = comment.iter().map(String::as_str).collect();
            (vul, fix, desc, comment_lines(&refs, lines))
        }
    }
}

/// Spreads the comment text over `lines` lines (1..=3).
fn comment_lines(parts: &[&str], lines: usize) -> String {
    match lines {
        1 => parts.join(" "),
        2 => format!("{}\n{}", parts[0], parts[1..].join(" ")),
        _ => parts.join("\n"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_function() {
        let f = extract_functions("int f(){return 0;}").unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].line_start, 1);
        assert_eq!(f[0].name, "f");
        assert_eq!(f[0].text, "int f(){return 0;}");
    }

    #[test]
    fn two_functions_around_a_global() {
        let src = "#include <stdio.h>\n\
                   static int a(int x)\n{\n    return x + 1;\n}\n\
                   int counter = 3;\n\
                   struct pt { int x; int y; };\n\
                   char *b(char *s, int n) {\n    if (n) { s[0] = 0; }\n    return s;\n}\n";
        let f = extract_functions(src).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!((f[0].name.as_str(), f[0].line_start), ("a", 2));
        assert_eq!((f[1].name.as_str(), f[1].line_start), ("b", 8));
        assert!(f[0].text.starts_with("static int a(int x)") && f[0].text.ends_with('}'));
        assert!(f[1].text.ends_with("return s;\n}"));
    }

    #[test]
    fn braces_inside_literals_and_comments_are_ignored() {
        let src = "int g(){ char*s=\"}\"; }";
        let f = extract_functions(src).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].text, src);

        let src = "int h(void) {\n  /* } */ char c = '}'; // }\n  return c;\n}\nint k(void) { return '{'; }";
        let f = extract_functions(src).unwrap();
        assert_eq!(f.iter().map(|x| x.name.as_str()).collect::<Vec<_>>(), ["h", "k"]);
    }

    #[test]
    fn skips_initializers_and_control_blocks() {
        let src = "int table[] = { 1, 2, 3 };\nenum e { A, B };\nvoid f(void) { while (1) { } }\n";
        let f = extract_functions(src).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].line_start, 3);
    }

    #[test]
    fn descends_into_extern_c_and_namespaces() {
        let src = "extern \"C\" {\nint f(int a) { return a; }\n}\nnamespace ns {\nint g() { return 1; }\n}\n";
        let f = extract_functions(src).unwrap();
        assert_eq!(f.iter().map(|x| x.name.as_str()).collect::<Vec<_>>(), ["f", "g"]);
    }

    #[test]
    fn unbalanced_input_reports_line() {
        let err = extract_functions("int ok(void) { return 0; }\n\nint bad(void) {\n  if (x) {\n").unwrap_err();
        assert!(matches!(err, CorpusError::UnclosedBlock { line: 3 }), "{err:?}");
        let err = extract_functions("int f(void) { }\n}\n").unwrap_err();
        assert!(matches!(err, CorpusError::StrayClose { line: 2 }));
    }

    #[test]
    fn neutralize_keeps_length_and_lines() {
        let src = "a = \"x\\\"y{\"; // c{\n/* q\n } */ b = '\\''; #x\n#define Q {\\\n }\nz";
        let n = neutralize(src);
        assert_eq!(n.len(), src.len());
        assert_eq!(n.matches('\n').count(), src.matches('\n').count());
        assert!(!n.contains('{') && !n.contains('}'));
        assert!(n.contains("a =") && n.ends_with('z'));
    }

    fn frag(id: &str, code: &str) -> Fragment {
        Fragment { id: id.into(), code: code.into(), source_file: "x.c".into(), line_start: 1 }
    }

    fn meta(vul: &str, fix: Option<&str>) -> PairMetadata {
        PairMetadata {
            vul_id: vul.into(),
            fix_id: fix.map(Into::into),
            description: Some("d".into()),
            comment: Some("c".into()),
        }
    }

    #[test]
    fn pairing_excludes_unfixed() {
        let mut frags = Vec::new();
        let mut metas = Vec::new();
        for i in 0..100 {
            frags.push(frag(&format!("v{i}"), &format!("int v{i}(void) {{ return {i}; }}")));
            if i % 20 == 0 {
                metas.push(meta(&format!("v{i}"), None));
            } else {
                frags.push(frag(&format!("f{i}"), &format!("int v{i}(void) {{ return -{i}; }}")));
                metas.push(meta(&format!("v{i}"), Some(&format!("f{i}"))));
            }
        }
        let report = pair_functions(&frags, &metas).unwrap();
        assert_eq!(report.repair_pairs.len(), 95);
        assert_eq!(report.excluded_no_fix, 5);
        assert_eq!(report.vulnerable_only.len(), 5);
        assert_eq!(report.unreferenced, 0);
    }

    #[test]
    fn pairing_edge_cases() {
        let frags = vec![frag("a", "int a(){return 1;}"), frag("b", "int a(){return 1;}")];
        let report = pair_functions(&frags, &[]).unwrap();
        assert!(report.repair_pairs.is_empty());
        assert_eq!(report.unreferenced, 2);

        assert!(matches!(pair_functions(&frags, &[meta("a", Some("b"))]), Err(CorpusError::IdenticalRepair(_))));
        assert!(matches!(pair_functions(&frags, &[meta("a", Some("zz"))]), Err(CorpusError::DanglingReference(id)) if id == "zz"));
        assert!(matches!(pair_functions(&frags, &[meta("q", None)]), Err(CorpusError::DanglingReference(_))));
    }

    #[test]
    fn metadata_parses_jsonl() {
        let text = "{\"vul_id\":\"a.c:3\",\"fix_id\":\"a.c:9\",\"description\":\"d\",\"comment\":\"c\"}\n\n{\"vul_id\":\"b.c:1\",\"fix_id\":null,\"description\":null,\"comment\":null}\n";
        let m = parse_metadata(text).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].fix_id, None);
        assert!(matches!(parse_metadata("{oops"), Err(CorpusError::Metadata { line: 1, .. })));
    }

    #[test]
    fn synthesis_is_deterministic_and_well_formed() {
        assert_eq!(synthesize_pairs(1, 7), synthesize_pairs(1, 7));
        assert_ne!(synthesize_pairs(6, 7), synthesize_pairs(6, 8));
        let pairs = synthesize_pairs(500, 3);
        assert_eq!(pairs.len(), 500);
        for p in &pairs {
            let fix = p.repaired_code.as_deref().unwrap();
            assert!(brace_balanced(&p.vulnerable_code) && brace_balanced(fix));
            assert_ne!(&p.vulnerable_code, fix);
            let n = p.comment.as_deref().unwrap().lines().count();
            assert!((1..=3).contains(&n));
            assert_eq!(extract_functions(&p.vulnerable_code).unwrap().len(), 1);
            assert_eq!(extract_functions(fix).unwrap().len(), 1);
        }
    }
}
