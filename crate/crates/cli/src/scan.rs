//! Repository scanning: every function in every C/C++ file gets an Identify query.

use std::io::Write;
use std::path::Path;

use secrepair_core::corpus::extract_functions;
use secrepair_core::dataset::Task;
use secrepair_core::decode::DecodeConfig;
use secrepair_core::metrics::parse_label;
use secrepair_core::model::CausalLM;
use secrepair_core::tokenizer::TokenizerModel;
use serde::{Deserialize, Serialize};

use crate::artifacts::walk_sources;
use crate::error::CliError;
use crate::eval::{prompt_ids, task_decode_config, top_beam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub file: String,
    pub line_start: usize,
    pub function: String,
    /// `yes`, `no`, or `unknown` when the answer parses as neither.
    pub verdict: String,
    /// Probability of the whole top-beam answer under the model.
    pub top_beam_confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanReport {
    pub findings: Vec<Finding>,
    pub files_scanned: usize,
    /// Non-C files and files whose functions could not be extracted.
    pub files_skipped: usize,
}

impl ScanReport {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for f in &self.findings {
            writeln!(w, "{}", serde_json::to_string(f).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }

    pub fn yes_rate(&self) -> f64 {
        if self.findings.is_empty() {
            return 0.0;
        }
        self.findings.iter().filter(|f| f.verdict == "yes").count() as f64 / self.findings.len() as f64
    }
}

pub fn run_scan(
    model: &CausalLM,
    tok: &TokenizerModel,
    source_dir: &Path,
    instruction: &str,
    cfg: &DecodeConfig,
) -> Result<ScanReport, CliError> {
    let (sources, others) = walk_sources(source_dir)?;
    let mut report = ScanReport { files_skipped: others.len(), ..ScanReport::default() };
    for p in &others {
        log::warn!("skipping non-C file {}", p.display());
    }
    let task_cfg = task_decode_config(Task::Identify, cfg);
    for path in sources {
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("{}: {e}; file skipped", path.display());
                report.files_skipped += 1;
                continue;
            }
        };
        let functions = match extract_functions(&text) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("{}: {e}; file skipped", path.display());
                report.files_skipped += 1;
                continue;
            }
        };
        report.files_scanned += 1;
        let file = path.strip_prefix(source_dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
        for f in functions {
            let prompt = prompt_ids(model, tok, instruction, &f.text, &task_cfg);
            let (top, answer) = top_beam(model, tok, &prompt, &task_cfg)?;
            let verdict = match parse_label(&answer) {
                Some(true) => "yes",
                Some(false) => "no",
                None => "unknown",
            };
            report.findings.push(Finding {
                file: file.clone(),
                line_start: f.line_start,
                function: f.name,
                verdict: verdict.to_string(),
                top_beam_confidence: top.logprob_sum.exp(),
            });
        }
    }
    Ok(report)
}
