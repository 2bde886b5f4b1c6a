//! Test-split evaluation: one top-beam generation per record, scored per task.

use std::io::Write;
use std::path::Path;

use secrepair_core::dataset::{encode_prompt, InstructRecord, Task};
use secrepair_core::decode::{beam_search, BeamHypothesis, DecodeConfig};
use secrepair_core::metrics::{bleu, classification_metrics, generation_report, parse_label, rouge_l, write_eval_csv, MetricReport, RecordScore};
use secrepair_core::model::CausalLM;
use secrepair_core::tokenizer::TokenizerModel;

use crate::error::CliError;

/// Generation budget for yes/no answers.
pub const IDENTIFY_MAX_NEW_TOKENS: usize = 8;

/// Decoding settings for `task`: identification answers are capped short.
pub fn task_decode_config(task: Task, base: &DecodeConfig) -> DecodeConfig {
    match task {
        Task::Identify => DecodeConfig { max_new_tokens: base.max_new_tokens.min(IDENTIFY_MAX_NEW_TOKENS), ..base.clone() },
        _ => base.clone(),
    }
}

/// Prompt ids for an instruction and input, leaving room for the generation budget.
pub fn prompt_ids(model: &CausalLM, tok: &TokenizerModel, instruction: &str, input: &str, cfg: &DecodeConfig) -> Vec<u32> {
    let max_len = model.config().max_len;
    let reserve = cfg.max_new_tokens.min(max_len / 2);
    encode_prompt(tok, instruction, input, max_len, reserve)
}

/// Best beam for a prompt, decoded to text without the trailing EOS.
pub fn top_beam(model: &CausalLM, tok: &TokenizerModel, prompt: &[u32], cfg: &DecodeConfig) -> Result<(BeamHypothesis, String), CliError> {
    let mut beams = beam_search(model, prompt, cfg)?;
    let top = beams.swap_remove(0);
    let text = detokenize(tok, top.content(cfg.eos_id))?;
    Ok((top, text))
}

/// Decodes generated ids; byte sequences cut mid-character are repaired lossily.
pub fn detokenize(tok: &TokenizerModel, ids: &[u32]) -> Result<String, CliError> {
    Ok(String::from_utf8_lossy(&tok.decode_bytes(ids)?).into_owned())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOutcome {
    /// One aggregate per task present, in task order.
    pub reports: Vec<MetricReport>,
    pub records: Vec<RecordScore>,
}

impl EvalOutcome {
    pub fn report(&self, task: Task) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.task == task.as_str())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_eval_csv(w, &self.records, &self.reports)
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()
    }
}

/// Scores `records[i]` for every `i` in `indices` (optionally one task only).
/// Identification is scored as yes/no classification; the other tasks by
/// BLEU and Rouge-L between the top beam's token ids and the encoded reference.
pub fn run_eval(
    model: &CausalLM,
    tok: &TokenizerModel,
    records: &[InstructRecord],
    indices: &[usize],
    task_filter: Option<Task>,
    cfg: &DecodeConfig,
) -> Result<EvalOutcome, CliError> {
    let mut out = EvalOutcome::default();
    for task in Task::ALL {
        if task_filter.is_some_and(|t| t != task) {
            continue;
        }
        let chosen: Vec<usize> = indices.iter().copied().filter(|&i| records[i].task == task).collect();
        if chosen.is_empty() {
            continue;
        }
        let task_cfg = task_decode_config(task, cfg);
        let mut predictions = Vec::with_capacity(chosen.len());
        let mut generated = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            let rec = &records[i];
            let prompt = prompt_ids(model, tok, &rec.instruction, &rec.input, &task_cfg);
            let (top, text) = top_beam(model, tok, &prompt, &task_cfg)?;
            generated.push(top.content(task_cfg.eos_id).to_vec());
            predictions.push(text);
        }
        log::info!("evaluated {} {task} records", chosen.len());
        if task == Task::Identify {
            let labels: Vec<bool> = chosen.iter().map(|&i| records[i].output == "yes").collect();
            for ((&i, pred), &label) in chosen.iter().zip(&predictions).zip(&labels) {
                out.records.push(RecordScore {
                    index: i,
                    task: task.to_string(),
                    bleu: None,
                    rouge_l: None,
                    correct: Some(parse_label(pred) == Some(label)),
                });
            }
            out.reports.push(MetricReport {
                task: task.to_string(),
                records: chosen.len(),
                classification: Some(classification_metrics(&predictions, &labels)),
                ..MetricReport::default()
            });
        } else {
            let pairs: Vec<(Vec<u32>, Vec<u32>)> =
                chosen.iter().zip(generated).map(|(&i, ids)| (ids, tok.encode(&records[i].output))).collect();
            for (&i, (c, r)) in chosen.iter().zip(&pairs) {
                out.records.push(RecordScore {
                    index: i,
                    task: task.to_string(),
                    bleu: Some(bleu(c, r)),
                    rouge_l: Some(rouge_l(c, r)),
                    correct: None,
                });
            }
            out.reports.push(generation_report(task.as_str(), &pairs));
        }
    }
    Ok(out)
}
