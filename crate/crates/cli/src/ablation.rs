//! Decoding sweeps over beam width or sampling temperature.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secrepair_core::dataset::InstructRecord;
use secrepair_core::decode::{beam_search, sample_with_rng, DecodeConfig};
use secrepair_core::metrics::{bleu, rouge_l};
use secrepair_core::model::CausalLM;
use secrepair_core::tokenizer::TokenizerModel;

use crate::error::CliError;
use crate::eval::prompt_ids;

pub const BEAM_GRID: [f64; 5] = [1.0, 2.0, 4.0, 6.0, 8.0];
pub const TEMPERATURE_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Sweep {
    Beam,
    Temperature,
}

impl Sweep {
    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Beam => "beam",
            Sweep::Temperature => "temperature",
        }
    }

    pub fn default_grid(self) -> &'static [f64] {
        match self {
            Sweep::Beam => &BEAM_GRID,
            Sweep::Temperature => &TEMPERATURE_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    /// Fastest of the timed repeats, in seconds.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub sweep: Sweep,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sweep,value,bleu,rouge_l,seconds")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", self.sweep.as_str(), r.value, r.bleu, r.rouge_l, r.seconds)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()
    }
}

/// Checks a grid against the sweep: beam widths must be positive integers,
/// temperatures finite and non-negative.
pub fn validate_grid(sweep: Sweep, grid: &[f64]) -> Result<(), CliError> {
    if grid.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    for &v in grid {
        let ok = match sweep {
            Sweep::Beam => v >= 1.0 && v.fract() == 0.0,
            Sweep::Temperature => v.is_finite() && v >= 0.0,
        };
        if !ok {
            return Err(CliError::Usage(format!("{v} is not a valid {} value", sweep.as_str())));
        }
    }
    Ok(())
}

/// Decodes every record at each grid point and reports mean BLEU, mean
/// Rouge-L and wall time. Beam points run beam search at that width;
/// temperature points sample with a generator reseeded from `base.seed`
/// for each record, temperature 0 being greedy. Outputs are identical
/// across repeats, so only the timing uses them.
pub fn run_ablation(
    model: &CausalLM,
    tok: &TokenizerModel,
    records: &[&InstructRecord],
    sweep: Sweep,
    grid: &[f64],
    base: &DecodeConfig,
    repeats: usize,
) -> Result<AblationResult, CliError> {
    validate_grid(sweep, grid)?;
    if records.is_empty() {
        return Err(CliError::data("no records to decode"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let cfg = match sweep {
            Sweep::Beam => DecodeConfig { beam_size: value as usize, ..base.clone() },
            Sweep::Temperature => DecodeConfig { temperature: value, ..base.clone() },
        };
        let mut best = Duration::MAX;
        let mut scores = (0.0, 0.0);
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let mut sum = (0.0, 0.0);
            for rec in records {
                let (b, r) = decode_point(model, tok, rec, sweep, &cfg)?;
                sum.0 += b;
                sum.1 += r;
            }
            best = best.min(start.elapsed());
            scores = sum;
        }
        let n = records.len() as f64;
        log::info!("{} {value}: {:.3}s", sweep.as_str(), best.as_secs_f64());
        rows.push(AblationRow { value, bleu: scores.0 / n, rouge_l: scores.1 / n, seconds: best.as_secs_f64() });
    }
    Ok(AblationResult { sweep, rows })
}

/// BLEU and Rouge-L of one record's generation at one grid point.
fn decode_point(
    model: &CausalLM,
    tok: &TokenizerModel,
    rec: &InstructRecord,
    sweep: Sweep,
    cfg: &DecodeConfig,
) -> Result<(f64, f64), CliError> {
    let prompt = prompt_ids(model, tok, &rec.instruction, &rec.input, cfg);
    let hyp = match sweep {
        Sweep::Beam => beam_search(model, &prompt, cfg)?.swap_remove(0),
        Sweep::Temperature => sample_with_rng(model, &prompt, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let cand = hyp.content(cfg.eos_id);
    let reference = tok.encode(&rec.output);
    Ok((bleu(cand, &reference), rouge_l(cand, &reference)))
}
