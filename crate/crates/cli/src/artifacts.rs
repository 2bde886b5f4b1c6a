//! Loading and locating files shared between commands.

use std::path::{Path, PathBuf};

use secrepair_core::checkpoint::load_checkpoint;
use secrepair_core::corpus::{extract_functions, Fragment};
use secrepair_core::dataset::{load_records, InstructRecord, SplitManifest};
use secrepair_core::model::CausalLM;
use secrepair_core::tokenizer::TokenizerModel;
use walkdir::WalkDir;

use crate::error::CliError;

pub const C_EXTENSIONS: &[&str] = &["c", "h", "cc", "cpp", "cxx", "hpp", "hh", "hxx"];

/// The tokenizer saved next to a checkpoint: `<checkpoint>.tokenizer`.
pub fn tokenizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".tokenizer");
    PathBuf::from(s)
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerModel, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!("tokenizer {} not found", path.display())));
    }
    Ok(TokenizerModel::load(path)?)
}

/// Loads a checkpoint and its tokenizer, checking that they agree on the vocabulary.
pub fn load_model(checkpoint: &Path, tokenizer: Option<&Path>) -> Result<(CausalLM, TokenizerModel), CliError> {
    if !checkpoint.exists() {
        return Err(CliError::data(format!("checkpoint {} not found", checkpoint.display())));
    }
    let model = load_checkpoint(checkpoint)?;
    let tok_path = tokenizer.map(Path::to_path_buf).unwrap_or_else(|| tokenizer_path(checkpoint));
    let tok = load_tokenizer(&tok_path)?;
    if tok.vocab_size() != model.config().vocab_size {
        return Err(CliError::Integrity(format!(
            "tokenizer {} has {} entries but the checkpoint expects {}",
            tok_path.display(),
            tok.vocab_size(),
            model.config().vocab_size
        )));
    }
    Ok((model, tok))
}

/// Loads records and their split manifest, rejecting indices that point past the data.
pub fn load_dataset(dataset: &Path, manifest: &Path) -> Result<(Vec<InstructRecord>, SplitManifest), CliError> {
    let records = load_records(dataset).map_err(|e| CliError::data(format!("{}: {e}", dataset.display())))?;
    let split = SplitManifest::load(manifest).map_err(|e| CliError::data(format!("{}: {e}", manifest.display())))?;
    let n = records.len();
    if let Some(&bad) = split.train.iter().chain(&split.valid).chain(&split.test).find(|&&i| i >= n) {
        return Err(CliError::data(format!("manifest index {bad} is out of range for {n} records")));
    }
    Ok((records, split))
}

pub fn is_c_source(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| C_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Regular files under `dir` in sorted order, split into C/C++ sources and the rest.
pub fn walk_sources(dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>), CliError> {
    if !dir.is_dir() {
        return Err(CliError::data(format!("{} is not a directory", dir.display())));
    }
    let mut sources = Vec::new();
    let mut others = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(CliError::data)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.into_path();
        if is_c_source(&path) {
            sources.push(path);
        } else {
            others.push(path);
        }
    }
    Ok((sources, others))
}

/// Every function under `dir`, addressable as `<relative path>:<function name>`.
/// A name repeated within one file is addressed as `<relative path>:<name>:<line>`.
pub fn fragments_from_dir(dir: &Path) -> Result<Vec<Fragment>, CliError> {
    let (sources, others) = walk_sources(dir)?;
    for p in &others {
        log::debug!("ignoring non-C file {}", p.display());
    }
    let mut out: Vec<Fragment> = Vec::new();
    for path in sources {
        let text = std::fs::read_to_string(&path)?;
        let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
        let functions = match extract_functions(&text) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("{}: {e}; file skipped", path.display());
                continue;
            }
        };
        let mut seen = std::collections::HashSet::new();
        for f in functions {
            let id = if seen.insert(f.name.clone()) {
                format!("{rel}:{}", f.name)
            } else {
                format!("{rel}:{}:{}", f.name, f.line_start)
            };
            out.push(Fragment { id, code: f.text, source_file: path.clone(), line_start: f.line_start });
        }
    }
    Ok(out)
}
