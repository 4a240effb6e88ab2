//! JSON Lines dataset files.
//!
//! A dataset directory holds one `<split>.jsonl` per split, one sample per
//! line, and a `<split>.header.json` describing vocabulary, answer subsets
//! and bias parameters. Scenes are not stored; they are recovered from the
//! pixels on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vqa_debias_core::datagen::{
    self, Answer, DatasetSplit, Image, QuestionType, Sample, SplitKind, Template, GRID_SIZE,
};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// `H × W × 3`.
    pub image: Vec<Vec<[u8; 3]>>,
    pub question: String,
    pub tokens: Vec<usize>,
    pub qtype: QuestionType,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub vocab: Vec<String>,
    pub answers: Vec<Answer>,
    pub qtype_subsets: BTreeMap<String, Vec<Answer>>,
    pub bias_manifest: BTreeMap<String, Answer>,
    pub rho: f64,
    pub seed: u64,
    pub split: SplitKind,
    pub n: usize,
}

impl SplitHeader {
    pub fn for_split(split: &DatasetSplit) -> Self {
        Self {
            vocab: datagen::QUESTION_WORDS.iter().map(|w| w.to_string()).collect(),
            answers: Answer::ALL.to_vec(),
            qtype_subsets: QuestionType::ALL
                .iter()
                .map(|t| (t.name().to_string(), t.answers().to_vec()))
                .collect(),
            bias_manifest: split.bias_manifest.clone(),
            rho: split.rho,
            seed: split.seed,
            split: split.kind,
            n: split.len(),
        }
    }
}

pub fn samples_path(dir: &Path, kind: SplitKind) -> PathBuf {
    dir.join(format!("{}.jsonl", kind.name()))
}

pub fn header_path(dir: &Path, kind: SplitKind) -> PathBuf {
    dir.join(format!("{}.header.json", kind.name()))
}

impl SampleRecord {
    pub fn from_sample(s: &Sample) -> Self {
        let image = (0..s.image.height)
            .map(|y| (0..s.image.width).map(|x| s.image.pixel(y, x)).collect())
            .collect();
        Self {
            image,
            question: s.question_text.clone(),
            tokens: s.question_tokens.clone(),
            qtype: s.question_type,
            answer: s.answer_id,
        }
    }

    /// Rebuilds the sample, checking every field against the others.
    pub fn into_sample(self) -> std::result::Result<Sample, String> {
        let height = self.image.len();
        let width = self.image.first().map_or(0, Vec::len);
        if self.image.iter().any(|row| row.len() != width) {
            return Err("ragged image rows".into());
        }
        let pixels: Vec<u8> = self.image.iter().flatten().flatten().copied().collect();
        let image = Image::from_pixels(height, width, pixels).map_err(|e| e.to_string())?;
        let template =
            Template::parse(&self.question).ok_or_else(|| format!("unrecognized question `{}`", self.question))?;
        if template.question_type() != self.qtype {
            return Err(format!("question `{}` is not of type {}", self.question, self.qtype));
        }
        let tokens = datagen::tokenize(&self.question).map_err(|e| e.to_string())?;
        if tokens != self.tokens {
            return Err(format!("tokens {:?} do not match the question text", self.tokens));
        }
        let answer = Answer::from_id(self.answer).ok_or_else(|| format!("unknown answer id {}", self.answer))?;
        if !self.qtype.answers().contains(&answer) {
            return Err(format!("answer {answer} is not valid for {}", self.qtype));
        }
        let scene = datagen::decode_scene(&image, GRID_SIZE).map_err(|e| e.to_string())?;
        Ok(Sample {
            image,
            question_text: self.question,
            question_tokens: tokens,
            question_type: self.qtype,
            answer_id: self.answer,
            template,
            scene,
        })
    }
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    w.write_all(b"\n").map_err(io_err(path))
}

/// Writes `<split>.jsonl` and `<split>.header.json` into `dir`.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let samples = samples_path(dir, split.kind);
    let file = fs::File::create(&samples).map_err(io_err(&samples))?;
    let mut w = BufWriter::new(file);
    for s in &split.samples {
        write_json_line(&mut w, &SampleRecord::from_sample(s), &samples)?;
    }
    w.flush().map_err(io_err(&samples))?;

    let header = header_path(dir, split.kind);
    let mut text = serde_json::to_string_pretty(&SplitHeader::for_split(split)).expect("header serializes");
    text.push('\n');
    fs::write(&header, text).map_err(io_err(&header))?;
    Ok(vec![samples, header])
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_header(dir: &Path, kind: SplitKind) -> Result<SplitHeader> {
    let path = header_path(dir, kind);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let header: SplitHeader = serde_json::from_str(&text).map_err(|e| parse_err(&path, e.line(), e.to_string()))?;
    if header.split != kind {
        return Err(parse_err(
            &path,
            1,
            format!("header describes split {}", header.split.name()),
        ));
    }
    if header
        .vocab
        .iter()
        .map(String::as_str)
        .ne(datagen::QUESTION_WORDS.iter().copied())
    {
        return Err(parse_err(&path, 1, "vocabulary differs from this build's"));
    }
    Ok(header)
}

/// Reads one split back. Every line is validated and its scene recovered
/// from the pixels.
pub fn read_split(dir: &Path, kind: SplitKind) -> Result<DatasetSplit> {
    let header = read_header(dir, kind)?;
    let path = samples_path(dir, kind);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut samples = Vec::with_capacity(header.n);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(&path, i + 1, e.to_string()))?;
        samples.push(record.into_sample().map_err(|m| parse_err(&path, i + 1, m))?);
    }
    if samples.len() != header.n {
        return Err(parse_err(
            &path,
            samples.len(),
            format!("header announces {} samples, file holds {}", header.n, samples.len()),
        ));
    }
    Ok(DatasetSplit {
        samples,
        kind,
        rho: header.rho,
        seed: header.seed,
        bias_manifest: header.bias_manifest,
    })
}

/// Identity of a split on disk: SHA-256 over its header and sample files.
pub fn split_id(dir: &Path, kind: SplitKind) -> Result<String> {
    crate::manifest::hash_files(&[header_path(dir, kind), samples_path(dir, kind)])
}
