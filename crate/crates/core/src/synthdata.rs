//! Synthetic EHR-like cohorts with a planted, controllable label signal,
//! plus the on-disk dataset format.
//!
//! Every patient is a sequence of visits. Positives carry "risk codes" in
//! roughly half of their visits; a `noise_rate` fraction of negatives also
//! carries them at a lower per-visit rate, which makes those negatives hard
//! to separate. Histories of negatives end at a random cutoff inside a
//! longer trajectory.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, substream};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["PAD", "UNK", "CLS", "SEP", "MASK"];

pub const MAX_AGE: u32 = 110;
/// Size of the age table: PAD plus one bin per integer year 0–110.
pub const AGE_VOCAB_SIZE: usize = MAX_AGE as usize + 2;
pub const SEGMENT_VOCAB_SIZE: usize = 2;
pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 256;

/// Per-visit probability that a positive patient's visit carries a risk code.
const POSITIVE_VISIT_RATE: f64 = 0.5;
/// Per-visit probability for negatives selected as noisy.
const NOISY_VISIT_RATE: f64 = 0.2;
/// Exponent of the Zipf law over background codes.
const ZIPF_EXPONENT: f64 = 0.8;

/// Token table of the code channel (special tokens first, PAD = 0) and the
/// separate age channel (PAD = 0, then one bin per integer year).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub code_tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(code_tokens: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(code_tokens.iter().cloned()) {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::config("vocabulary", format!("invalid token {t:?}")));
            }
            if !seen.insert(t.clone()) {
                return Err(Error::config("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { code_tokens })
    }

    /// Vocabulary of `n` opaque codes `C0000, C0001, …`.
    pub fn synthetic(n: usize) -> Self {
        Self {
            code_tokens: (0..n).map(|i| format!("C{i:04}")).collect(),
        }
    }

    /// Size of the code-channel table (specials plus codes).
    pub fn size(&self) -> usize {
        SPECIAL_TOKENS.len() + self.code_tokens.len()
    }

    pub fn n_codes(&self) -> usize {
        self.code_tokens.len()
    }

    pub fn code_id(&self, code_index: usize) -> u32 {
        (SPECIAL_TOKENS.len() + code_index) as u32
    }

    pub fn is_code(&self, id: u32) -> bool {
        (id as usize) >= SPECIAL_TOKENS.len() && (id as usize) < self.size()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let i = id as usize;
        if i < SPECIAL_TOKENS.len() {
            Some(SPECIAL_TOKENS[i])
        } else {
            self.code_tokens.get(i - SPECIAL_TOKENS.len()).map(|s| s.as_str())
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        if let Some(i) = SPECIAL_TOKENS.iter().position(|s| *s == token) {
            return Some(i as u32);
        }
        self.code_tokens
            .iter()
            .position(|s| s == token)
            .map(|i| self.code_id(i))
    }
}

pub fn age_id(years: u32) -> u32 {
    years.min(MAX_AGE) + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub codes: Vec<u32>,
    pub ages: Vec<u32>,
    pub segments: Vec<u8>,
    pub positions: Vec<u32>,
    pub label: u8,
    pub split: Split,
}

impl PatientRecord {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Checks the structural invariants against a vocabulary.
    pub fn validate(&self, vocab: &Vocabulary, max_len: usize) -> Result<()> {
        let fail = |message: String| Error::Validation {
            patient_id: self.patient_id.clone(),
            message,
        };
        let n = self.codes.len();
        if self.ages.len() != n || self.segments.len() != n || self.positions.len() != n {
            return Err(fail(format!(
                "channel lengths differ: codes {n}, ages {}, segments {}, positions {}",
                self.ages.len(),
                self.segments.len(),
                self.positions.len()
            )));
        }
        if n > max_len {
            return Err(fail(format!("sequence length {n} exceeds {max_len}")));
        }
        if n < 2 || self.codes[0] != CLS {
            return Err(fail("sequence must start with CLS and hold at least one visit".into()));
        }
        if self.codes[n - 1] != SEP {
            return Err(fail("sequence must end with SEP".into()));
        }
        if self.label > 1 {
            return Err(fail(format!("label {} is not binary", self.label)));
        }
        for i in 0..n {
            if self.codes[i] as usize >= vocab.size() {
                return Err(fail(format!("code id {} at position {i} is out of range", self.codes[i])));
            }
            if self.ages[i] == 0 || self.ages[i] as usize >= AGE_VOCAB_SIZE {
                return Err(fail(format!("age id {} at position {i} is out of range", self.ages[i])));
            }
            if self.segments[i] > 1 {
                return Err(fail(format!("segment {} at position {i} is not 0/1", self.segments[i])));
            }
            if i > 0 {
                let new_visit = self.codes[i - 1] == SEP;
                let (dp, ds) = (self.positions[i].checked_sub(self.positions[i - 1]), self.segments[i] != self.segments[i - 1]);
                let ok = if new_visit { dp == Some(1) && ds } else { dp == Some(0) && !ds };
                if !ok {
                    return Err(fail(format!(
                        "visit structure broken at position {i}: positions and segments must change exactly at SEP boundaries"
                    )));
                }
            }
        }
        if self.positions[0] != 0 || self.segments[0] != 0 {
            return Err(fail("CLS must have position 0 and segment 0".into()));
        }
        Ok(())
    }
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub positive_rate: f64,
    pub n_codes: usize,
    pub n_risk_codes: usize,
    pub visits_per_patient: CountRange,
    pub codes_per_visit: CountRange,
    pub noise_rate: f64,
    pub seed: u64,
    pub max_sequence_length: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            positive_rate: 0.083,
            n_codes: 100,
            n_risk_codes: 5,
            visits_per_patient: CountRange::new(3, 8),
            codes_per_visit: CountRange::new(1, 3),
            noise_rate: 0.1,
            seed: 1,
            max_sequence_length: DEFAULT_MAX_SEQUENCE_LENGTH,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("cohort.n_patients", "must be positive"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::config("cohort.positive_rate", "must lie in (0, 1)"));
        }
        if self.n_risk_codes == 0 || self.n_risk_codes >= self.n_codes {
            return Err(Error::config(
                "cohort.n_risk_codes",
                "must be at least 1 and below n_codes",
            ));
        }
        for (name, r) in [
            ("cohort.visits_per_patient", self.visits_per_patient),
            ("cohort.codes_per_visit", self.codes_per_visit),
        ] {
            if r.min == 0 || r.min > r.max {
                return Err(Error::config(name, "range must be non-empty and start at 1 or more"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("cohort.noise_rate", "must lie in [0, 1]"));
        }
        // CLS + one visit of maximal size + SEP must fit
        if self.max_sequence_length < self.codes_per_visit.max + 2 {
            return Err(Error::config(
                "cohort.max_sequence_length",
                "too short to hold a single visit",
            ));
        }
        Ok(())
    }
}

/// A generated cohort together with the planted risk codes (as code ids).
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub vocabulary: Vocabulary,
    pub records: Vec<PatientRecord>,
    pub risk_codes: Vec<u32>,
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:07}")
}

/// Deterministic cohort generation; patient `i` depends only on
/// `(seed, i)`.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let vocabulary = Vocabulary::synthetic(config.n_codes);
    let mut rng = substream(config.seed, &[domain::RISK_CODES]);
    let mut risk_idx: Vec<usize> = sample(&mut rng, config.n_codes, config.n_risk_codes).into_vec();
    risk_idx.sort_unstable();
    let risk_codes: Vec<u32> = risk_idx.iter().map(|&i| vocabulary.code_id(i)).collect();
    let risk_set: HashSet<usize> = risk_idx.iter().cloned().collect();
    let background: Vec<u32> = (0..config.n_codes)
        .filter(|i| !risk_set.contains(i))
        .map(|i| vocabulary.code_id(i))
        .collect();
    let zipf = WeightedIndex::new(
        (0..background.len()).map(|r| 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT)),
    )
    .map_err(|e| Error::config("cohort.n_codes", e.to_string()))?;
    let records = (0..config.n_patients)
        .map(|i| generate_patient(config, i, &background, &zipf, &risk_codes))
        .collect();
    Ok(Cohort {
        vocabulary,
        records,
        risk_codes,
    })
}

fn generate_patient(
    config: &CohortConfig,
    index: usize,
    background: &[u32],
    zipf: &WeightedIndex<f64>,
    risk_codes: &[u32],
) -> PatientRecord {
    let mut rng = substream(config.seed, &[domain::COHORT, index as u64]);
    let label = u8::from(rng.random_bool(config.positive_rate));
    let split = if rng.random_bool(0.7) {
        Split::Train
    } else {
        Split::Validation
    };
    let noisy = label == 0 && rng.random_bool(config.noise_rate);
    let history = config.visits_per_patient.draw(&mut rng);
    // negatives: the history is cut at a random point of a longer
    // trajectory; the discarded future still consumes the stream
    let trajectory = if label == 1 {
        history
    } else {
        history + rng.random_range(1..=3)
    };
    let mut visits: Vec<Vec<u32>> = (0..trajectory)
        .map(|_| {
            let k = config.codes_per_visit.draw(&mut rng);
            (0..k).map(|_| background[zipf.sample(&mut rng)]).collect()
        })
        .collect();
    let mut ages = Vec::with_capacity(trajectory);
    let mut age = rng.random_range(40..=80u32);
    for _ in 0..trajectory {
        ages.push(age.min(MAX_AGE));
        age += rng.random_range(0..=2u32);
    }
    visits.truncate(history);
    ages.truncate(history);

    // keep the most recent visits that fit
    let mut total = 1;
    let mut first = visits.len();
    while first > 0 && total + visits[first - 1].len() < config.max_sequence_length {
        total += visits[first - 1].len() + 1;
        first -= 1;
    }
    let visits = &mut visits[first..];
    let ages = &ages[first..];

    let rate = match (label, noisy) {
        (1, _) => POSITIVE_VISIT_RATE,
        (_, true) => NOISY_VISIT_RATE,
        _ => 0.0,
    };
    if rate > 0.0 {
        let mut planted = false;
        for v in visits.iter_mut() {
            if rng.random_bool(rate) {
                let slot = rng.random_range(0..v.len());
                v[slot] = risk_codes[rng.random_range(0..risk_codes.len())];
                planted = true;
            }
        }
        if !planted {
            let vi = rng.random_range(0..visits.len());
            let slot = rng.random_range(0..visits[vi].len());
            visits[vi][slot] = risk_codes[rng.random_range(0..risk_codes.len())];
        }
    }

    let mut rec = PatientRecord {
        patient_id: patient_id(index),
        codes: vec![CLS],
        ages: vec![age_id(ages[0])],
        segments: vec![0],
        positions: vec![0],
        label,
        split,
    };
    for (v, (codes, &a)) in visits.iter().zip(ages).enumerate() {
        for &c in codes.iter().chain(std::iter::once(&SEP)) {
            rec.codes.push(c);
            rec.ages.push(age_id(a));
            rec.segments.push((v % 2) as u8);
            rec.positions.push(v as u32);
        }
    }
    rec
}

/// Number of risk-code occurrences in a record.
pub fn risk_count(record: &PatientRecord, risk_codes: &[u32]) -> usize {
    record.codes.iter().filter(|c| risk_codes.contains(c)).count()
}

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const RECORDS_FILE: &str = "patients.jsonl";

/// Writes `vocab.tsv` (token, id) and `patients.jsonl` (one record per
/// line) into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, vocab: &Vocabulary, records: &[PatientRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vpath = dir.join(VOCAB_FILE);
    let mut out = String::from("token\tid\tchannel\n");
    for id in 0..vocab.size() as u32 {
        out.push_str(&format!("{}\t{id}\tcode\n", vocab.token(id).unwrap()));
    }
    out.push_str("AGE_PAD\t0\tage\n");
    for years in 0..=MAX_AGE {
        out.push_str(&format!("AGE_{years}\t{}\tage\n", age_id(years)));
    }
    fs::write(&vpath, out).map_err(|e| Error::io(&vpath, e))?;

    let rpath = dir.join(RECORDS_FILE);
    let file = fs::File::create(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(&rpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&rpath, e))?;
    Ok(())
}

fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut codes = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse(lineno, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let id: usize = fields[1]
            .parse()
            .map_err(|_| parse(lineno, format!("bad id {:?}", fields[1])))?;
        match fields[2] {
            "code" => {
                if id < SPECIAL_TOKENS.len() {
                    if fields[0] != SPECIAL_TOKENS[id] {
                        return Err(parse(lineno, format!("special token {id} must be {}", SPECIAL_TOKENS[id])));
                    }
                } else if id != SPECIAL_TOKENS.len() + codes.len() {
                    return Err(parse(lineno, format!("code ids must be contiguous, got {id}")));
                } else {
                    codes.push(fields[0].to_string());
                }
            }
            "age" => {}
            other => return Err(parse(lineno, format!("unknown channel {other:?}"))),
        }
    }
    Vocabulary::new(codes)
}

/// Reads a dataset written by [`write_dataset`], validating every record.
pub fn read_dataset(dir: &Path) -> Result<(Vocabulary, Vec<PatientRecord>)> {
    read_dataset_with_limit(dir, DEFAULT_MAX_SEQUENCE_LENGTH)
}

pub fn read_dataset_with_limit(dir: &Path, max_len: usize) -> Result<(Vocabulary, Vec<PatientRecord>)> {
    let vocab = read_vocabulary(&dir.join(VOCAB_FILE))?;
    let rpath = dir.join(RECORDS_FILE);
    let file = fs::File::open(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&rpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: rpath.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate(&vocab, max_len)?;
        records.push(rec);
    }
    Ok((vocab, records))
}
