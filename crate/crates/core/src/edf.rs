//! EDF recordings and CHB-MIT summary annotations.
//!
//! An EDF file is a 256-byte ASCII header, then 256 bytes of per-signal
//! header fields (stored field-by-field across all signals), then data
//! records. Each data record holds `samples_per_record` little-endian i16
//! samples for every signal in turn.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The 17 montage channels shared by the CHB-MIT recordings, in the order
/// used for every tensor, checkpoint and attention export.
pub const CANONICAL_CHANNELS: [&str; 17] = [
    "P4-O2", "FP2-F4", "P7-O1", "C4-P4", "F7-T7", "C3-P3", "FP1-F7", "F8-T8", "FZ-CZ", "CZ-PZ",
    "F3-C3", "T7-P7", "P8-O2", "FP1-F3", "F4-C4", "FP2-F8", "P3-O1",
];

const FIXED_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl SignalHeader {
    /// A signal with the usual 16-bit digital range.
    pub fn new(label: &str, physical_min: f64, physical_max: f64, samples_per_record: usize) -> Self {
        Self {
            label: label.to_string(),
            transducer: String::new(),
            physical_dimension: "uV".to_string(),
            physical_min,
            physical_max,
            digital_min: -32768,
            digital_max: 32767,
            prefilter: String::new(),
            samples_per_record,
            reserved: String::new(),
        }
    }

    pub fn is_annotation(&self) -> bool {
        self.label.trim().eq_ignore_ascii_case("EDF Annotations")
    }

    fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        f64::from(i32::from(digital) - self.digital_min) * self.gain() + self.physical_min
    }

    /// Inverse of [`to_physical`](Self::to_physical), rounded and clamped to
    /// the digital range.
    pub fn to_digital(&self, physical: f64) -> i16 {
        let d = ((physical - self.physical_min) / self.gain()).round() + f64::from(self.digital_min);
        d.clamp(f64::from(self.digital_min), f64::from(self.digital_max)) as i16
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub reserved: String,
    pub record_count: usize,
    pub record_duration_s: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    pub fn new(signals: Vec<SignalHeader>, record_count: usize, record_duration_s: f64) -> Self {
        Self {
            version: "0".to_string(),
            patient: "X".to_string(),
            recording: "X".to_string(),
            start_date: "01.01.00".to_string(),
            start_time: "00.00.00".to_string(),
            reserved: String::new(),
            record_count,
            record_duration_s,
            signals,
        }
    }

    pub fn header_bytes(&self) -> usize {
        FIXED_HEADER + SIGNAL_HEADER * self.signals.len()
    }

    fn record_samples(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record).sum()
    }
}

/// One named signal in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub label: String,
    pub samples: Vec<f64>,
}

/// The signal channels of one EDF file, in file order. Duplicate labels are
/// kept; [`select_channels`] resolves them.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecord {
    pub case_id: String,
    pub file_id: String,
    pub sampling_rate_hz: f64,
    pub channels: Vec<Channel>,
    pub duration_s: f64,
}

impl EegRecord {
    pub fn sample_count(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeizureAnnotation {
    pub file_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!("truncated: need {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn text(&mut self, n: usize) -> Result<String> {
        let offset = self.pos;
        let raw = self.take(n)?;
        let s = std::str::from_utf8(raw).map_err(|_| Error::Parse {
            offset,
            message: "header field is not ASCII".into(),
        })?;
        Ok(s.trim_end_matches([' ', '\0']).to_string())
    }

    fn number<T: std::str::FromStr>(&mut self, n: usize, what: &str) -> Result<T> {
        let offset = self.pos;
        let s = self.text(n)?;
        s.trim().parse().map_err(|_| Error::Parse {
            offset,
            message: format!("{what} `{s}` is not numeric"),
        })
    }
}

/// Parses a complete EDF file. Annotation signals are dropped; every other
/// signal must share the first signal's sampling rate or it is dropped too.
/// The returned record has empty `case_id`/`file_id`; see [`read_edf`].
pub fn parse_edf(bytes: &[u8]) -> Result<(EdfHeader, EegRecord)> {
    let mut c = Cursor { bytes, pos: 0 };
    let version = c.text(8)?;
    let patient = c.text(80)?;
    let recording = c.text(80)?;
    let start_date = c.text(8)?;
    let start_time = c.text(8)?;
    let header_offset = c.pos;
    let header_bytes: usize = c.number(8, "header byte count")?;
    let reserved = c.text(44)?;
    let count_offset = c.pos;
    let raw_count: i64 = c.number(8, "record count")?;
    let duration_offset = c.pos;
    let record_duration_s: f64 = c.number(8, "record duration")?;
    let ns_offset = c.pos;
    let ns: usize = c.number(4, "signal count")?;
    if ns == 0 {
        return Err(Error::Parse { offset: ns_offset, message: "no signals".into() });
    }
    if header_bytes != FIXED_HEADER + SIGNAL_HEADER * ns {
        return Err(Error::Parse {
            offset: header_offset,
            message: format!("header size {header_bytes} does not match {ns} signals"),
        });
    }
    if !(record_duration_s > 0.0) {
        return Err(Error::Parse {
            offset: duration_offset,
            message: format!("record duration {record_duration_s} must be positive"),
        });
    }

    let labels = fields(&mut c, ns, 16)?;
    let transducers = fields(&mut c, ns, 80)?;
    let dims = fields(&mut c, ns, 8)?;
    let pmins = fields(&mut c, ns, 8)?;
    let pmaxs = fields(&mut c, ns, 8)?;
    let dmins = fields(&mut c, ns, 8)?;
    let dmaxs = fields(&mut c, ns, 8)?;
    let prefilters = fields(&mut c, ns, 80)?;
    let spr = fields(&mut c, ns, 8)?;
    let reserved_sig = fields(&mut c, ns, 32)?;

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let sig = SignalHeader {
            label: labels[i].1.clone(),
            transducer: transducers[i].1.clone(),
            physical_dimension: dims[i].1.clone(),
            physical_min: parse_field(&pmins[i], "physical minimum")?,
            physical_max: parse_field(&pmaxs[i], "physical maximum")?,
            digital_min: parse_field(&dmins[i], "digital minimum")?,
            digital_max: parse_field(&dmaxs[i], "digital maximum")?,
            prefilter: prefilters[i].1.clone(),
            samples_per_record: parse_field(&spr[i], "samples per record")?,
            reserved: reserved_sig[i].1.clone(),
        };
        if sig.digital_min >= sig.digital_max || sig.physical_min == sig.physical_max {
            return Err(Error::Parse {
                offset: dmins[i].0,
                message: format!("signal `{}` has a degenerate calibration range", sig.label),
            });
        }
        signals.push(sig);
    }

    let mut header = EdfHeader {
        version,
        patient,
        recording,
        start_date,
        start_time,
        reserved,
        record_count: 0,
        record_duration_s,
        signals,
    };
    let record_bytes = 2 * header.record_samples();
    let data = bytes.len() - header_bytes;
    header.record_count = if raw_count == -1 && record_bytes > 0 {
        data / record_bytes
    } else {
        usize::try_from(raw_count).map_err(|_| Error::Parse {
            offset: count_offset,
            message: format!("record count {raw_count} is negative"),
        })?
    };
    let expected = header.record_count * record_bytes;
    if data != expected {
        return Err(Error::Parse {
            offset: header_bytes + data.min(expected),
            message: format!(
                "data section is {data} bytes, header declares {} records of {record_bytes} bytes",
                header.record_count
            ),
        });
    }

    let record = decode_signals(&header, &bytes[header_bytes..]);
    Ok((header, record))
}

fn fields(c: &mut Cursor, ns: usize, width: usize) -> Result<Vec<(usize, String)>> {
    (0..ns)
        .map(|_| {
            let at = c.pos;
            c.text(width).map(|s| (at, s))
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>((offset, s): &(usize, String), what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        offset: *offset,
        message: format!("{what} `{s}` is not numeric"),
    })
}

fn decode_signals(header: &EdfHeader, data: &[u8]) -> EegRecord {
    let reference = header.signals.iter().find(|s| !s.is_annotation());
    let rate_spr = reference.map_or(0, |s| s.samples_per_record);
    let mut channels = Vec::new();
    let mut offsets = Vec::new();
    let mut start = 0;
    for s in &header.signals {
        if !s.is_annotation() && s.samples_per_record == rate_spr {
            channels.push(Channel {
                label: s.label.clone(),
                samples: Vec::with_capacity(header.record_count * s.samples_per_record),
            });
            offsets.push(Some(start));
        } else {
            offsets.push(None);
        }
        start += 2 * s.samples_per_record;
    }
    let record_bytes = start;
    for rec in 0..header.record_count {
        let base = rec * record_bytes;
        let mut ch = 0;
        for (s, off) in header.signals.iter().zip(&offsets) {
            let Some(off) = off else { continue };
            let raw = &data[base + off..base + off + 2 * s.samples_per_record];
            channels[ch].samples.extend(
                raw.chunks_exact(2)
                    .map(|b| s.to_physical(i16::from_le_bytes([b[0], b[1]]))),
            );
            ch += 1;
        }
    }
    EegRecord {
        case_id: String::new(),
        file_id: String::new(),
        sampling_rate_hz: rate_spr as f64 / header.record_duration_s,
        channels,
        duration_s: header.record_count as f64 * header.record_duration_s,
    }
}

/// Serializes `record` under `header`. The record's channels must match the
/// header's signals one-to-one, in order, with `record_count` full records.
pub fn write_edf(header: &EdfHeader, record: &EegRecord) -> Result<Vec<u8>> {
    if record.channels.len() != header.signals.len() {
        return Err(Error::Contract(format!(
            "{} channels for {} header signals",
            record.channels.len(),
            header.signals.len()
        )));
    }
    for (s, ch) in header.signals.iter().zip(&record.channels) {
        if s.label != ch.label || ch.samples.len() != s.samples_per_record * header.record_count {
            return Err(Error::Contract(format!(
                "channel `{}` does not match header signal `{}`",
                ch.label, s.label
            )));
        }
    }

    let mut out = Vec::with_capacity(header.header_bytes() + 2 * header.record_samples() * header.record_count);
    put(&mut out, &header.version, 8)?;
    put(&mut out, &header.patient, 80)?;
    put(&mut out, &header.recording, 80)?;
    put(&mut out, &header.start_date, 8)?;
    put(&mut out, &header.start_time, 8)?;
    put(&mut out, &header.header_bytes().to_string(), 8)?;
    put(&mut out, &header.reserved, 44)?;
    put(&mut out, &header.record_count.to_string(), 8)?;
    put(&mut out, &header.record_duration_s.to_string(), 8)?;
    put(&mut out, &header.signals.len().to_string(), 4)?;
    let sig = &header.signals;
    for s in sig {
        put(&mut out, &s.label, 16)?;
    }
    for s in sig {
        put(&mut out, &s.transducer, 80)?;
    }
    for s in sig {
        put(&mut out, &s.physical_dimension, 8)?;
    }
    for s in sig {
        put(&mut out, &s.physical_min.to_string(), 8)?;
    }
    for s in sig {
        put(&mut out, &s.physical_max.to_string(), 8)?;
    }
    for s in sig {
        put(&mut out, &s.digital_min.to_string(), 8)?;
    }
    for s in sig {
        put(&mut out, &s.digital_max.to_string(), 8)?;
    }
    for s in sig {
        put(&mut out, &s.prefilter, 80)?;
    }
    for s in sig {
        put(&mut out, &s.samples_per_record.to_string(), 8)?;
    }
    for s in sig {
        put(&mut out, &s.reserved, 32)?;
    }

    for rec in 0..header.record_count {
        for (s, ch) in sig.iter().zip(&record.channels) {
            let n = s.samples_per_record;
            for &v in &ch.samples[rec * n..(rec + 1) * n] {
                out.extend_from_slice(&s.to_digital(v).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn put(out: &mut Vec<u8>, value: &str, width: usize) -> Result<()> {
    if value.len() > width || !value.is_ascii() {
        return Err(Error::Contract(format!("header value `{value}` does not fit {width} ASCII bytes")));
    }
    out.extend_from_slice(value.as_bytes());
    out.resize(out.len() + width - value.len(), b' ');
    Ok(())
}

/// Reads an EDF file and fills in `file_id` (the file name) and `case_id`
/// (the leading `chbNN` of the name, or the part before the first `_`).
pub fn read_edf(path: &Path) -> Result<(EdfHeader, EegRecord)> {
    let bytes = std::fs::read(path)?;
    let (header, mut record) = parse_edf(&bytes)?;
    record.file_id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    record.case_id = case_id_of(&record.file_id);
    Ok((header, record))
}

pub fn case_id_of(file_id: &str) -> String {
    static CHB: OnceLock<Regex> = OnceLock::new();
    let re = CHB.get_or_init(|| Regex::new(r"(?i)^(chb\d+)").expect("case regex"));
    match re.captures(file_id) {
        Some(c) => c[1].to_lowercase(),
        None => {
            let stem = file_id.rsplit_once('.').map_or(file_id, |(s, _)| s);
            stem.split('_').next().unwrap_or(stem).to_string()
        }
    }
}

fn normalize_label(label: &str) -> String {
    label.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_uppercase()
}

/// Returns `[samples, wanted.len()]` with column `j` holding `wanted[j]`.
/// Labels match case-insensitively with whitespace removed; the first
/// occurrence of a repeated label wins.
pub fn select_channels(record: &EegRecord, wanted: &[&str]) -> Result<Tensor> {
    let normalized: Vec<String> = record.channels.iter().map(|c| normalize_label(&c.label)).collect();
    let mut picks = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for w in wanted {
        let key = normalize_label(w);
        match normalized.iter().position(|n| *n == key) {
            Some(i) => picks.push(&record.channels[i].samples),
            None => missing.push(w.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::ChannelMissing(missing));
    }
    let t = record.sample_count();
    let cols = wanted.len();
    let mut data = vec![0.0; t * cols];
    for (j, samples) in picks.iter().enumerate() {
        for (i, v) in samples.iter().enumerate() {
            data[i * cols + j] = *v;
        }
    }
    Tensor::new(vec![t, cols], data)
}

/// Parses a CHB-MIT `chbXX-summary.txt`. Each `File Name:` line opens a
/// block; the block's declared seizure count must match its start/end
/// lines.
pub fn parse_summary(text: &str) -> Result<Vec<SeizureAnnotation>> {
    static PATTERNS: OnceLock<[Regex; 4]> = OnceLock::new();
    let [file_re, count_re, start_re, end_re] = PATTERNS.get_or_init(|| {
        [
            Regex::new(r"^\s*File Name:\s*(\S+)").unwrap(),
            Regex::new(r"^\s*Number of Seizures in File:\s*(\S+)").unwrap(),
            Regex::new(r"^\s*Seizure(?:\s+\d+)?\s+Start Time:\s*(\S+)\s*(?:seconds)?").unwrap(),
            Regex::new(r"^\s*Seizure(?:\s+\d+)?\s+End Time:\s*(\S+)\s*(?:seconds)?").unwrap(),
        ]
    });

    struct Block {
        file: String,
        count: Option<usize>,
        starts: Vec<f64>,
        ends: Vec<f64>,
    }
    let number = |block: &str, field: &str, s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Annotation {
            block: block.to_string(),
            message: format!("{field} `{s}` is not a number"),
        })
    };

    let mut blocks: Vec<Block> = Vec::new();
    for line in text.lines() {
        if let Some(c) = file_re.captures(line) {
            blocks.push(Block { file: c[1].to_string(), count: None, starts: vec![], ends: vec![] });
            continue;
        }
        let Some(block) = blocks.last_mut() else { continue };
        if let Some(c) = count_re.captures(line) {
            let n = c[1].parse().map_err(|_| Error::Annotation {
                block: block.file.clone(),
                message: format!("seizure count `{}` is not an integer", &c[1]),
            })?;
            block.count = Some(n);
        } else if let Some(c) = start_re.captures(line) {
            block.starts.push(number(&block.file, "start time", &c[1])?);
        } else if let Some(c) = end_re.captures(line) {
            block.ends.push(number(&block.file, "end time", &c[1])?);
        }
    }

    let mut out = Vec::new();
    for b in blocks {
        let err = |message: String| Error::Annotation { block: b.file.clone(), message };
        let count = b.count.ok_or_else(|| err("missing `Number of Seizures in File`".into()))?;
        if b.starts.len() != count || b.ends.len() != count {
            return Err(err(format!(
                "declares {count} seizures but lists {} start and {} end times",
                b.starts.len(),
                b.ends.len()
            )));
        }
        for (&start_s, &end_s) in b.starts.iter().zip(&b.ends) {
            if start_s < 0.0 || end_s <= start_s {
                return Err(err(format!("seizure ends at {end_s} s, not after its start {start_s} s")));
            }
            out.push(SeizureAnnotation { file_id: b.file.clone(), start_s, end_s });
        }
    }
    Ok(out)
}
