//! Fixed-length labeled segments, balanced corpora, and the segment archive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;

use crate::edf::{read_edf, parse_summary, select_channels, SeizureAnnotation, CANONICAL_CHANNELS};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

pub const SEGMENT_SECONDS: f64 = 23.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NonSeizure,
    Seizure,
}

impl Label {
    /// Class index used by the model head: non-seizure 0, seizure 1.
    pub fn class(self) -> usize {
        match self {
            Label::NonSeizure => 0,
            Label::Seizure => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 1 {
            Label::Seizure
        } else {
            Label::NonSeizure
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// `[n_sp, n_ch]`
    pub data: Tensor,
    pub label: Label,
    pub case_id: String,
    pub file_id: String,
    pub start_s: f64,
    pub seizure_overlap_s: f64,
}

impl Segment {
    pub fn id(&self) -> String {
        format!("{}@{}", self.file_id, self.start_s)
    }
}

/// Label of the half-open window `[t0, t0 + length_s)`: seizure iff some
/// annotation overlaps it with positive length. Also returns the total
/// overlap in seconds.
pub fn label_segment(t0: f64, length_s: f64, annotations: &[SeizureAnnotation]) -> (Label, f64) {
    let t1 = t0 + length_s;
    let overlap: f64 = annotations
        .iter()
        .map(|a| (a.end_s.min(t1) - a.start_s.max(t0)).max(0.0))
        .sum();
    let label = if overlap > 0.0 { Label::Seizure } else { Label::NonSeizure };
    (label, overlap)
}

/// Cuts `signal: [T, n_ch]` into back-to-back windows of `length_s` seconds
/// from the start; the remainder shorter than one window is dropped.
/// `annotations` are the seizures of this file.
pub fn segment_record(
    signal: &Tensor,
    annotations: &[SeizureAnnotation],
    rate_hz: f64,
    length_s: f64,
    case_id: &str,
    file_id: &str,
) -> Result<Vec<Segment>> {
    if signal.rank() != 2 {
        return Err(Error::Contract(format!("signal must be [T, n_ch], got {:?}", signal.shape())));
    }
    let exact = length_s * rate_hz;
    let n_sp = exact.round() as usize;
    if n_sp == 0 || (exact - n_sp as f64).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "{length_s} s at {rate_hz} Hz is not a whole number of samples"
        )));
    }
    let (t, n_ch) = (signal.shape()[0], signal.shape()[1]);
    let row = n_sp * n_ch;
    (0..t / n_sp)
        .map(|k| {
            let start_s = k as f64 * length_s;
            let (label, seizure_overlap_s) = label_segment(start_s, length_s, annotations);
            Ok(Segment {
                data: Tensor::new(vec![n_sp, n_ch], signal.data()[k * row..(k + 1) * row].to_vec())?,
                label,
                case_id: case_id.to_string(),
                file_id: file_id.to_string(),
                start_s,
                seizure_overlap_s,
            })
        })
        .collect()
}

/// Indices of every seizure entry plus an equally sized uniform sample,
/// without replacement, of the non-seizure entries. Sorted ascending.
pub fn select_balanced(labels: &[Label], seed: u64) -> Result<Vec<usize>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| labels[i] == Label::Seizure);
    if neg.len() < pos.len() {
        return Err(Error::Corpus(format!(
            "{} seizure segments but only {} non-seizure segments to sample from",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = seeds::stream(seed, seeds::SAMPLING, 0);
    let mut picked: Vec<usize> = sample(&mut rng, neg.len(), pos.len()).into_iter().map(|i| neg[i]).collect();
    picked.extend(pos);
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub seizure: usize,
    pub non_seizure: usize,
}

/// How much seizure signal the seizure segments contain.
#[derive(Clone, Debug, PartialEq)]
pub struct SeizureContent {
    pub min_s: f64,
    pub max_s: f64,
    pub fraction_below_7s: f64,
    pub fraction_above_10s: f64,
    pub fraction_above_17s: f64,
}

impl SeizureContent {
    pub fn from_overlaps(overlaps: &[f64]) -> Option<Self> {
        if overlaps.is_empty() {
            return None;
        }
        let n = overlaps.len() as f64;
        let frac = |p: &dyn Fn(f64) -> bool| overlaps.iter().filter(|&&v| p(v)).count() as f64 / n;
        Some(Self {
            min_s: overlaps.iter().copied().fold(f64::INFINITY, f64::min),
            max_s: overlaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            fraction_below_7s: frac(&|v| v < 7.0),
            fraction_above_10s: frac(&|v| v > 10.0),
            fraction_above_17s: frac(&|v| v > 17.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub counts: ClassCounts,
    pub per_case: BTreeMap<String, ClassCounts>,
    pub seed: u64,
    pub skipped_files: Vec<SkippedFile>,
    pub seizure_content: Option<SeizureContent>,
}

impl CorpusManifest {
    pub fn describe(segments: &[Segment], seed: u64) -> Self {
        let mut counts = ClassCounts::default();
        let mut per_case: BTreeMap<String, ClassCounts> = BTreeMap::new();
        let mut overlaps = Vec::new();
        for s in segments {
            let case = per_case.entry(s.case_id.clone()).or_default();
            match s.label {
                Label::Seizure => {
                    counts.seizure += 1;
                    case.seizure += 1;
                    overlaps.push(s.seizure_overlap_s);
                }
                Label::NonSeizure => {
                    counts.non_seizure += 1;
                    case.non_seizure += 1;
                }
            }
        }
        Self {
            counts,
            per_case,
            seed,
            skipped_files: Vec::new(),
            seizure_content: SeizureContent::from_overlaps(&overlaps),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seizure_segments = {}", self.counts.seizure);
        let _ = writeln!(s, "non_seizure_segments = {}", self.counts.non_seizure);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(c) = &self.seizure_content {
            let _ = writeln!(s, "seizure_content_min_s = {}", c.min_s);
            let _ = writeln!(s, "seizure_content_max_s = {}", c.max_s);
            let _ = writeln!(s, "seizure_content_below_7s = {:.4}", c.fraction_below_7s);
            let _ = writeln!(s, "seizure_content_above_10s = {:.4}", c.fraction_above_10s);
            let _ = writeln!(s, "seizure_content_above_17s = {:.4}", c.fraction_above_17s);
        }
        for (case, c) in &self.per_case {
            let _ = writeln!(s, "case {case}: seizure {} non_seizure {}", c.seizure, c.non_seizure);
        }
        for f in &self.skipped_files {
            let _ = writeln!(s, "skipped {}: {}", f.file, f.reason);
        }
        s
    }
}

/// All seizure segments plus an equal number of randomly chosen
/// non-seizure segments, in their original order.
pub fn build_balanced_corpus(segments: Vec<Segment>, seed: u64) -> Result<(Vec<Segment>, CorpusManifest)> {
    let labels: Vec<Label> = segments.iter().map(|s| s.label).collect();
    let mut keep = vec![false; segments.len()];
    for i in select_balanced(&labels, seed)? {
        keep[i] = true;
    }
    let corpus: Vec<Segment> = segments.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect();
    let manifest = CorpusManifest::describe(&corpus, seed);
    Ok((corpus, manifest))
}

/// Outcome of [`segment_directory`].
#[derive(Clone, Debug, Default)]
pub struct ScanReport {
    pub files_parsed: usize,
    pub skipped: Vec<SkippedFile>,
}

/// Walks `dir` recursively, reads every `*-summary.txt` and every `*.edf`,
/// selects `channels`, segments each usable file and hands the segments to
/// `sink` in file-name order. Files that fail to parse or lack a channel
/// are recorded as skipped.
pub fn segment_directory<F>(dir: &Path, channels: &[&str], length_s: f64, mut sink: F) -> Result<ScanReport>
where
    F: FnMut(Segment) -> Result<()>,
{
    let mut edfs = Vec::new();
    let mut summaries = Vec::new();
    collect_files(dir, &mut edfs, &mut summaries)?;
    edfs.sort();
    summaries.sort();

    let mut report = ScanReport::default();
    let mut annotations: Vec<SeizureAnnotation> = Vec::new();
    for path in &summaries {
        let text = std::fs::read_to_string(path)?;
        match parse_summary(&text) {
            Ok(a) => annotations.extend(a),
            Err(e) => report.skipped.push(SkippedFile { file: display_name(path), reason: e.to_string() }),
        }
    }

    for path in &edfs {
        let name = display_name(path);
        let parsed = read_edf(path).and_then(|(_, record)| {
            let signal = select_channels(&record, channels)?;
            Ok((record, signal))
        });
        let (record, signal) = match parsed {
            Ok(v) => v,
            Err(e) => {
                report.skipped.push(SkippedFile { file: name, reason: e.to_string() });
                continue;
            }
        };
        let own: Vec<SeizureAnnotation> = annotations
            .iter()
            .filter(|a| a.file_id.eq_ignore_ascii_case(&record.file_id))
            .cloned()
            .collect();
        let segments = segment_record(
            &signal,
            &own,
            record.sampling_rate_hz,
            length_s,
            &record.case_id,
            &record.file_id,
        );
        match segments {
            Ok(segments) => {
                report.files_parsed += 1;
                for s in segments {
                    sink(s)?;
                }
            }
            Err(e) => report.skipped.push(SkippedFile { file: name, reason: e.to_string() }),
        }
    }
    Ok(report)
}

fn collect_files(dir: &Path, edfs: &mut Vec<PathBuf>, summaries: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, edfs, summaries)?;
            continue;
        }
        let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
        if name.ends_with(".edf") {
            edfs.push(path);
        } else if name.ends_with("-summary.txt") {
            summaries.push(path);
        }
    }
    Ok(())
}

fn display_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Segmentation with the canonical channels and 23 s windows.
pub fn segment_directory_canonical<F>(dir: &Path, sink: F) -> Result<ScanReport>
where
    F: FnMut(Segment) -> Result<()>,
{
    segment_directory(dir, &CANONICAL_CHANNELS, SEGMENT_SECONDS, sink)
}

const MAGIC: &[u8; 5] = b"SEGV1";
/// Offset of the segment count, patched by [`ArchiveWriter::finish`].
const COUNT_OFFSET: u64 = 5;

/// Streaming writer for the segment archive:
/// `"SEGV1"`, u32 count, u32 n_sp, u32 n_ch, then per segment
/// u32-prefixed case id and file id, f64 start, u8 label, f64 overlap, and
/// `n_sp * n_ch` f64 samples, all little-endian.
pub struct ArchiveWriter<W: Write + Seek> {
    out: W,
    n_sp: usize,
    n_ch: usize,
    count: u32,
}

impl ArchiveWriter<BufWriter<File>> {
    pub fn create(path: &Path, n_sp: usize, n_ch: usize) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), n_sp, n_ch)
    }
}

impl<W: Write + Seek> ArchiveWriter<W> {
    pub fn new(mut out: W, n_sp: usize, n_ch: usize) -> Result<Self> {
        out.write_all(MAGIC)?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&to_u32(n_sp)?.to_le_bytes())?;
        out.write_all(&to_u32(n_ch)?.to_le_bytes())?;
        Ok(Self { out, n_sp, n_ch, count: 0 })
    }

    pub fn push(&mut self, s: &Segment) -> Result<()> {
        if s.data.shape() != [self.n_sp, self.n_ch] {
            return Err(Error::Archive(format!(
                "segment {} is {:?}, archive holds [{}, {}]",
                s.id(),
                s.data.shape(),
                self.n_sp,
                self.n_ch
            )));
        }
        for text in [&s.case_id, &s.file_id] {
            self.out.write_all(&to_u32(text.len())?.to_le_bytes())?;
            self.out.write_all(text.as_bytes())?;
        }
        self.out.write_all(&s.start_s.to_le_bytes())?;
        self.out.write_all(&[s.label as u8])?;
        self.out.write_all(&s.seizure_overlap_s.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * s.data.len());
        for v in s.data.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&buf)?;
        self.count = self
            .count
            .checked_add(1)
            .ok_or_else(|| Error::Archive("more than u32::MAX segments".into()))?;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }

    /// Writes the final count into the header, flushes, and hands back the
    /// underlying writer.
    pub fn finish(mut self) -> Result<W> {
        self.out.seek(SeekFrom::Start(COUNT_OFFSET))?;
        self.out.write_all(&self.count.to_le_bytes())?;
        self.out.seek(SeekFrom::End(0))?;
        self.out.flush()?;
        Ok(self.out)
    }
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Archive(format!("{n} does not fit in u32")))
}

pub struct ArchiveReader<R: Read> {
    input: R,
    pub count: usize,
    pub n_sp: usize,
    pub n_ch: usize,
    read: usize,
}

impl ArchiveReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> ArchiveReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Archive("not a SEGV1 archive".into()));
        }
        let count = read_u32(&mut input)? as usize;
        let n_sp = read_u32(&mut input)? as usize;
        let n_ch = read_u32(&mut input)? as usize;
        if n_sp == 0 || n_ch == 0 {
            return Err(Error::Archive(format!("segment shape [{n_sp}, {n_ch}]")));
        }
        Ok(Self { input, count, n_sp, n_ch, read: 0 })
    }

    pub fn next_segment(&mut self) -> Result<Option<Segment>> {
        if self.read == self.count {
            let mut probe = [0u8; 1];
            return match self.input.read(&mut probe)? {
                0 => Ok(None),
                _ => Err(Error::Archive("trailing bytes after last segment".into())),
            };
        }
        let case_id = read_string(&mut self.input)?;
        let file_id = read_string(&mut self.input)?;
        let start_s = read_f64(&mut self.input)?;
        let mut tag = [0u8; 1];
        read_exact(&mut self.input, &mut tag)?;
        let label = match tag[0] {
            0 => Label::NonSeizure,
            1 => Label::Seizure,
            t => return Err(Error::Archive(format!("unknown label byte {t}"))),
        };
        let seizure_overlap_s = read_f64(&mut self.input)?;
        let mut bytes = vec![0u8; 8 * self.n_sp * self.n_ch];
        read_exact(&mut self.input, &mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        self.read += 1;
        Ok(Some(Segment {
            data: Tensor::new(vec![self.n_sp, self.n_ch], data)?,
            label,
            case_id,
            file_id,
            start_s,
            seizure_overlap_s,
        }))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Archive("archive is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(Error::Archive(format!("identifier length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Archive("identifier is not UTF-8".into()))
}

pub fn write_archive(path: &Path, segments: &[Segment]) -> Result<()> {
    let first = segments
        .first()
        .ok_or_else(|| Error::Archive("refusing to write an empty archive".into()))?;
    let mut w = ArchiveWriter::create(path, first.data.shape()[0], first.data.shape()[1])?;
    for s in segments {
        w.push(s)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<Segment>> {
    let mut r = ArchiveReader::open(path)?;
    let mut out = Vec::with_capacity(r.count);
    while let Some(s) = r.next_segment()? {
        out.push(s);
    }
    Ok(out)
}
