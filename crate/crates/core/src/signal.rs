//! Vibration batches: ingestion, standardization and chronological splits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Ground-truth state of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal = 0,
    Anomalous = 1,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// One timestamped multi-channel recording, stored row-major (`T × d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VibrationBatch {
    pub machine_id: String,
    pub batch_index: usize,
    timesteps: usize,
    channels: usize,
    data: Vec<f64>,
    pub label: Option<Label>,
}

impl VibrationBatch {
    /// Builds a batch from row-major samples, enforcing `T ≥ 2`, `d ≥ 1` and
    /// finiteness.
    pub fn new(
        machine_id: impl Into<String>,
        batch_index: usize,
        channels: usize,
        data: Vec<f64>,
        label: Option<Label>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Validation("a batch needs at least one channel".into()));
        }
        if data.len() % channels != 0 {
            return Err(Error::Validation(format!(
                "{} values do not fill rows of {} channels",
                data.len(),
                channels
            )));
        }
        let timesteps = data.len() / channels;
        if timesteps < 2 {
            return Err(Error::Validation(format!(
                "batch {batch_index} has {timesteps} timesteps, at least 2 are required"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "batch {batch_index} has a non-finite value at timestep {}, channel {}",
                pos / channels,
                pos % channels
            )));
        }
        Ok(VibrationBatch {
            machine_id: machine_id.into(),
            batch_index,
            timesteps,
            channels,
            data,
            label,
        })
    }

    /// Builds a batch from per-timestep rows.
    pub fn from_rows(
        machine_id: impl Into<String>,
        batch_index: usize,
        rows: &[Vec<f64>],
        label: Option<Label>,
    ) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::Validation("rows have unequal lengths".into()));
        }
        Self::new(machine_id, batch_index, channels, rows.concat(), label)
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Sample vector at timestep `t`.
    pub fn sample(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn channel(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_anomalous(&self) -> bool {
        self.label.is_some_and(Label::is_anomalous)
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        VibrationBatch {
            timesteps: data.len() / self.channels,
            data,
            machine_id: self.machine_id.clone(),
            ..*self
        }
    }

    /// Cuts the batch into windows of `len` timesteps advancing by `stride`.
    /// Every window inherits the batch label and index. A trailing partial
    /// window is dropped.
    pub fn windows(&self, len: usize, stride: usize) -> Result<Vec<VibrationBatch>> {
        if len < 2 || stride == 0 {
            return Err(Error::Config(format!(
                "window length must be at least 2 and stride positive (got {len}, {stride})"
            )));
        }
        if len > self.timesteps {
            return Err(Error::Config(format!(
                "window length {len} exceeds batch length {}",
                self.timesteps
            )));
        }
        let d = self.channels;
        Ok((0..=self.timesteps - len)
            .step_by(stride)
            .map(|start| self.with_data(self.data[start * d..(start + len) * d].to_vec()))
            .collect())
    }
}

/// Per-channel standardization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_channel_mean: Vec<f64>,
    pub per_channel_std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(channels: usize) -> Self {
        NormalizationStats {
            per_channel_mean: vec![0.0; channels],
            per_channel_std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.per_channel_mean.len()
    }

    fn check(&self, batch: &VibrationBatch) -> Result<()> {
        if batch.channels() != self.channels() {
            return Err(Error::dimension(
                "normalization channels",
                self.channels(),
                batch.channels(),
            ));
        }
        Ok(())
    }

    /// Undoes [`apply_normalizer`].
    pub fn invert(&self, batch: &VibrationBatch) -> Result<VibrationBatch> {
        self.check(batch)?;
        let d = self.channels();
        let data = batch
            .data
            .iter()
            .enumerate()
            .map(|(k, &v)| v * self.per_channel_std[k % d] + self.per_channel_mean[k % d])
            .collect();
        Ok(batch.with_data(data))
    }
}

/// Pooled per-channel mean and population standard deviation over every
/// timestep of every batch.
pub fn fit_normalizer(batches: &[VibrationBatch]) -> Result<NormalizationStats> {
    let first = batches
        .first()
        .ok_or_else(|| Error::InsufficientData("cannot fit a normalizer on zero batches".into()))?;
    let d = first.channels();
    if let Some(b) = batches.iter().find(|b| b.channels() != d) {
        return Err(Error::dimension(
            format!("channels of batch {}", b.batch_index),
            d,
            b.channels(),
        ));
    }
    let count = batches.iter().map(|b| b.timesteps()).sum::<usize>() as f64;

    let mut mean = vec![0.0; d];
    for row in batches.iter().flat_map(|b| b.rows()) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);

    let mut var = vec![0.0; d];
    for row in batches.iter().flat_map(|b| b.rows()) {
        for j in 0..d {
            let dev = row[j] - mean[j];
            var[j] += dev * dev;
        }
    }
    let mut std = Vec::with_capacity(d);
    for (j, v) in var.into_iter().enumerate() {
        let s = (v / count).sqrt();
        if s <= 1e-12 * mean[j].abs().max(1.0) {
            return Err(Error::ZeroVariance { channel: j });
        }
        std.push(s);
    }
    Ok(NormalizationStats {
        per_channel_mean: mean,
        per_channel_std: std,
    })
}

/// `(x − mean) / std` per channel; the label and identity are preserved.
pub fn apply_normalizer(batch: &VibrationBatch, stats: &NormalizationStats) -> Result<VibrationBatch> {
    stats.check(batch)?;
    let d = stats.channels();
    let data = batch
        .data
        .iter()
        .enumerate()
        .map(|(k, &v)| (v - stats.per_channel_mean[k % d]) / stats.per_channel_std[k % d])
        .collect();
    Ok(batch.with_data(data))
}

/// Fractions of the four chronological splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val_normal: f64,
    pub val_mixed: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            val_normal: 0.05,
            val_mixed: 0.05,
            test: 0.20,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val_normal, self.val_mixed, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Config(format!("split fractions must be non-negative: {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// Training, normal validation (`V_N`), mixed validation (`V_A`) and test sets.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: Vec<VibrationBatch>,
    pub val_normal: Vec<VibrationBatch>,
    pub val_mixed: Vec<VibrationBatch>,
    pub test: Vec<VibrationBatch>,
}

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.val_normal.len() + self.val_mixed.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Chronological split. Each of the first three splits receives
/// `⌊fraction · n⌋` batches and the remainder goes to the test set. With
/// labels present, anomalous batches that land in the training or normal
/// validation region are moved into `V_A`, keeping chronological order.
pub fn split_dataset(
    batches: Vec<VibrationBatch>,
    spec: &SplitSpec,
    labels_present: bool,
) -> Result<DatasetSplits> {
    spec.validate()?;
    let n = batches.len();
    if n == 0 {
        return Err(Error::InsufficientData("cannot split an empty dataset".into()));
    }
    let take = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let n_train = take(spec.train);
    let n_vn = take(spec.val_normal);
    let n_va = take(spec.val_mixed);

    let mut tagged: Vec<(usize, VibrationBatch)> = batches.into_iter().enumerate().collect();
    let test: Vec<_> = tagged.split_off(n_train + n_vn + n_va).into_iter().map(|(_, b)| b).collect();
    let mut va: Vec<_> = tagged.split_off(n_train + n_vn);
    let mut vn: Vec<_> = tagged.split_off(n_train);
    let mut train = tagged;

    if labels_present {
        let (bad, good): (Vec<_>, Vec<_>) = train.into_iter().partition(|(_, b)| b.is_anomalous());
        train = good;
        va.extend(bad);
        let (bad, good): (Vec<_>, Vec<_>) = vn.into_iter().partition(|(_, b)| b.is_anomalous());
        vn = good;
        va.extend(bad);
        va.sort_by_key(|(pos, _)| *pos);
    }

    let strip = |v: Vec<(usize, VibrationBatch)>| v.into_iter().map(|(_, b)| b).collect::<Vec<_>>();
    let splits = DatasetSplits {
        train: strip(train),
        val_normal: strip(vn),
        val_mixed: strip(va),
        test,
    };
    for (name, frac, len) in [
        ("training", spec.train, splits.train.len()),
        ("normal validation", spec.val_normal, splits.val_normal.len()),
        ("mixed validation", spec.val_mixed, splits.val_mixed.len()),
        ("test", spec.test, splits.test.len()),
    ] {
        if frac > 0.0 && len == 0 {
            return Err(Error::InsufficientData(format!(
                "the {name} split is empty with {n} batches; provide more data"
            )));
        }
    }
    Ok(splits)
}

fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {field:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Validation(format!(
            "{}:{line}: non-finite value {field:?}",
            path.display()
        )));
    }
    Ok(v)
}

/// Reads the grouped CSV layout `machine_id,batch_index,t,c0,...,c{d-1}`.
///
/// Batches are returned in file order. Rows of one batch must be contiguous
/// with `t` counting up from 0, and batch indices must increase within a
/// machine.
pub fn load_csv(path: &Path, channels: usize) -> Result<Vec<VibrationBatch>> {
    if channels == 0 {
        return Err(Error::Config("channel count must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let mut batches = Vec::new();
    let mut current: Option<(String, usize, Vec<f64>)> = None;
    let mut last_index: HashMap<String, usize> = HashMap::new();
    let mut header_seen = false;

    let finish = |cur: Option<(String, usize, Vec<f64>)>, batches: &mut Vec<VibrationBatch>| -> Result<()> {
        if let Some((machine, index, data)) = cur {
            batches.push(VibrationBatch::new(machine, index, channels, data, None)?);
        }
        Ok(())
    };

    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if !header_seen {
            header_seen = true;
            let expected = csv_header(channels);
            let got: Vec<&str> = record.iter().collect();
            if got != expected.split(',').collect::<Vec<_>>() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("expected header {expected:?}, found {:?}", got.join(",")),
                });
            }
            continue;
        }
        if record.len() != channels + 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", channels + 3, record.len()),
            });
        }
        let machine = &record[0];
        let parse_int = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("cannot parse {s:?} as a non-negative integer"),
            })
        };
        let index = parse_int(&record[1])?;
        let t = parse_int(&record[2])?;

        let same = current
            .as_ref()
            .is_some_and(|(m, i, _)| m == machine && *i == index);
        if !same {
            if let Some(prev) = last_index.get(machine) {
                if index <= *prev {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!(
                            "batch_index {index} of machine {machine:?} is not increasing (previous {prev})"
                        ),
                    });
                }
            }
            last_index.insert(machine.to_string(), index);
            finish(current.take(), &mut batches)?;
            current = Some((machine.to_string(), index, Vec::new()));
        }
        let (_, _, data) = current.as_mut().expect("batch in progress");
        if t != data.len() / channels {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected t = {}, found {t}", data.len() / channels),
            });
        }
        for field in record.iter().skip(3) {
            data.push(parse_f64(field, path, line)?);
        }
    }
    finish(current, &mut batches)?;
    Ok(batches)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Header line of the batch CSV layout for `channels` channels.
pub fn csv_header(channels: usize) -> String {
    let mut header = String::from("machine_id,batch_index,t");
    for j in 0..channels {
        let _ = write!(header, ",c{j}");
    }
    header
}

/// Renders batches in the layout read by [`load_csv`].
pub fn to_csv_string(batches: &[VibrationBatch]) -> Result<String> {
    let d = batches.first().map_or(0, VibrationBatch::channels);
    let mut out = csv_header(d);
    out.push('\n');
    for b in batches {
        if b.channels() != d {
            return Err(Error::dimension("export channels", d, b.channels()));
        }
        for (t, row) in b.rows().enumerate() {
            let _ = write!(out, "{},{},{}", b.machine_id, b.batch_index, t);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_csv(batches: &[VibrationBatch], path: &Path) -> Result<()> {
    write_atomic(path, to_csv_string(batches)?.as_bytes())
}

/// Writes the `machine_id,batch_index,label` sidecar for labeled batches.
pub fn write_labels(batches: &[VibrationBatch], path: &Path) -> Result<()> {
    let mut out = String::from("machine_id,batch_index,label\n");
    for b in batches {
        if let Some(label) = b.label {
            let _ = writeln!(out, "{},{},{}", b.machine_id, b.batch_index, label.code());
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a label sidecar into a lookup keyed by `(machine_id, batch_index)`.
pub fn load_labels(path: &Path) -> Result<HashMap<(String, usize), Label>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut labels = HashMap::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let index: usize = record[1]
            .parse()
            .map_err(|_| bad(format!("bad batch_index {:?}", &record[1])))?;
        let label = record[2]
            .parse::<u8>()
            .ok()
            .and_then(Label::from_code)
            .ok_or_else(|| bad(format!("label must be 0 or 1, found {:?}", &record[2])))?;
        labels.insert((record[0].to_string(), index), label);
    }
    Ok(labels)
}

/// Attaches sidecar labels; returns how many batches received one.
pub fn attach_labels(batches: &mut [VibrationBatch], labels: &HashMap<(String, usize), Label>) -> usize {
    let mut hits = 0;
    for b in batches.iter_mut() {
        b.label = labels.get(&(b.machine_id.clone(), b.batch_index)).copied();
        hits += usize::from(b.label.is_some());
    }
    hits
}

/// Reads a directory of whitespace-delimited ASCII files, one batch per file
/// and one timestep per line. Lexicographic filename order is taken as
/// chronological order.
pub fn load_nasa_ascii(dir: &Path, channels: usize) -> Result<Vec<VibrationBatch>> {
    if channels == 0 {
        return Err(Error::Config("channel count must be positive".into()));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            files.push((name, entry.path()));
        }
    }
    files.sort();

    let machine = dir
        .file_name()
        .map_or_else(|| "machine".to_string(), |n| n.to_string_lossy().into_owned());

    files
        .iter()
        .enumerate()
        .map(|(index, (_, path))| {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut data = Vec::new();
            let mut width: Option<usize> = None;
            for (line_no, line) in text.lines().enumerate() {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.is_empty() {
                    continue;
                }
                match width {
                    None => width = Some(fields.len()),
                    Some(w) if w != fields.len() => {
                        return Err(Error::Format {
                            path: path.clone(),
                            message: format!(
                                "line {} has {} columns, earlier lines have {w}",
                                line_no + 1,
                                fields.len()
                            ),
                        })
                    }
                    _ => {}
                }
                for f in fields {
                    data.push(parse_f64(f, path, line_no + 1)?);
                }
            }
            if let Some(w) = width.filter(|w| *w != channels) {
                return Err(Error::Format {
                    path: path.clone(),
                    message: format!("file has {w} columns, {channels} channels expected"),
                });
            }
            VibrationBatch::new(machine.clone(), index, channels, data, None).map_err(|e| Error::Format {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}
