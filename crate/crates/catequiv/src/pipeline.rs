//! UCI-HAR raw-stream ingestion and per-sensor gain processing.
//!
//! A [`Window`] is one raw inertial sample laid out `[sensor, axis, time]`
//! (channels first, ACC before GYR). [`gain_process`] turns it into the
//! 8-channel model input: six RMS-normalized axis rows plus two time-constant
//! log-RMS rows.
//!
//! The dataset loader reads the official text layout (one window per row,
//! 128 whitespace-separated reals per file) and never touches the network;
//! fetching the archive is left to a documented script outside the library.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// RMS floor: far below physical signal RMS, far above f64 noise.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Window length of the UCI-HAR archive.
pub const UCIHAR_T: usize = 128;

/// Number of activity classes.
pub const N_CLASSES: usize = 6;

/// Activity names in label order (labels are 1-based in the archive).
pub const CLASS_NAMES: [&str; 6] = [
    "WALKING",
    "WALKING_UPSTAIRS",
    "WALKING_DOWNSTAIRS",
    "SITTING",
    "STANDING",
    "LAYING",
];

/// One raw inertial sample: `values` is `[2, 3, T]` (sensor, axis, time) with
/// ACC as sensor 0 and GYR as sensor 1, plus a 1-based class label.
#[derive(Debug, Clone)]
pub struct Window {
    pub values: Tensor,
    pub label: usize,
    pub subject: u32,
}

impl Window {
    pub fn new(values: Tensor, label: usize, subject: u32) -> Result<Window> {
        match values.shape() {
            [2, 3, t] if *t > 0 => {}
            other => {
                return Err(Error::shape("window", format!("expected [2, 3, T], got {other:?}")))
            }
        }
        if !(1..=N_CLASSES).contains(&label) {
            return Err(Error::InvalidArg(format!("label {label} outside 1..=6")));
        }
        Ok(Window { values, label, subject })
    }

    pub fn t_len(&self) -> usize {
        self.values.shape()[2]
    }

    #[inline]
    pub fn at(&self, sensor: usize, axis: usize, t: usize) -> f64 {
        self.values.data()[(sensor * 3 + axis) * self.t_len() + t]
    }

    /// One sensor block as `[3, T]`.
    pub fn sensor(&self, sensor: usize) -> Tensor {
        let t_len = self.t_len();
        let lo = sensor * 3 * t_len;
        Tensor::from_vec(&[3, t_len], self.values.data()[lo..lo + 3 * t_len].to_vec())
            .expect("sensor block")
    }

    /// All six axis rows as `[6, T]` (same storage order).
    pub fn axes(&self) -> Tensor {
        Tensor::from_vec(&[6, self.t_len()], self.values.data().to_vec()).expect("axes")
    }

    /// Cyclic time shift of all channels by `tau`.
    pub fn shifted(&self, tau: i64) -> Window {
        Window { values: self.values.shift_time(tau), label: self.label, subject: self.subject }
    }

    /// Per-sensor gain scaling of the raw streams.
    pub fn scaled(&self, gain_acc: f64, gain_gyr: f64) -> Window {
        let t_len = self.t_len();
        let mut data = self.values.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= if i < 3 * t_len { gain_acc } else { gain_gyr };
        }
        Window {
            values: Tensor::from_vec(&[2, 3, t_len], data).expect("scaled"),
            label: self.label,
            subject: self.subject,
        }
    }

    /// Applies one 3×3 matrix to the axis triple of both sensors at every
    /// time step.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Window {
        let t_len = self.t_len();
        let mut data = vec![0.0; self.values.numel()];
        for s in 0..2 {
            for t in 0..t_len {
                let v = [self.at(s, 0, t), self.at(s, 1, t), self.at(s, 2, t)];
                for a in 0..3 {
                    data[(s * 3 + a) * t_len + t] =
                        r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2];
                }
            }
        }
        Window {
            values: Tensor::from_vec(&[2, 3, t_len], data).expect("rotated"),
            label: self.label,
            subject: self.subject,
        }
    }
}

/// Per-window energy and scales of one sensor block:
/// `R = (1/3T) ΣΣ x²`, `rho = max(ε, √R)`, `log_rms = ½ log(max(R, ε²))`.
///
/// The log is clamped at the floor instead of returning -∞ for silent
/// windows, so the head affine map always sees finite inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsScales {
    pub energy: f64,
    pub rho: f64,
    pub log_rms: f64,
}

pub fn compute_rms(x: &Tensor, epsilon: f64) -> Result<RmsScales> {
    let (c, t_len) = x.dims2()?;
    if c != 3 {
        return Err(Error::shape("compute_rms", format!("expected [3, T], got {:?}", x.shape())));
    }
    let energy = x.data().iter().map(|v| v * v).sum::<f64>() / (3.0 * t_len as f64);
    let rho = energy.sqrt().max(epsilon);
    let log_rms = 0.5 * energy.max(epsilon * epsilon).ln();
    Ok(RmsScales { energy, rho, log_rms })
}

/// The 8-channel model input: normalized axes plus constant log-RMS rows.
#[derive(Debug, Clone)]
pub struct ProcessedInput {
    /// Rows 0–2: ACC/rho_ACC, rows 3–5: GYR/rho_GYR; shape `[6, T]`.
    pub axes: Tensor,
    /// (log-RMS of ACC, log-RMS of GYR).
    pub log_rms: (f64, f64),
    /// `[8, T]`: the six normalized rows with the two constant rows appended.
    pub assembled: Tensor,
}

pub fn gain_process(w: &Window, epsilon: f64) -> Result<ProcessedInput> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArg(format!("epsilon must be positive, got {epsilon}")));
    }
    let t_len = w.t_len();
    let acc = compute_rms(&w.sensor(0), epsilon)?;
    let gyr = compute_rms(&w.sensor(1), epsilon)?;
    let mut axes = vec![0.0; 6 * t_len];
    for (i, v) in w.values.data().iter().enumerate() {
        let rho = if i < 3 * t_len { acc.rho } else { gyr.rho };
        axes[i] = v / rho;
    }
    let mut assembled = axes.clone();
    assembled.extend(std::iter::repeat(acc.log_rms).take(t_len));
    assembled.extend(std::iter::repeat(gyr.log_rms).take(t_len));
    Ok(ProcessedInput {
        axes: Tensor::from_vec(&[6, t_len], axes)?,
        log_rms: (acc.log_rms, gyr.log_rms),
        assembled: Tensor::from_vec(&[8, t_len], assembled)?,
    })
}

/// Which raw acceleration stream feeds the ACC channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccSource {
    /// `total_acc_*` files (gravity retained). Default.
    Total,
    /// `body_acc_*` files (gravity removed).
    Body,
}

impl Default for AccSource {
    fn default() -> Self {
        AccSource::Total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// An immutable list of windows belonging to one split.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub windows: Vec<Window>,
    pub split: Split,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Per-class window counts (index 0 = class 1).
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_classes];
        for w in &self.windows {
            counts[w.label - 1] += 1;
        }
        counts
    }
}

fn read_signal_file(path: &Path, t_len: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(path, format!("cannot read signal file: {e}")))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(t_len);
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                Error::data(path, format!("non-numeric token {tok:?} on line {}", lineno + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::data(path, format!("non-finite value on line {}", lineno + 1)));
            }
            row.push(v);
        }
        if row.len() != t_len {
            return Err(Error::data(
                path,
                format!("line {} has {} columns, expected {t_len}", lineno + 1, row.len()),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_int_file(path: &Path) -> Result<Vec<i64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(path, format!("cannot read label file: {e}")))?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<i64>()
                .map_err(|_| Error::data(path, format!("non-integer token {tok:?}")))
        })
        .collect()
}

/// Loads one official split from the UCI-HAR directory layout:
/// `<root>/<split>/Inertial Signals/<stream>_<axis>_<split>.txt` plus
/// `y_<split>.txt` and (optionally) `subject_<split>.txt`.
pub fn load_ucihar(root: &Path, split: Split, acc_source: AccSource) -> Result<DatasetSplit> {
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
        Split::Val => {
            return Err(Error::InvalidArg(
                "the archive has no official val split; derive one with stratified_val_split".into(),
            ))
        }
    };
    let dir = root.join(tag);
    let signals_dir = dir.join("Inertial Signals");
    let acc_stem = match acc_source {
        AccSource::Total => "total_acc",
        AccSource::Body => "body_acc",
    };
    let mut streams: Vec<Vec<Vec<f64>>> = Vec::with_capacity(6);
    for stem in [acc_stem, "body_gyro"] {
        for axis in ["x", "y", "z"] {
            let path = signals_dir.join(format!("{stem}_{axis}_{tag}.txt"));
            streams.push(read_signal_file(&path, UCIHAR_T)?);
        }
    }
    let n = streams[0].len();
    for (i, s) in streams.iter().enumerate() {
        if s.len() != n {
            return Err(Error::data(
                &signals_dir,
                format!("signal file {i} has {} rows, expected {n}", s.len()),
            ));
        }
    }
    let y_path = dir.join(format!("y_{tag}.txt"));
    let labels = read_int_file(&y_path)?;
    if labels.len() != n {
        return Err(Error::data(
            &y_path,
            format!("{} labels for {n} signal rows", labels.len()),
        ));
    }
    let subj_path = dir.join(format!("subject_{tag}.txt"));
    let subjects: Vec<i64> = if subj_path.exists() {
        let s = read_int_file(&subj_path)?;
        if s.len() != n {
            return Err(Error::data(&subj_path, format!("{} subjects for {n} signal rows", s.len())));
        }
        s
    } else {
        vec![0; n]
    };

    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        let label = labels[i];
        if !(1..=N_CLASSES as i64).contains(&label) {
            return Err(Error::data(&y_path, format!("label {label} on line {} outside 1..=6", i + 1)));
        }
        let mut data = Vec::with_capacity(6 * UCIHAR_T);
        for ch in &streams {
            data.extend_from_slice(&ch[i]);
        }
        windows.push(Window::new(
            Tensor::from_vec(&[2, 3, UCIHAR_T], data)?,
            label as usize,
            subjects[i] as u32,
        )?);
    }
    Ok(DatasetSplit { windows, split })
}

/// Splits the official train windows into train/val, class-stratified and
/// seeded. `val_frac` of each class (rounded up, at least one window when the
/// class is non-empty) goes to validation.
pub fn stratified_val_split(
    train: &DatasetSplit,
    val_frac: f64,
    seed: u64,
) -> (DatasetSplit, DatasetSplit) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, w) in train.windows.iter().enumerate() {
        by_class[w.label - 1].push(i);
    }
    let mut rng = Rng::derive(seed, 0x5b17);
    let mut val_idx = Vec::new();
    for idxs in &mut by_class {
        rng.shuffle(idxs);
        if idxs.is_empty() {
            continue;
        }
        let take = ((idxs.len() as f64 * val_frac).ceil() as usize).clamp(1, idxs.len());
        val_idx.extend_from_slice(&idxs[..take]);
    }
    let val_set: std::collections::HashSet<usize> = val_idx.iter().copied().collect();
    let mut tr = Vec::new();
    let mut va = Vec::new();
    for (i, w) in train.windows.iter().enumerate() {
        if val_set.contains(&i) {
            va.push(w.clone());
        } else {
            tr.push(w.clone());
        }
    }
    (
        DatasetSplit { windows: tr, split: Split::Train },
        DatasetSplit { windows: va, split: Split::Val },
    )
}

/// Root directory resolution used by the CLI: explicit flag, else the
/// `CATEQUIV_DATA` environment variable.
pub fn resolve_data_root(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("CATEQUIV_DATA").map(PathBuf::from))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_window(acc: f64, gyr: f64, t_len: usize) -> Window {
        let mut data = vec![acc; 3 * t_len];
        data.extend(vec![gyr; 3 * t_len]);
        Window::new(Tensor::from_vec(&[2, 3, t_len], data).unwrap(), 1, 0).unwrap()
    }

    #[test]
    fn rms_of_constant_two() {
        let x = Tensor::filled(&[3, 128], 2.0);
        let s = compute_rms(&x, DEFAULT_EPSILON).unwrap();
        assert!((s.energy - 4.0).abs() < 1e-12);
        assert!((s.rho - 2.0).abs() < 1e-12);
        assert!((s.log_rms - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rms_of_zero_window_clamps() {
        let x = Tensor::zeros(&[3, 16]);
        let s = compute_rms(&x, DEFAULT_EPSILON).unwrap();
        assert_eq!(s.energy, 0.0);
        assert_eq!(s.rho, DEFAULT_EPSILON);
        assert!((s.log_rms - DEFAULT_EPSILON.ln()).abs() < 1e-12);
    }

    #[test]
    fn rms_scaling_law() {
        let mut rng = Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[3, 64], |_| rng.gauss());
        let scaled = {
            let data = x.data().iter().map(|v| 3.0 * v).collect();
            Tensor::from_vec(&[3, 64], data).unwrap()
        };
        let a = compute_rms(&x, DEFAULT_EPSILON).unwrap();
        let b = compute_rms(&scaled, DEFAULT_EPSILON).unwrap();
        assert!((b.energy - 9.0 * a.energy).abs() < 1e-9 * a.energy.abs().max(1.0));
        assert!((b.log_rms - (a.log_rms + 3.0f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn gain_process_constant_window() {
        let w = constant_window(2.0, 1.0, 128);
        let p = gain_process(&w, DEFAULT_EPSILON).unwrap();
        for c in 0..6 {
            for t in 0..128 {
                assert!((p.assembled.at2(c, t) - 1.0).abs() < 1e-12);
            }
        }
        for t in 0..128 {
            assert!((p.assembled.at2(6, t) - 2.0f64.ln()).abs() < 1e-12);
            assert!(p.assembled.at2(7, t).abs() < 1e-12);
        }
        assert_eq!(p.assembled.shape(), &[8, 128]);
    }

    #[test]
    fn gyr_gain_only_moves_its_log_row() {
        let mut rng = Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..6 * 128).map(|_| rng.gauss() + 0.5).collect();
        let w = Window::new(Tensor::from_vec(&[2, 3, 128], data).unwrap(), 3, 0).unwrap();
        let p0 = gain_process(&w, DEFAULT_EPSILON).unwrap();
        let lam = 2.7;
        let p1 = gain_process(&w.scaled(1.0, lam), DEFAULT_EPSILON).unwrap();
        assert!(p0.axes.max_abs_diff(&p1.axes) < 1e-12);
        assert!((p1.log_rms.0 - p0.log_rms.0).abs() < 1e-12);
        assert!((p1.log_rms.1 - (p0.log_rms.1 + lam.ln())).abs() < 1e-10);
    }

    #[test]
    fn zero_window_processes_to_floor() {
        let w = constant_window(0.0, 0.0, 32);
        let p = gain_process(&w, DEFAULT_EPSILON).unwrap();
        assert!(p.axes.data().iter().all(|&v| v == 0.0));
        assert!((p.log_rms.0 - DEFAULT_EPSILON.ln()).abs() < 1e-12);
        assert!((p.log_rms.1 - DEFAULT_EPSILON.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalized_rows_have_unit_rms() {
        let mut rng = Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6 * 128).map(|_| 2.0 * rng.gauss()).collect();
        let w = Window::new(Tensor::from_vec(&[2, 3, 128], data).unwrap(), 2, 0).unwrap();
        let p = gain_process(&w, DEFAULT_EPSILON).unwrap();
        for s in 0..2 {
            let block = Tensor::from_vec(
                &[3, 128],
                (0..3 * 128).map(|i| p.axes.data()[s * 3 * 128 + i]).collect(),
            )
            .unwrap();
            let r = compute_rms(&block, DEFAULT_EPSILON).unwrap();
            assert!((r.energy.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_commutes_with_shift() {
        let mut rng = Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..6 * 128).map(|_| rng.gauss()).collect();
        let w = Window::new(Tensor::from_vec(&[2, 3, 128], data).unwrap(), 5, 0).unwrap();
        for tau in [1i64, 17, 127] {
            let a = gain_process(&w.shifted(tau), DEFAULT_EPSILON).unwrap().assembled;
            let b = gain_process(&w, DEFAULT_EPSILON).unwrap().assembled.shift_time(tau);
            assert!(a.max_abs_diff(&b) < 1e-12, "tau={tau}");
        }
    }

    #[test]
    fn window_shape_and_label_validation() {
        assert!(Window::new(Tensor::zeros(&[2, 3, 0]), 1, 0).is_err());
        assert!(Window::new(Tensor::zeros(&[3, 2, 8]), 1, 0).is_err());
        assert!(Window::new(Tensor::zeros(&[2, 3, 8]), 7, 0).is_err());
        assert!(Window::new(Tensor::zeros(&[2, 3, 8]), 0, 0).is_err());
    }
}
