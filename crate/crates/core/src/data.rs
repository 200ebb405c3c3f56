//! Offline data model shared by the training pipeline and the theory lab.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One `(s, a, r, s', done)` tuple from task `task_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub task_id: usize,
}

impl TransitionRecord {
    /// Width of the flat encoder row `[s, a, s', r]`.
    pub fn row_width(state_dim: usize, action_dim: usize) -> usize {
        2 * state_dim + action_dim + 1
    }

    /// Appends `[s, a, s', r]` to `out`.
    pub fn write_row(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.state);
        out.extend_from_slice(&self.action);
        out.extend_from_slice(&self.next_state);
        out.push(self.reward);
    }
}

/// An ordered run of transitions from a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<TransitionRecord>,
}

impl Trajectory {
    pub fn new(transitions: Vec<TransitionRecord>) -> Result<Self> {
        let first = transitions.first().ok_or(Error::EmptyInput("trajectory"))?;
        let task_id = first.task_id;
        if transitions.iter().any(|t| t.task_id != task_id) {
            return Err(Error::invalid("trajectory mixes task ids"));
        }
        for pair in transitions.windows(2) {
            if !pair[0].done && pair[0].next_state != pair[1].state {
                return Err(Error::invalid("trajectory is not contiguous"));
            }
        }
        Ok(Self { transitions })
    }

    pub fn task_id(&self) -> usize {
        self.transitions[0].task_id
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn to_context(&self) -> Context {
        Context::new(self.transitions.clone())
    }
}

/// The offline dataset `D_i` of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineTaskDataset {
    pub task_id: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<TransitionRecord>,
}

impl OfflineTaskDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Index ranges of the trajectories, split after every `done` flag. A
    /// trailing run without a terminal flag counts as one trajectory.
    pub fn trajectory_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.done {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        if start < self.transitions.len() {
            out.push(start..self.transitions.len());
        }
        out
    }

    pub fn trajectory(&self, range: Range<usize>) -> Trajectory {
        Trajectory {
            transitions: self.transitions[range].to_vec(),
        }
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.trajectory_ranges()
            .into_iter()
            .map(|r| self.trajectory(r))
            .collect()
    }
}

/// A set of transitions from one task, the encoder's input.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub records: Vec<TransitionRecord>,
}

/// Borrowed `(s, a)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorItem<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
}

/// Borrowed `(s', r)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskItem<'a> {
    pub next_state: &'a [f64],
    pub reward: f64,
}

impl Context {
    pub fn new(records: Vec<TransitionRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn behavior_part(&self) -> Vec<BehaviorItem<'_>> {
        self.records
            .iter()
            .map(|r| BehaviorItem {
                state: &r.state,
                action: &r.action,
            })
            .collect()
    }

    pub fn task_part(&self) -> Vec<TaskItem<'_>> {
        self.records
            .iter()
            .map(|r| TaskItem {
                next_state: &r.next_state,
                reward: r.reward,
            })
            .collect()
    }

    /// Row-major `[s, a, s', r]` matrix of the context.
    pub fn rows(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for r in &self.records {
            r.write_row(&mut out);
        }
        out
    }
}

/// Splits a context into its behavior-related `(s, a)` and task-related
/// `(s', r)` components, preserving order.
pub fn split_context(context: &Context) -> Result<(Vec<BehaviorItem<'_>>, Vec<TaskItem<'_>>)> {
    if context.is_empty() {
        return Err(Error::EmptyInput("context"));
    }
    Ok((context.behavior_part(), context.task_part()))
}

/// Inverse of [`split_context`] for the four projected columns.
pub fn recombine(
    behavior: &[BehaviorItem<'_>],
    task: &[TaskItem<'_>],
    task_id: usize,
) -> Result<Vec<TransitionRecord>> {
    crate::error::check_dim("recombine", behavior.len(), task.len())?;
    Ok(behavior
        .iter()
        .zip(task)
        .map(|(b, t)| TransitionRecord {
            state: b.state.to_vec(),
            action: b.action.to_vec(),
            reward: t.reward,
            next_state: t.next_state.to_vec(),
            done: false,
            task_id,
        })
        .collect())
}

/// Task representation produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ {
    pub values: Vec<f64>,
}

impl LatentZ {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l1_distance(&self, other: &LatentZ) -> f64 {
        l1_distance(&self.values, &other.values)
    }
}

/// Encoder parameters captured at a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSnapshot {
    pub parameters: Vec<f64>,
    pub step_index: usize,
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// A single problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Finding {
    Empty,
    StateDim { index: usize, expected: usize, actual: usize },
    NextStateDim { index: usize, expected: usize, actual: usize },
    ActionDim { index: usize, expected: usize, actual: usize },
    NonFinite { index: usize, field: &'static str },
    TaskId { index: usize, expected: usize, actual: usize },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::Empty => write!(f, "dataset is empty"),
            Finding::StateDim { index, expected, actual } => {
                write!(f, "row {index}: state dim {actual}, expected {expected}")
            }
            Finding::NextStateDim { index, expected, actual } => {
                write!(f, "row {index}: next_state dim {actual}, expected {expected}")
            }
            Finding::ActionDim { index, expected, actual } => {
                write!(f, "row {index}: action dim {actual}, expected {expected}")
            }
            Finding::NonFinite { index, field } => write!(f, "row {index}: non-finite {field}"),
            Finding::TaskId { index, expected, actual } => {
                write!(f, "row {index}: task_id {actual}, expected {expected}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks every type invariant of a dataset and lists the violations.
pub fn validate_dataset(dataset: &OfflineTaskDataset) -> ValidationReport {
    let mut findings = Vec::new();
    if dataset.transitions.is_empty() {
        findings.push(Finding::Empty);
    }
    let (sd, ad) = (dataset.state_dim, dataset.action_dim);
    for (index, t) in dataset.transitions.iter().enumerate() {
        if t.state.len() != sd {
            findings.push(Finding::StateDim { index, expected: sd, actual: t.state.len() });
        }
        if t.next_state.len() != sd {
            findings.push(Finding::NextStateDim {
                index,
                expected: sd,
                actual: t.next_state.len(),
            });
        }
        if t.action.len() != ad {
            findings.push(Finding::ActionDim { index, expected: ad, actual: t.action.len() });
        }
        let fields: [(&'static str, bool); 4] = [
            ("state", t.state.iter().all(|v| v.is_finite())),
            ("action", t.action.iter().all(|v| v.is_finite())),
            ("reward", t.reward.is_finite()),
            ("next_state", t.next_state.iter().all(|v| v.is_finite())),
        ];
        for (field, ok) in fields {
            if !ok {
                findings.push(Finding::NonFinite { index, field });
            }
        }
        if t.task_id != dataset.task_id {
            findings.push(Finding::TaskId {
                index,
                expected: dataset.task_id,
                actual: t.task_id,
            });
        }
    }
    ValidationReport { findings }
}

// ---------------------------------------------------------------------------
// Dataset file format
//
// header: task_id, state_dim, action_dim, count as little-endian u64
// rows:   state, action, reward, next_state, done (0/1) as little-endian f64
// ---------------------------------------------------------------------------

const HEADER_WORDS: usize = 4;

pub fn row_floats(state_dim: usize, action_dim: usize) -> usize {
    2 * state_dim + action_dim + 2
}

pub fn write_dataset<W: Write>(dataset: &OfflineTaskDataset, mut w: W) -> Result<()> {
    let header = [
        dataset.task_id as u64,
        dataset.state_dim as u64,
        dataset.action_dim as u64,
        dataset.transitions.len() as u64,
    ];
    for word in header {
        w.write_all(&word.to_le_bytes())?;
    }
    let (sd, ad) = (dataset.state_dim, dataset.action_dim);
    for t in &dataset.transitions {
        crate::error::check_dim("dataset state", sd, t.state.len())?;
        crate::error::check_dim("dataset next_state", sd, t.next_state.len())?;
        crate::error::check_dim("dataset action", ad, t.action.len())?;
        let row = t
            .state
            .iter()
            .chain(&t.action)
            .chain(std::iter::once(&t.reward))
            .chain(&t.next_state)
            .chain(std::iter::once(if t.done { &1.0 } else { &0.0 }));
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<OfflineTaskDataset> {
    let mut header = [0u64; HEADER_WORDS];
    for word in &mut header {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::format("dataset header", e.to_string()))?;
        *word = u64::from_le_bytes(buf);
    }
    let [task_id, sd, ad, count] = header.map(|w| w as usize);
    let width = row_floats(sd, ad);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * width * 8 {
        return Err(Error::format(
            "dataset body",
            format!("expected {} bytes, found {}", count * width * 8, bytes.len()),
        ));
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut transitions = Vec::with_capacity(count);
    for row in floats.chunks_exact(width) {
        let done = match row[width - 1] {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            v => return Err(Error::format("dataset done flag", format!("{v}"))),
        };
        transitions.push(TransitionRecord {
            state: row[..sd].to_vec(),
            action: row[sd..sd + ad].to_vec(),
            reward: row[sd + ad],
            next_state: row[sd + ad + 1..2 * sd + ad + 1].to_vec(),
            done,
            task_id,
        });
    }
    Ok(OfflineTaskDataset {
        task_id,
        state_dim: sd,
        action_dim: ad,
        transitions,
    })
}

/// Sidecar metadata written next to each dataset file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetMeta {
    pub family: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
}

impl DatasetMeta {
    pub fn to_text(&self) -> String {
        let mut s = format!("family={}\nseed={}\n", self.family, self.seed);
        for (k, v) in &self.config {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = DatasetMeta::default();
        let mut have_family = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("dataset metadata", line.to_string()))?;
            match k {
                "family" => {
                    meta.family = v.to_string();
                    have_family = true;
                }
                "seed" => {
                    meta.seed = v
                        .parse()
                        .map_err(|_| Error::format("dataset metadata seed", v.to_string()))?
                }
                _ => meta.config.push((k.to_string(), v.to_string())),
            }
        }
        if !have_family {
            return Err(Error::format("dataset metadata", "missing family"));
        }
        Ok(meta)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn dataset_path(dir: &Path, task_id: usize) -> PathBuf {
    dir.join(format!("task_{task_id:03}.bin"))
}

pub fn meta_path(dir: &Path, task_id: usize) -> PathBuf {
    dir.join(format!("task_{task_id:03}.meta"))
}

pub fn save_dataset(dir: &Path, dataset: &OfflineTaskDataset, meta: &DatasetMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = File::create(dataset_path(dir, dataset.task_id))?;
    write_dataset(dataset, BufWriter::new(f))?;
    std::fs::write(meta_path(dir, dataset.task_id), meta.to_text())?;
    Ok(())
}

pub fn load_dataset(dir: &Path, task_id: usize) -> Result<(OfflineTaskDataset, DatasetMeta)> {
    let path = dataset_path(dir, task_id);
    if !path.exists() {
        return Err(Error::MissingDataset {
            task_id,
            dir: dir.to_path_buf(),
        });
    }
    let dataset = read_dataset(BufReader::new(File::open(&path)?))?;
    if dataset.task_id != task_id {
        return Err(Error::format(
            "dataset header",
            format!("file for task {task_id} holds task {}", dataset.task_id),
        ));
    }
    let mut text = String::new();
    for line in BufReader::new(File::open(meta_path(dir, task_id))?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    Ok((dataset, DatasetMeta::parse(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(s: Vec<f64>, a: Vec<f64>, r: f64, ns: Vec<f64>) -> TransitionRecord {
        TransitionRecord {
            state: s,
            action: a,
            reward: r,
            next_state: ns,
            done: false,
            task_id: 0,
        }
    }

    #[test]
    fn split_single_record() {
        let ctx = Context::new(vec![rec(vec![0.0, 0.0], vec![1.0], 0.5, vec![0.0, 1.0])]);
        let (b, t) = split_context(&ctx).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].state, &[0.0, 0.0]);
        assert_eq!(b[0].action, &[1.0]);
        assert_eq!(t[0].next_state, &[0.0, 1.0]);
        assert_eq!(t[0].reward, 0.5);
    }

    #[test]
    fn split_empty_is_error() {
        assert!(matches!(
            split_context(&Context::new(vec![])),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn validate_flags_nan_reward_and_mixed_ids() {
        let mut ds = OfflineTaskDataset {
            task_id: 0,
            state_dim: 1,
            action_dim: 1,
            transitions: (0..4).map(|i| rec(vec![i as f64], vec![0.0], 0.0, vec![0.0])).collect(),
        };
        assert!(validate_dataset(&ds).is_clean());
        ds.transitions[2].reward = f64::NAN;
        let report = validate_dataset(&ds);
        assert_eq!(report.findings, vec![Finding::NonFinite { index: 2, field: "reward" }]);
        ds.transitions[2].reward = 0.0;
        ds.transitions[3].task_id = 1;
        let report = validate_dataset(&ds);
        assert_eq!(report.findings, vec![Finding::TaskId { index: 3, expected: 0, actual: 1 }]);
    }

    #[test]
    fn validate_flags_dimensions_and_empty() {
        let mut ds = OfflineTaskDataset { task_id: 0, state_dim: 2, action_dim: 1, transitions: vec![] };
        assert_eq!(validate_dataset(&ds).findings, vec![Finding::Empty]);
        ds.transitions.push(rec(vec![0.0], vec![0.0, 1.0], 0.0, vec![0.0, 0.0]));
        assert_eq!(validate_dataset(&ds).findings.len(), 2);
    }

    #[test]
    fn trajectory_ranges_split_on_done() {
        let mut ts: Vec<_> = (0..5).map(|i| rec(vec![i as f64], vec![0.0], 0.0, vec![i as f64 + 1.0])).collect();
        ts[1].done = true;
        ts[4].done = true;
        let ds = OfflineTaskDataset { task_id: 0, state_dim: 1, action_dim: 1, transitions: ts };
        assert_eq!(ds.trajectory_ranges(), vec![0..2, 2..5]);
    }

    #[test]
    fn trajectory_rejects_gaps() {
        let ts = vec![rec(vec![0.0], vec![0.0], 0.0, vec![1.0]), rec(vec![2.0], vec![0.0], 0.0, vec![3.0])];
        assert!(Trajectory::new(ts).is_err());
    }

    #[test]
    fn metadata_parse() {
        let meta = DatasetMeta {
            family: "point_goal_2d".into(),
            seed: 7,
            config: vec![("noise_scale".into(), "0.3".into())],
        };
        assert_eq!(DatasetMeta::parse(&meta.to_text()).unwrap(), meta);
        assert!(DatasetMeta::parse("seed=1\n").is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let ds = OfflineTaskDataset {
            task_id: 3,
            state_dim: 1,
            action_dim: 1,
            transitions: vec![rec(vec![0.5], vec![0.1], 1.0, vec![0.6])],
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        // 4 header words plus one row of 1 + 1 + 1 + 1 + 1 floats
        assert_eq!(buf.len(), 32 + 5 * 8);
        buf.pop();
        assert!(read_dataset(&buf[..]).is_err());
    }

    fn arb_record(sd: usize, ad: usize) -> impl Strategy<Value = TransitionRecord> {
        let f = -1e6f64..1e6;
        (
            prop::collection::vec(f.clone(), sd),
            prop::collection::vec(f.clone(), ad),
            f.clone(),
            prop::collection::vec(f, sd),
            any::<bool>(),
        )
            .prop_map(|(state, action, reward, next_state, done)| TransitionRecord {
                state,
                action,
                reward,
                next_state,
                done,
                task_id: 4,
            })
    }

    proptest! {
        #[test]
        fn dataset_file_round_trip(records in prop::collection::vec(arb_record(3, 2), 1..20)) {
            let ds = OfflineTaskDataset { task_id: 4, state_dim: 3, action_dim: 2, transitions: records };
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            let back = read_dataset(&buf[..]).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn split_is_lossless(records in prop::collection::vec(arb_record(2, 1), 1..20)) {
            let records: Vec<_> = records.into_iter().map(|mut r| { r.done = false; r }).collect();
            let ctx = Context::new(records.clone());
            let (b, t) = split_context(&ctx).unwrap();
            prop_assert_eq!(b.len(), records.len());
            prop_assert_eq!(recombine(&b, &t, 4).unwrap(), records);
        }
    }
}
