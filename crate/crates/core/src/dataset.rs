//! In-memory pose datasets, temporal windows and the phase-gated domain
//! stream.

use std::cell::RefCell;

use crate::camera::{Camera, ImageNormalizer};
use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D, PoseClip};

/// Consecutive frames of one subject. 3D labels are optional.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub poses2d: Vec<Pose2D>,
    pub poses3d: Option<Vec<Pose3D>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.poses2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses2d.is_empty()
    }
}

/// A domain's frames. Every frame is the centre of one clip; windows are
/// edge-padded at sequence boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub frame_rate: f64,
    pub camera: Camera,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn clip_count(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_count() == 0
    }

    /// `(sequence, frame)` for every clip, in storage order.
    pub fn clip_ids(&self) -> Vec<(usize, usize)> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |f| (s, f)))
            .collect()
    }

    pub fn has_labels(&self) -> bool {
        !self.sequences.is_empty() && self.sequences.iter().all(|s| s.poses3d.is_some())
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            sequences: self
                .sequences
                .iter()
                .map(|s| Sequence {
                    poses2d: s.poses2d.clone(),
                    poses3d: None,
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn pose2d(&self, seq: usize, frame: usize) -> &Pose2D {
        &self.sequences[seq].poses2d[frame]
    }

    pub fn pose3d(&self, seq: usize, frame: usize) -> Result<&Pose3D> {
        self.sequences[seq]
            .poses3d
            .as_ref()
            .map(|p| &p[frame])
            .ok_or_else(|| Error::MissingLabels(self.name.clone()))
    }

    /// Frame indices of the `t`-frame window centred on `frame`.
    pub fn window_indices(&self, seq: usize, frame: usize, t: usize) -> Vec<usize> {
        let n = self.sequences[seq].len() as i64;
        let half = (t / 2) as i64;
        (-half..=half)
            .map(|o| (frame as i64 + o).clamp(0, n - 1) as usize)
            .collect()
    }

    pub fn window2d(&self, seq: usize, frame: usize, t: usize) -> Result<PoseClip<Pose2D>> {
        let s = &self.sequences[seq];
        let frames = self
            .window_indices(seq, frame, t)
            .into_iter()
            .map(|i| s.poses2d[i].clone())
            .collect();
        PoseClip::new(frames, self.frame_rate)
    }

    /// Network input row of a window: normalised `(u, v)` per joint, frame
    /// after frame.
    pub fn window_row(&self, seq: usize, frame: usize, t: usize, norm: &ImageNormalizer) -> Vec<f64> {
        let s = &self.sequences[seq];
        let mut row = Vec::new();
        for i in self.window_indices(seq, frame, t) {
            let start = row.len();
            row.extend(s.poses2d[i].to_flat());
            norm.normalize(&mut row[start..]);
        }
        row
    }

    pub fn all_2d(&self) -> Vec<Pose2D> {
        self.sequences.iter().flat_map(|s| s.poses2d.iter().cloned()).collect()
    }

    pub fn all_3d(&self) -> Result<Vec<Pose3D>> {
        let mut out = Vec::with_capacity(self.clip_count());
        for s in &self.sequences {
            let p = s
                .poses3d
                .as_ref()
                .ok_or_else(|| Error::MissingLabels(self.name.clone()))?;
            out.extend(p.iter().cloned());
        }
        Ok(out)
    }
}

/// Training and evaluation splits of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub train: Dataset,
    pub eval: Dataset,
}

impl DomainData {
    pub fn name(&self) -> &str {
        &self.train.name
    }
}

/// One recorded open of a training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub phase: usize,
    pub domain: usize,
    pub granted: bool,
}

/// Source (index 0) followed by the ordered targets. Training splits are
/// only readable in their own phase; target training splits carry no 3D
/// labels.
#[derive(Debug)]
pub struct DomainStream {
    domains: Vec<DomainData>,
    phase: usize,
    log: RefCell<Vec<AccessRecord>>,
}

impl DomainStream {
    pub fn new(source: DomainData, targets: Vec<DomainData>) -> Result<Self> {
        if !source.train.has_labels() {
            return Err(Error::MissingLabels(source.train.name.clone()));
        }
        let mut domains = vec![source];
        for mut t in targets {
            t.train = t.train.without_labels();
            domains.push(t);
        }
        Ok(Self {
            domains,
            phase: 0,
            log: RefCell::new(Vec::new()),
        })
    }

    pub fn target_count(&self) -> usize {
        self.domains.len() - 1
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name().to_string()).collect()
    }

    /// Moves to phase `j`. Phases never go backwards.
    pub fn enter_phase(&mut self, j: usize) -> Result<()> {
        if j < self.phase || j > self.target_count() {
            return Err(Error::AccessViolation(format!(
                "cannot enter phase {j} from phase {} ({} targets)",
                self.phase,
                self.target_count()
            )));
        }
        self.phase = j;
        Ok(())
    }

    /// Training split of domain `index`; only the current phase's domain.
    pub fn open_train(&self, index: usize) -> Result<&Dataset> {
        let granted = index == self.phase && index < self.domains.len();
        self.log.borrow_mut().push(AccessRecord {
            phase: self.phase,
            domain: index,
            granted,
        });
        if !granted {
            return Err(Error::AccessViolation(format!(
                "phase {} may not read training data of domain {index}",
                self.phase
            )));
        }
        Ok(&self.domains[index].train)
    }

    /// Evaluation split; labels are used for metrics only.
    pub fn open_eval(&self, index: usize) -> Result<&Dataset> {
        self.domains
            .get(index)
            .map(|d| &d.eval)
            .ok_or_else(|| Error::AccessViolation(format!("no domain {index}")))
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.borrow().clone()
    }
}
