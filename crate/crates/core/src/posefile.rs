//! Line-oriented pose files.
//!
//! ```text
//! # lipose-posefile
//! # version=1
//! # skeleton=<hash>
//! # units=mm
//! # dims=3
//! # joints=16
//! # frame_rate=50
//! # domain=source
//! # config_hash=<hash>
//! # seed=7
//! # camera=1000,1000,500,500,5000
//! 0 0 v1 v2 ...
//! ```
//!
//! Each record is `sequence frame` followed by `joints * dims` values.
//! Values are written in Rust's shortest round-trip form, so reading gives
//! back the exact bits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::Camera;
use crate::dataset::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D};
use crate::skeleton::Skeleton;

pub const POSEFILE_VERSION: u32 = 1;
const MAGIC: &str = "# lipose-posefile";

#[derive(Clone, Debug, PartialEq)]
pub struct PoseHeader {
    pub version: u32,
    pub skeleton_hash: String,
    pub dims: usize,
    pub joints: usize,
    pub frame_rate: f64,
    pub domain: String,
    pub config_hash: String,
    pub seed: u64,
    pub camera: Option<Camera>,
}

impl PoseHeader {
    pub fn units(&self) -> &'static str {
        if self.dims == 3 {
            "mm"
        } else {
            "px"
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub sequence: usize,
    pub frame: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFile {
    pub header: PoseHeader,
    pub records: Vec<PoseRecord>,
}

impl PoseHeader {
    /// Header for `skeleton` without a camera line.
    pub fn new(skeleton: &Skeleton, dims: usize, frame_rate: f64, domain: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            version: POSEFILE_VERSION,
            skeleton_hash: skeleton.hash(),
            dims,
            joints: skeleton.joint_count(),
            frame_rate,
            domain: domain.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            camera: None,
        }
    }
}

pub fn write_pose_file(path: &Path, file: &PoseFile) -> Result<()> {
    let out = file.to_text()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl PoseFile {
    pub fn to_text(&self) -> Result<String> {
        let file = self;
        let h = &file.header;
        if h.dims != 2 && h.dims != 3 {
            return Err(Error::shape("dims 2 or 3", h.dims));
        }
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let _ = writeln!(out, "# version={}", h.version);
        let _ = writeln!(out, "# skeleton={}", h.skeleton_hash);
        let _ = writeln!(out, "# units={}", h.units());
        let _ = writeln!(out, "# dims={}", h.dims);
        let _ = writeln!(out, "# joints={}", h.joints);
        let _ = writeln!(out, "# frame_rate={}", h.frame_rate);
        let _ = writeln!(out, "# domain={}", h.domain);
        let _ = writeln!(out, "# config_hash={}", h.config_hash);
        let _ = writeln!(out, "# seed={}", h.seed);
        if let Some(c) = &h.camera {
            let _ = writeln!(
                out,
                "# camera={},{},{},{},{}",
                c.fx, c.fy, c.cx, c.cy, c.subject_depth_offset
            );
        }
        let width = h.joints * h.dims;
        for r in &file.records {
            if r.values.len() != width {
                return Err(Error::shape(width, r.values.len()));
            }
            if let Some(v) = r.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::DegeneratePose(format!(
                    "non-finite value {v} in sequence {} frame {}",
                    r.sequence, r.frame
                )));
            }
            let _ = write!(out, "{} {}", r.sequence, r.frame);
            for v in &r.values {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Reads and validates a pose file against `skeleton`.
pub fn read_pose_file(path: &Path, skeleton: &Skeleton) -> Result<PoseFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_file(&text, path, skeleton)
}

pub fn parse_pose_file(text: &str, path: &Path, skeleton: &Skeleton) -> Result<PoseFile> {
    let fail = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    match lines.next() {
        Some((_, l)) if l.trim_end() == MAGIC => {}
        _ => return Err(fail(1, "missing pose-file magic line".into())),
    }
    let mut fields = std::collections::BTreeMap::new();
    while let Some(&(n, l)) = lines.peek() {
        let Some(body) = l.strip_prefix('#') else {
            break;
        };
        lines.next();
        let (k, v) = body
            .trim()
            .split_once('=')
            .ok_or_else(|| fail(n, format!("malformed header line `{l}`")))?;
        fields.insert(k.trim().to_string(), (n, v.trim().to_string()));
    }
    let get = |k: &str| -> Result<(usize, String)> {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| fail(1, format!("missing header field `{k}`")))
    };
    fn num<T: std::str::FromStr>(f: &dyn Fn(usize, String) -> Error, (n, v): (usize, String), k: &str) -> Result<T> {
        v.parse().map_err(|_| f(n, format!("bad `{k}` value `{v}`")))
    }
    let version: u32 = num(&fail, get("version")?, "version")?;
    if version != POSEFILE_VERSION {
        return Err(fail(get("version")?.0, format!("unsupported version {version}")));
    }
    let skeleton_hash = get("skeleton")?.1;
    if skeleton_hash != skeleton.hash() {
        return Err(Error::SkeletonHashMismatch {
            expected: skeleton.hash(),
            found: skeleton_hash,
        });
    }
    let dims: usize = num(&fail, get("dims")?, "dims")?;
    if dims != 2 && dims != 3 {
        return Err(fail(get("dims")?.0, format!("dims must be 2 or 3, got {dims}")));
    }
    let (un, units) = get("units")?;
    if units != if dims == 3 { "mm" } else { "px" } {
        return Err(fail(un, format!("units `{units}` do not match dims {dims}")));
    }
    let joints: usize = num(&fail, get("joints")?, "joints")?;
    if joints != skeleton.joint_count() {
        return Err(fail(
            get("joints")?.0,
            format!("{joints} joints, skeleton has {}", skeleton.joint_count()),
        ));
    }
    let frame_rate: f64 = num(&fail, get("frame_rate")?, "frame_rate")?;
    let camera = match fields.get("camera") {
        None => None,
        Some((n, v)) => {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail(*n, format!("bad camera `{v}`")))?;
            if parts.len() != 5 {
                return Err(fail(*n, "camera needs fx,fy,cx,cy,offset".into()));
            }
            Some(Camera {
                fx: parts[0],
                fy: parts[1],
                cx: parts[2],
                cy: parts[3],
                subject_depth_offset: parts[4],
            })
        }
    };
    let header = PoseHeader {
        version,
        skeleton_hash,
        dims,
        joints,
        frame_rate,
        domain: get("domain")?.1,
        config_hash: get("config_hash")?.1,
        seed: num(&fail, get("seed")?, "seed")?,
        camera,
    };
    let width = joints * dims;
    let mut records = Vec::new();
    for (n, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let mut tok = l.split_ascii_whitespace();
        let mut index = |what: &str| -> Result<usize> {
            tok.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| fail(n, format!("missing or bad {what} index")))
        };
        let sequence = index("sequence")?;
        let frame = index("frame")?;
        let values: Vec<f64> = tok
            .map(|t| t.parse::<f64>().map_err(|_| fail(n, format!("bad value `{t}`"))))
            .collect::<Result<_>>()?;
        if values.len() != width {
            return Err(fail(n, format!("expected {width} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fail(n, "non-finite value".into()));
        }
        records.push(PoseRecord {
            sequence,
            frame,
            values,
        });
    }
    Ok(PoseFile { header, records })
}

/// `<stem>.2d` and `<stem>.3d`.
pub fn pair_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".2d"), with(".3d"))
}

fn header_for(ds: &Dataset, skeleton: &Skeleton, dims: usize, config_hash: &str, seed: u64) -> PoseHeader {
    PoseHeader {
        version: POSEFILE_VERSION,
        skeleton_hash: skeleton.hash(),
        dims,
        joints: skeleton.joint_count(),
        frame_rate: ds.frame_rate,
        domain: ds.name.clone(),
        config_hash: config_hash.to_string(),
        seed,
        camera: Some(ds.camera),
    }
}

/// Writes a dataset as a 2D file plus, when labelled, a 3D file.
pub fn write_dataset(stem: &Path, ds: &Dataset, skeleton: &Skeleton, config_hash: &str, seed: u64) -> Result<()> {
    let (p2, p3) = pair_paths(stem);
    let mut r2 = Vec::new();
    let mut r3 = Vec::new();
    for (s, seq) in ds.sequences.iter().enumerate() {
        for (f, p) in seq.poses2d.iter().enumerate() {
            r2.push(PoseRecord {
                sequence: s,
                frame: f,
                values: p.to_flat(),
            });
        }
        if let Some(poses) = &seq.poses3d {
            for (f, p) in poses.iter().enumerate() {
                r3.push(PoseRecord {
                    sequence: s,
                    frame: f,
                    values: p.to_flat(),
                });
            }
        }
    }
    write_pose_file(
        &p2,
        &PoseFile {
            header: header_for(ds, skeleton, 2, config_hash, seed),
            records: r2,
        },
    )?;
    if ds.has_labels() {
        write_pose_file(
            &p3,
            &PoseFile {
                header: header_for(ds, skeleton, 3, config_hash, seed),
                records: r3,
            },
        )?;
    }
    Ok(())
}

fn group(file: &PoseFile, path: &Path) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut seqs: Vec<Vec<Vec<f64>>> = Vec::new();
    for (i, r) in file.records.iter().enumerate() {
        let line = i + 1;
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if r.sequence == seqs.len() {
            seqs.push(Vec::new());
        } else if r.sequence + 1 != seqs.len() {
            return Err(bad(format!("sequence {} out of order", r.sequence)));
        }
        let cur = seqs.last_mut().unwrap();
        if r.frame != cur.len() {
            return Err(bad(format!(
                "frame {} out of order in sequence {}",
                r.frame, r.sequence
            )));
        }
        cur.push(r.values.clone());
    }
    Ok(seqs)
}

/// Loads `<stem>.2d` and, if present, `<stem>.3d`.
pub fn read_dataset(stem: &Path, skeleton: &Skeleton) -> Result<Dataset> {
    let (p2, p3) = pair_paths(stem);
    let f2 = read_pose_file(&p2, skeleton)?;
    if f2.header.dims != 2 {
        return Err(Error::Format {
            path: p2,
            line: 1,
            msg: "expected a 2D file".into(),
        });
    }
    let s2 = group(&f2, &p2)?;
    let s3 = if p3.exists() {
        let f3 = read_pose_file(&p3, skeleton)?;
        if f3.header.dims != 3 {
            return Err(Error::Format {
                path: p3,
                line: 1,
                msg: "expected a 3D file".into(),
            });
        }
        let s3 = group(&f3, &p3)?;
        let shape = |s: &Vec<Vec<Vec<f64>>>| s.iter().map(Vec::len).collect::<Vec<_>>();
        if shape(&s3) != shape(&s2) {
            return Err(Error::Format {
                path: p3,
                line: 1,
                msg: "3D records do not match the 2D records".into(),
            });
        }
        Some(s3)
    } else {
        None
    };
    let mut sequences = Vec::with_capacity(s2.len());
    for (i, frames) in s2.into_iter().enumerate() {
        let poses2d = frames
            .iter()
            .map(|v| Pose2D::from_flat(v))
            .collect::<Result<Vec<_>>>()?;
        let poses3d = match &s3 {
            Some(s3) => Some(s3[i].iter().map(|v| Pose3D::from_flat(v)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        sequences.push(Sequence { poses2d, poses3d });
    }
    Ok(Dataset {
        name: f2.header.domain.clone(),
        frame_rate: f2.header.frame_rate,
        camera: f2.header.camera.unwrap_or_default(),
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_domain, SynthDomainSpec};

    fn file(dims: usize, records: Vec<PoseRecord>) -> PoseFile {
        let skel = Skeleton::canonical();
        PoseFile {
            header: PoseHeader {
                version: POSEFILE_VERSION,
                skeleton_hash: skel.hash(),
                dims,
                joints: 16,
                frame_rate: 50.0,
                domain: "d".into(),
                config_hash: "abc".into(),
                seed: 3,
                camera: None,
            },
            records,
        }
    }

    #[test]
    fn awkward_values_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.3d");
        let mut values = vec![0.1 + 0.2; 48];
        values[0] = -0.0;
        values[1] = f64::MIN_POSITIVE / 8.0;
        values[2] = f64::MAX;
        values[3] = 1e-300;
        let f = file(
            3,
            vec![PoseRecord {
                sequence: 0,
                frame: 0,
                values,
            }],
        );
        write_pose_file(&path, &f).unwrap();
        let back = read_pose_file(&path, &Skeleton::canonical()).unwrap();
        for (a, b) in back.records[0].values.iter().zip(&f.records[0].values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, f);
    }

    #[test]
    fn truncated_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.2d");
        let f = file(
            2,
            vec![
                PoseRecord {
                    sequence: 0,
                    frame: 0,
                    values: vec![1.0; 32],
                },
                PoseRecord {
                    sequence: 0,
                    frame: 1,
                    values: vec![1.0; 32],
                },
            ],
        );
        write_pose_file(&path, &f).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.trim_end().rsplit_once(' ').unwrap().0.to_string() + "\n";
        let header_lines = text.lines().filter(|l| l.starts_with('#')).count();
        fs::write(&path, cut).unwrap();
        match read_pose_file(&path, &Skeleton::canonical()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, header_lines + 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_skeleton_hash_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.2d");
        let mut f = file(2, vec![]);
        f.header.skeleton_hash = "0000".into();
        write_pose_file(&path, &f).unwrap();
        assert!(matches!(
            read_pose_file(&path, &Skeleton::canonical()),
            Err(Error::SkeletonHashMismatch { .. })
        ));
    }

    #[test]
    fn dataset_pair_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let skel = Skeleton::canonical();
        let mut spec = SynthDomainSpec::plain("walkers", 9);
        spec.noise_px = 1.5;
        let ds = synth_domain(&spec, &skel, 130).unwrap();
        let stem = dir.path().join("walkers");
        write_dataset(&stem, &ds, &skel, "h", 9).unwrap();
        assert_eq!(read_dataset(&stem, &skel).unwrap(), ds);
        fs::remove_file(pair_paths(&stem).1).unwrap();
        assert!(!read_dataset(&stem, &skel).unwrap().has_labels());
    }
}
