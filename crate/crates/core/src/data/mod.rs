//! On-disk dataset format, loading, augmentation and label statistics.
//!
//! A dataset directory holds `manifest.tsv` (header row, then one row per sample:
//! `sample_id split tcr vcr der dbr front left right inside face body shape`) and
//! `clips/<sample_id>.<view>.f32`, raw little-endian `f32` in `C x T x H x W` order.

pub mod generate;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::chain::Task;
use crate::error::{CaupsiError, Result};
use crate::rng::{self, Prng};
use crate::view::{ClipShape, View, ViewClip};

pub use generate::{generate, sample_labels, GeneratorConfig, LabelModel, SampleLatent};

const HEADER: [&str; 13] = [
    "sample_id", "split", "tcr", "vcr", "der", "dbr", "front", "left", "right", "inside", "face", "body", "shape",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub split: Split,
    pub labels: [usize; 4],
    /// Relative clip paths in [`View::ALL`] order.
    pub paths: [String; 6],
    pub shape: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = HEADER.join("\t");
        text.push('\n');
        for r in &self.rows {
            let labels = r.labels.map(|l| l.to_string());
            let fields: Vec<&str> = [r.sample_id.as_str(), r.split.name()]
                .into_iter()
                .chain(labels.iter().map(|s| s.as_str()))
                .chain(r.paths.iter().map(|s| s.as_str()))
                .chain([r.shape.as_str()])
                .collect();
            text.push_str(&fields.join("\t"));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| CaupsiError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CaupsiError::MissingFile(path.to_path_buf()),
            _ => CaupsiError::io(path, e),
        })?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
        if header != HEADER {
            return Err(CaupsiError::Data(format!("{}: unexpected header {header:?}", path.display())));
        }
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != HEADER.len() {
                return Err(CaupsiError::Data(format!("manifest line {}: {} fields", ln + 2, f.len())));
            }
            let split = Split::parse(f[1]).ok_or_else(|| CaupsiError::Data(format!("manifest line {}: split '{}'", ln + 2, f[1])))?;
            let mut labels = [0usize; 4];
            for t in Task::ALL {
                let raw = f[2 + t.index()];
                let y: usize = raw
                    .parse()
                    .map_err(|_| CaupsiError::Data(format!("manifest line {}: {} label '{raw}'", ln + 2, t.name())))?;
                if y >= t.num_classes() {
                    return Err(CaupsiError::LabelOutOfRange {
                        sample: f[0].to_string(),
                        task: t.name(),
                        label: y,
                        classes: t.num_classes(),
                    });
                }
                labels[t.index()] = y;
            }
            let paths: [String; 6] = std::array::from_fn(|i| f[6 + i].to_string());
            rows.push(ManifestRow {
                sample_id: f[0].to_string(),
                split,
                labels,
                paths,
                shape: f[12].to_string(),
            });
        }
        Ok(Manifest { rows })
    }
}

/// One loaded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub labels: [usize; 4],
    /// In [`View::ALL`] order.
    pub clips: [ViewClip; 6],
}

/// A dataset directory with validated manifest; clips are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub shape: ClipShape,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(&dir.join("manifest.tsv"))?;
        if manifest.rows.is_empty() {
            return Err(CaupsiError::Data(format!("{}: manifest has no samples", dir.display())));
        }
        let mut shape = None;
        for r in &manifest.rows {
            let s = ClipShape::parse(&r.shape).ok_or_else(|| CaupsiError::ShapeMismatch {
                path: dir.join("manifest.tsv"),
                detail: format!("sample {}: bad shape '{}'", r.sample_id, r.shape),
            })?;
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(CaupsiError::ShapeMismatch {
                        path: dir.join("manifest.tsv"),
                        detail: format!("sample {} has shape {} but earlier samples {}", r.sample_id, r.shape, prev.descriptor()),
                    })
                }
                _ => {}
            }
            for p in &r.paths {
                let full = dir.join(p);
                let meta = fs::metadata(&full).map_err(|_| CaupsiError::MissingFile(full.clone()))?;
                let want = (s.numel() * 4) as u64;
                if meta.len() != want {
                    return Err(CaupsiError::ShapeMismatch {
                        path: full,
                        detail: format!("{} bytes, shape {} needs {want}", meta.len(), s.descriptor()),
                    });
                }
            }
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            shape: shape.expect("non-empty manifest"),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.rows.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest.rows[i].split == split).collect()
    }

    /// Indices of `split` in an order shuffled by `(seed, epoch)`.
    pub fn shuffled(&self, split: Split, seed: u64, epoch: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx = self.indices(split);
        idx.shuffle(&mut rng::stream(rng::mix(seed, 0x5ff1e), epoch as u64));
        idx
    }

    pub fn labels(&self, i: usize) -> [usize; 4] {
        self.manifest.rows[i].labels
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let row = &self.manifest.rows[i];
        let mut clips = Vec::with_capacity(6);
        for v in View::ALL {
            let path = self.root.join(&row.paths[v.index()]);
            let bytes = fs::read(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CaupsiError::MissingFile(path.clone()),
                _ => CaupsiError::io(&path, e),
            })?;
            if bytes.len() != self.shape.numel() * 4 {
                return Err(CaupsiError::ShapeMismatch {
                    path,
                    detail: format!("{} bytes for shape {}", bytes.len(), self.shape.descriptor()),
                });
            }
            let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(CaupsiError::Data(format!("{}: non-finite values", path.display())));
            }
            clips.push(ViewClip::new(v, self.shape, data)?);
        }
        Ok(Sample {
            id: row.sample_id.clone(),
            labels: row.labels,
            clips: clips.try_into().expect("six views"),
        })
    }
}

/// Mirrors one clip along its width axis.
pub fn mirror_clip(clip: &ViewClip) -> ViewClip {
    let w = clip.shape.width;
    let mut data = clip.data.clone();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    ViewClip {
        view: clip.view,
        shape: clip.shape,
        data,
    }
}

/// Mirrors every clip and swaps the left and right cameras.
pub fn flip_clips(clips: &[ViewClip; 6]) -> [ViewClip; 6] {
    let mut out: [ViewClip; 6] = std::array::from_fn(|i| mirror_clip(&clips[i]));
    let (l, r) = (View::Left.index(), View::Right.index());
    let left_data = std::mem::take(&mut out[l].data);
    out[l].data = std::mem::take(&mut out[r].data);
    out[r].data = left_data;
    out
}

/// Flips with probability `p`; returns whether the flip happened.
pub fn augment_flip(sample: &Sample, p: f64, r: &mut Prng) -> (Sample, bool) {
    let hit = p > 0.0 && r.gen::<f64>() < p;
    if !hit {
        return (sample.clone(), false);
    }
    let flipped = Sample {
        id: sample.id.clone(),
        labels: sample.labels,
        clips: flip_clips(&sample.clips),
    };
    (flipped, true)
}

/// Plug-in mutual information (nats) between two discrete label sequences.
pub fn mutual_information(x: &[usize], y: &[usize], cx: usize, cy: usize) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return 0.0;
    }
    let mut joint = vec![0.0; cx * cy];
    for (&a, &b) in x.iter().zip(y) {
        joint[a * cy + b] += 1.0;
    }
    let nf = n as f64;
    let px: Vec<f64> = (0..cx).map(|a| (0..cy).map(|b| joint[a * cy + b]).sum::<f64>() / nf).collect();
    let py: Vec<f64> = (0..cy).map(|b| (0..cx).map(|a| joint[a * cy + b]).sum::<f64>() / nf).collect();
    let mut mi = 0.0;
    for a in 0..cx {
        for b in 0..cy {
            let p = joint[a * cy + b] / nf;
            if p > 0.0 {
                mi += p * (p / (px[a] * py[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// MI between DER and DBR labels over `n` samples drawn at the configured strength.
pub fn der_dbr_mutual_information(cfg: &GeneratorConfig, n: usize) -> f64 {
    let lat = sample_labels(cfg, n);
    let der: Vec<usize> = lat.iter().map(|l| l.labels[2]).collect();
    let dbr: Vec<usize> = lat.iter().map(|l| l.labels[3]).collect();
    mutual_information(&der, &dbr, 5, 7)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutual_information_reference_cases() {
        let x = [0, 1, 0, 1];
        assert!((mutual_information(&x, &x, 2, 2) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(mutual_information(&[0, 0, 1, 1], &[0, 1, 0, 1], 2, 2), 0.0);
    }

    #[test]
    fn mirror_reverses_columns() {
        let shape = ClipShape {
            channels: 1,
            frames: 1,
            height: 2,
            width: 3,
        };
        let c = ViewClip::new(View::Face, shape, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(mirror_clip(&c).data, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }
}
