//! HDF5 archives with `incomplete_pcds`, `complete_pcds` and `labels`.
//!
//! `incomplete_pcds` is `M × n × 3`, `complete_pcds` is `M' × N × 3` with
//! `M' | M` (partial `i` belongs to complete `i / (M / M')`), and `labels`
//! holds one integer per partial.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array3, Ix3};

use super::{in_unit_cube, CompletionSample};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub const PARTIAL_ARRAY: &str = "incomplete_pcds";
pub const COMPLETE_ARRAY: &str = "complete_pcds";
pub const LABEL_ARRAY: &str = "labels";

/// Label names by integer id: the sixteen benchmark categories followed by
/// the synthetic shape kinds.
pub const LABEL_NAMES: [&str; 20] = [
    "airplane",
    "cabinet",
    "car",
    "chair",
    "lamp",
    "sofa",
    "table",
    "watercraft",
    "bed",
    "bench",
    "bookshelf",
    "bus",
    "guitar",
    "motorbike",
    "pistol",
    "skateboard",
    "sphere",
    "cube",
    "cylinder",
    "plane-pair",
];

fn label_name(id: i64) -> String {
    usize::try_from(id)
        .ok()
        .and_then(|i| LABEL_NAMES.get(i))
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{id}"))
}

fn label_id(name: &str) -> i64 {
    if let Some(i) = LABEL_NAMES.iter().position(|n| *n == name) {
        return i as i64;
    }
    name.strip_prefix("class")
        .and_then(|s| s.parse().ok())
        .unwrap_or(-1)
}

fn h5err(path: &Path, e: hdf5::Error) -> Error {
    Error::Hdf5 {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Resolves a directory to `<dir>/<split>.h5`; files are used as given.
pub fn archive_path(path: &Path, split: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{split}.h5"))
    } else {
        path.to_path_buf()
    }
}

/// Sequential reader over an archive. Samples are read one at a time.
pub struct ArchiveStream {
    path: PathBuf,
    split: String,
    arrays: Option<(hdf5::Dataset, hdf5::Dataset, Option<Array1<i64>>)>,
    partials: usize,
    ratio: usize,
    next: usize,
}

impl std::fmt::Debug for ArchiveStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ArchiveStream")
            .field("path", &self.path)
            .field("partials", &self.partials)
            .field("next", &self.next)
            .finish()
    }
}

/// Opens an archive. A file with no arrays, or with zero samples, yields an
/// empty stream. `labels` is optional; missing labels read as `unknown`.
pub fn load_archive(path: &Path, split: &str) -> Result<ArchiveStream> {
    let path = archive_path(path, split);
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "archive not found"),
        ));
    }
    hdf5::silence_errors(true);
    let file = hdf5::File::open(&path).map_err(|e| h5err(&path, e))?;
    let has = |name: &str| file.link_exists(name);
    let mut stream = ArchiveStream {
        path: path.clone(),
        split: split.to_string(),
        arrays: None,
        partials: 0,
        ratio: 1,
        next: 0,
    };
    if !has(PARTIAL_ARRAY) && !has(COMPLETE_ARRAY) && !has(LABEL_ARRAY) {
        return Ok(stream);
    }
    for name in [PARTIAL_ARRAY, COMPLETE_ARRAY] {
        if !has(name) {
            return Err(Error::MissingArray {
                path: path.clone(),
                name: name.to_string(),
            });
        }
    }
    let partial = file.dataset(PARTIAL_ARRAY).map_err(|e| h5err(&path, e))?;
    let complete = file.dataset(COMPLETE_ARRAY).map_err(|e| h5err(&path, e))?;
    let (ps, cs) = (partial.shape(), complete.shape());
    for (name, shape) in [(PARTIAL_ARRAY, &ps), (COMPLETE_ARRAY, &cs)] {
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape(
                format!("{} array `{name}`", path.display()),
                "rank 3 with last dimension 3",
                format!("{shape:?}"),
            ));
        }
    }
    let (m, mc) = (ps[0], cs[0]);
    if m == 0 {
        return Ok(stream);
    }
    if mc == 0 || m % mc != 0 {
        return Err(Error::shape(
            format!("{} sample counts", path.display()),
            format!("a divisor of {m} complete clouds"),
            mc,
        ));
    }
    let labels = if has(LABEL_ARRAY) {
        let l = file
            .dataset(LABEL_ARRAY)
            .and_then(|d| d.read_raw::<i64>())
            .map_err(|e| h5err(&path, e))?;
        if l.len() != m {
            return Err(Error::shape(format!("{} `labels`", path.display()), m, l.len()));
        }
        Some(Array1::from(l))
    } else {
        None
    };
    stream.arrays = Some((partial, complete, labels));
    stream.partials = m;
    stream.ratio = m / mc;
    Ok(stream)
}

impl ArchiveStream {
    pub fn len(&self) -> usize {
        self.partials
    }

    pub fn is_empty(&self) -> bool {
        self.partials == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read(&self, i: usize) -> Result<CompletionSample> {
        let (partial, complete, labels) = self.arrays.as_ref().expect("non-empty stream");
        let read_cloud = |ds: &hdf5::Dataset, j: usize| -> Result<PointCloud> {
            let a: Array3<f32> = ds.read_slice::<f32, _, Ix3>(s![j..j + 1, .., ..]).map_err(|e| h5err(&self.path, e))?;
            let pts = a.as_slice().expect("standard layout").chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
            PointCloud::new(pts)
        };
        let mut sample = CompletionSample {
            partial: read_cloud(partial, i)?,
            complete: read_cloud(complete, i / self.ratio)?,
            label: labels.as_ref().map_or_else(|| "unknown".to_string(), |l| label_name(l[i])),
            id: format!("{}-{i:06}", self.split),
        };
        if !in_unit_cube(&sample.complete) {
            sample = sample.normalized();
        }
        sample.validate()?;
        Ok(sample)
    }
}

impl Iterator for ArchiveStream {
    type Item = Result<CompletionSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.partials {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.read(i))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = self.partials - self.next;
        (r, Some(r))
    }
}

/// Writes samples as float32 arrays, one complete cloud per partial.
/// All partials must share one size, as must all complete clouds.
pub fn write_archive(path: &Path, samples: &[CompletionSample]) -> Result<()> {
    let (n, nc) = samples
        .first()
        .map_or((0, 0), |s| (s.partial.len(), s.complete.len()));
    let m = samples.len();
    let mut partial = Vec::with_capacity(m * n * 3);
    let mut complete = Vec::with_capacity(m * nc * 3);
    let mut labels = Vec::with_capacity(m);
    for s in samples {
        if s.partial.len() != n || s.complete.len() != nc {
            return Err(Error::shape(
                format!("archive sample {}", s.id),
                format!("{n} partial and {nc} complete points"),
                format!("{} and {}", s.partial.len(), s.complete.len()),
            ));
        }
        partial.extend(s.partial.points().iter().flatten().map(|&v| v as f32));
        complete.extend(s.complete.points().iter().flatten().map(|&v| v as f32));
        labels.push(label_id(&s.label));
    }
    let partial = Array3::from_shape_vec((m, n, 3), partial).expect("sized above");
    let complete = Array3::from_shape_vec((m, nc, 3), complete).expect("sized above");
    let labels = Array1::from(labels);
    let write = || -> hdf5::Result<()> {
        let file = hdf5::File::create(path)?;
        file.new_dataset_builder().with_data(&partial).create(PARTIAL_ARRAY)?;
        file.new_dataset_builder().with_data(&complete).create(COMPLETE_ARRAY)?;
        file.new_dataset_builder().with_data(&labels).create(LABEL_ARRAY)?;
        Ok(())
    };
    write().map_err(|e| h5err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_shapes, ShapeKind};

    #[test]
    fn round_trip_is_exact_after_float32_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.h5");
        let samples = synth_shapes(5, &ShapeKind::ALL, 512, 3).unwrap();
        write_archive(&path, &samples).unwrap();
        let back: Vec<_> = load_archive(dir.path(), "train").unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            for (p, q) in a.complete.points().iter().zip(b.complete.points()) {
                assert_eq!(p.map(|v| v as f32 as f64), *q);
            }
            for (p, q) in a.partial.points().iter().zip(b.partial.points()) {
                assert_eq!(p.map(|v| v as f32 as f64), *q);
            }
        }
        // A second write of the reloaded data is bitwise stable.
        let path2 = dir.path().join("again.h5");
        write_archive(&path2, &back).unwrap();
        let again: Vec<_> = load_archive(&path2, "x").unwrap().collect::<Result<_>>().unwrap();
        for (a, b) in back.iter().zip(&again) {
            assert_eq!(a.complete, b.complete);
            assert_eq!(a.partial, b.partial);
        }
    }

    #[test]
    fn empty_archives_stream_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.h5");
        write_archive(&path, &[]).unwrap();
        assert_eq!(load_archive(&path, "test").unwrap().count(), 0);
        let bare = dir.path().join("bare.h5");
        hdf5::File::create(&bare).unwrap();
        assert!(load_archive(&bare, "test").unwrap().is_empty());
    }

    #[test]
    fn shared_complete_clouds_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("multi.h5");
        let samples = synth_shapes(2, &[ShapeKind::Sphere, ShapeKind::Cube], 512, 0).unwrap();
        let part: Vec<f32> = samples
            .iter()
            .flat_map(|s| std::iter::repeat(s).take(3))
            .flat_map(|s| s.partial.points().iter().flatten().map(|&v| v as f32).collect::<Vec<_>>())
            .collect();
        let comp: Vec<f32> = samples
            .iter()
            .flat_map(|s| s.complete.points().iter().flatten().map(|&v| v as f32).collect::<Vec<_>>())
            .collect();
        let file = hdf5::File::create(&path).unwrap();
        let pa = Array3::from_shape_vec((6, 256, 3), part).unwrap();
        let ca = Array3::from_shape_vec((2, 512, 3), comp).unwrap();
        file.new_dataset_builder().with_data(&pa).create(PARTIAL_ARRAY).unwrap();
        file.new_dataset_builder().with_data(&ca).create(COMPLETE_ARRAY).unwrap();
        file.new_dataset_builder()
            .with_data(&Array1::from(vec![16i64, 16, 16, 17, 17, 99]))
            .create(LABEL_ARRAY)
            .unwrap();
        drop(file);
        let got: Vec<_> = load_archive(&path, "val").unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(got[2].complete, got[0].complete);
        assert_ne!(got[3].complete, got[2].complete);
        assert_eq!(got[0].label, "sphere");
        assert_eq!(got[5].label, "class99");
        assert_eq!(got[4].id, "val-000004");
    }

    #[test]
    fn malformed_archives_report_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.h5");
        let file = hdf5::File::create(&missing).unwrap();
        file.new_dataset_builder()
            .with_data(&Array3::<f32>::zeros((2, 4, 3)))
            .create(PARTIAL_ARRAY)
            .unwrap();
        drop(file);
        assert!(matches!(load_archive(&missing, "t"), Err(Error::MissingArray { .. })));

        let bad = dir.path().join("bad.h5");
        let file = hdf5::File::create(&bad).unwrap();
        file.new_dataset_builder()
            .with_data(&Array3::<f32>::zeros((3, 4, 3)))
            .create(PARTIAL_ARRAY)
            .unwrap();
        file.new_dataset_builder()
            .with_data(&Array3::<f32>::zeros((2, 4, 3)))
            .create(COMPLETE_ARRAY)
            .unwrap();
        drop(file);
        assert!(matches!(load_archive(&bad, "t"), Err(Error::Shape { .. })));

        let junk = dir.path().join("junk.h5");
        std::fs::write(&junk, b"not an archive").unwrap();
        assert!(matches!(load_archive(&junk, "t"), Err(Error::Hdf5 { .. })));
        assert!(matches!(load_archive(&dir.path().join("none.h5"), "t"), Err(Error::Io { .. })));
    }

    #[test]
    fn out_of_cube_samples_are_normalized_jointly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.h5");
        let mut s = synth_shapes(1, &[ShapeKind::Sphere], 512, 1).unwrap().remove(0);
        let scale = |c: &PointCloud| PointCloud::new(c.points().iter().map(|p| p.map(|v| 4.0 * v + 1.0)).collect()).unwrap();
        s.partial = scale(&s.partial);
        s.complete = scale(&s.complete);
        write_archive(&path, &[s]).unwrap();
        let got = load_archive(&path, "t").unwrap().next().unwrap().unwrap();
        assert!(in_unit_cube(&got.complete));
        for p in got.partial.points() {
            assert!(p.iter().all(|v| v.abs() <= 0.5 + 1e-6));
        }
    }
}
