//! Dataset ingestion, deterministic shuffling and batching.
//!
//! A dataset directory holds either `images/*.ppm` (binary P6) or a single
//! `images.smt1` blob (`N×H×W×3`, u8), plus `labels.csv` with header
//! `id,label`. For the blob layout the CSV rows follow blob order; for PPM
//! files the id is the file stem.

pub mod ppm;
pub mod synth;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{center_crop_square, resize_bilinear, Rng, Smt1, Smt1Payload, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// `H×W×3`, values in `[0, 1]`, `H == W`.
    pub pixels: Tensor,
    pub label: Option<usize>,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn side(&self) -> Option<usize> {
        self.records.first().map(|r| r.pixels.shape()[0])
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Checks the id-uniqueness, label-range and pixel-range invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate id {}", r.id)));
            }
            if let Some(l) = r.label {
                if l >= self.class_count {
                    return Err(Error::invalid(format!("label {l} of {} outside [0, {})", r.id, self.class_count)));
                }
            }
            let (h, w, c) = r.pixels.hwc()?;
            if h != w || c != 3 {
                return Err(Error::Shape(format!("record {} is {h}×{w}×{c}", r.id)));
            }
            if !r.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("record {} has pixels outside [0, 1]", r.id)));
            }
        }
        Ok(())
    }

    /// First `n` records (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset { records: self.records.iter().take(n).cloned().collect(), class_count: self.class_count, split: self.split }
    }
}

fn load_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), msg: msg.into() }
}

struct LabelRow {
    id: String,
    label: Option<i64>,
    line: usize,
}

fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "id,label" => {}
        _ => return Err(load_err(path, "expected header `id,label`")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| load_err(path, format!("row {}: expected `id,label`", i + 1)))?;
        let label = label.trim();
        let label = if label.is_empty() {
            None
        } else {
            Some(label.parse::<i64>().map_err(|_| load_err(path, format!("row {}: bad label {label:?}", i + 1)))?)
        };
        rows.push(LabelRow { id: id.trim().to_string(), label, line: i + 1 });
    }
    Ok(rows)
}

fn to_square(pixels: Tensor, side: Option<usize>) -> Result<Tensor> {
    let (h, w, _) = pixels.hwc()?;
    let sq = if h == w { pixels } else { center_crop_square(&pixels)? };
    match side {
        Some(s) if s != sq.shape()[0] => resize_bilinear(&sq, s, s),
        _ => Ok(sq),
    }
}

/// Loads a dataset directory. `side` resizes every image to `side × side`
/// (after a center crop to square); `class_count` fixes the label range,
/// otherwise it is inferred as `max label + 1`.
pub fn load_dataset(root: &Path, side: Option<usize>, class_count: Option<usize>) -> Result<Dataset> {
    let labels_path = root.join("labels.csv");
    let blob_path = root.join("images.smt1");
    let mut raw: Vec<(String, Tensor, Option<i64>, PathBuf, usize)> = Vec::new();

    if blob_path.exists() {
        let rows = read_labels(&labels_path)?;
        let blob = Smt1::read(&blob_path)?;
        let (n, h, w, c) = match blob.shape[..] {
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(load_err(&blob_path, format!("expected N×H×W×3, got {:?}", blob.shape))),
        };
        if c != 3 {
            return Err(load_err(&blob_path, format!("expected 3 channels, got {c}")));
        }
        let Smt1Payload::U8(bytes) = blob.payload else {
            return Err(load_err(&blob_path, "image blob must be u8"));
        };
        if rows.len() != n {
            return Err(load_err(&labels_path, format!("{} rows for {n} images", rows.len())));
        }
        let per = h * w * 3;
        for (i, row) in rows.into_iter().enumerate() {
            let px = bytes[i * per..(i + 1) * per].iter().map(|&b| b as f32 / 255.0).collect();
            raw.push((row.id, Tensor::new(vec![h, w, 3], px)?, row.label, labels_path.clone(), row.line));
        }
    } else {
        let dir = root.join("images");
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files: Vec<PathBuf> =
            entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "ppm")).collect();
        files.sort();
        let rows = if labels_path.exists() { read_labels(&labels_path)? } else { Vec::new() };
        let mut by_id: HashMap<String, (Option<i64>, usize)> = HashMap::new();
        for r in rows {
            if by_id.insert(r.id.clone(), (r.label, r.line)).is_some() {
                return Err(load_err(&labels_path, format!("row {}: duplicate id {}", r.line, r.id)));
            }
        }
        for f in files {
            let id = f.file_stem().unwrap().to_string_lossy().into_owned();
            let px = ppm::read_ppm(&f)?;
            let (label, line) = by_id.remove(&id).unwrap_or((None, 0));
            raw.push((id, px, label, labels_path.clone(), line));
        }
        if let Some((id, (_, line))) = by_id.into_iter().min_by_key(|(_, (_, l))| *l) {
            return Err(load_err(&labels_path, format!("row {line}: no image for id {id}")));
        }
    }

    let max_label = raw.iter().filter_map(|r| r.2).max();
    let class_count = class_count.unwrap_or_else(|| max_label.map_or(0, |m| (m.max(-1) + 1) as usize));
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(raw.len());
    for (id, px, label, src, line) in raw {
        if !seen.insert(id.clone()) {
            return Err(load_err(&src, format!("row {line}: duplicate id {id}")));
        }
        let label = match label {
            Some(l) if l < 0 || l as usize >= class_count => {
                return Err(load_err(&src, format!("row {line}: label {l} outside [0, {class_count})")))
            }
            Some(l) => Some(l as usize),
            None => None,
        };
        records.push(ImageRecord { pixels: to_square(px, side)?, label, id });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let split = if root.file_name().is_some_and(|n| n == "val") { Split::Val } else { Split::Train };
    Ok(Dataset { records, class_count, split })
}

/// Writes `images.smt1` (u8) and `labels.csv`. Pixels are quantized to bytes.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let side = ds.side().unwrap_or(0);
    let mut bytes = Vec::with_capacity(ds.len() * side * side * 3);
    let mut csv = String::from("id,label\n");
    for r in &ds.records {
        if r.pixels.shape() != [side, side, 3] {
            return Err(Error::Shape(format!("record {} is {:?}, expected {side}×{side}×3", r.id, r.pixels.shape())));
        }
        bytes.extend(r.pixels.data().iter().map(|&v| ppm::to_u8(v)));
        csv.push_str(&r.id);
        csv.push(',');
        if let Some(l) = r.label {
            csv.push_str(&l.to_string());
        }
        csv.push('\n');
    }
    Smt1::from_u8(vec![ds.len(), side, side, 3], bytes).write(&root.join("images.smt1"))?;
    let path = root.join("labels.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

/// One epoch of mini-batches: a permutation of `0..n` cut into chunks of
/// `batch`; the short tail is dropped.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if batch > n {
        return Err(Error::invalid(format!("batch size {batch} exceeds dataset size {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks_exact(batch).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm_file(dir: &Path, name: &str, w: usize, h: usize, fill: u8) {
        let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
        b.extend(std::iter::repeat(fill).take(w * h * 3));
        fs::write(dir.join(name), b).unwrap();
    }

    #[test]
    fn single_black_ppm() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir(d.path().join("images")).unwrap();
        write_ppm_file(&d.path().join("images"), "a.ppm", 4, 4, 0);
        let ds = load_dataset(d.path(), None, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.records[0].pixels.data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.records[0].label, None);
    }

    #[test]
    fn byte_255_is_exactly_one() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir(d.path().join("images")).unwrap();
        write_ppm_file(&d.path().join("images"), "w.ppm", 2, 2, 255);
        let ds = load_dataset(d.path(), None, None).unwrap();
        assert!(ds.records[0].pixels.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn records_sorted_by_id() {
        let d = tempfile::tempdir().unwrap();
        let img = d.path().join("images");
        fs::create_dir(&img).unwrap();
        for name in ["zeta", "alpha", "mid"] {
            write_ppm_file(&img, &format!("{name}.ppm"), 3, 3, 7);
        }
        fs::write(d.path().join("labels.csv"), "id,label\nmid,1\nzeta,2\nalpha,0\n").unwrap();
        let ds = load_dataset(d.path(), None, None).unwrap();
        let ids: Vec<&str> = ds.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["alpha", "mid", "zeta"]);
        assert_eq!(ds.labels().unwrap(), vec![0, 1, 2]);
        assert_eq!(ds.class_count, 3);
    }

    #[test]
    fn non_square_is_center_cropped_and_resized() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir(d.path().join("images")).unwrap();
        write_ppm_file(&d.path().join("images"), "r.ppm", 6, 4, 128);
        let ds = load_dataset(d.path(), None, None).unwrap();
        assert_eq!(ds.records[0].pixels.shape(), &[4, 4, 3]);
        let ds = load_dataset(d.path(), Some(8), None).unwrap();
        assert_eq!(ds.records[0].pixels.shape(), &[8, 8, 3]);
    }

    #[test]
    fn load_errors_name_the_offender() {
        let d = tempfile::tempdir().unwrap();
        let img = d.path().join("images");
        fs::create_dir(&img).unwrap();
        fs::write(img.join("bad.ppm"), b"P5\n1 1\n255\n\0").unwrap();
        let err = load_dataset(d.path(), None, None).unwrap_err().to_string();
        assert!(err.contains("bad.ppm"), "{err}");

        fs::remove_file(img.join("bad.ppm")).unwrap();
        write_ppm_file(&img, "a.ppm", 2, 2, 0);
        fs::write(d.path().join("labels.csv"), "id,label\na,0\na,1\n").unwrap();
        let err = load_dataset(d.path(), None, None).unwrap_err().to_string();
        assert!(err.contains("labels.csv") && err.contains("row 3"), "{err}");

        fs::write(d.path().join("labels.csv"), "id,label\na,5\n").unwrap();
        let err = load_dataset(d.path(), None, Some(3)).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("outside"), "{err}");
        fs::write(d.path().join("labels.csv"), "id,label\na,-1\n").unwrap();
        assert!(load_dataset(d.path(), None, None).is_err());
    }

    #[test]
    fn smt1_roundtrip_is_bit_identical() {
        let ds = synth::generate(&synth::SynthSpec { count: 12, side: 16, classes: 4, seed: 3, id_prefix: "s".into() });
        let d = tempfile::tempdir().unwrap();
        write_dataset(&ds, d.path()).unwrap();
        let back = load_dataset(d.path(), None, Some(4)).unwrap();
        assert_eq!(back.records, ds.records);
    }

    #[test]
    fn batching() {
        let mut r = Rng::new(1);
        let b = shuffled_batches(4, 4, &mut r).unwrap();
        assert_eq!(b.len(), 1);
        let mut s = b[0].clone();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3]);

        let b = shuffled_batches(5, 2, &mut r).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 4);

        assert!(shuffled_batches(5, 0, &mut r).is_err());
        assert!(shuffled_batches(5, 6, &mut r).is_err());
        assert_eq!(shuffled_batches(100, 7, &mut Rng::new(9)).unwrap(), shuffled_batches(100, 7, &mut Rng::new(9)).unwrap());
    }

    #[test]
    fn epoch_has_no_repeats() {
        let b = shuffled_batches(1000, 64, &mut Rng::new(2)).unwrap();
        let all: Vec<usize> = b.concat();
        let set: HashSet<usize> = all.iter().copied().collect();
        assert_eq!(set.len(), all.len());
        assert_eq!(all.len(), 1000 / 64 * 64);
    }
}
