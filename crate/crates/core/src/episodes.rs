//! Class-indexed image datasets, class-disjoint splits and homogeneous episodes.
//!
//! Images are row-major `H x W` grayscale arrays with values in `[0, 1]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Binarization, DataConfig, DataFormat};
use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};

pub const PACKED_MAGIC: &[u8; 5] = b"SETS1";
pub const DATA_ROOT_ENV: &str = "HFSGM_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class_id: String,
    pub images: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndexedDataset {
    classes: Vec<ClassRecord>,
    height: usize,
    width: usize,
}

impl ClassIndexedDataset {
    pub fn new(classes: Vec<ClassRecord>, height: usize, width: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &classes {
            if !seen.insert(c.class_id.as_str()) {
                return Err(Error::Data(format!("duplicate class id '{}'", c.class_id)));
            }
            if c.images.is_empty() {
                return Err(Error::Data(format!("class '{}' has no images", c.class_id)));
            }
            for (i, im) in c.images.iter().enumerate() {
                if im.len() != height * width {
                    return Err(Error::Data(format!(
                        "class '{}' image {i}: {} pixels, expected {height}x{width}",
                        c.class_id,
                        im.len()
                    )));
                }
                if let Some(p) = im.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data(format!(
                        "class '{}' image {i}: value {} at ({}, {}) outside [0, 1]",
                        c.class_id,
                        im[p],
                        p / width,
                        p % width
                    )));
                }
            }
        }
        Ok(Self { classes, height, width })
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, id: &str) -> Option<&ClassRecord> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    /// Box-resizes every image to `side x side`.
    pub fn resized(&self, side: usize) -> Self {
        if self.height == side && self.width == side {
            return self.clone();
        }
        let classes = self
            .classes
            .iter()
            .map(|c| ClassRecord {
                class_id: c.class_id.clone(),
                images: c.images.iter().map(|im| box_resize(im, self.height, self.width, side, side)).collect(),
            })
            .collect();
        Self {
            classes,
            height: side,
            width: side,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (valid splits: train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl ClassSplits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeded shuffle of the class ids, cut into train/val/test of the requested sizes.
pub fn build_splits(dataset: &ClassIndexedDataset, counts: [usize; 3], seed: u64) -> Result<ClassSplits> {
    let total: usize = counts.iter().sum();
    if total != dataset.len() {
        return Err(Error::Config(format!(
            "split counts {counts:?} sum to {total}, expected the dataset's {} classes",
            dataset.len()
        )));
    }
    let mut ids: Vec<String> = dataset.classes.iter().map(|c| c.class_id.clone()).collect();
    ids.shuffle(&mut seeded(seed));
    let val = ids.split_off(counts[0]);
    let (val, test) = val.split_at(counts[1]);
    Ok(ClassSplits {
        train: ids,
        val: val.to_vec(),
        test: test.to_vec(),
    })
}

/// Static mode thresholds at 0.5; dynamic mode draws each pixel as Bernoulli(value).
pub fn binarize(image: &[f64], width: usize, mode: Binarization, rng: &mut SeededRng) -> Result<Vec<f64>> {
    image
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel ({}, {}) = {v} outside [0, 1]", i / width.max(1), i % width.max(1))));
            }
            Ok(match mode {
                Binarization::Static => {
                    if v >= 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Binarization::Dynamic => {
                    if rng.random::<f64>() < v {
                        1.0
                    } else {
                        0.0
                    }
                }
            })
        })
        .collect()
}

/// One episode: `S` binarized observations of a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct SetBatch {
    pub observations: Vec<Vec<f64>>,
    pub class_id: String,
    pub split: Split,
}

impl SetBatch {
    pub fn set_size(&self) -> usize {
        self.observations.len()
    }
}

/// Picks a class uniformly from `split` and draws `set_size` of its images, without
/// replacement when the class is large enough and with replacement otherwise.
pub fn sample_episode(
    dataset: &ClassIndexedDataset,
    splits: &ClassSplits,
    split: Split,
    set_size: usize,
    mode: Binarization,
    rng: &mut SeededRng,
) -> Result<SetBatch> {
    let ids = splits.get(split);
    if ids.is_empty() {
        return Err(Error::Config(format!("split '{split}' has no classes")));
    }
    if set_size == 0 {
        return Err(Error::Config("episode set size must be at least 1".into()));
    }
    let id = &ids[rng.random_range(0..ids.len())];
    let class = dataset.class(id).ok_or_else(|| Error::Data(format!("split references unknown class '{id}'")))?;
    let n = class.images.len();
    let picks: Vec<usize> = if n >= set_size {
        index::sample(rng, n, set_size).into_vec()
    } else {
        (0..set_size).map(|_| rng.random_range(0..n)).collect()
    };
    let observations = picks
        .into_iter()
        .map(|i| binarize(&class.images[i], dataset.width, mode, rng))
        .collect::<Result<_>>()?;
    Ok(SetBatch {
        observations,
        class_id: id.clone(),
        split,
    })
}

/// Area-averaging resize.
pub fn box_resize(image: &[f64], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    let axis = |old: usize, new: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = old as f64 / new as f64;
        (0..new)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < old {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let rows = axis(h, new_h);
    let cols = axis(w, new_w);
    let mut out = Vec::with_capacity(new_h * new_w);
    for r in &rows {
        for c in &cols {
            let v: f64 = r.iter().flat_map(|&(i, wi)| c.iter().map(move |&(j, wj)| wi * wj * image[i * w + j])).sum();
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

fn read_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect()))
}

/// Loads `root/<class_id>/<image>.pgm|png`, classes and images in name order.
pub fn load_dir(root: &Path) -> Result<ClassIndexedDataset> {
    let sorted_entries = |dir: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let mut classes = Vec::new();
    let mut dims = None;
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let class_id = class_dir.file_name().expect("directory entry").to_string_lossy().into_owned();
        let mut images = Vec::new();
        for file in sorted_entries(&class_dir)? {
            let ext = file.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
            if !matches!(ext.as_deref(), Some("pgm" | "png")) {
                continue;
            }
            let (h, w, px) = read_image(&file)?;
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::Data(format!("{}: {h}x{w} image, expected {}x{}", file.display(), d.0, d.1)));
                }
                _ => {}
            }
            images.push(px);
        }
        classes.push(ClassRecord { class_id, images });
    }
    let (h, w) = dims.ok_or_else(|| Error::Data(format!("{}: no images found", root.display())))?;
    ClassIndexedDataset::new(classes, h, w)
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(self.path, format!("truncated at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Reads the packed format: magic `SETS1`, `u32` class count, then per class a
/// `u16`-prefixed id, `u32` image count, `u16` height, `u16` width and one byte per pixel.
pub fn load_packed(path: &Path) -> Result<ClassIndexedDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(5)? != PACKED_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let count = cur.u32()? as usize;
    let mut classes = Vec::with_capacity(count.min(1 << 16));
    let mut dims = None;
    for _ in 0..count {
        let id_len = cur.u16()? as usize;
        let class_id = String::from_utf8(cur.take(id_len)?.to_vec()).map_err(|_| corrupt(path, "class id is not UTF-8"))?;
        let n = cur.u32()? as usize;
        let (h, w) = (cur.u16()? as usize, cur.u16()? as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => return Err(corrupt(path, format!("class '{class_id}' is {h}x{w}, expected {}x{}", d.0, d.1))),
            _ => {}
        }
        let images = (0..n)
            .map(|_| cur.take(h * w).map(|px| px.iter().map(|&p| p as f64 / 255.0).collect()))
            .collect::<Result<_>>()?;
        classes.push(ClassRecord { class_id, images });
    }
    if cur.pos != bytes.len() {
        return Err(corrupt(path, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let (h, w) = dims.unwrap_or((0, 0));
    ClassIndexedDataset::new(classes, h, w)
}

pub fn save_packed(dataset: &ClassIndexedDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(PACKED_MAGIC);
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for c in &dataset.classes {
        out.extend_from_slice(&(c.class_id.len() as u16).to_le_bytes());
        out.extend_from_slice(c.class_id.as_bytes());
        out.extend_from_slice(&(c.images.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dataset.height as u16).to_le_bytes());
        out.extend_from_slice(&(dataset.width as u16).to_le_bytes());
        for im in &c.images {
            out.extend(im.iter().map(|v| (v * 255.0).round() as u8));
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Loads the dataset described by `cfg`, resized to `side x side`.
pub fn load_dataset(cfg: &DataConfig, side: usize) -> Result<ClassIndexedDataset> {
    let root = || {
        cfg.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(Into::into))
            .ok_or_else(|| Error::Config(format!("data.root is not set and {DATA_ROOT_ENV} is undefined")))
    };
    let ds = match cfg.format {
        DataFormat::Synthetic => {
            let s = &cfg.synthetic;
            crate::synthetic::strokes_dataset(s.classes, s.per_class, side, s.seed)
        }
        DataFormat::Dir => load_dir(&root()?)?,
        DataFormat::Packed => load_packed(&root()?)?,
    };
    if ds.height() != ds.width() {
        return Err(Error::Data(format!("images are {}x{}; only square images are supported", ds.height(), ds.width())));
    }
    Ok(ds.resized(side))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize, side: usize) -> ClassIndexedDataset {
        let recs = (0..classes)
            .map(|c| ClassRecord {
                class_id: format!("c{c}"),
                images: (0..per_class).map(|i| vec![((c + i) % 3) as f64 / 2.0; side * side]).collect(),
            })
            .collect();
        ClassIndexedDataset::new(recs, side, side).unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let ds = toy(1623, 1, 2);
        let s = build_splits(&ds, [1000, 200, 423], 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1000, 200, 423));
        assert_eq!(s, build_splits(&ds, [1000, 200, 423], 7).unwrap());
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 1623);

        let three = build_splits(&toy(3, 1, 2), [1, 1, 1], 0).unwrap();
        assert_eq!((three.train.len(), three.val.len(), three.test.len()), (1, 1, 1));
        let err = build_splits(&ds, [1, 1, 1], 0).unwrap_err();
        assert!(err.to_string().contains("1623"), "{err}");
    }

    #[test]
    fn binarization_modes() {
        let mut rng = seeded(0);
        assert!(binarize(&[0.0; 9], 3, Binarization::Static, &mut rng).unwrap().iter().all(|&v| v == 0.0));
        assert!(binarize(&[1.0; 9], 3, Binarization::Dynamic, &mut rng).unwrap().iter().all(|&v| v == 1.0));
        let half = vec![0.5; 784];
        let a = binarize(&half, 28, Binarization::Dynamic, &mut seeded(3)).unwrap();
        let b = binarize(&half, 28, Binarization::Dynamic, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        let mean = a.iter().sum::<f64>() / 784.0;
        assert!((0.446..=0.554).contains(&mean), "{mean}");
        let err = binarize(&[0.0, 0.0, 0.0, 1.5], 2, Binarization::Static, &mut rng).unwrap_err();
        assert!(err.to_string().contains("(1, 1)"), "{err}");
    }

    #[test]
    fn episodes_are_homogeneous() {
        let ds = toy(6, 20, 2);
        let splits = build_splits(&ds, [4, 1, 1], 1).unwrap();
        let mut rng = seeded(2);
        for s in [1, 5, 20, 30] {
            let ep = sample_episode(&ds, &splits, Split::Train, s, Binarization::Static, &mut rng).unwrap();
            assert_eq!(ep.set_size(), s);
            assert!(splits.train.contains(&ep.class_id));
        }
        let empty = ClassSplits {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        assert!(sample_episode(&ds, &empty, Split::Train, 1, Binarization::Static, &mut rng).is_err());
        let a = sample_episode(&ds, &splits, Split::Val, 5, Binarization::Dynamic, &mut seeded(9)).unwrap();
        let b = sample_episode(&ds, &splits, Split::Val, 5, Binarization::Dynamic, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn packed_roundtrip_and_truncation() {
        let ds = toy(3, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sets");
        save_packed(&ds, &path).unwrap();
        let back = load_packed(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.classes().iter().zip(ds.classes()) {
            assert_eq!(a.class_id, b.class_id);
            for (x, y) in a.images.concat().iter().zip(b.images.concat()) {
                assert!((x - y).abs() <= 0.5 / 255.0);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_packed(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn directory_loader() {
        let dir = tempfile::tempdir().unwrap();
        for (c, v) in [("a", 0u8), ("b", 255u8)] {
            std::fs::create_dir(dir.path().join(c)).unwrap();
            for i in 0..2 {
                let img = image::GrayImage::from_pixel(3, 3, image::Luma([v]));
                img.save(dir.path().join(c).join(format!("{i}.pgm"))).unwrap();
            }
        }
        let ds = load_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class("b").unwrap().images[1], vec![1.0; 9]);
    }

    #[test]
    fn box_resize_preserves_mean() {
        let img: Vec<f64> = (0..56 * 56).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let small = box_resize(&img, 56, 56, 28, 28);
        let m1 = img.iter().sum::<f64>() / img.len() as f64;
        let m2 = small.iter().sum::<f64>() / small.len() as f64;
        assert!((m1 - m2).abs() < 1e-12);
        assert_eq!(box_resize(&[0.2, 0.4, 0.6, 0.8], 2, 2, 1, 1), vec![0.5]);
        let up = box_resize(&[0.25], 1, 1, 3, 3);
        assert!(up.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn unknown_split_lists_valid_names() {
        let err = "dev".parse::<Split>().unwrap_err();
        assert!(err.to_string().contains("train, val, test"));
    }
}
