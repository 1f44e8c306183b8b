//! Dataset ingestion and image I/O: IDX files, portable anymaps (PGM/PPM,
//! plain and binary), CSV fixtures, seeded train/validation splits, and
//! minibatch iteration.
//!
//! All loaders are pure functions; a [`Dataset`] is immutable after load.
//! Images are flattened channel-major — sample `(y, x)` of channel `c` of an
//! `H×W×C` image lives at `(c·H + y)·W + x` — matching the grid convention
//! of the model builder.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{CoreError, Result};
use crate::learning::TaskBatch;
use crate::real::{real, Real};

/// File-format problems, wrapped as [`CoreError::Data`].
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic (expected 0x{expected:08x}, got 0x{got:08x})")]
    BadMagic { path: String, expected: u32, got: u32 },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    LengthMismatch { images: usize, labels: usize },
    #[error("{path}: truncated ({needed} more bytes expected)")]
    TruncatedFile { path: String, needed: usize },
    #[error("{path}: unsupported format ({detail})")]
    UnsupportedFormat { path: String, detail: String },
    #[error("{path}: corrupt header ({detail})")]
    CorruptHeader { path: String, detail: String },
    #[error("{path}: intensity {value} outside [0,1]")]
    OutOfRange { path: String, value: f64 },
}

fn data_err(e: DataError) -> CoreError {
    CoreError::Data(e)
}

/// A labelled (or unlabelled) image collection with intensities in `[0,1]`.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    /// Flattened channel-major images, all `h·w·c` long.
    pub images: Vec<Vec<T>>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Class indices, when the source provides them.
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[H, W, C]`, the `input` field of a model spec.
    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }

    /// `max(label) + 1`, when labelled.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |&m| m + 1))
    }

    /// Materialize the examples at `indices` (cloned) as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            h: self.h,
            w: self.w,
            c: self.c,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
        }
    }

    /// Disjoint, seeded, size-exact train/validation split: the validation
    /// set gets `round(fraction·N)` randomly chosen examples, both halves
    /// keep original relative order.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
        if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
            return Err(CoreError::InvalidParameter(format!(
                "validation fraction must be in (0,1), got {validation_fraction}"
            )));
        }
        let n = self.len();
        let n_val = (validation_fraction * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val_idx, train_idx) = idx.split_at_mut(n_val);
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok((self.subset(train_idx), self.subset(val_idx)))
    }

    /// One epoch of minibatches as [`TaskBatch`]es for the filtering driver:
    /// every example appears exactly once, the last batch may be short.
    pub fn task_batches(
        &self,
        batch_size: usize,
        seed: u64,
        shuffle: bool,
    ) -> Result<Vec<TaskBatch<T>>> {
        let order = batch_indices(self.len(), batch_size, seed, shuffle)?;
        Ok(order
            .iter()
            .map(|batch| {
                let sub = self.subset(batch);
                TaskBatch { inputs: sub.images, labels: sub.labels, targets: None }
            })
            .collect())
    }
}

/// Epoch batch plan over `0..n`: chunks of `batch_size` indices covering
/// every example exactly once (`shuffle` randomizes the visit order with a
/// seeded RNG; otherwise original order). The last batch may be short.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(CoreError::InvalidParameter("batch size must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct ByteReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Ok(ByteReader { path, bytes, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(data_err(DataError::TruncatedFile {
                path: self.path.display().to_string(),
                needed: self.pos + n - self.bytes.len(),
            }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn be_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load an IDX image/label file pair (the MNIST container format):
/// big-endian magics `0x00000803` (images: N, H, W dims then N·H·W bytes)
/// and `0x00000801` (labels: N dim then N bytes). Pixel bytes are scaled by
/// 1/255.
pub fn load_idx<T: Real>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let mut ir = ByteReader::open(images_path)?;
    let magic = ir.be_u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(data_err(DataError::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        }));
    }
    let n = ir.be_u32()? as usize;
    let h = ir.be_u32()? as usize;
    let w = ir.be_u32()? as usize;
    let scale = real::<T>(1.0 / 255.0);
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let row = ir.take(h * w)?;
        images.push(row.iter().map(|&b| real::<T>(b as f64) * scale).collect());
    }

    let mut lr = ByteReader::open(labels_path)?;
    let magic = lr.be_u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(data_err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        }));
    }
    let nl = lr.be_u32()? as usize;
    if nl != n {
        return Err(data_err(DataError::LengthMismatch { images: n, labels: nl }));
    }
    let labels = lr.take(nl)?.iter().map(|&b| b as usize).collect();

    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset { images, h, w, c: 1, labels: Some(labels), name })
}

/// Write a dataset (C = 1) as an IDX image/label file pair, quantizing
/// intensities to bytes with `round(v·255)`. Inverse of [`load_idx`] for
/// 8-bit data.
pub fn save_idx<T: Real>(
    dataset: &Dataset<T>,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if dataset.c != 1 {
        return Err(CoreError::InvalidParameter(format!(
            "IDX stores single-channel images, dataset has c={}",
            dataset.c
        )));
    }
    let labels = dataset.labels.as_ref().ok_or_else(|| {
        CoreError::InvalidParameter("IDX pair needs labels (use an anymap for raw images)".into())
    })?;
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    iw.write_all(&(dataset.len() as u32).to_be_bytes())?;
    iw.write_all(&(dataset.h as u32).to_be_bytes())?;
    iw.write_all(&(dataset.w as u32).to_be_bytes())?;
    for img in &dataset.images {
        let bytes: Vec<u8> = img.iter().map(|&v| quantize(v, 255) as u8).collect();
        iw.write_all(&bytes)?;
    }
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lw.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    lw.write_all(&bytes)?;
    lw.flush()?;
    Ok(())
}

/// A single image with intensities in `[0,1]`, flattened channel-major like
/// [`Dataset`] rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub pixels: Vec<T>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

fn quantize<T: Real>(v: T, maxval: u32) -> u32 {
    let x = (v.to_f64_c() * maxval as f64).round();
    x.clamp(0.0, maxval as f64) as u32
}

/// Load a portable anymap: P2/P5 graymaps (C = 1) or P3/P6 pixmaps (C = 3),
/// plain or binary, maxval 255 or 65535. Samples are scaled by 1/maxval;
/// interleaved pixmap samples are re-laid-out channel-major.
pub fn load_image<T: Real>(path: &Path) -> Result<Image<T>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let pstr = path.display().to_string();
    let corrupt = |detail: &str| {
        data_err(DataError::CorruptHeader { path: pstr.clone(), detail: detail.into() })
    };

    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(corrupt("missing P magic"));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1usize, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        other => {
            return Err(data_err(DataError::UnsupportedFormat {
                path: pstr,
                detail: format!("magic P{} (only P2/P3/P5/P6)", other as char),
            }))
        }
    };

    // Header tokens (width, height, maxval) with `#` comments allowed.
    let mut pos = 2usize;
    let token = |pos: &mut usize| -> Result<u32> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return Err(corrupt("expected decimal header token"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("header token overflow"))
    };
    let w = token(&mut pos)? as usize;
    let h = token(&mut pos)? as usize;
    let maxval = token(&mut pos)?;
    if maxval != 255 && maxval != 65535 {
        return Err(data_err(DataError::UnsupportedFormat {
            path: pstr,
            detail: format!("maxval {maxval} (only 255 or 65535)"),
        }));
    }
    if w == 0 || h == 0 {
        return Err(corrupt("zero image dimension"));
    }

    let n = w * h * channels;
    let mut samples = Vec::with_capacity(n);
    if binary {
        // Exactly one whitespace byte separates the header from raster data.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(corrupt("missing whitespace before raster"));
        }
        pos += 1;
        let per = if maxval == 255 { 1 } else { 2 };
        let need = n * per;
        if bytes.len() < pos + need {
            return Err(data_err(DataError::TruncatedFile {
                path: pstr,
                needed: pos + need - bytes.len(),
            }));
        }
        for i in 0..n {
            let off = pos + i * per;
            let v = if per == 1 {
                bytes[off] as u32
            } else {
                u32::from(bytes[off]) << 8 | u32::from(bytes[off + 1])
            };
            samples.push(v);
        }
    } else {
        for _ in 0..n {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos >= bytes.len() {
                return Err(data_err(DataError::TruncatedFile { path: pstr, needed: 1 }));
            }
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if pos == start {
                return Err(corrupt("non-numeric raster sample"));
            }
            let v: u32 = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| corrupt("raster sample overflow"))?;
            samples.push(v);
        }
    }
    if samples.iter().any(|&v| v > maxval) {
        return Err(corrupt("sample exceeds maxval"));
    }

    // Interleaved rows → channel-major planes.
    let scale = real::<T>(1.0 / maxval as f64);
    let mut pixels = vec![T::zero(); n];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                let v = samples[(y * w + x) * channels + ch];
                pixels[(ch * h + y) * w + x] = real::<T>(v as f64) * scale;
            }
        }
    }
    Ok(Image { pixels, h, w, c: channels })
}

/// Save an image as a binary anymap — P5 for C = 1, P6 for C = 3 — with
/// maxval 255. `save_image` then [`load_image`] reproduces 8-bit data
/// exactly.
pub fn save_image<T: Real>(image: &Image<T>, path: &Path) -> Result<()> {
    write_anymap(image, path, true)
}

/// Save as a plain-text anymap (P2/P3), maxval 255.
pub fn save_image_plain<T: Real>(image: &Image<T>, path: &Path) -> Result<()> {
    write_anymap(image, path, false)
}

fn write_anymap<T: Real>(image: &Image<T>, path: &Path, binary: bool) -> Result<()> {
    let magic = match (image.c, binary) {
        (1, true) => "P5",
        (1, false) => "P2",
        (3, true) => "P6",
        (3, false) => "P3",
        _ => {
            return Err(CoreError::InvalidParameter(format!(
                "anymaps hold 1 or 3 channels, image has c={}",
                image.c
            )))
        }
    };
    let (h, w, c) = (image.h, image.w, image.c);
    if image.pixels.len() != h * w * c {
        return Err(CoreError::ShapeMismatch {
            context: "image pixel buffer",
            expected: h * w * c,
            got: image.pixels.len(),
        });
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{magic}\n{w} {h}\n255\n")?;
    // Channel-major planes → interleaved rows.
    let sample = |y: usize, x: usize, ch: usize| -> u8 {
        quantize(image.pixels[(ch * h + y) * w + x], 255) as u8
    };
    if binary {
        let mut raster = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    raster.push(sample(y, x, ch));
                }
            }
        }
        out.write_all(&raster)?;
    } else {
        for y in 0..h {
            let row: Vec<String> = (0..w)
                .flat_map(|x| (0..c).map(move |ch| (x, ch)))
                .map(|(x, ch)| sample(y, x, ch).to_string())
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Load every anymap frame in a directory (extensions `pgm`/`ppm`/`pnm`),
/// sorted by file name. All frames must share one shape.
pub fn load_frames<T: Real>(dir: &Path) -> Result<Vec<Image<T>>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e, "pgm" | "ppm" | "pnm"))
        })
        .collect();
    paths.sort();
    let mut frames = Vec::with_capacity(paths.len());
    for p in paths {
        let img = load_image::<T>(&p)?;
        if let Some(first) = frames.first() {
            let f: &Image<T> = first;
            if (f.h, f.w, f.c) != (img.h, img.w, img.c) {
                return Err(CoreError::ModelMismatch(format!(
                    "frame {} is {}×{}×{}, first frame is {}×{}×{}",
                    p.display(),
                    img.h,
                    img.w,
                    img.c,
                    f.h,
                    f.w,
                    f.c
                )));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// Load a CSV fixture: one image per row, `h·w·c` comma-separated floats in
/// `[0,1]` (out-of-range values are rejected).
pub fn load_csv_images<T: Real>(path: &Path, shape: [usize; 3]) -> Result<Dataset<T>> {
    let [h, w, c] = shape;
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut images = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                data_err(DataError::CorruptHeader {
                    path: pstr.clone(),
                    detail: format!("line {}: {e}", ln + 1),
                })
            })?;
        if row.len() != h * w * c {
            return Err(CoreError::ShapeMismatch {
                context: "csv image row",
                expected: h * w * c,
                got: row.len(),
            });
        }
        if let Some(&bad) = row.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(data_err(DataError::OutOfRange { path: pstr, value: bad }));
        }
        images.push(row.into_iter().map(real::<T>).collect());
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset { images, h, w, c, labels: None, name })
}

/// Load a CSV fixture of class labels: one non-negative integer per line.
pub fn load_csv_labels(path: &Path) -> Result<Vec<usize>> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse::<usize>().map_err(|e| {
                data_err(DataError::CorruptHeader { path: pstr.clone(), detail: e.to_string() })
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn tiny_dataset() -> Dataset<f64> {
        let images = (0..5u8)
            .map(|k| (0..4).map(|p| f64::from(k * 4 + p) / 255.0).collect())
            .collect();
        Dataset { images, h: 2, w: 2, c: 1, labels: Some(vec![0, 1, 2, 1, 0]), name: "t".into() }
    }

    #[test]
    fn idx_round_trip_scaling_and_zeros() {
        let dir = tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        let ds = tiny_dataset();
        save_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.shape(), [2, 2, 1]);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes(), Some(3));
        for (a, b) in back.images.iter().zip(&ds.images) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        let zeros = Dataset::<f64> {
            images: vec![vec![0.0; 4]; 3],
            h: 2,
            w: 2,
            c: 1,
            labels: Some(vec![0; 3]),
            name: "z".into(),
        };
        save_idx(&zeros, &ip, &lp).unwrap();
        let back = load_idx::<f64>(&ip, &lp).unwrap();
        assert!(back.images.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_bad_magic_truncation_and_length_mismatch() {
        let dir = tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        save_idx(&tiny_dataset(), &ip, &lp).unwrap();

        // Flip the images magic.
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        let bad = dir.path().join("bad.idx");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_idx::<f64>(&bad, &lp),
            Err(CoreError::Data(DataError::BadMagic { .. }))
        ));

        // Drop the last pixel byte.
        let bytes = fs::read(&ip).unwrap();
        fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_idx::<f64>(&bad, &lp),
            Err(CoreError::Data(DataError::TruncatedFile { needed: 1, .. }))
        ));

        // Claim 6 labels for 5 images.
        let mut lbytes = fs::read(&lp).unwrap();
        lbytes[7] = 6;
        lbytes.push(0);
        fs::write(&bad, &lbytes).unwrap();
        assert!(matches!(
            load_idx::<f64>(&ip, &bad),
            Err(CoreError::Data(DataError::LengthMismatch { images: 5, labels: 6 }))
        ));
    }

    #[test]
    fn plain_graymap_values_and_comments() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        fs::write(&p, "P2\n# a comment\n2 2\n255\n0 85\n170 255\n").unwrap();
        let img = load_image::<f64>(&p).unwrap();
        assert_eq!((img.h, img.w, img.c), (2, 2, 1));
        let want = [0.0, 85.0 / 255.0, 170.0 / 255.0, 1.0];
        for (a, b) in img.pixels.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_round_trip_gray_and_color() {
        let dir = tempdir().unwrap();
        for (c, ext) in [(1usize, "pgm"), (3, "ppm")] {
            let (h, w) = (3usize, 5usize);
            let pixels: Vec<f64> =
                (0..h * w * c).map(|i| ((i * 37 + 11) % 256) as f64 / 255.0).collect();
            let img = Image { pixels, h, w, c };
            let p = dir.path().join(format!("x.{ext}"));
            save_image(&img, &p).unwrap();
            let back = load_image::<f64>(&p).unwrap();
            assert_eq!((back.h, back.w, back.c), (h, w, c));
            for (a, b) in back.pixels.iter().zip(&img.pixels) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            // Plain writer round-trips identically too.
            let pp = dir.path().join(format!("y_plain.{ext}"));
            save_image_plain(&img, &pp).unwrap();
            let back2 = load_image::<f64>(&pp).unwrap();
            assert_eq!(back.pixels, back2.pixels);
        }
    }

    #[test]
    fn sixteen_bit_graymap_parses() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.pgm");
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x00, 0xff, 0xff]); // 0 and 65535
        fs::write(&p, &bytes).unwrap();
        let img = load_image::<f64>(&p).unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0]);
    }

    #[test]
    fn anymap_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.pgm");

        fs::write(&p, "P7\n2 2\n255\n0 0 0 0").unwrap();
        assert!(matches!(
            load_image::<f64>(&p),
            Err(CoreError::Data(DataError::UnsupportedFormat { .. }))
        ));

        fs::write(&p, "P2\n2 2\n300\n0 0 0 0").unwrap();
        assert!(matches!(
            load_image::<f64>(&p),
            Err(CoreError::Data(DataError::UnsupportedFormat { .. }))
        ));

        fs::write(&p, "P5\n2 2\n255\n\x01\x02\x03").unwrap();
        assert!(matches!(
            load_image::<f64>(&p),
            Err(CoreError::Data(DataError::TruncatedFile { needed: 1, .. }))
        ));

        fs::write(&p, "P2\nnot numbers\n").unwrap();
        assert!(matches!(
            load_image::<f64>(&p),
            Err(CoreError::Data(DataError::CorruptHeader { .. }))
        ));
    }

    #[test]
    fn split_is_exact_disjoint_and_seeded() {
        let big = Dataset::<f64> {
            images: (0..60000).map(|i| vec![(i % 256) as f64 / 255.0]).collect(),
            h: 1,
            w: 1,
            c: 1,
            labels: Some((0..60000).map(|i| i % 10).collect()),
            name: "big".into(),
        };
        let (train, val) = big.split(0.15, 7).unwrap();
        assert_eq!(train.len(), 51000);
        assert_eq!(val.len(), 9000);

        // Same seed reproduces; different seed differs.
        let (_, val2) = big.split(0.15, 7).unwrap();
        assert_eq!(val.images, val2.images);
        let (_, val3) = big.split(0.15, 8).unwrap();
        assert_ne!(val.images, val3.images);

        // Disjoint and complete on a small set with unique pixel values.
        let small = Dataset::<f64> {
            images: (0..10).map(|i| vec![i as f64 / 255.0]).collect(),
            h: 1,
            w: 1,
            c: 1,
            labels: None,
            name: "s".into(),
        };
        let (tr, va) = small.split(0.5, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (5, 5));
        let mut all: Vec<f64> =
            tr.images.iter().chain(&va.images).map(|v| v[0]).collect();
        all.sort_by(f64::total_cmp);
        let want: Vec<f64> = (0..10).map(|i| i as f64 / 255.0).collect();
        assert_eq!(all, want);

        let two = small.subset(&[0, 1]);
        let (t2, v2) = two.split(0.5, 0).unwrap();
        assert_eq!((t2.len(), v2.len()), (1, 1));

        assert!(big.split(0.0, 0).is_err());
        assert!(big.split(1.0, 0).is_err());
    }

    #[test]
    fn batches_cover_every_example_once() {
        let plan = batch_indices(60000, 50, 0, true).unwrap();
        assert_eq!(plan.len(), 1200);
        assert!(plan.iter().all(|b| b.len() == 50));

        let plan = batch_indices(7, 3, 1, true).unwrap();
        let sizes: Vec<usize> = plan.iter().map(Vec::len).collect();
        assert_eq!(sizes, [3, 3, 1]);
        let mut seen: Vec<usize> = plan.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());

        let ordered = batch_indices(7, 3, 1, false).unwrap();
        assert_eq!(ordered.concat(), (0..7).collect::<Vec<_>>());

        assert_eq!(batch_indices(7, 3, 1, true).unwrap(), plan);
        assert!(batch_indices(7, 0, 0, false).is_err());
    }

    #[test]
    fn task_batches_carry_labels() {
        let ds = tiny_dataset();
        let tb = ds.task_batches(2, 0, false).unwrap();
        assert_eq!(tb.len(), 3);
        assert_eq!(tb[0].inputs.len(), 2);
        assert_eq!(tb[2].inputs.len(), 1);
        assert_eq!(tb[0].labels, Some(vec![0, 1]));
        assert_eq!(tb[2].labels, Some(vec![0]));
        assert!(tb[0].targets.is_none());
    }

    #[test]
    fn csv_fixture_round_trip_and_range_check() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs::write(&p, "0.0, 0.5, 1.0, 0.25\n1.0, 0.0, 0.125, 0.75\n").unwrap();
        let ds = load_csv_images::<f64>(&p, [2, 2, 1]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[0], vec![0.0, 0.5, 1.0, 0.25]);

        fs::write(&p, "0.0, 1.5, 0.0, 0.0\n").unwrap();
        assert!(matches!(
            load_csv_images::<f64>(&p, [2, 2, 1]),
            Err(CoreError::Data(DataError::OutOfRange { .. }))
        ));

        let lp = dir.path().join("l.csv");
        fs::write(&lp, "0\n3\n1\n").unwrap();
        assert_eq!(load_csv_labels(&lp).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn frames_load_sorted_and_shape_checked() {
        let dir = tempdir().unwrap();
        for (i, v) in [(0usize, 10u8), (1, 20), (2, 30)] {
            let img = Image { pixels: vec![f64::from(v) / 255.0; 4], h: 2, w: 2, c: 1 };
            save_image(&img, &dir.path().join(format!("frame_{i:03}.pgm"))).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let frames = load_frames::<f64>(dir.path()).unwrap();
        assert_eq!(frames.len(), 3);
        let vals: Vec<f64> = frames.iter().map(|f| f.pixels[0] * 255.0).collect();
        assert!((vals[0] - 10.0).abs() < 1e-9 && (vals[2] - 30.0).abs() < 1e-9);

        let odd = Image { pixels: vec![0.5; 6], h: 2, w: 3, c: 1 };
        save_image(&odd, &dir.path().join("frame_999.pgm")).unwrap();
        assert!(load_frames::<f64>(dir.path()).is_err());
    }

    proptest! {
        /// Binary anymaps round-trip arbitrary 8-bit rasters exactly.
        #[test]
        fn prop_anymap_round_trips_bytes(
            raw in proptest::collection::vec(0u8..=255, 1..60),
            w in 1usize..6,
            color in proptest::bool::ANY,
        ) {
            let c = if color { 3 } else { 1 };
            let need_mult = w * c;
            let mut raw = raw;
            while raw.len() % need_mult != 0 || raw.is_empty() {
                raw.push(0);
            }
            let h = raw.len() / need_mult;
            // Bytes arrive interleaved row-major; lay out channel-major.
            let mut pixels = vec![0.0f64; raw.len()];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        pixels[(ch * h + y) * w + x] =
                            f64::from(raw[(y * w + x) * c + ch]) / 255.0;
                    }
                }
            }
            let img = Image { pixels, h, w, c };
            let dir = tempdir().unwrap();
            let p = dir.path().join(if color { "p.ppm" } else { "p.pgm" });
            save_image(&img, &p).unwrap();
            let back = load_image::<f64>(&p).unwrap();
            for (a, b) in back.pixels.iter().zip(&img.pixels) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
