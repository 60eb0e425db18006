//! Image I/O, luma conversion, padding, and deterministic patch sampling.
//!
//! Everything downstream operates on a single luma plane held as `f64`
//! samples in `[0, 255]`. RGB inputs are converted with the full-range
//! BT.601 weights used by the JPEG/JFIF convention.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::jpeg::{self, CoeffGrid, QuantTable};

/// 2D luma raster, row-major `f64` samples in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    samples: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "plane samples length {} does not match {}x{}",
                samples.len(),
                width,
                height
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        ImagePlane {
            width,
            height,
            samples: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut samples = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                samples.push(f(x, y));
            }
        }
        ImagePlane {
            width,
            height,
            samples,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.samples[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.samples[y * self.width..(y + 1) * self.width]
    }

    /// Top-left crop to `width` x `height`.
    pub fn crop(&self, width: usize, height: usize) -> Result<ImagePlane> {
        self.crop_at(0, 0, width, height)
    }

    pub fn crop_at(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImagePlane> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{}+{}+{} exceeds plane {}x{}",
                width, height, x0, y0, self.width, self.height
            )));
        }
        let mut samples = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            samples.extend_from_slice(&self.samples[y * self.width + x0..y * self.width + x0 + width]);
        }
        Ok(ImagePlane {
            width,
            height,
            samples,
        })
    }

    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.samples {
            *v = v.clamp(lo, hi);
        }
    }

    /// Maximum absolute sample difference; planes must have equal shape.
    pub fn max_abs_diff(&self, other: &ImagePlane) -> f64 {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Loads a PNG (8-bit gray or RGB) or binary PGM as a luma plane.
///
/// RGB is converted with full-range BT.601; grayscale passes through.
pub fn load_luma(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::decode(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let samples = match img {
        image::DynamicImage::ImageLuma8(gray) => {
            gray.into_raw().into_iter().map(f64::from).collect()
        }
        image::DynamicImage::ImageRgb8(rgb) => rgb
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (LUMA_R * f64::from(r) + LUMA_G * f64::from(g) + LUMA_B * f64::from(b))
                    .clamp(0.0, 255.0)
            })
            .collect(),
        other => {
            return Err(Error::decode(
                path,
                format!("unsupported color type {:?} (expected 8-bit gray or RGB)", other.color()),
            ))
        }
    };
    ImagePlane::new(w, h, samples)
}

/// Writes an 8-bit grayscale PNG; samples are rounded half away from zero
/// and clamped to `[0, 255]`. Output appears atomically (temp + rename).
pub fn save_luma(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = plane
        .samples
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(plane.width as u32, plane.height as u32, bytes)
        .expect("buffer length matches dimensions");
    let mut encoded = std::io::Cursor::new(Vec::new());
    img.write_to(&mut encoded, image::ImageFormat::Png)
        .map_err(|e| Error::decode(path, format!("png encode failed: {e}")))?;
    atomic_write(path, &encoded.into_inner())
}

/// Writes `bytes` to `path` via a temporary sibling file and rename, so a
/// failure never leaves a partial output behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling_tmp(path);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn sibling_tmp(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Rounds both dimensions up to the next multiple of 8 by edge replication.
/// Returns the padded plane and the original size for cropping afterwards.
pub fn pad_to_block_multiple(plane: &ImagePlane) -> (ImagePlane, (usize, usize)) {
    let (w, h) = (plane.width, plane.height);
    assert!(w > 0 && h > 0, "plane must be non-empty");
    let pw = w.div_ceil(8) * 8;
    let ph = h.div_ceil(8) * 8;
    if pw == w && ph == h {
        return (plane.clone(), (w, h));
    }
    let mut padded = ImagePlane::filled(pw, ph, 0.0);
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            let sx = x.min(w - 1);
            padded.samples[y * pw + x] = plane.samples[sy * w + sx];
        }
    }
    (padded, (w, h))
}

/// One training pair plus the codec-side data the DCT branch consumes.
#[derive(Debug, Clone)]
pub struct Patch {
    pub clean: ImagePlane,
    pub degraded: ImagePlane,
    pub coeffs: CoeffGrid,
    pub table: QuantTable,
}

/// A deterministic batch of degradation pairs.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub patches: Vec<Patch>,
    pub patch_size: usize,
    pub seed: u64,
}

/// Lists the usable corpus images (`.png`, `.pgm`) in `dir`, sorted by name.
pub fn list_corpus(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png") | Some("pgm")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Draws `count` square patches at uniformly random pixel offsets and
/// degrades each at quality factor `qf`. Deterministic for a fixed seed.
///
/// Images smaller than `patch_size` in either dimension are skipped with a
/// warning on stderr.
pub fn sample_patches(
    corpus: &[PathBuf],
    patch_size: usize,
    count: usize,
    qf: u8,
    seed: u64,
) -> Result<PatchBatch> {
    if patch_size == 0 || patch_size % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch_size {patch_size} must be a positive multiple of 8"
        )));
    }
    let mut usable = Vec::new();
    for path in corpus {
        let plane = load_luma(path)?;
        if plane.width() < patch_size || plane.height() < patch_size {
            eprintln!(
                "warning: skipping {} ({}x{} smaller than patch size {})",
                path.display(),
                plane.width(),
                plane.height(),
                patch_size
            );
            continue;
        }
        usable.push(plane);
    }
    if usable.is_empty() {
        return Err(Error::Config(format!(
            "no corpus image is at least {patch_size}x{patch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    for _ in 0..count {
        let img = &usable[rng.random_range(0..usable.len())];
        let x0 = rng.random_range(0..=img.width() - patch_size);
        let y0 = rng.random_range(0..=img.height() - patch_size);
        let clean = img.crop_at(x0, y0, patch_size, patch_size)?;
        let degraded = jpeg::degrade(&clean, qf)?;
        patches.push(Patch {
            clean,
            degraded: degraded.plane,
            coeffs: degraded.coeffs,
            table: degraded.table,
        });
    }
    Ok(PatchBatch {
        patches,
        patch_size,
        seed,
    })
}
