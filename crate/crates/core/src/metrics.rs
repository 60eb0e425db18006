//! Quality metrics: PSNR, SSIM (Gaussian-window reference formulation),
//! PSNR-B with the blocking-effect factor, and dataset-level aggregation.

use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{list_corpus, load_luma, ImagePlane};
use crate::jpeg;
use crate::net::{restore, Model};

/// Reported PSNR is capped here so identical images stay serializable.
pub const PSNR_CAP_DB: f64 = 100.0;

fn mse(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let n = a.samples().len() as f64;
    a.samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

fn check_same_shape(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::InvalidArgument(format!(
            "image shapes disagree: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn psnr_from_mse(total: f64) -> f64 {
    if total <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0 * 255.0 / total).log10()).min(PSNR_CAP_DB)
}

/// `10 log10(255^2 / MSE)`, capped at 100 dB for identical images.
pub fn psnr(reference: &ImagePlane, test: &ImagePlane) -> Result<f64> {
    check_same_shape(reference, test)?;
    Ok(psnr_from_mse(mse(reference, test)))
}

/// 11x11 Gaussian window, sigma 1.5, normalized to sum 1.
static SSIM_WINDOW: LazyLock<[f64; 121]> = LazyLock::new(|| {
    let mut w = [0.0; 121];
    let sigma = 1.5f64;
    let mut sum = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            w[i * 11 + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
});

const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Mean local SSIM with the reference 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, `L = 255`, evaluated where the window fits.
pub fn ssim(reference: &ImagePlane, test: &ImagePlane) -> Result<f64> {
    check_same_shape(reference, test)?;
    let (w, h) = (reference.width(), reference.height());
    if w < 11 || h < 11 {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least 11x11 pixels, got {w}x{h}"
        )));
    }
    let win = &*SSIM_WINDOW;
    let (ow, oh) = (w - 10, h - 10);
    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for i in 0..11 {
                let xrow = &reference.row(oy + i)[ox..ox + 11];
                let yrow = &test.row(oy + i)[ox..ox + 11];
                let wrow = &win[i * 11..i * 11 + 11];
                for j in 0..11 {
                    let (wv, xv, yv) = (wrow[j], xrow[j], yrow[j]);
                    mx += wv * xv;
                    my += wv * yv;
                    mxx += wv * xv * xv;
                    myy += wv * yv * yv;
                    mxy += wv * xv * yv;
                }
            }
            let sxx = mxx - mx * mx;
            let syy = myy - my * my;
            let sxy = mxy - mx * my;
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
        }
    }
    Ok(acc / (ow * oh) as f64)
}

/// Blocking-effect factor of the test image: excess mean squared difference
/// across block boundaries over non-boundary neighbours, log-weighted,
/// floored at zero. Grid anchored at (0, 0).
fn blocking_effect_factor(test: &ImagePlane, block: usize) -> f64 {
    let (w, h) = (test.width(), test.height());
    let mut sum_boundary = 0.0;
    let mut n_boundary = 0usize;
    let mut sum_interior = 0.0;
    let mut n_interior = 0usize;
    for y in 0..h {
        let row = test.row(y);
        for x in 0..w - 1 {
            let d = row[x + 1] - row[x];
            if (x + 1) % block == 0 {
                sum_boundary += d * d;
                n_boundary += 1;
            } else {
                sum_interior += d * d;
                n_interior += 1;
            }
        }
    }
    for y in 0..h - 1 {
        let row = test.row(y);
        let next = test.row(y + 1);
        for x in 0..w {
            let d = next[x] - row[x];
            if (y + 1) % block == 0 {
                sum_boundary += d * d;
                n_boundary += 1;
            } else {
                sum_interior += d * d;
                n_interior += 1;
            }
        }
    }
    if n_boundary == 0 || n_interior == 0 {
        return 0.0;
    }
    let d_boundary = sum_boundary / n_boundary as f64;
    let d_interior = sum_interior / n_interior as f64;
    if d_boundary <= d_interior {
        return 0.0;
    }
    let eta = (block as f64).log2() / (w.min(h) as f64).log2();
    eta * (d_boundary - d_interior)
}

/// `10 log10(255^2 / (MSE + BEF))`; always at most [`psnr`].
pub fn psnr_b(reference: &ImagePlane, test: &ImagePlane, block: usize) -> Result<f64> {
    check_same_shape(reference, test)?;
    if block < 2 {
        return Err(Error::InvalidArgument(format!(
            "psnr_b block size {block} must be >= 2"
        )));
    }
    let bef = blocking_effect_factor(test, block);
    Ok(psnr_from_mse(mse(reference, test) + bef))
}

/// All three metrics for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_b: f64,
}

/// Per-image metrics plus arithmetic means, ordered by filename.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_psnr_b: f64,
}

impl MetricReport {
    pub fn image_count(&self) -> usize {
        self.per_image.len()
    }

    fn from_rows(per_image: Vec<ImageMetrics>) -> MetricReport {
        let n = per_image.len() as f64;
        MetricReport {
            mean_psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            mean_psnr_b: per_image.iter().map(|m| m.psnr_b).sum::<f64>() / n,
            per_image,
        }
    }

    /// Aligned plain-text table in the Table 1/2 layout.
    pub fn to_table(&self) -> String {
        let name_w = self
            .per_image
            .iter()
            .map(|m| m.name.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:<name_w$}  PSNR(dB)   SSIM  PSNR-B(dB)\n", "image");
        for m in &self.per_image {
            out.push_str(&format!(
                "{:<name_w$}  {:8.2}  {:5.3}  {:10.2}\n",
                m.name, m.psnr, m.ssim, m.psnr_b
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:8.2}  {:5.3}  {:10.2}  ({} images)\n",
            "mean",
            self.mean_psnr,
            self.mean_ssim,
            self.mean_psnr_b,
            self.image_count()
        ));
        out
    }

    /// Line-oriented machine-readable form: `filename,psnr,ssim,psnr_b`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filename,psnr,ssim,psnr_b\n");
        for m in &self.per_image {
            out.push_str(&format!("{},{},{},{}\n", m.name, m.psnr, m.ssim, m.psnr_b));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            self.mean_psnr, self.mean_ssim, self.mean_psnr_b
        ));
        out
    }
}

/// Where the test images come from.
pub enum TestSource<'a> {
    /// A directory of files matching the clean names.
    Directory(&'a Path),
    /// Degrade each clean image at this quality factor (JPEG baseline).
    DegradedAt { qf: u8 },
    /// Degrade and then restore with a model.
    RestoredBy { model: &'a Model<f32>, qf: u8 },
}

/// Evaluates every clean image against its test counterpart; images are
/// processed in filename order and means are arithmetic.
pub fn evaluate_dataset(clean_dir: &Path, source: TestSource) -> Result<MetricReport> {
    let clean_paths = list_corpus(clean_dir)?;
    if clean_paths.is_empty() {
        return Err(Error::decode(clean_dir, "no .png/.pgm images"));
    }
    let jobs: Vec<(String, PathBuf, Option<PathBuf>)> = match &source {
        TestSource::Directory(dir) => clean_paths
            .iter()
            .map(|p| {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                let test = dir.join(p.file_name().unwrap());
                if !test.exists() {
                    return Err(Error::decode(&test, format!("no test image for {name}")));
                }
                Ok((name, p.clone(), Some(test)))
            })
            .collect::<Result<_>>()?,
        _ => clean_paths
            .iter()
            .map(|p| {
                Ok((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    p.clone(),
                    None,
                ))
            })
            .collect::<Result<_>>()?,
    };

    let rows: Vec<Result<ImageMetrics>> = jobs
        .par_iter()
        .map(|(name, clean_path, test_path)| {
            let clean = load_luma(clean_path)?;
            let test = match (&source, test_path) {
                (TestSource::Directory(_), Some(tp)) => load_luma(tp)?,
                (TestSource::DegradedAt { qf }, _) => jpeg::degrade(&clean, *qf)?.plane,
                (TestSource::RestoredBy { model, qf }, _) => {
                    let d = jpeg::degrade(&clean, *qf)?;
                    restore(*model, &d.plane, &d.coeffs, &d.table)?
                }
                _ => unreachable!(),
            };
            Ok(ImageMetrics {
                name: name.clone(),
                psnr: psnr(&clean, &test)?,
                ssim: ssim(&clean, &test)?,
                psnr_b: psnr_b(&clean, &test, 8)?,
            })
        })
        .collect();
    let per_image = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(per_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(name: &str) -> ImagePlane {
        let path = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/fixtures")
            .join(name);
        load_luma(path).unwrap()
    }

    fn noise(w: usize, h: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlane::from_fn(w, h, |_, _| f64::from(rng.random_range(0..=255u8)))
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = noise(32, 32, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_of_unit_mse() {
        // constant error of 1 -> MSE 1 -> 20 log10 255
        let a = ImagePlane::filled(16, 16, 100.0);
        let b = ImagePlane::filled(16, 16, 101.0);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 48.1308036087).abs() < 1e-9, "{got}");
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = noise(32, 32, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut prev = f64::INFINITY;
        for amp in [1.0, 2.0, 4.0, 8.0] {
            let b = ImagePlane::new(
                32,
                32,
                a.samples()
                    .iter()
                    .zip(&draw)
                    .map(|(v, d)| (v + amp * d).clamp(0.0, 255.0))
                    .collect(),
            )
            .unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < prev, "amp {amp}: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let a = noise(24, 20, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_is_worse() {
        let a = noise(24, 20, 5);
        let inv = ImagePlane::new(24, 20, a.samples().iter().map(|v| 255.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < ssim(&a, &a).unwrap());
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = noise(24, 24, 6);
        let b = noise(24, 24, 7);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = ImagePlane::filled(10, 16, 0.0);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn reference_values_from_independent_implementation() {
        // frozen outputs of a NumPy implementation of the same formulations
        let a = fixture("metric_ref.pgm");
        let b = fixture("metric_test.pgm");
        let p = psnr(&a, &b).unwrap();
        let s = ssim(&a, &b).unwrap();
        let pb = psnr_b(&a, &b, 8).unwrap();
        assert!((p - 14.997481439186583).abs() < 1e-9, "psnr {p}");
        assert!((s - 0.6686367782143878).abs() < 1e-9, "ssim {s}");
        assert!((pb - 14.983815303287752).abs() < 1e-9, "psnr_b {pb}");
    }

    #[test]
    fn psnr_b_never_exceeds_psnr() {
        for seed in 0..5 {
            let a = noise(40, 32, 100 + seed);
            let b = noise(40, 32, 200 + seed);
            let p = psnr(&a, &b).unwrap();
            let pb = psnr_b(&a, &b, 8).unwrap();
            assert!(pb <= p + 1e-12);
        }
    }

    #[test]
    fn psnr_b_equals_psnr_without_blockiness() {
        // a smooth test image has no boundary excess, so BEF floors at 0
        let a = noise(40, 32, 8);
        let smooth = ImagePlane::from_fn(40, 32, |x, y| (x + y) as f64);
        assert_eq!(
            psnr_b(&a, &smooth, 8).unwrap(),
            psnr(&a, &smooth).unwrap()
        );
        // identical images: zero MSE and zero BEF hit the cap
        assert_eq!(psnr_b(&smooth, &smooth, 8).unwrap(), 100.0);
    }

    #[test]
    fn blocky_image_is_penalized() {
        let a = noise(40, 32, 9);
        // constant 8x8 tiles: all variation sits on block boundaries
        let blocky = ImagePlane::from_fn(40, 32, |x, y| (((x / 8) * 37 + (y / 8) * 91) % 256) as f64);
        assert!(psnr_b(&a, &blocky, 8).unwrap() < psnr(&a, &blocky).unwrap());
    }

    #[test]
    fn metrics_invariant_to_horizontal_flip() {
        let a = noise(32, 24, 10);
        let b = noise(32, 24, 11);
        let flip = |p: &ImagePlane| {
            ImagePlane::from_fn(p.width(), p.height(), |x, y| p.get(p.width() - 1 - x, y))
        };
        let (fa, fb) = (flip(&a), flip(&b));
        assert!((psnr(&a, &b).unwrap() - psnr(&fa, &fb).unwrap()).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&fa, &fb).unwrap()).abs() < 1e-12);
        assert!((psnr_b(&a, &b, 8).unwrap() - psnr_b(&fa, &fb, 8).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dataset_single_image_mean_is_that_image() {
        let dir = std::env::temp_dir().join(format!("dmcnn-eval-{}", std::process::id()));
        let clean_dir = dir.join("clean");
        std::fs::create_dir_all(&clean_dir).unwrap();
        let img = noise(32, 32, 12);
        crate::imaging::save_luma(&img, clean_dir.join("one.png")).unwrap();

        let report = evaluate_dataset(&clean_dir, TestSource::DegradedAt { qf: 10 }).unwrap();
        assert_eq!(report.image_count(), 1);
        let d = jpeg::degrade(&img, 10).unwrap();
        // the degraded file path goes through PNG, so compare in memory
        let expect = psnr(&img, &d.plane).unwrap();
        assert!((report.per_image[0].psnr - expect).abs() < 1e-12);
        assert_eq!(report.mean_psnr, report.per_image[0].psnr);
        assert_eq!(report.mean_ssim, report.per_image[0].ssim);
    }

    #[test]
    fn dataset_missing_pair_names_the_file() {
        let dir = std::env::temp_dir().join(format!("dmcnn-eval-miss-{}", std::process::id()));
        let clean_dir = dir.join("clean");
        let test_dir = dir.join("test");
        std::fs::create_dir_all(&clean_dir).unwrap();
        std::fs::create_dir_all(&test_dir).unwrap();
        let img = noise(16, 16, 13);
        crate::imaging::save_luma(&img, clean_dir.join("lonely.png")).unwrap();
        let err = evaluate_dataset(&clean_dir, TestSource::Directory(&test_dir)).unwrap_err();
        assert!(err.to_string().contains("lonely.png"), "{err}");
    }

    #[test]
    fn report_formats() {
        let report = MetricReport::from_rows(vec![
            ImageMetrics {
                name: "a.png".into(),
                psnr: 30.0,
                ssim: 0.9,
                psnr_b: 28.0,
            },
            ImageMetrics {
                name: "b.png".into(),
                psnr: 32.0,
                ssim: 0.95,
                psnr_b: 31.0,
            },
        ]);
        assert!((report.mean_psnr - 31.0).abs() < 1e-12);
        let table = report.to_table();
        assert!(table.contains("PSNR-B"));
        assert!(table.contains("mean"));
        let csv = report.to_csv();
        assert!(csv.starts_with("filename,psnr,ssim,psnr_b\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
