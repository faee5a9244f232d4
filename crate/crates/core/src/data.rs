//! Synthetic multi-rater segmentation data and its on-disk PGM layout.
//!
//! Each sample is a blurred elliptical "lesion" on a noisy background. Every
//! rater independently either marks nothing or marks the ellipse grown or
//! shrunk by a small disk, so the label distribution is ambiguous both in
//! presence and in boundary extent.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} pixels for a {height}×{width} mask", bits.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Pixels where `prob >= threshold`.
    pub fn threshold(height: usize, width: usize, prob: &[f32], threshold: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            prob.iter().map(|&p| p >= threshold).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Grows (`radius > 0`) or shrinks (`radius < 0`) the mask by a disk of
    /// `|radius|` pixels. Pixels outside the grid count as background.
    pub fn morph(&self, radius: i32) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius.unsigned_abs() as isize;
        let disk: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        let (h, w) = (self.height as isize, self.width as isize);
        let at = |y: isize, x: isize| {
            y >= 0 && x >= 0 && y < h && x < w && self.bits[(y * w + x) as usize]
        };
        let mut bits = vec![false; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                bits[(y * w + x) as usize] = if radius > 0 {
                    disk.iter().any(|&(dy, dx)| at(y + dy, x + dx))
                } else {
                    disk.iter().all(|&(dy, dx)| at(y + dy, x + dx))
                };
            }
        }
        Mask {
            height: self.height,
            width: self.width,
            bits,
        }
    }
}

/// One image with its rater annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguousSample {
    pub size: usize,
    /// `size × size` intensities in [0, 1], multiples of 1/255.
    pub image: Vec<f32>,
    pub masks: Vec<Mask>,
}

impl AmbiguousSample {
    pub fn num_raters(&self) -> usize {
        self.masks.len()
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.size, self.size], self.image.clone()).expect("square image")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub image_size: usize,
    pub num_raters: usize,
    /// Probability that a rater marks no lesion.
    pub p_absent: f64,
    /// Maximum dilation/erosion radius in pixels.
    pub jitter: u32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_raters: 4,
            p_absent: 0.25,
            jitter: 2,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..1.0).contains(&self.p_absent) {
            return bad(format!("p_absent {} must lie in [0, 1)", self.p_absent));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} must be at least 8", self.image_size));
        }
        if 4 * self.jitter as usize >= self.image_size {
            return bad(format!("jitter {} must be below image_size/4", self.jitter));
        }
        if self.num_raters < 2 {
            return bad(format!("num_raters {} must be at least 2", self.num_raters));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Squared normalized radius at a pixel centre; ≤ 1 inside.
    fn level(&self, y: usize, x: usize) -> f64 {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn mask(&self, size: usize) -> Mask {
        let bits = (0..size * size)
            .map(|i| self.level(i / size, i % size) <= 1.0)
            .collect();
        Mask {
            height: size,
            width: size,
            bits,
        }
    }
}

fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let n = size as isize;
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0.0; input.len()];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let o = j as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y, (x + o).clamp(0, n - 1))
                    } else {
                        ((y + o).clamp(0, n - 1), x)
                    };
                    acc += k * input[(sy * n + sx) as usize];
                }
                out[(y * n + x) as usize] = acc;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Draws one sample. The base ellipse always exists, so at least one
/// rater mask is non-empty.
pub fn generate_sample<R: Rng + ?Sized>(params: &SynthParams, rng: &mut R) -> AmbiguousSample {
    draw(params, rng).0
}

/// The sample together with the undistorted ellipse mask.
fn draw<R: Rng + ?Sized>(params: &SynthParams, rng: &mut R) -> (AmbiguousSample, Mask) {
    let size = params.image_size;
    let s = size as f64;
    let j = params.jitter as f64;
    let min_axis = j + 2.0;
    let max_axis = (s * 0.3).max(min_axis + 1.0);
    let a = rng.random_range(min_axis..max_axis);
    let b = rng.random_range(min_axis..max_axis);
    let margin = a.max(b) + j;
    let (lo, hi) = (margin.min(s / 2.0), (s - margin).max(s / 2.0 + 1e-9));
    let ellipse = Ellipse {
        cy: rng.random_range(lo..hi),
        cx: rng.random_range(lo..hi),
        a,
        b,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let base = ellipse.mask(size);

    let contrast = rng.random_range(0.35..0.65);
    let background = rng.random_range(0.15..0.3);
    let blurred = gaussian_blur(
        &base.to_f32().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        size,
        1.0,
    );
    let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
    let image = blurred
        .iter()
        .map(|&v| {
            let raw = (background + contrast * v + noise.sample(rng)).clamp(0.0, 1.0);
            ((raw * 255.0).round() / 255.0) as f32
        })
        .collect();

    let jitter = params.jitter as i32;
    let mut present: Vec<bool> = (0..params.num_raters)
        .map(|_| !rng.random_bool(params.p_absent))
        .collect();
    let radii: Vec<i32> = (0..params.num_raters)
        .map(|_| rng.random_range(-jitter..=jitter))
        .collect();
    if !present.iter().any(|&p| p) {
        let r = rng.random_range(0..params.num_raters);
        present[r] = true;
    }
    let masks = present
        .iter()
        .zip(&radii)
        .map(|(&p, &r)| {
            if p {
                base.morph(r)
            } else {
                Mask::empty(size, size)
            }
        })
        .collect();
    (AmbiguousSample { size, image, masks }, base)
}

/// `n` samples, sample `i` drawn from its own stream of the master seed.
pub fn generate_dataset(params: &SynthParams, n: usize) -> Result<Vec<AmbiguousSample>> {
    params.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = stream_rng(params.seed, Stream::Synth, i as u64);
            generate_sample(params, &mut rng)
        })
        .collect())
}

/// Deterministic `(train, test)` index split; `round(n · test_fraction)`
/// indices go to the test side.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

// PGM (P5, maxval 255)

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM. Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |detail: &str| Error::format("PGM", detail);
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("expected magic P5"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| bad(&format!("invalid {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let n = width * height;
    if bytes.len() < data_start + n {
        return Err(bad(&format!(
            "raster holds {} of {n} pixels",
            bytes.len().saturating_sub(data_start)
        )));
    }
    if bytes.len() > data_start + n {
        return Err(bad("trailing bytes after raster"));
    }
    Ok((width, height, bytes[data_start..].to_vec()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image_pgm(path: &Path, size: usize, image: &[f32]) -> Result<()> {
    let pixels: Vec<u8> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_file(path, &encode_pgm(size, image.len() / size.max(1), &pixels))
}

pub fn read_image_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h, px) = decode_pgm(&read_file(path)?)?;
    Ok((w, h, px.iter().map(|&p| p as f32 / 255.0).collect()))
}

pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let pixels: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_file(path, &encode_pgm(mask.width, mask.height, &pixels))
}

/// Reads a mask; a zero-length file is an all-zero `height × width` mask.
pub fn read_mask_pgm(path: &Path, height: usize, width: usize) -> Result<Mask> {
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        return Ok(Mask::empty(height, width));
    }
    let (w, h, px) = decode_pgm(&bytes)?;
    if (w, h) != (width, height) {
        return Err(Error::shape(
            "read_mask_pgm",
            format!(
                "{}: {w}×{h} mask for a {width}×{height} image",
                path.display()
            ),
        ));
    }
    let bits = px
        .iter()
        .map(|&p| match p {
            0 => Ok(false),
            255 => Ok(true),
            v => Err(Error::format(
                "PGM",
                format!("{}: mask pixel {v} is neither 0 nor 255", path.display()),
            )),
        })
        .collect::<Result<_>>()?;
    Mask::new(h, w, bits)
}

fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("{index:05}"))
}

pub fn write_dataset(samples: &[AmbiguousSample], dir: &Path) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let d = sample_dir(dir, i);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        write_image_pgm(&d.join("image.pgm"), s.size, &s.image)?;
        for (r, m) in s.masks.iter().enumerate() {
            write_mask_pgm(&d.join(format!("mask_{r}.pgm")), m)?;
        }
    }
    Ok(())
}

/// Reads every `NNNNN/` sample directory in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<AmbiguousSample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.len() == 5 && name.bytes().all(|b| b.is_ascii_digit()) && entry.path().is_dir() {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::format(
            "dataset",
            format!("no sample directories under {}", dir.display()),
        ));
    }
    names
        .iter()
        .map(|name| read_sample(&dir.join(name)))
        .collect()
}

fn read_sample(d: &Path) -> Result<AmbiguousSample> {
    let (w, h, image) = read_image_pgm(&d.join("image.pgm"))?;
    if w != h {
        return Err(Error::format(
            "dataset",
            format!("{}: image is {w}×{h}, expected square", d.display()),
        ));
    }
    let mut masks = Vec::new();
    loop {
        let path = d.join(format!("mask_{}.pgm", masks.len()));
        if !path.exists() {
            break;
        }
        masks.push(read_mask_pgm(&path, h, w)?);
    }
    if masks.len() < 2 {
        return Err(Error::format(
            "dataset",
            format!(
                "{}: found {} rater masks, need at least 2",
                d.display(),
                masks.len()
            ),
        ));
    }
    Ok(AmbiguousSample {
        size: w,
        image,
        masks,
    })
}
