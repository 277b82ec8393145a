//! Procedural labeled shapes and image files.
//!
//! Class `c ∈ [0, 8)` combines a shape (`c % 4`: circle, square, triangle,
//! cross) with a palette (`c < 4` warm, otherwise cool). Every sample is a
//! pure function of `(dataset_seed, index)` and `class = index % 8`.

use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 8;
pub const IMAGE_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
const SUPERSAMPLE: usize = 4;
const NOISE_AMPLITUDE: f64 = 0.05;
const SEPARATOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

/// Per-shape base colors. Red dominates blue in every warm hue and the reverse for cool ones.
const WARM_HUES: [[f64; 3]; 4] = [
    [0.85, -0.2, -0.75],
    [0.9, 0.3, -0.8],
    [0.8, 0.8, -0.7],
    [0.9, -0.5, 0.1],
];
const COOL_HUES: [[f64; 3]; 4] = [
    [-0.75, -0.2, 0.85],
    [-0.8, 0.6, 0.7],
    [-0.6, 0.7, -0.1],
    [0.1, -0.5, 0.9],
];

/// Geometry and colors of one rendered sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub class: usize,
    pub shape: Shape,
    pub warm: bool,
    pub center: (f64, f64),
    pub radius: f64,
    pub rotation: f64,
    pub color: [f64; 3],
    pub background: f64,
}

impl ShapeSpec {
    pub fn draw(dataset_seed: u64, index: u64) -> (Self, Stream) {
        let mut rng = Stream::new(dataset_seed, Purpose::Dataset, 0, index);
        let class = (index % NUM_CLASSES as u64) as usize;
        let shape = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross][class % 4];
        let warm = class < 4;
        let mid = IMAGE_SIZE as f64 / 2.0;
        let center = (mid + rng.uniform_range(-2.0, 2.0), mid + rng.uniform_range(-2.0, 2.0));
        let radius = rng.uniform_range(3.0, 6.0);
        let rotation = match shape {
            Shape::Triangle | Shape::Cross => rng.uniform_range(0.0, 2.0 * PI),
            _ => 0.0,
        };
        let base = if warm {
            WARM_HUES[class % 4]
        } else {
            COOL_HUES[class % 4]
        };
        let mut color = [0.0; 3];
        for (c, b) in color.iter_mut().zip(base) {
            *c = b + rng.uniform_range(-0.15, 0.15);
        }
        let background = rng.uniform_range(-0.7, -0.3);
        let spec = ShapeSpec {
            class,
            shape,
            warm,
            center,
            radius,
            rotation,
            color,
            background,
        };
        (spec, rng)
    }

    /// Whether the point `(x, y)` (pixel units, y down) lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.radius;
        match self.shape {
            Shape::Circle => u * u + v * v <= r * r,
            Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            Shape::Triangle => (0..3).all(|k| {
                let a = 2.0 * PI * k as f64 / 3.0;
                u * a.cos() + v * a.sin() <= r / 2.0
            }),
            Shape::Cross => {
                let w = r / 3.0;
                (u.abs() <= r && v.abs() <= w) || (v.abs() <= r && u.abs() <= w)
            }
        }
    }
}

/// Render sample `index`: a `3 × 16 × 16` image in `[−1, 1]` and its class.
pub fn gen_sample(dataset_seed: u64, index: u64) -> (Tensor<f32>, usize) {
    let (spec, mut rng) = ShapeSpec::draw(dataset_seed, index);
    let n = IMAGE_SIZE;
    let sub = SUPERSAMPLE as f64;
    let mut data = vec![0f32; CHANNELS * n * n];
    for py in 0..n {
        for px in 0..n {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / sub;
                    let y = py as f64 + (sy as f64 + 0.5) / sub;
                    hits += spec.contains(x, y) as usize;
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let grain = rng.uniform_range(-NOISE_AMPLITUDE, NOISE_AMPLITUDE);
            for (c, &col) in spec.color.iter().enumerate() {
                let v = spec.background * (1.0 - cover) + col * cover + grain;
                data[(c * n + py) * n + px] = v.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    (Tensor::new(&[CHANNELS, n, n], data).expect("image size"), spec.class)
}

/// Stack samples `indices` into a `[B, 3, 16, 16]` batch with labels.
pub fn gen_batch(dataset_seed: u64, indices: &[u64]) -> (Tensor<f32>, Vec<usize>) {
    let per = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let (img, c) = gen_sample(dataset_seed, i);
        data.extend_from_slice(img.data());
        labels.push(c);
    }
    let t = Tensor::new(&[indices.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("batch size");
    (t, labels)
}

/// Random minibatches drawn from a virtual epoch of `epoch_size` samples.
///
/// Batch `step` depends only on `(seed, step)`, so any step can be regenerated.
#[derive(Debug, Clone)]
pub struct BatchIter {
    pub dataset_seed: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub epoch_size: u64,
    pub step: u64,
}

impl BatchIter {
    pub fn new(dataset_seed: u64, seed: u64, batch_size: usize, epoch_size: u64) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if epoch_size < 1 {
            return Err(Error::Config("epoch size must be >= 1".into()));
        }
        Ok(Self {
            dataset_seed,
            seed,
            batch_size,
            epoch_size,
            step: 0,
        })
    }

    pub fn indices(&self, step: u64) -> Vec<u64> {
        let mut rng = Stream::new(self.seed, Purpose::BatchIndices, step, 0);
        (0..self.batch_size).map(|_| rng.below(self.epoch_size)).collect()
    }

    pub fn batch(&self, step: u64) -> (Tensor<f32>, Vec<usize>) {
        gen_batch(self.dataset_seed, &self.indices(step))
    }
}

impl Iterator for BatchIter {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch(self.step);
        self.step += 1;
        Some(b)
    }
}

/// `[−1, 1] → [0, 255]` with ties rounded to even.
pub fn to_byte(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round_ties_even() as u8
}

/// Interleaved RGB canvas for `images` (`[N, 3, H, W]`) laid out `columns` wide.
pub fn grid_rgb<S: Scalar>(images: &Tensor<S>, columns: usize) -> Result<(usize, usize, Vec<u8>)> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::dim("write_image_grid", images.shape(), &[0, 3, 0, 0]));
    };
    if c != 3 {
        return Err(Error::dim("write_image_grid", images.shape(), &[n, 3, h, w]));
    }
    if columns == 0 || n == 0 {
        return Err(Error::Config(
            "image grid needs at least one image and one column".into(),
        ));
    }
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut canvas = vec![0u8; width * height * 3];
    let d = images.data();
    for i in 0..n {
        let (ox, oy) = ((i % cols) * (w + SEPARATOR), (i / cols) * (h + SEPARATOR));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = d[((i * 3 + ch) * h + y) * w + x].as_f64();
                    canvas[((oy + y) * width + ox + x) * 3 + ch] = to_byte(v);
                }
            }
        }
    }
    Ok((width, height, canvas))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Write `images` as a binary PPM grid at `path`, and as PNG beside it when `png` is set.
pub fn write_image_grid<S: Scalar>(
    images: &Tensor<S>,
    path: impl AsRef<Path>,
    columns: usize,
    png: bool,
) -> Result<()> {
    let path = path.as_ref();
    let (w, h, rgb) = grid_rgb(images, columns)?;
    fs::write(path, encode_ppm(w, h, &rgb)).map_err(|e| Error::io(path, e))?;
    if png {
        write_png(&path.with_extension("png"), w, h, &rgb)?;
    }
    Ok(())
}

fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_deterministic_and_labeled() {
        let (a, ca) = gen_sample(3, 0);
        let (b, cb) = gen_sample(3, 0);
        assert_eq!((a.clone(), ca), (b, cb));
        let (c, cc) = gen_sample(3, 8);
        assert_eq!((ca, cc), (0, 0));
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn warm_circle_is_red() {
        for i in 0..10u64 {
            let (img, class) = gen_sample(1, i * 8);
            assert_eq!(class, 0);
            let plane = |c: usize| img.data()[c * 256..(c + 1) * 256].iter().sum::<f32>() / 256.0;
            assert!(plane(0) > plane(2));
        }
    }

    #[test]
    fn shapes_cover_plausible_area() {
        for class in 0..8u64 {
            let (spec, _) = ShapeSpec::draw(0, class);
            let inside = (0..64 * 64)
                .filter(|i| spec.contains((i % 64) as f64 / 4.0, (i / 64) as f64 / 4.0))
                .count();
            assert!(inside > 64, "class {class} covers {inside}");
        }
    }

    #[test]
    fn batches_are_reproducible_and_cover_classes() {
        let it = BatchIter::new(0, 5, 100, 4096).unwrap();
        assert_eq!(it.indices(7), it.indices(7));
        let mut seen = [false; 8];
        for (step, (x, labels)) in it.clone().take(100).enumerate() {
            if step == 0 {
                assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
            labels.iter().for_each(|&c| seen[c] = true);
        }
        assert!(seen.iter().all(|&s| s));
        assert!(matches!(BatchIter::new(0, 0, 0, 10), Err(Error::Config(_))));
    }

    #[test]
    fn byte_mapping() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
    }

    #[test]
    fn grid_layout() {
        let imgs = Tensor::<f32>::full(&[4, 3, 16, 16], 1.0);
        let (w, h, rgb) = grid_rgb(&imgs, 2).unwrap();
        assert_eq!((w, h), (34, 34));
        assert_eq!(rgb[(16 * w + 16) * 3], 0);
        assert_eq!(rgb[0], 255);
        let ppm = encode_ppm(w, h, &rgb);
        assert!(ppm.starts_with(b"P6\n34 34\n255\n"));
    }
}
