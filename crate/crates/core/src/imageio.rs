//! 8-bit RGB rasters, colour conversion, luminance targets and synthetic
//! low-light pairs.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Guard added to denominators of luminance ratios.
pub const EPS_DIV: f64 = 1e-6;

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `[1,3,H,W]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| self.pixels[(y * w + x) * 3 + c] as f64 / 255.0)
    }

    /// Quantises sample `n` of a `[N,3,H,W]` tensor (values clamped to `[0,1]`).
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let [batch, c, h, w] = t.dims();
        if c != 3 || n >= batch {
            return Err(Error::shape(format!("cannot take RGB sample {n} from {:?}", t.shape())));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    pixels.push(quantize(t.at(n, ch, y, x)));
                }
            }
        }
        Image::new(w, h, pixels)
    }

    pub fn flip_horizontal(&self) -> Image {
        self.remap(self.width, self.height, |x, y| (self.width - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Image {
        self.remap(self.width, self.height, |x, y| (x, self.height - 1 - y))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(self.remap(width, height, |x, y| (x0 + x, y0 + y)))
    }

    fn remap(&self, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = src(x, y);
                pixels.extend_from_slice(&self.get(sx, sy));
            }
        }
        Image { width, height, pixels }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit RGB PNG or binary PPM (format detected from content).
pub fn load(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decode_err = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    if img.color() != ColorType::Rgb8 {
        return Err(decode_err(format!("unsupported colour type {:?}; expected 8-bit RGB", img.color())));
    }
    let rgb = img.into_rgb8();
    Image::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

/// Writes PNG, or binary PPM when the extension is `.ppm`/`.pnm`.
pub fn save(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ppm = matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pnm")
    );
    let (w, h) = (img.width as u32, img.height as u32);
    if ppm {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&img.pixels, w, h, ExtendedColorType::Rgb8)
            .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
    } else {
        image::save_buffer_with_format(path, &img.pixels, w, h, ExtendedColorType::Rgb8, ImageFormat::Png)
            .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Writes a `[1,1,H,W]` (or `[N,1,H,W]`, first sample) map in `[0,1]` as an
/// 8-bit grayscale PNG using `round(255 v)`.
pub fn save_heatmap(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [_, _, h, w] = map.dims();
    let bytes: Vec<u8> = (0..h * w).map(|i| quantize(map.data()[i])).collect();
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, ExtendedColorType::L8, ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })
}

/// Full-range BT.601 luma and chroma planes, each `[N,1,H,W]`.
#[derive(Clone, Debug)]
pub struct YcrcbImage {
    pub y: Tensor,
    pub cr: Tensor,
    pub cb: Tensor,
    /// Input samples that were outside `[0,1]` and had to be clamped.
    pub clamped: usize,
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const CR: [f64; 3] = [0.5, -0.4187, -0.0813];
const CB: [f64; 3] = [-0.1687, -0.3313, 0.5];

pub fn rgb_to_ycrcb(rgb: &Tensor) -> Result<YcrcbImage> {
    let [n, c, h, w] = rgb.dims();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {:?}", rgb.shape())));
    }
    let mut clamped = 0;
    let mut px = |b, y, x| {
        let mut v = [0.0; 3];
        for (ch, slot) in v.iter_mut().enumerate() {
            let raw = rgb.at(b, ch, y, x);
            if !(0.0..=1.0).contains(&raw) {
                clamped += 1;
            }
            *slot = raw.clamp(0.0, 1.0);
        }
        v
    };
    let mut planes = [Vec::with_capacity(n * h * w), Vec::with_capacity(n * h * w), Vec::with_capacity(n * h * w)];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = px(b, y, x);
                let dot = |m: [f64; 3]| m[0] * p[0] + m[1] * p[1] + m[2] * p[2];
                planes[0].push(dot(LUMA).clamp(0.0, 1.0));
                planes[1].push((dot(CR) + 0.5).clamp(0.0, 1.0));
                planes[2].push((dot(CB) + 0.5).clamp(0.0, 1.0));
            }
        }
    }
    if clamped > 0 {
        log::warn!("rgb_to_ycrcb: clamped {clamped} out-of-range samples");
    }
    let [y, cr, cb] = planes.map(|p| Tensor::from_vec([n, 1, h, w], p).expect("plane size"));
    Ok(YcrcbImage { y, cr, cb, clamped })
}

/// `(y_high - y_low) / (y_high + EPS_DIV)`, clamped to `[0,1]`.
pub fn luminance_diff_target(y_high: &Tensor, y_low: &Tensor) -> Result<Tensor> {
    y_high.zip_map(y_low, |hi, lo| ((hi - lo) / (hi + EPS_DIV)).clamp(0.0, 1.0))
}

/// Degradation parameters for [`synth_lowlight`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Degradation {
    pub gamma: f64,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation { gamma: 2.5, scale: 0.25, noise_sigma: 0.02 }
    }
}

/// `clamp(scale * I^gamma + N(0, sigma^2))`, quantised to 8 bits.
pub fn synth_lowlight(img: &Image, d: Degradation, seed: u64) -> Result<Image> {
    if !(d.gamma >= 1.0) || !(d.scale > 0.0 && d.scale <= 1.0) || !(d.noise_sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "degradation out of range: gamma {} (>= 1), scale {} (in (0,1]), sigma {} (>= 0)",
            d.gamma, d.scale, d.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, d.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let pixels = img
        .pixels
        .iter()
        .map(|&b| {
            let v = d.scale * (b as f64 / 255.0).powf(d.gamma);
            let n = if d.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            quantize(v + n)
        })
        .collect();
    Image::new(img.width, img.height, pixels)
}

/// Random `crop x crop` window plus optional random flips, applied
/// identically to both images of a pair.
pub fn crop_flip_augment(low: &Image, high: &Image, crop: usize, flips: bool, seed: u64) -> Result<(Image, Image)> {
    if (low.width, low.height) != (high.width, high.height) {
        return Err(Error::shape("pair images differ in size"));
    }
    if crop == 0 || crop > low.width.min(low.height) {
        return Err(Error::invalid(format!("crop {crop} does not fit {}x{}", low.width, low.height)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=low.width - crop);
    let y0 = rng.random_range(0..=low.height - crop);
    let (hf, vf) = if flips { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
    let apply = |img: &Image| -> Result<Image> {
        let mut out = img.crop(x0, y0, crop, crop)?;
        if hf {
            out = out.flip_horizontal();
        }
        if vf {
            out = out.flip_vertical();
        }
        Ok(out)
    };
    Ok((apply(low)?, apply(high)?))
}

/// Deterministic well-lit test scene: a smooth colour gradient with a few
/// flat-coloured discs and bars and mild texture.
pub fn procedural_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.85));
    let tilt: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let shapes: Vec<(f64, f64, f64, [f64; 3], bool)> = (0..4)
        .map(|_| {
            let cx = rng.random_range(0.0..width as f64);
            let cy = rng.random_range(0.0..height as f64);
            let r = rng.random_range(0.12..0.3) * width.min(height) as f64;
            let col = std::array::from_fn(|_| rng.random_range(0.1..1.0));
            (cx, cy, r, col, rng.random_bool(0.5))
        })
        .collect();
    let freq = rng.random_range(0.3..0.9);
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width.max(1) as f64;
            let v = y as f64 / height.max(1) as f64;
            let mut px: [f64; 3] = std::array::from_fn(|c| base[c] + tilt[c] * (u - v));
            for &(cx, cy, r, col, disc) in &shapes {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r * 0.4 };
                if inside {
                    px = col;
                }
            }
            let texture = 0.04 * ((x as f64 * freq).sin() * (y as f64 * freq * 0.7).cos());
            for c in px {
                pixels.push(quantize(c + texture));
            }
        }
    }
    Image { width, height, pixels }
}
