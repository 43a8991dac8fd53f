use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::diffarray::Tensor;
use crate::error::{Error, Result};

/// Planar (channel-major) image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image", format!("empty image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Rounds to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        out
    }

    /// ITU-R BT.601 luma; a single-channel image is returned unchanged.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// [1, C, H, W]
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone()).expect("consistent")
    }

    /// Stacks same-shaped images into [N, C, H, W].
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::invalid("batch_tensor", "empty batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_shape(first) {
                return Err(Error::shape("batch_tensor", &first.shape(), &im.shape()));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
    }

    /// Splits [N, C, H, W] into images (values are not clamped).
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::invalid("from_batch_tensor", format!("rank-4 tensor expected, got {s:?}")));
        }
        let sz = s[1] * s[2] * s[3];
        t.data()
            .chunks(sz)
            .map(|c| Image::new(s[2], s[3], s[1], c.to_vec()))
            .collect()
    }

    fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let unsupported = |what: &str| Error::Image {
            path: path.to_path_buf(),
            source: image::ImageError::Unsupported(image::error::UnsupportedError::from_format_and_kind(
                image::error::ImageFormatHint::Unknown,
                image::error::UnsupportedErrorKind::GenericFeature(what.to_string()),
            )),
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        // Promote grayscale to three channels.
        let gray = |vals: Vec<f64>| {
            let mut data = Vec::with_capacity(vals.len() * 3);
            for _ in 0..3 {
                data.extend_from_slice(&vals);
            }
            Image::new(h, w, 3, data)
        };
        let rgb = |pixels: &[f64], stride: usize| {
            let n = w * h;
            let mut data = vec![0.0; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    data[c * n + i] = pixels[i * stride + c];
                }
            }
            Image::new(h, w, 3, data)
        };
        let u8s = |v: &[u8]| v.iter().map(|&x| x as f64 / 255.0).collect::<Vec<_>>();
        let u16s = |v: &[u16]| v.iter().map(|&x| x as f64 / 65535.0).collect::<Vec<_>>();
        match img {
            DynamicImage::ImageLuma8(b) => gray(u8s(b.as_raw())),
            DynamicImage::ImageLuma16(b) => gray(u16s(b.as_raw())),
            DynamicImage::ImageRgb8(b) => rgb(&u8s(b.as_raw()), 3),
            DynamicImage::ImageRgb16(b) => rgb(&u16s(b.as_raw()), 3),
            DynamicImage::ImageRgba8(b) => rgb(&u8s(b.as_raw()), 4),
            DynamicImage::ImageRgba16(b) => rgb(&u16s(b.as_raw()), 4),
            _ => Err(unsupported("bit depth / color type")),
        }
    }

    /// Writes an 8-bit PNG (gray for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let n = self.height * self.width;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let res = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.data.iter().map(|&v| q(v)).collect::<Vec<_>>())
                .expect("sized")
                .save(path),
            3 => {
                let mut raw = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        raw.push(q(self.data[c * n + i]));
                    }
                }
                ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("sized").save(path)
            }
            c => return Err(Error::invalid("save_png", format!("{c} channels"))),
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Image> {
        self.window(0, 0, height, width)
    }

    /// `height × width` window whose top-left pixel is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::invalid(
                "crop",
                format!("{height}x{width} window at ({top},{left}) outside {}x{} image", self.height, self.width),
            ));
        }
        Ok(Image::from_fn(height, width, self.channels, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Nearest-neighbour resampling, used for display.
    pub fn nearest(&self, height: usize, width: usize) -> Image {
        let (h, w) = (self.height, self.width);
        Image::from_fn(height, width, self.channels, |c, y, x| {
            self.get(c, (y * h / height).min(h - 1), (x * w / width).min(w - 1))
        })
    }

    /// Places images side by side on one row, top-aligned, with a 2-pixel gap.
    pub fn hconcat(images: &[&Image]) -> Result<Image> {
        let first = images.first().ok_or_else(|| Error::invalid("hconcat", "no images"))?;
        let c = first.channels;
        let height = images.iter().map(|i| i.height).max().unwrap_or(1);
        let gap = 2;
        let width = images.iter().map(|i| i.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = Image::filled(height, width, c, 1.0);
        let mut x0 = 0;
        for im in images {
            if im.channels != c {
                return Err(Error::invalid("hconcat", "channel counts differ"));
            }
            for ch in 0..c {
                for y in 0..im.height {
                    for x in 0..im.width {
                        out.set(ch, y, x0 + x, im.get(ch, y, x));
                    }
                }
            }
            x0 += im.width + gap;
        }
        Ok(out)
    }
}

/// Reads a manifest of image paths, one per line; blank lines and `#` comments
/// are skipped and relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image::from_fn(5, 7, 3, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f64 / 255.0)
    }

    #[test]
    fn crop_keeps_top_left_window() {
        let img = sample();
        let c = img.crop(3, 4).unwrap();
        assert_eq!(c.dims(), (3, 4));
        assert_eq!(c.get(2, 2, 3), img.get(2, 2, 3));
        assert!(img.crop(6, 4).is_err());
        assert!(img.crop(0, 4).is_err());
    }

    #[test]
    fn nearest_replicates_pixels() {
        let img = Image::from_fn(2, 2, 1, |_, y, x| (2 * y + x) as f64);
        let big = img.nearest(4, 6);
        assert_eq!(big.get(0, 3, 5), 3.0);
        assert_eq!(big.get(0, 1, 2), 0.0);
        assert_eq!(big.get(0, 2, 3), 3.0);
    }

    #[test]
    fn png_roundtrip_of_quantized_image_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = sample().quantized();
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        let img = Image::from_fn(4, 4, 3, |c, y, x| (c + y + x) as f64 / 9.3);
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn grayscale_promoted_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let g = Image::from_fn(3, 4, 1, |_, y, x| (y * 4 + x) as f64 / 255.0);
        g.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.plane(0), g.plane(0));
        assert_eq!(back.plane(2), g.plane(0));
    }

    #[test]
    fn sixteen_bit_png_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let buf = ImageBuffer::<Rgb<u16>, _>::from_raw(2, 1, vec![0u16, 65535, 32768, 1, 2, 3]).unwrap();
        buf.save(&p).unwrap();
        let img = Image::load_png(&p).unwrap();
        assert_eq!(img.get(1, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 1.0 / 65535.0);
    }

    #[test]
    fn missing_file_error_names_path() {
        let err = Image::load_png(Path::new("/nonexistent/zz.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/zz.png"));
    }

    #[test]
    fn manifest_skips_comments_and_resolves_relative() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("list.txt");
        fs::write(&m, "# header\na.png\n\n/abs/b.png\n").unwrap();
        let paths = read_manifest(&m).unwrap();
        assert_eq!(paths, vec![dir.path().join("a.png"), PathBuf::from("/abs/b.png")]);
    }
}
