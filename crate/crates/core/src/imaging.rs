//! Image and mask primitives shared by every module.

use std::path::Path;

pub use image::RgbImage;
use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// H×W binary mask, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height) as usize],
        }
    }

    /// Builds a mask from raw values; anything non-zero becomes 1.
    pub fn from_values(width: u32, height: u32, values: Vec<u8>) -> Self {
        assert_eq!(values.len(), (width * height) as usize, "mask buffer size");
        let data = values.into_iter().map(|v| u8::from(v != 0)).collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Thresholds an 8-bit grayscale image: value > 127 is foreground.
    pub fn from_gray(gray: &GrayImage) -> Self {
        let data = gray.as_raw().iter().map(|&v| u8::from(v > 127)).collect();
        Self {
            width: gray.width(),
            height: gray.height(),
            data,
        }
    }

    /// 0/255 grayscale rendering, the on-disk mask encoding.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(y, x) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// (height, width)
    pub fn shape(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.data[(row * self.width + col) as usize] != 0
    }

    pub fn set(&mut self, row: u32, col: u32, on: bool) {
        self.data[(row * self.width + col) as usize] = u8::from(on);
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// (height, width) of an RGB image, matching the mask convention.
pub fn shape_of(img: &RgbImage) -> (u32, u32) {
    (img.height(), img.width())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|source| Error::Encode {
            path: path.to_path_buf(),
            source,
        })?;
    crate::atomic::write_atomic(path, buf.get_ref())
}

/// Per-channel median of the outermost ring of pixels.
pub fn border_median(img: &RgbImage) -> [u8; 3] {
    let (w, h) = img.dimensions();
    let mut channels: [Vec<u8>; 3] = Default::default();
    let mut push = |x: u32, y: u32| {
        let p = img.get_pixel(x, y).0;
        for c in 0..3 {
            channels[c].push(p[c]);
        }
    };
    for x in 0..w {
        push(x, 0);
        if h > 1 {
            push(x, h - 1);
        }
    }
    for y in 1..h.saturating_sub(1) {
        push(0, y);
        if w > 1 {
            push(w - 1, y);
        }
    }
    channels.map(|mut v| median_u8(&mut v))
}

/// Lower median; 0 for an empty slice.
pub fn median_u8(values: &mut [u8]) -> u8 {
    if values.is_empty() {
        return 0;
    }
    values.sort_unstable();
    values[(values.len() - 1) / 2]
}

/// Bilinear sample at continuous pixel coordinates (pixel centers on integers).
/// Points further than half a pixel outside the image return `fill`.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64, fill: [u8; 3]) -> [f64; 3] {
    let (w, h) = img.dimensions();
    if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
        return fill.map(f64::from);
    }
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as u32;
    let y0 = yc.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let p00 = img.get_pixel(x0, y0).0;
    let p10 = img.get_pixel(x1, y0).0;
    let p01 = img.get_pixel(x0, y1).0;
    let p11 = img.get_pixel(x1, y1).0;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

pub fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Centers the image on a square canvas filled with `fill`.
pub fn pad_to_square(img: &RgbImage, fill: [u8; 3]) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == h {
        return img.clone();
    }
    let side = w.max(h);
    let mut out = RgbImage::from_pixel(side, side, image::Rgb(fill));
    let ox = (side - w) / 2;
    let oy = (side - h) / 2;
    image::imageops::replace(&mut out, img, ox as i64, oy as i64);
    out
}

/// Offsets (top, left) of the original content inside [`pad_to_square`]'s output.
pub fn square_offsets(height: u32, width: u32) -> (u32, u32) {
    let side = width.max(height);
    ((side - height) / 2, (side - width) / 2)
}

/// Bilinear resize of a multi-channel f64 plane stored row-major as
/// `[h][w][channels]`.
pub fn resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    nh: usize,
    nw: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), h * w * channels);
    if nh == h && nw == w {
        return src.to_vec();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = vec![0.0; nh * nw * channels];
    for oy in 0..nh {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for ox in 0..nw {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * nw + ox) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn resize_rgb(img: &RgbImage, nw: u32, nh: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if (w, h) == (nw, nh) {
        return img.clone();
    }
    let src: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    let out = resize_plane(&src, h as usize, w as usize, 3, nh as usize, nw as usize);
    RgbImage::from_raw(nw, nh, out.into_iter().map(to_u8).collect()).expect("buffer size")
}

/// Pads to a square with the border median, then resizes to `side`×`side`.
pub fn pad_and_resize(img: &RgbImage, side: u32) -> RgbImage {
    let squared = pad_to_square(img, border_median(img));
    resize_rgb(&squared, side, side)
}
