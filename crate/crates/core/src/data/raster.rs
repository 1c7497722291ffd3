//! Row-major rasters, resizing, grid tiling and mask files.

use std::path::Path;

use crate::error::{Error, Result};

/// A `height x width x channels` array stored row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

/// RGB image with values in `[0, 1]`.
pub type Raster = Plane<f32>;

/// Single-channel binary mask, values in `{0, 1}`.
pub type Mask = Plane<u8>;

impl<T: Clone + Default> Plane<T> {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::default(); height * width * channels],
        }
    }
}

impl<T> Plane<T> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{} values cannot fill {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn inverted(&self) -> Mask {
        Plane {
            data: self.data.iter().map(|&v| u8::from(v == 0)).collect(),
            ..*self
        }
    }
}

/// Source taps of one output coordinate for half-pixel-centred bilinear
/// resampling (the `align_corners = false` convention): `(i0, i1, w1)` with the
/// value `(1 - w1) * src[i0] + w1 * src[i1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

pub fn resize_bilinear(src: &Raster, out_h: usize, out_w: usize) -> Raster {
    let ty = bilinear_taps(src.height, out_h);
    let tx = bilinear_taps(src.width, out_w);
    let c = src.channels;
    let mut out = Raster::new(out_h, out_w, c);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let p = |y, x| src.data[src.idx(y, x, ch)] as f64;
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                let o = out.idx(oy, ox, ch);
                out.data[o] = (top * (1.0 - wy) + bot * wy) as f32;
            }
        }
    }
    out
}

/// Nearest-neighbour resize (floor of the scaled output index).
pub fn resize_nearest<T: Clone + Default>(src: &Plane<T>, out_h: usize, out_w: usize) -> Plane<T> {
    let mut out = Plane::new(out_h, out_w, src.channels);
    for oy in 0..out_h {
        let sy = (oy * src.height / out_h).min(src.height - 1);
        for ox in 0..out_w {
            let sx = (ox * src.width / out_w).min(src.width - 1);
            for c in 0..src.channels {
                let o = out.idx(oy, ox, c);
                out.data[o] = src.data[src.idx(sy, sx, c)].clone();
            }
        }
    }
    out
}

/// Split into `n x n` equal tiles, row-major.
pub fn split_grid<T: Clone + Default>(full: &Plane<T>, n: usize) -> Result<Vec<Plane<T>>> {
    if n == 0 || full.height % n != 0 || full.width % n != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} does not split into a {n}x{n} grid",
            full.height, full.width
        )));
    }
    let (th, tw, c) = (full.height / n, full.width / n, full.channels);
    let mut tiles = Vec::with_capacity(n * n);
    for gy in 0..n {
        for gx in 0..n {
            let mut tile = Plane::new(th, tw, c);
            for y in 0..th {
                let src = full.idx(gy * th + y, gx * tw, 0);
                let dst = tile.idx(y, 0, 0);
                tile.data[dst..dst + tw * c].clone_from_slice(&full.data[src..src + tw * c]);
            }
            tiles.push(tile);
        }
    }
    Ok(tiles)
}

/// Inverse of [`split_grid`].
pub fn assemble_grid<T: Clone + Default>(tiles: &[Plane<T>]) -> Result<Plane<T>> {
    let n = (tiles.len() as f64).sqrt().round() as usize;
    if n == 0 || n * n != tiles.len() {
        return Err(Error::Dimension(format!(
            "{} tiles do not form a square grid",
            tiles.len()
        )));
    }
    let (th, tw, c) = tiles[0].shape();
    if tiles.iter().any(|t| t.shape() != (th, tw, c)) {
        return Err(Error::Dimension("grid tiles differ in shape".into()));
    }
    let mut full = Plane::new(th * n, tw * n, c);
    for (k, tile) in tiles.iter().enumerate() {
        let (gy, gx) = (k / n, k % n);
        for y in 0..th {
            let dst = full.idx(gy * th + y, gx * tw, 0);
            let src = tile.idx(y, 0, 0);
            full.data[dst..dst + tw * c].clone_from_slice(&tile.data[src..src + tw * c]);
        }
    }
    Ok(full)
}

/// Write a mask as an 8-bit grayscale PNG (foreground = 255).
pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    if mask.channels != 1 {
        return Err(Error::Dimension("mask must be single-channel".into()));
    }
    let bytes: Vec<u8> = mask
        .data
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
        .expect("buffer length matches mask shape");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Read a single-channel raster; every nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u8> = match img {
        image::DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| u8::from(v != 0))
            .collect(),
        image::DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| u8::from(v != 0))
            .collect(),
        _ => return Err(Error::format(path, "mask must be single-channel")),
    };
    Mask::from_vec(h, w, 1, data)
}

pub fn read_image(path: &Path) -> Result<Raster> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Raster::from_vec(h, w, 3, data)
}

pub fn write_image(raster: &Raster, path: &Path) -> Result<()> {
    if raster.channels != 3 {
        return Err(Error::Dimension("image must have 3 channels".into()));
    }
    let bytes: Vec<u8> = raster
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(raster.width as u32, raster.height as u32, bytes)
        .expect("buffer length matches raster shape");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> Plane<u32> {
        Plane::from_vec(h, w, c, (0..(h * w * c) as u32).collect()).unwrap()
    }

    #[test]
    fn four_by_four_splits_into_quadrants() {
        let full = ramp(4, 4, 1);
        let tiles = split_grid(&full, 2).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[0].data, vec![0, 1, 4, 5]);
        assert_eq!(tiles[1].data, vec![2, 3, 6, 7]);
        assert_eq!(tiles[2].data, vec![8, 9, 12, 13]);
        assert_eq!(tiles[3].data, vec![10, 11, 14, 15]);
        assert_eq!(assemble_grid(&tiles).unwrap(), full);
    }

    #[test]
    fn grid_of_one_is_identity() {
        let full = ramp(3, 5, 2);
        let tiles = split_grid(&full, 1).unwrap();
        assert_eq!(tiles, vec![full.clone()]);
        assert_eq!(assemble_grid(&tiles).unwrap(), full);
    }

    #[test]
    fn indivisible_grid_is_a_dimension_error() {
        assert!(matches!(
            split_grid(&ramp(5, 4, 1), 2),
            Err(Error::Dimension(_))
        ));
        assert!(assemble_grid::<u32>(&[ramp(2, 2, 1), ramp(2, 2, 1)]).is_err());
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let src = Raster::from_vec(7, 5, 3, vec![0.25; 105]).unwrap();
        let out = resize_bilinear(&src, 12, 9);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn same_size_bilinear_is_identity() {
        let src = Raster::from_vec(3, 4, 1, (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(resize_bilinear(&src, 3, 4), src);
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 2 -> 4 upsampling: outputs sit at source coordinates -0.25, 0.25, 0.75, 1.25.
        let taps = bilinear_taps(2, 4);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.0));
    }

    #[test]
    fn mask_file_round_trip_and_nonzero_rule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Mask::from_vec(3, 4, 1, vec![0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        write_mask(&mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);

        let raw = image::GrayImage::from_raw(2, 1, vec![0, 7]).unwrap();
        raw.save(&path).unwrap();
        assert_eq!(read_mask(&path).unwrap().data, vec![0, 1]);
    }

    #[test]
    fn three_channel_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        image::RgbImage::new(2, 2).save(&path).unwrap();
        let err = read_mask(&path).unwrap_err();
        assert!(
            err.to_string().contains("mask must be single-channel"),
            "{err}"
        );
    }

    #[test]
    fn missing_mask_names_path() {
        let err = read_mask(Path::new("/nonexistent/mask.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/mask.png"));
    }

    proptest! {
        #[test]
        fn split_assemble_round_trip(n in 1usize..5, th in 1usize..6, tw in 1usize..6, c in 1usize..4, seed in any::<u32>()) {
            let len = n * th * n * tw * c;
            let data: Vec<u32> = (0..len as u32).map(|v| v.wrapping_mul(2654435761).wrapping_add(seed)).collect();
            let full = Plane::from_vec(n * th, n * tw, c, data).unwrap();
            let tiles = split_grid(&full, n).unwrap();
            prop_assert_eq!(tiles.len(), n * n);
            prop_assert_eq!(assemble_grid(&tiles).unwrap(), full);
        }
    }
}
