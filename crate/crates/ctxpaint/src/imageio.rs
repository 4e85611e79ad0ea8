//! PNG reading and writing for canvases and masks.

use std::path::Path;

use ctxpaint_core::{ImageCanvas, MaskGrid};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    Ok(())
}

/// Gray images load with one channel, everything else as RGB.
pub fn read_image(path: &Path) -> Result<ImageCanvas> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io {
            path: path.into(),
            source: io,
        },
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let canvas = match img {
        DynamicImage::ImageLuma8(g) => ImageCanvas::new(
            h,
            w,
            1,
            g.into_raw()
                .into_iter()
                .map(|b| f64::from(b) / 255.0)
                .collect(),
        ),
        other => {
            let rgb = other.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[c * h * w + y as usize * w + x as usize] = f64::from(p.0[c]) / 255.0;
                }
            }
            ImageCanvas::new(h, w, 3, data)
        }
    };
    canvas.map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_image(path: &Path, canvas: &ImageCanvas) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = (canvas.height() as u32, canvas.width() as u32);
    let result = if canvas.channels() == 1 {
        let img: GrayImage = ImageBuffer::from_fn(w, h, |x, y| {
            Luma([to_byte(canvas.get(0, y as usize, x as usize))])
        });
        img.save(path)
    } else {
        let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
            Rgb([0, 1, 2].map(|c| to_byte(canvas.get(c, y as usize, x as usize))))
        });
        img.save(path)
    };
    result.map_err(|e| Error::format(path, e.to_string()))
}

/// Single-channel mask; values of 128 and above count as 1.
pub fn read_mask(path: &Path) -> Result<MaskGrid> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io {
            path: path.into(),
            source: io,
        },
        other => Error::format(path, other.to_string()),
    })?;
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(MaskGrid::from_fn(h, w, |y, x| {
        g.get_pixel(x as u32, y as u32).0[0] >= 128
    }))
}

pub fn write_mask(path: &Path, mask: &MaskGrid) -> Result<()> {
    ensure_parent(path)?;
    let img: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    img.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Mask as a gray canvas, for grids.
pub fn mask_canvas(mask: &MaskGrid) -> ImageCanvas {
    ImageCanvas::new(
        mask.height(),
        mask.width(),
        1,
        mask.data().iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("mask values are binary")
}

/// Places canvases side by side, expanding gray ones to RGB when mixed.
pub fn hstack(parts: &[&ImageCanvas]) -> Result<ImageCanvas> {
    let h = parts.iter().map(|p| p.height()).max().unwrap_or(0);
    let w: usize = parts.iter().map(|p| p.width()).sum();
    let c = parts.iter().map(|p| p.channels()).max().unwrap_or(1);
    let mut data = vec![1.0; c * h * w];
    let mut x0 = 0;
    for p in parts {
        for ch in 0..c {
            let src = ch.min(p.channels() - 1);
            for y in 0..p.height() {
                for x in 0..p.width() {
                    data[ch * h * w + y * w + x0 + x] = p.get(src, y, x);
                }
            }
        }
        x0 += p.width();
    }
    Ok(ImageCanvas::new(h, w, c, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips_at_byte_precision() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageCanvas::from_fn(9, 12, 3, |c, y, x| {
            ((c * 7 + y * 3 + x) % 256) as f64 / 255.0
        })
        .unwrap();
        let p = dir.path().join("a/b.png");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        let gray =
            ImageCanvas::from_fn(8, 8, 1, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { 0.0 })
                .unwrap();
        write_image(&p, &gray).unwrap();
        assert_eq!(read_image(&p).unwrap(), gray);
    }

    #[test]
    fn masks_use_0_255() {
        let dir = tempfile::tempdir().unwrap();
        let m = MaskGrid::from_fn(10, 16, |y, x| x > y);
        let p = dir.path().join("m.png");
        write_mask(&p, &m).unwrap();
        assert_eq!(
            image::open(&p).unwrap().to_luma8().get_pixel(5, 0).0[0],
            255
        );
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn missing_and_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_image(&dir.path().join("none.png")),
            Err(Error::Io { .. })
        ));
        std::fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
        assert!(read_image(&dir.path().join("bad.png")).is_err());
    }
}
