//! PNG frames, masks and predictions, and the on-disk clip layout:
//!
//! ```text
//! <clip>/frames/00000.png   RGB frames
//! <clip>/masks/00000.png    binary masks (0 or 255), optional
//! <clip>/meta.json          generator settings, optional
//! ```
//!
//! A dataset is a directory of clip directories.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const META_FILE: &str = "meta.json";

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::StreamFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn frame_file_name(i: usize) -> String {
    format!("{i:05}.png")
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` in `[0, 1]`. Grayscale files are replicated to three channels.
pub fn read_frame_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_frame_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("frame has {c} channels, expected 3")));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_u8(frame.at3(ch, y as usize, x as usize));
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path)?;
    Ok(())
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// Binary `[H, W]` mask; pixels above 127 are foreground.
pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    let (h, w, raw) = read_gray(path)?;
    Tensor::new(&[h, w], raw.iter().map(|&v| (v > 127) as u8 as f64).collect())
}

/// Probability map `[H, W]` stored as `round(255 p)`.
pub fn read_prob_png(path: &Path) -> Result<Tensor> {
    let (h, w, raw) = read_gray(path)?;
    Tensor::new(&[h, w], raw.iter().map(|&v| v as f64 / 255.0).collect())
}

pub fn write_gray_png(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map.dims2()?;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(map.data()[y as usize * w + x as usize])]));
    img.save(path)?;
    Ok(())
}

/// Sorted `.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(fmt_err(dir, "not a directory"));
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Sorted sub-directories of a directory.
pub fn list_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn is_clip_dir(dir: &Path) -> bool {
    dir.join(FRAMES_DIR).is_dir()
}

#[derive(Clone, Debug)]
pub struct ClipFiles {
    pub frames: Vec<Tensor>,
    pub masks: Option<Vec<Tensor>>,
}

/// Load a clip directory. All frames must share one size, and masks, when
/// present, must match the frames one to one.
pub fn read_clip_dir(dir: &Path) -> Result<ClipFiles> {
    let fdir = dir.join(FRAMES_DIR);
    if !fdir.is_dir() {
        return Err(fmt_err(dir, format!("missing `{FRAMES_DIR}` directory")));
    }
    let fpaths = list_pngs(&fdir)?;
    if fpaths.is_empty() {
        return Err(fmt_err(&fdir, "no frames"));
    }
    let frames = fpaths.iter().map(|p| read_frame_png(p)).collect::<Result<Vec<_>>>()?;
    let shape = frames[0].shape().to_vec();
    if let Some((p, f)) = fpaths.iter().zip(&frames).find(|(_, f)| f.shape() != shape.as_slice()) {
        return Err(fmt_err(p, format!("frame size {:?} differs from {:?}", f.shape(), shape)));
    }
    let mdir = dir.join(MASKS_DIR);
    let masks = if mdir.is_dir() {
        let mpaths = list_pngs(&mdir)?;
        if mpaths.len() != fpaths.len() {
            return Err(fmt_err(&mdir, format!("{} masks for {} frames", mpaths.len(), fpaths.len())));
        }
        let masks = mpaths.iter().map(|p| read_mask_png(p)).collect::<Result<Vec<_>>>()?;
        if let Some((p, _)) = mpaths.iter().zip(&masks).find(|(_, m)| m.shape() != &shape[1..]) {
            return Err(fmt_err(p, "mask size differs from frame size"));
        }
        Some(masks)
    } else {
        None
    };
    Ok(ClipFiles { frames, masks })
}

pub fn write_clip_dir(dir: &Path, frames: &[Tensor], masks: &[Tensor], meta: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir.join(FRAMES_DIR))?;
    std::fs::create_dir_all(dir.join(MASKS_DIR))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame_png(&dir.join(FRAMES_DIR).join(frame_file_name(i)), f)?;
    }
    for (i, m) in masks.iter().enumerate() {
        write_gray_png(&dir.join(MASKS_DIR).join(frame_file_name(i)), m)?;
    }
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Boundary pixels of `mask >= 0.5`: inside, with a 4-neighbour outside or
/// on the image border.
pub fn contour(mask: &Tensor) -> Result<Vec<bool>> {
    let (h, w) = mask.dims2()?;
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.data()[y as usize * w + x as usize] >= 0.5
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    Ok(out)
}

/// Frame with the prediction contour drawn in green and, when given, the
/// ground-truth contour in red.
pub fn contour_overlay(frame: &Tensor, pred: &Tensor, gt: Option<&Tensor>) -> Result<Tensor> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 || pred.shape() != [h, w] || gt.is_some_and(|g| g.shape() != [h, w]) {
        return Err(Error::Shape(format!("overlay of {:?} with {:?}", frame.shape(), pred.shape())));
    }
    let mut out = frame.clone();
    let mut paint = |edge: &[bool], rgb: [f64; 3]| {
        for (i, &e) in edge.iter().enumerate() {
            if e {
                for (ch, v) in rgb.iter().enumerate() {
                    out.data_mut()[ch * h * w + i] = *v;
                }
            }
        }
    };
    if let Some(g) = gt {
        paint(&contour(g)?, [1.0, 0.0, 0.0]);
    }
    paint(&contour(pred)?, [0.0, 1.0, 0.0]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_clip, SynthConfig};

    #[test]
    fn clip_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = gen_clip(&SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        write_clip_dir(dir.path(), &clip.frames, &clip.masks, &serde_json::json!({"n": 6})).unwrap();
        let back = read_clip_dir(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 6);
        assert_eq!(back.masks.as_ref().unwrap(), &clip.masks);
        for (a, b) in back.frames.iter().zip(&clip.frames) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn prob_png_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let t = Tensor::new(&[1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        write_gray_png(&p, &t).unwrap();
        let back = read_prob_png(&p).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[2], 1.0);
        assert!((back.data()[1] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_clip_dir(dir.path()), Err(Error::StreamFormat { .. })));
        std::fs::create_dir(dir.path().join(FRAMES_DIR)).unwrap();
        assert!(matches!(read_clip_dir(dir.path()), Err(Error::StreamFormat { .. })));
        let f = Tensor::full(&[3, 8, 8], 0.5);
        write_frame_png(&dir.path().join(FRAMES_DIR).join(frame_file_name(0)), &f).unwrap();
        write_frame_png(&dir.path().join(FRAMES_DIR).join(frame_file_name(1)), &Tensor::full(&[3, 8, 4], 0.5)).unwrap();
        assert!(matches!(read_clip_dir(dir.path()), Err(Error::StreamFormat { .. })));
    }

    #[test]
    fn contour_of_square() {
        let m = Tensor::from_fn(&[5, 5], |i| ((1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5))) as u8 as f64);
        let c = contour(&m).unwrap();
        assert_eq!(c.iter().filter(|&&b| b).count(), 8);
        assert!(!c[12]);
        let o = contour_overlay(&Tensor::zeros(&[3, 5, 5]), &m, Some(&m)).unwrap();
        assert_eq!(o.at3(1, 1, 1), 1.0);
        assert_eq!(o.at3(0, 1, 1), 0.0);
    }
}
