use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTS: [&str; 3] = ["png", "ppm", "pnm"];
pub const MANIFEST: &str = "manifest.txt";

/// Ordered RGB frames in `[0, 1]`, each `[3, H, W]`, with normalized indices.
#[derive(Clone, Debug)]
pub struct FrameDataset {
    frames: Vec<Tensor<f32>>,
    times: Vec<f64>,
    source: PathBuf,
    height: usize,
    width: usize,
}

/// `t_i = i/(N−1)`, or `[0]` for a single frame.
pub fn frame_times(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

impl FrameDataset {
    pub fn from_frames(frames: Vec<Tensor<f32>>, source: impl Into<PathBuf>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return input_err("dataset needs at least one frame");
        };
        let [3, h, w] = first.shape()[..] else {
            return input_err(format!("frames must be [3,H,W], got {:?}", first.shape()));
        };
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != [3, h, w] {
                return input_err(format!(
                    "frame {i} has shape {:?}, expected [3, {h}, {w}] (mixed resolutions)",
                    f.shape()
                ));
            }
            if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return input_err(format!("frame {i} has values outside [0, 1]"));
            }
        }
        Ok(Self {
            times: frame_times(frames.len()),
            frames,
            source: source.into(),
            height: h,
            width: w,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor<f32>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Tensor<f32> {
        &self.frames[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    /// `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Keeps the first `n` frames; indices are renormalized over the subset.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::from_frames(self.frames[..n.min(self.len())].to_vec(), self.source.clone())
    }
}

/// Loads a directory of PNG/PPM frames (sorted by file name), or raw planar RGB
/// files accompanied by a `manifest.txt` holding `width height count`.
pub fn ingest(path: &Path) -> Result<FrameDataset> {
    if !path.is_dir() {
        return input_err(format!("{} is not a directory of frames", path.display()));
    }
    let frames = if path.join(MANIFEST).is_file() {
        read_raw(path)?
    } else {
        let files = list_files(path, &IMAGE_EXTS)?;
        if files.is_empty() {
            return input_err(format!("no PNG/PPM frames found in {}", path.display()));
        }
        files.iter().map(|f| read_image(f)).collect::<Result<Vec<_>>>()?
    };
    FrameDataset::from_frames(frames, path)
}

fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()));
        if ok && p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, other)),
        })?
        .to_rgb8();
    Ok(image_to_tensor(&img))
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches")
}

pub fn tensor_to_image(frame: &Tensor<f32>) -> Result<RgbImage> {
    let [3, h, w] = frame.shape()[..] else {
        return input_err(format!("expected [3,H,W] frame, got {:?}", frame.shape()));
    };
    let d = frame.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| to_u8(d[c * h * w + i])))
    }))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_raw(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Input(format!("{}: expected `width height count`", manifest.display())))?;
    let [w, h, n] = nums[..] else {
        return input_err(format!("{}: expected `width height count`", manifest.display()));
    };
    if w == 0 || h == 0 || n == 0 {
        return input_err(format!("{}: zero-sized manifest", manifest.display()));
    }
    let mut bytes = Vec::new();
    for f in list_files(dir, &["rgb"])? {
        bytes.extend(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    let per = 3 * h * w;
    if bytes.len() != per * n {
        return input_err(format!(
            "raw payload has {} bytes, manifest implies {} ({n} frames of {w}x{h})",
            bytes.len(),
            per * n
        ));
    }
    Ok(bytes
        .chunks(per)
        .map(|c| Tensor::new(vec![3, h, w], c.iter().map(|&b| b as f32 / 255.0).collect()).expect("sized"))
        .collect())
}

/// Output container for [`write_frames`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Png,
    Ppm,
    /// Planar 8-bit RGB plus `manifest.txt`.
    Raw,
}

impl std::str::FromStr for FrameFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(Self::Png),
            "ppm" => Ok(Self::Ppm),
            "raw" | "rgb" => Ok(Self::Raw),
            _ => Err(Error::Usage(format!("unknown frame format `{s}` (png|ppm|raw)"))),
        }
    }
}

/// Writes frames as `frame_00000.<ext>` into `dir`, creating it if needed.
pub fn write_frames(dir: &Path, frames: &[Tensor<f32>], format: FrameFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        match format {
            FrameFormat::Png | FrameFormat::Ppm => {
                let (ext, fmt) = match format {
                    FrameFormat::Png => ("png", ImageFormat::Png),
                    _ => ("ppm", ImageFormat::Pnm),
                };
                let path = dir.join(format!("frame_{i:05}.{ext}"));
                tensor_to_image(f)?
                    .save_with_format(&path, fmt)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&path, io),
                        other => Error::Internal(format!("encoding {}: {other}", path.display())),
                    })?;
            }
            FrameFormat::Raw => {
                let path = dir.join(format!("frame_{i:05}.rgb"));
                let bytes: Vec<u8> = f.data().iter().map(|&v| to_u8(v)).collect();
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    if format == FrameFormat::Raw {
        if let Some(f) = frames.first() {
            let path = dir.join(MANIFEST);
            let text = format!("{} {} {}\n", f.shape()[2], f.shape()[1], frames.len());
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
