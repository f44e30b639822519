//! Tensor container files and image-sequence ingestion.
//!
//! A container is `SCITEN1\n`, one ASCII header line
//! `dtype=<f32|f64|u8> dims=<d0,d1,...> order=row-major\n`, then the
//! elements as little-endian bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, SciError};
use crate::forward::{MaskSet, VideoBlock};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8] = b"SCITEN1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            "u8" => Some(Dtype::U8),
            _ => None,
        }
    }
}

/// A decoded container before conversion to a typed tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements as `f64`, whatever the stored type.
    pub fn values(&self) -> Vec<f64> {
        match self.dtype {
            Dtype::U8 => self.payload.iter().map(|&b| b as f64).collect(),
            Dtype::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => self.payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_vec(&self.dims, self.values().into_iter().map(T::of).collect())
    }
}

fn header(dtype: Dtype, dims: &[usize]) -> Vec<u8> {
    let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(format!("dtype={} dims={} order=row-major\n", dtype.name(), dims.join(",")).as_bytes());
    out
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let dtype = Dtype::parse(T::DTYPE).expect("scalar dtype tag");
    let mut out = header(dtype, t.shape());
    out.reserve(t.len() * dtype.width());
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    out
}

pub fn encode_u8(dims: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "u8 payload does not match dims");
    let mut out = header(Dtype::U8, dims);
    out.extend_from_slice(data);
    out
}

/// Parses magic and header, returning the dtype, dims and payload offset.
fn parse_header(bytes: &[u8], path: &Path) -> Result<(Dtype, Vec<usize>, usize)> {
    let bad = |reason: &str| SciError::TensorFormat { path: path.to_path_buf(), reason: reason.to_string() };
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing SCITEN1 magic"))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header"))?;
    let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not ASCII"))?;
    let (mut dtype, mut dims, mut order) = (None, None, None);
    for field in line.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| bad("header field without '='"))?;
        match key {
            "dtype" => dtype = Some(Dtype::parse(value).ok_or_else(|| bad("unknown dtype"))?),
            "dims" => {
                let parsed: std::result::Result<Vec<usize>, _> = if value.is_empty() {
                    Ok(Vec::new())
                } else {
                    value.split(',').map(str::parse).collect()
                };
                dims = Some(parsed.map_err(|_| bad("bad dims"))?);
            }
            "order" => order = Some(value),
            _ => return Err(bad(&format!("unknown header field {key:?}"))),
        }
    }
    if order != Some("row-major") {
        return Err(bad("order must be row-major"));
    }
    let dtype = dtype.ok_or_else(|| bad("missing dtype"))?;
    let dims = dims.ok_or_else(|| bad("missing dims"))?;
    Ok((dtype, dims, MAGIC.len() + nl + 1))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let (dtype, dims, offset) = parse_header(bytes, path)?;
    let payload = &bytes[offset..];
    let expected = dims.iter().product::<usize>() * dtype.width();
    if payload.len() != expected {
        return Err(SciError::TensorFormat {
            path: path.to_path_buf(),
            reason: format!("payload has {} bytes, header implies {expected}", payload.len()),
        });
    }
    Ok(RawTensor { dtype, dims, payload: payload.to_vec() })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SciError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| SciError::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| SciError::io(path, e))?;
    decode(&bytes, path)
}

/// dtype and dims from the header alone.
pub fn read_header(path: &Path) -> Result<(Dtype, Vec<usize>)> {
    use std::io::Read;
    let mut head = Vec::new();
    let f = fs::File::open(path).map_err(|e| SciError::io(path, e))?;
    f.take(4096).read_to_end(&mut head).map_err(|e| SciError::io(path, e))?;
    let (dtype, dims, _) = parse_header(&head, path)?;
    Ok((dtype, dims))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_bytes(path, &encode(t))
}

/// Reads any container dtype, converting values to `T`.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read_raw(path)?.to_tensor()
}

pub fn write_masks(path: &Path, m: &MaskSet) -> Result<()> {
    write_bytes(path, &encode_u8(&m.shape(), m.bytes()))
}

/// Reads a `(B, H, W)` container of any dtype holding only 0 and 1.
pub fn read_masks(path: &Path) -> Result<MaskSet> {
    let t = read_tensor::<f64>(path)?;
    if t.shape().len() != 3 {
        return Err(SciError::TensorFormat {
            path: path.to_path_buf(),
            reason: format!("masks must be (B, H, W), got {:?}", t.shape()),
        });
    }
    MaskSet::from_tensor(&t)
}

/// A `(B, H, W)` container, or a directory of PNG frames.
pub fn read_video<T: Scalar>(path: &Path) -> Result<VideoBlock<T>> {
    if path.is_dir() {
        return Ok(load_png_frames(path)?.cast());
    }
    let t = read_tensor::<T>(path)?;
    if t.shape().len() != 3 {
        return Err(SciError::TensorFormat {
            path: path.to_path_buf(),
            reason: format!("video must be (B, H, W), got {:?}", t.shape()),
        });
    }
    VideoBlock::new(t)
}

/// PNG files of `dir`, sorted lexicographically by file name.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| SciError::io(dir, e))? {
        let p = entry.map_err(|e| SciError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// `0.299 R + 0.587 G + 0.114 B` on 8-bit samples, scaled to `[0, 1]`.
pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| SciError::Image { path: path.to_path_buf(), source: e })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect(),
    };
    Ok((h, w, pixels))
}

pub fn load_png_frames(dir: &Path) -> Result<VideoBlock<f32>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(SciError::Corpus(format!("no PNG frames in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut size = None;
    for f in &files {
        let (h, w, px) = load_gray_png(f)?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(SciError::Corpus(format!("{} is {h}x{w}, earlier frames differ", f.display())));
        }
        data.extend(px);
    }
    let (h, w) = size.unwrap();
    VideoBlock::new(Tensor::from_vec(&[files.len(), h, w], data)?)
}

/// Writes each frame as an 8-bit grayscale PNG named `frame_0000.png`, ...
pub fn save_png_frames<T: Scalar>(dir: &Path, v: &VideoBlock<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SciError::io(dir, e))?;
    for i in 0..v.frames() {
        let px: Vec<u8> = v.frame(i).iter().map(|x| (x.f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(v.width() as u32, v.height() as u32, px).expect("frame size");
        let path = dir.join(format!("frame_{i:04}.png"));
        img.save(&path).map_err(|e| SciError::Image { path, source: e })?;
    }
    Ok(())
}
