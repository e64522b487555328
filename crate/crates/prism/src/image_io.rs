//! Image and point-map file formats.
//!
//! Three formats, all planar (channel-major) in memory:
//! - PPM (P6, maxval 255) for viewable renders;
//! - `PMIM`: raw little-endian f32 image, header magic + C, H, W as u32;
//! - `PMPT`: point map, header magic + version, H, W as u32, then three f32
//!   coordinate planes followed by one confidence plane.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const PMIM_MAGIC: &[u8; 4] = b"PMIM";
pub const PMPT_MAGIC: &[u8; 4] = b"PMPT";
pub const PMPT_VERSION: u32 = 1;

/// Planar float image, values nominally in [0, 1] for color data.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Image> {
        if data.len() != channels * h * w {
            return Err(Error::dims("image", &[data.len()], &[channels, h, w]));
        }
        Ok(Image {
            channels,
            h,
            w,
            data,
        })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Image {
        Image {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }
}

/// Camera-frame point map with per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub h: usize,
    pub w: usize,
    /// Three planes of h*w coordinates: x, then y, then z.
    pub xyz: Vec<f32>,
    /// One plane of h*w confidences.
    pub conf: Vec<f32>,
}

impl PointMap {
    pub fn new(h: usize, w: usize, xyz: Vec<f32>, conf: Vec<f32>) -> Result<PointMap> {
        if xyz.len() != 3 * h * w || conf.len() != h * w {
            return Err(Error::dims("point map", &[xyz.len(), conf.len()], &[3 * h * w, h * w]));
        }
        Ok(PointMap { h, w, xyz, conf })
    }

    pub fn point(&self, y: usize, x: usize) -> [f32; 3] {
        let n = self.h * self.w;
        let i = y * self.w + x;
        [self.xyz[i], self.xyz[n + i], self.xyz[2 * n + i]]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a 3-channel image as binary PPM, clamping to [0, 1] and rounding
/// to the nearest of 256 levels.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Contract(format!(
            "ppm wants 3 channels, image has {}",
            img.channels
        )));
    }
    let mut bytes = Vec::with_capacity(32 + 3 * img.h * img.w);
    bytes
        .write_all(format!("P6\n{} {}\n255\n", img.w, img.h).as_bytes())
        .expect("vec write");
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                let v = img.at(c, y, x).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    write_file(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated ppm header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(Error::parse(path, "not a binary ppm"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| Error::parse(path, "bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| Error::parse(path, "bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| Error::parse(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::parse(path, "only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    if bytes.len() < pos + 3 * h * w {
        return Err(Error::parse(path, "truncated ppm payload"));
    }
    let mut img = Image::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                *img.at_mut(c, y, x) = bytes[pos] as f32 / 255.0;
                pos += 1;
            }
        }
    }
    Ok(img)
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn take_u32(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<u32> {
    if bytes.len() < *pos + 4 {
        return Err(Error::parse(path, "truncated header"));
    }
    let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

fn take_f32_plane(bytes: &[u8], pos: &mut usize, n: usize, path: &Path) -> Result<Vec<f32>> {
    if bytes.len() < *pos + 4 * n {
        return Err(Error::parse(path, "truncated payload"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()));
        *pos += 4;
    }
    Ok(out)
}

/// Write a raw float image, exact to the bit.
pub fn write_raw_image(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * img.data.len());
    bytes.extend_from_slice(PMIM_MAGIC);
    push_u32(&mut bytes, img.channels as u32);
    push_u32(&mut bytes, img.h as u32);
    push_u32(&mut bytes, img.w as u32);
    for &v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_raw_image(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    if bytes.len() < 16 || &bytes[0..4] != PMIM_MAGIC {
        return Err(Error::parse(path, "not a raw image file"));
    }
    let mut pos = 4;
    let channels = take_u32(&bytes, &mut pos, path)? as usize;
    let h = take_u32(&bytes, &mut pos, path)? as usize;
    let w = take_u32(&bytes, &mut pos, path)? as usize;
    let data = take_f32_plane(&bytes, &mut pos, channels * h * w, path)?;
    if pos != bytes.len() {
        return Err(Error::parse(path, "trailing bytes"));
    }
    Image::new(channels, h, w, data)
}

/// Write a point map: 16-byte header, three coordinate planes, one
/// confidence plane, all little-endian f32.
pub fn write_point_map(path: &Path, pm: &PointMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * (pm.xyz.len() + pm.conf.len()));
    bytes.extend_from_slice(PMPT_MAGIC);
    push_u32(&mut bytes, PMPT_VERSION);
    push_u32(&mut bytes, pm.h as u32);
    push_u32(&mut bytes, pm.w as u32);
    for &v in pm.xyz.iter().chain(pm.conf.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_point_map(path: &Path) -> Result<PointMap> {
    let bytes = read_file(path)?;
    if bytes.len() < 16 || &bytes[0..4] != PMPT_MAGIC {
        return Err(Error::parse(path, "not a point map file"));
    }
    let mut pos = 4;
    let version = take_u32(&bytes, &mut pos, path)?;
    if version != PMPT_VERSION {
        return Err(Error::parse(path, format!("unsupported version {version}")));
    }
    let h = take_u32(&bytes, &mut pos, path)? as usize;
    let w = take_u32(&bytes, &mut pos, path)? as usize;
    let xyz = take_f32_plane(&bytes, &mut pos, 3 * h * w, path)?;
    let conf = take_f32_plane(&bytes, &mut pos, h * w, path)?;
    if pos != bytes.len() {
        return Err(Error::parse(path, "trailing bytes"));
    }
    PointMap::new(h, w, xyz, conf)
}
