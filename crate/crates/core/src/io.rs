//! PNG images, depth sidecars and the parameter checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "VIFCKPT1"
//! u32      manifest length, then that many bytes of UTF-8 TOML (model config)
//! u32      tensor count
//! per tensor:
//!   u32    name length, name bytes (UTF-8)
//!   u8     dtype (0 = f32, 1 = f64)
//!   u8     rank (always 4)
//!   u64×4  shape (n, c, h, w)
//!   raw    numel × dtype bytes
//! ```
//!
//! Float depth files: magic "VDEPTHF1", u32 height, u32 width, then
//! `height × width` f32 values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::fusion::{ModelConfig, VifnetModel};
use crate::haze::DepthMap;
use crate::imaging::{ColorSpace, ImageTensor};
use crate::tensor::{Elem, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VIFCKPT1";
pub const DEPTH_MAGIC: &[u8; 8] = b"VDEPTHF1";

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

/// Loads an 8- or 16-bit PNG. RGB inputs requested as single channel are
/// converted to luminance; gray inputs requested as RGB are replicated.
pub fn read_png(path: &Path, color: ColorSpace) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    from_dynamic(img, color)
}

pub fn from_dynamic(img: DynamicImage, color: ColorSpace) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if color.channels() == 1 {
        let buf = img.into_luma16();
        let data = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        ImageTensor::new(Tensor::from_vec(Shape::new(1, 1, h, w), data)?, color)
    } else {
        let buf = img.into_rgb16();
        let raw = buf.into_raw();
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32 / 65535.0;
            }
        }
        ImageTensor::new(Tensor::from_vec(Shape::new(1, 3, h, w), data)?, color)
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG (gray for single-channel images).
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = (img.height() as u32, img.width() as u32);
    let plane = (h * w) as usize;
    let d = img.data();
    let result = if img.channels() == 1 {
        let raw: Vec<u8> = d.iter().map(|&v| quantize_u8(v)).collect();
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw).expect("buffer size").save(path)
    } else {
        let mut raw = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                raw.push(quantize_u8(d[c * plane + i]));
            }
        }
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("buffer size").save(path)
    };
    result.map_err(|e| image_err(path, e))
}

/// Stores the 8-bit quantization of an image back as floats, as a PNG round
/// trip would.
pub fn quantized(img: &ImageTensor) -> ImageTensor {
    let t = img.tensor().map(|v| quantize_u8(v) as f32 / 255.0);
    ImageTensor::new(t, img.color()).expect("quantized values stay in range")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// 16-bit depth: metres = value × `scale`.
pub fn write_depth_png16(path: &Path, d: &DepthMap, scale: f64) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u16> = d.data().iter().map(|&m| (m / scale).round().clamp(0.0, 65535.0) as u16).collect();
    ImageBuffer::<Luma<u16>, _>::from_raw(d.width() as u32, d.height() as u32, raw)
        .expect("buffer size")
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn read_depth_png16(path: &Path, scale: f64) -> Result<DepthMap> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("depth scale {scale} must be positive")));
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_luma16().into_raw().into_iter().map(|v| v as f64 * scale).collect();
    DepthMap::new(h, w, data)
}

pub fn write_depth_f32(path: &Path, d: &DepthMap) -> Result<()> {
    ensure_parent(path)?;
    let mut bytes = Vec::with_capacity(16 + 4 * d.data().len());
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(d.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(d.width() as u32).to_le_bytes());
    for &v in d.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth_f32(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(format_err(path, "not a float depth file"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * h * w {
        return Err(format_err(path, format!("expected {} depth bytes, found {}", 4 * h * w, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    DepthMap::new(h, w, data).map_err(|e| format_err(path, e.to_string()))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err(self.path, "non-UTF-8 string"))
    }
}

/// Parameters and the model config that produced them.
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

pub fn save_checkpoint<T: Elem>(path: &Path, model: &VifnetModel<T>) -> Result<()> {
    ensure_parent(path)?;
    let manifest = toml::to_string(&model.cfg).map_err(|e| Error::Config(e.to_string()))?;
    let tmp = path.with_extension("partial");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes);
    let res: std::io::Result<()> = (|| {
        write(CHECKPOINT_MAGIC)?;
        write(&(manifest.len() as u32).to_le_bytes())?;
        write(manifest.as_bytes())?;
        write(&(model.params.len() as u32).to_le_bytes())?;
        for id in model.params.ids() {
            let name = model.params.name(id);
            let t = model.params.get(id);
            let s = t.shape();
            write(&(name.len() as u32).to_le_bytes())?;
            write(name.as_bytes())?;
            let tag = if T::DTYPE == "f32" { 0u8 } else { 1 };
            write(&[tag, 4])?;
            for d in [s.n, s.c, s.h, s.w] {
                write(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                if tag == 0 {
                    write(&(v.f64() as f32).to_le_bytes())?;
                } else {
                    write(&v.f64().to_le_bytes())?;
                }
            }
        }
        Ok(())
    })();
    res.and_then(|_| out.flush()).map_err(|e| Error::io(&tmp, e))?;
    drop(out);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Elem>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    let manifest = r.string()?;
    let config: ModelConfig = toml::from_str(&manifest).map_err(|e| format_err(path, format!("manifest: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let dtype = r.u8()?;
        let rank = r.u8()?;
        if rank != 4 {
            return Err(format_err(path, format!("tensor {name} has rank {rank}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape.numel();
        let data: Vec<T> = match dtype {
            0 => r.take(4 * n)?.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            1 => r.take(8 * n)?.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
            other => return Err(format_err(path, format!("unknown dtype tag {other}"))),
        };
        tensors.insert(name, Tensor::from_vec(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint { config, tensors })
}

/// Rebuilds a model from a checkpoint; every parameter must be present,
/// correctly shaped and finite.
pub fn load_model<T: Elem>(path: &Path) -> Result<VifnetModel<T>> {
    let ck = read_checkpoint::<T>(path)?;
    let mut model = VifnetModel::new(ck.config, 0)?;
    model.params.load_map(ck.tensors)?;
    model.check_finite()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Variant;

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(9, 12, ColorSpace::Rgb, |y, x, c| ((y * 12 + x) * 3 + c) as f32 / 324.0).unwrap();
        let p = dir.path().join("a/b.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p, ColorSpace::Rgb).unwrap();
        assert_eq!(back, quantized(&img));
        let gray = read_png(&p, ColorSpace::Gray).unwrap();
        assert_eq!(gray.channels(), 1);
        assert!(matches!(read_png(&dir.path().join("none.png"), ColorSpace::Rgb), Err(Error::MissingFile(_))));
    }

    #[test]
    fn depth_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::new(3, 4, (0..12).map(|i| i as f64 * 2.5).collect()).unwrap();
        let p = dir.path().join("d.bin");
        write_depth_f32(&p, &d).unwrap();
        assert_eq!(read_depth_f32(&p).unwrap(), d);
        let scale = 30.0 / 65535.0;
        let p = dir.path().join("d.png");
        write_depth_png16(&p, &d, scale).unwrap();
        let back = read_depth_png16(&p, scale).unwrap();
        for (a, b) in back.data().iter().zip(d.data()) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-12);
        }
        fs::write(dir.path().join("bad.bin"), b"VDEPTHF1\x02\0\0\0\x02\0\0\0abc").unwrap();
        assert!(matches!(read_depth_f32(&dir.path().join("bad.bin")), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { base_channels: 4, cpab_reduction: 4, dsfe_width: 4, variant: Variant::Dsfe, ..Default::default() };
        let model = VifnetModel::<f32>::new(cfg, 5).unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &model).unwrap();
        let back = load_model::<f32>(&p).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params, model.params);
    }

    #[test]
    fn checkpoint_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { base_channels: 4, cpab_reduction: 4, dsfe_width: 4, ..Default::default() };
        let mut model = VifnetModel::<f32>::new(cfg, 5).unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &model).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model::<f32>(&p), Err(Error::Format { .. })));

        let id = model.params.ids().next().unwrap();
        model.params.get_mut(id).data_mut()[0] = f32::INFINITY;
        save_checkpoint(&p, &model).unwrap();
        assert!(matches!(load_model::<f32>(&p), Err(Error::CorruptModel(_))));

        let other = VifnetModel::<f32>::new(ModelConfig { variant: Variant::BasicFusion, ..cfg }, 1).unwrap();
        let mut ck = read_checkpoint::<f32>(&p).unwrap();
        ck.config = other.cfg;
        let mut m = VifnetModel::<f32>::new(ck.config, 0).unwrap();
        assert!(matches!(m.params.load_map(ck.tensors), Err(Error::CorruptModel(_))));
    }
}
