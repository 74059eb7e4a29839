//! RGB images as `(1, 3, H, W)` tensors with values in `[0, 1]`, plus the
//! resampling and file I/O the rest of the pipeline relies on.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    /// Wraps a `(3, H, W)` or `(1, 3, H, W)` tensor.
    pub fn new(tensor: Tensor) -> Result<Self> {
        let tensor = match tensor.rank() {
            3 => tensor.unsqueeze(0)?,
            4 => tensor,
            r => return Err(Error::Shape(format!("image tensor must have rank 3 or 4, got {r}"))),
        };
        let (b, c, _, _) = tensor.dims4()?;
        if b != 1 || c != 3 {
            return Err(Error::Shape(format!(
                "image tensor must be (1, 3, H, W), got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self(tensor))
    }

    /// Builds an image from interleaved RGB samples in row-major `H x W x 3` order.
    pub fn from_hwc(height: usize, width: usize, data: &[f32], device: &Device, dtype: DType) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} samples for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        let t = Tensor::from_slice(data, (height, width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Self::new(t)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        device: &Device,
        dtype: DType,
        f: impl Fn(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::from_hwc(height, width, &data, device, dtype)
    }

    pub fn to_hwc(&self) -> Result<Vec<f32>> {
        Ok(self
            .0
            .squeeze(0)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn device(&self) -> &Device {
        self.0.device()
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype()
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self(self.0.to_dtype(dtype)?))
    }

    /// Bicubic resampling; differentiable with respect to the pixels.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self(resize_bicubic(&self.0, height, width)?))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Self(self.0.narrow(2, top, height)?.narrow(3, left, width)?))
    }

    pub fn hflip(&self) -> Result<Self> {
        let w = self.width();
        let idx: Vec<u32> = (0..w as u32).rev().collect();
        let idx = Tensor::new(idx.as_slice(), self.device())?;
        Ok(Self(self.0.index_select(&idx, 3)?))
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        if self.0.dims() != other.0.dims() {
            return Err(Error::Shape(format!(
                "cannot compare images of shape {:?} and {:?}",
                self.0.dims(),
                other.0.dims()
            )));
        }
        Ok((&self.0 - &other.0)?
            .sqr()?
            .mean_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            ));
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Self::from_hwc(h as usize, w as usize, rgb.as_raw(), device, dtype)
    }

    /// Writes an 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let data: Vec<u8> = self
            .to_hwc()?
            .into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, data)
            .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }
}

/// Cubic convolution kernel with `a = -0.75` (the PyTorch/OpenCV convention).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Lays tiles out row by row; every tile is resized to the first tile's size.
pub fn tile_grid(rows: &[Vec<ImageTensor>]) -> Result<ImageTensor> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::Shape("grid has no tiles".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut row_tensors = Vec::with_capacity(rows.len());
    for row in rows.iter().filter(|r| !r.is_empty()) {
        let tiles = row
            .iter()
            .map(|t| Ok(t.resize(h, w)?.detach().into_tensor()))
            .collect::<Result<Vec<_>>>()?;
        row_tensors.push(Tensor::cat(&tiles, 3)?);
    }
    let widest = row_tensors.iter().map(|t| t.dim(3)).collect::<std::result::Result<Vec<_>, _>>()?;
    let max_w = widest.iter().copied().max().unwrap_or(w);
    let padded = row_tensors
        .into_iter()
        .map(|t| {
            let extra = max_w - t.dim(3)?;
            Ok(if extra > 0 { t.pad_with_zeros(3, 0, extra)? } else { t })
        })
        .collect::<Result<Vec<_>>>()?;
    ImageTensor::new(Tensor::cat(&padded, 2)?)
}

/// Row-major `out_len x in_len` matrix performing 1-D bicubic resampling with
/// half-pixel centers and clamped borders.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    if in_len == out_len {
        for i in 0..in_len {
            m[i * in_len + i] = 1.0;
        }
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for k in -1i64..=2 {
            let w = cubic_weight(t - k as f64);
            let idx = (base as i64 + k).clamp(0, in_len as i64 - 1) as usize;
            m[o * in_len + idx] += w;
        }
    }
    m
}

/// Separable bicubic resize of a `(N, C, H, W)` tensor, expressed as two
/// matrix products so gradients flow through it.
pub fn resize_bicubic(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    if h == height && w == width {
        return Ok(t.clone());
    }
    let dev = t.device();
    let dt = t.dtype();
    let ry = Tensor::from_vec(bicubic_matrix(h, height), (height, h), dev)?.to_dtype(dt)?;
    let rx = Tensor::from_vec(bicubic_matrix(w, width), (width, w), dev)?
        .to_dtype(dt)?
        .t()?
        .contiguous()?;
    let rows = ry.broadcast_matmul(&t.contiguous()?)?;
    Ok(rows.broadcast_matmul(&rx)?)
}
