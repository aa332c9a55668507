//! Dense-grid numeric primitives shared by every stage of the pipeline.
//!
//! A [`Grid`] is a row-major `H x W x C` array of `f32`. Frames are 3-channel
//! grids in `[0,1]`, masks are 1-channel binary grids (1 = masked), flow
//! fields are 2-channel grids of per-pixel displacements in pixels with
//! channel order `(dx, dy)` — the same order the `.flo` file format uses.
//!
//! Sampling outside the grid clamps coordinates to the border; convolution
//! zero-pads. Convolution accumulates in `f64` with a fixed reduction order,
//! so results are identical across thread counts.

use crate::error::{Error, Result};
use crate::util;

/// Row-major `H x W x C` grid of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid {
    /// Zero-filled grid.
    pub fn new(height: usize, width: usize, channels: usize) -> Grid {
        Grid { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Grid {
        Grid { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Wrap an existing buffer; `data.len()` must equal `h * w * c`.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Grid> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "grid data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Grid { height, width, channels, data })
    }

    /// Fill from a function of `(y, x, c)`.
    pub fn from_fn<F: FnMut(usize, usize, usize) -> f32>(
        height: usize,
        width: usize,
        channels: usize,
        mut f: F,
    ) -> Grid {
        let mut g = Grid::new(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(y, x, c);
                    g.set(y, x, c, v);
                }
            }
        }
        g
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel slice at a pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let base = (y * self.width + x) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn same_spatial(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.same_spatial(other) && self.channels == other.channels
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<F: Fn(f32) -> f32>(&self, f: F) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Stack grids along the channel axis. All inputs must share H x W.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat_channels needs at least one grid".into())
        })?;
        let (h, w) = (first.height, first.width);
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::DimensionMismatch(format!(
                    "concat_channels: {}x{} vs {}x{}",
                    p.height, p.width, h, w
                )));
            }
            channels += p.channels;
        }
        let mut out = Grid::new(h, w, channels);
        for y in 0..h {
            for x in 0..w {
                let mut c0 = 0;
                for p in parts {
                    let src = p.pixel(y, x);
                    out.pixel_mut(y, x)[c0..c0 + p.channels].copy_from_slice(src);
                    c0 += p.channels;
                }
            }
        }
        Ok(out)
    }

    /// Extract a contiguous channel range into its own grid.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Grid> {
        if start + count > self.channels {
            return Err(Error::DimensionMismatch(format!(
                "slice_channels {}..{} of {}",
                start,
                start + count,
                self.channels
            )));
        }
        let mut out = Grid::new(self.height, self.width, count);
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(y, x)
                    .copy_from_slice(&self.pixel(y, x)[start..start + count]);
            }
        }
        Ok(out)
    }
}

/// Convolution weights: `out_channels x in_channels x kh x kw`, row-major,
/// plus an optional per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Kernel> {
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(Error::WeightShape(format!(
                "kernel weights length {} != {}x{}x{}x{}",
                weights.len(),
                out_channels,
                in_channels,
                kh,
                kw
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::WeightShape(format!(
                    "kernel bias length {} != out_channels {}",
                    b.len(),
                    out_channels
                )));
            }
        }
        Ok(Kernel { out_channels, in_channels, kh, kw, weights, bias })
    }

    /// 1x1 kernel that passes `channels` through unchanged.
    pub fn identity(channels: usize) -> Kernel {
        let mut weights = vec![0.0; channels * channels];
        for c in 0..channels {
            weights[c * channels + c] = 1.0;
        }
        Kernel { out_channels: channels, in_channels: channels, kh: 1, kw: 1, weights, bias: None }
    }

    /// 1x1 kernel selecting channel range `start..start+out` of `in_channels`.
    pub fn channel_select(in_channels: usize, start: usize, out: usize) -> Kernel {
        let mut weights = vec![0.0; out * in_channels];
        for c in 0..out {
            weights[c * in_channels + start + c] = 1.0;
        }
        Kernel { out_channels: out, in_channels, kh: 1, kw: 1, weights, bias: None }
    }

    #[inline]
    pub fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((oc * self.in_channels + ic) * self.kh + ky) * self.kw + kx]
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear sample of one channel at real coordinates, clamping to the border.
///
/// Exact at integer coordinates (the lerp form adds `(b - a) * 0`), and
/// constant grids sample to the constant bit-exactly.
#[inline]
pub fn bilinear_sample_channel(g: &Grid, x: f32, y: f32, c: usize) -> f32 {
    let xc = x.clamp(0.0, (g.width() - 1) as f32);
    let yc = y.clamp(0.0, (g.height() - 1) as f32);
    let x0 = xc.floor();
    let y0 = yc.floor();
    let fx = xc - x0;
    let fy = yc - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(g.width() - 1);
    let y1 = (y0 + 1).min(g.height() - 1);
    let top = lerp(g.at(y0, x0, c), g.at(y0, x1, c), fx);
    let bot = lerp(g.at(y1, x0, c), g.at(y1, x1, c), fx);
    lerp(top, bot, fy)
}

/// Bilinear sample of all channels into `out`.
#[inline]
pub fn bilinear_sample_into(g: &Grid, x: f32, y: f32, out: &mut [f32]) {
    debug_assert_eq!(out.len(), g.channels());
    for (c, o) in out.iter_mut().enumerate() {
        *o = bilinear_sample_channel(g, x, y, c);
    }
}

/// Bilinear sample of all channels; coordinates outside the grid clamp to
/// the border before interpolation.
pub fn bilinear_sample(g: &Grid, x: f32, y: f32) -> Vec<f32> {
    let mut out = vec![0.0; g.channels()];
    bilinear_sample_into(g, x, y, &mut out);
    out
}

/// Standard cross-correlation with zero padding.
///
/// Output spatial dims are `floor((dim + 2*padding - k)/stride) + 1`.
/// Accumulation runs in `f64` per output element in a fixed order.
pub fn conv2d(g: &Grid, k: &Kernel, stride: usize, padding: usize) -> Result<Grid> {
    if k.in_channels != g.channels() {
        return Err(Error::DimensionMismatch(format!(
            "conv2d: kernel expects {} input channels, grid has {}",
            k.in_channels,
            g.channels()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let ph = g.height() + 2 * padding;
    let pw = g.width() + 2 * padding;
    if k.kh > ph || k.kw > pw {
        return Err(Error::KernelTooLarge(format!(
            "conv2d: kernel {}x{} on padded input {}x{}",
            k.kh, k.kw, ph, pw
        )));
    }
    let out_h = (ph - k.kh) / stride + 1;
    let out_w = (pw - k.kw) / stride + 1;
    let out_c = k.out_channels;
    let in_c = k.in_channels;

    let mut out = Grid::new(out_h, out_w, out_c);
    let row_len = out_w * out_c;
    util::for_each_row(out.data_mut(), row_len, |oy, row| {
        for ox in 0..out_w {
            for oc in 0..out_c {
                let mut acc: f64 = match &k.bias {
                    Some(b) => b[oc] as f64,
                    None => 0.0,
                };
                for ky in 0..k.kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= g.height() as isize {
                        continue;
                    }
                    for kx in 0..k.kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= g.width() as isize {
                            continue;
                        }
                        let px = g.pixel(iy as usize, ix as usize);
                        for ic in 0..in_c {
                            acc += k.weight(oc, ic, ky, kx) as f64 * px[ic] as f64;
                        }
                    }
                }
                row[ox * out_c + oc] = acc as f32;
            }
        }
    });
    Ok(out)
}

/// Resampling mode. Masks must use `Nearest`; frames and features use
/// `Area` when shrinking and `Bilinear` when growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Area,
}

/// Resize by the rational factor `num/den`. Output dims are
/// `floor(dim * num / den)` and must stay positive.
pub fn resize(g: &Grid, num: usize, den: usize, mode: ResizeMode) -> Result<Grid> {
    if num == 0 || den == 0 {
        return Err(Error::InvalidArgument("resize: factor must be positive".into()));
    }
    let out_h = g.height() * num / den;
    let out_w = g.width() * num / den;
    resize_to(g, out_h, out_w, mode)
}

/// Resize to explicit output dims.
pub fn resize_to(g: &Grid, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize: non-positive output dims {}x{}",
            out_h, out_w
        )));
    }
    let (h, w, c) = (g.height(), g.width(), g.channels());
    let mut out = Grid::new(out_h, out_w, c);
    match mode {
        ResizeMode::Nearest => {
            // Top-left convention: source index floor(dst * in / out).
            for oy in 0..out_h {
                let sy = (oy * h / out_h).min(h - 1);
                for ox in 0..out_w {
                    let sx = (ox * w / out_w).min(w - 1);
                    out.pixel_mut(oy, ox).copy_from_slice(g.pixel(sy, sx));
                }
            }
        }
        ResizeMode::Bilinear => {
            let sy_scale = h as f32 / out_h as f32;
            let sx_scale = w as f32 / out_w as f32;
            for oy in 0..out_h {
                let sy = (oy as f32 + 0.5) * sy_scale - 0.5;
                for ox in 0..out_w {
                    let sx = (ox as f32 + 0.5) * sx_scale - 0.5;
                    for ch in 0..c {
                        let v = bilinear_sample_channel(g, sx, sy, ch);
                        out.set(oy, ox, ch, v);
                    }
                }
            }
        }
        ResizeMode::Area => {
            // Box filter: each output pixel averages the source rectangle it
            // covers, with fractional edge weights. Integer-factor shrinks
            // reduce to exact block means.
            let sy_scale = h as f64 / out_h as f64;
            let sx_scale = w as f64 / out_w as f64;
            for oy in 0..out_h {
                let y0 = oy as f64 * sy_scale;
                let y1 = (oy + 1) as f64 * sy_scale;
                for ox in 0..out_w {
                    let x0 = ox as f64 * sx_scale;
                    let x1 = (ox + 1) as f64 * sx_scale;
                    for ch in 0..c {
                        let mut num = 0.0f64;
                        let mut den = 0.0f64;
                        let mut sy = y0.floor() as usize;
                        while (sy as f64) < y1 && sy < h {
                            let wy = overlap(sy as f64, sy as f64 + 1.0, y0, y1);
                            let mut sx = x0.floor() as usize;
                            while (sx as f64) < x1 && sx < w {
                                let wx = overlap(sx as f64, sx as f64 + 1.0, x0, x1);
                                let weight = wy * wx;
                                num += weight * g.at(sy, sx, ch) as f64;
                                den += weight;
                                sx += 1;
                            }
                            sy += 1;
                        }
                        out.set(oy, ox, ch, (num / den) as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Resize a 2-channel flow field by `num/den`: spatial bilinear resample,
/// then both displacement channels scaled by the same factor.
pub fn resize_flow(f: &Grid, num: usize, den: usize) -> Result<Grid> {
    if f.channels() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "resize_flow: expected 2 channels, got {}",
            f.channels()
        )));
    }
    let mut out = resize(f, num, den, ResizeMode::Bilinear)?;
    let scale = num as f32 / den as f32;
    for v in out.data_mut() {
        *v *= scale;
    }
    Ok(out)
}

/// Resize a 2-channel flow field to explicit dims, scaling each displacement
/// channel by its own axis ratio.
pub fn resize_flow_to(f: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if f.channels() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "resize_flow_to: expected 2 channels, got {}",
            f.channels()
        )));
    }
    let sx = out_w as f32 / f.width() as f32;
    let sy = out_h as f32 / f.height() as f32;
    let mut out = resize_to(f, out_h, out_w, ResizeMode::Bilinear)?;
    for px in 0..out_h * out_w {
        out.data_mut()[px * 2] *= sx;
        out.data_mut()[px * 2 + 1] *= sy;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_exact_at_integer_coords() {
        let g = Grid::from_fn(4, 6, 2, |y, x, c| (y * 100 + x * 10 + c) as f32);
        assert_eq!(bilinear_sample(&g, 3.0, 2.0), vec![g.at(2, 3, 0), g.at(2, 3, 1)]);
        assert_eq!(bilinear_sample(&g, 5.0, 3.0), vec![g.at(3, 5, 0), g.at(3, 5, 1)]);
    }

    #[test]
    fn bilinear_midpoint() {
        let mut g = Grid::new(1, 2, 1);
        g.set(0, 0, 0, 0.0);
        g.set(0, 1, 0, 1.0);
        assert_eq!(bilinear_sample(&g, 0.5, 0.0)[0], 0.5);
    }

    #[test]
    fn bilinear_clamps_to_border() {
        let g = Grid::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f32);
        assert_eq!(bilinear_sample(&g, -2.7, 0.0)[0], g.at(0, 0, 0));
        assert_eq!(bilinear_sample(&g, 10.0, 10.0)[0], g.at(2, 2, 0));
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let g = Grid::from_fn(5, 7, 3, |y, x, c| (y + 2 * x + 3 * c) as f32 * 0.25 - 1.0);
        let out = conv2d(&g, &Kernel::identity(3), 1, 0).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn conv_box_kernel_on_constant() {
        let g = Grid::constant(5, 5, 1, 0.3);
        let k = Kernel::new(1, 1, 3, 3, vec![1.0; 9], None).unwrap();
        let out = conv2d(&g, &k, 1, 1).unwrap();
        assert_eq!(out.height(), 5);
        assert!((out.at(2, 2, 0) - 9.0 * 0.3).abs() < 1e-6);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let g = Grid::new(2, 2, 1);
        let k = Kernel::new(1, 1, 5, 5, vec![0.0; 25], None).unwrap();
        assert!(matches!(conv2d(&g, &k, 1, 0), Err(Error::KernelTooLarge(_))));
    }

    #[test]
    fn resize_constant_all_modes() {
        let g = Grid::constant(6, 8, 3, 0.7);
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Area] {
            for (num, den) in [(1, 2), (2, 1), (1, 3), (3, 2)] {
                let out = resize(&g, num, den, mode).unwrap();
                for v in out.data() {
                    assert!((v - 0.7).abs() < 1e-6, "{mode:?} {num}/{den}");
                }
            }
        }
    }

    #[test]
    fn resize_nearest_top_left_convention() {
        let g = Grid::from_vec(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = resize(&g, 1, 2, ResizeMode::Nearest).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn resize_rejects_degenerate_output() {
        let g = Grid::new(2, 2, 1);
        assert!(resize(&g, 1, 3, ResizeMode::Nearest).is_err());
    }

    #[test]
    fn resize_flow_scales_displacements() {
        let f = Grid::from_fn(8, 8, 2, |_, _, c| if c == 0 { 8.0 } else { 0.0 });
        let out = resize_flow(&f, 1, 4).unwrap();
        assert_eq!(out.height(), 2);
        for px in 0..4 {
            assert_eq!(out.data()[px * 2], 2.0);
            assert_eq!(out.data()[px * 2 + 1], 0.0);
        }
    }

    #[test]
    fn resize_flow_round_trip_constant_pow2() {
        let f = Grid::from_fn(8, 12, 2, |_, _, c| if c == 0 { 3.25 } else { -1.5 });
        for factor in [2usize, 4] {
            let down = resize_flow(&f, 1, factor).unwrap();
            let up = resize_flow(&down, factor, 1).unwrap();
            assert_eq!(up.data()[0], 3.25);
            assert_eq!(up.data()[1], -1.5);
        }
    }
}
