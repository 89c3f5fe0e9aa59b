//! Event spike tensor construction, bilinear resizing and the crop used by
//! the local-global consistency term.

use rand::Rng;

use crate::error::{Error, Result};
use crate::events_io::EventStream;

/// A `(2, t_bins, height, width)` grid of non-negative event mass, stored
/// row-major with polarity outermost. Channel `p * t_bins + b` is the plane
/// for polarity `p`, time bin `b`, which is also the input channel order of
/// the reconstruction network.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTensor {
    t_bins: usize,
    height: usize,
    width: usize,
    /// Number of events the tensor was built from.
    source_events: usize,
    data: Vec<f64>,
}

impl EventTensor {
    pub fn from_parts(
        t_bins: usize,
        height: usize,
        width: usize,
        source_events: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != 2 * t_bins * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a (2, {t_bins}, {height}, {width}) tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "event tensor entries must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            t_bins,
            height,
            width,
            source_events,
            data,
        })
    }

    pub fn zeros(t_bins: usize, height: usize, width: usize) -> Self {
        Self {
            t_bins,
            height,
            width,
            source_events: 0,
            data: vec![0.0; 2 * t_bins * height * width],
        }
    }

    pub fn t_bins(&self) -> usize {
        self.t_bins
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        2 * self.t_bins
    }
    pub fn source_events(&self) -> usize {
        self.source_events
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, p: usize, bin: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(p, bin, y, x)]
    }

    fn index(&self, p: usize, bin: usize, y: usize, x: usize) -> usize {
        ((p * self.t_bins + bin) * self.height + y) * self.width + x
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Golden-test dump: five little-endian `i32` header values
    /// `(2, t_bins, height, width, n_events)` followed by `f32` entries.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        for v in [2, self.t_bins, self.height, self.width, self.source_events] {
            out.extend_from_slice(&(v as i32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::MalformedFile(
                "tensor dump shorter than its header".into(),
            ));
        }
        let header: Vec<i32> = bytes[..20]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if header[0] != 2 || header[1..].iter().any(|v| *v < 0) {
            return Err(Error::MalformedFile(format!(
                "bad tensor header {header:?}"
            )));
        }
        let (t, h, w, n) = (
            header[1] as usize,
            header[2] as usize,
            header[3] as usize,
            header[4] as usize,
        );
        let body = &bytes[20..];
        if body.len() != 4 * 2 * t * h * w {
            return Err(Error::MalformedFile(
                "tensor dump body length mismatch".into(),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::from_parts(t, h, w, n, data)
    }
}

/// Builds the event spike tensor with a triangular temporal kernel.
///
/// Each event's time is normalised to `t* = (t_bins - 1)(t - t_min)/(t_max - t_min)`
/// and deposits `max(0, 1 - |t* - b|)` into bin `b` of its polarity plane,
/// so every event contributes unit mass. When all events share one
/// timestamp, the mass goes to bin 0.
pub fn build_est(
    stream: &EventStream,
    t_bins: usize,
    height: usize,
    width: usize,
) -> Result<EventTensor> {
    if t_bins == 0 {
        return Err(Error::InvalidConfig("t_bins must be >= 1".into()));
    }
    if stream.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut tensor = EventTensor::zeros(t_bins, height, width);
    tensor.source_events = stream.len();
    let t_min = stream.t_min();
    let span = (stream.t_max() - t_min) as f64;
    let scale = if span > 0.0 {
        (t_bins - 1) as f64 / span
    } else {
        0.0
    };
    for (i, e) in stream.events().iter().enumerate() {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= width || y >= height {
            return Err(Error::OutOfBounds {
                index: i,
                x: e.x.into(),
                y: e.y.into(),
                width: width as u32,
                height: height as u32,
            });
        }
        let t_star = (e.t - t_min) as f64 * scale;
        let lower = (t_star.floor() as usize).min(t_bins - 1);
        let frac = t_star - lower as f64;
        let p = e.p.index();
        let idx = tensor.index(p, lower, y, x);
        tensor.data[idx] += 1.0 - frac;
        if frac > 0.0 && lower + 1 < t_bins {
            let idx = tensor.index(p, lower + 1, y, x);
            tensor.data[idx] += frac;
        }
    }
    Ok(tensor)
}

/// Precomputed bilinear resampling between two plane sizes using
/// half-pixel centres (`align_corners = false`), with border clamping.
#[derive(Debug, Clone)]
pub struct BilinearMap {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl BilinearMap {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_h == self.out_h && self.in_w == self.out_w
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.in_h * self.in_w);
        debug_assert_eq!(dst.len(), self.out_h * self.out_w);
        if self.is_identity() {
            dst.copy_from_slice(src);
            return;
        }
        for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
            let r0 = &src[y0 * self.in_w..(y0 + 1) * self.in_w];
            let r1 = &src[y1 * self.in_w..(y1 + 1) * self.in_w];
            for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[oy * self.out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }

    /// Transpose of [`apply`](Self::apply): accumulates output gradients
    /// back onto the input plane.
    pub fn apply_adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        if self.is_identity() {
            for (g, d) in grad_in.iter_mut().zip(grad_out) {
                *g += d;
            }
            return;
        }
        for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                let g = grad_out[oy * self.out_w + ox];
                grad_in[y0 * self.in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                grad_in[y0 * self.in_w + x1] += g * (1.0 - fy) * fx;
                grad_in[y1 * self.in_w + x0] += g * fy * (1.0 - fx);
                grad_in[y1 * self.in_w + x1] += g * fy * fx;
            }
        }
    }
}

/// Resamples each (polarity, bin) plane independently.
pub fn resize_tensor(
    tensor: &EventTensor,
    out_height: usize,
    out_width: usize,
) -> Result<EventTensor> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::InvalidConfig(
            "resize target must be at least 1x1".into(),
        ));
    }
    let map = BilinearMap::new(tensor.height, tensor.width, out_height, out_width);
    let plane_in = tensor.height * tensor.width;
    let plane_out = out_height * out_width;
    let mut data = vec![0.0; tensor.channels() * plane_out];
    for (src, dst) in tensor
        .data
        .chunks_exact(plane_in)
        .zip(data.chunks_exact_mut(plane_out))
    {
        map.apply(src, dst);
    }
    Ok(EventTensor {
        t_bins: tensor.t_bins,
        height: out_height,
        width: out_width,
        source_events: tensor.source_events,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl CropRect {
    pub fn full(size: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            size,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.size == 0 || self.top + self.size > height || self.left + self.size > width {
            return Err(Error::InvalidRect(format!(
                "{self:?} does not fit a {height}x{width} grid"
            )));
        }
        Ok(())
    }

    /// Rect of `inner` (relative to `self`) expressed in the parent frame.
    pub fn compose(&self, inner: &CropRect) -> CropRect {
        CropRect {
            top: self.top + inner.top,
            left: self.left + inner.left,
            size: inner.size,
        }
    }
}

/// Uniform placement of a square crop inside a square frame.
pub fn sample_crop_rect<R: Rng + ?Sized>(
    rng: &mut R,
    frame_size: usize,
    crop_size: usize,
) -> Result<CropRect> {
    if crop_size == 0 || crop_size > frame_size {
        return Err(Error::InvalidConfig(format!(
            "crop size {crop_size} does not fit frame size {frame_size}"
        )));
    }
    let slack = frame_size - crop_size;
    Ok(CropRect {
        top: rng.gen_range(0..=slack),
        left: rng.gen_range(0..=slack),
        size: crop_size,
    })
}

/// Sub-grid extraction over `planes` stacked `height x width` planes.
pub(crate) fn crop_planes(
    data: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    rect: &CropRect,
) -> Result<Vec<f64>> {
    rect.validate(height, width)?;
    let s = rect.size;
    let mut out = Vec::with_capacity(planes * s * s);
    for plane in data.chunks_exact(height * width).take(planes) {
        for y in rect.top..rect.top + s {
            out.extend_from_slice(&plane[y * width + rect.left..y * width + rect.left + s]);
        }
    }
    Ok(out)
}

/// Grids that support exact rectangular sub-grid extraction.
pub trait Crop: Sized {
    fn crop(&self, rect: &CropRect) -> Result<Self>;
}

impl Crop for EventTensor {
    fn crop(&self, rect: &CropRect) -> Result<Self> {
        let data = crop_planes(&self.data, self.channels(), self.height, self.width, rect)?;
        Ok(EventTensor {
            t_bins: self.t_bins,
            height: rect.size,
            width: rect.size,
            source_events: self.source_events,
            data,
        })
    }
}

pub fn crop<G: Crop>(grid: &G, rect: &CropRect) -> Result<G> {
    grid.crop(rect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events_io::{reverse_time, Event, Polarity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stream(events: &[(u16, u16, u64, u8)], w: u32, h: u32) -> EventStream {
        EventStream::new(
            events
                .iter()
                .map(|&(x, y, t, p)| Event::new(x, y, t, Polarity::from_bit(p).unwrap()))
                .collect(),
            w,
            h,
        )
        .unwrap()
    }

    #[test]
    fn single_event_goes_to_bin_zero() {
        let s = stream(&[(2, 1, 500, 1)], 4, 3);
        let t = build_est(&s, 9, 3, 4).unwrap();
        assert_eq!(t.get(1, 0, 1, 2), 1.0);
        assert_eq!(t.data().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(t.sum(), 1.0);
    }

    #[test]
    fn endpoints_map_to_integer_bins() {
        let s = stream(&[(0, 0, 0, 1), (0, 0, 100, 0)], 2, 2);
        let t = build_est(&s, 2, 2, 2).unwrap();
        assert_eq!(t.get(1, 0, 0, 0), 1.0);
        assert_eq!(t.get(0, 1, 0, 0), 1.0);
        assert_eq!(t.sum(), 2.0);
    }

    #[test]
    fn fractional_time_splits_between_bins() {
        let s = stream(&[(0, 0, 0, 0), (0, 0, 50, 0), (0, 0, 300, 0)], 1, 1);
        let t = build_est(&s, 4, 1, 1).unwrap();
        // middle event: t* = 3 * 50/300 = 0.5
        assert!((t.get(0, 0, 0, 0) - 1.5).abs() < 1e-12);
        assert!((t.get(0, 1, 0, 0) - 0.5).abs() < 1e-12);
        assert!((t.get(0, 3, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn est_rejects_out_of_frame_events() {
        let s = stream(&[(5, 0, 0, 0)], 8, 8);
        assert!(matches!(
            build_est(&s, 3, 4, 4),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(matches!(
            build_est(&s, 0, 8, 8),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn double_reverse_est_is_identical() {
        let s = stream(
            &[(0, 1, 10, 1), (1, 1, 13, 0), (1, 0, 40, 1), (0, 0, 41, 0)],
            2,
            2,
        );
        let rr = reverse_time(&reverse_time(&s));
        assert_eq!(
            build_est(&s, 5, 2, 2).unwrap(),
            build_est(&rr, 5, 2, 2).unwrap()
        );
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let s = stream(&[(0, 1, 10, 1), (3, 2, 13, 0), (1, 0, 40, 1)], 4, 3);
        let t = build_est(&s, 3, 3, 4).unwrap();
        assert_eq!(resize_tensor(&t, 3, 4).unwrap(), t);
    }

    #[test]
    fn resize_preserves_constants() {
        let t = EventTensor::from_parts(1, 3, 5, 0, vec![0.75; 30]).unwrap();
        for (h, w) in [(7, 2), (1, 1), (12, 13)] {
            let r = resize_tensor(&t, h, w).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.75).abs() < 1e-12));
        }
    }

    /// Reference bilinear sampling written independently of `BilinearMap`.
    fn reference_sample(
        plane: &[f64],
        h: usize,
        w: usize,
        oy: usize,
        ox: usize,
        oh: usize,
        ow: usize,
    ) -> f64 {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let wy = (1.0 - (sy - y as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - x as f64).abs()).max(0.0);
                acc += wy * wx * plane[y * w + x];
            }
        }
        acc
    }

    #[test]
    fn delta_upscale_matches_reference() {
        let mut plane = vec![0.0; 16];
        plane[5] = 1.0; // (1, 1)
        let t =
            EventTensor::from_parts(1, 4, 4, 1, [plane.clone(), vec![0.0; 16]].concat()).unwrap();
        let r = resize_tensor(&t, 8, 8).unwrap();
        for oy in 0..8 {
            for ox in 0..8 {
                let expected = reference_sample(&plane, 4, 4, oy, ox, 8, 8);
                let got = r.get(0, 0, oy, ox);
                assert!(
                    (got - expected).abs() < 1e-12,
                    "({oy},{ox}) {got} vs {expected}"
                );
                if got != 0.0 {
                    // support stays inside the neighbourhood of the mapped 2x2 block
                    assert!((1..=4).contains(&oy) && (1..=4).contains(&ox));
                }
            }
        }
    }

    #[test]
    fn adjoint_matches_dot_product_identity() {
        let map = BilinearMap::new(5, 3, 7, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..15).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..56).map(|_| rng.gen::<f64>()).collect();
        let mut ma = vec![0.0; 56];
        map.apply(&a, &mut ma);
        let mut mtb = vec![0.0; 15];
        map.apply_adjoint(&b, &mut mtb);
        let lhs: f64 = ma.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&mtb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn crop_rect_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_crop_rect(&mut rng, 24, 24).unwrap(),
            CropRect::full(24)
        );
        assert!(sample_crop_rect(&mut rng, 12, 13).is_err());

        let a = sample_crop_rect(&mut ChaCha8Rng::seed_from_u64(9), 224, 128).unwrap();
        let b = sample_crop_rect(&mut ChaCha8Rng::seed_from_u64(9), 224, 128).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_rect_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| sample_crop_rect(&mut rng, 224, 128).unwrap().top as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 48.0).abs() < 3.0, "mean top {mean}");
    }

    #[test]
    fn crop_identity_zero_and_composition() {
        let data: Vec<f64> = (0..2 * 2 * 6 * 6).map(|v| v as f64).collect();
        let t = EventTensor::from_parts(2, 6, 6, 0, data).unwrap();
        assert_eq!(crop(&t, &CropRect::full(6)).unwrap(), t);

        let z = EventTensor::zeros(2, 6, 6);
        let zc = crop(
            &z,
            &CropRect {
                top: 1,
                left: 2,
                size: 3,
            },
        )
        .unwrap();
        assert_eq!(zc.data().len(), 2 * 2 * 9);
        assert!(zc.data().iter().all(|v| *v == 0.0));

        let outer = CropRect {
            top: 1,
            left: 1,
            size: 4,
        };
        let inner = CropRect {
            top: 2,
            left: 1,
            size: 2,
        };
        let nested = crop(&crop(&t, &outer).unwrap(), &inner).unwrap();
        assert_eq!(nested, crop(&t, &outer.compose(&inner)).unwrap());

        assert!(matches!(
            crop(
                &t,
                &CropRect {
                    top: 4,
                    left: 0,
                    size: 3
                }
            ),
            Err(Error::InvalidRect(_))
        ));
    }

    #[test]
    fn dump_roundtrip() {
        let s = stream(&[(0, 1, 10, 1), (3, 2, 13, 0)], 4, 3);
        let t = build_est(&s, 3, 3, 4).unwrap();
        let bytes = t.to_dump_bytes();
        assert_eq!(&bytes[..4], &2i32.to_le_bytes());
        assert_eq!(EventTensor::from_dump_bytes(&bytes).unwrap(), t);
    }
}
