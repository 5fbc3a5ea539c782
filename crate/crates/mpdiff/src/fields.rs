//! Grid-valued 2D fields and the pooling / interpolation / warping / masking
//! primitives the rest of the crate is built on.
//!
//! Fields are stored row-major with `y` as the row index: `data[y * width + x]`.
//! All operations are pure functions; values are finite after construction and
//! after every operation here.

use crate::error::{Error, Result};

/// A `width × height` grid of scalar samples with a physical extent per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
    extent: (f64, f64),
}

impl Field2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::RejectedInput("field dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::RejectedInput(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("field contains non-finite samples".into()));
        }
        Ok(Self { width, height, data, extent: (1.0, 1.0) })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height], extent: (1.0, 1.0) }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height], extent: (1.0, 1.0) }
    }

    /// Builds a field by evaluating `f(x, y)` at each cell index.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data, extent: (1.0, 1.0) }
    }

    pub fn with_extent(mut self, ex: f64, ey: f64) -> Self {
        self.extent = (ex, ey);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn extent(&self) -> (f64, f64) {
        self.extent
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn same_shape(&self, other: &Field2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Field2D) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns `self + scale * other` cell-wise.
    pub fn add_scaled(&self, other: &Field2D, scale: f64) -> Field2D {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect();
        Field2D { width: self.width, height: self.height, data, extent: self.extent }
    }

    pub fn scaled(&self, scale: f64) -> Field2D {
        let data = self.data.iter().map(|a| a * scale).collect();
        Field2D { width: self.width, height: self.height, data, extent: self.extent }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Field2D {
        let data = self.data.iter().map(|a| f(*a)).collect();
        Field2D { width: self.width, height: self.height, data, extent: self.extent }
    }
}

/// Two scalar components of a planar velocity, in grid cells per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField2D {
    pub vx: Field2D,
    pub vy: Field2D,
}

impl VelocityField2D {
    pub fn new(vx: Field2D, vy: Field2D) -> Result<Self> {
        if !vx.same_shape(&vy) {
            return Err(Error::RejectedInput("velocity components must share dimensions".into()));
        }
        Ok(Self { vx, vy })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { vx: Field2D::zeros(width, height), vy: Field2D::zeros(width, height) }
    }

    pub fn width(&self) -> usize {
        self.vx.width()
    }

    pub fn height(&self) -> usize {
        self.vx.height()
    }

    /// Scalar vorticity dv_y/dx - dv_x/dy by central differences, one-sided at
    /// the boundary.
    pub fn curl(&self) -> Field2D {
        let (w, h) = (self.width(), self.height());
        Field2D::from_fn(w, h, |x, y| {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let dvy_dx = (self.vy.get(xp, y) - self.vy.get(xm, y)) / (xp - xm).max(1) as f64;
            let dvx_dy = (self.vx.get(x, yp) - self.vx.get(x, ym)) / (yp - ym).max(1) as f64;
            dvy_dx - dvx_dy
        })
    }
}

/// Binary cell membership; dimensions must match the field it projects.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask2D {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::RejectedInput("mask length does not match dimensions".into()));
        }
        if data.iter().any(|&m| m > 1) {
            return Err(Error::RejectedInput("mask membership must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![1; width * height] }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn complement(&self) -> Mask2D {
        Mask2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|m| 1 - m).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m == 1).count()
    }
}

/// Mean over non-overlapping k×k patches. `k` must divide both dimensions.
pub fn avg_pool(f: &Field2D, k: usize) -> Result<Field2D> {
    if k == 0 || !f.width.is_multiple_of(k) || !f.height.is_multiple_of(k) {
        return Err(Error::RejectedInput(format!(
            "pool factor {} does not divide {}x{}",
            k, f.width, f.height
        )));
    }
    let (ow, oh) = (f.width / k, f.height / k);
    let inv = 1.0 / (k * k) as f64;
    Ok(Field2D::from_fn(ow, oh, |cx, cy| {
        let mut acc = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                acc += f.get(cx * k + dx, cy * k + dy);
            }
        }
        acc * inv
    })
    .with_extent(f.extent.0, f.extent.1))
}

/// Adjoint of [`avg_pool`]: spreads each coarse value over its k×k patch,
/// divided by k², so that ⟨avg_pool(f), g⟩ = ⟨f, avg_pool_adjoint(g)⟩.
pub fn avg_pool_adjoint(g: &Field2D, k: usize) -> Field2D {
    let (ow, oh) = (g.width * k, g.height * k);
    let inv = 1.0 / (k * k) as f64;
    Field2D::from_fn(ow, oh, |x, y| g.get(x / k, y / k) * inv)
        .with_extent(g.extent.0, g.extent.1)
}

/// Bilinear blend of the four grid values surrounding `(x, y)` in cell
/// coordinates. Out-of-range coordinates clamp to the boundary cell.
pub fn bilinear_sample(f: &Field2D, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (f.width - 1) as f64);
    let y = y.clamp(0.0, (f.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(f.width - 1);
    let y1 = (y0 + 1).min(f.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = f.get(x0, y0) * (1.0 - fx) + f.get(x1, y0) * fx;
    let bot = f.get(x0, y1) * (1.0 - fx) + f.get(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Semi-Lagrangian warp: each output cell back-traces along the velocity and
/// bilinearly samples the previous frame.
///
/// `out(x, y) = sample(f_prev, x - vx(x,y)·Δs, y - vy(x,y)·Δs)`
pub fn warp(f_prev: &Field2D, v: &VelocityField2D, delta_s: f64) -> Result<Field2D> {
    if v.width() != f_prev.width || v.height() != f_prev.height {
        return Err(Error::RejectedInput("velocity dimensions must match field".into()));
    }
    Ok(Field2D::from_fn(f_prev.width, f_prev.height, |x, y| {
        let sx = x as f64 - v.vx.get(x, y) * delta_s;
        let sy = y as f64 - v.vy.get(x, y) * delta_s;
        bilinear_sample(f_prev, sx, sy)
    })
    .with_extent(f_prev.extent.0, f_prev.extent.1))
}

/// Keeps cell values where the mask is set, zeroes them elsewhere.
pub fn mask_project(f: &Field2D, m: &Mask2D) -> Result<Field2D> {
    if m.width() != f.width || m.height() != f.height {
        return Err(Error::RejectedInput("mask dimensions must match field".into()));
    }
    Ok(Field2D::from_fn(f.width, f.height, |x, y| if m.get(x, y) { f.get(x, y) } else { 0.0 })
        .with_extent(f.extent.0, f.extent.1))
}

/// Bilinear resampling onto a `new_w × new_h` grid using the cell-center
/// convention; resizing to the same shape reproduces the input.
pub fn resize_bilinear(f: &Field2D, new_w: usize, new_h: usize) -> Result<Field2D> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::RejectedInput("resize target must be at least 1x1".into()));
    }
    let sx = f.width as f64 / new_w as f64;
    let sy = f.height as f64 / new_h as f64;
    Ok(Field2D::from_fn(new_w, new_h, |x, y| {
        let src_x = (x as f64 + 0.5) * sx - 0.5;
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        bilinear_sample(f, src_x, src_y)
    })
    .with_extent(f.extent.0, f.extent.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Field2D {
        Field2D::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn avg_pool_two_by_two() {
        let f = Field2D::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = avg_pool(&f, 2).unwrap();
        assert_eq!(p.data(), &[2.5]);
    }

    #[test]
    fn avg_pool_constant_stays_constant() {
        let f = Field2D::constant(4, 4, 0.7);
        for k in [1, 2, 4] {
            let p = avg_pool(&f, k).unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn avg_pool_matches_bruteforce_patch_sums() {
        // 4x4 ramp, k=2: oracle sums each patch with an explicit loop.
        let f = Field2D::from_fn(4, 4, |x, y| (y * 4 + x) as f64);
        let p = avg_pool(&f, 2).unwrap();
        for cy in 0..2 {
            for cx in 0..2 {
                let mut sum = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        sum += f.get(cx * 2 + dx, cy * 2 + dy);
                    }
                }
                assert!((p.get(cx, cy) - sum / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avg_pool_rejects_non_divisible() {
        let f = Field2D::zeros(3, 4);
        assert!(matches!(avg_pool(&f, 2), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn adjoint_spreads_uniformly() {
        let g = Field2D::new(1, 1, vec![4.0]).unwrap();
        let a = avg_pool_adjoint(&g, 2);
        assert_eq!(a.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let a = avg_pool_adjoint(&Field2D::zeros(2, 2), 3);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_identity_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let f = random_field(&mut rng, 4, 4);
            let g = random_field(&mut rng, 2, 2);
            let lhs = avg_pool(&f, 2).unwrap().dot(&g);
            let rhs = f.dot(&avg_pool_adjoint(&g, 2));
            assert!((lhs - rhs).abs() <= 1e-12 + 1e-10 * f.l2_norm() * g.l2_norm());
        }
    }

    #[test]
    fn bilinear_exact_on_grid_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, 5, 4);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(bilinear_sample(&f, x as f64, y as f64), f.get(x, y));
            }
        }
    }

    #[test]
    fn bilinear_midpoint_is_mean_of_neighbors() {
        let f = Field2D::new(2, 1, vec![3.0, 5.0]).unwrap();
        assert!((bilinear_sample(&f, 0.5, 0.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_matches_hand_expanded_weights() {
        // (x, y) = (0.25, 0.75) in a 2x2 field [[a,b],[c,d]]: the four-term
        // weighted sum with fx = 0.25, fy = 0.75.
        let (a, b, c, d) = (0.3, -1.2, 2.5, 0.9);
        let f = Field2D::new(2, 2, vec![a, b, c, d]).unwrap();
        let (fx, fy) = (0.25, 0.75);
        let expect = (1.0 - fy) * (1.0 - fx) * a
            + (1.0 - fy) * fx * b
            + fy * (1.0 - fx) * c
            + fy * fx * d;
        assert!((bilinear_sample(&f, 0.25, 0.75) - expect).abs() < 1e-12);
    }

    #[test]
    fn bilinear_is_linear_in_the_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&mut rng, 6, 6);
        let g = random_field(&mut rng, 6, 6);
        for _ in 0..50 {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let x = rng.gen_range(-1.0..6.5);
            let y = rng.gen_range(-1.0..6.5);
            let combo = f.scaled(a).add_scaled(&g, b);
            let lhs = bilinear_sample(&combo, x, y);
            let rhs = a * bilinear_sample(&f, x, y) + b * bilinear_sample(&g, x, y);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_zero_velocity_is_identity_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(&mut rng, 8, 8);
        let v = VelocityField2D::zeros(8, 8);
        let out = warp(&f, &v, 1.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.get(x, y).to_bits(), f.get(x, y).to_bits());
            }
        }
    }

    #[test]
    fn warp_unit_velocity_shifts_right() {
        let f = Field2D::from_fn(4, 1, |x, _| x as f64 + 1.0);
        let v = VelocityField2D::new(Field2D::constant(4, 1, 1.0), Field2D::zeros(4, 1)).unwrap();
        let out = warp(&f, &v, 1.0).unwrap();
        // boundary column clamps to the first source cell
        assert_eq!(out.data(), &[1.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn warp_half_velocity_averages_neighbors() {
        let f = Field2D::from_fn(5, 1, |x, _| (x as f64).powi(2));
        let v = VelocityField2D::new(Field2D::constant(5, 1, 0.5), Field2D::zeros(5, 1)).unwrap();
        let out = warp(&f, &v, 1.0).unwrap();
        for x in 1..5 {
            let expect = 0.5 * (f.get(x, 0) + f.get(x - 1, 0));
            assert!((out.get(x, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_project_identity_zero_checkerboard() {
        let f = Field2D::constant(4, 4, 2.0);
        let ones = Mask2D::full(4, 4);
        let zeros = Mask2D::empty(4, 4);
        let checker = Mask2D::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        assert_eq!(mask_project(&f, &ones).unwrap(), f);
        assert!(mask_project(&f, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let proj = mask_project(&f, &checker).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (x + y) % 2 == 0 { 2.0 } else { 0.0 };
                assert_eq!(proj.get(x, y), expect);
            }
        }
    }

    #[test]
    fn mask_project_rejects_mismatched_shapes() {
        let f = Field2D::zeros(4, 4);
        let m = Mask2D::full(3, 4);
        assert!(matches!(mask_project(&f, &m), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn resize_same_shape_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_field(&mut rng, 7, 5);
        let r = resize_bilinear(&f, 7, 5).unwrap();
        for (a, b) in f.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_constant_any_size() {
        let f = Field2D::constant(4, 4, -0.3);
        for (w, h) in [(1, 1), (3, 5), (8, 8), (9, 2)] {
            let r = resize_bilinear(&f, w, h).unwrap();
            assert!(r.data().iter().all(|&v| (v + 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_two_to_four_matches_weight_table() {
        // Corner pattern; destination centers map to source coords
        // (x+0.5)/2 - 0.5 ∈ {-0.25, 0.25, 0.75, 1.25}, clamped to [0, 1].
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let f = Field2D::new(2, 2, vec![a, b, c, d]).unwrap();
        let r = resize_bilinear(&f, 4, 4).unwrap();
        let coords = [0.0_f64, 0.25, 0.75, 1.0];
        for (yi, &wy) in coords.iter().enumerate() {
            for (xi, &wx) in coords.iter().enumerate() {
                let expect = (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * c + wx * d);
                assert!(
                    (r.get(xi, yi) - expect).abs() < 1e-12,
                    "cell ({xi},{yi}): {} vs {}",
                    r.get(xi, yi),
                    expect
                );
            }
        }
    }

    proptest! {
        #[test]
        fn mask_project_is_idempotent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, 6, 6);
            let m = Mask2D::from_fn(6, 6, |_, _| rng.gen_bool(0.5));
            let once = mask_project(&f, &m).unwrap();
            let twice = mask_project(&once, &m).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn pool_adjoint_adjointness_random_shapes(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = *[1usize, 2, 4].iter().nth(rng.gen_range(0..3)).unwrap();
            let (cw, ch) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
            let f = random_field(&mut rng, cw * k, ch * k);
            let g = random_field(&mut rng, cw, ch);
            let lhs = avg_pool(&f, k).unwrap().dot(&g);
            let rhs = f.dot(&avg_pool_adjoint(&g, k));
            prop_assert!((lhs - rhs).abs() <= 1e-12 + 1e-10 * f.l2_norm() * g.l2_norm());
        }
    }
}
