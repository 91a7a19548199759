//! Tri-plane representation, orbit cameras and emission-absorption volume
//! rendering.
//!
//! Plane convention: `f_ab` has rows indexed by world axis `a` and columns
//! by `b`, so the three planes are `f_xy` (rows x, cols y), `f_yz` (rows y,
//! cols z) and `f_zx` (rows z, cols x), all spanning `[-1, 1]²`.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{kernels, linear, Graph, Precision, Tensor, Var};
use crate::image_io::Image;

/// Half-extent of the ray interval around the look-at distance.
pub const NEAR_FAR_MARGIN: f64 = 1.2;
pub const DEFAULT_SAMPLES: usize = 48;
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RenderError {
    #[error("sample depths must be strictly increasing along every ray (ray {ray})")]
    NonIncreasingDepths { ray: usize },
    #[error("invalid camera: {0}")]
    InvalidPose(String),
    #[error("plane shapes differ: {0:?}")]
    PlaneMismatch(Vec<Vec<usize>>),
}

/// Orbit camera looking at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov: f64,
    pub image_size: usize,
}

impl CameraPose {
    pub const DEFAULT_RADIUS: f64 = 2.7;
    pub const DEFAULT_FOV: f64 = 36.0 * PI / 180.0;

    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, image_size: usize) -> Self {
        CameraPose {
            azimuth: azimuth_deg.to_radians(),
            elevation: elevation_deg.to_radians(),
            radius: Self::DEFAULT_RADIUS,
            fov: Self::DEFAULT_FOV,
            image_size,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.radius > 0.0) {
            return Err(RenderError::InvalidPose("radius must be positive".into()));
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(RenderError::InvalidPose("fov must lie in (0, pi)".into()));
        }
        if self.image_size == 0 {
            return Err(RenderError::InvalidPose("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        [
            self.radius * ce * self.azimuth.sin(),
            self.radius * se,
            self.radius * ce * self.azimuth.cos(),
        ]
    }

    /// Camera basis `(right, up, forward)`.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let c = self.position();
        let fwd = normalize([-c[0], -c[1], -c[2]]);
        let right = normalize(cross(fwd, [0.0, 1.0, 0.0]));
        let up = cross(right, fwd);
        (right, up, fwd)
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// How sample depths are placed inside their strata.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stratification {
    /// Bin midpoints; fully deterministic.
    Midpoint,
    /// One uniform draw per bin from the given seed.
    Jittered(u64),
}

/// Per-pixel rays with their sample depths and world positions.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub width: usize,
    pub height: usize,
    pub samples: usize,
    pub origins: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    /// `[R, S]`
    pub depths: Vec<f64>,
    /// `[R, S]`, bin widths; they sum to the ray length.
    pub deltas: Vec<f64>,
    /// `[R * S, 3]`
    pub positions: Vec<f64>,
    /// 1 inside the `[-1, 1]³` cube, 0 outside; outside samples carry no density.
    pub inside: Vec<f64>,
}

impl RaySamples {
    pub fn num_rays(&self) -> usize {
        self.origins.len()
    }

    pub fn check_depths(&self) -> Result<(), RenderError> {
        for (ray, d) in self.depths.chunks(self.samples).enumerate() {
            if d.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(RenderError::NonIncreasingDepths { ray });
            }
        }
        Ok(())
    }

    /// Plane lookup coordinates `[N, 2]` (column, row) for the three planes.
    pub fn plane_coords(&self) -> [Tensor; 3] {
        plane_coords(&self.positions)
    }
}

/// Lookup coordinates on `(f_xy, f_yz, f_zx)` for world points `[N, 3]`.
pub fn plane_coords(positions: &[f64]) -> [Tensor; 3] {
    let n = positions.len() / 3;
    let mut xy = Vec::with_capacity(2 * n);
    let mut yz = Vec::with_capacity(2 * n);
    let mut zx = Vec::with_capacity(2 * n);
    for p in positions.chunks(3) {
        let (x, y, z) = (p[0], p[1], p[2]);
        xy.extend([y, x]);
        yz.extend([z, y]);
        zx.extend([x, z]);
    }
    [
        Tensor::new(&[n, 2], xy),
        Tensor::new(&[n, 2], yz),
        Tensor::new(&[n, 2], zx),
    ]
}

/// One ray per pixel through a pinhole at the camera position, with `samples`
/// stratified depths on `[radius - 1.2, radius + 1.2]`.
pub fn camera_rays(
    pose: &CameraPose,
    samples: usize,
    strat: Stratification,
) -> Result<RaySamples, RenderError> {
    pose.validate()?;
    assert!(samples >= 2, "at least two samples per ray");
    let n = pose.image_size;
    let (right, up, fwd) = pose.basis();
    let origin = pose.position();
    let half = (pose.fov / 2.0).tan();
    let near = (pose.radius - NEAR_FAR_MARGIN).max(1e-3);
    let far = pose.radius + NEAR_FAR_MARGIN;
    let bin = (far - near) / samples as f64;
    let mut jitter_rng = match strat {
        Stratification::Jittered(seed) => Some(crate::rng::stream(seed, 0)),
        Stratification::Midpoint => None,
    };

    let rays = n * n;
    let mut out = RaySamples {
        width: n,
        height: n,
        samples,
        origins: Vec::with_capacity(rays),
        directions: Vec::with_capacity(rays),
        depths: Vec::with_capacity(rays * samples),
        deltas: vec![bin; rays * samples],
        positions: Vec::with_capacity(rays * samples * 3),
        inside: Vec::with_capacity(rays * samples),
    };
    for row in 0..n {
        for col in 0..n {
            let sx = ((col as f64 + 0.5) / n as f64 * 2.0 - 1.0) * half;
            let sy = -((row as f64 + 0.5) / n as f64 * 2.0 - 1.0) * half;
            let d = normalize([
                fwd[0] + sx * right[0] + sy * up[0],
                fwd[1] + sx * right[1] + sy * up[1],
                fwd[2] + sx * right[2] + sy * up[2],
            ]);
            out.origins.push(origin);
            out.directions.push(d);
            for i in 0..samples {
                let u = match jitter_rng.as_mut() {
                    Some(r) => r.random_range(0.02..0.98),
                    None => 0.5,
                };
                let t = near + (i as f64 + u) * bin;
                out.depths.push(t);
                let p = [origin[0] + t * d[0], origin[1] + t * d[1], origin[2] + t * d[2]];
                let inside = p.iter().all(|v| v.abs() <= 1.0);
                out.inside.push(if inside { 1.0 } else { 0.0 });
                out.positions.extend(p);
            }
        }
    }
    Ok(out)
}

/// Decoder weights on a graph: `C -> hidden -> (density, r, g, b)`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Decoder weights as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Decoder {
    pub fn random<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Decoder {
            w1: Tensor::randn(&[channels, hidden], 1.0 / (channels as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, 4], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[4]),
        }
    }

    pub fn bind(&self, g: &Graph) -> DecoderVars {
        DecoderVars {
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        }
    }
}

/// Three feature planes plus the decoder that turns features into radiance.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    pub planes: [Tensor; 3],
    pub decoder: Decoder,
}

impl TriPlane {
    pub fn new(planes: [Tensor; 3], decoder: Decoder) -> Result<Self, RenderError> {
        check_planes(planes.iter().map(|p| p.shape().to_vec()).collect())?;
        Ok(TriPlane { planes, decoder })
    }

    pub fn channels(&self) -> usize {
        self.planes[0].shape()[2]
    }

    pub fn bind(&self, g: &Graph) -> ([Var; 3], DecoderVars) {
        let planes = [
            g.constant(self.planes[0].clone()),
            g.constant(self.planes[1].clone()),
            g.constant(self.planes[2].clone()),
        ];
        (planes, self.decoder.bind(g))
    }

    /// Aggregated feature at a single world point.
    pub fn sample_point(&self, p: [f64; 3]) -> Vec<f64> {
        let g = Graph::new(Precision::F64);
        let (planes, _) = self.bind(&g);
        let f = sample_points(&g, &planes, &[p[0], p[1], p[2]]);
        let v = g.value(f).data().to_vec();
        v
    }

    /// Forward render on a fresh graph.
    pub fn render(&self, pose: &CameraPose, opts: &RenderOptions) -> Result<Rendered, RenderError> {
        let g = Graph::new(opts.precision);
        let (planes, dec) = self.bind(&g);
        let rays = camera_rays(pose, opts.samples, opts.stratification)?;
        let out = volume_render(&g, &planes, &dec, &rays, opts.background)?;
        let image = var_to_image(&g, out.image, rays.width, rays.height);
        Ok(Rendered {
            image,
            transmittance: out.transmittance,
        })
    }
}

fn check_planes(shapes: Vec<Vec<usize>>) -> Result<(), RenderError> {
    let ok = shapes.len() == 3
        && shapes.iter().all(|s| s.len() == 3 && s == &shapes[0])
        && shapes[0][0] == shapes[0][1];
    if ok {
        Ok(())
    } else {
        Err(RenderError::PlaneMismatch(shapes))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub samples: usize,
    pub stratification: Stratification,
    pub background: [f64; 3],
    pub precision: Precision,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            samples: DEFAULT_SAMPLES,
            stratification: Stratification::Midpoint,
            background: WHITE,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub transmittance: Vec<f64>,
}

/// Graph-side render result: `image` is `[H, W, 3]`.
#[derive(Clone, Debug)]
pub struct RenderVars {
    pub image: Var,
    pub transmittance: Vec<f64>,
}

/// Mean of the three bilinear plane lookups for world points `[N, 3]`.
pub fn sample_points(g: &Graph, planes: &[Var; 3], positions: &[f64]) -> Var {
    let coords = plane_coords(positions);
    sample_with_coords(g, planes, coords)
}

fn sample_with_coords(g: &Graph, planes: &[Var; 3], coords: [Tensor; 3]) -> Var {
    let [cxy, cyz, czx] = coords;
    let fxy = g.bilinear_sample(planes[0], g.constant(cxy));
    let fyz = g.bilinear_sample(planes[1], g.constant(cyz));
    let fzx = g.bilinear_sample(planes[2], g.constant(czx));
    let s = g.add(fxy, fyz);
    let s = g.add(s, fzx);
    g.mul_scalar(s, 1.0 / 3.0)
}

/// Decoder forward on features `[N, C]`: `(sigma [N, 1], rgb [N, 3])`,
/// softplus density and logistic color.
pub fn decode(g: &Graph, dec: &DecoderVars, feats: Var) -> (Var, Var) {
    let h = linear(g, feats, dec.w1, dec.b1);
    let h = g.softplus(h);
    let o = linear(g, h, dec.w2, dec.b2);
    let sigma = g.softplus(g.slice(o, 1, 0, 1));
    let rgb = g.sigmoid(g.slice(o, 1, 1, 3));
    (sigma, rgb)
}

/// Composite `sigma: [R, S]` and `rgb: [R, S, 3]` along the rays.
pub fn composite_rays(
    g: &Graph,
    sigma: Var,
    rgb: Var,
    rays: &RaySamples,
    background: [f64; 3],
) -> Result<RenderVars, RenderError> {
    rays.check_depths()?;
    let deltas = Rc::new(rays.deltas.clone());
    let pixels = g.composite(sigma, rgb, deltas, background);
    let image = g.reshape(pixels, &[rays.height, rays.width, 3]);
    let transmittance = kernels::final_transmittance(g.value(sigma).data(), &rays.deltas, rays.samples);
    Ok(RenderVars {
        image,
        transmittance,
    })
}

/// Full differentiable render of a tri-plane along prepared rays.
pub fn volume_render(
    g: &Graph,
    planes: &[Var; 3],
    dec: &DecoderVars,
    rays: &RaySamples,
    background: [f64; 3],
) -> Result<RenderVars, RenderError> {
    check_planes(planes.iter().map(|p| g.shape(*p)).collect())?;
    rays.check_depths()?;
    let (r, s) = (rays.num_rays(), rays.samples);
    let feats = sample_with_coords(g, planes, rays.plane_coords());
    let (sigma, rgb) = decode(g, dec, feats);
    let mask = g.constant(Tensor::new(&[r * s, 1], rays.inside.clone()));
    let sigma = g.mul(sigma, mask);
    let sigma = g.reshape(sigma, &[r, s]);
    let rgb = g.reshape(rgb, &[r, s, 3]);
    composite_rays(g, sigma, rgb, rays, background)
}

pub fn var_to_image(g: &Graph, v: Var, width: usize, height: usize) -> Image {
    Image::new(width, height, g.value(v).data().to_vec())
}

/// Compositing weights and final transmittance of a single ray.
pub fn ray_weights(sigma: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut w = Vec::with_capacity(sigma.len());
    for (s, d) in sigma.iter().zip(deltas) {
        let e = (-s * d).exp();
        w.push(t * (1.0 - e));
        t *= e;
    }
    (w, t)
}

/// Non-differentiable render of an analytic radiance field
/// `point -> (density, rgb)` with the same rays and compositing.
pub fn render_field(
    field: &dyn Fn([f64; 3]) -> (f64, [f64; 3]),
    pose: &CameraPose,
    samples: usize,
    background: [f64; 3],
) -> Result<Rendered, RenderError> {
    let rays = camera_rays(pose, samples, Stratification::Midpoint)?;
    let n = rays.num_rays() * samples;
    let mut sigma = vec![0.0; n];
    let mut rgb = vec![0.0; n * 3];
    for i in 0..n {
        let p = &rays.positions[3 * i..3 * i + 3];
        let (s, c) = field([p[0], p[1], p[2]]);
        sigma[i] = s * rays.inside[i];
        rgb[3 * i..3 * i + 3].copy_from_slice(&c);
    }
    let data = kernels::composite(&sigma, &rgb, &rays.deltas, background, samples);
    let transmittance = kernels::final_transmittance(&sigma, &rays.deltas, samples);
    Ok(Rendered {
        image: Image::new(rays.width, rays.height, data),
        transmittance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[test]
    fn frontal_center_pixel_looks_down_minus_z() {
        let pose = CameraPose::orbit(0.0, 0.0, 5);
        let rays = camera_rays(&pose, 4, Stratification::Midpoint).unwrap();
        let d = rays.directions[2 * 5 + 2];
        assert!((d[0]).abs() < 1e-12 && (d[1]).abs() < 1e-12 && (d[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_azimuths_mirror_across_x0() {
        let a = camera_rays(&CameraPose::orbit(15.0, 10.0, 6), 3, Stratification::Midpoint).unwrap();
        let b = camera_rays(&CameraPose::orbit(-15.0, 10.0, 6), 3, Stratification::Midpoint).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                let da = a.directions[row * 6 + col];
                let db = b.directions[row * 6 + (5 - col)];
                assert!((da[0] + db[0]).abs() < 1e-12);
                assert!((da[1] - db[1]).abs() < 1e-12);
                assert!((da[2] - db[2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corner_direction_matches_pinhole_formula() {
        let pose = CameraPose::orbit(0.0, 0.0, 8);
        let rays = camera_rays(&pose, 2, Stratification::Midpoint).unwrap();
        let half = (pose.fov / 2.0).tan();
        // top-left pixel center
        let sx = (0.5 / 8.0 * 2.0 - 1.0) * half;
        let sy = -(0.5 / 8.0 * 2.0 - 1.0) * half;
        let n = (sx * sx + sy * sy + 1.0).sqrt();
        let expect = [sx / n, sy / n, -1.0 / n];
        let d = rays.directions[0];
        for k in 0..3 {
            assert!((d[k] - expect[k]).abs() < 1e-6);
        }
        assert!((dot(d, d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depths_strictly_increase_even_when_jittered() {
        let rays = camera_rays(&CameraPose::orbit(5.0, 10.0, 4), 16, Stratification::Jittered(3)).unwrap();
        rays.check_depths().unwrap();
        let again = camera_rays(&CameraPose::orbit(5.0, 10.0, 4), 16, Stratification::Jittered(3)).unwrap();
        assert_eq!(rays.depths, again.depths);
    }

    #[test]
    fn invalid_pose_rejected() {
        let mut p = CameraPose::orbit(0.0, 0.0, 4);
        p.fov = PI;
        assert!(camera_rays(&p, 4, Stratification::Midpoint).is_err());
        p.fov = 1.0;
        p.radius = 0.0;
        assert!(camera_rays(&p, 4, Stratification::Midpoint).is_err());
    }

    fn constant_planes(vals: [f64; 3], c: usize) -> [Tensor; 3] {
        [
            Tensor::full(&[4, 4, c], vals[0]),
            Tensor::full(&[4, 4, c], vals[1]),
            Tensor::full(&[4, 4, c], vals[2]),
        ]
    }

    #[test]
    fn sample_point_aggregates_by_mean() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::random(2, 4, &mut r);
        let tp = TriPlane::new(constant_planes([0.7, 0.7, 0.7], 2), dec.clone()).unwrap();
        for v in tp.sample_point([0.1, -0.3, 0.5]) {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let tp = TriPlane::new(constant_planes([1.0, 2.0, 4.5], 2), dec).unwrap();
        let f = tp.sample_point([0.9, 0.2, -0.4]);
        assert!((f[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn sample_point_matches_three_lookups() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let planes = [
            Tensor::randn(&[5, 5, 3], 1.0, &mut r),
            Tensor::randn(&[5, 5, 3], 1.0, &mut r),
            Tensor::randn(&[5, 5, 3], 1.0, &mut r),
        ];
        let tp = TriPlane::new(planes.clone(), Decoder::random(3, 4, &mut r)).unwrap();
        let p = [0.37, -0.61, 0.18];
        // oracle: direct kernel lookups with (col, row) coordinates
        let lookup = |plane: &Tensor, col: f64, row: f64| {
            kernels::bilinear(plane.data(), 5, 5, 3, &[col, row])
        };
        let a = lookup(&planes[0], p[1], p[0]);
        let b = lookup(&planes[1], p[2], p[1]);
        let c = lookup(&planes[2], p[0], p[2]);
        let f = tp.sample_point(p);
        for k in 0..3 {
            assert!((f[k] - (a[k] + b[k] + c[k]) / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_planes_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let planes = [Tensor::zeros(&[4, 4, 2]), Tensor::zeros(&[4, 4, 3]), Tensor::zeros(&[4, 4, 2])];
        assert!(TriPlane::new(planes, Decoder::random(2, 4, &mut r)).is_err());
    }

    fn empty_decoder(c: usize) -> Decoder {
        let mut b2 = Tensor::zeros(&[4]);
        b2.data_mut()[0] = -60.0;
        Decoder {
            w1: Tensor::zeros(&[c, 2]),
            b1: Tensor::zeros(&[2]),
            w2: Tensor::zeros(&[2, 4]),
            b2,
        }
    }

    #[test]
    fn empty_triplane_renders_background() {
        let tp = TriPlane::new(constant_planes([0.3, 0.1, 0.2], 2), empty_decoder(2)).unwrap();
        let opts = RenderOptions {
            precision: Precision::F64,
            ..Default::default()
        };
        let out = tp.render(&CameraPose::orbit(0.0, 10.0, 8), &opts).unwrap();
        assert!(out.image.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(out.transmittance.iter().all(|t| (t - 1.0).abs() < 1e-12));
    }

    #[test]
    fn homogeneous_slab_transmittance() {
        let sigma = 0.8;
        let pose = CameraPose::orbit(0.0, 0.0, 2);
        let rays = camera_rays(&pose, 64, Stratification::Jittered(1)).unwrap();
        let s: Vec<f64> = vec![sigma; rays.depths.len()];
        let length = 2.0 * NEAR_FAR_MARGIN;
        for ray in 0..rays.num_rays() {
            let (w, t) = ray_weights(&s[ray * 64..(ray + 1) * 64], &rays.deltas[ray * 64..(ray + 1) * 64]);
            assert!((t - (-sigma * length).exp()).abs() < 1e-3);
            assert!((w.iter().sum::<f64>() + t - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn opaque_sample_dominates() {
        let g = Graph::new(Precision::F64);
        let mut sig = vec![0.0; 6];
        sig[2] = 1e6;
        let mut rgb = vec![0.5; 18];
        rgb[6..9].copy_from_slice(&[0.1, 0.9, 0.3]);
        let sigma = g.constant(Tensor::new(&[1, 6], sig));
        let rgb = g.constant(Tensor::new(&[1, 6, 3], rgb));
        let out = g.composite(sigma, rgb, Rc::new(vec![0.1; 6]), WHITE);
        let px = g.value(out).data().to_vec();
        for (a, b) in px.iter().zip([0.1, 0.9, 0.3]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_increasing_depths_rejected() {
        let mut rays = camera_rays(&CameraPose::orbit(0.0, 0.0, 2), 4, Stratification::Midpoint).unwrap();
        rays.depths[2] = rays.depths[1];
        let g = Graph::new(Precision::F32);
        let sigma = g.constant(Tensor::zeros(&[4, 4]));
        let rgb = g.constant(Tensor::zeros(&[4, 4, 3]));
        let err = composite_rays(&g, sigma, rgb, &rays, WHITE).unwrap_err();
        assert_eq!(err, RenderError::NonIncreasingDepths { ray: 0 });
    }

    /// Tri-plane whose mean feature is `(2/3)|p|²`, decoded into a sharp
    /// density step at `|p| = r0`.
    fn sphere_triplane(r0: f64, res: usize) -> TriPlane {
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / (res - 1) as f64;
        let mut plane = vec![0.0; res * res];
        for row in 0..res {
            for col in 0..res {
                plane[row * res + col] = coord(row).powi(2) + coord(col).powi(2);
            }
        }
        let p = Tensor::new(&[res, res, 1], plane);
        let k = 4000.0;
        let dec = Decoder {
            w1: Tensor::from_slice(&[1, 1], &[-k]),
            b1: Tensor::from_slice(&[1], &[k * 2.0 / 3.0 * r0 * r0]),
            w2: Tensor::from_slice(&[1, 4], &[50.0, 0.0, 0.0, 0.0]),
            b2: Tensor::from_slice(&[4], &[-10.0, 0.0, 0.0, 0.0]),
        };
        TriPlane::new([p.clone(), p.clone(), p], dec).unwrap()
    }

    #[test]
    fn sphere_silhouette_matches_projection() {
        let r0 = 0.5;
        let tp = sphere_triplane(r0, 65);
        let pose = CameraPose {
            elevation: 0.0,
            ..CameraPose::orbit(0.0, 0.0, 64)
        };
        let opts = RenderOptions {
            samples: 96,
            precision: Precision::F64,
            ..Default::default()
        };
        let out = tp.render(&pose, &opts).unwrap();
        let covered = out.transmittance.iter().filter(|t| **t < 0.5).count() as f64;
        let measured = (covered / PI).sqrt();
        let alpha = (r0 / pose.radius).asin();
        let expected = alpha.tan() / (pose.fov / 2.0).tan() * 32.0;
        assert!((measured - expected).abs() < 1.0, "{measured} vs {expected}");
    }

    #[test]
    fn render_is_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let planes = [
            Tensor::randn(&[8, 8, 4], 1.0, &mut r),
            Tensor::randn(&[8, 8, 4], 1.0, &mut r),
            Tensor::randn(&[8, 8, 4], 1.0, &mut r),
        ];
        let tp = TriPlane::new(planes, Decoder::random(4, 8, &mut r)).unwrap();
        let opts = RenderOptions {
            stratification: Stratification::Jittered(7),
            ..Default::default()
        };
        let pose = CameraPose::orbit(10.0, 10.0, 8);
        let a = tp.render(&pose, &opts).unwrap();
        let b = tp.render(&pose, &opts).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn weights_and_transmittance_partition_unity() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let planes = [
            Tensor::randn(&[8, 8, 4], 2.0, &mut r),
            Tensor::randn(&[8, 8, 4], 2.0, &mut r),
            Tensor::randn(&[8, 8, 4], 2.0, &mut r),
        ];
        let tp = TriPlane::new(planes, Decoder::random(4, 8, &mut r)).unwrap();
        let g = Graph::new(Precision::F32);
        let (pv, dv) = tp.bind(&g);
        let rays = camera_rays(&CameraPose::orbit(-10.0, 10.0, 8), 48, Stratification::Jittered(2)).unwrap();
        let feats = sample_points(&g, &pv, &rays.positions);
        let (sigma, _) = decode(&g, &dv, feats);
        let sig: Vec<f64> = g
            .value(sigma)
            .data()
            .iter()
            .zip(&rays.inside)
            .map(|(a, b)| a * b)
            .collect();
        for ray in 0..rays.num_rays() {
            let (w, t) = ray_weights(&sig[ray * 48..(ray + 1) * 48], &rays.deltas[ray * 48..(ray + 1) * 48]);
            assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
            assert!((w.iter().sum::<f64>() + t - 1.0).abs() < 1e-5);
        }
    }

    fn spheres(rot: f64) -> impl Fn([f64; 3]) -> (f64, [f64; 3]) {
        let balls = [
            ([0.4, 0.1, 0.0], 0.3, [0.9, 0.2, 0.2]),
            ([-0.3, -0.2, 0.35], 0.25, [0.1, 0.3, 0.9]),
            ([0.0, 0.3, -0.4], 0.2, [0.2, 0.8, 0.3]),
        ];
        move |p: [f64; 3]| {
            // undo a rotation by `rot` about +y
            let (c, s) = (rot.cos(), rot.sin());
            let q = [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]];
            for (center, rad, col) in balls {
                let d2 = (q[0] - center[0]).powi(2) + (q[1] - center[1]).powi(2) + (q[2] - center[2]).powi(2);
                if d2 < rad * rad {
                    return (30.0, col);
                }
            }
            (0.0, [0.0; 3])
        }
    }

    #[test]
    fn azimuth_equivariance_on_sphere_scene() {
        let delta = 20f64.to_radians();
        for az in [0.0, 15.0, -30.0] {
            let rotated = render_field(&spheres(delta), &CameraPose::orbit(az, 10.0, 64), 48, WHITE).unwrap();
            let plain = render_field(
                &spheres(0.0),
                &CameraPose::orbit(az - delta.to_degrees(), 10.0, 64),
                48,
                WHITE,
            )
            .unwrap();
            let err = rotated.image.mean_abs_diff(&plain.image);
            assert!(err < 0.02, "az {az}: {err}");
        }
    }

    #[test]
    fn volume_render_passes_grad_check() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let c = 2;
        let planes: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 4, c], 0.5, &mut r)).collect();
        let dec = Decoder::random(c, 3, &mut r);
        let rays = camera_rays(&CameraPose::orbit(8.0, 10.0, 3), 6, Stratification::Jittered(4)).unwrap();
        let proj = Tensor::randn(&[3, 3, 3], 1.0, &mut r);
        for precision in [Precision::F32, Precision::F64] {
            let tol = if precision == Precision::F32 { 1e-2 } else { 1e-6 };
            let step = if precision == Precision::F32 { 1e-3 } else { 1e-5 };
            let rep = grad_check(
                |g, v| {
                    let dv = DecoderVars {
                        w1: v[3],
                        b1: v[4],
                        w2: v[5],
                        b2: v[6],
                    };
                    let out = volume_render(g, &[v[0], v[1], v[2]], &dv, &rays, WHITE).unwrap();
                    let p = g.constant(proj.clone());
                    let m = g.mul(out.image, p);
                    g.sum(m)
                },
                &[
                    planes[0].clone(),
                    planes[1].clone(),
                    planes[2].clone(),
                    dec.w1.clone(),
                    dec.b1.clone(),
                    dec.w2.clone(),
                    dec.b2.clone(),
                ],
                step,
                tol,
                precision,
            )
            .unwrap();
            assert!(rep.passed, "{precision:?}: {}", rep.max_rel_error);
        }
    }
}
