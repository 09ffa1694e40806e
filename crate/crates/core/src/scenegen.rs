//! Synthetic telescope frames: Gaussian-PSF stars and RSOs, streaks, sensor noise.

use std::f64::consts::SQRT_2;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::{Canvas, Gray16};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrackingMode {
    /// Telescope follows the RSO: RSOs are points, stars streak.
    RateTrack,
    /// Telescope follows the stars: stars are points, RSOs streak.
    Sidereal,
}

impl TrackingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackingMode::RateTrack => "RateTrack",
            TrackingMode::Sidereal => "Sidereal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "RateTrack" | "ratetrack" | "rate-track" | "rate" => Some(Self::RateTrack),
            "Sidereal" | "sidereal" => Some(Self::Sidereal),
            _ => None,
        }
    }
}

impl std::fmt::Display for TrackingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width_px: usize,
    pub height_px: usize,
    pub tracking_mode: TrackingMode,
    pub star_count: usize,
    pub star_mag_range: (f64, f64),
    pub rso_count: usize,
    pub rso_mag_range: (f64, f64),
    pub streak_length_px: f64,
    pub streak_angle_rad: f64,
    pub psf_sigma_px: f64,
    pub zero_point_mag: f64,
    pub background_level: f64,
    pub read_noise_sigma: f64,
    pub shot_noise: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width_px: 512,
            height_px: 512,
            tracking_mode: TrackingMode::RateTrack,
            star_count: 40,
            star_mag_range: (8.0, 13.0),
            rso_count: 2,
            rso_mag_range: (9.0, 10.5),
            streak_length_px: 40.0,
            streak_angle_rad: 0.35,
            psf_sigma_px: 1.5,
            zero_point_mag: 19.0,
            background_level: 100.0,
            read_noise_sigma: 5.0,
            shot_noise: true,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width_px == 0 || self.height_px == 0 {
            return bad(format!(
                "frame size {}x{} must be positive",
                self.width_px, self.height_px
            ));
        }
        for (name, (lo, hi)) in [
            ("star_mag_range", self.star_mag_range),
            ("rso_mag_range", self.rso_mag_range),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return bad(format!(
                    "{name} ({lo}, {hi}) must be finite with min <= max"
                ));
            }
        }
        if !(self.psf_sigma_px.is_finite() && self.psf_sigma_px > 0.0) {
            return bad(format!(
                "psf_sigma_px {} must be positive",
                self.psf_sigma_px
            ));
        }
        if !(self.streak_length_px.is_finite() && self.streak_length_px >= 0.0) {
            return bad(format!(
                "streak_length_px {} must be non-negative",
                self.streak_length_px
            ));
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("read_noise_sigma", self.read_noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be non-negative"));
            }
        }
        if !self.streak_angle_rad.is_finite() || !self.zero_point_mag.is_finite() {
            return bad("streak_angle_rad and zero_point_mag must be finite".into());
        }
        Ok(())
    }

    /// Parse and validate a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SceneConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("scene config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene config serializes")
    }

    fn direction(&self) -> (f64, f64) {
        (self.streak_angle_rad.cos(), self.streak_angle_rad.sin())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic(Box<SceneConfig>),
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub pixels: Gray16,
    pub boxes: Vec<BoundingBox>,
    pub tracking_mode: TrackingMode,
    pub provenance: Provenance,
}

impl LabeledFrame {
    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }
}

/// Instrumental magnitude to counts.
pub fn mag_to_flux(mag: f64, zero_point: f64) -> f64 {
    10f64.powf(-0.4 * (mag - zero_point))
}

/// Fraction of a unit 1-D Gaussian falling in each pixel of `[lo, lo + out.len())`.
fn pixel_weights(center: f64, sigma: f64, lo: i64, out: &mut [f64]) {
    let k = 1.0 / (SQRT_2 * sigma);
    let mut prev = libm::erf((lo as f64 - center) * k);
    for (i, w) in out.iter_mut().enumerate() {
        let next = libm::erf((lo as f64 + i as f64 + 1.0 - center) * k);
        *w = 0.5 * (next - prev);
        prev = next;
    }
}

fn psf_radius(sigma: f64) -> i64 {
    (6.0 * sigma).ceil() as i64 + 1
}

/// Add a pixel-integrated isotropic Gaussian carrying `flux` counts.
pub fn render_point_source(canvas: &mut Canvas, center: (f64, f64), flux: f64, sigma: f64) {
    if flux == 0.0 || canvas.data.is_empty() || !(center.0.is_finite() && center.1.is_finite()) {
        return;
    }
    let r = psf_radius(sigma);
    let (cx, cy) = (center.0.floor() as i64, center.1.floor() as i64);
    let x0 = cx.saturating_sub(r).max(0);
    let x1 = cx.saturating_add(r + 1).min(canvas.width as i64);
    let y0 = cy.saturating_sub(r).max(0);
    let y1 = cy.saturating_add(r + 1).min(canvas.height as i64);
    if x0 >= x1 || y0 >= y1 {
        return;
    }
    let mut wx = vec![0.0; (x1 - x0) as usize];
    let mut wy = vec![0.0; (y1 - y0) as usize];
    pixel_weights(center.0, sigma, x0, &mut wx);
    pixel_weights(center.1, sigma, y0, &mut wy);
    let w = canvas.width;
    for (j, &fy) in wy.iter().enumerate() {
        let row = &mut canvas.data[(y0 as usize + j) * w + x0 as usize..][..wx.len()];
        let fy = flux * fy;
        for (v, &fx) in row.iter_mut().zip(&wx) {
            *v += fy * fx;
        }
    }
}

/// Add a uniform segment convolved with the PSF, sampled at spacing <= sigma/4.
pub fn render_streak(
    canvas: &mut Canvas,
    start: (f64, f64),
    end: (f64, f64),
    flux: f64,
    sigma: f64,
) {
    let len = (end.0 - start.0).hypot(end.1 - start.1);
    let n = if len == 0.0 {
        1
    } else {
        (len / (sigma / 4.0)).ceil() as usize + 1
    };
    if n == 1 {
        render_point_source(canvas, start, flux, sigma);
        return;
    }
    let per = flux / n as f64;
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let p = (
            start.0 + t * (end.0 - start.0),
            start.1 + t * (end.1 - start.1),
        );
        render_point_source(canvas, p, per, sigma);
    }
}

/// Background, optional Poisson shot noise, Gaussian read noise, clamp at zero.
pub fn add_noise(canvas: &mut Canvas, config: &SceneConfig, rng: &mut impl Rng) {
    let read = (config.read_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, config.read_noise_sigma).expect("finite sigma"));
    for v in canvas.data.iter_mut() {
        let mut x = *v + config.background_level;
        if config.shot_noise {
            x = if x > 0.0 {
                Poisson::new(x).map(|p| p.sample(rng)).unwrap_or(x)
            } else {
                0.0
            };
        }
        if let Some(n) = &read {
            x += n.sample(rng);
        }
        *v = x.max(0.0);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for frame `frame` of observation `obs`.
pub fn derive_seed(master: u64, obs: u64, frame: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ obs) ^ frame)
}

#[derive(Clone, Debug)]
struct Source {
    pos: (f64, f64),
    flux: f64,
}

/// Object placement for one observation, shared by all of its frames.
#[derive(Clone, Debug)]
struct Layout {
    stars: Vec<Source>,
    rsos: Vec<Source>,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Half-extent of an RSO's box around its center on each axis.
fn rso_half_extent(config: &SceneConfig) -> (f64, f64) {
    let pad = 3.0 * config.psf_sigma_px;
    match config.tracking_mode {
        TrackingMode::RateTrack => (pad, pad),
        TrackingMode::Sidereal => {
            let (dx, dy) = config.direction();
            let h = config.streak_length_px / 2.0;
            (pad + h * dx.abs(), pad + h * dy.abs())
        }
    }
}

/// Interval of start positions keeping the box inside `[0, size]` for `frames` steps of `step`.
fn start_interval(size: usize, half: f64, step: f64, frames: usize) -> Option<(f64, f64)> {
    let travel = step * (frames.saturating_sub(1)) as f64;
    let lo = half - travel.min(0.0);
    let hi = size as f64 - half - travel.max(0.0);
    (lo <= hi).then_some((lo, hi))
}

fn sample_layout(config: &SceneConfig, frames: usize, rng: &mut impl Rng) -> Result<Layout> {
    let (hx, hy) = rso_half_extent(config);
    let (dx, dy) = config.direction();
    let l = config.streak_length_px;
    let xi = start_interval(config.width_px, hx, l * dx, frames);
    let yi = start_interval(config.height_px, hy, l * dy, frames);
    let (Some(xi), Some(yi)) = (xi, yi) else {
        if config.rso_count == 0 {
            return sample_stars_only(config, rng);
        }
        return Err(Error::Config(format!(
            "{}x{} frame cannot hold a {:.1}x{:.1} px RSO box over {frames} frame(s)",
            config.width_px,
            config.height_px,
            2.0 * hx,
            2.0 * hy
        )));
    };
    let mut layout = sample_stars_only(config, rng)?;
    let (m0, m1) = config.rso_mag_range;
    for _ in 0..config.rso_count {
        let x = uniform(rng, xi.0, xi.1);
        let y = uniform(rng, yi.0, yi.1);
        let mag = uniform(rng, m0, m1);
        layout.rsos.push(Source {
            pos: (x, y),
            flux: mag_to_flux(mag, config.zero_point_mag),
        });
    }
    Ok(layout)
}

fn sample_stars_only(config: &SceneConfig, rng: &mut impl Rng) -> Result<Layout> {
    let (m0, m1) = config.star_mag_range;
    let stars = (0..config.star_count)
        .map(|_| {
            let x = uniform(rng, 0.0, config.width_px as f64);
            let y = uniform(rng, 0.0, config.height_px as f64);
            let mag = uniform(rng, m0, m1);
            Source {
                pos: (x, y),
                flux: mag_to_flux(mag, config.zero_point_mag),
            }
        })
        .collect();
    Ok(Layout {
        stars,
        rsos: Vec::new(),
    })
}

fn render_source(canvas: &mut Canvas, config: &SceneConfig, s: &Source, streaked: bool) {
    let sigma = config.psf_sigma_px;
    if streaked {
        let (dx, dy) = config.direction();
        let h = config.streak_length_px / 2.0;
        let a = (s.pos.0 - h * dx, s.pos.1 - h * dy);
        let b = (s.pos.0 + h * dx, s.pos.1 + h * dy);
        render_streak(canvas, a, b, s.flux, sigma);
    } else {
        render_point_source(canvas, s.pos, s.flux, sigma);
    }
}

fn rso_box(config: &SceneConfig, center: (f64, f64)) -> BoundingBox {
    let (hx, hy) = rso_half_extent(config);
    BoundingBox {
        x_min: center.0 - hx,
        y_min: center.1 - hy,
        x_max: center.0 + hx,
        y_max: center.1 + hy,
    }
    .clamp_to(config.width_px, config.height_px)
}

/// Noiseless render of `layout` with RSOs advanced by `frame` steps.
fn render_layout(
    config: &SceneConfig,
    layout: &Layout,
    frame: usize,
) -> (Canvas, Vec<BoundingBox>) {
    let mut canvas = Canvas::new(config.width_px, config.height_px);
    let rate = config.tracking_mode == TrackingMode::RateTrack;
    for s in &layout.stars {
        render_source(&mut canvas, config, s, rate);
    }
    let (dx, dy) = config.direction();
    let step = config.streak_length_px * frame as f64;
    let mut boxes = Vec::with_capacity(layout.rsos.len());
    for s in &layout.rsos {
        let moved = Source {
            pos: (s.pos.0 + step * dx, s.pos.1 + step * dy),
            flux: s.flux,
        };
        render_source(&mut canvas, config, &moved, !rate);
        boxes.push(rso_box(config, moved.pos));
    }
    (canvas, boxes)
}

fn layout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

fn finish(config: &SceneConfig, mut canvas: Canvas, boxes: Vec<BoundingBox>) -> LabeledFrame {
    add_noise(&mut canvas, config, &mut noise_rng(config.seed));
    LabeledFrame {
        pixels: canvas.quantize(),
        boxes,
        tracking_mode: config.tracking_mode,
        provenance: Provenance::Synthetic(Box::new(config.clone())),
    }
}

/// One frame; a pure function of `config`.
pub fn generate_scene(config: &SceneConfig) -> Result<LabeledFrame> {
    config.validate()?;
    let layout = sample_layout(config, 1, &mut layout_rng(config.seed))?;
    let (canvas, boxes) = render_layout(config, &layout, 0);
    Ok(finish(config, canvas, boxes))
}

/// Noiseless counterpart of [`generate_scene`] (same layout, no background or noise).
pub fn render_noiseless(config: &SceneConfig) -> Result<(Canvas, Vec<BoundingBox>)> {
    config.validate()?;
    let layout = sample_layout(config, 1, &mut layout_rng(config.seed))?;
    Ok(render_layout(config, &layout, 0))
}

/// `n_obs` observations of `frames_per_obs` frames, RSOs advancing one streak length per frame.
pub fn generate_observation_set(
    base: &SceneConfig,
    n_obs: usize,
    frames_per_obs: usize,
    master_seed: u64,
) -> Result<Vec<LabeledFrame>> {
    generate_observation_set_with_rso_counts(
        base,
        n_obs,
        frames_per_obs,
        master_seed,
        base.rso_count..=base.rso_count,
    )
}

/// As [`generate_observation_set`], drawing each observation's RSO count from `rso_counts`.
pub fn generate_observation_set_with_rso_counts(
    base: &SceneConfig,
    n_obs: usize,
    frames_per_obs: usize,
    master_seed: u64,
    rso_counts: RangeInclusive<usize>,
) -> Result<Vec<LabeledFrame>> {
    if n_obs == 0 || frames_per_obs == 0 {
        return Err(Error::Config(format!(
            "need at least one observation and frame, got {n_obs} x {frames_per_obs}"
        )));
    }
    if rso_counts.is_empty() {
        return Err(Error::Config(format!(
            "empty RSO count range {rso_counts:?}"
        )));
    }
    base.validate()?;
    let mut out = Vec::with_capacity(n_obs * frames_per_obs);
    for o in 0..n_obs as u64 {
        let obs_seed = derive_seed(master_seed, o, 0);
        let mut rng = layout_rng(obs_seed);
        let mut cfg = base.clone();
        if rso_counts.start() != rso_counts.end() {
            let mut pick = ChaCha8Rng::seed_from_u64(obs_seed);
            pick.set_stream(2);
            cfg.rso_count = pick.random_range(rso_counts.clone());
        }
        let layout = sample_layout(&cfg, frames_per_obs, &mut rng)?;
        for f in 0..frames_per_obs {
            cfg.seed = derive_seed(master_seed, o, f as u64);
            let (canvas, boxes) = render_layout(&cfg, &layout, f);
            out.push(finish(&cfg, canvas, boxes));
        }
    }
    Ok(out)
}
