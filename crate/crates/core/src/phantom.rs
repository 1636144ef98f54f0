//! Tissue maps, the spin-echo signal equation, and the slice resampling used
//! to lay phantom slices out on the acquisition canvas.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::par;
use crate::rng::{rng_for, stream};
use crate::slice::{RealSlice, Spacing, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueClass {
    pub class_id: usize,
    pub name: String,
    pub rho: f64,
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub d: f64,
}

/// Property table, stored on disk as a JSON array of [`TissueClass`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TissueProperties {
    pub classes: Vec<TissueClass>,
}

impl TissueProperties {
    pub fn new(classes: Vec<TissueClass>) -> Result<Self> {
        let p = TissueProperties { classes };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for c in &self.classes {
            ensure!(
                c.t1_ms > 0.0 && c.t2_ms > 0.0 && c.rho >= 0.0 && c.d >= 0.0,
                Config,
                "tissue '{}' has invalid properties",
                c.name
            );
            ensure!(seen.insert(c.class_id, ()).is_none(), Config, "duplicate class id {}", c.class_id);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: TissueProperties = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        p.validate()?;
        Ok(p)
    }

    /// The table shipped in `configs/tissues.json`.
    pub fn brainweb_default() -> Self {
        serde_json::from_str(include_str!("../../../configs/tissues.json")).expect("bundled tissue table")
    }

    pub fn get(&self, class_id: usize) -> Option<&TissueClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub tr_ms: f64,
    pub te_ms: f64,
    pub b_value: f64,
    pub gain_k: f64,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        AcquisitionParams { tr_ms: 5700.0, te_ms: 114.0, b_value: 0.0, gain_k: 1.0 }
    }
}

impl AcquisitionParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.tr_ms > self.te_ms && self.te_ms >= 0.0,
            Config,
            "need TR > TE >= 0, got TR={} TE={}",
            self.tr_ms,
            self.te_ms
        );
        ensure!(self.b_value >= 0.0, Config, "b-value must be non-negative");
        ensure!(self.gain_k > 0.0, Config, "gain must be positive");
        Ok(())
    }
}

/// Single-tissue spin-echo DWI intensity.
pub fn tissue_signal(t: &TissueClass, acq: &AcquisitionParams) -> f64 {
    acq.gain_k * t.rho * (-acq.te_ms / t.t2_ms).exp() * (1.0 - (-acq.tr_ms / t.t1_ms).exp()) * (-acq.b_value * t.d).exp()
}

/// Per-voxel partial volume fractions. Voxel `(x, y, z)` owns the
/// `n_classes` values starting at `((z*height + y)*width + x) * n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMap {
    width: usize,
    height: usize,
    depth: usize,
    n_classes: usize,
    fractions: Vec<f32>,
    voxel_mm: [f64; 3],
}

impl TissueMap {
    pub fn new(width: usize, height: usize, depth: usize, n_classes: usize, fractions: Vec<f32>) -> Result<Self> {
        ensure!(width > 0 && height > 0 && depth > 0 && n_classes > 0, Dimension, "empty tissue map");
        ensure!(
            fractions.len() == width * height * depth * n_classes,
            Dimension,
            "fraction count {} does not match {width}x{height}x{depth}x{n_classes}",
            fractions.len()
        );
        for v in fractions.chunks(n_classes) {
            ensure!(v.iter().all(|f| (0.0..=1.0).contains(f)), Format, "fraction outside [0, 1]");
            ensure!(v.iter().map(|&f| f as f64).sum::<f64>() <= 1.0 + 1e-6, Format, "fractions sum above 1");
        }
        Ok(TissueMap { width, height, depth, n_classes, fractions, voxel_mm: [1.0; 3] })
    }

    pub fn with_voxel_mm(mut self, voxel_mm: [f64; 3]) -> Self {
        self.voxel_mm = voxel_mm;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn voxel_mm(&self) -> [f64; 3] {
        self.voxel_mm
    }

    pub fn fractions(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let i = ((z * self.height + y) * self.width + x) * self.n_classes;
        &self.fractions[i..i + self.n_classes]
    }

    /// Plane at fixed `y`: columns follow `x`, rows follow `z` top-down
    /// from the highest `z` (superior at the top).
    pub fn coronal(&self, y: usize) -> TissueMap {
        let (w, h, n) = (self.width, self.depth, self.n_classes);
        let mut f = Vec::with_capacity(w * h * n);
        for row in 0..h {
            let z = self.depth - 1 - row;
            for x in 0..w {
                f.extend_from_slice(self.fractions(x, y, z));
            }
        }
        TissueMap { width: w, height: h, depth: 1, n_classes: n, fractions: f, voxel_mm: [self.voxel_mm[0], self.voxel_mm[2], self.voxel_mm[1]] }
    }

    /// Plane at fixed `z`.
    pub fn axial(&self, z: usize) -> TissueMap {
        let plane = self.width * self.height * self.n_classes;
        TissueMap {
            width: self.width,
            height: self.height,
            depth: 1,
            n_classes: self.n_classes,
            fractions: self.fractions[z * plane..(z + 1) * plane].to_vec(),
            voxel_mm: self.voxel_mm,
        }
    }
}

/// Intensity per voxel: the fraction-weighted sum of each tissue's own signal.
pub fn synthesize_signal(map: &TissueMap, props: &TissueProperties, acq: &AcquisitionParams) -> Result<Volume<RealSlice>> {
    acq.validate()?;
    props.validate()?;
    let mut per_class = Vec::with_capacity(map.n_classes);
    for c in 0..map.n_classes {
        let used = map.fractions.iter().skip(c).step_by(map.n_classes).any(|&f| f > 0.0);
        per_class.push(match props.get(c) {
            Some(t) => tissue_signal(t, acq),
            None if !used => 0.0,
            None => return Err(Error::Config(format!("no tissue properties for class {c}"))),
        });
    }
    let spacing = Spacing { dx: map.voxel_mm[0], dy: map.voxel_mm[1] };
    let slices = par::map_range(map.depth, |z| {
        RealSlice::from_fn(map.width, map.height, |x, y| {
            map.fractions(x, y, z).iter().zip(&per_class).map(|(&f, &s)| f as f64 * s).sum::<f64>()
        })
        .with_spacing(spacing)
    });
    Volume::new(slices, map.voxel_mm[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDType {
    U8,
    U16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawLayout {
    /// One label per voxel.
    Crisp,
    /// `n_classes` consecutive volumes of per-class membership.
    Fuzzy,
}

/// Sidecar describing a raw BrainWeb-style dump. Voxels are stored with `x`
/// fastest, then `y`, then `z`; u16 samples are little-endian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub dtype: RawDType,
    pub layout: RawLayout,
    /// Crisp label that means "no tissue"; such voxels get all-zero fractions.
    #[serde(default)]
    pub background_label: Option<usize>,
    #[serde(default = "unit_voxel")]
    pub voxel_mm: [f64; 3],
}

fn unit_voxel() -> [f64; 3] {
    [1.0; 3]
}

pub fn decode_brainweb(sc: &RawSidecar, bytes: &[u8]) -> Result<TissueMap> {
    let voxels = sc.width * sc.height * sc.depth;
    ensure!(voxels > 0 && sc.n_classes > 0, Config, "sidecar declares an empty volume");
    let bps = match sc.dtype {
        RawDType::U8 => 1,
        RawDType::U16 => 2,
    };
    let samples = match sc.layout {
        RawLayout::Crisp => voxels,
        RawLayout::Fuzzy => voxels * sc.n_classes,
    };
    ensure!(
        bytes.len() == samples * bps,
        Format,
        "raw file holds {} bytes, sidecar implies {}",
        bytes.len(),
        samples * bps
    );
    let sample = |i: usize| -> u32 {
        match sc.dtype {
            RawDType::U8 => bytes[i] as u32,
            RawDType::U16 => u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as u32,
        }
    };
    let n = sc.n_classes;
    let mut f = vec![0f32; voxels * n];
    match sc.layout {
        RawLayout::Crisp => {
            for v in 0..voxels {
                let label = sample(v) as usize;
                if Some(label) == sc.background_label {
                    continue;
                }
                ensure!(label < n, Format, "label {label} at voxel {v} exceeds class count {n}");
                f[v * n + label] = 1.0;
            }
        }
        RawLayout::Fuzzy => {
            let max = match sc.dtype {
                RawDType::U8 => u8::MAX as f64,
                RawDType::U16 => u16::MAX as f64,
            };
            for c in 0..n {
                for v in 0..voxels {
                    f[v * n + c] = (sample(c * voxels + v) as f64 / max) as f32;
                }
            }
            // Fuzzy dumps are only approximately normalised; renormalise any
            // voxel whose memberships overshoot.
            for v in f.chunks_mut(n) {
                let s: f64 = v.iter().map(|&x| x as f64).sum();
                if s > 1.0 {
                    v.iter_mut().for_each(|x| *x = (*x as f64 / s) as f32);
                }
            }
        }
    }
    Ok(TissueMap::new(sc.width, sc.height, sc.depth, n, f)?.with_voxel_mm(sc.voxel_mm))
}

pub fn load_brainweb_raw(data_path: &Path, sidecar_path: &Path) -> Result<TissueMap> {
    let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sc: RawSidecar = serde_json::from_str(&text).map_err(|e| Error::json(sidecar_path, e))?;
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    decode_brainweb(&sc, &bytes)
}

pub const CLASS_CSF: usize = 0;
pub const CLASS_GM: usize = 1;
pub const CLASS_WM: usize = 2;
pub const CLASS_FAT: usize = 3;

#[derive(Debug, Clone)]
struct Ripple {
    amp: f64,
    m_az: f64,
    m_pol: f64,
    phase_az: f64,
    phase_pol: f64,
}

#[derive(Debug, Clone)]
struct Blob {
    center: [f64; 3],
    semi: [f64; 3],
}

/// A seeded analytic head: nested ellipsoids (scalp, skull gap, CSF, cortex,
/// white matter) with rippled cortical boundaries, plus ventricles and deep
/// grey nuclei. Coordinates are voxel indices of a `width×height×depth` grid.
#[derive(Debug, Clone)]
pub struct ProceduralHead {
    width: usize,
    height: usize,
    depth: usize,
    n_classes: usize,
    center: [f64; 3],
    head: [f64; 3],
    gm_ripples: Vec<Ripple>,
    wm_ripples: Vec<Ripple>,
    ventricles: Vec<Blob>,
    nuclei: Vec<Blob>,
    soft: f64,
}

fn smoothstep(edge: f64, soft: f64, d: f64) -> f64 {
    // 1 well inside (d <= -soft), 0 outside (d >= soft)
    let t = ((soft - d) / (2.0 * soft)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t) * edge
}

impl ProceduralHead {
    pub fn new(seed: u64, width: usize, height: usize, depth: usize, n_classes: usize) -> Self {
        assert!(width > 0 && height > 0 && depth > 0, "phantom dimensions must be positive");
        let mut rng = rng_for(seed, &[stream::PHANTOM]);
        let center = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, (depth as f64 - 1.0) / 2.0];
        let head = [0.43 * width as f64, 0.43 * height as f64, 0.43 * depth as f64];
        let mut ripples = |n: usize, amp: f64| -> Vec<Ripple> {
            (0..n)
                .map(|_| Ripple {
                    amp: amp * rng.random_range(0.5..1.0),
                    m_az: rng.random_range(5..15) as f64,
                    m_pol: rng.random_range(4..12) as f64,
                    phase_az: rng.random_range(0.0..2.0 * PI),
                    phase_pol: rng.random_range(0.0..2.0 * PI),
                })
                .collect()
        };
        let gm_ripples = ripples(4, 0.035);
        let wm_ripples = ripples(5, 0.06);
        let mut jitter = |v: f64| v * rng.random_range(0.9..1.1);
        let s = [width as f64, height as f64, depth as f64];
        let ventricles = [-1.0, 1.0]
            .iter()
            .map(|&side| Blob {
                center: [center[0] + side * jitter(0.06) * s[0], center[1] + jitter(0.02) * s[1], center[2] + jitter(0.04) * s[2]],
                semi: [jitter(0.035) * s[0], jitter(0.14) * s[1], jitter(0.07) * s[2]],
            })
            .collect();
        let nuclei = [-1.0, 1.0]
            .iter()
            .map(|&side| Blob {
                center: [center[0] + side * jitter(0.13) * s[0], center[1] - jitter(0.02) * s[1], center[2] - jitter(0.02) * s[2]],
                semi: [jitter(0.045) * s[0], jitter(0.07) * s[1], jitter(0.05) * s[2]],
            })
            .collect();
        ProceduralHead { width, height, depth, n_classes, center, head, gm_ripples, wm_ripples, ventricles, nuclei, soft: 1.2 }
    }

    /// Approximate signed distance (voxels) to an ellipsoid with semi-axes
    /// `scale·head`, radially modulated by `ripples`.
    fn level(&self, p: [f64; 3], scale: f64, ripples: &[Ripple]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let u = [d[0] / (scale * self.head[0]), d[1] / (scale * self.head[1]), d[2] / (scale * self.head[2])];
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let mut gain = 1.0;
        if r > 0.0 {
            let az = u[1].atan2(u[0]);
            let pol = (u[2] / r).clamp(-1.0, 1.0).acos();
            for rp in ripples {
                gain += rp.amp * (rp.m_az * az + rp.phase_az).sin() * (rp.m_pol * pol + rp.phase_pol).sin();
            }
        }
        let mean_semi = scale * (self.head[0] + self.head[1] + self.head[2]) / 3.0;
        (r / gain - 1.0) * mean_semi
    }

    fn blob(&self, b: &Blob, p: [f64; 3]) -> f64 {
        let u = [(p[0] - b.center[0]) / b.semi[0], (p[1] - b.center[1]) / b.semi[1], (p[2] - b.center[2]) / b.semi[2]];
        let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let mean = (b.semi[0] + b.semi[1] + b.semi[2]) / 3.0;
        smoothstep(1.0, self.soft, (r - 1.0) * mean)
    }

    /// Class fractions at a (possibly fractional) voxel position.
    pub fn fractions_at(&self, p: [f64; 3], out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let s = self.soft;
        let head = smoothstep(1.0, s, self.level(p, 1.0, &[]));
        if head == 0.0 {
            return;
        }
        let scalp_in = smoothstep(1.0, s, self.level(p, 0.93, &[])).min(head);
        let csf_in = smoothstep(1.0, s, self.level(p, 0.86, &[])).min(scalp_in);
        let gm_in = smoothstep(1.0, s, self.level(p, 0.82, &self.gm_ripples)).min(csf_in);
        let wm_in = smoothstep(1.0, s, self.level(p, 0.66, &self.wm_ripples)).min(gm_in);

        let fat = head - scalp_in;
        let mut csf = csf_in - gm_in;
        let mut gm = gm_in - wm_in;
        let mut wm = wm_in;

        for n in &self.nuclei {
            let v = self.blob(n, p);
            gm += wm * v;
            wm *= 1.0 - v;
        }
        for b in &self.ventricles {
            let v = self.blob(b, p);
            csf += (gm + wm) * v;
            gm *= 1.0 - v;
            wm *= 1.0 - v;
        }
        let vals = [(CLASS_CSF, csf), (CLASS_GM, gm), (CLASS_WM, wm), (CLASS_FAT, fat)];
        for (c, v) in vals {
            if c < out.len() {
                out[c] = v.clamp(0.0, 1.0) as f32;
            }
        }
        // f32 rounding can push the sum a hair above one.
        let sum: f64 = out.iter().map(|&v| v as f64).sum();
        if sum > 1.0 {
            out.iter_mut().for_each(|v| *v = (*v as f64 / sum) as f32);
        }
    }

    /// Rasterise the plane `z = const` (or any plane given by `map`).
    fn raster(&self, w: usize, h: usize, pos: impl Fn(usize, usize) -> [f64; 3] + Sync) -> Vec<f32> {
        let n = self.n_classes;
        let rows = par::map_range(h, |y| {
            let mut row = vec![0f32; w * n];
            for x in 0..w {
                self.fractions_at(pos(x, y), &mut row[x * n..(x + 1) * n]);
            }
            row
        });
        rows.concat()
    }

    pub fn volume(&self) -> TissueMap {
        let planes = (0..self.depth)
            .map(|z| self.raster(self.width, self.height, |x, y| [x as f64, y as f64, z as f64]))
            .collect::<Vec<_>>()
            .concat();
        TissueMap::new(self.width, self.height, self.depth, self.n_classes, planes).expect("valid phantom")
    }

    /// Same as `volume().coronal(y)` without rasterising the whole volume.
    pub fn coronal(&self, y: usize) -> TissueMap {
        let d = self.depth;
        let f = self.raster(self.width, d, |x, row| [x as f64, y as f64, (d - 1 - row) as f64]);
        TissueMap::new(self.width, d, 1, self.n_classes, f).expect("valid phantom")
    }

    /// Same as `volume().axial(z)`.
    pub fn axial(&self, z: usize) -> TissueMap {
        let f = self.raster(self.width, self.height, |x, y| [x as f64, y as f64, z as f64]);
        TissueMap::new(self.width, self.height, 1, self.n_classes, f).expect("valid phantom")
    }
}

/// Deterministic analytic head phantom, `n_classes >= 3`: CSF, grey matter,
/// white matter, then (if present) fat. Extra classes stay empty.
pub fn procedural_phantom(seed: u64, width: usize, height: usize, depth: usize, n_classes: usize) -> Result<TissueMap> {
    ensure!(width > 0 && height > 0 && depth > 0, Config, "phantom dimensions must be positive");
    ensure!(n_classes >= 3, Config, "procedural phantom needs at least 3 classes");
    Ok(ProceduralHead::new(seed, width, height, depth, n_classes).volume())
}

/// Layout of a training slice on the acquisition canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLayout {
    pub target_w: usize,
    pub target_h: usize,
    pub crop: usize,
    pub inner: usize,
    /// Rows the object is moved down (positive) from the centred position.
    pub center_shift: isize,
}

impl Default for TrainingLayout {
    fn default() -> Self {
        TrainingLayout { target_w: 320, target_h: 160, crop: 180, inner: 125, center_shift: 0 }
    }
}

impl TrainingLayout {
    /// Top-left corner of the embedded `inner×inner` block.
    pub fn origin(&self) -> (usize, isize) {
        ((self.target_w - self.inner) / 2, ((self.target_h - self.inner) / 2) as isize + self.center_shift)
    }
}

/// Nearest-neighbour source index for output sample `i` of `n_out` taken
/// from `n_in` samples.
fn nn_index(i: usize, n_in: usize, n_out: usize) -> usize {
    (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

/// Centre crop, nearest-neighbour downsample and embed on a zero canvas.
pub fn resample_for_training(vol: &Volume<RealSlice>, layout: &TrainingLayout) -> Result<Volume<RealSlice>> {
    let l = layout;
    ensure!(
        l.inner <= l.target_w.min(l.target_h),
        Config,
        "inner size {} does not fit a {}x{} canvas",
        l.inner,
        l.target_w,
        l.target_h
    );
    ensure!(l.inner > 0 && l.crop >= l.inner, Config, "crop {} must be at least inner {}", l.crop, l.inner);
    ensure!(
        vol.width() >= l.crop && vol.height() >= l.crop,
        Dimension,
        "slices of {}x{} are smaller than the {} crop",
        vol.width(),
        vol.height(),
        l.crop
    );
    let (x0, y0) = l.origin();
    ensure!(
        y0 >= 0 && y0 as usize + l.inner <= l.target_h,
        Config,
        "center_shift {} pushes the object off the canvas",
        l.center_shift
    );
    let cx = (vol.width() - l.crop) / 2;
    let cy = (vol.height() - l.crop) / 2;
    let slices = vol
        .slices()
        .iter()
        .map(|s| {
            let mut out = RealSlice::zeros(l.target_w, l.target_h);
            for i in 0..l.inner {
                let sy = cy + nn_index(i, l.crop, l.inner);
                for j in 0..l.inner {
                    let sx = cx + nn_index(j, l.crop, l.inner);
                    out.set(x0 + j, y0 as usize + i, s.get(sx, sy));
                }
            }
            let f = l.crop as f64 / l.inner as f64;
            out.with_spacing(Spacing { dx: s.spacing().dx * f, dy: s.spacing().dy * f })
        })
        .collect();
    Volume::new(slices, vol.slice_thickness())
}

/// Bilinear resize of `slice` to `inner_w×inner_h`, centred on a zero
/// `target_w×target_h` canvas. Sample centres are aligned (`align_corners`
/// off): output pixel `i` reads input coordinate `(i+0.5)·n_in/n_out − 0.5`.
pub fn resample_bilinear_centered(
    slice: &RealSlice,
    inner_w: usize,
    inner_h: usize,
    target_w: usize,
    target_h: usize,
) -> Result<RealSlice> {
    ensure!(inner_w <= target_w && inner_h <= target_h, Config, "resized slice does not fit the canvas");
    ensure!(inner_w > 0 && inner_h > 0, Config, "empty resize target");
    let (w, h) = (slice.width(), slice.height());
    let x0 = (target_w - inner_w) / 2;
    let y0 = (target_h - inner_h) / 2;
    let fx = w as f64 / inner_w as f64;
    let fy = h as f64 / inner_h as f64;
    let mut out = RealSlice::zeros(target_w, target_h);
    for i in 0..inner_h {
        let sy = ((i as f64 + 0.5) * fy - 0.5).clamp(0.0, (h - 1) as f64);
        let y_lo = sy.floor() as usize;
        let y_hi = (y_lo + 1).min(h - 1);
        let ty = sy - y_lo as f64;
        for j in 0..inner_w {
            let sx = ((j as f64 + 0.5) * fx - 0.5).clamp(0.0, (w - 1) as f64);
            let x_lo = sx.floor() as usize;
            let x_hi = (x_lo + 1).min(w - 1);
            let tx = sx - x_lo as f64;
            let top = slice.get(x_lo, y_lo) * (1.0 - tx) + slice.get(x_hi, y_lo) * tx;
            let bot = slice.get(x_lo, y_hi) * (1.0 - tx) + slice.get(x_hi, y_hi) * tx;
            out.set(x0 + j, y0 + i, top * (1.0 - ty) + bot * ty);
        }
    }
    Ok(out.with_spacing(Spacing { dx: slice.spacing().dx * fx, dy: slice.spacing().dy * fy }))
}
