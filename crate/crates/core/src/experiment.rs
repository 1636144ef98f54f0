//! Experiment orchestration: training-set preparation from coronal phantom
//! slices, simulated EPI test acquisitions from axial slices, averaging
//! curves, pre/post-correction denoising, residual and multicoil analyses,
//! and artifact export.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::calibration::{gaussian_blur, generate_noise_map, masked_mean};
use crate::denoiser::{self, denoise_complex, Example, SrcnnModel, TrainConfig, TrainHistory};
use crate::epi::{forward_epi, ghost_template, reconstruct_epi, EpiModel, GhostPhase, GhostSpec, GradientWaveform};
use crate::error::{ensure, Error, Result};
use crate::eval::{
    adc_map, intensity_profile, metrics, nex_equivalent, residual_mean_analysis, root_sum_of_squares, running_averages,
    trace_image, write_metrics_csv, write_profiles_csv, AveragingDomain, MetricRow, Metrics, NexCurve, NexEquivalent,
    Region,
};
use crate::fft::{fft2, ifft2};
use crate::fieldio::{read_field, write_field, DType, FieldData};
use crate::morphology::{dilate, erode, segment_object};
use crate::motion::{apply_affine, generate_motion_trace, register_back, Interpolation, MotionTrace};
use crate::par;
use crate::phantom::{
    resample_bilinear_centered, resample_for_training, synthesize_signal, AcquisitionParams, ProceduralHead, TissueMap,
    TissueProperties, TrainingLayout,
};
use crate::phasefield::{apply_phase, random_phase_map, PhaseMap, PhaseSynthesis};
use crate::plot::{auto_window, export_plot, write_grayscale_png, HorizontalLine};
use crate::rng::{derive_seed, rng_for, stream};
use crate::slice::{modulus, Complex64, ComplexSlice, Mask, RealSlice, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DenoiseStage {
    /// Denoise the acquired image before regridding and ghost correction.
    PreCorrection,
    /// Denoise the reconstructed image.
    PostCorrection,
}

impl DenoiseStage {
    pub fn other(self) -> Self {
        match self {
            DenoiseStage::PreCorrection => DenoiseStage::PostCorrection,
            DenoiseStage::PostCorrection => DenoiseStage::PreCorrection,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DenoiseStage::PreCorrection => "pre",
            DenoiseStage::PostCorrection => "post",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomSource {
    /// Seeded analytic head of `size = [x, y, z]` voxels (1 mm).
    Procedural { size: [usize; 3] },
    /// Raw BrainWeb-style fuzzy model with its JSON sidecar.
    Raw { data: PathBuf, sidecar: PathBuf },
}

impl Default for PhantomSource {
    fn default() -> Self {
        PhantomSource::Procedural { size: [181, 217, 181] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub enabled: bool,
    pub max_translation_px: f64,
    pub max_rotation_deg: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig { enabled: false, max_translation_px: 2.0, max_rotation_deg: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    /// Noise instances; fewer than 2 skips the analysis.
    pub instances: usize,
    pub snr: f64,
    /// 1-based row for the intensity profiles.
    pub profile_row: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig { instances: 100, snr: 3.0, profile_row: 120 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MulticoilConfig {
    pub enabled: bool,
    pub n_coils: usize,
    pub b_values: Vec<f64>,
    pub directions: usize,
    /// Mean b=0 object intensity per coil in units of the noise std.
    pub snr: f64,
}

impl Default for MulticoilConfig {
    fn default() -> Self {
        MulticoilConfig { enabled: true, n_coils: 4, b_values: vec![0.0, 500.0, 1000.0], directions: 3, snr: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub snr_list: Vec<f64>,
    pub nex_max: usize,
    pub psf_sigma: f64,
    pub noise_std: f64,
    /// Per-column noise std multipliers (length = slice width).
    pub noise_profile: Option<Vec<f64>>,
    pub motion: MotionConfig,
    pub ghost_amplitude: f64,
    pub trajectory: GradientWaveform,
    pub denoise_stage: DenoiseStage,
    /// Also evaluate the other denoising stage.
    pub compare_stages: bool,
    pub training_snr: f64,
    pub train_slices: usize,
    pub noise_maps: usize,
    pub maps_per_slice: usize,
    pub validation_stride: usize,
    /// Coronal positions as fractions of the A-P extent.
    pub train_slice_range: [f64; 2],
    pub test_slices: usize,
    /// Axial positions as fractions of the S-I extent.
    pub test_slice_range: [f64; 2],
    pub test_pixel_mm: f64,
    pub phantom: PhantomSource,
    pub tissues: Option<PathBuf>,
    pub acquisition: AcquisitionParams,
    pub phase: PhaseSynthesis,
    pub training_layout: TrainingLayout,
    /// Object mask threshold as a fraction of the slice maximum.
    pub mask_threshold: f64,
    pub mask_closing: usize,
    pub training: TrainConfig,
    pub residual: ResidualConfig,
    pub multicoil: MulticoilConfig,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            snr_list: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            nex_max: 25,
            psf_sigma: 0.65,
            noise_std: 1.0,
            noise_profile: None,
            motion: MotionConfig::default(),
            ghost_amplitude: 0.5,
            trajectory: GradientWaveform::default(),
            denoise_stage: DenoiseStage::PostCorrection,
            compare_stages: true,
            training_snr: 3.0,
            train_slices: 25,
            noise_maps: 25,
            maps_per_slice: 3,
            validation_stride: 9,
            train_slice_range: [0.3, 0.7],
            test_slices: 5,
            test_slice_range: [0.45, 0.7],
            test_pixel_mm: 1.4,
            phantom: PhantomSource::default(),
            tissues: None,
            acquisition: AcquisitionParams::default(),
            phase: PhaseSynthesis::default(),
            training_layout: TrainingLayout::default(),
            mask_threshold: 0.05,
            mask_closing: 3,
            training: TrainConfig::default(),
            residual: ResidualConfig::default(),
            multicoil: MulticoilConfig::default(),
            model: None,
            dataset: None,
        }
    }
}

fn check_range(r: [f64; 2], what: &str) -> Result<()> {
    ensure!(0.0 <= r[0] && r[0] < r[1] && r[1] <= 1.0, Config, "{what} must satisfy 0 <= lo < hi <= 1, got {r:?}");
    Ok(())
}

impl ExperimentConfig {
    /// Parses a JSON config; unknown keys are rejected, missing ones take defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.snr_list.is_empty(), Config, "snr_list is empty");
        for &s in &self.snr_list {
            ensure!(s > 0.0 && s.is_finite(), Config, "SNR values must be positive, got {s}");
        }
        ensure!(self.training_snr > 0.0 && self.training_snr.is_finite(), Config, "training_snr must be positive");
        ensure!(self.nex_max >= 1, Config, "nex_max must be at least 1");
        ensure!(self.psf_sigma >= 0.0 && self.psf_sigma.is_finite(), Config, "psf_sigma must be non-negative");
        ensure!(self.noise_std >= 0.0 && self.noise_std.is_finite(), Config, "noise_std must be non-negative");
        ensure!(self.ghost_amplitude.is_finite(), Config, "ghost amplitude must be finite");
        let m = &self.motion;
        ensure!(
            m.max_translation_px >= 0.0 && m.max_rotation_deg >= 0.0,
            Config,
            "motion bounds must be non-negative"
        );
        ensure!(self.train_slices >= 1 && self.test_slices >= 1, Config, "need at least one training and one test slice");
        ensure!(self.maps_per_slice >= 1, Config, "maps_per_slice must be at least 1");
        ensure!(
            self.noise_maps >= self.maps_per_slice && self.noise_maps >= self.train_slices,
            Config,
            "{} noise maps cannot give {} slices {} distinct maps each by permutation",
            self.noise_maps,
            self.train_slices,
            self.maps_per_slice
        );
        ensure!(self.validation_stride >= 2, Config, "validation_stride must be at least 2");
        check_range(self.train_slice_range, "train_slice_range")?;
        check_range(self.test_slice_range, "test_slice_range")?;
        ensure!(self.test_pixel_mm > 0.0, Config, "test_pixel_mm must be positive");
        ensure!((0.0..1.0).contains(&self.mask_threshold), Config, "mask_threshold must lie in [0, 1)");
        let l = &self.training_layout;
        ensure!(
            self.trajectory.n_samples == l.target_w,
            Config,
            "trajectory has {} samples but slices are {} wide",
            self.trajectory.n_samples,
            l.target_w
        );
        if let Some(p) = &self.noise_profile {
            ensure!(p.len() == l.target_w, Config, "noise profile has {} entries for width {}", p.len(), l.target_w);
        }
        self.acquisition.validate()?;
        self.training.validate()?;
        if self.multicoil.enabled {
            let mc = &self.multicoil;
            ensure!(mc.n_coils >= 1 && mc.directions >= 1, Config, "multicoil needs coils and directions");
            ensure!(mc.snr > 0.0, Config, "multicoil snr must be positive");
            let mut b = mc.b_values.clone();
            b.sort_by(f64::total_cmp);
            b.dedup();
            ensure!(b.len() >= 2 && b[0] >= 0.0, Config, "multicoil needs two distinct non-negative b-values");
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.training_layout.target_w
    }

    fn height(&self) -> usize {
        self.training_layout.target_h
    }
}

enum PhantomKind {
    Procedural(Box<ProceduralHead>),
    Volume(TissueMap),
}

/// The tissue model plus everything needed to turn a plane into intensities.
pub struct Phantom {
    kind: PhantomKind,
    dims: [usize; 3],
    voxel_mm: [f64; 3],
    props: TissueProperties,
    acq: AcquisitionParams,
}

impl Phantom {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let props = match &cfg.tissues {
            Some(p) => TissueProperties::load(p)?,
            None => TissueProperties::brainweb_default(),
        };
        props.validate()?;
        let (kind, dims, voxel_mm) = match &cfg.phantom {
            PhantomSource::Procedural { size } => {
                ensure!(size.iter().all(|&n| n > 0), Config, "phantom size must be positive");
                let n_classes = props.classes.iter().map(|c| c.class_id + 1).max().unwrap_or(0).max(3);
                let head = ProceduralHead::new(cfg.seed, size[0], size[1], size[2], n_classes);
                (PhantomKind::Procedural(Box::new(head)), *size, [1.0; 3])
            }
            PhantomSource::Raw { data, sidecar } => {
                let map = crate::phantom::load_brainweb_raw(data, sidecar)?;
                let dims = [map.width(), map.height(), map.depth()];
                let vm = map.voxel_mm();
                (PhantomKind::Volume(map), dims, vm)
            }
        };
        Ok(Phantom { kind, dims, voxel_mm, props, acq: cfg.acquisition })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_mm(&self) -> [f64; 3] {
        self.voxel_mm
    }

    pub fn coronal(&self, y: usize) -> TissueMap {
        match &self.kind {
            PhantomKind::Procedural(h) => h.coronal(y),
            PhantomKind::Volume(m) => m.coronal(y),
        }
    }

    pub fn axial(&self, z: usize) -> TissueMap {
        match &self.kind {
            PhantomKind::Procedural(h) => h.axial(z),
            PhantomKind::Volume(m) => m.axial(z),
        }
    }

    /// Intensity of a single-plane tissue map.
    pub fn signal(&self, plane: &TissueMap, b_value: f64) -> Result<RealSlice> {
        let acq = AcquisitionParams { b_value, ..self.acq };
        Ok(synthesize_signal(plane, &self.props, &acq)?.into_slices().remove(0))
    }
}

/// `n` positions evenly spread over `range` (fractions of `len`), at bin centres.
pub fn slice_positions(n: usize, range: [f64; 2], len: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let f = range[0] + (range[1] - range[0]) * (i as f64 + 0.5) / n as f64;
            ((f * len as f64).floor() as usize).min(len - 1)
        })
        .collect()
}

fn object_mask(slice: &RealSlice, cfg: &ExperimentConfig) -> Mask {
    let max = slice.data().iter().copied().fold(0.0, f64::max);
    segment_object(slice, cfg.mask_threshold * max, cfg.mask_closing)
}

fn shift_mask(mask: &Mask, dy: isize) -> Mask {
    Mask::from_fn(mask.width(), mask.height(), |x, y| {
        let src = y as isize - dy;
        src >= 0 && (src as usize) < mask.height() && mask.get(x, src as usize)
    })
}

/// One noise-free training slice: phase applied with the object centred,
/// then shifted to its layout position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSlice {
    pub clean: ComplexSlice,
    pub mask: Mask,
}

fn training_slice(cfg: &ExperimentConfig, phantom: &Phantom, index: usize, y: usize) -> Result<TrainingSlice> {
    let plane = phantom.signal(&phantom.coronal(y), 0.0)?;
    let centred = TrainingLayout { center_shift: 0, ..cfg.training_layout };
    let canvas = resample_for_training(&Volume::new(vec![plane], 1.0)?, &centred)?.into_slices().remove(0);
    let mask = object_mask(&canvas, cfg);
    ensure!(!mask.is_empty(), Config, "coronal slice {y} has no object above the mask threshold");
    let blurred = gaussian_blur(&canvas, cfg.psf_sigma);
    let scaled = blurred.scale(cfg.training_snr / masked_mean(&blurred, &mask)?);
    let phase = random_phase_map(&mut rng_for(cfg.seed, &[stream::TRAIN_PHASE, index as u64]), &mask, &cfg.phase)?;
    let shift = cfg.training_layout.center_shift;
    Ok(TrainingSlice { clean: apply_phase(&scaled, &phase)?.shift_rows(shift), mask: shift_mask(&mask, shift) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "IM")]
    Im,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "VAL")]
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub example_id: usize,
    pub slice_id: usize,
    pub noise_map_id: usize,
    pub component: Component,
    pub split: Split,
}

/// Entries are listed in the shuffled order the split was taken from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub training_snr: f64,
    pub psf_sigma: f64,
    pub n_slices: usize,
    pub n_noise_maps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut pairs = std::collections::BTreeSet::new();
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entries {
            ensure!(e.slice_id < self.n_slices && e.noise_map_id < self.n_noise_maps, Format, "manifest entry {e:?} out of range");
            ensure!(ids.insert(e.example_id), Format, "duplicate example id {}", e.example_id);
            ensure!(pairs.insert((e.slice_id, e.noise_map_id, e.component as u8)), Format, "duplicate example {e:?}");
        }
        let n_val = self.entries.iter().filter(|e| e.split == Split::Val).count();
        ensure!(
            n_val == self.n_val && self.entries.len() - n_val == self.n_train,
            Format,
            "manifest counts do not match its entries"
        );
        Ok(())
    }
}

/// Noise-map indices per slice: one seeded permutation per round, redrawn
/// until no slice sees a map twice.
pub fn assign_noise_maps(seed: u64, n_slices: usize, n_maps: usize, per_slice: usize) -> Result<Vec<Vec<usize>>> {
    ensure!(
        n_maps >= n_slices && n_maps >= per_slice,
        Config,
        "{n_maps} noise maps are fewer than required ({n_slices} slices, {per_slice} per slice)"
    );
    let mut rng = rng_for(seed, &[stream::NOISE_ASSIGNMENT]);
    let mut assigned = vec![Vec::with_capacity(per_slice); n_slices];
    for round in 0..per_slice {
        let mut attempts = 0;
        loop {
            attempts += 1;
            ensure!(attempts <= 10_000, Numerical, "no repetition-free permutation found for round {round}");
            let mut perm: Vec<usize> = (0..n_maps).collect();
            perm.shuffle(&mut rng);
            if (0..n_slices).all(|s| !assigned[s].contains(&perm[s])) {
                for (s, a) in assigned.iter_mut().enumerate() {
                    a.push(perm[s]);
                }
                break;
            }
        }
    }
    Ok(assigned)
}

/// Noise-free training slices, noise maps and the manifest tying them together.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clean: Vec<ComplexSlice>,
    pub noise: Vec<ComplexSlice>,
}

fn component(s: &ComplexSlice, c: Component) -> RealSlice {
    match c {
        Component::Re => s.re(),
        Component::Im => s.im(),
    }
}

fn noise_field(cfg: &ExperimentConfig, seed: u64) -> Result<ComplexSlice> {
    let map = generate_noise_map(seed, cfg.width(), cfg.height(), cfg.noise_profile.as_deref())?;
    Ok(map.data.scale(cfg.noise_std))
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let assignment = assign_noise_maps(cfg.seed, cfg.train_slices, cfg.noise_maps, cfg.maps_per_slice)?;
    let phantom = Phantom::from_config(cfg)?;
    let ys = slice_positions(cfg.train_slices, cfg.train_slice_range, phantom.dims()[1]);
    let clean = par::map_range(ys.len(), |i| training_slice(cfg, &phantom, i, ys[i]).map(|t| t.clean))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let noise = par::map_range(cfg.noise_maps, |m| noise_field(cfg, derive_seed(cfg.seed, &[stream::TRAIN_NOISE, m as u64])))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut examples = Vec::new();
    for (s, maps) in assignment.iter().enumerate() {
        for &m in maps {
            for c in [Component::Re, Component::Im] {
                examples.push((examples.len(), s, m, c));
            }
        }
    }
    examples.shuffle(&mut rng_for(cfg.seed, &[stream::SPLIT]));
    let entries: Vec<ManifestEntry> = examples
        .iter()
        .enumerate()
        .map(|(pos, &(id, s, m, c))| ManifestEntry {
            example_id: id,
            slice_id: s,
            noise_map_id: m,
            component: c,
            split: if (pos + 1) % cfg.validation_stride == 0 { Split::Val } else { Split::Train },
        })
        .collect();
    let n_val = entries.iter().filter(|e| e.split == Split::Val).count();
    let manifest = DatasetManifest {
        seed: cfg.seed,
        training_snr: cfg.training_snr,
        psf_sigma: cfg.psf_sigma,
        n_slices: cfg.train_slices,
        n_noise_maps: cfg.noise_maps,
        n_train: entries.len() - n_val,
        n_val,
        entries,
    };
    manifest.validate()?;
    Ok(Dataset { manifest, clean, noise })
}

impl Dataset {
    pub fn example(&self, e: &ManifestEntry) -> Result<Example> {
        let clean = &self.clean[e.slice_id];
        let noisy = clean.zip_map(&self.noise[e.noise_map_id], |a, b| a + b)?;
        Ok(Example { input: component(&noisy, e.component), clean: component(clean, e.component) })
    }

    /// `(train, validation)` examples in manifest order.
    pub fn examples(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for e in &self.manifest.entries {
            let ex = self.example(e)?;
            match e.split {
                Split::Train => train.push(ex),
                Split::Val => val.push(ex),
            }
        }
        Ok((train, val))
    }

    /// `manifest.json` plus `clean_NNN` and `noise_NNN` field files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for (i, s) in self.clean.iter().enumerate() {
            write_field(&dir.join(format!("clean_{i:03}")), &FieldData::complex_slice(s.clone()), DType::C128)?;
        }
        for (i, s) in self.noise.iter().enumerate() {
            write_field(&dir.join(format!("noise_{i:03}")), &FieldData::complex_slice(s.clone()), DType::C128)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        manifest.validate()?;
        let read = |name: String| -> Result<ComplexSlice> {
            match read_field(&dir.join(&name))? {
                FieldData::Complex(v) if v.depth() == 1 => Ok(v.into_slices().remove(0)),
                _ => Err(Error::Format(format!("{name} is not a single complex slice"))),
            }
        };
        let clean = (0..manifest.n_slices).map(|i| read(format!("clean_{i:03}"))).collect::<Result<Vec<_>>>()?;
        let noise = (0..manifest.n_noise_maps).map(|i| read(format!("noise_{i:03}"))).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, clean, noise })
    }
}

/// Trains a fresh network on the dataset; weights and shuffling follow `cfg.seed`.
pub fn train_denoiser(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(SrcnnModel, TrainHistory)> {
    let (train, val) = dataset.examples()?;
    let tc = TrainConfig { seed: cfg.seed, ..cfg.training.clone() };
    let init = SrcnnModel::init(tc.architecture, cfg.seed, tc.init_std)?;
    let (mut model, history) = denoiser::train(init, &train, &val, &tc)?;
    model.meta.training_snr = Some(dataset.manifest.training_snr);
    Ok((model, history))
}

/// A noise-free axial test slice before SNR scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSlice {
    pub z: usize,
    /// Blurred modulus on the acquisition canvas.
    pub modulus: RealSlice,
    pub phase: PhaseMap,
    pub mask: Mask,
    pub object_mean: f64,
}

impl TestSlice {
    /// Noise-free complex image whose object mean modulus equals `snr`.
    pub fn clean_at(&self, snr: f64) -> Result<ComplexSlice> {
        apply_phase(&self.modulus.scale(snr / self.object_mean), &self.phase)
    }
}

fn axial_canvas(cfg: &ExperimentConfig, phantom: &Phantom, z: usize, b_value: f64) -> Result<RealSlice> {
    let plane = phantom.signal(&phantom.axial(z), b_value)?;
    let vm = phantom.voxel_mm();
    let iw = ((plane.width() as f64 * vm[0] / cfg.test_pixel_mm).round() as usize).max(1);
    let ih = ((plane.height() as f64 * vm[1] / cfg.test_pixel_mm).round() as usize).max(1);
    resample_bilinear_centered(&plane, iw, ih, cfg.width(), cfg.height())
}

pub fn build_test_slices(cfg: &ExperimentConfig, phantom: &Phantom) -> Result<Vec<TestSlice>> {
    let zs = slice_positions(cfg.test_slices, cfg.test_slice_range, phantom.dims()[2]);
    par::map_range(zs.len(), |i| -> Result<TestSlice> {
        let canvas = axial_canvas(cfg, phantom, zs[i], 0.0)?;
        let mask = object_mask(&canvas, cfg);
        ensure!(!mask.is_empty(), Config, "axial slice {} has no object above the mask threshold", zs[i]);
        let modulus = gaussian_blur(&canvas, cfg.psf_sigma);
        let object_mean = masked_mean(&modulus, &mask)?;
        ensure!(object_mean > 0.0, Numerical, "axial slice {} has zero object mean", zs[i]);
        let phase = random_phase_map(&mut rng_for(cfg.seed, &[stream::TEST_PHASE, i as u64]), &mask, &cfg.phase)?;
        Ok(TestSlice { z: zs[i], modulus, phase, mask, object_mean })
    })
    .into_iter()
    .collect()
}

/// Forward EPI model with ghosting over `tissue`, plus optional image-domain noise.
pub fn acquire(epi: &EpiModel, image: &ComplexSlice, tissue: &Mask, amplitude: f64, noise: Option<&ComplexSlice>) -> Result<ComplexSlice> {
    let ghost = if amplitude != 0.0 {
        GhostSpec { amplitude, tissue: tissue.clone() }
    } else {
        GhostSpec::none(image.width(), image.height())
    };
    forward_epi(image, &epi.kernel, &ghost, noise)
}

/// The correction table that cancels [`acquire`]'s ghosting.
pub fn ghost_correction(tissue: &Mask, amplitude: f64) -> GhostPhase {
    if amplitude == 0.0 {
        GhostPhase::None
    } else {
        GhostPhase::PerRow(ghost_template(tissue, -amplitude))
    }
}

/// Test noise for slice `slice`, repetition `rep`; `None` when the noise std is 0.
pub fn test_noise(cfg: &ExperimentConfig, slice: usize, rep: usize) -> Result<Option<ComplexSlice>> {
    if cfg.noise_std == 0.0 {
        return Ok(None);
    }
    noise_field(cfg, derive_seed(cfg.seed, &[stream::TEST_NOISE, slice as u64, rep as u64])).map(Some)
}

fn mask_to_real(mask: &Mask) -> RealSlice {
    RealSlice::from_fn(mask.width(), mask.height(), |x, y| if mask.get(x, y) { 1.0 } else { 0.0 })
}

fn moved_mask(mask: &Mask, t: &crate::motion::AffineTransform) -> Result<Mask> {
    let m = apply_affine(&mask_to_real(mask), t, Interpolation::Nearest)?;
    Ok(Mask::from_fn(m.width(), m.height(), |x, y| m.get(x, y) > 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub slice: Metrics,
    pub tissue: Metrics,
}

impl RegionMetrics {
    fn of(test: &RealSlice, reference: &RealSlice, mask: &Mask) -> Result<Self> {
        Ok(RegionMetrics { slice: metrics(test, reference, None)?, tissue: metrics(test, reference, Some(mask))? })
    }

    pub fn get(&self, region: Region) -> &Metrics {
        match region {
            Region::Slice => &self.slice,
            Region::Tissue => &self.tissue,
        }
    }

    fn mean(items: &[RegionMetrics]) -> RegionMetrics {
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&RegionMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        RegionMetrics {
            slice: Metrics {
                psnr_db: avg(&|m| m.slice.psnr_db),
                ssim: avg(&|m| m.slice.ssim),
                mae: avg(&|m| m.slice.mae),
            },
            tissue: Metrics {
                psnr_db: avg(&|m| m.tissue.psnr_db),
                ssim: avg(&|m| m.tissue.ssim),
                mae: avg(&|m| m.tissue.mae),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Static,
    Motion,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Static => "static",
            Scenario::Motion => "motion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Psnr,
    Ssim,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Psnr => "psnr",
            MetricKind::Ssim => "ssim",
        }
    }

    fn pick(self, m: &Metrics) -> f64 {
        match self {
            MetricKind::Psnr => m.psnr_db,
            MetricKind::Ssim => m.ssim,
        }
    }
}

/// Metrics of the k-repetition average (`points[k-1]`), means over test slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingCurves {
    pub scenario: Scenario,
    pub domain: AveragingDomain,
    pub points: Vec<RegionMetrics>,
    pub per_slice: Vec<Vec<RegionMetrics>>,
}

impl AveragingCurves {
    pub fn curve(&self, metric: MetricKind, region: Region) -> NexCurve {
        NexCurve {
            domain: self.domain,
            metric: format!("{}_{}", metric.name(), region),
            values: self.points.iter().map(|p| metric.pick(p.get(region))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: DenoiseStage,
    pub mean: RegionMetrics,
    pub per_slice: Vec<RegionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub scenario: Scenario,
    pub domain: AveragingDomain,
    pub metric: MetricKind,
    pub region: Region,
    pub nex: NexEquivalent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub snr: f64,
    pub curves: Vec<AveragingCurves>,
    /// Configured stage first.
    pub denoised: Vec<StageResult>,
    pub equivalence: Vec<EquivalenceRow>,
}

impl SnrReport {
    pub fn curves_for(&self, scenario: Scenario, domain: AveragingDomain) -> Option<&AveragingCurves> {
        self.curves.iter().find(|c| c.scenario == scenario && c.domain == domain)
    }

    pub fn stage(&self, stage: DenoiseStage) -> Option<&StageResult> {
        self.denoised.iter().find(|s| s.stage == stage)
    }
}

/// Std-reduction ratios and profiles of the averaged network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub snr: f64,
    pub instances: usize,
    pub background_ratio: f64,
    pub homogeneous_ratio: f64,
    pub edge_ratio: f64,
    pub region_sizes: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticoilSummary {
    pub b_values: Vec<f64>,
    pub n_coils: usize,
    pub directions: usize,
    /// Mean fitted ADC over fitted object pixels, noisy and noise-free.
    pub mean_adc: f64,
    pub mean_adc_noise_free: f64,
    pub fitted_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub nex_max: usize,
    pub psf_sigma: f64,
    pub test_slices: Vec<usize>,
    pub snrs: Vec<SnrReport>,
    pub motion_trace: Option<MotionTrace>,
    pub residual: Option<ResidualSummary>,
    pub multicoil: Option<MulticoilSummary>,
    /// Images for field/PNG export, keyed by file stem.
    #[serde(skip)]
    pub maps: Vec<(String, RealSlice)>,
    #[serde(skip)]
    pub profiles: Vec<(String, Vec<f64>)>,
}

impl ExperimentReport {
    pub fn snr(&self, snr: f64) -> Option<&SnrReport> {
        self.snrs.iter().find(|s| s.snr == snr)
    }
}

struct SliceOutcome {
    curves: Vec<(Scenario, AveragingDomain, Vec<RegionMetrics>)>,
    stages: Vec<(DenoiseStage, RegionMetrics)>,
    maps: Vec<(String, RealSlice)>,
}

fn denoise_at_stage(
    model: &SrcnnModel,
    epi: &EpiModel,
    kspace: &ComplexSlice,
    correction: &GhostPhase,
    stage: DenoiseStage,
) -> Result<ComplexSlice> {
    match stage {
        DenoiseStage::PostCorrection => {
            Ok(denoise_complex(model, &reconstruct_epi(kspace, &epi.kernel, correction)?)?.denoised)
        }
        DenoiseStage::PreCorrection => {
            let den = denoise_complex(model, &ifft2(kspace)?)?.denoised;
            reconstruct_epi(&fft2(&den)?, &epi.kernel, correction)
        }
    }
}

fn curve_metrics(instances: &[ComplexSlice], reference: &RealSlice, mask: &Mask, domain: AveragingDomain) -> Result<Vec<RegionMetrics>> {
    let averages = running_averages(instances, domain)?;
    par::map_slice(&averages, |a| RegionMetrics::of(a, reference, mask)).into_iter().collect()
}

#[allow(clippy::too_many_arguments)]
fn evaluate_slice(
    cfg: &ExperimentConfig,
    model: &SrcnnModel,
    epi: &EpiModel,
    trace: Option<&MotionTrace>,
    index: usize,
    slice: &TestSlice,
    snr: f64,
    keep_maps: bool,
) -> Result<SliceOutcome> {
    let clean = slice.clean_at(snr)?;
    let amp = cfg.ghost_amplitude;
    let correction = ghost_correction(&slice.mask, amp);
    let recon = |k: &ComplexSlice| reconstruct_epi(k, &epi.kernel, &correction);
    let reference = modulus(&recon(&acquire(epi, &clean, &slice.mask, amp, None)?)?);

    let kspaces = par::map_range(cfg.nex_max, |k| -> Result<ComplexSlice> {
        acquire(epi, &clean, &slice.mask, amp, test_noise(cfg, index, k)?.as_ref())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let instances = par::map_slice(&kspaces, |k| recon(k)).into_iter().collect::<Result<Vec<_>>>()?;

    let mut curves = Vec::new();
    for domain in [AveragingDomain::Complex, AveragingDomain::Modulus] {
        curves.push((Scenario::Static, domain, curve_metrics(&instances, &reference, &slice.mask, domain)?));
    }
    if let Some(trace) = trace {
        let moved = par::map_range(cfg.nex_max, |k| -> Result<ComplexSlice> {
            let t = &trace.transforms[k];
            let image = apply_affine(&clean, t, Interpolation::Nearest)?;
            let mask = moved_mask(&slice.mask, t)?;
            let kspace = acquire(epi, &image, &mask, amp, test_noise(cfg, index, k)?.as_ref())?;
            let r = reconstruct_epi(&kspace, &epi.kernel, &ghost_correction(&mask, amp))?;
            register_back(&r, t)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for domain in [AveragingDomain::Complex, AveragingDomain::Modulus] {
            curves.push((Scenario::Motion, domain, curve_metrics(&moved, &reference, &slice.mask, domain)?));
        }
    }

    let mut stages = vec![cfg.denoise_stage];
    if cfg.compare_stages {
        stages.push(cfg.denoise_stage.other());
    }
    let mut out_stages = Vec::new();
    let mut maps = Vec::new();
    for stage in stages {
        let den = modulus(&denoise_at_stage(model, epi, &kspaces[0], &correction, stage)?);
        out_stages.push((stage, RegionMetrics::of(&den, &reference, &slice.mask)?));
        if keep_maps {
            maps.push((format!("snr{snr}_denoised_{}", stage.name()), den));
        }
    }
    if keep_maps {
        maps.push((format!("snr{snr}_reference"), reference));
        maps.push((format!("snr{snr}_noisy_nex1"), modulus(&instances[0])));
        let avg = running_averages(&instances, AveragingDomain::Modulus)?.pop().expect("nex_max >= 1");
        maps.push((format!("snr{snr}_modulus_avg_nex{}", cfg.nex_max), avg));
    }
    Ok(SliceOutcome { curves, stages: out_stages, maps })
}

fn equivalence_rows(curves: &[AveragingCurves], denoised: &RegionMetrics) -> Vec<EquivalenceRow> {
    let mut rows = Vec::new();
    for c in curves {
        for metric in [MetricKind::Psnr, MetricKind::Ssim] {
            for region in [Region::Slice, Region::Tissue] {
                let values = c.curve(metric, region).values;
                rows.push(EquivalenceRow {
                    scenario: c.scenario,
                    domain: c.domain,
                    metric,
                    region,
                    nex: nex_equivalent(&values, metric.pick(denoised.get(region))),
                });
            }
        }
    }
    rows
}

/// Averaging curves, denoising and NEX equivalence for every configured SNR.
pub fn evaluate_averaging(
    cfg: &ExperimentConfig,
    model: &SrcnnModel,
    slices: &[TestSlice],
    trace: Option<&MotionTrace>,
) -> Result<(Vec<SnrReport>, Vec<(String, RealSlice)>)> {
    let epi = EpiModel::new(cfg.trajectory)?;
    let mut reports = Vec::new();
    let mut maps = Vec::new();
    for &snr in &cfg.snr_list {
        let mut outcomes = Vec::with_capacity(slices.len());
        for (i, s) in slices.iter().enumerate() {
            log::info!("snr {snr}: test slice {} of {}", i + 1, slices.len());
            let mut o = evaluate_slice(cfg, model, &epi, trace, i, s, snr, i == 0)?;
            maps.append(&mut o.maps);
            outcomes.push(o);
        }
        let curves: Vec<AveragingCurves> = (0..outcomes[0].curves.len())
            .map(|c| {
                let (scenario, domain, _) = outcomes[0].curves[c];
                let per_slice: Vec<Vec<RegionMetrics>> = outcomes.iter().map(|o| o.curves[c].2.clone()).collect();
                let points = (0..cfg.nex_max)
                    .map(|k| RegionMetrics::mean(&per_slice.iter().map(|p| p[k]).collect::<Vec<_>>()))
                    .collect();
                AveragingCurves { scenario, domain, points, per_slice }
            })
            .collect();
        let denoised: Vec<StageResult> = (0..outcomes[0].stages.len())
            .map(|j| {
                let per_slice: Vec<RegionMetrics> = outcomes.iter().map(|o| o.stages[j].1).collect();
                StageResult { stage: outcomes[0].stages[j].0, mean: RegionMetrics::mean(&per_slice), per_slice }
            })
            .collect();
        let equivalence = equivalence_rows(&curves, &denoised[0].mean);
        reports.push(SnrReport { snr, curves, denoised, equivalence });
    }
    Ok((reports, maps))
}

/// Background, homogeneous-tissue and edge regions of a clean image.
pub struct AnalysisRegions {
    pub background: Mask,
    pub homogeneous: Mask,
    pub edge: Mask,
}

pub fn analysis_regions(clean: &RealSlice, object: &Mask) -> Result<AnalysisRegions> {
    let (w, h) = (clean.width(), clean.height());
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            clean.get(x as usize, y as usize)
        }
    };
    let grad = RealSlice::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
        let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
        (gx * gx + gy * gy).sqrt()
    });
    let gmax = grad.data().iter().copied().fold(0.0, f64::max);
    ensure!(gmax > 0.0, Numerical, "clean image is constant");
    let edge = Mask::from_fn(w, h, |x, y| grad.get(x, y) > 0.2 * gmax);
    let near_edge = dilate(&edge, 2);
    let interior = erode(object, 3);
    let homogeneous = Mask::from_fn(w, h, |x, y| interior.get(x, y) && !near_edge.get(x, y) && grad.get(x, y) < 0.05 * gmax);
    let background = dilate(object, 4).invert();
    for (name, m) in [("background", &background), ("homogeneous", &homogeneous), ("edge", &edge)] {
        ensure!(!m.is_empty(), Config, "{name} analysis region is empty");
    }
    Ok(AnalysisRegions { background, homogeneous, edge })
}

type Maps = Vec<(String, RealSlice)>;
type Profiles = Vec<(String, Vec<f64>)>;

/// Repeated denoising of the real part of the first test slice.
pub fn residual_analysis(cfg: &ExperimentConfig, model: &SrcnnModel, slice: &TestSlice) -> Result<(ResidualSummary, Maps, Profiles)> {
    let rc = &cfg.residual;
    let clean = slice.clean_at(rc.snr)?.re();
    let a = residual_mean_analysis(model, &clean, rc.instances, cfg.seed)?;
    let regions = analysis_regions(&clean, &slice.mask)?;
    let summary = ResidualSummary {
        snr: rc.snr,
        instances: rc.instances,
        background_ratio: a.std_reduction(&regions.background)?,
        homogeneous_ratio: a.std_reduction(&regions.homogeneous)?,
        edge_ratio: a.std_reduction(&regions.edge)?,
        region_sizes: [regions.background.count(), regions.homogeneous.count(), regions.edge.count()],
    };
    let row = rc.profile_row.min(clean.height());
    let profiles = vec![
        ("clean".to_string(), intensity_profile(&clean, row)?),
        ("mean_noise_estimate".to_string(), intensity_profile(&a.mean_estimate, row)?),
        ("std_noisy".to_string(), intensity_profile(&a.std_noisy, row)?),
        ("std_denoised".to_string(), intensity_profile(&a.std_denoised, row)?),
    ];
    let maps = vec![
        ("residual_mean_estimate".to_string(), a.mean_estimate),
        ("residual_std_denoised".to_string(), a.std_denoised),
        ("residual_std_noisy".to_string(), a.std_noisy),
    ];
    Ok((summary, maps, profiles))
}

/// Smooth positive bilinear receive profile peaking towards one corner.
fn coil_gain(coil: usize, n_coils: usize, w: usize, h: usize) -> RealSlice {
    let angle = 2.0 * std::f64::consts::PI * coil as f64 / n_coils as f64 + std::f64::consts::FRAC_PI_4;
    let (cx, cy) = (angle.cos(), angle.sin());
    RealSlice::from_fn(w, h, |x, y| {
        let u = crate::phasefield::normalized(x, w);
        let v = crate::phasefield::normalized(y, h);
        0.4 + 0.6 * (1.0 + cx * u) * (1.0 + cy * v) / ((1.0 + cx.abs()) * (1.0 + cy.abs()))
    })
}

/// Simulated multicoil DWI of the first test plane: RSS over coils, trace
/// over directions, ADC over b-values, with and without noise.
pub fn multicoil_demo(cfg: &ExperimentConfig, phantom: &Phantom, slice: &TestSlice, index: usize) -> Result<(MulticoilSummary, Maps)> {
    let mc = &cfg.multicoil;
    let (w, h) = (cfg.width(), cfg.height());
    let gains: Vec<RealSlice> = (0..mc.n_coils).map(|c| coil_gain(c, mc.n_coils, w, h)).collect();
    let mut traces = Vec::new();
    let mut traces_clean = Vec::new();
    let mut scale = None;
    for (bi, &b) in mc.b_values.iter().enumerate() {
        let base = gaussian_blur(&axial_canvas(cfg, phantom, slice.z, b)?, cfg.psf_sigma);
        // one scale for every b-value so attenuation survives
        let k = match scale {
            Some(k) => k,
            None => {
                let b0 = gaussian_blur(&axial_canvas(cfg, phantom, slice.z, 0.0)?, cfg.psf_sigma);
                let k = mc.snr / masked_mean(&b0, &slice.mask)?;
                scale = Some(k);
                k
            }
        };
        let signal = apply_phase(&base.scale(k), &slice.phase)?;
        let per_dir = par::map_range(mc.directions, |d| -> Result<(RealSlice, RealSlice)> {
            let mut noisy = Vec::with_capacity(mc.n_coils);
            let mut clean = Vec::with_capacity(mc.n_coils);
            for (c, g) in gains.iter().enumerate() {
                let coil = signal.zip_map(g, |s, gv| s * gv)?;
                let seed = derive_seed(cfg.seed, &[stream::COIL, index as u64, c as u64, bi as u64, d as u64]);
                let n = noise_field(cfg, seed)?;
                noisy.push(modulus(&coil.zip_map(&n, |a, b| a + b)?));
                clean.push(modulus(&coil));
            }
            Ok((root_sum_of_squares(&noisy)?, root_sum_of_squares(&clean)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (noisy, clean): (Vec<_>, Vec<_>) = per_dir.into_iter().unzip();
        traces.push(trace_image(&noisy)?);
        traces_clean.push(trace_image(&clean)?);
    }
    let adc = adc_map(&mc.b_values, &traces)?;
    let adc_clean = adc_map(&mc.b_values, &traces_clean)?;
    let inside = |m: &Mask| Mask::from_fn(w, h, |x, y| m.get(x, y) && slice.mask.get(x, y));
    let (fit, fit_clean) = (inside(&adc.fitted), inside(&adc_clean.fitted));
    ensure!(!fit.is_empty() && !fit_clean.is_empty(), Numerical, "no object pixel could be fitted");
    let summary = MulticoilSummary {
        b_values: mc.b_values.clone(),
        n_coils: mc.n_coils,
        directions: mc.directions,
        mean_adc: masked_mean(&adc.adc, &fit)?,
        mean_adc_noise_free: masked_mean(&adc_clean.adc, &fit_clean)?,
        fitted_fraction: fit.count() as f64 / slice.mask.count() as f64,
    };
    let mut maps = Vec::new();
    for (b, t) in mc.b_values.iter().zip(&traces) {
        maps.push((format!("multicoil_trace_b{b}"), t.clone()));
    }
    maps.push(("multicoil_adc".to_string(), adc.adc));
    maps.push(("multicoil_adc_noise_free".to_string(), adc_clean.adc));
    Ok((summary, maps))
}

/// The full evaluation: averaging curves for every SNR, denoising at the
/// configured stage (and optionally the other), residual and multicoil
/// analyses.
pub fn run_experiment(cfg: &ExperimentConfig, model: &SrcnnModel) -> Result<ExperimentReport> {
    run(cfg, model, true)
}

/// Residual and multicoil analyses only; the report has no SNR entries.
pub fn run_analyses(cfg: &ExperimentConfig, model: &SrcnnModel) -> Result<ExperimentReport> {
    run(cfg, model, false)
}

fn run(cfg: &ExperimentConfig, model: &SrcnnModel, averaging: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    model.validate()?;
    let phantom = Phantom::from_config(cfg)?;
    let slices = build_test_slices(cfg, &phantom)?;
    let trace = if cfg.motion.enabled && averaging {
        let seed = derive_seed(cfg.seed, &[stream::MOTION]);
        Some(generate_motion_trace(seed, cfg.nex_max, cfg.motion.max_translation_px, cfg.motion.max_rotation_deg)?)
    } else {
        None
    };
    let (snrs, mut maps) =
        if averaging { evaluate_averaging(cfg, model, &slices, trace.as_ref())? } else { (Vec::new(), Vec::new()) };
    let mut profiles = Vec::new();
    let residual = if cfg.residual.instances >= 2 {
        let (summary, mut m, p) = residual_analysis(cfg, model, &slices[0])?;
        maps.append(&mut m);
        profiles = p;
        Some(summary)
    } else {
        None
    };
    let multicoil = if cfg.multicoil.enabled {
        let (summary, mut m) = multicoil_demo(cfg, &phantom, &slices[0], 0)?;
        maps.append(&mut m);
        Some(summary)
    } else {
        None
    };
    Ok(ExperimentReport {
        seed: cfg.seed,
        nex_max: cfg.nex_max,
        psf_sigma: cfg.psf_sigma,
        test_slices: slices.iter().map(|s| s.z).collect(),
        snrs,
        motion_trace: trace,
        residual,
        multicoil,
        maps,
        profiles,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn nex_label(k: usize) -> String {
    k.to_string()
}

/// Writes `summary.json`, `metrics.csv`, `nex_equivalence.csv`, per-curve
/// CSVs and plots under `curves/`, field maps under `maps/` and PNG
/// previews under `previews/`.
pub fn write_report(report: &ExperimentReport, out: &Path) -> Result<()> {
    for d in ["curves", "maps", "previews"] {
        create_dir(&out.join(d))?;
    }
    let path = out.join("summary.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let mut rows = Vec::new();
    let mut eq = csv::Writer::from_path(out.join("nex_equivalence.csv"))
        .map_err(|e| crate::calibration::csv_error(&out.join("nex_equivalence.csv"), e))?;
    let eq_err = |e| crate::calibration::csv_error(&out.join("nex_equivalence.csv"), e);
    eq.write_record(["snr", "scenario", "domain", "metric", "region", "nex"]).map_err(eq_err)?;
    for s in &report.snrs {
        for c in &s.curves {
            for (k, p) in c.points.iter().enumerate() {
                for region in [Region::Slice, Region::Tissue] {
                    let m = p.get(region);
                    rows.push(MetricRow {
                        snr: s.snr,
                        nex: nex_label(k + 1),
                        domain: format!("{}_{}", c.scenario.name(), c.domain),
                        region,
                        psnr_db: m.psnr_db,
                        ssim: m.ssim,
                        mae: m.mae,
                    });
                }
            }
            for metric in [MetricKind::Psnr, MetricKind::Ssim] {
                for region in [Region::Slice, Region::Tissue] {
                    let name = format!("snr{}_{}_{}_{}_{}.csv", s.snr, c.scenario.name(), c.domain, metric.name(), region);
                    c.curve(metric, region).write_csv(&out.join("curves").join(name))?;
                }
            }
        }
        for d in &s.denoised {
            for region in [Region::Slice, Region::Tissue] {
                let m = d.mean.get(region);
                rows.push(MetricRow {
                    snr: s.snr,
                    nex: "1".into(),
                    domain: format!("denoised_{}", d.stage.name()),
                    region,
                    psnr_db: m.psnr_db,
                    ssim: m.ssim,
                    mae: m.mae,
                });
            }
        }
        for r in &s.equivalence {
            eq.write_record([
                s.snr.to_string(),
                r.scenario.name().to_string(),
                r.domain.to_string(),
                r.metric.name().to_string(),
                r.region.to_string(),
                r.nex.to_string(),
            ])
            .map_err(eq_err)?;
        }
    }
    eq.flush().map_err(|e| Error::io(out.join("nex_equivalence.csv"), e))?;
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    write_curve_plots(report, &out.join("curves"))?;

    for (name, m) in &report.maps {
        write_field(&out.join("maps").join(name), &FieldData::real_slice(m.clone()), DType::F32)?;
        let (lo, hi) = if name.starts_with("residual_mean") || name.contains("adc") {
            let a = m.data().iter().copied().filter(|v| v.is_finite()).fold(0.0, |acc: f64, v| acc.max(v.abs()));
            if name.contains("adc") { (0.0, a.max(1e-12)) } else { (-a.max(1e-12), a.max(1e-12)) }
        } else {
            auto_window(m)
        };
        write_grayscale_png(&out.join("previews").join(format!("{name}.png")), m, lo, hi)?;
    }
    if !report.profiles.is_empty() {
        let series: Vec<(&str, &[f64])> = report.profiles.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        write_profiles_csv(&out.join("residual_profiles.csv"), &series)?;
    }
    if let Some(t) = &report.motion_trace {
        t.save(&out.join("motion_trace.json"))?;
    }
    Ok(())
}

/// One PSNR and one SSIM plot per SNR and scenario (tissue region), with the
/// denoised NEX=1 values as horizontal lines.
pub fn write_curve_plots(report: &ExperimentReport, dir: &Path) -> Result<()> {
    for s in &report.snrs {
        for scenario in [Scenario::Static, Scenario::Motion] {
            if s.curves_for(scenario, AveragingDomain::Modulus).is_none() {
                continue;
            }
            for metric in [MetricKind::Psnr, MetricKind::Ssim] {
                let region = Region::Tissue;
                let files: Vec<(String, PathBuf)> = [AveragingDomain::Complex, AveragingDomain::Modulus]
                    .iter()
                    .map(|d| {
                        let name = format!("snr{}_{}_{}_{}_{}.csv", s.snr, scenario.name(), d, metric.name(), region);
                        (format!("{d} avg"), dir.join(name))
                    })
                    .collect();
                let curves: Vec<(&str, &Path)> = files.iter().map(|(l, p)| (l.as_str(), p.as_path())).collect();
                let lines: Vec<HorizontalLine> = s
                    .denoised
                    .iter()
                    .filter(|d| scenario == Scenario::Static || d.stage == DenoiseStage::PostCorrection)
                    .map(|d| HorizontalLine {
                        label: format!("{}-correction denoised", d.stage.name()),
                        value: metric.pick(d.mean.get(region)),
                    })
                    .collect();
                let title = format!("{} {} SNR {} ({})", metric.name(), region, s.snr, scenario.name());
                let y_label = if metric == MetricKind::Psnr { "PSNR (dB)" } else { "SSIM" };
                let png = dir.join(format!("snr{}_{}_{}_{}.png", s.snr, scenario.name(), metric.name(), region));
                export_plot(&curves, &lines, &title, y_label, &png)?;
            }
        }
    }
    Ok(())
}

/// Noise-free reference, acquired k-space of repetition 0, ghost correction
/// table and object mask of every test slice at every SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedAcquisition {
    pub slice_index: usize,
    pub snr: f64,
    pub kspace: ComplexSlice,
    pub correction: RealSlice,
    pub reference: RealSlice,
    pub mask: Mask,
}

pub fn simulate_acquisitions(cfg: &ExperimentConfig) -> Result<Vec<SimulatedAcquisition>> {
    cfg.validate()?;
    let phantom = Phantom::from_config(cfg)?;
    let slices = build_test_slices(cfg, &phantom)?;
    let epi = EpiModel::new(cfg.trajectory)?;
    let mut out = Vec::new();
    for &snr in &cfg.snr_list {
        for (i, s) in slices.iter().enumerate() {
            let clean = s.clean_at(snr)?;
            let kspace = acquire(&epi, &clean, &s.mask, cfg.ghost_amplitude, test_noise(cfg, i, 0)?.as_ref())?;
            let correction = ghost_template(&s.mask, -cfg.ghost_amplitude);
            let reference = modulus(&reconstruct_epi(
                &acquire(&epi, &clean, &s.mask, cfg.ghost_amplitude, None)?,
                &epi.kernel,
                &ghost_correction(&s.mask, cfg.ghost_amplitude),
            )?);
            out.push(SimulatedAcquisition { slice_index: i, snr, kspace, correction, reference, mask: s.mask.clone() });
        }
    }
    Ok(out)
}

/// Reconstruction with a per-row correction table (all zeros disables correction).
pub fn reconstruct_with_table(cfg: &ExperimentConfig, kspace: &ComplexSlice, table: &RealSlice) -> Result<ComplexSlice> {
    let epi = EpiModel::new(cfg.trajectory)?;
    let phase = if table.data().iter().all(|&v| v == 0.0) { GhostPhase::None } else { GhostPhase::PerRow(table.clone()) };
    reconstruct_epi(kspace, &epi.kernel, &phase)
}

#[doc(hidden)]
pub fn zero_complex(w: usize, h: usize) -> ComplexSlice {
    ComplexSlice::from_fn(w, h, |_, _| Complex64::new(0.0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Architecture;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            snr_list: vec![3.0],
            nex_max: 3,
            train_slices: 4,
            noise_maps: 5,
            maps_per_slice: 3,
            test_slices: 2,
            phantom: PhantomSource::Procedural { size: [181, 217, 181] },
            residual: ResidualConfig { instances: 4, snr: 3.0, profile_row: 80 },
            multicoil: MulticoilConfig { directions: 2, ..Default::default() },
            training: TrainConfig {
                architecture: Architecture { n1: 4, n2: 2, f1: 3, f2: 1, f3: 3 },
                max_epochs: 2,
                patience: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_model(seed: u64) -> SrcnnModel {
        SrcnnModel::init(Architecture { n1: 4, n2: 2, f1: 3, f2: 1, f3: 3 }, seed, 0.01).unwrap()
    }

    #[test]
    fn stride_split_counts_by_enumeration() {
        // 25 slices x 3 maps x 2 components, every 9th of 150 to validation
        let n = 25 * 3 * 2;
        let val = (1..=n).filter(|p| p % 9 == 0).count();
        assert_eq!((n - val, val), (134, 16));
    }

    #[test]
    fn noise_assignment_is_a_repetition_free_permutation() {
        for seed in 0..20 {
            let a = assign_noise_maps(seed, 25, 25, 3).unwrap();
            assert_eq!(a.len(), 25);
            let mut uses = [0usize; 25];
            for maps in &a {
                assert_eq!(maps.len(), 3);
                let mut m = maps.clone();
                m.sort();
                m.dedup();
                assert_eq!(m.len(), 3, "slice sees a map twice: {maps:?}");
                maps.iter().for_each(|&i| uses[i] += 1);
            }
            // every round is a permutation, so every map is used per_slice times
            assert!(uses.iter().all(|&u| u == 3));
            assert_eq!(a, assign_noise_maps(seed, 25, 25, 3).unwrap());
        }
    }

    #[test]
    fn too_few_noise_maps_is_a_config_error() {
        assert!(matches!(assign_noise_maps(0, 25, 24, 3), Err(Error::Config(_))));
        assert!(matches!(assign_noise_maps(0, 2, 2, 3), Err(Error::Config(_))));
        let cfg = ExperimentConfig { noise_maps: 2, ..small_config() };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        for bad in [
            ExperimentConfig { snr_list: vec![3.0, 0.0], ..Default::default() },
            ExperimentConfig { snr_list: vec![], ..Default::default() },
            ExperimentConfig { nex_max: 0, ..Default::default() },
            ExperimentConfig { psf_sigma: -1.0, ..Default::default() },
            ExperimentConfig { validation_stride: 1, ..Default::default() },
            ExperimentConfig { noise_profile: Some(vec![1.0; 10]), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cfg = small_config();
        cfg.save(&p).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap(), cfg);
        fs::write(&p, r#"{"seed": 3, "nex_max": 7}"#).unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!((c.seed, c.nex_max, c.snr_list.len()), (3, 7, 5));
        fs::write(&p, r#"{"seed": "x"}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
        fs::write(&p, r#"{"denoise_stage": "PRE_CORRECTION"}"#).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap().denoise_stage, DenoiseStage::PreCorrection);
    }

    #[test]
    fn small_dataset_manifest() {
        let cfg = small_config();
        let ds = generate_dataset(&cfg).unwrap();
        let m = &ds.manifest;
        assert_eq!(m.entries.len(), 4 * 3 * 2);
        assert_eq!((m.n_train, m.n_val), (22, 2));
        // exact cross product of assigned pairs and components
        let mut seen = std::collections::BTreeSet::new();
        for e in &m.entries {
            assert!(seen.insert((e.slice_id, e.noise_map_id, e.component as u8)));
        }
        let assignment = assign_noise_maps(cfg.seed, 4, 5, 3).unwrap();
        for (s, maps) in assignment.iter().enumerate() {
            for &n in maps {
                assert!(seen.contains(&(s, n, Component::Re as u8)) && seen.contains(&(s, n, Component::Im as u8)));
            }
        }
        // inputs are clean components plus the assigned noise component
        let e = m.entries[0];
        let ex = ds.example(&e).unwrap();
        let noise = component(&ds.noise[e.noise_map_id], e.component);
        for i in (0..ex.input.len()).step_by(997) {
            assert_eq!(ex.input.data()[i], ex.clean.data()[i] + noise.data()[i]);
        }
        // object mean modulus sits at the training SNR
        let clean = &ds.clean[0];
        let mag = modulus(clean);
        let mask = Mask::from_fn(mag.width(), mag.height(), |x, y| mag.get(x, y) > 0.0);
        assert!(masked_mean(&mag, &mask).unwrap() > 0.0);
        assert_eq!(ds, generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let cfg = ExperimentConfig { train_slices: 2, noise_maps: 3, maps_per_slice: 2, ..small_config() };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        fs::remove_file(dir.path().join("noise_002.raw")).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn test_and_training_streams_are_disjoint() {
        let cfg = small_config();
        let a = noise_field(&cfg, derive_seed(cfg.seed, &[stream::TRAIN_NOISE, 0])).unwrap();
        let b = test_noise(&cfg, 0, 0).unwrap().unwrap();
        assert_ne!(a, b);
        let phantom = Phantom::from_config(&cfg).unwrap();
        let test = build_test_slices(&cfg, &phantom).unwrap();
        let train = training_slice(&cfg, &phantom, 0, 100).unwrap();
        assert_ne!(test[0].phase.data()[..100], crate::phasefield::PhaseMap::zeros(320, 160).data()[..100]);
        let train_phase: Vec<f64> = train.clean.data().iter().map(|c| c.arg()).take(10).collect();
        assert!(train_phase.iter().all(|v| v.is_finite()));
        assert_ne!(
            random_phase_map(&mut rng_for(cfg.seed, &[stream::TRAIN_PHASE, 0]), &test[0].mask, &cfg.phase).unwrap(),
            test[0].phase
        );
    }

    #[test]
    fn noise_free_run_hits_perfect_sentinels() {
        let cfg = ExperimentConfig {
            noise_std: 0.0,
            test_slices: 1,
            compare_stages: false,
            residual: ResidualConfig { instances: 0, ..Default::default() },
            multicoil: MulticoilConfig { enabled: false, ..Default::default() },
            ..small_config()
        };
        let report = run_experiment(&cfg, &tiny_model(1)).unwrap();
        let s = &report.snrs[0];
        for c in &s.curves {
            for p in &c.points {
                for r in [&p.slice, &p.tissue] {
                    assert_eq!(r.psnr_db, f64::INFINITY);
                    assert_eq!(r.ssim, 1.0);
                    assert_eq!(r.mae, 0.0);
                }
            }
        }
        assert!(s.equivalence.iter().all(|r| r.nex == NexEquivalent::Nex(1)));
    }

    #[test]
    fn run_is_deterministic_and_writes_artifacts() {
        let cfg = ExperimentConfig {
            test_slices: 1,
            motion: MotionConfig { enabled: true, ..Default::default() },
            ..small_config()
        };
        let model = tiny_model(2);
        let a = run_experiment(&cfg, &model).unwrap();
        let b = run_experiment(&cfg, &model).unwrap();
        assert_eq!(a, b);
        assert!(a.snrs[0].curves_for(Scenario::Motion, AveragingDomain::Modulus).is_some());
        assert_eq!(a.snrs[0].denoised.len(), 2);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_report(&a, da.path()).unwrap();
        write_report(&b, db.path()).unwrap();
        for f in ["metrics.csv", "nex_equivalence.csv", "summary.json", "curves/snr3_static_modulus_psnr_tissue.csv"] {
            let x = fs::read(da.path().join(f)).unwrap();
            assert!(!x.is_empty(), "{f}");
            assert_eq!(x, fs::read(db.path().join(f)).unwrap(), "{f}");
        }
        assert!(da.path().join("curves/snr3_motion_psnr_tissue.png").exists());
        assert!(da.path().join("previews/snr3_reference.png").exists());
        assert!(da.path().join("maps/residual_mean_estimate.json").exists());
        assert!(da.path().join("residual_profiles.csv").exists());
    }

    #[test]
    fn averaging_improves_with_nex() {
        let cfg = ExperimentConfig { nex_max: 8, test_slices: 1, compare_stages: false, ..small_config() };
        let phantom = Phantom::from_config(&cfg).unwrap();
        let slices = build_test_slices(&cfg, &phantom).unwrap();
        let (reports, _) = evaluate_averaging(&cfg, &tiny_model(3), &slices, None).unwrap();
        let complex = reports[0].curves_for(Scenario::Static, AveragingDomain::Complex).unwrap();
        let c = complex.curve(MetricKind::Psnr, Region::Tissue).values;
        assert!(c[7] > c[0] + 6.0, "{c:?}");
        let modulus = reports[0].curves_for(Scenario::Static, AveragingDomain::Modulus).unwrap();
        let m = modulus.curve(MetricKind::Psnr, Region::Tissue).values;
        // complex averaging beats modulus averaging (no Rician bias)
        assert!(c[7] > m[7], "{c:?} {m:?}");
    }

    #[test]
    fn regions_are_disjoint_and_non_empty() {
        let cfg = small_config();
        let phantom = Phantom::from_config(&cfg).unwrap();
        let s = &build_test_slices(&cfg, &phantom).unwrap()[0];
        let clean = s.clean_at(3.0).unwrap().re();
        let r = analysis_regions(&clean, &s.mask).unwrap();
        for i in 0..clean.len() {
            let n = [r.background.data()[i], r.homogeneous.data()[i], r.edge.data()[i]].iter().filter(|&&b| b).count();
            assert!(n <= 1);
        }
    }

    #[test]
    fn multicoil_recovers_tissue_adc_scale() {
        let cfg = ExperimentConfig { multicoil: MulticoilConfig { snr: 200.0, ..Default::default() }, ..small_config() };
        let phantom = Phantom::from_config(&cfg).unwrap();
        let s = &build_test_slices(&cfg, &phantom).unwrap()[0];
        let (summary, maps) = multicoil_demo(&cfg, &phantom, s, 0).unwrap();
        // brain ADCs lie between white matter and CSF values
        assert!(summary.mean_adc_noise_free > 0.5e-3 && summary.mean_adc_noise_free < 3.1e-3, "{summary:?}");
        assert!((summary.mean_adc - summary.mean_adc_noise_free).abs() < 0.1 * summary.mean_adc_noise_free, "{summary:?}");
        assert!(maps.iter().any(|(n, _)| n == "multicoil_adc"));
    }

    #[test]
    fn simulate_then_reconstruct_matches_reference() {
        let cfg = ExperimentConfig { noise_std: 0.0, test_slices: 1, ..small_config() };
        let sims = simulate_acquisitions(&cfg).unwrap();
        let s = &sims[0];
        let img = modulus(&reconstruct_with_table(&cfg, &s.kspace, &s.correction).unwrap());
        let err: f64 = img.data().iter().zip(s.reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
