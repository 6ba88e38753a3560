//! Synthetic volumes: ellipsoid-union phantoms with a smooth bias field and
//! Gaussian noise, their on-disk format, and train/test splits.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

pub const MIN_DIM: usize = 8;
const MAGIC: [u8; 4] = *b"BV01";
const HEADER_LEN: usize = 4 + 12 + 1;
const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.25);

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::shape("volume", format!("dims {dims:?} below minimum {MIN_DIM}")));
    }
    Ok(())
}

/// Intensity grid in `[0, 1]`, row-major with W fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("volume", format!("{} voxels for dims {dims:?}", voxels.len())));
        }
        if let Some(v) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain("volume", format!("intensity {v} outside [0, 1]")));
        }
        Ok(Volume { dims, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    /// As a `[1, 1, D, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![1, 1, d, h, w], self.voxels.clone()).expect("volume shape")
    }
}

/// Binary ground-truth mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    mask: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], mask: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        if mask.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("label", format!("{} voxels for dims {dims:?}", mask.len())));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::domain("label", "label values must be 0 or 1"));
        }
        Ok(LabelVolume { dims, mask })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![1, 1, d, h, w], self.mask.iter().map(|&m| m as f64).collect()).expect("label shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub radius_range: [f64; 2],
    pub noise_sigma: f64,
    pub intensity_contrast: f64,
    pub background: f64,
    pub bias_amplitude: f64,
    pub max_attempts: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            dims: [32, 32, 32],
            n_blobs: 2,
            radius_range: [4.0, 8.0],
            noise_sigma: 0.05,
            intensity_contrast: 0.5,
            background: 0.25,
            bias_amplitude: 0.1,
            max_attempts: 100,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.dims).map_err(|e| Error::Config(e.to_string()))?;
        let [lo, hi] = self.radius_range;
        if self.n_blobs == 0 {
            return Err(Error::Config("n_blobs must be ≥ 1".into()));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("radius_range {:?} invalid", self.radius_range)));
        }
        let min_dim = *self.dims.iter().min().unwrap() as f64;
        if 2.0 * hi + 1.0 > min_dim {
            return Err(Error::Config(format!(
                "radius {hi} does not fit inside dims {:?}",
                self.dims
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0) {
            return Err(Error::Config("noise_sigma and bias_amplitude must be ≥ 0".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Rotation matrix from a uniformly random unit quaternion.
fn random_rotation(rng: &mut SeededRng) -> [[f64; 3]; 3] {
    let (u1, u2, u3) = (rng.next_f64(), rng.next_f64(), rng.next_f64());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for i in 0..3 {
            // Body-frame coordinate: rows of Rᵀ are columns of R.
            let q = self.rot[0][i] * d[0] + self.rot[1][i] * d[1] + self.rot[2][i] * d[2];
            s += (q / self.radii[i]).powi(2);
        }
        s <= 1.0
    }
}

fn place_mask(params: &GeneratorParams, rng: &mut SeededRng) -> Vec<u8> {
    let [dd, hh, ww] = params.dims;
    let [lo, hi] = params.radius_range;
    let blobs: Vec<Ellipsoid> = (0..params.n_blobs)
        .map(|_| {
            let radii = [rng.uniform_f64(lo, hi), rng.uniform_f64(lo, hi), rng.uniform_f64(lo, hi)];
            let center = [
                rng.uniform_f64(hi, dd as f64 - 1.0 - hi),
                rng.uniform_f64(hi, hh as f64 - 1.0 - hi),
                rng.uniform_f64(hi, ww as f64 - 1.0 - hi),
            ];
            Ellipsoid { center, radii, rot: random_rotation(rng) }
        })
        .collect();
    let mut mask = Vec::with_capacity(dd * hh * ww);
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                let p = [z as f64, y as f64, x as f64];
                mask.push(blobs.iter().any(|e| e.contains(p)) as u8);
            }
        }
    }
    mask
}

/// Generates one `(volume, label)` pair from the stream `rng`.
pub fn generate_case_with(params: &GeneratorParams, rng: &mut SeededRng) -> Result<(Volume, LabelVolume)> {
    params.validate()?;
    let n: usize = params.dims.iter().product();
    let mut mask = None;
    for _ in 0..params.max_attempts {
        let m = place_mask(params, rng);
        let frac = m.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&frac) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| Error::Placement {
        attempts: params.max_attempts,
        detail: format!(
            "foreground fraction never fell in [{}, {}]",
            FOREGROUND_RANGE.0, FOREGROUND_RANGE.1
        ),
    })?;

    // Low-frequency bias: a single oblique cosine, under one period across the volume.
    let freq = [rng.uniform_f64(0.3, 1.0), rng.uniform_f64(0.3, 1.0), rng.uniform_f64(0.3, 1.0)];
    let phase = rng.uniform_f64(0.0, 2.0 * PI);
    let [dd, hh, ww] = params.dims;
    let mut voxels = Vec::with_capacity(n);
    let mut i = 0;
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                let arg = freq[0] * z as f64 / dd as f64 + freq[1] * y as f64 / hh as f64 + freq[2] * x as f64 / ww as f64;
                let bias = params.bias_amplitude * (2.0 * PI * arg + phase).cos();
                let noise = if params.noise_sigma > 0.0 { params.noise_sigma * rng.normal() } else { 0.0 };
                let v = params.background + params.intensity_contrast * mask[i] as f64 + bias + noise;
                voxels.push(v.clamp(0.0, 1.0));
                i += 1;
            }
        }
    }
    Ok((Volume::new(params.dims, voxels)?, LabelVolume::new(params.dims, mask)?))
}

pub fn generate_case(seed: u64, params: &GeneratorParams) -> Result<(Volume, LabelVolume)> {
    generate_case_with(params, &mut SeededRng::new(seed))
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Intensity(Volume),
    Label(LabelVolume),
}

impl From<Volume> for VolumeFile {
    fn from(v: Volume) -> Self {
        VolumeFile::Intensity(v)
    }
}

impl From<LabelVolume> for VolumeFile {
    fn from(v: LabelVolume) -> Self {
        VolumeFile::Label(v)
    }
}

pub fn encode_volume(file: &VolumeFile) -> Vec<u8> {
    let (dims, kind) = match file {
        VolumeFile::Intensity(v) => (v.dims, 0u8),
        VolumeFile::Label(l) => (l.dims, 1u8),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + dims.iter().product::<usize>() * 8);
    out.extend_from_slice(&MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(kind);
    match file {
        VolumeFile::Intensity(v) => v.voxels.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeFile::Label(l) => out.extend_from_slice(&l.mask),
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let kind = bytes[16];
    let n: usize = dims.iter().product();
    let elem = match kind {
        0 => 8,
        1 => 1,
        k => return Err(Error::Format(format!("unknown volume kind {k}"))),
    };
    let payload = &bytes[HEADER_LEN..];
    let expected = n * elem;
    if payload.len() < expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "dims {dims:?} imply {expected} payload bytes, file has {}",
            payload.len()
        )));
    }
    Ok(match kind {
        0 => VolumeFile::Intensity(Volume::new(
            dims,
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
        _ => VolumeFile::Label(LabelVolume::new(dims, payload.to_vec())?),
    })
}

pub fn write_volume(path: impl AsRef<Path>, file: &VolumeFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(file)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

// ---------------------------------------------------------------------------
// Splits and datasets
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub generator_params: GeneratorParams,
}

impl DatasetManifest {
    pub fn all_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .chain(&self.test_ids)
            .copied()
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Shuffles `0..n_cases`, takes the first `n_test` as test cases and labels
/// `round(labeled_ratio · n_train)` of the rest.
pub fn make_split(n_cases: usize, labeled_ratio: f64, n_test: usize, seed: u64) -> Result<DatasetManifest> {
    if !(labeled_ratio > 0.0 && labeled_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("labeled_ratio {labeled_ratio} not in (0, 1)")));
    }
    if n_test >= n_cases {
        return Err(Error::InvalidArgument(format!("n_test {n_test} must be < n_cases {n_cases}")));
    }
    let n_train = n_cases - n_test;
    let n_labeled = (labeled_ratio * n_train as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {labeled_ratio} of {n_train} training cases yields no labeled case"
        )));
    }
    let mut ids: Vec<usize> = (0..n_cases).collect();
    SeededRng::stream(seed, u64::MAX).shuffle(&mut ids);
    let mut test_ids = ids[..n_test].to_vec();
    let mut labeled_ids = ids[n_test..n_test + n_labeled].to_vec();
    let mut unlabeled_ids = ids[n_test + n_labeled..].to_vec();
    test_ids.sort_unstable();
    labeled_ids.sort_unstable();
    unlabeled_ids.sort_unstable();
    Ok(DatasetManifest {
        seed,
        labeled_ids,
        unlabeled_ids,
        test_ids,
        generator_params: GeneratorParams::default(),
    })
}

#[derive(Clone, Debug)]
pub struct Case {
    pub id: usize,
    pub volume: Volume,
    pub label: LabelVolume,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("case_{id:03}_image.bv"))
}

pub fn label_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("case_{id:03}_label.bv"))
}

/// Case `id` of the dataset seeded by `seed`.
pub fn generate_dataset_case(seed: u64, id: usize, params: &GeneratorParams) -> Result<Case> {
    let (volume, label) = generate_case_with(params, &mut SeededRng::stream(seed, id as u64))?;
    Ok(Case { id, volume, label })
}

/// Writes every case of `manifest` plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.generator_params.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for id in manifest.all_ids() {
        let case = generate_dataset_case(manifest.seed, id, &manifest.generator_params)?;
        write_volume(image_path(dir, id), &case.volume.into())?;
        write_volume(label_path(dir, id), &case.label.into())?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_case(dir: &Path, id: usize) -> Result<Case> {
    let (ip, lp) = (image_path(dir, id), label_path(dir, id));
    for p in [&ip, &lp] {
        if !p.exists() {
            return Err(Error::MissingCase { id, path: p.clone() });
        }
    }
    let volume = match read_volume(&ip)? {
        VolumeFile::Intensity(v) => v,
        VolumeFile::Label(_) => return Err(Error::Format(format!("{} holds a label volume", ip.display()))),
    };
    let label = match read_volume(&lp)? {
        VolumeFile::Label(l) => l,
        VolumeFile::Intensity(_) => return Err(Error::Format(format!("{} holds an intensity volume", lp.display()))),
    };
    if volume.dims() != label.dims() {
        return Err(Error::shape("load_case", format!("image {:?} vs label {:?}", volume.dims(), label.dims())));
    }
    Ok(Case { id, volume, label })
}
