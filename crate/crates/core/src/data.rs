//! Synthetic volume pairs, HU windowing, patching, augmentation, and the
//! `LITVOL01` volume file format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3071.0;
pub const AIR_HU: f32 = -1000.0;
/// Display window mapped onto [0, 1].
pub const WINDOW: (f64, f64) = (-1000.0, 2000.0);

pub const MAGIC: &[u8; 8] = b"LITVOL01";
const HEADER_LEN: usize = 8 + 12 + 4 + 12;

/// A `D × H × W` grid of Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dhw: [usize; 3],
    /// Slice interval, row pixel, column pixel (mm).
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dhw: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dhw.iter().any(|&e| e == 0) || dhw.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!("volume {dhw:?} with {} values", data.len())));
        }
        Ok(Self { dhw, spacing, data })
    }

    pub fn filled(dhw: [usize; 3], spacing: [f32; 3], v: f32) -> Self {
        Self { dhw, spacing, data: vec![v; dhw.iter().product()] }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.dhw;
        self.data[(z * h + y) * w + x]
    }

    /// Sub-block starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| origin[a] + size[a] > self.dhw[a]) {
            return Err(Error::Dimension(format!("crop {origin:?}+{size:?} outside {:?}", self.dhw)));
        }
        let [_, h, w] = self.dhw;
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let row = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                data.extend_from_slice(&self.data[row..row + size[2]]);
            }
        }
        Self::new(size, self.spacing, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dhw: [usize; 3],
    /// Number of interior ellipsoids per volume.
    pub structures: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { dhw: [32, 64, 64], structures: 14 }
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
    hu: f64,
    /// HU change per unit of normalized offset along each axis.
    slope: [f64; 3],
}

impl Ellipsoid {
    /// Normalized offset from the centre if inside.
    fn offset(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let o = [0, 1, 2].map(|a| (p[a] - self.centre[a]) / self.radii[a]);
        (o.iter().map(|v| v * v).sum::<f64>() <= 1.0).then_some(o)
    }

    fn value(&self, o: [f64; 3]) -> f64 {
        self.hu + self.slope.iter().zip(o).map(|(s, v)| s * v).sum::<f64>()
    }
}

/// Deterministic body phantom: a soft-tissue envelope containing tissue,
/// bone and air ellipsoids with mild internal gradients; air outside.
pub fn make_phantom(seed: u64, dhw: [usize; 3], structures: usize) -> Result<Volume> {
    if dhw.iter().any(|&e| e == 0) {
        return Err(Error::Dimension(format!("phantom extent {dhw:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = dhw.map(|e| e as f64);
    let body = Ellipsoid {
        centre: ext.map(|e| (e - 1.0) / 2.0),
        radii: [ext[0] * 0.62, ext[1] * rng.random_range(0.40..0.47), ext[2] * rng.random_range(0.40..0.47)],
        hu: rng.random_range(20.0..60.0),
        slope: [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)],
    };
    let mut inner = Vec::with_capacity(structures);
    for _ in 0..structures {
        let kind: f64 = rng.random();
        let hu: f64 = if kind < 0.45 {
            rng.random_range(0.0..100.0)
        } else if kind < 0.8 {
            rng.random_range(400.0..1000.0)
        } else {
            rng.random_range(-950.0..-700.0)
        };
        let r = [
            rng.random_range(0.06..0.30) * ext[0],
            rng.random_range(0.03..0.14) * ext[1],
            rng.random_range(0.03..0.14) * ext[2],
        ];
        let c = [0, 1, 2].map(|a| body.centre[a] + rng.random_range(-0.6..0.6) * body.radii[a]);
        let g = (hu.abs() * 0.05).max(5.0);
        let slope = [rng.random_range(-g..g), rng.random_range(-g..g), rng.random_range(-g..g)];
        inner.push(Ellipsoid { centre: c, radii: r, hu, slope });
    }
    let [d, h, w] = dhw;
    let mut data = vec![AIR_HU; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let Some(o) = body.offset(p) else { continue };
                let mut v = body.value(o);
                // later structures paint over earlier ones
                for e in &inner {
                    if let Some(o) = e.offset(p) {
                        v = e.value(o);
                    }
                }
                data[(z * h + y) * w + x] = (v as f32).clamp(HU_MIN, HU_MAX);
            }
        }
    }
    Volume::new(dhw, [1.0, 0.8, 0.8], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    /// Consecutive slices averaged into one.
    pub depth_factor: usize,
    pub noise_sigma_hu: f64,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { depth_factor: 2, noise_sigma_hu: 25.0, seed: 0 }
    }
}

/// Averages disjoint groups of `depth_factor` slices, then adds seeded
/// Gaussian noise in the image domain.
pub fn degrade(v: &Volume, cfg: &DegradeConfig) -> Result<Volume> {
    let r = cfg.depth_factor;
    let [d, h, w] = v.dhw;
    if r < 2 || d % r != 0 {
        return Err(Error::Contract(format!("depth factor {r} must be >= 2 and divide depth {d}")));
    }
    if !(cfg.noise_sigma_hu >= 0.0 && cfg.noise_sigma_hu.is_finite()) {
        return Err(Error::Config(format!("noise sigma {}", cfg.noise_sigma_hu)));
    }
    let plane = h * w;
    let mut data = vec![0f32; d / r * plane];
    for (oz, out) in data.chunks_mut(plane).enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = (0..r).map(|k| v.data[(oz * r + k) * plane + i] as f64).sum();
            *o = (s / r as f64) as f32;
        }
    }
    if cfg.noise_sigma_hu > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_sigma_hu).map_err(|e| Error::Config(e.to_string()))?;
        for o in &mut data {
            *o = (*o as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    let spacing = [v.spacing[0] * r as f32, v.spacing[1], v.spacing[2]];
    Volume::new([d / r, h, w], spacing, data)
}

/// Clamp to the display window and map it onto [0, 1].
pub fn normalize_hu(x: f64) -> f64 {
    (x.clamp(WINDOW.0, WINDOW.1) - WINDOW.0) / (WINDOW.1 - WINDOW.0)
}

pub fn denormalize_hu(y: f64) -> f64 {
    y * (WINDOW.1 - WINDOW.0) + WINDOW.0
}

/// Normalized `(1, 1, D, H, W)` tensor.
pub fn normalize(v: &Volume) -> Tensor<f64> {
    let [d, h, w] = v.dhw;
    Tensor::new(&[1, 1, d, h, w], v.data.iter().map(|&x| normalize_hu(x as f64)).collect())
        .expect("volume extents are positive")
}

pub fn denormalize(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&y| denormalize_hu(y)).collect()
}

/// Window start positions: regular steps, plus a final window flush with
/// the edge when the steps leave a remainder.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 || patch > len {
        return Err(Error::Dimension(format!("patch {patch} stride {stride} on extent {len}")));
    }
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + patch <= len).collect();
    if v.last().is_some_and(|&s| s + patch < len) {
        v.push(len - patch);
    }
    Ok(v)
}

/// An aligned input/target block pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub input: Volume,
    pub target: Volume,
    /// Input-grid origin.
    pub origin: [usize; 3],
}

/// Slides `patch` over the low-resolution grid and cuts the matching
/// target block (`r` times deeper). Order is shuffled by `seed`.
pub fn extract_patches(
    ldr: &Volume,
    ndr: &Volume,
    patch: [usize; 3],
    stride: [usize; 3],
    seed: u64,
) -> Result<Vec<PatchPair>> {
    let [d, h, w] = ldr.dhw;
    let r = ndr.dhw[0] / d;
    if r == 0 || ndr.dhw != [d * r, h, w] {
        return Err(Error::Dimension(format!("target {:?} is not an integer depth multiple of {:?}", ndr.dhw, ldr.dhw)));
    }
    let zs = window_starts(d, patch[0], stride[0])?;
    let ys = window_starts(h, patch[1], stride[1])?;
    let xs = window_starts(w, patch[2], stride[2])?;
    let mut origins = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push([z, y, x]);
            }
        }
    }
    origins.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    origins
        .into_iter()
        .map(|o| {
            Ok(PatchPair {
                input: ldr.crop(o, patch)?,
                target: ndr.crop([o[0] * r, o[1], o[2]], [patch[0] * r, patch[1], patch[2]])?,
                origin: o,
            })
        })
        .collect()
}

/// Transverse-only augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aug {
    Identity,
    FlipH,
    Rot90,
    Rot180,
    Rot270,
}

impl Aug {
    pub const ALL: [Aug; 5] = [Aug::Identity, Aug::FlipH, Aug::Rot90, Aug::Rot180, Aug::Rot270];

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    pub fn inverse(self) -> Self {
        match self {
            Aug::Rot90 => Aug::Rot270,
            Aug::Rot270 => Aug::Rot90,
            a => a,
        }
    }

    /// Counter-clockwise quarter turns, for the rotations.
    pub fn quarter_turns(self) -> Option<usize> {
        match self {
            Aug::Identity => Some(0),
            Aug::Rot90 => Some(1),
            Aug::Rot180 => Some(2),
            Aug::Rot270 => Some(3),
            Aug::FlipH => None,
        }
    }

    pub fn apply(self, v: &Volume) -> Volume {
        let [d, h, w] = v.dhw;
        let (oh, ow) = match self {
            Aug::Rot90 | Aug::Rot270 => (w, h),
            _ => (h, w),
        };
        let mut data = Vec::with_capacity(v.data.len());
        for z in 0..d {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = match self {
                        Aug::Identity => (y, x),
                        Aug::FlipH => (y, w - 1 - x),
                        Aug::Rot90 => (x, w - 1 - y),
                        Aug::Rot180 => (h - 1 - y, w - 1 - x),
                        Aug::Rot270 => (h - 1 - x, y),
                    };
                    data.push(v.at(z, sy, sx));
                }
            }
        }
        let spacing = match self {
            Aug::Rot90 | Aug::Rot270 => [v.spacing[0], v.spacing[2], v.spacing[1]],
            _ => v.spacing,
        };
        Volume { dhw: [d, oh, ow], spacing, data }
    }
}

/// Applies one seeded transform identically to input and target.
pub fn augment(pair: &PatchPair, seed: u64) -> (PatchPair, Aug) {
    let aug = Aug::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let out = PatchPair { input: aug.apply(&pair.input), target: aug.apply(&pair.target), origin: pair.origin };
    (out, aug)
}

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut b = Vec::with_capacity(HEADER_LEN + 4 * v.data.len());
    b.extend_from_slice(MAGIC);
    for e in v.dhw {
        b.extend_from_slice(&(e as u32).to_le_bytes());
    }
    b.extend_from_slice(&0u32.to_le_bytes());
    for s in v.spacing {
        b.extend_from_slice(&s.to_le_bytes());
    }
    for x in &v.data {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b
}

pub fn decode_volume(b: &[u8]) -> Result<Volume> {
    let u32_at = |off: usize, what: &str| -> Result<u32> {
        match b.get(off..off + 4) {
            Some(s) => Ok(u32::from_le_bytes(s.try_into().expect("4 bytes"))),
            None => fmt_err(b.len().min(off), format!("truncated header: missing {what}")),
        }
    };
    if b.len() < 8 || &b[..8] != MAGIC {
        return fmt_err(0, "bad magic, expected LITVOL01");
    }
    let dims = [u32_at(8, "depth")?, u32_at(12, "height")?, u32_at(16, "width")?].map(|e| e as usize);
    if let Some(a) = dims.iter().position(|&e| e == 0) {
        return fmt_err(8 + 4 * a, "zero extent");
    }
    let dtype = u32_at(20, "dtype")?;
    if dtype != 0 {
        return fmt_err(20, format!("unknown dtype flag {dtype}"));
    }
    let spacing = [
        f32::from_bits(u32_at(24, "spacing")?),
        f32::from_bits(u32_at(28, "spacing")?),
        f32::from_bits(u32_at(32, "spacing")?),
    ];
    let n: usize = dims.iter().product();
    let need = HEADER_LEN + 4 * n;
    if b.len() < need {
        return fmt_err(b.len(), format!("truncated payload: {} of {} bytes", b.len(), need));
    }
    if b.len() > need {
        return fmt_err(need, format!("{} trailing bytes", b.len() - need));
    }
    let data = b[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Volume::new(dims, spacing, data)
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// One simulated pair, paths relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ldr: String,
    pub ndr: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub noise_model: String,
    pub pairs: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    /// Loads every pair, resolving paths against `root`.
    pub fn load_pairs(&self, root: &Path) -> Result<Vec<(String, Volume, Volume)>> {
        self.pairs
            .iter()
            .map(|e| Ok((e.id.clone(), read_volume(&root.join(&e.ldr))?, read_volume(&root.join(&e.ndr))?)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub volumes: usize,
    pub phantom: PhantomConfig,
    pub degrade: DegradeConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { volumes: 4, phantom: PhantomConfig::default(), degrade: DegradeConfig::default() }
    }
}

/// Per-volume seeds derived from one base seed.
pub fn volume_seeds(seed: u64, i: usize) -> (u64, u64) {
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 * 2 + 1);
    (base, base ^ 0xD1B5_4A32_D192_ED03)
}

/// Generates phantom pairs in memory.
pub fn simulate_pairs(cfg: &SimulateConfig, seed: u64) -> Result<Vec<(String, Volume, Volume)>> {
    (0..cfg.volumes)
        .map(|i| {
            let (ps, ns) = volume_seeds(seed, i);
            let ndr = make_phantom(ps, cfg.phantom.dhw, cfg.phantom.structures)?;
            let ldr = degrade(&ndr, &DegradeConfig { seed: ns, ..cfg.degrade.clone() })?;
            Ok((format!("vol{i:03}"), ldr, ndr))
        })
        .collect()
}

/// Writes simulated pairs plus a manifest into `dir`.
pub fn simulate_dataset(dir: &Path, cfg: &SimulateConfig, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        noise_model: format!("image-domain gaussian, sigma {} HU (simplified)", cfg.degrade.noise_sigma_hu),
        pairs: Vec::new(),
    };
    for (id, ldr, ndr) in simulate_pairs(cfg, seed)? {
        let (l, n) = (format!("{id}_ldr.litvol"), format!("{id}_ndr.litvol"));
        write_volume(&dir.join(&l), &ldr)?;
        write_volume(&dir.join(&n), &ndr)?;
        manifest.pairs.push(ManifestEntry { id, ldr: l, ndr: n });
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests;
