//! Procedural multi-object feature grids with ground-truth masks.
//!
//! Each object is a rectangle or ellipse on an `H x W` grid. Its cells carry
//! the embedding of one of its category's appearance modes plus Gaussian
//! noise. With more than one mode an object is cut into bands along a random
//! axis and every band gets a different mode, so its features are no longer
//! homogeneous.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAX_ATTEMPTS: usize = 1000;
pub const MIN_OBJECT_CELLS: usize = 4;
const PLACEMENT_TRIES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub feat_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub categories: usize,
    /// Appearance modes per category.
    pub modes: usize,
    /// Number of background embeddings; each scene picks one.
    pub background_modes: usize,
    pub noise: f64,
    /// Seed for the category and background embeddings.
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            feat_dim: 32,
            min_objects: 2,
            max_objects: 4,
            categories: 8,
            modes: 2,
            background_modes: 1,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h < 2 || self.grid_w < 2 {
            return Err(Error::Config("grid must be at least 2x2".into()));
        }
        if self.feat_dim == 0 || self.categories == 0 || self.modes == 0 || self.background_modes == 0 {
            return Err(Error::Config(
                "feat_dim, categories, modes and background_modes must be positive".into(),
            ));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// splitmix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for item `index` of the stream named `tag`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix64(base);
    for b in tag.bytes() {
        h = mix64(h ^ b as u64);
    }
    mix64(h ^ mix64(index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Fixed embeddings shared by every scene of a spec.
#[derive(Clone, Debug)]
pub struct World {
    /// `[category][mode]` unit vectors.
    pub modes: Vec<Vec<Vec<f64>>>,
    pub background: Vec<Vec<f64>>,
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl World {
    pub fn new(spec: &SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "world", 0));
        let modes = (0..spec.categories)
            .map(|_| (0..spec.modes).map(|_| unit_vector(spec.feat_dim, &mut rng)).collect())
            .collect();
        let background = (0..spec.background_modes)
            .map(|_| unit_vector(spec.feat_dim, &mut rng))
            .collect();
        Self { modes, background }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `N x feat_dim`, row-major over the grid.
    pub features: Tensor,
    pub gt_masks: Vec<Vec<bool>>,
    /// Instance id per position, 0 for background.
    pub gt_labels: Vec<usize>,
    pub categories: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SceneSample {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn num_objects(&self) -> usize {
        self.gt_masks.len()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.gt_labels.iter().map(|&l| l > 0).collect()
    }

    /// Background mask followed by one mask per object.
    pub fn masks_with_background(&self) -> Vec<Vec<bool>> {
        let mut out = vec![self.gt_labels.iter().map(|&l| l == 0).collect()];
        out.extend(self.gt_masks.iter().cloned());
        out
    }

    /// Additions performed to synthesise the features (one noise add per value).
    pub fn synthesis_flops(&self) -> u64 {
        self.features.numel() as u64
    }

    /// `(row, col)` of every cell of object `obj`.
    pub fn object_cells(&self, obj: usize) -> Vec<(usize, usize)> {
        self.gt_masks[obj]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }
}

fn sample_shape(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<usize> {
    let (h, w) = (spec.grid_h, spec.grid_w);
    let max_side = |n: usize| (n * 3 / 8).clamp(2, n);
    if rng.gen_bool(0.5) {
        let rh = rng.gen_range(2..=max_side(h));
        let rw = rng.gen_range(2..=max_side(w));
        let top = rng.gen_range(0..=h - rh);
        let left = rng.gen_range(0..=w - rw);
        (top..top + rh)
            .flat_map(|r| (left..left + rw).map(move |c| r * w + c))
            .collect()
    } else {
        let ry = rng.gen_range(1.0..=(h as f64 / 5.0).max(1.6));
        let rx = rng.gen_range(1.0..=(w as f64 / 5.0).max(1.6));
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let mut cells = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    cells.push(r * w + c);
                }
            }
        }
        cells
    }
}

/// Draws one scene. Rejection sampling places objects without overlap.
pub fn generate(spec: &SceneSpec, world: &World, rng: &mut impl Rng) -> Result<SceneSample> {
    spec.validate()?;
    let (h, w, f) = (spec.grid_h, spec.grid_w, spec.feat_dim);
    let n = h * w;
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);

    // A layout attempt places objects one by one with a few tries each and
    // starts over when an object does not fit.
    let mut labels = vec![0usize; n];
    let mut objects: Vec<Vec<usize>> = Vec::with_capacity(count);
    let mut placed = false;
    for _ in 0..MAX_ATTEMPTS {
        labels.iter_mut().for_each(|l| *l = 0);
        objects.clear();
        while objects.len() < count {
            let fit = (0..PLACEMENT_TRIES).find_map(|_| {
                let cells = sample_shape(spec, rng);
                (cells.len() >= MIN_OBJECT_CELLS && cells.iter().all(|&i| labels[i] == 0)).then_some(cells)
            });
            let Some(cells) = fit else { break };
            let id = objects.len() + 1;
            for &i in &cells {
                labels[i] = id;
            }
            objects.push(cells);
        }
        if objects.len() == count {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Infeasible(format!(
            "could not place {count} objects on a {h}x{w} grid in {MAX_ATTEMPTS} attempts"
        )));
    }

    let bg = &world.background[rng.gen_range(0..world.background.len())];
    let mut data = Vec::with_capacity(n * f);
    for _ in 0..n {
        data.extend_from_slice(bg);
    }
    let mut categories = Vec::with_capacity(count);
    for cells in &objects {
        let cat = rng.gen_range(0..spec.categories);
        categories.push(cat);
        let mut order: Vec<usize> = (0..spec.modes).collect();
        order.shuffle(rng);
        let vertical = rng.gen_bool(0.5);
        let (lo, extent) = span(cells, w, vertical);
        let bands = spec.modes.min(extent);
        for &i in cells {
            let coord = if vertical { i % w } else { i / w };
            let band = ((coord - lo) * bands) / extent;
            let emb = &world.modes[cat][order[band]];
            data[i * f..(i + 1) * f].copy_from_slice(emb);
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("noise validated");
        for v in data.iter_mut() {
            *v += normal.sample(rng);
        }
    }

    let gt_masks = (1..=count)
        .map(|id| labels.iter().map(|&l| l == id).collect())
        .collect();
    Ok(SceneSample {
        features: Tensor::matrix(n, f, data)?,
        gt_masks,
        gt_labels: labels,
        categories,
        height: h,
        width: w,
        seed: 0,
    })
}

fn span(cells: &[usize], w: usize, columns: bool) -> (usize, usize) {
    let coord = |i: usize| if columns { i % w } else { i / w };
    let lo = cells.iter().map(|&i| coord(i)).min().unwrap_or(0);
    let hi = cells.iter().map(|&i| coord(i)).max().unwrap_or(0);
    (lo, hi - lo + 1)
}

/// Scene `index` of a split; pure in `(spec, split, index)`.
pub fn generate_indexed(spec: &SceneSpec, world: &World, split: Split, index: u64) -> Result<SceneSample> {
    let seed = derive_seed(spec.seed, split.tag(), index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = generate(spec, world, &mut rng)?;
    s.seed = seed;
    Ok(s)
}

/// Infinite deterministic stream of training batches.
pub struct SceneStream {
    spec: SceneSpec,
    world: World,
    batch: usize,
    next: u64,
}

impl SceneStream {
    pub fn new(spec: &SceneSpec, batch: usize) -> Self {
        Self {
            spec: spec.clone(),
            world: World::new(spec),
            batch,
            next: 0,
        }
    }

    /// Starts at batch `b` (used when resuming).
    pub fn starting_at(spec: &SceneSpec, batch: usize, b: u64) -> Self {
        let mut s = Self::new(spec, batch);
        s.next = b;
        s
    }

    pub fn batch_at(&self, b: u64) -> Result<Vec<SceneSample>> {
        let start = b * self.batch as u64;
        (start..start + self.batch as u64)
            .map(|i| generate_indexed(&self.spec, &self.world, Split::Train, i))
            .collect()
    }
}

impl Iterator for SceneStream {
    type Item = Result<Vec<SceneSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        let out = self.batch_at(self.next);
        self.next += 1;
        Some(out)
    }
}

pub fn dataset_stream(spec: &SceneSpec, batch: usize) -> SceneStream {
    SceneStream::new(spec, batch)
}

pub const DEFAULT_EVAL_SCENES: usize = 512;

pub fn eval_split(spec: &SceneSpec, count: usize) -> Result<Vec<SceneSample>> {
    let world = World::new(spec);
    (0..count as u64)
        .map(|i| generate_indexed(spec, &world, Split::Eval, i))
        .collect()
}

const MAGIC: &[u8; 4] = b"SCN1";
const VERSION: u32 = 1;

/// Binary layout, all little-endian:
/// magic `SCN1`, u32 version, u32 height, u32 width, u32 feat_dim,
/// u32 objects, u64 seed, `N*feat_dim` f64 features, then per object
/// a u32 category and a `ceil(N/8)`-byte mask bitmap (LSB first).
pub fn encode_sample(s: &SceneSample) -> Vec<u8> {
    let n = s.positions();
    let mut out = Vec::with_capacity(32 + s.features.numel() * 8);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, s.height as u32, s.width as u32, s.features.cols() as u32, s.num_objects() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.seed.to_le_bytes());
    for v in s.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (mask, &cat) in s.gt_masks.iter().zip(&s.categories) {
        out.extend_from_slice(&(cat as u32).to_le_bytes());
        let mut bits = vec![0u8; n.div_ceil(8)];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            bits[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bits);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated scene file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<SceneSample> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let feat = r.u32()? as usize;
    let objects = r.u32()? as usize;
    let seed = r.u64()?;
    let n = height * width;
    if n == 0 || feat == 0 {
        return Err(Error::format(path, "empty grid"));
    }
    let raw = r.take(n * feat * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut gt_masks = Vec::with_capacity(objects);
    let mut categories = Vec::with_capacity(objects);
    let mut labels = vec![0usize; n];
    for id in 1..=objects {
        categories.push(r.u32()? as usize);
        let bits = r.take(n.div_ceil(8))?;
        let mask: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            if labels[i] != 0 {
                return Err(Error::format(path, "overlapping object masks"));
            }
            labels[i] = id;
        }
        gt_masks.push(mask);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(SceneSample {
        features: Tensor::matrix(n, feat, data)?,
        gt_masks,
        gt_labels: labels,
        categories,
        height,
        width,
        seed,
    })
}

pub fn write_sample(path: &Path, s: &SceneSample) -> Result<()> {
    fs::write(path, encode_sample(s)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<SceneSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, path)
}

/// Writes `dir/<split>/NNNNN.scn` files plus `dir/<split>/index.txt`.
/// Returns the written paths.
pub fn write_split(dir: &Path, spec: &SceneSpec, split: Split, count: usize) -> Result<Vec<PathBuf>> {
    let sub = dir.join(split.tag());
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let world = World::new(spec);
    let mut names = Vec::with_capacity(count);
    let mut paths = Vec::with_capacity(count + 1);
    for i in 0..count {
        let s = generate_indexed(spec, &world, split, i as u64)?;
        let name = format!("{i:05}.scn");
        let p = sub.join(&name);
        write_sample(&p, &s)?;
        names.push(name);
        paths.push(p);
    }
    let index = sub.join("index.txt");
    let mut f = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let header = format!(
        "# topdown scenes v{VERSION}\nsplit={} height={} width={} feat_dim={} count={count} seed={}\n",
        split.tag(),
        spec.grid_h,
        spec.grid_w,
        spec.feat_dim,
        spec.seed
    );
    f.write_all(header.as_bytes()).map_err(|e| Error::io(&index, e))?;
    for name in &names {
        writeln!(f, "{name}").map_err(|e| Error::io(&index, e))?;
    }
    paths.push(index);
    Ok(paths)
}

/// Header of a split's index file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndex {
    pub height: usize,
    pub width: usize,
    pub feat_dim: usize,
    pub files: Vec<PathBuf>,
}

pub fn read_index(dir: &Path, split: Split) -> Result<SplitIndex> {
    let sub = dir.join(split.tag());
    let index = sub.join("index.txt");
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format(&index, "missing header"))?;
    let field = |key: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .ok_or_else(|| Error::format(&index, format!("missing `{key}`")))?
            .parse()
            .map_err(|_| Error::format(&index, format!("bad `{key}`")))
    };
    let (height, width, feat_dim, count) = (field("height")?, field("width")?, field("feat_dim")?, field("count")?);
    let files: Vec<PathBuf> = lines.map(|l| sub.join(l.trim())).collect();
    if files.len() != count {
        return Err(Error::format(&index, format!("expected {count} entries, found {}", files.len())));
    }
    Ok(SplitIndex {
        height,
        width,
        feat_dim,
        files,
    })
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<SceneSample>> {
    read_index(dir, split)?.files.iter().map(|p| read_sample(p)).collect()
}

/// Mean over objects of the per-object feature variance (summed over channels).
pub fn mean_within_object_variance(samples: &[SceneSample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let f = s.features.cols();
        for mask in &s.gt_masks {
            let cells: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let m = cells.len() as f64;
            let mut var = 0.0;
            for c in 0..f {
                let mean = cells.iter().map(|&i| s.features.get(i, c)).sum::<f64>() / m;
                var += cells.iter().map(|&i| (s.features.get(i, c) - mean).powi(2)).sum::<f64>() / m;
            }
            total += var;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
