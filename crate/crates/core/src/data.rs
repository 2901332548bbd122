//! Data ingestion and task construction: standardization, patches, masks,
//! held-out splits, file formats and the MCMC warm start.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BpfaError, Result};
use crate::gibbs_baseline::{run_chain, ChainOptions, ChainState};
use crate::model::{Dataset, Hyperparameters};
use crate::rng::{purpose, stream, Rng};
use crate::variational::GlobalVariationalState;

/// A grayscale image with pixel values in `[0, max_value]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub max_value: f64,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, max_value: f64) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(BpfaError::Shape(format!(
                "{} pixels for a {height}×{width} image",
                pixels.len()
            )));
        }
        if !(max_value > 0.0) {
            return Err(BpfaError::InvalidArgument("max_value must be positive".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            max_value,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// Top-left `h × w` sub-image.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(BpfaError::Shape("crop exceeds image bounds".into()));
        }
        let pixels = (top..top + h)
            .flat_map(|r| (left..left + w).map(move |c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Image::new(h, w, pixels, self.max_value)
    }
}

/// Per-column affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Standardizes each column over its observed entries (population variance).
/// Unobserved entries are set to zero.
pub fn standardize(y: &Array2<f64>, mask: &Array2<bool>) -> Result<(Array2<f64>, StandardizationRecord)> {
    if y.dim() != mask.dim() {
        return Err(BpfaError::Shape("data and mask differ in shape".into()));
    }
    let d = y.ncols();
    let mut means = vec![0.0; d];
    let mut stds = vec![1.0; d];
    for j in 0..d {
        let vals: Vec<f64> = y
            .column(j)
            .iter()
            .zip(mask.column(j))
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        if vals.len() < 2 {
            return Err(BpfaError::DegenerateColumn {
                column: j,
                reason: format!("{} observed entries", vals.len()),
            });
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means[j] = mean;
        if var > 0.0 {
            stds[j] = var.sqrt();
        } else {
            warn!("column {j} has zero variance; its scale is left at 1");
        }
    }
    let mut out = Array2::zeros(y.dim());
    for ((i, j), v) in out.indexed_iter_mut() {
        if mask[[i, j]] {
            *v = (y[[i, j]] - means[j]) / stds[j];
        }
    }
    Ok((out, StandardizationRecord { means, stds }))
}

/// Inverse of [`standardize`], applied to every entry.
pub fn destandardize(y: &Array2<f64>, record: &StandardizationRecord) -> Result<Array2<f64>> {
    if y.ncols() != record.means.len() {
        return Err(BpfaError::Shape("record has the wrong number of columns".into()));
    }
    let mut out = y.clone();
    for ((_, j), v) in out.indexed_iter_mut() {
        *v = *v * record.stds[j] + record.means[j];
    }
    Ok(out)
}

/// Overlapping `patch × patch` patches in raster order, each flattened row-major.
/// `pixel_mask` marks observed pixels; patch masks are read from it so every
/// patch agrees on a shared pixel.
pub fn patchify(img: &Image, pixel_mask: Option<&[bool]>, patch: usize) -> Result<Dataset> {
    if img.height < patch || img.width < patch || patch == 0 {
        return Err(BpfaError::Shape(format!(
            "{}×{} image is smaller than a {patch}×{patch} patch",
            img.height, img.width
        )));
    }
    if let Some(m) = pixel_mask {
        if m.len() != img.pixels.len() {
            return Err(BpfaError::Shape("pixel mask size differs from image".into()));
        }
    }
    let (ph, pw) = (img.height - patch + 1, img.width - patch + 1);
    let d = patch * patch;
    let mut y = Array2::zeros((ph * pw, d));
    let mut mask = Array2::from_elem((ph * pw, d), true);
    for pr in 0..ph {
        for pc in 0..pw {
            let i = pr * pw + pc;
            for dr in 0..patch {
                for dc in 0..patch {
                    let p = (pr + dr) * img.width + pc + dc;
                    let j = dr * patch + dc;
                    y[[i, j]] = img.pixels[p];
                    if let Some(m) = pixel_mask {
                        mask[[i, j]] = m[p];
                    }
                }
            }
        }
    }
    Dataset::new(y, mask)
}

/// Averages overlapping patch values back into an image. Columns are mapped back to
/// pixel units with `record` first; the result is clamped to `[0, max_value]`.
pub fn reconstruct_from_patches(
    patches: &Array2<f64>,
    height: usize,
    width: usize,
    patch: usize,
    record: Option<&StandardizationRecord>,
    max_value: f64,
) -> Result<Image> {
    if height < patch || width < patch {
        return Err(BpfaError::Shape("image smaller than patch".into()));
    }
    let (ph, pw) = (height - patch + 1, width - patch + 1);
    if patches.dim() != (ph * pw, patch * patch) {
        return Err(BpfaError::Shape(format!(
            "expected {}×{} patch matrix, got {:?}",
            ph * pw,
            patch * patch,
            patches.dim()
        )));
    }
    let values = match record {
        Some(r) => destandardize(patches, r)?,
        None => patches.clone(),
    };
    let mut sum = vec![0.0; height * width];
    let mut count = vec![0u32; height * width];
    for pr in 0..ph {
        for pc in 0..pw {
            let row = values.row(pr * pw + pc);
            for dr in 0..patch {
                for dc in 0..patch {
                    let p = (pr + dr) * width + pc + dc;
                    sum[p] += row[dr * patch + dc];
                    count[p] += 1;
                }
            }
        }
    }
    let pixels = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| (s / c as f64).clamp(0.0, max_value))
        .collect();
    Image::new(height, width, pixels, max_value)
}

/// Exactly `⌊fraction · H · W⌋` observed pixels chosen uniformly without replacement.
pub fn make_interpolation_mask(img: &Image, observe_fraction: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(observe_fraction > 0.0 && observe_fraction <= 1.0) {
        return Err(BpfaError::InvalidArgument(format!(
            "observe fraction {observe_fraction} outside (0, 1]"
        )));
    }
    let total = img.pixels.len();
    let keep = ((observe_fraction * total as f64).floor() as usize).min(total);
    let mut mask = vec![false; total];
    for p in sample_indices(rng, total, keep) {
        mask[p] = true;
    }
    Ok(mask)
}

/// Observed pixels receive `N(0, noise_sd²)` noise in pixel units, clamped to the valid range.
pub fn make_denoising_task(
    img: &Image,
    observe_fraction: f64,
    noise_sd: f64,
    rng: &mut Rng,
) -> Result<(Image, Vec<bool>)> {
    if !(noise_sd >= 0.0) {
        return Err(BpfaError::InvalidArgument("noise_sd must be non-negative".into()));
    }
    let mask = make_interpolation_mask(img, observe_fraction, rng)?;
    let mut out = img.clone();
    if noise_sd > 0.0 {
        for (p, v) in out.pixels.iter_mut().enumerate() {
            if mask[p] {
                let e: f64 = StandardNormal.sample(rng);
                *v = (*v + noise_sd * e).clamp(0.0, img.max_value);
            }
        }
    }
    Ok((out, mask))
}

/// Observed entries withheld from training, with their true values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub test_entries: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    pub fraction: f64,
    pub seed: u64,
}

impl HoldoutSpec {
    /// Held-out `(column, value)` pairs grouped by row.
    pub fn by_row(&self, n: usize) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); n];
        for (&(i, j), &v) in self.test_entries.iter().zip(&self.values) {
            rows[i].push((j, v));
        }
        rows
    }
}

/// Moves `round(fraction · observed)` uniformly chosen observed entries into a test set,
/// keeping at least one training entry per row. Held-out cells are zeroed in the
/// returned training data.
pub fn holdout_entries(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, HoldoutSpec)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(BpfaError::InvalidArgument(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let (n, d) = (data.n(), data.d());
    let observed: Vec<usize> = (0..n * d).filter(|&p| data.mask[[p / d, p % d]]).collect();
    let target = (fraction * observed.len() as f64).round() as usize;
    let mut per_row = vec![0usize; n];
    for &p in &observed {
        per_row[p / d] += 1;
    }
    let spare: usize = per_row.iter().map(|&c| c.saturating_sub(1)).sum();
    if per_row.contains(&0) || target > spare {
        return Err(BpfaError::ImpossibleSplit(format!(
            "cannot hold out {target} of {} entries while keeping one per row",
            observed.len()
        )));
    }
    let mut rng = stream(seed, &[purpose::HOLDOUT]);
    let mut held = vec![false; n * d];
    let mut held_per_row = vec![0usize; n];
    for idx in sample_indices(&mut rng, observed.len(), target) {
        let p = observed[idx];
        held[p] = true;
        held_per_row[p / d] += 1;
    }
    // Rows that lost every entry give one back; replacements come from rows with spare entries.
    for i in 0..n {
        if held_per_row[i] < per_row[i] {
            continue;
        }
        let cols: Vec<usize> = (0..d).filter(|&j| held[i * d + j]).collect();
        let back = cols[rng.gen_range(0..cols.len())];
        held[i * d + back] = false;
        held_per_row[i] -= 1;
        loop {
            let p = observed[rng.gen_range(0..observed.len())];
            let r = p / d;
            if !held[p] && r != i && held_per_row[r] + 1 < per_row[r] {
                held[p] = true;
                held_per_row[r] += 1;
                break;
            }
        }
    }
    let mut train = data.clone();
    let mut test_entries = Vec::with_capacity(target);
    let mut values = Vec::with_capacity(target);
    for p in 0..n * d {
        if held[p] {
            let (i, j) = (p / d, p % d);
            test_entries.push((i, j));
            values.push(data.y[[i, j]]);
            train.mask[[i, j]] = false;
            train.y[[i, j]] = 0.0;
        }
    }
    Ok((
        train,
        HoldoutSpec {
            test_entries,
            values,
            fraction,
            seed,
        },
    ))
}

/// Runs the Gibbs chain on a random row subset and moment-matches its final state
/// into variational parameters. Subset evidence is scaled up by `N / subset_size`.
pub fn gibbs_warm_start(
    data: &Dataset,
    hyper: &Hyperparameters,
    subset_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<GlobalVariationalState> {
    let mut rng = stream(seed, &[purpose::WARM_START]);
    if iterations == 0 {
        return GlobalVariationalState::random_init(hyper, data.d(), &mut stream(seed, &[purpose::INIT]));
    }
    let n = data.n();
    if subset_size == 0 || subset_size > n {
        return Err(BpfaError::InvalidArgument(format!(
            "warm-start subset {subset_size} outside 1..={n}"
        )));
    }
    let mut rows = sample_indices(&mut rng, n, subset_size).into_vec();
    rows.sort_unstable();
    let subset = data.subset(&rows);
    let run = run_chain(&subset, hyper, iterations, iterations, &ChainOptions::default(), &mut rng)?;
    let last = run.states.last().expect("one retained state");
    chain_to_variational(last, &subset, hyper, n as f64 / subset_size as f64)
}

/// Moment-matches a chain state, treating its locals as `scale` times as much data.
pub fn chain_to_variational(
    state: &ChainState,
    data: &Dataset,
    hyper: &Hyperparameters,
    scale: f64,
) -> Result<GlobalVariationalState> {
    let (k, d) = (hyper.k, data.d());
    let (a0, b0) = hyper.beta_prior();
    let beta = &state.beta;
    let mut a = vec![a0; k];
    let mut b = vec![b0; k];
    let mut tau = Array2::from_elem((k, d), d as f64);
    for (i, s) in state.psi.iter().enumerate() {
        let (_, mask) = data.row(i);
        for kk in 0..k {
            if s.z[kk] {
                a[kk] += scale;
                let ev = scale * beta.gamma_obs * s.w[kk] * s.w[kk];
                let mut row = tau.row_mut(kk);
                for j in 0..d {
                    if mask[j] {
                        row[j] += ev;
                    }
                }
            } else {
                b[kk] += scale;
            }
        }
    }
    let mu = &tau * &beta.phi;
    let c = hyper.c_prior + scale * data.observed_count() as f64 / 2.0;
    let e = hyper.e_prior + scale * (data.n() * k) as f64 / 2.0;
    let out = GlobalVariationalState {
        a,
        b,
        c,
        d: c / beta.gamma_obs,
        e,
        f: e / beta.gamma_w,
        tau,
        mu,
    };
    out.validate()?;
    Ok(out)
}

fn pgm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut pos = 0;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(BpfaError::MalformedHeader("truncated graymap header".into()));
        }
        let s = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        out.push(
            s.parse()
                .map_err(|_| BpfaError::MalformedHeader(format!("bad header field '{s}'")))?,
        );
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(BpfaError::MalformedHeader("missing separator after header".into()));
    }
    Ok((out, pos + 1))
}

/// Reads a binary (`P5`) graymap with 8-bit samples.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(BpfaError::MalformedHeader("not a binary graymap (expected P5)".into()));
    }
    let (fields, start) = pgm_tokens(&bytes[2..], 3)?;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(BpfaError::MalformedHeader(format!("unsupported maxval {maxval}")));
    }
    let raster = &bytes[2 + start..];
    if raster.len() < width * height {
        return Err(BpfaError::Shape(format!(
            "raster has {} bytes, header declares {width}×{height}",
            raster.len()
        )));
    }
    let pixels = raster[..width * height].iter().map(|&b| b as f64).collect();
    Image::new(height, width, pixels, maxval as f64)
}

/// Writes a binary graymap, rounding pixels to the nearest level.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let maxval = img.max_value.round().clamp(1.0, 255.0) as u8;
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&v| v.round().clamp(0.0, maxval as f64) as u8),
    );
    fs::write(path, out)?;
    Ok(())
}

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| BpfaError::Parse(format!("line {}: '{s}' is not a number", ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().position(|r| r.len() != first.len()) {
            return Err(BpfaError::Shape(format!(
                "row {bad} has {} columns, expected {}",
                rows[bad].len(),
                first.len()
            )));
        }
    }
    Ok(rows)
}

/// Reads a comma- or whitespace-delimited matrix. `NaN` cells are unobserved. An
/// optional mask file of the same shape marks observed cells with nonzero values.
pub fn read_matrix(path: &Path, mask_path: Option<&Path>) -> Result<Dataset> {
    let rows = parse_rows(&fs::read_to_string(path)?)?;
    let (n, d) = (rows.len(), rows.first().map_or(0, Vec::len));
    let mut y = Array2::zeros((n, d));
    let mut mask = Array2::from_elem((n, d), true);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v.is_nan() {
                mask[[i, j]] = false;
            } else {
                y[[i, j]] = v;
            }
        }
    }
    if let Some(mp) = mask_path {
        let m = parse_rows(&fs::read_to_string(mp)?)?;
        if m.len() != n || m.first().map_or(0, Vec::len) != d {
            return Err(BpfaError::Shape("mask file shape differs from matrix".into()));
        }
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    mask[[i, j]] = false;
                    y[[i, j]] = 0.0;
                }
            }
        }
    }
    Dataset::new(y, mask)
}

/// Writes a comma-delimited matrix with 17 significant digits; unobserved cells as `NaN`.
pub fn write_matrix(path: &Path, data: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for i in 0..data.n() {
        let (y, mask) = data.row(i);
        let cells: Vec<String> = y
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { format!("{v:.16e}") } else { "NaN".into() })
            .collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// A deterministic 8-bit test image made of smooth gradients, edges and texture.
pub fn synthetic_image(height: usize, width: usize) -> Image {
    let mut pixels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64 / height as f64, c as f64 / width as f64);
            let mut v = 60.0 + 120.0 * x * (1.0 - 0.5 * y);
            if (x - 0.65).powi(2) + (y - 0.35).powi(2) < 0.04 {
                v = 215.0;
            }
            if y > 0.7 && x < 0.5 {
                v = 40.0 + 30.0 * ((x * 40.0).sin() > 0.0) as u8 as f64;
            }
            v += 12.0 * (6.0 * x + 9.0 * y).sin();
            pixels.push(v.clamp(0.0, 255.0).round());
        }
    }
    Image {
        height,
        width,
        pixels,
        max_value: 255.0,
    }
}
