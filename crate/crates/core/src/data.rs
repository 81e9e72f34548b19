//! In-domain toy data, far-away and noise OOD sets, IDX loading and CSV export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix,
    /// 0-based class indices.
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "LabeledSet::new",
                left: inputs.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: bad,
                len: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            inputs: self.inputs.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// CSV with header `x0,...,x{n-1},label`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        write_header(&mut w, self.dim(), true)?;
        for (row, y) in self.inputs.row_iter().zip(&self.labels) {
            write_row(&mut w, row)?;
            writeln!(w, ",{y}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub inputs: Matrix,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// CSV with header `x0,...,x{n-1}`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        write_header(&mut w, self.dim(), false)?;
        for row in self.inputs.row_iter() {
            write_row(&mut w, row)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

fn write_header(w: &mut impl Write, dim: usize, label: bool) -> Result<()> {
    let cols: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    write!(w, "{}", cols.join(","))?;
    if label {
        write!(w, ",label")?;
    }
    writeln!(w)?;
    Ok(())
}

fn write_row(w: &mut impl Write, row: &[f64]) -> Result<()> {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            write!(w, ",")?;
        }
        // `{}` on f64 prints the shortest round-tripping representation.
        write!(w, "{v}")?;
    }
    Ok(())
}

/// Two interleaved half circles of radius 1: class 0 centred at the origin
/// (upper arc), class 1 centred at `(1, 0.5)` (lower arc). Angles are drawn
/// uniformly, then isotropic Gaussian noise of the given sd is added.
pub fn gen_two_moons(n_per_class: usize, noise_sd: f64, rng: &mut RngState) -> Result<LabeledSet> {
    if n_per_class == 0 || noise_sd.is_nan() || noise_sd < 0.0 {
        return Err(Error::invalid(
            "two moons needs n_per_class >= 1 and noise_sd >= 0",
        ));
    }
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let theta = std::f64::consts::PI * rng.next_uniform();
            let (x, y) = if class == 0 {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            data.push(x + noise_sd * rng.next_normal());
            data.push(y + noise_sd * rng.next_normal());
            labels.push(class);
        }
    }
    LabeledSet::new(Matrix::from_vec(2 * n_per_class, 2, data)?, labels, 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarAwayParams {
    pub t: f64,
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
}

impl FarAwayParams {
    fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::invalid(format!(
                "far-away scale must be >= 0, got {}",
                self.t
            )));
        }
        if self.dim == 0 {
            return Err(Error::invalid("far-away dim must be >= 1"));
        }
        Ok(())
    }
}

/// `t · u` with `u ~ U[0,1)^n`.
pub fn gen_faraway(p: &FarAwayParams) -> Result<UnlabeledSet> {
    p.validate()?;
    let mut rng = RngState::new(p.seed);
    let data = (0..p.count * p.dim).map(|_| p.t * rng.next_uniform()).collect();
    Ok(UnlabeledSet {
        inputs: Matrix::from_vec(p.count, p.dim, data)?,
    })
}

/// Far-away random-direction samples together with their box offsets `u`
/// and unit directions `v`.
#[derive(Debug, Clone)]
pub struct FarAwayRdParts {
    pub set: UnlabeledSet,
    pub offsets: Matrix,
    pub directions: Matrix,
}

/// `u + t · v` with `u ~ U[0,1)^n` and `v` uniform on the unit sphere.
pub fn gen_faraway_rd(p: &FarAwayParams) -> Result<UnlabeledSet> {
    gen_faraway_rd_parts(p).map(|parts| parts.set)
}

pub fn gen_faraway_rd_parts(p: &FarAwayParams) -> Result<FarAwayRdParts> {
    p.validate()?;
    let mut rng = RngState::new(p.seed);
    let mut offsets = Matrix::zeros(p.count, p.dim);
    let mut directions = Matrix::zeros(p.count, p.dim);
    let mut samples = Matrix::zeros(p.count, p.dim);
    for i in 0..p.count {
        let u: Vec<f64> = (0..p.dim).map(|_| rng.next_uniform()).collect();
        let v = rng.unit_vector(p.dim);
        for j in 0..p.dim {
            samples.set(i, j, u[j] + p.t * v[j]);
        }
        offsets.row_mut(i).copy_from_slice(&u);
        directions.row_mut(i).copy_from_slice(&v);
    }
    Ok(FarAwayRdParts {
        set: UnlabeledSet { inputs: samples },
        offsets,
        directions,
    })
}

/// `U[0,1)^dim` noise.
pub fn gen_uniform_noise(dim: usize, count: usize, rng: &mut RngState) -> UnlabeledSet {
    let data = (0..dim * count).map(|_| rng.next_uniform()).collect();
    UnlabeledSet {
        inputs: Matrix::from_vec(count, dim, data).expect("sized above"),
    }
}

/// Points `center + r·v`, `v` uniform on the sphere and `r ~ U[r_min, r_max)`.
/// Used as auxiliary OOD training data around low-dimensional in-domain data.
pub fn gen_annulus(
    center: &[f64],
    r_min: f64,
    r_max: f64,
    count: usize,
    rng: &mut RngState,
) -> Result<UnlabeledSet> {
    if center.is_empty() || !(0.0 <= r_min && r_min <= r_max) {
        return Err(Error::invalid(format!(
            "annulus needs a nonempty center and 0 <= r_min <= r_max, got {r_min}..{r_max}"
        )));
    }
    let dim = center.len();
    let mut inputs = Matrix::zeros(count, dim);
    for i in 0..count {
        let v = rng.unit_vector(dim);
        let r = r_min + (r_max - r_min) * rng.next_uniform();
        for (j, (c, vj)) in center.iter().zip(v).enumerate() {
            inputs.set(i, j, c + r * vj);
        }
    }
    Ok(UnlabeledSet { inputs })
}

fn square_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || len == 0 {
        return Err(Error::invalid(format!(
            "input length {len} is not a square image"
        )));
    }
    Ok(side)
}

/// Edge-inclusive mirror: `-1 → 0`, `n → n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// 3x3 Gaussian blur (σ = 1) with mirrored borders, on a square image.
pub fn blur3x3(image: &[f64]) -> Result<Vec<f64>> {
    let side = square_side(image.len())?;
    let mut kernel = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (dy, row) in kernel.iter_mut().enumerate() {
        for (dx, k) in row.iter_mut().enumerate() {
            let (a, b) = (dx as f64 - 1.0, dy as f64 - 1.0);
            *k = (-(a * a + b * b) / 2.0).exp();
            total += *k;
        }
    }
    let mut out = vec![0.0; image.len()];
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for (dy, row) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + dy as isize - 1, side);
                for (dx, k) in row.iter().enumerate() {
                    let xx = reflect(x as isize + dx as isize - 1, side);
                    acc += k * image[yy * side + xx];
                }
            }
            out[y * side + x] = acc / total;
        }
    }
    Ok(out)
}

/// Affine map onto `[0, 1]`; a constant image maps to all zeros.
pub fn rescale_unit(image: &[f64]) -> Vec<f64> {
    let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        image.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; image.len()]
    }
}

/// Sum of absolute differences between horizontally and vertically adjacent
/// pixels of a square image.
pub fn total_variation(image: &[f64]) -> Result<f64> {
    let side = square_side(image.len())?;
    let mut tv = 0.0;
    for y in 0..side {
        for x in 0..side {
            let v = image[y * side + x];
            if x + 1 < side {
                tv += (image[y * side + x + 1] - v).abs();
            }
            if y + 1 < side {
                tv += (image[(y + 1) * side + x] - v).abs();
            }
        }
    }
    Ok(tv)
}

/// Smooth noise from real images: random global pixel permutation, 3x3
/// Gaussian blur, then contrast rescale to the full `[0, 1]` range.
pub fn gen_smooth_noise(source: &Matrix, rng: &mut RngState) -> Result<UnlabeledSet> {
    square_side(source.cols())?;
    let mut out = Matrix::zeros(source.rows(), source.cols());
    for (i, img) in source.row_iter().enumerate() {
        let perm = rng.permutation(img.len());
        let permuted: Vec<f64> = perm.iter().map(|&p| img[p]).collect();
        let smooth = rescale_unit(&blur3x3(&permuted)?);
        out.row_mut(i).copy_from_slice(&smooth);
    }
    Ok(UnlabeledSet { inputs: out })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

fn check_idx(path: &Path, bytes: &[u8], magic: u32, header: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            path: path.to_owned(),
            needed: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::IdxMagic {
            path: path.to_owned(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::IdxTruncated {
            path: path.to_owned(),
            needed: header,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Unsigned-byte IDX image file, pixels scaled to `[0, 1]`.
/// Returns the `count x (rows·cols)` matrix and the image side lengths.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(Matrix, usize, usize)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    check_idx(path, &bytes, IDX_IMAGES_MAGIC, 16)?;
    let count = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: path.to_owned(),
            needed,
            actual: bytes.len(),
        });
    }
    let data = bytes[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Matrix::from_vec(count, rows * cols, data)?, rows, cols))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    check_idx(path, &bytes, IDX_LABELS_MAGIC, 8)?;
    let count = be_u32(&bytes, 4) as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: path.to_owned(),
            needed,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair. The class count is `max label + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let (inputs, _, _) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if inputs.rows() != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: inputs.rows(),
            labels: labels.len(),
        });
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledSet::new(inputs, labels, num_classes)
}

/// Writes raw bytes as an IDX image file (`count x rows x cols`).
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || pixels.len() % per != 0 {
        return Err(Error::invalid("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&((pixels.len() / per) as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Stratified shuffled split: a `fraction` share of every class goes to the
/// first set, the rest to the second.
pub fn split(set: &LabeledSet, fraction: f64, rng: &mut RngState) -> Result<(LabeledSet, LabeledSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.num_classes];
    for (i, &y) in set.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for mut idx in by_class {
        rng.shuffle(&mut idx);
        let cut = (fraction * idx.len() as f64).round() as usize;
        first.extend_from_slice(&idx[..cut]);
        second.extend_from_slice(&idx[cut..]);
    }
    rng.shuffle(&mut first);
    rng.shuffle(&mut second);
    Ok((set.subset(&first), set.subset(&second)))
}
