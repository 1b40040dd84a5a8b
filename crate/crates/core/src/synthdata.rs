//! Synthetic face-like dataset with known identity/attribute factors.
//!
//! Every identity owns a standard-normal latent `u`; every sample owns an
//! attribute latent `v`. Images are `render(u, v)`: a frozen two-layer
//! decoder whose output layer mixes a fixed bank of smooth cosine
//! patterns, squashed into [0, 1] by a sigmoid.
//!
//! File layout (all little-endian): `"IFDS"`, u32 version, u64 seed,
//! u32 n_ids, u32 per_id, u32 d_id, u32 d_attr, u32 H, u32 W, then f32
//! identity latents, f32 attribute latents, f32 images, and one u32
//! split flag per identity (0 train, 1 test).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::numerics::{Activation, Linear, Mlp, MlpSpec, Real, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"IFDS";
pub const DATASET_VERSION: u32 = 1;
/// Fraction of identities assigned to the test split.
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDims {
    pub d_id: usize,
    pub d_attr: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataDims {
    fn default() -> Self {
        Self { d_id: 16, d_attr: 16, height: 32, width: 32 }
    }
}

/// Number of smooth patterns per image axis.
pub const BASIS_FREQS: usize = 8;
const RENDER_HIDDEN: usize = 64;
/// Target standard deviation of the pre-sigmoid pixel field.
const LOGIT_STD: f64 = 1.5;

/// `(h*w) x freqs^2` matrix of separable cosine patterns, each scaled to
/// unit RMS and damped with frequency.
pub fn smooth_basis(h: usize, w: usize, freqs: usize) -> Array2<f64> {
    let mut b = Array2::zeros((h * w, freqs * freqs));
    for p in 0..freqs {
        for q in 0..freqs {
            let col = p * freqs + q;
            let damp = 1.0 / (1.0 + 0.5 * (p + q) as f64);
            for i in 0..h {
                for j in 0..w {
                    let cy = (std::f64::consts::PI * p as f64 * (i as f64 + 0.5) / h as f64).cos();
                    let cx = (std::f64::consts::PI * q as f64 * (j as f64 + 0.5) / w as f64).cos();
                    b[[i * w + j, col]] = cy * cx;
                }
            }
            let rms = (b.column(col).iter().map(|x| x * x).sum::<f64>() / (h * w) as f64).sqrt();
            b.column_mut(col).mapv_inplace(|x| x / rms * damp);
        }
    }
    b
}

/// Output layer `hidden -> pixels` whose rows are random mixtures of the
/// smooth patterns, normalised so unit-variance hidden activations give
/// a pixel field of standard deviation `LOGIT_STD`.
pub(crate) fn smooth_output_layer(rng: &mut Rng, hidden: usize, h: usize, w: usize) -> Array2<f64> {
    let basis = smooth_basis(h, w, BASIS_FREQS);
    let k = basis.ncols();
    let mix: Array2<f64> = rng.normal_matrix(hidden, k, 1.0);
    let weight = mix.dot(&basis.t());
    let var = weight.iter().map(|x| x * x).sum::<f64>() / (h * w) as f64;
    weight * (LOGIT_STD / var.sqrt())
}

/// Frozen decoder from `[u, v]` to a flattened image.
#[derive(Debug, Clone)]
pub struct Renderer {
    net: Mlp<f32>,
    dims: DataDims,
}

impl Renderer {
    pub fn new(dims: DataDims, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).derive("renderer");
        let spec = MlpSpec::new(
            vec![dims.d_id + dims.d_attr, RENDER_HIDDEN, dims.height * dims.width],
            Activation::LeakyRelu,
            Activation::Sigmoid,
        )?;
        let first: Mlp<f64> = Mlp::new(
            MlpSpec::new(vec![dims.d_id + dims.d_attr, RENDER_HIDDEN], Activation::None, Activation::None)?,
            &mut rng,
        );
        let mut l0 = first.layers()[0].clone();
        l0.bias = rng.normal_matrix(1, RENDER_HIDDEN, 0.1);
        // leaky-ReLU of a unit normal has second moment (1 + slope^2) / 2
        let out = smooth_output_layer(&mut rng, RENDER_HIDDEN, dims.height, dims.width)
            * (2.0 / (1.0 + 0.04f64)).sqrt();
        let layers = vec![
            l0,
            Linear { weight: out, bias: Array2::zeros((1, dims.height * dims.width)) },
        ];
        let mut net = Mlp::from_layers(spec, layers)?.cast::<f32>();
        net.frozen = true;
        Ok(Self { net, dims })
    }

    /// Renders each row of `[u | v]` pairs.
    pub fn render_rows(&self, u: ArrayView2<'_, f32>, v: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        if u.ncols() != self.dims.d_id || v.ncols() != self.dims.d_attr || u.nrows() != v.nrows() {
            return dim_err(format!(
                "render expects {}+{} latents, got {:?} and {:?}",
                self.dims.d_id,
                self.dims.d_attr,
                u.dim(),
                v.dim()
            ));
        }
        let input = ndarray::concatenate(ndarray::Axis(1), &[u.view(), v.view()]).expect("rows match");
        self.net.forward(&input)
    }

    pub fn render(&self, u: ArrayView1<f32>, v: ArrayView1<f32>) -> Result<Array2<f32>> {
        let u2 = u.insert_axis(ndarray::Axis(0));
        let v2 = v.insert_axis(ndarray::Axis(0));
        let flat = self.render_rows(u2, v2)?;
        Ok(flat
            .into_shape_with_order((self.dims.height, self.dims.width))
            .expect("pixel count"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Identity latents, per-sample attribute latents and images, sample-major
/// within identity (`sample = id * per_id + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub n_ids: usize,
    pub per_id: usize,
    pub dims: DataDims,
    pub identity_latents: Array2<f32>,
    pub attribute_latents: Array2<f32>,
    /// One flattened `H*W` image per row.
    pub images: Array2<f32>,
    pub test_identity: Vec<bool>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.n_ids * self.per_id
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn identity_of(&self, sample: usize) -> usize {
        sample / self.per_id
    }

    pub fn split_of(&self, sample: usize) -> Split {
        if self.test_identity[self.identity_of(sample)] {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn identities(&self, split: Split) -> Vec<usize> {
        (0..self.n_ids)
            .filter(|&i| self.test_identity[i] == (split == Split::Test))
            .collect()
    }

    pub fn samples(&self, split: Split) -> Vec<usize> {
        self.identities(split)
            .into_iter()
            .flat_map(|i| i * self.per_id..(i + 1) * self.per_id)
            .collect()
    }

    pub fn image(&self, sample: usize) -> ArrayView2<'_, f32> {
        self.images
            .row(sample)
            .into_shape_with_order((self.dims.height, self.dims.width))
            .expect("pixel count")
    }

    /// Rows `samples` of the image matrix, converted to `T`.
    pub fn batch<T: Real>(&self, samples: &[usize]) -> Array2<T> {
        self.images
            .select(ndarray::Axis(0), samples)
            .mapv(|x| T::of(x as f64))
    }

    pub fn renderer(&self) -> Result<Renderer> {
        Renderer::new(self.dims, self.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 4 * (self.images.len() + self.attribute_latents.len()));
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for v in [
            self.n_ids,
            self.per_id,
            self.dims.d_id,
            self.dims.d_attr,
            self.dims.height,
            self.dims.width,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for arr in [&self.identity_latents, &self.attribute_latents, &self.images] {
            for x in arr.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        for &t in &self.test_identity {
            buf.extend_from_slice(&(t as u32).to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version { found: version, expected: DATASET_VERSION });
        }
        let seed = r.u64()?;
        let n_ids = r.u32()? as usize;
        let per_id = r.u32()? as usize;
        let dims = DataDims {
            d_id: r.u32()? as usize,
            d_attr: r.u32()? as usize,
            height: r.u32()? as usize,
            width: r.u32()? as usize,
        };
        let n = n_ids
            .checked_mul(per_id)
            .ok_or_else(|| Error::Format("sample count overflows".into()))?;
        let identity_latents = r.f32_matrix(n_ids, dims.d_id)?;
        let attribute_latents = r.f32_matrix(n, dims.d_attr)?;
        let images = r.f32_matrix(n, dims.height * dims.width)?;
        let mut test_identity = Vec::with_capacity(n_ids);
        for _ in 0..n_ids {
            test_identity.push(match r.u32()? {
                0 => false,
                1 => true,
                other => return Err(Error::Format(format!("bad split flag {other}"))),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { seed, n_ids, per_id, dims, identity_latents, attribute_latents, images, test_identity })
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let data = self.f32_vec(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}

/// Draws `n_ids` identities with `per_id` samples each and assigns 10% of
/// identities (rounded, at least one when `n_ids >= 2`) to the test split.
pub fn gen_dataset(n_ids: usize, per_id: usize, dims: DataDims, seed: u64) -> Result<SyntheticDataset> {
    if n_ids < 2 || per_id == 0 {
        return contract_err("need at least two identities and one sample per identity");
    }
    let base = Rng::new(seed);
    let renderer = Renderer::new(dims, seed)?;

    let mut identity_latents = Array2::zeros((n_ids, dims.d_id));
    for i in 0..n_ids {
        let mut r = base.derive(&format!("identity-{i}"));
        identity_latents
            .row_mut(i)
            .assign(&ndarray::Array1::from_shape_fn(dims.d_id, |_| r.normal() as f32));
    }
    let n = n_ids * per_id;
    let mut attribute_latents = Array2::zeros((n, dims.d_attr));
    for s in 0..n {
        let mut r = base.derive(&format!("sample-{s}"));
        attribute_latents
            .row_mut(s)
            .assign(&ndarray::Array1::from_shape_fn(dims.d_attr, |_| r.normal() as f32));
    }
    let owner: Vec<usize> = (0..n).map(|s| s / per_id).collect();
    let u_rows = identity_latents.select(ndarray::Axis(0), &owner);
    let images = renderer.render_rows(u_rows.view(), attribute_latents.view())?;

    let n_test = ((n_ids as f64 * TEST_FRACTION).round() as usize).clamp(1, n_ids - 1);
    let mut order: Vec<usize> = (0..n_ids).collect();
    base.derive("split").shuffle(&mut order);
    let mut test_identity = vec![false; n_ids];
    for &i in &order[..n_test] {
        test_identity[i] = true;
    }
    Ok(SyntheticDataset { seed, n_ids, per_id, dims, identity_latents, attribute_latents, images, test_identity })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDataset {
        gen_dataset(20, 3, DataDims::default(), 42).unwrap()
    }

    #[test]
    fn counts_and_split() {
        let d = gen_dataset(200, 10, DataDims::default(), 1).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.identities(Split::Train).len(), 180);
        assert_eq!(d.identities(Split::Test).len(), 20);
        let train = d.samples(Split::Train);
        let test = d.samples(Split::Test);
        assert_eq!(train.len() + test.len(), 2000);
        for s in &test {
            assert!(!train.iter().any(|t| d.identity_of(*t) == d.identity_of(*s)));
        }
    }

    #[test]
    fn images_match_renderer_and_range() {
        let d = small();
        assert!(d.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let r = d.renderer().unwrap();
        let s = 7;
        let img = r
            .render(d.identity_latents.row(d.identity_of(s)), d.attribute_latents.row(s))
            .unwrap();
        assert_eq!(img.view(), d.image(s));
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(small(), small());
        assert_ne!(small().images, gen_dataset(20, 3, DataDims::default(), 43).unwrap().images);
    }

    #[test]
    fn render_dimension_error() {
        let r = Renderer::new(DataDims::default(), 1).unwrap();
        let u = Array2::<f32>::zeros((1, 15));
        let v = Array2::<f32>::zeros((1, 16));
        assert!(r.render_rows(u.view(), v.view()).is_err());
    }

    #[test]
    fn same_identity_images_are_closer() {
        let dims = DataDims::default();
        let r = Renderer::new(dims, 5).unwrap();
        let mut rng = Rng::new(6);
        let draw = |rng: &mut Rng, n: usize| Array2::from_shape_fn((1, n), |_| rng.normal() as f32);
        let (mut same, mut diff) = (0.0, 0.0);
        for _ in 0..100 {
            let u1 = draw(&mut rng, dims.d_id);
            let u2 = draw(&mut rng, dims.d_id);
            let v1 = draw(&mut rng, dims.d_attr);
            let v2 = draw(&mut rng, dims.d_attr);
            let a = r.render_rows(u1.view(), v1.view()).unwrap();
            let b = r.render_rows(u1.view(), v2.view()).unwrap();
            let c = r.render_rows(u2.view(), v2.view()).unwrap();
            same += (&a - &b).mapv(f32::abs).mean().unwrap();
            diff += (&a - &c).mapv(f32::abs).mean().unwrap();
        }
        assert!(same < diff, "{same} vs {diff}");
    }

    #[test]
    fn persistence_round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ifds");
        d.save(&p).unwrap();
        let back = SyntheticDataset::load(&p).unwrap();
        assert_eq!(back, d);
        let p2 = dir.path().join("d2.ifds");
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_files() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ifds");
        d.save(&p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(SyntheticDataset::from_bytes(&bad), Err(Error::Format(_))));

        let mut v2 = good.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            SyntheticDataset::from_bytes(&v2),
            Err(Error::Version { found: 2, expected: 1 })
        ));

        assert!(matches!(
            SyntheticDataset::from_bytes(&good[..good.len() - 3]),
            Err(Error::Format(_))
        ));
    }
}
