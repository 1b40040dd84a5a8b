//! Disentangle, transform, reconstruct.
//!
//! ```text
//! anonymize:    X  -> G(M(T(E_ID(X), k), E_Attr(X)))
//! deanonymize:  X' -> G(M(T^-1(C(E_ID(X')), k), E_Attr(X')))
//! ```
//!
//! Images travel as rows of flattened `H*W` pixels; attribute codes and
//! latent codes as rows of `m*d_w` values (slot-major).

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::flow::{FlowConfig, SifBinding, SifModel};
use crate::keygen::{KeyGen, Secret};
use crate::numerics::{Activation, Graph, Linear, Mlp, MlpBinding, MlpSpec, Real, Rng, Var};
use crate::synthdata::{smooth_output_layer, DataDims};

/// Frozen random feature maps standing in for the landmark, parsing and
/// perceptual networks used by the image losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Proxies<T> {
    pub pose: Mlp<T>,
    pub parse: Mlp<T>,
    pub perceptual: Mlp<T>,
}

pub const POSE_FEATURES: usize = 16;
pub const PARSE_FEATURES: usize = 16;
pub const PERCEPTUAL_HIDDEN: usize = 64;
pub const PERCEPTUAL_FEATURES: usize = 32;

impl<T: Real> Proxies<T> {
    fn new(pixels: usize, root: &Rng) -> Result<Self> {
        let mut pose = Mlp::new(
            MlpSpec::new(vec![pixels, POSE_FEATURES], Activation::None, Activation::None)?,
            &mut root.derive("proxy-pose"),
        );
        let mut parse = Mlp::new(
            MlpSpec::new(vec![pixels, PARSE_FEATURES, PARSE_FEATURES], Activation::LeakyRelu, Activation::None)?,
            &mut root.derive("proxy-parse"),
        );
        let mut perceptual = Mlp::new(
            MlpSpec::new(
                vec![pixels, PERCEPTUAL_HIDDEN, PERCEPTUAL_FEATURES],
                Activation::LeakyRelu,
                Activation::None,
            )?,
            &mut root.derive("proxy-perceptual"),
        );
        pose.frozen = true;
        parse.frozen = true;
        perceptual.frozen = true;
        Ok(Self { pose, parse, perceptual })
    }

    fn cast<U: Real>(&self) -> Proxies<U> {
        Proxies { pose: self.pose.cast(), parse: self.parse.cast(), perceptual: self.perceptual.cast() }
    }
}

/// Which sub-networks collect gradients on a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub e_id: bool,
    pub e_attr: bool,
    pub mapping: bool,
    pub icl: bool,
    pub sif: bool,
}

impl Trainable {
    pub const NONE: Self = Self { e_id: false, e_attr: false, mapping: false, icl: false, sif: false };
}

pub struct PipelineBinding {
    pub e_id: MlpBinding,
    pub e_attr: MlpBinding,
    pub mapping: MlpBinding,
    pub generator: MlpBinding,
    pub icl: MlpBinding,
    pub sif: SifBinding,
    pub pose: MlpBinding,
    pub parse: MlpBinding,
    pub perceptual: MlpBinding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineModel<T> {
    config: ModelConfig,
    dims: DataDims,
    pub e_id: Mlp<T>,
    pub e_attr: Mlp<T>,
    pub mapping: Mlp<T>,
    pub generator: Mlp<T>,
    pub icl: Mlp<T>,
    pub sif: SifModel<T>,
    pub keygen: KeyGen<T>,
    pub proxies: Proxies<T>,
    /// When unset, the compensation layer is skipped (identity map).
    pub use_icl: bool,
}

/// Encoders see pixels mapped from [0, 1] to [-1, 1].
fn centered<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let c = g.add_scalar(x, -0.5);
    g.scale(c, 2.0)
}

/// Intermediate values of one anonymization pass.
pub struct AnonVars {
    pub z: Var,
    pub a: Var,
    pub z_anon: Var,
    pub image: Var,
}

impl<T: Real> PipelineModel<T> {
    pub fn new(config: &ModelConfig, flow: &FlowConfig, dims: DataDims) -> Result<Self> {
        let c = config;
        let pixels = dims.height * dims.width;
        let slots = c.m * c.d_w;
        let root = Rng::new(c.seed);

        let e_id = Mlp::new(
            MlpSpec::new(
                vec![pixels, c.e_id_hidden[0], c.e_id_hidden[1], c.d_z],
                Activation::LeakyRelu,
                Activation::None,
            )?,
            &mut root.derive("e_id"),
        );
        let e_attr = Mlp::new(
            MlpSpec::new(vec![pixels, c.e_attr_hidden, slots], Activation::LeakyRelu, Activation::None)?,
            &mut root.derive("e_attr"),
        );
        let mapping = Mlp::new(
            MlpSpec::new(vec![c.d_z + c.d_w, c.mapping_hidden, c.d_w], Activation::LeakyRelu, Activation::None)?,
            &mut root.derive("mapping"),
        );

        let mut icl = Mlp::new(
            MlpSpec::new(
                vec![c.d_z, 2 * c.d_z, 2 * c.d_z, 2 * c.d_z, c.d_z],
                Activation::LeakyRelu,
                Activation::None,
            )?,
            &mut root.derive("icl"),
        );
        let last = icl.layers_mut().last_mut().expect("icl has layers");
        last.weight.fill(T::zero());
        last.bias.fill(T::zero());

        let generator = Self::make_generator(slots, c.generator_hidden, dims, &mut root.derive("generator"))?;
        let sif = SifModel::new(c.d_z, c.d_k, flow, &mut root.derive("sif"))?;
        let keygen = KeyGen::new(c.d_k, c.seed)?;
        let proxies = Proxies::new(pixels, &root)?;

        Ok(Self {
            config: c.clone(),
            dims,
            e_id,
            e_attr,
            mapping,
            generator,
            icl,
            sif,
            keygen,
            proxies,
            use_icl: true,
        })
    }

    /// Frozen decoder whose output layer mixes the same family of smooth
    /// patterns the synthetic renderer draws from (with a different seed).
    fn make_generator(input: usize, hidden: usize, dims: DataDims, rng: &mut Rng) -> Result<Mlp<T>> {
        let pixels = dims.height * dims.width;
        let spec = MlpSpec::new(vec![input, hidden, pixels], Activation::LeakyRelu, Activation::Sigmoid)?;
        let first: Mlp<f64> = Mlp::new(MlpSpec::new(vec![input, hidden], Activation::LeakyRelu, Activation::None)?, rng);
        let out = smooth_output_layer(rng, hidden, dims.height, dims.width) * (2.0 / (1.0 + 0.04f64)).sqrt();
        let layers = vec![
            first.layers()[0].clone(),
            Linear { weight: out, bias: Array2::zeros((1, pixels)) },
        ];
        let mut g = Mlp::from_layers(spec, layers)?.cast::<T>();
        g.frozen = true;
        Ok(g)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> DataDims {
        self.dims
    }

    pub fn pixels(&self) -> usize {
        self.dims.height * self.dims.width
    }

    pub fn cast<U: Real>(&self) -> PipelineModel<U> {
        PipelineModel {
            config: self.config.clone(),
            dims: self.dims,
            e_id: self.e_id.cast(),
            e_attr: self.e_attr.cast(),
            mapping: self.mapping.cast(),
            generator: self.generator.cast(),
            icl: self.icl.cast(),
            sif: self.sif.cast(),
            keygen: self.keygen.cast(),
            proxies: self.proxies.cast(),
            use_icl: self.use_icl,
        }
    }

    /// Every network with a stable dotted name, in checkpoint order.
    pub fn networks(&self) -> Vec<(String, &Mlp<T>)> {
        let mut out = vec![
            ("e_id".to_string(), &self.e_id),
            ("e_attr".to_string(), &self.e_attr),
            ("mapping".to_string(), &self.mapping),
            ("generator".to_string(), &self.generator),
            ("icl".to_string(), &self.icl),
        ];
        for (i, b) in self.sif.blocks.iter().enumerate() {
            out.push((format!("sif.{i}.omega"), &b.omega));
            out.push((format!("sif.{i}.phi"), &b.phi));
            out.push((format!("sif.{i}.rho"), &b.rho));
            out.push((format!("sif.{i}.eta"), &b.eta));
        }
        out.push(("keygen".to_string(), self.keygen.mapping()));
        out.push(("proxy.pose".to_string(), &self.proxies.pose));
        out.push(("proxy.parse".to_string(), &self.proxies.parse));
        out.push(("proxy.perceptual".to_string(), &self.proxies.perceptual));
        out
    }

    /// `(name, tensor, frozen)` for every parameter tensor.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<T>, bool)> {
        let mut out = Vec::new();
        for (name, net) in self.networks() {
            for (l, layer) in net.layers().iter().enumerate() {
                out.push((format!("{name}.{l}.weight"), &layer.weight, net.frozen));
                out.push((format!("{name}.{l}.bias"), &layer.bias, net.frozen));
            }
        }
        out
    }

    /// Mutable view of the networks in [`Self::networks`] order.
    pub(crate) fn networks_mut(&mut self) -> Vec<&mut Mlp<T>> {
        let mut out: Vec<&mut Mlp<T>> = vec![
            &mut self.e_id,
            &mut self.e_attr,
            &mut self.mapping,
            &mut self.generator,
            &mut self.icl,
        ];
        out.extend(self.sif.networks_mut());
        out.push(self.keygen.mapping_mut());
        out.push(&mut self.proxies.pose);
        out.push(&mut self.proxies.parse);
        out.push(&mut self.proxies.perceptual);
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, tr: Trainable) -> PipelineBinding {
        PipelineBinding {
            e_id: self.e_id.bind(g, tr.e_id),
            e_attr: self.e_attr.bind(g, tr.e_attr),
            mapping: self.mapping.bind(g, tr.mapping),
            generator: self.generator.bind(g, false),
            icl: self.icl.bind(g, tr.icl),
            sif: self.sif.bind(g, tr.sif),
            pose: self.proxies.pose.bind(g, false),
            parse: self.proxies.parse.bind(g, false),
            perceptual: self.proxies.perceptual.bind(g, false),
        }
    }

    fn check_images(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let n = g.value(x).ncols();
        if n != self.pixels() {
            return dim_err(format!("expected images of {} pixels, got {n}", self.pixels()));
        }
        Ok(())
    }

    /// Unit-norm identity embedding per image row.
    pub fn e_id_var(&self, g: &mut Graph<T>, b: &PipelineBinding, x: Var) -> Result<Var> {
        self.check_images(g, x)?;
        let x = centered(g, x);
        let raw = self.e_id.apply(g, &b.e_id, x)?;
        Ok(g.row_normalize(raw))
    }

    pub fn e_attr_var(&self, g: &mut Graph<T>, b: &PipelineBinding, x: Var) -> Result<Var> {
        self.check_images(g, x)?;
        let x = centered(g, x);
        self.e_attr.apply(g, &b.e_attr, x)
    }

    /// Replicates each identity row over the `m` slots, appends the slot's
    /// attribute vector and maps every slot with the shared network.
    pub fn mapping_var(&self, g: &mut Graph<T>, b: &PipelineBinding, z: Var, a: Var) -> Result<Var> {
        let (m, d_w, d_z) = (self.config.m, self.config.d_w, self.config.d_z);
        let (zn, zc) = g.value(z).dim();
        let (an, ac) = g.value(a).dim();
        if zc != d_z || ac != m * d_w || zn != an {
            return dim_err(format!(
                "mapping expects z: n x {d_z} and a: n x {}, got {:?} and {:?}",
                m * d_w,
                (zn, zc),
                (an, ac)
            ));
        }
        let idx: Vec<usize> = (0..zn).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let zr = g.gather_rows(z, &idx)?;
        let zr = g.scale(zr, self.config.identity_gain);
        let ar = g.reshape(a, zn * m, d_w)?;
        let input = g.concat_cols(&[zr, ar])?;
        let w = self.mapping.apply(g, &b.mapping, input)?;
        g.reshape(w, zn, m * d_w)
    }

    pub fn generator_var(&self, g: &mut Graph<T>, b: &PipelineBinding, w: Var) -> Result<Var> {
        self.generator.apply(g, &b.generator, w)
    }

    /// `z + mlp(z)`, or `z` unchanged when the layer is disabled.
    pub fn icl_var(&self, g: &mut Graph<T>, b: &PipelineBinding, z: Var) -> Result<Var> {
        if !self.use_icl {
            return Ok(z);
        }
        let r = self.icl.apply(g, &b.icl, z)?;
        g.add(z, r)
    }

    /// `G(M(z, a))`.
    pub fn decode_var(&self, g: &mut Graph<T>, b: &PipelineBinding, z: Var, a: Var) -> Result<Var> {
        let w = self.mapping_var(g, b, z, a)?;
        self.generator_var(g, b, w)
    }

    /// Reconstruction `G(M(E_ID(X), E_Attr(X)))` with its codes.
    pub fn reconstruct_var(&self, g: &mut Graph<T>, b: &PipelineBinding, x: Var) -> Result<(Var, Var, Var)> {
        let z = self.e_id_var(g, b, x)?;
        let a = self.e_attr_var(g, b, x)?;
        let xr = self.decode_var(g, b, z, a)?;
        Ok((xr, z, a))
    }

    /// Anonymizes each image row under the matching key row. With `bypass`
    /// the flow is replaced by the identity map.
    pub fn anonymize_var(&self, g: &mut Graph<T>, b: &PipelineBinding, x: Var, k: Var, bypass: bool) -> Result<AnonVars> {
        let z = self.e_id_var(g, b, x)?;
        let a = self.e_attr_var(g, b, x)?;
        let z_anon = if bypass { z } else { self.sif.forward_var(g, &b.sif, z, k)? };
        let image = self.decode_var(g, b, z_anon, a)?;
        Ok(AnonVars { z, a, z_anon, image })
    }

    /// Recovers each image row under the matching key row.
    pub fn deanonymize_var(&self, g: &mut Graph<T>, b: &PipelineBinding, x_anon: Var, k: Var) -> Result<Var> {
        let ze = self.e_id_var(g, b, x_anon)?;
        let zc = self.icl_var(g, b, ze)?;
        let z = self.sif.inverse_var(g, &b.sif, zc, k)?;
        let a = self.e_attr_var(g, b, x_anon)?;
        self.decode_var(g, b, z, a)
    }

    fn infer<F>(&self, inputs: &[&Array2<T>], f: F) -> Result<Array2<T>>
    where
        F: FnOnce(&Self, &mut Graph<T>, &PipelineBinding, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::NONE);
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant((*x).clone())).collect();
        let out = f(self, &mut g, &b, &vars)?;
        Ok(g.value(out).clone())
    }

    pub fn e_id(&self, x: &Array2<T>) -> Result<Array2<T>> {
        self.infer(&[x], |m, g, b, v| m.e_id_var(g, b, v[0]))
    }

    pub fn e_attr(&self, x: &Array2<T>) -> Result<Array2<T>> {
        self.infer(&[x], |m, g, b, v| m.e_attr_var(g, b, v[0]))
    }

    pub fn mapping_m(&self, z: &Array2<T>, a: &Array2<T>) -> Result<Array2<T>> {
        self.infer(&[z, a], |m, g, b, v| m.mapping_var(g, b, v[0], v[1]))
    }

    pub fn generator_g(&self, w: &Array2<T>) -> Result<Array2<T>> {
        let want = self.config.m * self.config.d_w;
        if w.ncols() != want {
            return dim_err(format!("generator expects {want} latent entries, got {}", w.ncols()));
        }
        self.infer(&[w], |m, g, b, v| m.generator_var(g, b, v[0]))
    }

    pub fn icl(&self, z: &Array2<T>) -> Result<Array2<T>> {
        if z.ncols() != self.config.d_z {
            return dim_err(format!("icl expects {} entries, got {}", self.config.d_z, z.ncols()));
        }
        self.infer(&[z], |m, g, b, v| m.icl_var(g, b, v[0]))
    }

    pub fn reconstruct(&self, x: &Array2<T>) -> Result<Array2<T>> {
        self.infer(&[x], |m, g, b, v| Ok(m.reconstruct_var(g, b, v[0])?.0))
    }

    /// One key row per image row.
    pub fn key_rows(&self, secret: &Secret, n: usize) -> Result<Array2<T>> {
        let k = self.keygen.keygen(secret)?.to_row();
        Ok(k.broadcast((n, k.ncols())).expect("row broadcast").to_owned())
    }

    pub fn anonymize_with_keys(&self, x: &Array2<T>, k: &Array2<T>) -> Result<Array2<T>> {
        self.infer(&[x, k], |m, g, b, v| Ok(m.anonymize_var(g, b, v[0], v[1], false)?.image))
    }

    pub fn deanonymize_with_keys(&self, x: &Array2<T>, k: &Array2<T>) -> Result<Array2<T>> {
        self.infer(&[x, k], |m, g, b, v| m.deanonymize_var(g, b, v[0], v[1]))
    }

    pub fn anonymize(&self, x: &Array2<T>, secret: &Secret) -> Result<Array2<T>> {
        self.anonymize_with_keys(x, &self.key_rows(secret, x.nrows())?)
    }

    pub fn deanonymize(&self, x_anon: &Array2<T>, secret: &Secret) -> Result<Array2<T>> {
        self.deanonymize_with_keys(x_anon, &self.key_rows(secret, x_anon.nrows())?)
    }

    /// Anonymization with the flow replaced by the identity map.
    pub fn anonymize_bypass(&self, x: &Array2<T>) -> Result<Array2<T>> {
        let k = Array2::zeros((x.nrows(), self.config.d_k));
        self.infer(&[x, &k], |m, g, b, v| Ok(m.anonymize_var(g, b, v[0], v[1], true)?.image))
    }
}

/// `mask * generated + (1 - mask) * original`, elementwise.
pub fn blend<T: Real>(generated: &Array2<T>, original: &Array2<T>, mask: &Array2<T>) -> Result<Array2<T>> {
    if generated.dim() != original.dim() || generated.dim() != mask.dim() {
        return dim_err(format!(
            "blend shapes differ: {:?}, {:?}, {:?}",
            generated.dim(),
            original.dim(),
            mask.dim()
        ));
    }
    let mut out = original.clone();
    ndarray::Zip::from(&mut out)
        .and(generated)
        .and(mask)
        .for_each(|o, &gen, &m| *o = m * gen + (T::one() - m) * *o);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, FlowConfig, DataDims) {
        let c = ModelConfig {
            d_z: 8,
            d_k: 6,
            m: 3,
            d_w: 5,
            e_id_hidden: [12, 10],
            e_attr_hidden: 12,
            mapping_hidden: 7,
            generator_hidden: 16,
            seed: 3,
            ..ModelConfig::default()
        };
        let f = FlowConfig { n_blocks: 2, ..FlowConfig::default() };
        (c, f, DataDims { d_id: 4, d_attr: 4, height: 8, width: 8 })
    }

    fn model() -> PipelineModel<f64> {
        let (c, f, d) = small();
        PipelineModel::new(&c, &f, d).unwrap()
    }

    fn images(n: usize, seed: u64) -> Array2<f64> {
        Rng::new(seed).uniform_matrix(n, 64, 0.0, 1.0)
    }

    #[test]
    fn identity_embedding_is_unit_norm_and_deterministic() {
        let m = model();
        let x = images(5, 1);
        let z = m.e_id(&x).unwrap();
        assert_eq!(z.dim(), (5, 8));
        for row in z.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
        }
        assert_eq!(z, m.e_id(&x).unwrap());
        assert!(m.e_id(&Array2::zeros((1, 63))).is_err());
    }

    #[test]
    fn attribute_code_shape() {
        let m = model();
        let a = m.e_attr(&images(2, 2)).unwrap();
        assert_eq!(a.dim(), (2, 15));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mapping_replicates_identity_per_slot() {
        let mut m = model();
        // With the attribute half of the first layer zeroed, every slot sees
        // only the replicated identity and must produce the same output.
        let w = &mut m.mapping.layers_mut()[0].weight;
        w.slice_mut(ndarray::s![8.., ..]).fill(0.0);
        let z = m.e_id(&images(2, 3)).unwrap();
        let a = Rng::new(4).normal_matrix(2, 15, 1.0);
        let out = m.mapping_m(&z, &a).unwrap();
        assert_eq!(out.dim(), (2, 15));
        for r in 0..2 {
            for s in 1..3 {
                for j in 0..5 {
                    assert_eq!(out[[r, s * 5 + j]], out[[r, j]]);
                }
            }
        }
    }

    #[test]
    fn identity_gain_scales_identity_inputs() {
        let (mut c, f, d) = small();
        c.identity_gain = 1.0;
        let mut plain = PipelineModel::<f64>::new(&c, &f, d).unwrap();
        c.identity_gain = 2.5;
        let gained = PipelineModel::<f64>::new(&c, &f, d).unwrap();
        plain.mapping.layers_mut()[0].weight.slice_mut(ndarray::s![..8, ..]).mapv_inplace(|v| v * 2.5);
        let z = gained.e_id(&images(3, 6)).unwrap();
        let a = Rng::new(7).normal_matrix(3, 15, 1.0);
        let diff = &gained.mapping_m(&z, &a).unwrap() - &plain.mapping_m(&z, &a).unwrap();
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_mapping_gives_zero_latent() {
        let mut m = model();
        m.mapping = Mlp::zeros(m.mapping.spec().clone());
        let out = m.mapping_m(&Array2::ones((2, 8)), &Array2::ones((2, 15))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(m.mapping_m(&Array2::ones((2, 7)), &Array2::ones((2, 15))).is_err());
        assert!(m.mapping_m(&Array2::ones((2, 8)), &Array2::ones((3, 15))).is_err());
    }

    #[test]
    fn generator_range_and_sensitivity() {
        let m = model();
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let w: Array2<f64> = rng.normal_matrix(1, 15, 1.0);
            let mut w2 = w.clone();
            w2[[0, rng.below(15)]] += 0.5;
            let x = m.generator_g(&w).unwrap();
            assert!(x.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert_eq!(x, m.generator_g(&w).unwrap());
            let x2 = m.generator_g(&w2).unwrap();
            assert!((&x - &x2).mapv(f64::abs).sum() > 0.0);
        }
        assert!(m.generator_g(&Array2::zeros((1, 14))).is_err());
    }

    #[test]
    fn fresh_icl_is_identity() {
        let m = model();
        let z = Rng::new(6).normal_matrix(3, 8, 1.0);
        assert_eq!(m.icl(&z).unwrap(), z);
        assert!(m.icl(&Array2::zeros((1, 9))).is_err());
        let mut off = model();
        off.use_icl = false;
        off.icl.layers_mut()[3].bias.fill(1.0);
        assert_eq!(off.icl(&z).unwrap(), z);
    }

    #[test]
    fn bypass_reduces_to_reconstruction() {
        let m = model();
        let x = images(3, 7);
        assert_eq!(m.anonymize_bypass(&x).unwrap(), m.reconstruct(&x).unwrap());
    }

    #[test]
    fn anonymize_is_deterministic_and_key_dependent() {
        let m = model();
        let x = images(2, 8);
        let s = Secret::new("k1").unwrap();
        let a1 = m.anonymize(&x, &s).unwrap();
        assert_eq!(a1, m.anonymize(&x, &s).unwrap());
        assert_ne!(a1, m.anonymize(&x, &Secret::new("k2").unwrap()).unwrap());
        let r = m.deanonymize(&a1, &s).unwrap();
        assert_eq!(r, m.deanonymize(&a1, &s).unwrap());
        let wrong = m.deanonymize(&a1, &Secret::new("k3").unwrap()).unwrap();
        assert!(wrong.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn blend_endpoints() {
        let xg = images(2, 9);
        let x = images(2, 10);
        assert_eq!(blend(&xg, &x, &Array2::ones(x.dim())).unwrap(), xg);
        assert_eq!(blend(&xg, &x, &Array2::zeros(x.dim())).unwrap(), x);
        let half = blend(&xg, &x, &Array2::from_elem(x.dim(), 0.5)).unwrap();
        let mean = (&xg + &x) * 0.5;
        assert!((&half - &mean).iter().all(|d| d.abs() < 1e-15));
        assert!(blend(&xg, &x, &Array2::zeros((2, 63))).is_err());
    }

    #[test]
    fn frozen_networks_never_collect_gradients() {
        let m = model();
        let mut g = Graph::new();
        let all = Trainable { e_id: true, e_attr: true, mapping: true, icl: true, sif: true };
        let b = m.bind(&mut g, all);
        for v in b.generator.vars().into_iter().chain(b.pose.vars()).chain(b.perceptual.vars()) {
            assert!(!g.requires_grad(v));
        }
        assert!(b.e_attr.vars().iter().all(|&v| g.requires_grad(v)));
    }
}
