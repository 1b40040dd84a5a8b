//! Key-conditioned affine coupling flow over identity embeddings.
//!
//! Each block updates the second half against the first, then the first
//! half against the *updated* second half:
//!
//! ```text
//! z2' = z2 * exp(a(omega([z1, k]))) + phi([z1, k])
//! z1' = z1 * exp(a(rho([z2', k])))  + eta([z2', k])
//! ```
//!
//! with `a(t) = c * sigmoid(t)`. The inverse undoes `z1` first, then `z2`.
//! Invertibility holds for every parameter value and every key.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{sigmoid, Activation, Graph, Mlp, MlpBinding, MlpSpec, Real, Rng, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub clamp: f64,
    /// Hidden width of the four per-block networks; `0` means `d_z + d_k`.
    pub d_hidden: usize,
    /// Initial bias of the scale networks' output layer. Negative values
    /// start every block close to a pure shift.
    pub scale_bias_init: f64,
    /// Multiplier on the default init std of every block network.
    pub init_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { n_blocks: 8, clamp: 2.0, d_hidden: 0, scale_bias_init: -4.0, init_scale: 0.5 }
    }
}

/// `(z1, z2)` halves of an even-length vector.
pub fn split<T: Copy>(z: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if !z.len().is_multiple_of(2) {
        return contract_err(format!("cannot split odd length {}", z.len()));
    }
    let h = z.len() / 2;
    Ok((z[..h].to_vec(), z[h..].to_vec()))
}

/// `c * sigmoid(t)` elementwise.
pub fn clamp_a<T: Real>(t: &[T], c: f64) -> Vec<T> {
    let c = T::of(c);
    t.iter()
        .map(|&x| {
            let s = if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            };
            c * s
        })
        .collect()
}

/// The four conditioned networks of one coupling block.
#[derive(Debug, Clone, PartialEq)]
pub struct SacbParams<T> {
    pub omega: Mlp<T>,
    pub phi: Mlp<T>,
    pub rho: Mlp<T>,
    pub eta: Mlp<T>,
}

impl<T: Real> SacbParams<T> {
    fn nets(&self) -> [&Mlp<T>; 4] {
        [&self.omega, &self.phi, &self.rho, &self.eta]
    }

    fn nets_mut(&mut self) -> [&mut Mlp<T>; 4] {
        [&mut self.omega, &mut self.phi, &mut self.rho, &mut self.eta]
    }
}

pub struct SacbBinding {
    omega: MlpBinding,
    phi: MlpBinding,
    rho: MlpBinding,
    eta: MlpBinding,
}

pub struct SifBinding {
    blocks: Vec<SacbBinding>,
}

impl SifBinding {
    pub fn vars(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.omega, &b.phi, &b.rho, &b.eta])
            .flat_map(|m| m.vars())
            .collect()
    }

    /// Variables of each block network, in [`SifModel::networks`] order.
    pub(crate) fn network_vars(&self) -> Vec<Vec<Var>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.omega, &b.phi, &b.rho, &b.eta])
            .map(|m| m.vars())
            .collect()
    }
}

/// A stack of key-conditioned affine coupling blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SifModel<T> {
    pub blocks: Vec<SacbParams<T>>,
    d_z: usize,
    d_k: usize,
    clamp: f64,
}

fn block_spec(d_z: usize, d_k: usize, d_hidden: usize) -> Result<MlpSpec> {
    MlpSpec::new(vec![d_z / 2 + d_k, d_hidden, d_z / 2], Activation::LeakyRelu, Activation::None)
}

impl<T: Real> SifModel<T> {
    fn validate(d_z: usize, d_k: usize, cfg: &FlowConfig) -> Result<usize> {
        if d_z == 0 || !d_z.is_multiple_of(2) {
            return contract_err(format!("identity dimension {d_z} must be even and positive"));
        }
        if d_k == 0 || cfg.n_blocks == 0 {
            return contract_err("flow needs a key dimension and at least one block");
        }
        if cfg.clamp <= 0.0 || !cfg.clamp.is_finite() {
            return contract_err(format!("clamp constant must be positive, got {}", cfg.clamp));
        }
        Ok(if cfg.d_hidden == 0 { d_z + d_k } else { cfg.d_hidden })
    }

    pub fn new(d_z: usize, d_k: usize, cfg: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        let hidden = Self::validate(d_z, d_k, cfg)?;
        let spec = block_spec(d_z, d_k, hidden)?;
        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                let mut b = SacbParams {
                    omega: Mlp::init(spec.clone(), rng, cfg.init_scale),
                    phi: Mlp::init(spec.clone(), rng, cfg.init_scale),
                    rho: Mlp::init(spec.clone(), rng, cfg.init_scale),
                    eta: Mlp::init(spec.clone(), rng, cfg.init_scale),
                };
                let bias = T::of(cfg.scale_bias_init);
                for net in [&mut b.omega, &mut b.rho] {
                    net.layers_mut().last_mut().unwrap().bias.fill(bias);
                }
                b
            })
            .collect();
        Ok(Self { blocks, d_z, d_k, clamp: cfg.clamp })
    }

    /// All four networks of every block set to zero.
    pub fn zeros(d_z: usize, d_k: usize, cfg: &FlowConfig) -> Result<Self> {
        let hidden = Self::validate(d_z, d_k, cfg)?;
        let spec = block_spec(d_z, d_k, hidden)?;
        let blocks = (0..cfg.n_blocks)
            .map(|_| SacbParams {
                omega: Mlp::zeros(spec.clone()),
                phi: Mlp::zeros(spec.clone()),
                rho: Mlp::zeros(spec.clone()),
                eta: Mlp::zeros(spec.clone()),
            })
            .collect();
        Ok(Self { blocks, d_z, d_k, clamp: cfg.clamp })
    }

    pub fn from_blocks(blocks: Vec<SacbParams<T>>, d_z: usize, d_k: usize, clamp: f64) -> Result<Self> {
        if blocks.is_empty() {
            return contract_err("flow needs at least one block");
        }
        let hidden = blocks[0].omega.spec().layer_sizes[1];
        let cfg = FlowConfig { n_blocks: blocks.len(), clamp, d_hidden: hidden, ..FlowConfig::default() };
        Self::validate(d_z, d_k, &cfg)?;
        let spec = block_spec(d_z, d_k, hidden)?;
        if blocks.iter().any(|b| b.nets().iter().any(|n| n.spec() != &spec)) {
            return dim_err("coupling networks must share one shape");
        }
        Ok(Self { blocks, d_z, d_k, clamp })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for b in &mut self.blocks {
            for n in b.nets_mut() {
                n.frozen = frozen;
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.blocks.iter().all(|b| b.nets().iter().all(|n| n.frozen))
    }

    pub fn networks(&self) -> Vec<&Mlp<T>> {
        self.blocks.iter().flat_map(|b| b.nets()).collect()
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Mlp<T>> {
        self.blocks.iter_mut().flat_map(|b| b.nets_mut()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.networks_mut().into_iter().flat_map(|n| n.params_mut()).collect()
    }

    pub fn cast<U: Real>(&self) -> SifModel<U> {
        SifModel {
            blocks: self
                .blocks
                .iter()
                .map(|b| SacbParams {
                    omega: b.omega.cast(),
                    phi: b.phi.cast(),
                    rho: b.rho.cast(),
                    eta: b.eta.cast(),
                })
                .collect(),
            d_z: self.d_z,
            d_k: self.d_k,
            clamp: self.clamp,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> SifBinding {
        SifBinding {
            blocks: self
                .blocks
                .iter()
                .map(|b| SacbBinding {
                    omega: b.omega.bind(g, trainable),
                    phi: b.phi.bind(g, trainable),
                    rho: b.rho.bind(g, trainable),
                    eta: b.eta.bind(g, trainable),
                })
                .collect(),
        }
    }

    fn check_inputs(&self, g: &Graph<T>, z: Var, k: Var) -> Result<()> {
        let (zv, kv) = (g.value(z), g.value(k));
        if zv.ncols() != self.d_z || kv.ncols() != self.d_k || zv.nrows() != kv.nrows() {
            return dim_err(format!(
                "flow expects z: n x {} and k: n x {}, got {:?} and {:?}",
                self.d_z,
                self.d_k,
                zv.dim(),
                kv.dim()
            ));
        }
        Ok(())
    }

    /// `exp(c * sigmoid(net([x, k])))` and `shift([x, k])`.
    fn scale_shift(
        &self,
        g: &mut Graph<T>,
        scale_net: (&Mlp<T>, &MlpBinding),
        shift_net: (&Mlp<T>, &MlpBinding),
        x: Var,
        k: Var,
        negate: bool,
    ) -> Result<(Var, Var)> {
        let xk = g.concat_cols(&[x, k])?;
        let raw = scale_net.0.apply(g, scale_net.1, xk)?;
        let sig = g.sigmoid(raw);
        let s = g.scale(sig, if negate { -self.clamp } else { self.clamp });
        let e = g.exp(s);
        let t = shift_net.0.apply(g, shift_net.1, xk)?;
        Ok((e, t))
    }

    pub fn block_forward_var(
        &self,
        g: &mut Graph<T>,
        block: usize,
        binding: &SifBinding,
        z1: Var,
        z2: Var,
        k: Var,
    ) -> Result<(Var, Var)> {
        let (p, b) = (&self.blocks[block], &binding.blocks[block]);
        let (e, t) = self.scale_shift(g, (&p.omega, &b.omega), (&p.phi, &b.phi), z1, k, false)?;
        let m = g.mul(z2, e)?;
        let z2n = g.add(m, t)?;
        let (e, t) = self.scale_shift(g, (&p.rho, &b.rho), (&p.eta, &b.eta), z2n, k, false)?;
        let m = g.mul(z1, e)?;
        let z1n = g.add(m, t)?;
        Ok((z1n, z2n))
    }

    pub fn block_inverse_var(
        &self,
        g: &mut Graph<T>,
        block: usize,
        binding: &SifBinding,
        z1n: Var,
        z2n: Var,
        k: Var,
    ) -> Result<(Var, Var)> {
        let (p, b) = (&self.blocks[block], &binding.blocks[block]);
        let (e, t) = self.scale_shift(g, (&p.rho, &b.rho), (&p.eta, &b.eta), z2n, k, true)?;
        let d = g.sub(z1n, t)?;
        let z1 = g.mul(d, e)?;
        let (e, t) = self.scale_shift(g, (&p.omega, &b.omega), (&p.phi, &b.phi), z1, k, true)?;
        let d = g.sub(z2n, t)?;
        let z2 = g.mul(d, e)?;
        Ok((z1, z2))
    }

    /// Rows of `z` transformed under the matching rows of `k`.
    pub fn forward_var(&self, g: &mut Graph<T>, binding: &SifBinding, z: Var, k: Var) -> Result<Var> {
        self.check_inputs(g, z, k)?;
        let h = self.d_z / 2;
        let mut z1 = g.slice_cols(z, 0, h)?;
        let mut z2 = g.slice_cols(z, h, h)?;
        for i in 0..self.blocks.len() {
            (z1, z2) = self.block_forward_var(g, i, binding, z1, z2, k)?;
        }
        g.concat_cols(&[z1, z2])
    }

    pub fn inverse_var(&self, g: &mut Graph<T>, binding: &SifBinding, z: Var, k: Var) -> Result<Var> {
        self.check_inputs(g, z, k)?;
        let h = self.d_z / 2;
        let mut z1 = g.slice_cols(z, 0, h)?;
        let mut z2 = g.slice_cols(z, h, h)?;
        for i in (0..self.blocks.len()).rev() {
            (z1, z2) = self.block_inverse_var(g, i, binding, z1, z2, k)?;
        }
        g.concat_cols(&[z1, z2])
    }

    /// Tape-free counterpart of `scale_shift`, op for op.
    fn scale_shift_array(&self, scale_net: &Mlp<T>, shift_net: &Mlp<T>, x: &Array2<T>, k: &Array2<T>, negate: bool) -> Result<(Array2<T>, Array2<T>)> {
        let xk = ndarray::concatenate(Axis(1), &[x.view(), k.view()]).expect("checked shapes");
        let c = T::of(if negate { -self.clamp } else { self.clamp });
        let e = scale_net.forward(&xk)?.mapv_into(|v| (sigmoid(v) * c).exp());
        let t = shift_net.forward(&xk)?;
        Ok((e, t))
    }

    fn step(&self, block: usize, z1: Array2<T>, z2: Array2<T>, k: &Array2<T>, inverse: bool) -> Result<(Array2<T>, Array2<T>)> {
        let p = &self.blocks[block];
        if inverse {
            let (e, t) = self.scale_shift_array(&p.rho, &p.eta, &z2, k, true)?;
            let z1 = (z1 - &t) * &e;
            let (e, t) = self.scale_shift_array(&p.omega, &p.phi, &z1, k, true)?;
            let z2 = (z2 - &t) * &e;
            Ok((z1, z2))
        } else {
            let (e, t) = self.scale_shift_array(&p.omega, &p.phi, &z1, k, false)?;
            let z2 = z2 * &e + &t;
            let (e, t) = self.scale_shift_array(&p.rho, &p.eta, &z2, k, false)?;
            let z1 = z1 * &e + &t;
            Ok((z1, z2))
        }
    }

    fn run(&self, z: &Array2<T>, k: &Array2<T>, inverse: bool) -> Result<Array2<T>> {
        if z.ncols() != self.d_z || k.ncols() != self.d_k || z.nrows() != k.nrows() {
            return dim_err(format!(
                "flow expects z: n x {} and k: n x {}, got {:?} and {:?}",
                self.d_z,
                self.d_k,
                z.dim(),
                k.dim()
            ));
        }
        let h = self.d_z / 2;
        let mut z1 = z.slice(s![.., ..h]).to_owned();
        let mut z2 = z.slice(s![.., h..]).to_owned();
        let order: Vec<usize> = if inverse { (0..self.blocks.len()).rev().collect() } else { (0..self.blocks.len()).collect() };
        for i in order {
            (z1, z2) = self.step(i, z1, z2, k, inverse)?;
        }
        Ok(ndarray::concatenate(Axis(1), &[z1.view(), z2.view()]).expect("checked shapes"))
    }

    /// Anonymizing direction `T(z, k)` for a batch of rows.
    pub fn forward(&self, z: &Array2<T>, k: &Array2<T>) -> Result<Array2<T>> {
        self.run(z, k, false)
    }

    /// Recovering direction `T^-1(z, k)`.
    pub fn inverse(&self, z: &Array2<T>, k: &Array2<T>) -> Result<Array2<T>> {
        self.run(z, k, true)
    }

    /// One block on explicit halves.
    pub fn block_forward(&self, block: usize, z1: &Array2<T>, z2: &Array2<T>, k: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
        self.run_block(block, z1, z2, k, false)
    }

    pub fn block_inverse(&self, block: usize, z1: &Array2<T>, z2: &Array2<T>, k: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
        self.run_block(block, z1, z2, k, true)
    }

    fn run_block(
        &self,
        block: usize,
        z1: &Array2<T>,
        z2: &Array2<T>,
        k: &Array2<T>,
        inverse: bool,
    ) -> Result<(Array2<T>, Array2<T>)> {
        if block >= self.blocks.len() {
            return contract_err(format!("block {block} of {}", self.blocks.len()));
        }
        let h = self.d_z / 2;
        if z1.ncols() != h || z2.ncols() != h || k.ncols() != self.d_k || z1.nrows() != z2.nrows() || z1.nrows() != k.nrows() {
            return dim_err("block inputs do not match the flow dimensions");
        }
        self.step(block, z1.clone(), z2.clone(), k, inverse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn cfg(n: usize) -> FlowConfig {
        FlowConfig { n_blocks: n, ..FlowConfig::default() }
    }

    #[test]
    fn split_cases() {
        let (a, b) = split(&[1, 2, 3, 4]).unwrap();
        assert_eq!((a, b), (vec![1, 2], vec![3, 4]));
        assert!(split(&[1, 2, 3]).is_err());
    }

    #[test]
    fn clamp_values() {
        assert_eq!(clamp_a(&[0.0f64], 2.0)[0], 1.0);
        assert_eq!(clamp_a(&[f64::INFINITY], 2.0)[0], 2.0);
        assert_eq!(clamp_a(&[f64::NEG_INFINITY], 2.0)[0], 0.0);
        assert!((clamp_a(&[40.0f64], 2.0)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_block_scales_by_e() {
        let m = SifModel::<f64>::zeros(4, 3, &cfg(1)).unwrap();
        let z1 = ndarray::array![[1.0, -2.0]];
        let z2 = ndarray::array![[0.5, 3.0]];
        let k = ndarray::array![[0.1, 0.2, 0.3]];
        let (a, b) = m.block_forward(0, &z1, &z2, &k).unwrap();
        for (got, want) in a.iter().zip(z1.iter()) {
            assert!((got - want * E).abs() < 1e-14);
        }
        for (got, want) in b.iter().zip(z2.iter()) {
            assert!((got - want * E).abs() < 1e-14);
        }
        let (r1, r2) = m.block_inverse(0, &(&z1 * E), &(&z2 * E), &k).unwrap();
        assert!((&r1 - &z1).iter().all(|d| d.abs() < 1e-14));
        assert!((&r2 - &z2).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn zero_flow_scales_by_e_to_the_n() {
        let m = SifModel::<f64>::zeros(6, 2, &cfg(5)).unwrap();
        let z = ndarray::array![[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]];
        let k = ndarray::array![[1.0, -1.0]];
        let out = m.forward(&z, &k).unwrap();
        for (got, want) in out.iter().zip(z.iter()) {
            assert!((got - want * E.powi(5)).abs() < 1e-10 * (1.0 + got.abs()));
        }
    }

    #[test]
    fn direct_path_matches_tape() {
        let mut rng = Rng::new(17);
        let m = SifModel::<f32>::new(8, 4, &cfg(3), &mut rng).unwrap();
        let z = rng.normal_matrix::<f32>(5, 8, 1.0);
        let k = rng.uniform_matrix::<f32>(5, 4, -1.0, 1.0);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let (zv, kv) = (g.constant(z.clone()), g.constant(k.clone()));
        let fwd = m.forward_var(&mut g, &b, zv, kv).unwrap();
        let inv = m.inverse_var(&mut g, &b, zv, kv).unwrap();
        assert_eq!(g.value(fwd), &m.forward(&z, &k).unwrap());
        assert_eq!(g.value(inv), &m.inverse(&z, &k).unwrap());
    }

    #[test]
    fn key_changes_output() {
        let mut rng = Rng::new(5);
        let m = SifModel::<f64>::new(8, 4, &cfg(2), &mut rng).unwrap();
        for _ in 0..100 {
            let z = rng.normal_matrix::<f64>(1, 8, 1.0);
            let k1 = rng.normal_matrix::<f64>(1, 4, 1.0);
            let k2 = rng.normal_matrix::<f64>(1, 4, 1.0);
            let a = m.forward(&z, &k1).unwrap();
            let b = m.forward(&z, &k2).unwrap();
            let linf = (&a - &b).iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
            assert!(linf > 1e-6);
        }
    }

    #[test]
    fn dimension_errors() {
        let m = SifModel::<f64>::zeros(4, 2, &cfg(1)).unwrap();
        let z = Array2::zeros((1, 5));
        let k = Array2::zeros((1, 2));
        assert!(m.forward(&z, &k).is_err());
        assert!(m.inverse(&Array2::zeros((2, 4)), &k).is_err());
        assert!(SifModel::<f64>::zeros(5, 2, &cfg(1)).is_err());
        assert!(SifModel::<f64>::zeros(4, 2, &FlowConfig { clamp: 0.0, ..cfg(1) }).is_err());
    }
}
