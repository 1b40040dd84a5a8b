use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Graph, Real, Rng, Var};
use crate::error::{contract_err, dim_err, Result};

/// Slope of every leaky-ReLU in the engine.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::None => x,
        }
    }

    fn eval<T: Real>(self, x: Array2<T>) -> Array2<T> {
        match self {
            Activation::LeakyRelu => {
                let sl = T::of(LEAKY_SLOPE);
                x.mapv_into(|v| if v > T::zero() { v } else { v * sl })
            }
            Activation::Tanh => x.mapv_into(|v| v.tanh()),
            Activation::Sigmoid => x.mapv_into(super::graph::sigmoid),
            Activation::None => x,
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::LeakyRelu => (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt(),
            _ => 1.0,
        }
    }
}

/// Layer widths and activations of a dense feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return contract_err(format!("invalid layer sizes {layer_sizes:?}"));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation: hidden,
            output_activation: output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Affine layer: `y = x W + b` with `W` of shape `in x out`, `b` of shape `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array2<T>,
}

/// Dense network parameters. A frozen network never appears in an
/// optimizer's parameter list and never collects gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    layers: Vec<Linear<T>>,
    pub frozen: bool,
}

/// Graph handles for one network's parameters, in layer order.
#[derive(Debug, Clone)]
pub struct MlpBinding {
    layers: Vec<(Var, Var)>,
}

impl MlpBinding {
    /// `[w0, b0, w1, b1, ...]`, matching [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl<T: Real> Mlp<T> {
    /// Gaussian init with standard deviation `gain * std_scale / sqrt(fan_in)`
    /// and zero biases.
    pub fn init(spec: MlpSpec, rng: &mut Rng, std_scale: f64) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
                let std = spec.activation(l).init_gain() * std_scale / (fan_in as f64).sqrt();
                Linear {
                    weight: rng.normal_matrix(fan_in, fan_out, std),
                    bias: Array2::zeros((1, fan_out)),
                }
            })
            .collect();
        Self { spec, layers, frozen: false }
    }

    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Self {
        Self::init(spec, rng, 1.0)
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| Linear {
                weight: Array2::zeros((spec.layer_sizes[l], spec.layer_sizes[l + 1])),
                bias: Array2::zeros((1, spec.layer_sizes[l + 1])),
            })
            .collect();
        Self { spec, layers, frozen: false }
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Linear<T>>) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return dim_err(format!("{} layers for a {}-layer spec", layers.len(), spec.num_layers()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let want = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            if layer.weight.dim() != want || layer.bias.dim() != (1, want.1) {
                return dim_err(format!("layer {l} shape {:?}, expected {want:?}", layer.weight.dim()));
            }
        }
        Ok(Self { spec, layers, frozen: false })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Array2<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.mapv(|x| U::of(x.as_f64())),
                    bias: l.bias.mapv(|x| U::of(x.as_f64())),
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Places the parameters on `g`. They collect gradients only when
    /// `trainable` is set and the network is not frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MlpBinding {
        let rg = trainable && !self.frozen;
        MlpBinding {
            layers: self
                .layers
                .iter()
                .map(|l| (g.param(l.weight.clone(), rg), g.param(l.bias.clone(), rg)))
                .collect(),
        }
    }

    pub fn apply(&self, g: &mut Graph<T>, binding: &MlpBinding, x: Var) -> Result<Var> {
        if g.value(x).ncols() != self.spec.input_dim() {
            return dim_err(format!(
                "network expects {} inputs, got {}",
                self.spec.input_dim(),
                g.value(x).ncols()
            ));
        }
        let mut h = x;
        for (l, &(w, b)) in binding.layers.iter().enumerate() {
            let lin = g.matmul(h, w)?;
            let aff = g.add_bias(lin, b)?;
            h = self.spec.activation(l).apply(g, aff);
        }
        Ok(h)
    }

    /// Inference on a batch of rows. Same arithmetic as `apply`, without a tape.
    pub fn forward(&self, input: &Array2<T>) -> Result<Array2<T>> {
        if input.ncols() != self.spec.input_dim() {
            return dim_err(format!(
                "network expects {} inputs, got {}",
                self.spec.input_dim(),
                input.ncols()
            ));
        }
        let mut h: Option<Array2<T>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let lin = h.as_ref().unwrap_or(input).dot(&layer.weight);
            let aff = &lin + &layer.bias;
            h = Some(self.spec.activation(l).eval(aff));
        }
        Ok(h.unwrap_or_else(|| input.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::LeakyRelu, Activation::None).unwrap();
        let m = Mlp::<f64>::zeros(spec);
        let y = m.forward(&array![[0.3, -2.0, 7.0]]).unwrap();
        assert_eq!(y, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn identity_layer() {
        let spec = MlpSpec::new(vec![3, 3], Activation::None, Activation::None).unwrap();
        let m = Mlp::from_layers(
            spec,
            vec![Linear { weight: Array2::eye(3), bias: Array2::zeros((1, 3)) }],
        )
        .unwrap();
        let v = array![[0.5, -1.5, 2.25]];
        assert_eq!(m.forward(&v).unwrap(), v);
    }

    #[test]
    fn hand_evaluated_tanh_network() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh, Activation::None).unwrap();
        let layers = vec![
            Linear { weight: Array2::from_elem((2, 3), 0.1), bias: Array2::zeros((1, 3)) },
            Linear { weight: Array2::from_elem((3, 1), 0.1), bias: Array2::zeros((1, 1)) },
        ];
        let m = Mlp::<f64>::from_layers(spec, layers).unwrap();
        let y = m.forward(&array![[1.0, 1.0]]).unwrap()[[0, 0]];
        // hidden units: tanh(0.2) = 0.197375320224904; output: 3 * 0.1 * that
        assert!((y - 0.059_212_596_067_471_2).abs() < 1e-15, "{y}");
    }

    #[test]
    fn input_width_mismatch() {
        let spec = MlpSpec::new(vec![2, 1], Activation::None, Activation::None).unwrap();
        let m = Mlp::<f64>::zeros(spec);
        assert!(matches!(m.forward(&array![[1.0, 2.0, 3.0]]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn frozen_network_binds_without_gradients() {
        let spec = MlpSpec::new(vec![2, 2], Activation::None, Activation::None).unwrap();
        let mut m = Mlp::<f64>::new(spec, &mut Rng::new(1));
        m.frozen = true;
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        assert!(b.vars().iter().all(|&v| !g.requires_grad(v)));
    }

    #[test]
    fn bad_specs() {
        assert!(MlpSpec::new(vec![3], Activation::None, Activation::None).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::None, Activation::None).is_err());
    }
}
