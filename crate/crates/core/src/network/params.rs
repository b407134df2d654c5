//! Named parameter tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        self.params.push(Param {
            name,
            kind,
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialised convolution kernel `[out, in, k, k, k]`.
    pub fn conv_weight(&mut self, name: &str, out_ch: usize, in_ch: usize, kernel: usize) -> ParamId {
        let fan_in = in_ch * kernel.pow(3);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let len = out_ch * fan_in;
        let data = (0..len).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            vec![out_ch, in_ch, kernel, kernel, kernel],
            data,
        )
    }

    pub fn bias(&mut self, name: &str, len: usize) -> ParamId {
        self.push(format!("{name}.bias"), ParamKind::Bias, vec![len], vec![0.0; len])
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> (ParamId, ParamId) {
        let gamma = self.push(
            format!("{name}.gamma"),
            ParamKind::NormScale,
            vec![channels],
            vec![1.0; channels],
        );
        let beta = self.push(
            format!("{name}.beta"),
            ParamKind::NormShift,
            vec![channels],
            vec![0.0; channels],
        );
        (gamma, beta)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Sum of squared convolution weights (the L2 penalty's support).
    pub fn conv_weight_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::ConvWeight)
            .flat_map(|p| p.data.iter())
            .map(|w| w * w)
            .sum()
    }
}
