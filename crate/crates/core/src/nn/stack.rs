use rand_chacha::ChaCha8Rng;

use super::layers::{max_pool2, max_pool2_backward, relu, relu_backward, Conv2d};
use super::param::Param;
use super::tensor::Tensor;

/// Geometry of one convolution in a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn same3(out_channels: usize, stride: usize) -> Self {
        Self { out_channels, kernel: 3, stride, padding: 1 }
    }
}

/// Conv + ReLU layers applied in sequence, optionally followed by a 2x2 max pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub convs: Vec<Conv2d>,
    pub pool: bool,
}

/// Activations a [`ConvStack`] keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct StackTrace {
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    pool_argmax: Option<Vec<usize>>,
}

impl ConvStack {
    pub fn new(name: &str, in_channels: usize, specs: &[ConvSpec], pool: bool) -> Self {
        let mut c_in = in_channels;
        let convs = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let conv = Conv2d::new(&format!("{name}.{i}"), c_in, s.out_channels, s.kernel, s.stride, s.padding);
                c_in = s.out_channels;
                conv
            })
            .collect();
        Self { convs, pool }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map(|c| c.out_channels).unwrap_or(0)
    }

    pub fn init_xavier(&mut self, rng: &mut ChaCha8Rng) {
        self.convs.iter_mut().for_each(|c| c.init_xavier(rng));
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for conv in &self.convs {
            h = relu(&conv.forward(&h));
        }
        if self.pool {
            h = max_pool2(&h).0;
        }
        h
    }

    pub fn forward_trace(&self, x: &Tensor) -> (Tensor, StackTrace) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut outputs = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            let y = relu(&conv.forward(&h));
            inputs.push(h);
            outputs.push(y.clone());
            h = y;
        }
        let mut pool_argmax = None;
        if self.pool {
            let (p, arg) = max_pool2(&h);
            pool_argmax = Some(arg);
            h = p;
        }
        (h, StackTrace { inputs, outputs, pool_argmax })
    }

    pub fn backward(&mut self, trace: &StackTrace, grad_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let mut g = match &trace.pool_argmax {
            Some(arg) => {
                let shape = trace.outputs.last().expect("pooled stack has convs").shape();
                max_pool2_backward(shape, arg, grad_out)
            }
            None => grad_out.clone(),
        };
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            let gz = relu_backward(&trace.outputs[i], &g);
            let want = i > 0 || need_input_grad;
            g = conv.backward(&trace.inputs[i], &gz, want)?;
        }
        Some(g)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}
