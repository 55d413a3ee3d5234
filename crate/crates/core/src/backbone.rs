//! Five-stage convolutional feature extractor (stem `f0`, stages `f1`..`f4`)
//! used as the backbone of both networks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, ConvStack, Param, StackTrace, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Desk-scale widths; trains in seconds on one CPU core.
    Tiny,
    /// ResNet-50 stage widths, depths and strides built from plain
    /// conv+ReLU stages (no bottleneck blocks or normalization).
    #[serde(rename = "resnet50-layout")]
    Resnet50Layout,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Variant::Tiny),
            "resnet50-layout" => Ok(Variant::Resnet50Layout),
            other => Err(Error::Config(format!("unknown backbone variant {other:?}"))),
        }
    }
}

/// Layer geometry of `f0`..`f4`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub in_channels: usize,
    /// Convolutions per stage, `stages[0]` being the stem.
    pub stages: [Vec<ConvSpec>; 5],
    /// Whether the stem ends with a 2x2 max pool.
    pub stem_pool: bool,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            variant: Variant::Tiny,
            in_channels: 1,
            stages: [
                vec![ConvSpec { out_channels: 8, kernel: 4, stride: 4, padding: 0 }],
                vec![ConvSpec::same3(8, 1)],
                vec![ConvSpec::same3(16, 2)],
                vec![ConvSpec::same3(32, 2)],
                vec![ConvSpec::same3(64, 2)],
            ],
            stem_pool: false,
        }
    }

    pub fn resnet50_layout() -> Self {
        let stage = |width: usize, depth: usize, stride: usize| {
            (0..depth)
                .map(|i| ConvSpec::same3(width, if i == 0 { stride } else { 1 }))
                .collect::<Vec<_>>()
        };
        Self {
            variant: Variant::Resnet50Layout,
            in_channels: 1,
            stages: [
                vec![ConvSpec { out_channels: 64, kernel: 7, stride: 2, padding: 3 }],
                stage(256, 3, 1),
                stage(512, 4, 2),
                stage(1024, 6, 2),
                stage(2048, 3, 2),
            ],
            stem_pool: true,
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Tiny => Self::tiny(),
            Variant::Resnet50Layout => Self::resnet50_layout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("backbone needs at least one input channel".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::Config(format!("backbone stage f{i} has no layers")));
            }
            if stage
                .iter()
                .any(|s| s.out_channels == 0 || s.kernel == 0 || s.stride == 0)
            {
                return Err(Error::Config(format!("backbone stage f{i} has a zero width, kernel or stride")));
            }
        }
        Ok(())
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.stages[stage].last().map(|s| s.out_channels).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut total = 0;
        for spec in self.stages.iter().flatten() {
            total += Conv2d::param_count(c_in, spec.out_channels, spec.kernel);
            c_in = spec.out_channels;
        }
        total
    }

    /// Spatial size of each stage output for a square input.
    pub fn stage_sizes(&self, input: usize) -> [usize; 5] {
        let mut size = input;
        let mut out = [0; 5];
        for (i, stage) in self.stages.iter().enumerate() {
            for s in stage {
                size = (size + 2 * s.padding - s.kernel) / s.stride + 1;
            }
            if i == 0 && self.stem_pool {
                size = (size / 2).max(1);
            }
            out[i] = size;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<ConvStack>,
}

/// Stage outputs and backward caches of one backbone forward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub outputs: Vec<Tensor>,
    traces: Vec<StackTrace>,
}

impl Backbone {
    pub fn new(prefix: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, specs)| {
                let s = ConvStack::new(&format!("{prefix}.f{i}"), c_in, specs, i == 0 && config.stem_pool);
                c_in = s.out_channels();
                s
            })
            .collect();
        Ok(Self { config, stages })
    }

    pub fn init_xavier(&mut self, rng: &mut ChaCha8Rng) {
        self.stages.iter_mut().for_each(|s| s.init_xavier(rng));
    }

    /// All five stage outputs.
    pub fn forward(&self, x: &Tensor) -> Vec<Tensor> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(5);
        for stage in &self.stages {
            let y = stage.forward(outs.last().unwrap_or(x));
            outs.push(y);
        }
        outs
    }

    pub fn forward_trace(&self, x: &Tensor) -> BackboneTrace {
        let mut outputs: Vec<Tensor> = Vec::with_capacity(5);
        let mut traces = Vec::with_capacity(5);
        for stage in &self.stages {
            let (y, t) = stage.forward_trace(outputs.last().unwrap_or(x));
            outputs.push(y);
            traces.push(t);
        }
        BackboneTrace { outputs, traces }
    }

    /// Backpropagates gradients arriving at any stage outputs (`None` = no
    /// gradient at that stage). The input gradient is never needed.
    pub fn backward(&mut self, trace: &BackboneTrace, mut stage_grads: Vec<Option<Tensor>>) {
        assert_eq!(stage_grads.len(), self.stages.len());
        let mut carry: Option<Tensor> = None;
        for i in (0..self.stages.len()).rev() {
            let g = match (carry.take(), stage_grads[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            if let Some(g) = g {
                carry = self.stages[i].backward(&trace.traces[i], &g, i > 0);
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }
}
