//! Density-to-dose U-Net: architecture, training loop, evaluation and checkpoints.
//!
//! Input and output are single 9×9×9 kernels. The network unfolds the cube into a
//! 27×27 plane, upsamples it to 54×54 and runs a two-level encoder/decoder whose
//! valid convolutions shrink it back to 27×27.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::DEFAULT_LEAK;
use crate::nn::batchnorm::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::nn::{InitDistribution, LayerSpec, Network};
use crate::optim::RegSpec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DVKC_MAGIC, DVKC_VERSION};
pub use config::{parse_kv, TrainConfig};
pub use eval::{evaluate, EvalReport, Metrics};
pub use train::{epoch_csv, train, train_dataset, train_step, EpochRecord, Plateau, PlateauAction, TrainOutcome, EPOCH_CSV_HEADER};

pub const KERNEL_SHAPE: [usize; 3] = [9, 9, 9];

/// Encoder convolutions before the pooling step (C1–C6).
pub const ENCODER_FILTERS: [usize; 6] = [8, 8, 16, 16, 32, 32];
/// Bottleneck convolutions at 21×21 → 7×7 (C7–C13).
pub const BOTTLENECK_FILTERS: [usize; 7] = [32, 32, 64, 64, 32, 32, 32];
/// Decoder convolutions after the concatenation (C14–C19).
pub const DECODER_FILTERS: [usize; 6] = [32, 16, 16, 8, 8, 4];

/// Conv parameter counts C1–C20 as listed in the reference architecture table.
/// Entry 14 does not follow from its 64 input channels; the derived value is 18464.
pub const REFERENCE_CONV_PARAMS: [usize; 20] = [
    80, 584, 1168, 2320, 4640, 9248, 9248, 9248, 18496, 36928, 18464, 9248, 9248, 32800, 4624, 2320, 1160, 584, 292,
    5,
];
/// `(total, trainable, non-trainable)` printed under the reference table.
pub const REFERENCE_TOTALS: (usize, usize, usize) = (182_017, 180_985, 1_032);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub leak: f64,
    pub dropout: f64,
    /// Every conv except the last has `max(1, filters / filter_divisor)` filters.
    pub filter_divisor: usize,
    pub init: InitDistribution,
    pub seed: u64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    /// Penalty on the first conv.
    pub first_reg: RegSpec,
    /// Penalty on every other conv.
    pub reg: RegSpec,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            leak: DEFAULT_LEAK,
            dropout: 0.2,
            filter_divisor: 1,
            init: InitDistribution::Uniform,
            seed: 0,
            bn_epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_MOMENTUM,
            first_reg: RegSpec::L1(0.005),
            reg: RegSpec::L2(0.001),
        }
    }
}

/// Layer index of the block whose output feeds the concatenation (BN after C6).
pub const SKIP_SOURCE: usize = 2 + 3 * ENCODER_FILTERS.len() - 1;

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.filter_divisor == 0 {
            return Err(Error::arg("filter divisor must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout rate must be in [0, 1), got {}", self.dropout)));
        }
        if !self.leak.is_finite() || !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::arg("leak must be finite, BN epsilon > 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    fn filters(&self, f: usize) -> usize {
        (f / self.filter_divisor).max(1)
    }

    /// The layer list, in order.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let mut out = vec![
            LayerSpec::Reshape { shape: vec![27, 27, 1] },
            LayerSpec::Upsample { factors: (2, 2) },
        ];
        let mut conv_index = 0;
        let mut block = |out: &mut Vec<LayerSpec>, f: usize| {
            conv_index += 1;
            let reg = if conv_index == 1 { self.first_reg } else { self.reg };
            out.push(LayerSpec::Conv2D {
                filters: self.filters(f),
                kernel: (3, 3),
                reg,
            });
            out.push(LayerSpec::LeakyRelu { alpha: self.leak });
            out.push(LayerSpec::BatchNorm {
                epsilon: self.bn_epsilon,
                momentum: self.bn_momentum,
            });
        };
        for f in ENCODER_FILTERS {
            block(&mut out, f);
        }
        debug_assert_eq!(out.len() - 1, SKIP_SOURCE);
        out.push(LayerSpec::AvgPool {
            pool: (2, 2),
            stride: (2, 2),
        });
        for f in BOTTLENECK_FILTERS {
            block(&mut out, f);
        }
        out.push(LayerSpec::Dropout { rate: self.dropout });
        out.push(LayerSpec::Upsample { factors: (6, 6) });
        out.push(LayerSpec::CenterCrop { size: (39, 39) });
        out.push(LayerSpec::ConcatSkip { source: SKIP_SOURCE });
        for f in DECODER_FILTERS {
            block(&mut out, f);
        }
        out.push(LayerSpec::Conv2D {
            filters: 1,
            kernel: (1, 1),
            reg: self.reg,
        });
        out.push(LayerSpec::Sigmoid);
        out.push(LayerSpec::Reshape {
            shape: KERNEL_SHAPE.to_vec(),
        });
        Ok(out)
    }
}

pub fn build_unet(spec: &UNetSpec) -> Result<Network> {
    Network::new(KERNEL_SHAPE.to_vec(), spec.layers()?, spec.init, spec.seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvCount {
    pub name: String,
    pub count: usize,
    /// Value from [`REFERENCE_CONV_PARAMS`], when the network has the full filter set.
    pub reference: Option<usize>,
}

impl ConvCount {
    pub fn matches_reference(&self) -> bool {
        self.reference.is_none_or(|r| r == self.count)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub convs: Vec<ConvCount>,
    pub trainable: usize,
    pub non_trainable: usize,
    /// Sum over conv layers only.
    pub conv_total: usize,
    pub bn_channels: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }

    /// Conv rows that disagree with the reference table.
    pub fn mismatches(&self) -> Vec<&ConvCount> {
        self.convs.iter().filter(|c| !c.matches_reference()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("layer            params  reference\n");
        for c in &self.convs {
            let r = match c.reference {
                Some(r) if r != c.count => format!("{r}  (differs)"),
                Some(r) => r.to_string(),
                None => "-".into(),
            };
            s += &format!("{:<16} {:>6}  {r}\n", c.name, c.count);
        }
        let (rt, rtr, rnt) = REFERENCE_TOTALS;
        s += &format!("conv total       {:>6}\n", self.conv_total);
        s += &format!("trainable        {:>6}  (reference {rtr})\n", self.trainable);
        s += &format!("non-trainable    {:>6}  (reference {rnt})\n", self.non_trainable);
        s += &format!("total            {:>6}  (reference {rt})\n", self.total());
        s
    }
}

pub fn count_params(net: &Network) -> ParamReport {
    let convs = net.conv_param_counts();
    let full = convs.len() == REFERENCE_CONV_PARAMS.len()
        && net.layers.iter().filter(|l| matches!(l.spec, LayerSpec::Conv2D { .. })).zip(
            ENCODER_FILTERS.iter().chain(&BOTTLENECK_FILTERS).chain(&DECODER_FILTERS).chain(&[1]),
        ).all(|(l, &f)| matches!(l.spec, LayerSpec::Conv2D { filters, .. } if filters == f));
    let (trainable, non_trainable) = net.param_counts();
    let bn_channels = net
        .layers
        .iter()
        .filter(|l| matches!(l.spec, LayerSpec::BatchNorm { .. }))
        .map(|l| *l.output_shape.last().unwrap())
        .sum();
    ParamReport {
        conv_total: convs.iter().map(|c| c.1).sum(),
        convs: convs
            .into_iter()
            .enumerate()
            .map(|(i, (name, count))| ConvCount {
                name,
                count,
                reference: full.then(|| REFERENCE_CONV_PARAMS[i]),
            })
            .collect(),
        trainable,
        non_trainable,
        bn_channels,
    }
}
