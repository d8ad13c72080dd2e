//! Flat parameter storage with named, shaped slots.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SagError};

use super::ArchConfig;
use super::ModelKind;

/// A `rows x cols` block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Fan-in used for initialization; zero marks a zero-initialized slot.
    fan_in: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()]).expect("slot shape")
    }

    pub fn vec<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut data[self.range()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSlots {
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub bq: Slot,
    pub bk: Slot,
    pub bv: Slot,
}

/// Residual mixing applied after every transformer layer but the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixSlots {
    pub wo: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub heads: Vec<HeadSlots>,
    pub mix: Option<MixSlots>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScaleSlots {
    Transformer { layers: Vec<LayerSlots> },
    Mil { wa: Slot, ba: Slot, wv: Slot },
}

/// Indices of the three task log-variances inside `Layout::log_vars`.
pub const TASK_CLS: usize = 0;
pub const TASK_MSE: usize = 1;
pub const TASK_INOUT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub scales: Vec<ScaleSlots>,
    pub wc: Slot,
    pub bc: Slot,
    pub log_vars: Slot,
    pub names: Vec<(String, Slot)>,
    pub total: usize,
}

struct Builder {
    offset: usize,
    names: Vec<(String, Slot)>,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> Slot {
        let s = Slot { offset: self.offset, rows, cols, fan_in };
        self.offset += rows * cols;
        self.names.push((name, s));
        s
    }
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut b = Builder { offset: 0, names: Vec::new() };
        let e = arch.feature_dim;
        let mut pooled = 0;
        let scales = (0..arch.num_scales)
            .map(|s| match arch.kind {
                ModelKind::Transformer => {
                    let hd = arch.heads * arch.d_k;
                    pooled += hd;
                    let layers = (0..arch.layers)
                        .map(|l| {
                            let heads = (0..arch.heads)
                                .map(|h| HeadSlots {
                                    wq: b.slot(format!("s{s}.l{l}.h{h}.wq"), e, arch.d_k, e),
                                    wk: b.slot(format!("s{s}.l{l}.h{h}.wk"), e, arch.d_k, e),
                                    wv: b.slot(format!("s{s}.l{l}.h{h}.wv"), e, arch.d_k, e),
                                    bq: b.slot(format!("s{s}.l{l}.h{h}.bq"), 1, arch.d_k, 0),
                                    bk: b.slot(format!("s{s}.l{l}.h{h}.bk"), 1, arch.d_k, 0),
                                    bv: b.slot(format!("s{s}.l{l}.h{h}.bv"), 1, arch.d_k, 0),
                                })
                                .collect();
                            let mix = (l + 1 < arch.layers).then(|| MixSlots {
                                wo: b.slot(format!("s{s}.l{l}.wo"), hd, e, hd),
                                w1: b.slot(format!("s{s}.l{l}.w1"), e, arch.ff_dim, e),
                                b1: b.slot(format!("s{s}.l{l}.b1"), 1, arch.ff_dim, 0),
                                w2: b.slot(format!("s{s}.l{l}.w2"), arch.ff_dim, e, arch.ff_dim),
                                b2: b.slot(format!("s{s}.l{l}.b2"), 1, e, 0),
                            });
                            LayerSlots { heads, mix }
                        })
                        .collect();
                    ScaleSlots::Transformer { layers }
                }
                ModelKind::Mil => {
                    pooled += e;
                    ScaleSlots::Mil {
                        wa: b.slot(format!("s{s}.wa"), e, arch.mil_hidden, e),
                        ba: b.slot(format!("s{s}.ba"), 1, arch.mil_hidden, 0),
                        wv: b.slot(format!("s{s}.wv"), arch.mil_hidden, 1, arch.mil_hidden),
                    }
                }
            })
            .collect();
        let wc = b.slot("wc".into(), pooled, arch.num_classes, pooled);
        let bc = b.slot("bc".into(), 1, arch.num_classes, 0);
        let log_vars = b.slot("log_vars".into(), 1, 3, 0);
        Layout { scales, wc, bc, log_vars, total: b.offset, names: b.names }
    }

    /// Width of the pooled bag representation fed to the classifier.
    pub fn pooled_dim(&self) -> usize {
        self.wc.rows
    }
}

/// All learnable weights, stored as one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: &Layout) -> Self {
        Self { values: vec![0.0; layout.total] }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; biases and task
    /// log-variances start at zero.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total];
        for (_, slot) in &layout.names {
            if slot.fan_in == 0 {
                continue;
            }
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for v in &mut values[slot.range()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Self { values }
    }

    pub fn from_flat(layout: &Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total {
            return Err(SagError::shape(format!("{} parameters", layout.total), values.len()));
        }
        Ok(Self { values })
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
