use serde::{Deserialize, Serialize};

use super::layers::{init_cbr, same, Forward};
use crate::autodiff::kernels::ConvGeom;
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Number of output classes: unchanged, changed.
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width of every ASPP branch and of its projection.
    pub aspp_channels: usize,
    /// Dilation rates of the three 3x3 ASPP branches (the 1x1 branch has
    /// rate 1, and a global-pooling branch is always present).
    pub aspp_rates: [usize; 3],
    /// Width of the 1x1 projection applied to the shallow features.
    pub low_channels: usize,
    /// Width of the two 3x3 fusion blocks.
    pub fuse_channels: usize,
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        Self { aspp_channels: 64, aspp_rates: [6, 12, 18], low_channels: 16, fuse_channels: 32 }
    }

    pub fn resnet50() -> Self {
        Self { aspp_channels: 256, aspp_rates: [6, 12, 18], low_channels: 48, fuse_channels: 256 }
    }
}

pub(crate) fn init_decoder<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c1: usize, c4: usize, cfg: &DecoderConfig, seed: u64) {
    let a = cfg.aspp_channels;
    init_cbr(store, &format!("{prefix}.aspp.b0"), c4, a, 1, seed);
    for i in 1..=3 {
        init_cbr(store, &format!("{prefix}.aspp.b{i}"), c4, a, 3, seed);
    }
    init_cbr(store, &format!("{prefix}.aspp.pool"), c4, a, 1, seed);
    init_cbr(store, &format!("{prefix}.aspp.project"), 5 * a, a, 1, seed);
    init_cbr(store, &format!("{prefix}.low"), c1, cfg.low_channels, 1, seed);
    init_cbr(store, &format!("{prefix}.fuse1"), a + cfg.low_channels, cfg.fuse_channels, 3, seed);
    init_cbr(store, &format!("{prefix}.fuse2"), cfg.fuse_channels, cfg.fuse_channels, 3, seed);
    store.init_conv(&format!("{prefix}.classifier"), NUM_CLASSES, cfg.fuse_channels, 1, true, seed);
}

fn aspp<T: Scalar>(fwd: &mut Forward<'_, T>, prefix: &str, cfg: &DecoderConfig, d4: Var) -> Result<Var> {
    let (_, _, h, w) = fwd.value(d4).dims4();
    let mut branches = vec![fwd.cbr(&format!("{prefix}.aspp.b0"), d4, same(1, 1))?];
    for (i, &rate) in cfg.aspp_rates.iter().enumerate() {
        branches.push(fwd.cbr(&format!("{prefix}.aspp.b{}", i + 1), d4, ConvGeom::new(1, rate, rate))?);
    }
    let pooled = fwd.tape.global_avg_pool(d4);
    let pooled = fwd.cbr(&format!("{prefix}.aspp.pool"), pooled, same(1, 1))?;
    branches.push(fwd.tape.upsample_bilinear(pooled, h, w));
    let cat = fwd.tape.concat(&branches)?;
    fwd.cbr(&format!("{prefix}.aspp.project"), cat, same(1, 1))
}

/// Change logits at the resolution of `d1`:
/// `F4 = ASPP(d4)`, `F1 = CBR3(CBR3([Up(F4), CBR1(d1)]))`, `P = Conv1(F1)`.
pub(crate) fn run_decoder<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    prefix: &str,
    cfg: &DecoderConfig,
    d4: Var,
    d1: Var,
) -> Result<Var> {
    let (_, _, h1, w1) = fwd.value(d1).dims4();
    let f4 = aspp(fwd, prefix, cfg, d4)?;
    let up = fwd.tape.upsample_bilinear(f4, h1, w1);
    let low = fwd.cbr(&format!("{prefix}.low"), d1, same(1, 1))?;
    let cat = fwd.tape.concat(&[up, low])?;
    let f1 = fwd.cbr(&format!("{prefix}.fuse1"), cat, same(3, 1))?;
    let f1 = fwd.cbr(&format!("{prefix}.fuse2"), f1, same(3, 1))?;
    fwd.conv(&format!("{prefix}.classifier"), f1, same(1, 1))
}
