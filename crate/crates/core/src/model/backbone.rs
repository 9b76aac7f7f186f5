use serde::{Deserialize, Serialize};

use super::layers::{init_cbr, same, Forward};
use crate::autodiff::kernels::ConvGeom;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Four-stage residual network small enough for desk-scale runs.
    Tiny,
    /// Bottleneck ResNet-50 layout (3, 4, 6, 3 blocks).
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub stem_channels: usize,
    /// Output channels of the four residual stages.
    pub stage_channels: [usize; 4],
    /// Cumulative stride at the output of each stage.
    pub stage_strides: [usize; 4],
    pub init_seed: u64,
}

impl BackboneConfig {
    pub fn tiny(init_seed: u64) -> Self {
        Self {
            kind: BackboneKind::Tiny,
            stem_channels: 8,
            stage_channels: [16, 32, 48, 64],
            stage_strides: [4, 8, 16, 32],
            init_seed,
        }
    }

    pub fn resnet50(init_seed: u64) -> Self {
        Self {
            kind: BackboneKind::Resnet50,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            stage_strides: [4, 8, 16, 32],
            init_seed,
        }
    }

    pub fn for_kind(kind: BackboneKind, init_seed: u64) -> Self {
        match kind {
            BackboneKind::Tiny => Self::tiny(init_seed),
            BackboneKind::Resnet50 => Self::resnet50(init_seed),
        }
    }

    /// Stride of the shallow tap (stage 1).
    pub fn s1(&self) -> usize {
        self.stage_strides[0]
    }

    /// Stride of the deep tap (stage 4); input sides must be multiples of it.
    pub fn s4(&self) -> usize {
        self.stage_strides[3]
    }

    pub fn c1(&self) -> usize {
        self.stage_channels[0]
    }

    pub fn c4(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let stride = self.s4();
        if height == 0 || width == 0 || height % stride != 0 || width % stride != 0 {
            return Err(Error::NotDivisible { height, width, stride });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.kind {
            BackboneKind::Tiny => [4, 8, 16, 32],
            BackboneKind::Resnet50 => [4, 8, 16, 32],
        };
        if self.stage_strides != expected {
            return Err(Error::Config(format!("stage strides must be {expected:?}")));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.stem_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.kind == BackboneKind::Resnet50 && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::Config("bottleneck widths must be multiples of 4".into()));
        }
        Ok(())
    }
}

const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];

/// Features tapped after stage 1 and stage 4.
#[derive(Debug, Clone, Copy)]
pub struct StageTaps {
    pub c1: Var,
    pub c4: Var,
}

pub(crate) fn init_backbone<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig) {
    let seed = cfg.init_seed;
    match cfg.kind {
        BackboneKind::Tiny => {
            init_cbr(store, "enc.stem", 3, cfg.stem_channels, 3, seed);
            let mut cin = cfg.stem_channels;
            for (i, &c) in cfg.stage_channels.iter().enumerate() {
                init_cbr(store, &format!("enc.s{}.down", i + 1), cin, c, 3, seed);
                init_cbr(store, &format!("enc.s{}.res", i + 1), c, c, 3, seed);
                cin = c;
            }
        }
        BackboneKind::Resnet50 => {
            init_cbr(store, "enc.stem", 3, cfg.stem_channels, 7, seed);
            let mut cin = cfg.stem_channels;
            for (i, (&c, &blocks)) in cfg.stage_channels.iter().zip(&RESNET50_BLOCKS).enumerate() {
                let mid = c / 4;
                for b in 0..blocks {
                    let p = format!("enc.s{}.b{}", i + 1, b);
                    init_cbr(store, &format!("{p}.reduce"), cin, mid, 1, seed);
                    init_cbr(store, &format!("{p}.conv"), mid, mid, 3, seed);
                    init_cbr(store, &format!("{p}.expand"), mid, c, 1, seed);
                    if b == 0 {
                        init_cbr(store, &format!("{p}.shortcut"), cin, c, 1, seed);
                    }
                    cin = c;
                }
            }
        }
    }
}

pub(crate) fn run_backbone<T: Scalar>(fwd: &mut Forward<'_, T>, cfg: &BackboneConfig, x: Var) -> Result<StageTaps> {
    match cfg.kind {
        BackboneKind::Tiny => {
            let mut h = fwd.cbr("enc.stem", x, same(3, 2))?;
            let mut taps = Vec::with_capacity(4);
            for i in 1..=4 {
                let down = fwd.cbr(&format!("enc.s{i}.down"), h, same(3, 2))?;
                let res = fwd.cb(&format!("enc.s{i}.res"), down, same(3, 1))?;
                let sum = fwd.tape.add(res, down)?;
                h = fwd.tape.relu(sum);
                taps.push(h);
            }
            Ok(StageTaps { c1: taps[0], c4: taps[3] })
        }
        BackboneKind::Resnet50 => {
            let stem = fwd.cbr("enc.stem", x, same(7, 2))?;
            let mut h = fwd.tape.max_pool(stem, 3, ConvGeom::new(2, 1, 1));
            let mut taps = Vec::with_capacity(4);
            for (i, &blocks) in RESNET50_BLOCKS.iter().enumerate() {
                for b in 0..blocks {
                    let p = format!("enc.s{}.b{}", i + 1, b);
                    let stride = if b == 0 && i > 0 { 2 } else { 1 };
                    let r = fwd.cbr(&format!("{p}.reduce"), h, same(1, 1))?;
                    let r = fwd.cbr(&format!("{p}.conv"), r, same(3, stride))?;
                    let r = fwd.cb(&format!("{p}.expand"), r, same(1, 1))?;
                    let skip = if b == 0 { fwd.cb(&format!("{p}.shortcut"), h, ConvGeom::new(stride, 0, 1))? } else { h };
                    let sum = fwd.tape.add(r, skip)?;
                    h = fwd.tape.relu(sum);
                }
                taps.push(h);
            }
            Ok(StageTaps { c1: taps[0], c4: taps[3] })
        }
    }
}
