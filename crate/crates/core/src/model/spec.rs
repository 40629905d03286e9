//! Layer schedules of the two network variants.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{LEAKY_SLOPE, TRANSITION_DROPOUT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Three down-sampling and three up-sampling stages.
    EraseNet3,
    /// Four down-sampling and four up-sampling stages.
    EraseNet4,
}

impl Variant {
    /// Tag byte used in checkpoints and on the command line.
    pub fn tag(self) -> u8 {
        match self {
            Variant::EraseNet3 => 3,
            Variant::EraseNet4 => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            3 => Ok(Variant::EraseNet3),
            4 => Ok(Variant::EraseNet4),
            other => Err(Error::Config(format!(
                "unknown variant {other} (expected 3 or 4)"
            ))),
        }
    }

    pub fn down_samplings(self) -> usize {
        self.tag() as usize
    }

    /// Input height and width must be multiples of this.
    pub fn required_multiple(self) -> usize {
        1 << self.down_samplings()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EraseNet-{}", self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let t = t
            .strip_prefix("EraseNet-")
            .or_else(|| t.strip_prefix("erasenet-"))
            .unwrap_or(t);
        t.parse::<u8>()
            .map_err(|_| Error::Config(format!("unknown variant `{s}`")))
            .and_then(Variant::from_tag)
    }
}

/// One conv block: `depth` Conv -> BN -> LeakyReLU layers with additive dense
/// connectivity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub depth: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl ConvBlockSpec {
    pub const fn new(depth: usize, filters: usize, kernel: usize) -> Self {
        Self {
            depth,
            filters,
            kernel,
        }
    }

    fn scaled(self, width: f64) -> Self {
        Self {
            filters: scale_filters(self.filters, width),
            ..self
        }
    }
}

/// Up-sampling stage: transposed conv (+ReLU), skip concatenation, block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderStage {
    pub up_filters: usize,
    pub up_kernel: usize,
    pub block: ConvBlockSpec,
}

/// Full layer schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub encoder: Vec<ConvBlockSpec>,
    pub bottleneck: ConvBlockSpec,
    /// Deepest stage first; stage `i` consumes residual `encoder.len() - 1 - i`.
    pub decoder: Vec<DecoderStage>,
    pub head_kernel: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

const fn stage(up_filters: usize, block: ConvBlockSpec) -> DecoderStage {
    DecoderStage {
        up_filters,
        up_kernel: 3,
        block,
    }
}

pub(crate) fn scale_filters(filters: usize, width: f64) -> usize {
    ((filters as f64 * width).round() as usize).max(1)
}

impl ModelSpec {
    /// Nominal (full-width) schedule of a variant.
    pub fn for_variant(variant: Variant) -> Self {
        let b = ConvBlockSpec::new;
        let (encoder, bottleneck, decoder) = match variant {
            Variant::EraseNet4 => (
                vec![b(2, 64, 5), b(2, 64, 5), b(3, 128, 3), b(3, 256, 3)],
                b(4, 512, 3),
                vec![
                    stage(256, b(3, 256, 3)),
                    stage(128, b(3, 128, 3)),
                    stage(64, b(3, 64, 5)),
                    stage(64, b(3, 64, 5)),
                ],
            ),
            Variant::EraseNet3 => (
                vec![b(2, 64, 5), b(2, 64, 5), b(3, 128, 3)],
                b(3, 256, 3),
                vec![
                    stage(128, b(3, 128, 3)),
                    stage(64, b(3, 64, 5)),
                    stage(64, b(3, 64, 5)),
                ],
            ),
        };
        Self {
            input_channels: 1,
            encoder,
            bottleneck,
            decoder,
            head_kernel: 3,
            dropout: TRANSITION_DROPOUT,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    /// Multiplies every filter count by `width` (rounded, at least 1).
    pub fn scaled(&self, width: f64) -> Self {
        Self {
            encoder: self.encoder.iter().map(|b| b.scaled(width)).collect(),
            bottleneck: self.bottleneck.scaled(width),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderStage {
                    up_filters: scale_filters(d.up_filters, width),
                    block: d.block.scaled(width),
                    ..*d
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn down_samplings(&self) -> usize {
        self.encoder.len()
    }

    pub fn required_multiple(&self) -> usize {
        1 << self.down_samplings()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.len() != self.encoder.len() {
            return Err(Error::Config(format!(
                "{} encoder stages need as many decoder stages, got {}",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        let blocks = self
            .encoder
            .iter()
            .chain([&self.bottleneck])
            .chain(self.decoder.iter().map(|d| &d.block));
        for b in blocks {
            if b.depth == 0 || b.filters == 0 || b.kernel % 2 == 0 {
                return Err(Error::Config(format!("invalid conv block {b:?}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Radius, in input pixels, of the region an output pixel depends on
    /// (conservative: pooling windows are counted symmetrically).
    pub fn receptive_radius(&self) -> usize {
        let mut r = 0;
        let mut jump = 1;
        let block = |b: &ConvBlockSpec, jump: usize| b.depth * (b.kernel / 2) * jump;
        for b in &self.encoder {
            r += block(b, jump);
            r += jump;
            jump *= 2;
        }
        r += block(&self.bottleneck, jump);
        for d in &self.decoder {
            r += (d.up_kernel / 2) * jump;
            jump /= 2;
            r += block(&d.block, jump);
        }
        r + self.head_kernel / 2
    }
}
