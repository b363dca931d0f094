use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Pooling {
    Avg,
    Max { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ArchKind {
    /// `depth` linear maps, `depth - 1` gated hidden layers of width `w`.
    Fc { depth: usize },
    /// `conv_layers` circular conv layers (window `window`, `w` filters), a pooling
    /// layer, then `fc_layers` linear maps (`fc_layers - 1` gated hidden layers).
    ConvGap {
        conv_layers: usize,
        window: usize,
        fc_layers: usize,
        pooling: Pooling,
    },
    /// `skips + 2` fully connected blocks of depth `block_depth`; the `skips` middle
    /// blocks have identity skip connections around them.
    Resnet { skips: usize, block_depth: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub d_in: usize,
    pub width: usize,
    pub out_dim: usize,
    pub kind: ArchKind,
}

/// Shape of one parameterised layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Dense { fan_in: usize, fan_out: usize },
    Conv { window: usize, c_in: usize, c_out: usize },
}

impl LayerShape {
    pub fn tensor_shape(&self) -> Vec<usize> {
        match *self {
            LayerShape::Dense { fan_in, fan_out } => vec![fan_in, fan_out],
            LayerShape::Conv { window, c_in, c_out } => vec![window, c_in, c_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerShape::Dense { fan_in, .. } => fan_in,
            LayerShape::Conv { window, c_in, .. } => window * c_in,
        }
    }
}

impl ArchSpec {
    pub fn fc(d_in: usize, width: usize, depth: usize, out_dim: usize) -> Self {
        Self {
            d_in,
            width,
            out_dim,
            kind: ArchKind::Fc { depth },
        }
    }

    pub fn conv_gap(
        d_in: usize,
        width: usize,
        conv_layers: usize,
        window: usize,
        fc_layers: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            d_in,
            width,
            out_dim,
            kind: ArchKind::ConvGap {
                conv_layers,
                window,
                fc_layers,
                pooling: Pooling::Avg,
            },
        }
    }

    pub fn resnet(d_in: usize, width: usize, skips: usize, block_depth: usize, out_dim: usize) -> Self {
        Self {
            d_in,
            width,
            out_dim,
            kind: ArchKind::Resnet { skips, block_depth },
        }
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        if let ArchKind::ConvGap { pooling: p, .. } = &mut self.kind {
            *p = pooling;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.d_in == 0 || self.width == 0 || self.out_dim == 0 {
            return bad("d_in, width and out_dim must be positive".into());
        }
        match self.kind {
            ArchKind::Fc { depth } if depth < 2 => bad(format!("FC depth {depth} < 2")),
            ArchKind::ConvGap {
                conv_layers,
                window,
                fc_layers,
                pooling,
            } => {
                if conv_layers == 0 || fc_layers == 0 || window == 0 {
                    return bad("conv layers, fc layers and window must be positive".into());
                }
                if window >= self.d_in {
                    return bad(format!("conv window {window} must be < d_in = {}", self.d_in));
                }
                if let Pooling::Max { window: mw } = pooling {
                    if mw == 0 || !self.d_in.is_multiple_of(mw) {
                        return bad(format!("max-pool window {mw} must divide d_in"));
                    }
                }
                Ok(())
            }
            ArchKind::Resnet { block_depth: 0, .. } => {
                bad("block depth must be positive".into())
            }
            _ => Ok(()),
        }
    }

    /// Parameter shapes in forward order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let (d_in, w, out) = (self.d_in, self.width, self.out_dim);
        let dense = |fan_in, fan_out| LayerShape::Dense { fan_in, fan_out };
        match self.kind {
            ArchKind::Fc { depth } => (0..depth)
                .map(|l| {
                    let fan_in = if l == 0 { d_in } else { w };
                    let fan_out = if l + 1 == depth { out } else { w };
                    dense(fan_in, fan_out)
                })
                .collect(),
            ArchKind::ConvGap {
                conv_layers,
                window,
                fc_layers,
                ..
            } => {
                let mut v: Vec<LayerShape> = (0..conv_layers)
                    .map(|l| LayerShape::Conv {
                        window,
                        c_in: if l == 0 { 1 } else { w },
                        c_out: w,
                    })
                    .collect();
                v.extend((0..fc_layers).map(|l| dense(w, if l + 1 == fc_layers { out } else { w })));
                v
            }
            ArchKind::Resnet { skips, block_depth } => {
                let total = (skips + 2) * block_depth;
                (0..total)
                    .map(|l| {
                        let fan_in = if l == 0 { d_in } else { w };
                        let fan_out = if l + 1 == total { out } else { w };
                        dense(fan_in, fan_out)
                    })
                    .collect()
            }
        }
    }

    /// Number of gated (hidden) layers.
    pub fn gated_layers(&self) -> usize {
        match self.kind {
            ArchKind::Fc { depth } => depth - 1,
            ArchKind::ConvGap {
                conv_layers,
                fc_layers,
                ..
            } => conv_layers + fc_layers - 1,
            ArchKind::Resnet { skips, block_depth } => (skips + 2) * block_depth - 1,
        }
    }

    /// Per-example gate shape of gated layer `g`.
    pub fn gate_shape(&self, g: usize) -> Vec<usize> {
        match self.kind {
            ArchKind::ConvGap { conv_layers, .. } if g < conv_layers => vec![self.width, self.d_in],
            _ => vec![self.width],
        }
    }

    pub fn conv_layers(&self) -> usize {
        match self.kind {
            ArchKind::ConvGap { conv_layers, .. } => conv_layers,
            _ => 0,
        }
    }

    /// For ResNets, the block (0-based, `0..skips + 2`) that owns gated layer `g`.
    pub fn block_of_gated_layer(&self, g: usize) -> Option<usize> {
        match self.kind {
            ArchKind::Resnet { block_depth, .. } => Some(g / block_depth),
            _ => None,
        }
    }

    /// Shapes of the independent single linear maps a shallow linear gating
    /// network uses, one per gated layer, each applied directly to the input.
    pub fn shallow_gate_layers(&self) -> Vec<LayerShape> {
        (0..self.gated_layers())
            .map(|g| match self.kind {
                ArchKind::ConvGap { conv_layers, window, .. } if g < conv_layers => LayerShape::Conv {
                    window,
                    c_in: 1,
                    c_out: self.width,
                },
                _ => LayerShape::Dense {
                    fan_in: self.d_in,
                    fan_out: self.width,
                },
            })
            .collect()
    }

    /// Short content hash of the spec (first 16 hex digits of SHA-256 over its JSON form).
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("spec serialises");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.tensor_shape().iter().product::<usize>())
            .sum()
    }
}
