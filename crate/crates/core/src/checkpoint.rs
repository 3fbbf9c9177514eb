//! Versioned JSON snapshot of a trained model. Floats use shortest
//! round-trip formatting, so reading a checkpoint back is bit-exact.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadState;
use crate::trainer::{EmbedNet, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "adaface-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub net: EmbedNet,
    /// Class weights, norm statistics and margin state.
    pub head: HeadState,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, net: EmbedNet, head: HeadState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            net,
            head,
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(input)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("not a checkpoint (format `{}`)", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let rebuilt = EmbedNet::from_layers(ckpt.net.layers().to_vec())?;
        let head = HeadState::from_weights(
            ckpt.head.weights().clone(),
            ckpt.head.spec,
            ckpt.head.proxy,
            ckpt.head.norm_stats.clone(),
        )?;
        Ok(Self {
            net: rebuilt,
            head,
            ..ckpt
        })
    }
}
