//! Parameterised building blocks shared by the model modules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::Params;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Whether batch norms use batch statistics (and report them) or running
/// statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// `x·W + b` with `W: in×out` stored as `{prefix}.weight` and `b` as
/// `{prefix}.bias`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: Some(format!("{prefix}.bias")),
            fan_in,
            fan_out,
        }
    }

    pub fn without_bias(prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            bias: None,
            ..Self::new(prefix, fan_in, fan_out)
        }
    }

    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) -> Result<()> {
        params.init_uniform(&self.weight, &[self.fan_in, self.fan_out], self.fan_in, rng)?;
        if let Some(b) = &self.bias {
            params.insert(b.clone(), Array::zeros(&[self.fan_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(params, b)?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-column batch normalisation with learned scale/shift and running
/// statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
        }
    }

    pub fn init(&self, params: &mut Params) -> Result<()> {
        let c = self.channels;
        params.insert(format!("{}.scale", self.prefix), Array::full(&[c], 1.0))?;
        params.insert(format!("{}.shift", self.prefix), Array::zeros(&[c]))?;
        params.insert_buffer(format!("{}.running_mean", self.prefix), Array::zeros(&[c]))?;
        params.insert_buffer(format!("{}.running_var", self.prefix), Array::full(&[c], 1.0))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(params, &format!("{}.scale", self.prefix))?;
        let b = tape.param(params, &format!("{}.shift", self.prefix))?;
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batchnorm_train(x, g, b)?;
                if tape.value(x).rows() > 0 {
                    tape.record_stat_update(&self.prefix, mean, var);
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = params.get(&format!("{}.running_mean", self.prefix)).expect("initialised");
                let var = params.get(&format!("{}.running_var", self.prefix)).expect("initialised");
                let (mean, var) = (mean.data().to_vec(), var.data().to_vec());
                tape.batchnorm_eval(x, g, b, &mean, &var)
            }
        }
    }
}
