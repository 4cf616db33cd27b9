use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::heads::{Head, HeadSpec};
use crate::ndgrad::{Array, Mode, Scalar, Tape};
use crate::nn::Module;
use crate::trunk::{trunk_forward, TrunkConfig, TrunkParams};

/// A named head attached to the trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedHead {
    pub name: String,
    pub head: HeadSpec,
}

/// Everything needed to rebuild a [`Model`]'s shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub heads: Vec<NamedHead>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        for (i, h) in self.heads.iter().enumerate() {
            ensure!(
                !h.name.is_empty() && h.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'),
                "task name `{}` must be non-empty ASCII letters, digits, `_` or `-`",
                h.name
            );
            ensure!(self.heads[..i].iter().all(|o| o.name != h.name), "duplicate task name `{}`", h.name);
            h.head.validate()?;
        }
        Ok(())
    }
}

pub const TRUNK_GROUP: &str = "trunk";

/// Shared trunk plus one head per task.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    config: ModelConfig,
    pub trunk: TrunkParams<F>,
    heads: Vec<Head<F>>,
}

impl<F: Scalar> Model<F> {
    /// Initialises the trunk, then each head in order, from `rng`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let trunk = TrunkParams::init(&config.trunk, rng);
        let heads = config
            .heads
            .iter()
            .map(|h| Head::new(h.head.clone(), config.trunk.channels, rng))
            .collect::<Result<_>>()?;
        Ok(Model { config, trunk, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn trunk_config(&self) -> &TrunkConfig {
        &self.config.trunk
    }

    pub fn receptive_field(&self) -> usize {
        self.config.trunk.receptive_field()
    }

    pub fn task_names(&self) -> impl Iterator<Item = &str> {
        self.config.heads.iter().map(|h| h.name.as_str())
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.config.heads.iter().position(|h| h.name == name)
    }

    pub fn heads(&self) -> &[Head<F>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head<F>] {
        &mut self.heads
    }

    /// Optimiser group names: the trunk, then one per task.
    pub fn groups(&self) -> Vec<String> {
        std::iter::once(TRUNK_GROUP.to_string()).chain(self.task_names().map(str::to_owned)).collect()
    }

    /// Parameters of optimiser group `g` (0 = trunk, `i + 1` = head `i`).
    pub fn group_params(&self, g: usize) -> Vec<(String, &Array<F>)> {
        if g == 0 {
            self.trunk.params()
        } else {
            self.heads[g - 1].params()
        }
    }

    pub fn group_params_mut(&mut self, g: usize) -> Vec<(String, &mut Array<F>)> {
        if g == 0 {
            self.trunk.params_mut()
        } else {
            self.heads[g - 1].params_mut()
        }
    }

    fn prefix(&self, g: usize) -> String {
        if g == 0 {
            "trunk.".into()
        } else {
            format!("heads.{}.", self.config.heads[g - 1].name)
        }
    }

    /// Every parameter and buffer under its checkpoint name.
    pub fn tensors(&self) -> Vec<(String, &Array<F>)> {
        let mut out = Vec::new();
        for g in 0..=self.heads.len() {
            let p = self.prefix(g);
            let module: &dyn Module<F> = if g == 0 { &self.trunk } else { &self.heads[g - 1] };
            out.extend(module.params().into_iter().chain(module.buffers()).map(|(n, a)| (format!("{p}{n}"), a)));
        }
        out
    }

    /// Visits every tensor mutably, in [`Model::tensors`] order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array<F>)) {
        for (n, a) in self.trunk.params_mut() {
            f(&format!("trunk.{n}"), a);
        }
        for (h, spec) in self.heads.iter_mut().zip(&self.config.heads) {
            let p = format!("heads.{}.", spec.name);
            for (n, a) in h.params_mut() {
                f(&format!("{p}{n}"), a);
            }
            for (n, a) in h.buffers_mut() {
                f(&format!("{p}{n}"), a);
            }
        }
    }

    /// Trunk embedding `[B, C, T]` of `x: [B, 1, T]`.
    pub fn embed(&self, x: &Array<F>) -> Result<Array<F>> {
        crate::trunk::embed(&self.trunk, &self.config.trunk, x)
    }

    /// Eval-mode output of task `name` for `x: [B, 1, T]`.
    pub fn predict(&self, name: &str, x: &Array<F>) -> Result<Array<F>> {
        let i = self.head_index(name).ok_or_else(|| Error::invalid(format!("model has no task `{name}`")))?;
        let mut tape = Tape::new();
        let tv = self.trunk.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let emb = trunk_forward(&mut tape, xv, &tv, &self.config.trunk)?;
        // eval mode reads but never writes the batch-norm statistics
        let mut head = self.heads[i].clone();
        let hv = head.bind(&mut tape, false);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = head.forward_with(&mut tape, emb, &hv, Mode::Eval, &mut rng)?;
        Ok(tape.value(out).clone())
    }
}
