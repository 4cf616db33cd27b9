//! JSON run configuration shared by the command-line tool and the FFI.
//!
//! Parsing is strict: an unknown key anywhere fails with its path, e.g.
//! `tasks[0].hiden_units`. Omitted values take the defaults of the
//! library types.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadSpec};
use crate::ndgrad::{AdamConfig, LrSchedule};
use crate::train::{DataConfig, FitOutputs, TaskSpec, TrainConfig};
use crate::trunk::TrunkConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `None` means the default trunk, or the checkpoint's when fine-tuning.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trunk: Option<TrunkConfig>,
    pub tasks: Vec<TaskEntry>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

/// One entry of `tasks`. Head options left out keep the defaults of
/// [`HeadSpec::new`] for that kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub kind: HeadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Self-supervised tasks read this one in preference to `manifest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled_manifest: Option<PathBuf>,
    /// Manifest split to train on; every row when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamConfig>,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_strides: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_mask: Option<bool>,
}

fn one() -> f64 {
    1.0
}

impl TaskEntry {
    pub fn new(kind: HeadKind) -> Self {
        TaskEntry {
            kind,
            name: None,
            manifest: None,
            unlabeled_manifest: None,
            split: None,
            lr: None,
            weight: 1.0,
            optimizer: None,
            schedule: LrSchedule::default(),
            num_classes: None,
            hidden_units: None,
            dropout: None,
            conv_widths: None,
            conv_strides: None,
            conv_channels: None,
            filter_width: None,
            warmup_mask: None,
        }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn head(&self) -> HeadSpec {
        let mut h = HeadSpec::new(self.kind);
        if let Some(v) = self.num_classes {
            h.num_classes = v;
        }
        if let Some(v) = self.hidden_units {
            h.hidden_units = v;
        }
        if let Some(v) = self.dropout {
            h.dropout = v;
        }
        if let Some(v) = &self.conv_widths {
            h.conv_widths = v.clone();
        }
        if let Some(v) = &self.conv_strides {
            h.conv_strides = v.clone();
        }
        if let Some(v) = self.conv_channels {
            h.conv_channels = v;
        }
        if let Some(v) = self.filter_width {
            h.filter_width = v;
        }
        if let Some(v) = self.warmup_mask {
            h.warmup_mask = v;
        }
        h
    }

    /// `optimizer` with `lr` applied on top; the head kind's default rate
    /// when neither is given.
    pub fn spec(&self) -> TaskSpec {
        let mut t = TaskSpec::new(self.name(), self.head()).with_weight(self.weight);
        if let Some(o) = self.optimizer {
            t.optimizer = o;
        }
        if let Some(lr) = self.lr {
            t.optimizer.lr = lr;
        }
        t.schedule = self.schedule;
        t
    }

    /// Manifest this task trains on.
    pub fn data_manifest(&self) -> Option<&Path> {
        let m = if self.kind.is_self_supervised() {
            self.unlabeled_manifest.as_ref().or(self.manifest.as_ref())
        } else {
            self.manifest.as_ref()
        };
        m.map(PathBuf::as_path)
    }
}

impl RunConfig {
    /// Parses JSON text; relative paths stay relative.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path.is_empty() || path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        Ok(cfg)
    }

    /// Reads and parses `path`, then resolves relative paths against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        for t in &mut self.tasks {
            fix(&mut t.manifest);
            fix(&mut t.unlabeled_manifest);
        }
        fix(&mut self.data.noise_bank);
        fix(&mut self.io.checkpoint_dir);
        fix(&mut self.io.log_path);
    }

    pub fn trunk(&self) -> TrunkConfig {
        self.trunk.unwrap_or_default()
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(TaskEntry::spec).collect()
    }

    pub fn outputs(&self) -> FitOutputs {
        FitOutputs { log_path: self.io.log_path.clone(), checkpoint_dir: self.io.checkpoint_dir.clone() }
    }

    /// Checks everything that does not need the file system.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            e => e,
        };
        if self.tasks.is_empty() {
            return Err(Error::Config("`tasks` must list at least one task".into()));
        }
        self.trunk().validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.data.validate().map_err(cfg)?;
        let mut names = Vec::new();
        for (i, t) in self.tasks.iter().enumerate() {
            t.spec().validate().map_err(|e| Error::Config(format!("tasks[{i}]: {}", cfg(e))))?;
            let n = t.name();
            if names.contains(&n) {
                return Err(Error::Config(format!("tasks[{i}]: duplicate task name `{n}`")));
            }
            names.push(n);
        }
        Ok(())
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
