//! Training hyper-parameters, per-profile defaults, and their flat
//! `key = value` text form.

use std::fmt::Write as _;

use crate::augment::AugmentConfig;
use crate::graphs::DEFAULT_PMI_WINDOW;
use crate::ingest::FLOW_LEN_CAP;
use crate::losses::{LossSwitches, LossWeights};
use crate::model::{ModelDims, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM};
use crate::profile::Profile;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    /// Flows per micro-batch.
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub label_smoothing: f64,
    pub gnn_dropout: f64,
    pub lstm_dropout: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub pmi_window: usize,
    pub flow_len_cap: usize,
    pub temperature: f64,
    pub augment: AugmentConfig,
    pub weights: LossWeights,
    pub switches: LossSwitches,
    pub use_unsupervised_cl: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Vpn)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = Self {
            profile,
            batch_size: 16,
            grad_accumulation: 1,
            epochs: 20,
            lr_max: 1e-2,
            lr_min: 1e-4,
            warmup_fraction: 0.1,
            label_smoothing: 0.0,
            gnn_dropout: 0.0,
            lstm_dropout: 0.0,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            pmi_window: DEFAULT_PMI_WINDOW,
            flow_len_cap: FLOW_LEN_CAP,
            temperature: DEFAULT_TEMPERATURE,
            augment: AugmentConfig::default(),
            weights: LossWeights { alpha: 1.0, beta: 0.5 },
            switches: LossSwitches::default(),
            use_unsupervised_cl: false,
            seed: 0,
        };
        match profile {
            Profile::Vpn => base,
            Profile::NonVpn => Self {
                batch_size: 102,
                grad_accumulation: 5,
                epochs: 120,
                lr_min: 1e-5,
                label_smoothing: 0.01,
                gnn_dropout: 0.1,
                lstm_dropout: 0.15,
                weights: LossWeights { alpha: 0.4, beta: 0.8 },
                ..base
            },
            Profile::Tor => Self {
                batch_size: 32,
                epochs: 100,
                weights: LossWeights { alpha: 0.4, beta: 1.0 },
                ..base
            },
            Profile::NonTor => Self {
                batch_size: 102,
                grad_accumulation: 5,
                epochs: 120,
                gnn_dropout: 0.2,
                lstm_dropout: 0.1,
                weights: LossWeights { alpha: 0.6, beta: 1.0 },
                ..base
            },
        }
    }

    pub fn model_dims(&self, classes: usize) -> ModelDims {
        ModelDims {
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            packet: self.hidden_dim,
            flow: self.hidden_dim,
            head_hidden: self.hidden_dim,
            ..ModelDims::new(classes)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("batch_size", self.batch_size),
            ("grad_accumulation", self.grad_accumulation),
            ("epochs", self.epochs),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("pmi_window", self.pmi_window),
            ("flow_len_cap", self.flow_len_cap),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.pmi_window < 2 {
            return Err("pmi_window must be at least 2".into());
        }
        if self.flow_len_cap > 255 {
            return Err("flow_len_cap must be at most 255".into());
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(format!("lr_min must lie in (0, lr_max], got {}", self.lr_min));
        }
        for (name, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("label_smoothing", self.label_smoothing),
            ("gnn_dropout", self.gnn_dropout),
            ("lstm_dropout", self.lstm_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        self.augment.validate()?;
        self.weights.validate()
    }

    /// Every configurable key, in the order of [`TrainConfig::to_text`].
    pub const KEYS: &'static [&'static str] = &[
        "profile",
        "batch_size",
        "grad_accumulation",
        "epochs",
        "lr_max",
        "lr_min",
        "warmup_fraction",
        "label_smoothing",
        "gnn_dropout",
        "lstm_dropout",
        "embed_dim",
        "hidden_dim",
        "pmi_window",
        "flow_len_cap",
        "temperature",
        "p_node_drop",
        "p_edge_drop",
        "p_packet_drop",
        "augment_header",
        "augment_payload",
        "alpha",
        "beta",
        "enable_pcls",
        "enable_fcls",
        "enable_pcl",
        "enable_fcl",
        "use_unsupervised_cl",
        "seed",
    ];

    /// Sets one key from its text value. Setting `profile` resets every
    /// other key to that profile's defaults, keeping the seed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.trim()
                .parse()
                .map_err(|_| format!("invalid value {v:?} for {key}"))
        }
        match key {
            "profile" => {
                let seed = self.seed;
                *self = Self::for_profile(value.parse()?);
                self.seed = seed;
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "grad_accumulation" => self.grad_accumulation = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_max" => self.lr_max = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "gnn_dropout" => self.gnn_dropout = parse(key, value)?,
            "lstm_dropout" => self.lstm_dropout = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "pmi_window" => self.pmi_window = parse(key, value)?,
            "flow_len_cap" => self.flow_len_cap = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "p_node_drop" => self.augment.p_node_drop = parse(key, value)?,
            "p_edge_drop" => self.augment.p_edge_drop = parse(key, value)?,
            "p_packet_drop" => self.augment.p_packet_drop = parse(key, value)?,
            "augment_header" => self.augment.augment_header = parse(key, value)?,
            "augment_payload" => self.augment.augment_payload = parse(key, value)?,
            "alpha" => self.weights.alpha = parse(key, value)?,
            "beta" => self.weights.beta = parse(key, value)?,
            "enable_pcls" => self.switches.packet_cls = parse(key, value)?,
            "enable_fcls" => self.switches.flow_cls = parse(key, value)?,
            "enable_pcl" => self.switches.packet_cl = parse(key, value)?,
            "enable_fcl" => self.switches.flow_cl = parse(key, value)?,
            "use_unsupervised_cl" => self.use_unsupervised_cl = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(format!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "profile" => format!("{:?}", self.profile.name()),
            "batch_size" => self.batch_size.to_string(),
            "grad_accumulation" => self.grad_accumulation.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr_max" => float(self.lr_max),
            "lr_min" => float(self.lr_min),
            "warmup_fraction" => float(self.warmup_fraction),
            "label_smoothing" => float(self.label_smoothing),
            "gnn_dropout" => float(self.gnn_dropout),
            "lstm_dropout" => float(self.lstm_dropout),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "pmi_window" => self.pmi_window.to_string(),
            "flow_len_cap" => self.flow_len_cap.to_string(),
            "temperature" => float(self.temperature),
            "p_node_drop" => float(self.augment.p_node_drop),
            "p_edge_drop" => float(self.augment.p_edge_drop),
            "p_packet_drop" => float(self.augment.p_packet_drop),
            "augment_header" => self.augment.augment_header.to_string(),
            "augment_payload" => self.augment.augment_payload.to_string(),
            "alpha" => float(self.weights.alpha),
            "beta" => float(self.weights.beta),
            "enable_pcls" => self.switches.packet_cls.to_string(),
            "enable_fcls" => self.switches.flow_cls.to_string(),
            "enable_pcl" => self.switches.packet_cl.to_string(),
            "enable_fcl" => self.switches.flow_cl.to_string(),
            "use_unsupervised_cl" => self.use_unsupervised_cl.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Flat TOML with one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// Parses flat TOML. A `profile` key selects the base defaults; other
    /// keys override them. Unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let mut cfg = Self::default();
        if let Some(p) = table.get("profile") {
            cfg.set("profile", &scalar_text("profile", p)?)?;
        }
        for (key, value) in &table {
            if key == "profile" {
                continue;
            }
            cfg.set(key, &scalar_text(key, value)?)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn float(v: f64) -> String {
    // Always carry a decimal point or exponent so TOML reads a float back.
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

fn scalar_text(key: &str, v: &toml::Value) -> Result<String, String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(format!("{key} must be a string, number or boolean")),
    }
}
