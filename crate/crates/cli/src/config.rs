//! Run configuration: defaults, flat key=value config files, CLI overrides
//! and aggregated validation.

use gkt_core::data::DataError;
use gkt_core::distill::KdMode;
use gkt_core::models::{EdgeVariant, ServerDepth};
use gkt_core::train::{GktConfig, PlateauConfig, RunMode, TrainError, TransportKind};
use gkt_core::OptimizerSpec;
use std::path::PathBuf;

/// Everything the CLI resolves before any training starts. Built from
/// defaults, then a config file, then command-line flags, in that order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub role: Role,
    pub rounds: usize,
    pub edge_epochs: usize,
    pub server_epochs: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub optimizer: String,
    pub client_lr: f32,
    pub server_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub temperature: f32,
    pub kd_mode: String,
    pub mode: String,
    pub seed: u64,
    pub augment: bool,
    pub plateau_factor: Option<f32>,
    pub plateau_patience: usize,
    pub plateau_floor: f32,
    pub k: usize,
    pub alpha: f64,
    pub partition_seed: u64,
    pub partition_file: Option<PathBuf>,
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub train_size: usize,
    pub classes: usize,
    pub side: usize,
    pub noise: f32,
    pub test_size: usize,
    pub edge_variant: String,
    pub server_depth: String,
    pub server_base: Option<usize>,
    pub transport: String,
    pub out_dir: PathBuf,
    pub listen: Option<String>,
    pub server_addr: Option<String>,
    pub client_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sim,
    Server,
    Client,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss: {0}")]
    Diverged(String),
}

impl CliError {
    /// Process exit status: 2 config, 3 protocol, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Train(TrainError::Config(_)) => 2,
            CliError::Train(TrainError::Protocol(_)) | CliError::Train(TrainError::Desync(_)) => 3,
            CliError::Diverged(_) => 4,
            _ => 1,
        }
    }
}

/// Optional values collected from a config file or the command line;
/// `None` means "keep the previous layer's value".
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Communication rounds (epochs for the centralized baseline)
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Local epochs per client per round
    #[arg(long)]
    pub edge_epochs: Option<usize>,
    /// Server epochs per round
    #[arg(long)]
    pub server_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Forward-only evaluation batch size
    #[arg(long)]
    pub eval_batch: Option<usize>,
    /// Optimizer family: adam | sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub client_lr: Option<f32>,
    #[arg(long)]
    pub server_lr: Option<f32>,
    /// SGD momentum (ignored by adam)
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    /// Distillation temperature
    #[arg(long)]
    pub temperature: Option<f32>,
    /// Distillation direction: none | server-to-edge | both
    #[arg(long)]
    pub kd_mode: Option<String>,
    /// Round scheduling: sync | async
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random crop + horizontal flip on training batches
    #[arg(long)]
    pub augment: Option<bool>,
    /// Accuracy-plateau LR decay factor; unset disables the scheduler
    #[arg(long)]
    pub plateau_factor: Option<f32>,
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    #[arg(long)]
    pub plateau_floor: Option<f32>,
    /// Number of clients
    #[arg(long)]
    pub k: Option<usize>,
    /// Dirichlet concentration for the non-IID partition
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub partition_seed: Option<u64>,
    /// Pre-computed partition plan file (otherwise sampled from the seed)
    #[arg(long)]
    pub partition_file: Option<PathBuf>,
    /// Dataset: synthetic | cifar10
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding CIFAR-10 binary batches
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Synthetic training-set size
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Synthetic image side length
    #[arg(long)]
    pub side: Option<usize>,
    /// Synthetic per-pixel noise level
    #[arg(long)]
    pub noise: Option<f32>,
    /// Synthetic test-set size
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Edge architecture: resnet8 | resnet4 | resnet6 | toy:<base>
    #[arg(long)]
    pub edge_variant: Option<String>,
    /// Server architecture: r55 | r109 | toy:<blocks-per-stage>
    #[arg(long)]
    pub server_depth: Option<String>,
    /// First-stage plane count of the server (default: the edge width)
    #[arg(long)]
    pub server_base: Option<usize>,
    /// Wire used by sim runs: in-process | tcp
    #[arg(long)]
    pub transport: Option<String>,
    /// Output directory for metrics, checkpoints and the manifest
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Listen address for the server role
    #[arg(long)]
    pub listen: Option<String>,
    /// Coordinator address for the client role
    #[arg(long)]
    pub server_addr: Option<String>,
    /// This client's id in the partition plan
    #[arg(long)]
    pub client_id: Option<u32>,
}

impl RunConfig {
    /// Desk-scale defaults: every path exercised in seconds on a CPU.
    pub fn toy(role: Role) -> RunConfig {
        RunConfig {
            role,
            rounds: 15,
            edge_epochs: 1,
            server_epochs: 4,
            batch_size: 32,
            eval_batch: 128,
            optimizer: "adam".into(),
            client_lr: 1e-3,
            server_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            temperature: 2.0,
            kd_mode: "both".into(),
            mode: "sync".into(),
            seed: 0,
            augment: false,
            plateau_factor: None,
            plateau_patience: 3,
            plateau_floor: 1e-5,
            k: 4,
            alpha: 0.5,
            partition_seed: 0,
            partition_file: None,
            dataset: "synthetic".into(),
            data_dir: None,
            train_size: 800,
            classes: 4,
            side: 8,
            noise: 0.8,
            test_size: 400,
            edge_variant: "toy:8".into(),
            server_depth: "toy:1".into(),
            server_base: None,
            transport: "in-process".into(),
            out_dir: PathBuf::from("gkt-out"),
            listen: None,
            server_addr: None,
            client_id: 0,
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &o.$f { self.$f = v.clone(); } )* };
        }
        take!(
            rounds, edge_epochs, server_epochs, batch_size, eval_batch, optimizer, client_lr,
            server_lr, momentum, weight_decay, temperature, kd_mode, mode, seed, augment, k,
            alpha, partition_seed, dataset, train_size, classes, side, noise, test_size,
            edge_variant, server_depth, transport, out_dir, client_id, plateau_patience,
            plateau_floor
        );
        if o.plateau_factor.is_some() {
            self.plateau_factor = o.plateau_factor;
        }
        if o.server_base.is_some() {
            self.server_base = o.server_base;
        }
        if o.partition_file.is_some() {
            self.partition_file = o.partition_file.clone();
        }
        if o.data_dir.is_some() {
            self.data_dir = o.data_dir.clone();
        }
        if o.listen.is_some() {
            self.listen = o.listen.clone();
        }
        if o.server_addr.is_some() {
            self.server_addr = o.server_addr.clone();
        }
    }

    /// Every problem in one report, so a bad config fails exactly once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("rounds", self.rounds),
            ("edge-epochs", self.edge_epochs),
            ("server-epochs", self.server_epochs),
            ("batch-size", self.batch_size),
            ("eval-batch", self.eval_batch),
            ("k", self.k),
        ] {
            if v < 1 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if !matches!(self.optimizer.as_str(), "adam" | "sgd") {
            problems.push(format!("unknown optimizer '{}'", self.optimizer));
        }
        if self.parse_kd_mode().is_none() {
            problems.push(format!("unknown kd-mode '{}'", self.kd_mode));
        }
        if self.parse_mode().is_none() {
            problems.push(format!("unknown mode '{}'", self.mode));
        }
        if self.parse_transport().is_none() {
            problems.push(format!("unknown transport '{}'", self.transport));
        }
        if self.parse_edge_variant().is_none() {
            problems.push(format!("unknown edge-variant '{}'", self.edge_variant));
        }
        if self.parse_server_depth().is_none() {
            problems.push(format!("unknown server-depth '{}'", self.server_depth));
        }
        if !(self.temperature > 0.0) {
            problems.push("temperature must be positive".into());
        }
        if !(self.alpha > 0.0) {
            problems.push("alpha must be positive".into());
        }
        if self.classes < 2 {
            problems.push("classes must be >= 2".into());
        }
        match self.dataset.as_str() {
            "synthetic" => {
                if self.train_size < self.classes {
                    problems.push("train-size must be >= classes".into());
                }
            }
            "cifar10" => {
                if self.data_dir.is_none() {
                    problems.push("dataset cifar10 requires --data-dir".into());
                }
            }
            other => problems.push(format!("unknown dataset '{other}'")),
        }
        if let Some(f) = self.plateau_factor {
            if !(f > 0.0 && f < 1.0) {
                problems.push("plateau-factor must be in (0, 1)".into());
            }
        }
        match self.role {
            Role::Server => {
                if self.listen.is_none() {
                    problems.push("server role requires --listen".into());
                }
            }
            Role::Client => {
                if self.server_addr.is_none() {
                    problems.push("client role requires --server-addr".into());
                }
                if self.client_id as usize >= self.k {
                    problems.push("client-id must be < k".into());
                }
            }
            Role::Sim => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("; ")))
        }
    }

    pub fn parse_kd_mode(&self) -> Option<KdMode> {
        match self.kd_mode.as_str() {
            "none" => Some(KdMode::None),
            "server-to-edge" => Some(KdMode::ServerToEdgeOnly),
            "both" => Some(KdMode::Both),
            _ => None,
        }
    }

    pub fn parse_mode(&self) -> Option<RunMode> {
        match self.mode.as_str() {
            "sync" => Some(RunMode::Sync),
            "async" => Some(RunMode::Async),
            _ => None,
        }
    }

    pub fn parse_transport(&self) -> Option<TransportKind> {
        match self.transport.as_str() {
            "in-process" => Some(TransportKind::InProcess),
            "tcp" => Some(TransportKind::Tcp),
            _ => None,
        }
    }

    pub fn parse_edge_variant(&self) -> Option<EdgeVariant> {
        match self.edge_variant.as_str() {
            "resnet8" => Some(EdgeVariant::Resnet8),
            "resnet4" => Some(EdgeVariant::Resnet4),
            "resnet6" => Some(EdgeVariant::Resnet6),
            s => {
                let base: usize = s.strip_prefix("toy:")?.parse().ok()?;
                (base >= 1).then_some(EdgeVariant::Toy { base })
            }
        }
    }

    pub fn parse_server_depth(&self) -> Option<ServerDepth> {
        match self.server_depth.as_str() {
            "r55" => Some(ServerDepth::R55),
            "r109" => Some(ServerDepth::R109),
            s => {
                let blocks_per_stage: usize = s.strip_prefix("toy:")?.parse().ok()?;
                (blocks_per_stage >= 1).then_some(ServerDepth::Toy { blocks_per_stage })
            }
        }
    }

    fn opt_spec(&self, lr: f32) -> OptimizerSpec {
        match self.optimizer.as_str() {
            "sgd" => {
                let mut s = OptimizerSpec::sgd(lr, self.momentum);
                if let OptimizerSpec::SgdMomentum { weight_decay, .. } = &mut s {
                    *weight_decay = self.weight_decay;
                }
                s
            }
            _ => OptimizerSpec::adam(lr, self.weight_decay),
        }
    }

    pub fn client_opt(&self) -> OptimizerSpec {
        self.opt_spec(self.client_lr)
    }

    pub fn server_opt(&self) -> OptimizerSpec {
        self.opt_spec(self.server_lr)
    }

    /// Project onto the core training config. Call only after `validate`.
    pub fn gkt_config(&self) -> GktConfig {
        GktConfig {
            rounds: self.rounds,
            edge_epochs: self.edge_epochs,
            server_epochs: self.server_epochs,
            batch_size: self.batch_size,
            client_opt: self.client_opt(),
            server_opt: self.server_opt(),
            temperature: self.temperature,
            kd_mode: self.parse_kd_mode().expect("validated"),
            mode: self.parse_mode().expect("validated"),
            seed: self.seed,
            augment: self.augment,
            plateau: self.plateau_factor.map(|factor| PlateauConfig {
                factor,
                patience: self.plateau_patience,
                floor: self.plateau_floor,
            }),
            eval_batch: self.eval_batch,
        }
    }
}

/// Parse a flat `key = value` file into overrides. Keys use the same
/// kebab-case names as the long flags; `#` starts a comment; unknown keys
/// are errors (collected into one report).
pub fn parse_config_file(text: &str) -> Result<Overrides, CliError> {
    let mut o = Overrides::default();
    let mut problems = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            problems.push(format!("line {}: expected key=value", lineno + 1));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        if let Err(e) = set_key(&mut o, key, value) {
            problems.push(format!("line {}: {e}", lineno + 1));
        }
    }
    if problems.is_empty() {
        Ok(o)
    } else {
        Err(CliError::Config(problems.join("; ")))
    }
}

fn set_key(o: &mut Overrides, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("invalid value '{value}' for key '{key}'"))
    }
    match key {
        "rounds" => o.rounds = Some(num(key, value)?),
        "edge-epochs" => o.edge_epochs = Some(num(key, value)?),
        "server-epochs" => o.server_epochs = Some(num(key, value)?),
        "batch-size" => o.batch_size = Some(num(key, value)?),
        "eval-batch" => o.eval_batch = Some(num(key, value)?),
        "optimizer" => o.optimizer = Some(value.into()),
        "client-lr" => o.client_lr = Some(num(key, value)?),
        "server-lr" => o.server_lr = Some(num(key, value)?),
        "momentum" => o.momentum = Some(num(key, value)?),
        "weight-decay" => o.weight_decay = Some(num(key, value)?),
        "temperature" => o.temperature = Some(num(key, value)?),
        "kd-mode" => o.kd_mode = Some(value.into()),
        "mode" => o.mode = Some(value.into()),
        "seed" => o.seed = Some(num(key, value)?),
        "augment" => o.augment = Some(num(key, value)?),
        "plateau-factor" => o.plateau_factor = Some(num(key, value)?),
        "plateau-patience" => o.plateau_patience = Some(num(key, value)?),
        "plateau-floor" => o.plateau_floor = Some(num(key, value)?),
        "k" => o.k = Some(num(key, value)?),
        "alpha" => o.alpha = Some(num(key, value)?),
        "partition-seed" => o.partition_seed = Some(num(key, value)?),
        "partition-file" => o.partition_file = Some(PathBuf::from(value)),
        "dataset" => o.dataset = Some(value.into()),
        "data-dir" => o.data_dir = Some(PathBuf::from(value)),
        "train-size" => o.train_size = Some(num(key, value)?),
        "classes" => o.classes = Some(num(key, value)?),
        "side" => o.side = Some(num(key, value)?),
        "noise" => o.noise = Some(num(key, value)?),
        "test-size" => o.test_size = Some(num(key, value)?),
        "edge-variant" => o.edge_variant = Some(value.into()),
        "server-depth" => o.server_depth = Some(value.into()),
        "server-base" => o.server_base = Some(num(key, value)?),
        "transport" => o.transport = Some(value.into()),
        "out-dir" => o.out_dir = Some(PathBuf::from(value)),
        "listen" => o.listen = Some(value.into()),
        "server-addr" => o.server_addr = Some(value.into()),
        "client-id" => o.client_id = Some(num(key, value)?),
        other => return Err(format!("unknown key '{other}'")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_set_fields_and_cli_overrides_win() {
        let file = parse_config_file("rounds = 200\nbatch-size=256 # comment\n").unwrap();
        let mut cfg = RunConfig::toy(Role::Sim);
        cfg.apply(&file);
        assert_eq!(cfg.rounds, 200);
        assert_eq!(cfg.batch_size, 256);

        let cli = Overrides {
            rounds: Some(10),
            ..Overrides::default()
        };
        cfg.apply(&cli);
        assert_eq!(cfg.rounds, 10);
        assert_eq!(cfg.batch_size, 256);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse_config_file("roundz = 5\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'roundz'"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_aggregates_every_problem() {
        let mut cfg = RunConfig::toy(Role::Sim);
        cfg.rounds = 0;
        cfg.kd_mode = "sideways".into();
        cfg.temperature = -1.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("rounds"));
        assert!(msg.contains("kd-mode"));
        assert!(msg.contains("temperature"));
    }

    #[test]
    fn client_role_without_server_addr_is_rejected() {
        let cfg = RunConfig::toy(Role::Client);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("server-addr"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn variant_strings_parse() {
        let mut cfg = RunConfig::toy(Role::Sim);
        cfg.edge_variant = "resnet8".into();
        assert_eq!(cfg.parse_edge_variant(), Some(EdgeVariant::Resnet8));
        cfg.edge_variant = "toy:12".into();
        assert_eq!(
            cfg.parse_edge_variant(),
            Some(EdgeVariant::Toy { base: 12 })
        );
        cfg.server_depth = "r109".into();
        assert_eq!(cfg.parse_server_depth(), Some(ServerDepth::R109));
        cfg.server_depth = "toy:3".into();
        assert_eq!(
            cfg.parse_server_depth(),
            Some(ServerDepth::Toy {
                blocks_per_stage: 3
            })
        );
    }

    #[test]
    fn fixture_file_round_trips_into_golden_struct() {
        let text = "rounds = 3\nk = 2\nedge-variant = toy:4\nserver-depth = toy:1\nseed = 9\n";
        let mut cfg = RunConfig::toy(Role::Sim);
        cfg.apply(&parse_config_file(text).unwrap());
        cfg.validate().unwrap();
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["rounds"], 3);
        assert_eq!(json["k"], 2);
        assert_eq!(json["edge_variant"], "toy:4");
        assert_eq!(json["seed"], 9);
        assert_eq!(json["role"], "sim");
    }
}
