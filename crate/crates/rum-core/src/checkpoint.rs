//! Single-file checkpoint format.
//!
//! Layout: the 8-byte magic `RUMCKPT1`, a little-endian u64 giving the
//! byte length of the UTF-8 JSON header that follows (run config,
//! iteration, rng state, optimizer step counter, tensor directory), and
//! then each tensor's float64 values little-endian, in directory order.
//! Directory offsets are byte offsets from the start of that payload
//! region. Model parameters come first under their own names, followed
//! by optimizer accumulators under `opt.v.<name>` (and `opt.m.<name>`
//! for Adam). Serialization is deterministic, so identical training
//! states produce byte-identical files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::{param_names, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{Rng, RngState};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::RunConfig;

pub const MAGIC: [u8; 8] = *b"RUMCKPT1";

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// Structurally invalid file (bad magic, truncated, bad JSON, …).
    Format(String),
    Tensor(TensorError),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Format(msg) => write!(f, "bad checkpoint: {msg}"),
            CheckpointError::Tensor(e) => write!(f, "checkpoint tensor error: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<TensorError> for CheckpointError {
    fn from(e: TensorError) -> Self {
        CheckpointError::Tensor(e)
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

// ── Format ───────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    iteration: u64,
    rng: RngState,
    opt_step: u64,
    tensors: Vec<DirEntry>,
}

/// A full training state: everything needed to continue a run
/// bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub opt_step: u64,
    /// Model parameters first (in declared order), then optimizer
    /// accumulators (`opt.v.*`, then `opt.m.*` for Adam).
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshots the current training state.
    pub fn capture(
        config: &RunConfig,
        iteration: u64,
        model: &Model,
        optimizer: &Optimizer,
        rng: &Rng,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = model.params().to_vec();
        for ((name, _), v) in model.params().iter().zip(&optimizer.v) {
            tensors.push((format!("opt.v.{name}"), v.clone()));
        }
        for ((name, _), m) in model.params().iter().zip(&optimizer.m) {
            tensors.push((format!("opt.m.{name}"), m.clone()));
        }
        Checkpoint {
            config: config.clone(),
            iteration,
            rng: rng.state(),
            opt_step: optimizer.step,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0u64;
        let dir: Vec<DirEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = DirEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            opt_step: self.opt_step,
            tensors: dir,
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| CheckpointError::Format(format!("header serialization: {e}")))?;

        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 {
            return Err(CheckpointError::Format(format!(
                "{} bytes is too short",
                bytes.len()
            )));
        }
        if bytes[0..8] != MAGIC {
            return Err(CheckpointError::Format(
                "wrong magic (not a RUMCKPT1 file)".to_string(),
            ));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16 + json_len;
        if bytes.len() < payload_start {
            return Err(CheckpointError::Format("truncated header".to_string()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| CheckpointError::Format(format!("header JSON: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_end = 0usize;
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(8 * count)
                .ok_or_else(|| CheckpointError::Format("offset overflow".to_string()))?;
            if end > payload.len() {
                return Err(CheckpointError::Format(format!(
                    "tensor '{}' extends past the payload ({} > {} bytes)",
                    entry.name,
                    end,
                    payload.len()
                )));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
            expected_end = expected_end.max(end);
        }
        if expected_end != payload.len() {
            return Err(CheckpointError::Format(format!(
                "payload has {} bytes, directory covers {expected_end}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            iteration: header.iteration,
            rng: header.rng,
            opt_step: header.opt_step,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Rebuilds the model; names and shapes are validated against the
    /// stored config.
    pub fn restore_model(&self) -> Result<Model> {
        let names = param_names(self.config.cell);
        let mut params = Vec::with_capacity(names.len());
        for &name in names {
            let t = self.tensor(name).ok_or_else(|| {
                CheckpointError::Format(format!("missing parameter tensor '{name}'"))
            })?;
            params.push((name.to_string(), t.clone()));
        }
        Model::from_params(
            self.config.cell,
            self.config.cell_config(),
            self.config.vocab_out(),
            params,
        )
        .map_err(CheckpointError::Tensor)
    }

    /// Rebuilds the optimizer with its saved accumulators and step
    /// counter.
    pub fn restore_optimizer(&self) -> Result<Optimizer> {
        let names = param_names(self.config.cell);
        let grab = |prefix: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|name| {
                    let key = format!("{prefix}{name}");
                    self.tensor(&key).cloned().ok_or_else(|| {
                        CheckpointError::Format(format!("missing accumulator tensor '{key}'"))
                    })
                })
                .collect()
        };
        let v = grab("opt.v.")?;
        let m = match self.config.optimizer {
            OptimizerKind::Adam => grab("opt.m.")?,
            OptimizerKind::Rmsprop => Vec::new(),
        };
        Ok(Optimizer {
            kind: self.config.optimizer,
            hyper: self.config.optim_hyper(),
            step: self.opt_step,
            v,
            m,
        })
    }

    /// Rebuilds the training-stream rng at its saved position.
    pub fn restore_rng(&self) -> Result<Rng> {
        Rng::from_state(&self.rng).map_err(CheckpointError::Format)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimHyper;
    use crate::tasks::TaskKind;
    use tempfile::TempDir;

    fn sample_state(optimizer: OptimizerKind) -> (RunConfig, Model, Optimizer, Rng) {
        let config = RunConfig {
            task: TaskKind::Recall,
            t: 6,
            n_h: 4,
            lambda: 1,
            optimizer,
            seed: 11,
            ..RunConfig::default()
        };
        let mut rng = Rng::from_seed(config.seed);
        let model = Model::new(
            config.cell,
            config.cell_config(),
            config.vocab_out(),
            &mut rng,
        )
        .unwrap();
        let shapes: Vec<&[usize]> = model.params().iter().map(|(_, t)| t.shape()).collect();
        let mut opt = Optimizer::new(optimizer, OptimHyper::default(), &shapes);
        // Touch the accumulators and the rng so the round-trip covers
        // non-trivial state.
        opt.step = 17;
        for v in &mut opt.v {
            for x in v.data_mut() {
                *x = rng.uniform(0.0, 1.0);
            }
        }
        for m in &mut opt.m {
            for x in m.data_mut() {
                *x = rng.uniform(-1.0, 1.0);
            }
        }
        (config, model, opt, rng)
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let dir = TempDir::new().unwrap();
            let path = dir.path().join("state.ckpt");
            let (config, model, opt, rng) = sample_state(kind);
            let ckpt = Checkpoint::capture(&config, 42, &model, &opt, &rng);
            ckpt.save(&path).unwrap();

            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded.iteration, 42);
            assert_eq!(loaded.config, {
                let mut c = config.clone();
                // out_dir is never serialized; deserialization fills it with
                // the default, which the caller overrides when resuming.
                c.out_dir = RunConfig::default().out_dir;
                c
            });
            assert_eq!(loaded.rng, rng.state());
            assert_eq!(loaded.opt_step, 17);

            let rmodel = loaded.restore_model().unwrap();
            for ((an, a), (bn, b)) in model.params().iter().zip(rmodel.params()) {
                assert_eq!(an, bn);
                assert_eq!(bits(a), bits(b), "{an} changed across round trip");
            }
            let ropt = loaded.restore_optimizer().unwrap();
            assert_eq!(ropt.step, opt.step);
            for (a, b) in opt.v.iter().zip(&ropt.v) {
                assert_eq!(bits(a), bits(b));
            }
            assert_eq!(opt.m.len(), ropt.m.len());
            for (a, b) in opt.m.iter().zip(&ropt.m) {
                assert_eq!(bits(a), bits(b));
            }
            // The restored rng continues the exact stream.
            let mut orig = rng.clone();
            let mut rest = loaded.restore_rng().unwrap();
            for _ in 0..16 {
                assert_eq!(orig.next_u64(), rest.next_u64());
            }
        }
    }

    #[test]
    fn save_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let (config, model, opt, rng) = sample_state(OptimizerKind::Rmsprop);
        let ckpt = Checkpoint::capture(&config, 7, &model, &opt, &rng);
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        ckpt.save(&p1).unwrap();
        ckpt.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn layout_starts_with_magic_and_json_header() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("state.ckpt");
        let (config, model, opt, rng) = sample_state(OptimizerKind::Rmsprop);
        Checkpoint::capture(&config, 3, &model, &opt, &rng)
            .save(&path)
            .unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..8], b"RUMCKPT1");
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + json_len]).unwrap();
        assert_eq!(header["iteration"], 3);
        assert_eq!(header["rng"]["algorithm"], "chacha8");
        let dir_entries = header["tensors"].as_array().unwrap();
        assert_eq!(dir_entries[0]["name"], "W_xh");
        assert_eq!(dir_entries[0]["offset"], 0);
        // Full file length = preamble + payload given by the directory.
        let total: usize = model
            .params()
            .iter()
            .map(|(_, t)| t.len())
            .chain(opt.v.iter().map(|t| t.len()))
            .sum();
        assert_eq!(bytes.len(), 16 + json_len + 8 * total);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("state.ckpt");
        let (config, model, opt, rng) = sample_state(OptimizerKind::Rmsprop);
        Checkpoint::capture(&config, 1, &model, &opt, &rng)
            .save(&path)
            .unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Format(_))
        ));

        fs::write(&path, &good[..good.len() - 4]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Format(_))
        ));

        fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Format(_))
        ));

        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.ckpt")),
            Err(CheckpointError::Io(_))
        ));
    }

    #[test]
    fn missing_tensors_fail_restore() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("state.ckpt");
        let (config, model, opt, rng) = sample_state(OptimizerKind::Rmsprop);
        let mut ckpt = Checkpoint::capture(&config, 1, &model, &opt, &rng);
        ckpt.tensors.retain(|(n, _)| n != "W_hh");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(matches!(
            loaded.restore_model(),
            Err(CheckpointError::Format(_))
        ));
    }
}
