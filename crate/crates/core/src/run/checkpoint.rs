//! Versioned binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "SACDCKPT"
//! version      u32      1
//! config_hash  32 bytes SHA-256 of the run config snapshot
//! step         u64      gradient steps taken
//! log_alpha    f64
//! block_count  u32
//! block_count times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   tag        u8       0 = f64 array, 1 = u64 array
//!   count      u64
//!   payload    count * 8 bytes
//! ```

use std::path::Path;

use crate::approximator::AdamState;
use crate::sacd::Agent;

use super::RunError;

pub const MAGIC: &[u8; 8] = b"SACDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub log_alpha: f64,
    pub blocks: Vec<(String, Block)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RunError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            RunError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, RunError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, RunError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, RunError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, RunError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.log_alpha.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match block {
                Block::F64(v) => {
                    out.push(0);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Block::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RunError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(RunError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(RunError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let log_alpha = r.f64()?;
        let count = r.u32()?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| RunError::Checkpoint("block name is not UTF-8".into()))?;
            let tag = r.u8()?;
            let n = r.u64()? as usize;
            if n > bytes.len() / 8 {
                return Err(RunError::Checkpoint(format!("block `{name}` claims {n} entries")));
            }
            let block = match tag {
                0 => Block::F64((0..n).map(|_| r.f64()).collect::<Result<_, _>>()?),
                1 => Block::U64((0..n).map(|_| r.u64()).collect::<Result<_, _>>()?),
                t => return Err(RunError::Checkpoint(format!("block `{name}` has unknown tag {t}"))),
            };
            blocks.push((name, block));
        }
        if r.pos != bytes.len() {
            return Err(RunError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config_hash,
            step,
            log_alpha,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| RunError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let bytes = std::fs::read(path).map_err(|e| RunError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn f64s(&self, name: &str) -> Result<&[f64], RunError> {
        match self.blocks.iter().find(|(n, _)| n == name) {
            Some((_, Block::F64(v))) => Ok(v),
            Some(_) => Err(RunError::Checkpoint(format!("block `{name}` has the wrong type"))),
            None => Err(RunError::Checkpoint(format!("missing block `{name}`"))),
        }
    }

    fn u64s(&self, name: &str) -> Result<&[u64], RunError> {
        match self.blocks.iter().find(|(n, _)| n == name) {
            Some((_, Block::U64(v))) => Ok(v),
            Some(_) => Err(RunError::Checkpoint(format!("block `{name}` has the wrong type"))),
            None => Err(RunError::Checkpoint(format!("missing block `{name}`"))),
        }
    }

    pub fn from_agent(agent: &Agent, config_hash: [u8; 32]) -> Self {
        let mut blocks = vec![("policy".to_string(), Block::F64(agent.policy.params().to_vec()))];
        for twin in 0..2 {
            blocks.push((format!("critic.online.{twin}"), Block::F64(agent.critic.online(twin).to_vec())));
            blocks.push((format!("critic.target.{twin}"), Block::F64(agent.critic.target(twin).to_vec())));
        }
        for (name, opt) in [
            ("policy_opt", &agent.policy_opt),
            ("critic_opt", &agent.critic_opt),
            ("alpha_opt", &agent.alpha_opt),
        ] {
            blocks.push((format!("{name}.m"), Block::F64(opt.first_moment().to_vec())));
            blocks.push((format!("{name}.v"), Block::F64(opt.second_moment().to_vec())));
            blocks.push((format!("{name}.t"), Block::U64(vec![opt.steps()])));
        }
        Self {
            config_hash,
            step: agent.grad_steps,
            log_alpha: agent.log_alpha,
            blocks,
        }
    }

    /// Loads parameters and optimiser state into an agent built from the same config.
    pub fn apply_to(&self, agent: &mut Agent) -> Result<(), RunError> {
        let fit = |name: &str, dst: &mut [f64], src: &[f64]| -> Result<(), RunError> {
            if dst.len() != src.len() {
                return Err(RunError::Checkpoint(format!(
                    "block `{name}` has {} values, the agent expects {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
            Ok(())
        };
        fit("policy", agent.policy.params_mut(), self.f64s("policy")?)?;
        for twin in 0..2 {
            let name = format!("critic.online.{twin}");
            fit(&name, agent.critic.online_mut(twin), self.f64s(&name)?)?;
            let name = format!("critic.target.{twin}");
            fit(&name, agent.critic.target_mut(twin), self.f64s(&name)?)?;
        }
        let restore = |name: &str, opt: &AdamState| -> Result<AdamState, RunError> {
            let m = self.f64s(&format!("{name}.m"))?.to_vec();
            let v = self.f64s(&format!("{name}.v"))?.to_vec();
            let t = *self
                .u64s(&format!("{name}.t"))?
                .first()
                .ok_or_else(|| RunError::Checkpoint(format!("empty block `{name}.t`")))?;
            if m.len() != opt.len() || v.len() != opt.len() {
                return Err(RunError::Checkpoint(format!("optimiser `{name}` has the wrong size")));
            }
            Ok(AdamState::from_parts(opt.config(), m, v, t))
        };
        agent.policy_opt = restore("policy_opt", &agent.policy_opt)?;
        agent.critic_opt = restore("critic_opt", &agent.critic_opt)?;
        agent.alpha_opt = restore("alpha_opt", &agent.alpha_opt)?;
        agent.log_alpha = self.log_alpha;
        agent.grad_steps = self.step;
        Ok(())
    }
}
