//! Versioned binary checkpoints for reward models and policies, each with a
//! plain-text manifest next to it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Result, SerError};
use crate::policy::{PolicyFeatures, PolicyParams};
use crate::reward_model::{Activation, RewardModelParams};

pub const MAGIC: [u8; 8] = *b"SERCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Reward(RewardModelParams),
    Policy(PolicyParams),
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Reward(p) => p.dim,
            Model::Policy(p) => p.dim,
        }
    }

    fn kind(&self) -> u8 {
        match self {
            Model::Reward(_) => 1,
            Model::Policy(_) => 2,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Model::Reward(_) => "reward_model",
            Model::Policy(_) => "policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub rng_state: u64,
}

impl Checkpoint {
    /// Refuses a checkpoint built for a different feature dimension.
    pub fn expect_dim(self, dim: usize) -> Result<Self> {
        if self.model.dim() != dim {
            return Err(SerError::Compatibility {
                field: "d",
                found: self.model.dim(),
                expected: dim,
            });
        }
        Ok(self)
    }

    pub fn into_reward_model(self) -> Result<RewardModelParams> {
        match self.model {
            Model::Reward(p) => Ok(p),
            Model::Policy(_) => Err(SerError::Format("checkpoint holds a policy, not a reward model".into())),
        }
    }

    pub fn into_policy(self) -> Result<PolicyParams> {
        match self.model {
            Model::Policy(p) => Ok(p),
            Model::Reward(_) => Err(SerError::Format("checkpoint holds a reward model, not a policy".into())),
        }
    }
}

fn features_code(f: PolicyFeatures) -> u8 {
    match f {
        PolicyFeatures::Concat => 0,
        PolicyFeatures::Interaction => 1,
        PolicyFeatures::Tabular => 2,
    }
}

fn features_from_code(c: u8) -> Option<PolicyFeatures> {
    match c {
        0 => Some(PolicyFeatures::Concat),
        1 => Some(PolicyFeatures::Interaction),
        2 => Some(PolicyFeatures::Tabular),
        _ => None,
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let (variant, d, h, version, weights) = match &ck.model {
        Model::Reward(p) => (p.activation.code() as u8, p.dim, p.hidden, p.version, &p.weights),
        Model::Policy(p) => (features_code(p.features), p.dim, p.input_len, p.version, &p.weights),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * weights.len() + 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ck.model.kind());
    out.push(variant);
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [d as u64, h as u64, weights.len() as u64, version] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&ck.rng_state.to_le_bytes());
    out
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| SerError::Format(format!("{what} {v} out of range")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(SerError::Format(format!(
            "checkpoint truncated: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[..8] != MAGIC {
        return Err(SerError::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(SerError::Format(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let (kind, variant) = (bytes[12], bytes[13]);
    let d = to_usize(u64_at(bytes, 16), "d")?;
    let h = to_usize(u64_at(bytes, 24), "h")?;
    let n = to_usize(u64_at(bytes, 32), "weight count")?;
    let model_version = u64_at(bytes, 40);
    let want = n
        .checked_mul(8)
        .and_then(|x| x.checked_add(HEADER_LEN + 8))
        .ok_or_else(|| SerError::Format(format!("weight count {n} out of range")))?;
    if bytes.len() != want {
        return Err(SerError::Format(format!(
            "checkpoint is {} bytes, header implies {want}",
            bytes.len()
        )));
    }
    let weights: Vec<f64> = bytes[HEADER_LEN..HEADER_LEN + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let rng_state = u64_at(bytes, HEADER_LEN + 8 * n);
    let model = match kind {
        1 => {
            let act = Activation::from_code(u32::from(variant))
                .ok_or_else(|| SerError::Format(format!("unknown activation code {variant}")))?;
            if n != RewardModelParams::n_weights(d, h) {
                return Err(SerError::Format(format!("{n} weights do not fit d={d}, h={h}")));
            }
            let mut p = RewardModelParams::from_weights(d, h, act, weights)
                .map_err(|e| SerError::Format(e.to_string()))?;
            p.version = model_version;
            Model::Reward(p)
        }
        2 => {
            let features = features_from_code(variant)
                .ok_or_else(|| SerError::Format(format!("unknown policy feature code {variant}")))?;
            if n != h {
                return Err(SerError::Format(format!("{n} weights do not match input length {h}")));
            }
            Model::Policy(PolicyParams {
                dim: d,
                features,
                input_len: h,
                weights,
                version: model_version,
            })
        }
        k => return Err(SerError::Format(format!("unknown checkpoint kind {k}"))),
    };
    Ok(Checkpoint { model, rng_state })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

fn manifest_text(ck: &Checkpoint, bytes: &[u8]) -> String {
    let (variant, d, h) = match &ck.model {
        Model::Reward(p) => (format!("{:?}", p.activation).to_lowercase(), p.dim, p.hidden),
        Model::Policy(p) => (format!("{:?}", p.features).to_lowercase(), p.dim, p.input_len),
    };
    let n = match &ck.model {
        Model::Reward(p) => p.weights.len(),
        Model::Policy(p) => p.weights.len(),
    };
    let version = match &ck.model {
        Model::Reward(p) => p.version,
        Model::Policy(p) => p.version,
    };
    format!(
        "magic = SERCKPT\nformat_version = {FORMAT_VERSION}\nkind = {}\nvariant = {variant}\nd = {d}\nh = {h}\nn_weights = {n}\nmodel_version = {version}\nrng_state = {}\nsha256 = {}\n",
        ck.model.kind_name(),
        ck.rng_state,
        hex::encode(Sha256::digest(bytes)),
    )
}

/// Writes through a temporary file and renames, so readers never see a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SerError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| SerError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| SerError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SerError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| SerError::io(path, e))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck);
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), manifest_text(ck, &bytes).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SerError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rm() -> Checkpoint {
        let mut p = RewardModelParams::random(3, 5, 11);
        p.weights[0] = -0.0;
        p.weights[1] = f64::MIN_POSITIVE;
        p.version = 7;
        Checkpoint {
            model: Model::Reward(p),
            rng_state: 0xDEAD_BEEF_0123_4567,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = rm();
        let back = decode(&encode(&ck)).unwrap();
        assert_eq!(back.rng_state, ck.rng_state);
        let (Model::Reward(a), Model::Reward(b)) = (&ck.model, &back.model) else {
            panic!("kind changed");
        };
        let bits = |p: &RewardModelParams| p.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
        assert_eq!(a, b);
    }

    #[test]
    fn policy_round_trip() {
        let ck = Checkpoint {
            model: Model::Policy(PolicyParams {
                dim: 2,
                features: PolicyFeatures::Concat,
                input_len: 4,
                weights: vec![0.5, -1.25, 3.0, 1e-300],
                version: 3,
            }),
            rng_state: 9,
        };
        assert_eq!(decode(&encode(&ck)).unwrap(), ck);
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = encode(&rm());
        for cut in [0, 7, HEADER_LEN - 1, HEADER_LEN + 3, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(SerError::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(SerError::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        let err = decode(&bad).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(SerError::Format(_))));
    }

    #[test]
    fn dimension_mismatch_names_both() {
        let err = rm().expect_dim(8).unwrap_err();
        assert!(matches!(err, SerError::Compatibility { found: 3, expected: 8, .. }));
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('8'), "{msg}");
    }

    #[test]
    fn save_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &rm()).unwrap();
        let text = fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(text.contains("d = 3\nh = 5\n"));
        assert_eq!(load_checkpoint(&path).unwrap(), rm());
    }
}
