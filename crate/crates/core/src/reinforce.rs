//! Label reinforcement: stretch a sample's short label sequence to the full
//! encoder input length instead of padding it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, CLS, PAD};
use crate::error::{data_err, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReinforceMode {
    /// Pad to length only.
    #[default]
    None,
    /// Repeat the label sequence in its original order.
    Ordered,
    /// Repeat fresh random permutations of the labels.
    Disordered,
}

impl ReinforceMode {
    pub const ALL: [ReinforceMode; 3] = [Self::None, Self::Ordered, Self::Disordered];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ordered => "ordered",
            Self::Disordered => "disordered",
        }
    }
}

impl std::str::FromStr for ReinforceMode {
    type Err = crate::error::GudnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "ordered" => Ok(Self::Ordered),
            "disordered" => Ok(Self::Disordered),
            other => Err(crate::error::config_err(format!(
                "unknown reinforce_mode {other:?} (expected none, ordered or disordered)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reinforced {
    pub ids: Vec<TokenId>,
    /// No label tokens were available; the output is CLS plus padding.
    pub empty_body: bool,
}

fn cls_and_padding(max_len: usize) -> Reinforced {
    let mut ids = vec![PAD; max_len];
    if let Some(first) = ids.first_mut() {
        *first = CLS;
    }
    Reinforced {
        ids,
        empty_body: true,
    }
}

/// CLS followed by cyclic repetition of `label_seq[1..]`, cut to `max_len`.
pub fn reinforce_ordered(label_seq: &[TokenId], max_len: usize) -> Result<Reinforced> {
    match label_seq.first() {
        Some(&CLS) => {}
        Some(_) => return Err(data_err("label sequence must begin with CLS")),
        None => return Err(data_err("label sequence is empty")),
    }
    if max_len < label_seq.len() {
        return Err(data_err(format!(
            "max_len {max_len} shorter than label sequence ({})",
            label_seq.len()
        )));
    }
    let body = &label_seq[1..];
    if body.is_empty() {
        return Ok(cls_and_padding(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(body.iter().cycle().take(max_len - 1));
    Ok(Reinforced {
        ids,
        empty_body: false,
    })
}

/// CLS followed by blocks, each block a uniformly random permutation of
/// `groups` (whole labels move, tokens inside a label stay contiguous), cut
/// to `max_len`.
pub fn reinforce_disordered(
    groups: &[Vec<TokenId>],
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Reinforced> {
    if groups.is_empty() {
        return Err(data_err("no label groups to reinforce"));
    }
    if max_len == 0 {
        return Err(data_err("max_len must be >= 1"));
    }
    if groups.iter().all(Vec::is_empty) {
        return Ok(cls_and_padding(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    'fill: loop {
        order.shuffle(rng);
        for &g in &order {
            for &t in &groups[g] {
                if ids.len() == max_len {
                    break 'fill;
                }
                ids.push(t);
            }
        }
        if ids.len() == max_len {
            break;
        }
    }
    Ok(Reinforced {
        ids,
        empty_body: false,
    })
}

/// Builds the label-stream input of one sample under `mode`. Over-long label
/// sequences keep their head.
pub fn reinforce(
    mode: ReinforceMode,
    groups: &[Vec<TokenId>],
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Reinforced> {
    if max_len == 0 {
        return Err(data_err("max_len must be >= 1"));
    }
    match mode {
        ReinforceMode::Disordered => reinforce_disordered(groups, max_len, rng),
        ReinforceMode::None | ReinforceMode::Ordered => {
            let mut seq = vec![CLS];
            seq.extend(groups.iter().flatten());
            seq.truncate(max_len);
            if mode == ReinforceMode::Ordered {
                return reinforce_ordered(&seq, max_len);
            }
            let empty_body = seq.len() == 1;
            seq.resize(max_len, PAD);
            Ok(Reinforced {
                ids: seq,
                empty_body,
            })
        }
    }
}
