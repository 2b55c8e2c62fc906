//! Multiply-add counts for global, windowed and latent-augmented windowed
//! self-attention over an `h × w` patch grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Global multi-head self-attention.
    Msa,
    /// Window-based attention with `M × M` windows.
    WMsa,
    /// Windowed attention with `T` latent tokens in every window.
    WMsaLatent,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msa" => Ok(Self::Msa),
            "w-msa" | "wmsa" => Ok(Self::WMsa),
            "w-msa*" | "wmsa*" | "w-msa-latent" | "wmsa-latent" => Ok(Self::WMsaLatent),
            other => Err(Error::arg(format!("unknown attention kind {other:?}"))),
        }
    }
}

/// Returns
///
/// * `Msa`: `4hwC² + 2(hw)²C`
/// * `WMsa`: `4hwC² + 2M²hwC`
/// * `WMsaLatent`: `4(hw+T)C² + 2M²(hw+T)C`
///
/// `m` is ignored for `Msa` and `t` is ignored unless `WMsaLatent`. All
/// counts must be positive except `t`, which may be zero.
pub fn complexity(kind: AttentionKind, h: u64, w: u64, c: u64, m: u64, t: u64) -> Result<u128> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::arg("h, w and C must be positive"));
    }
    if kind != AttentionKind::Msa && m == 0 {
        return Err(Error::arg("window size M must be positive"));
    }
    let (h, w, c, m, t) = (h as u128, w as u128, c as u128, m as u128, t as u128);
    let overflow = || Error::arg("complexity overflows 128 bits");
    let terms = |tokens: u128, mix: u128| -> Option<u128> {
        let proj = tokens.checked_mul(c)?.checked_mul(c)?.checked_mul(4)?;
        let attn = tokens.checked_mul(mix)?.checked_mul(c)?.checked_mul(2)?;
        proj.checked_add(attn)
    };
    let hw = h.checked_mul(w).ok_or_else(overflow)?;
    let m2 = m.checked_mul(m).ok_or_else(overflow)?;
    match kind {
        AttentionKind::Msa => terms(hw, hw),
        AttentionKind::WMsa => terms(hw, m2),
        AttentionKind::WMsaLatent => hw.checked_add(t).and_then(|n| terms(n, m2)),
    }
    .ok_or_else(overflow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_attention_example() {
        assert_eq!(
            complexity(AttentionKind::Msa, 8, 8, 4, 0, 0).unwrap(),
            36864
        );
    }

    #[test]
    fn degenerate_cases() {
        for (h, w, c, m) in [(4, 4, 3, 2), (8, 6, 5, 2), (1, 1, 1, 1)] {
            assert_eq!(
                complexity(AttentionKind::WMsaLatent, h, w, c, m, 0).unwrap(),
                complexity(AttentionKind::WMsa, h, w, c, m, 0).unwrap()
            );
        }
        // one window covering the grid
        assert_eq!(
            complexity(AttentionKind::WMsa, 4, 4, 7, 4, 0).unwrap(),
            complexity(AttentionKind::Msa, 4, 4, 7, 0, 0).unwrap()
        );
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(complexity(AttentionKind::Msa, 0, 4, 4, 0, 0).is_err());
        assert!(complexity(AttentionKind::WMsa, 4, 4, 4, 0, 0).is_err());
        assert!(complexity(AttentionKind::Msa, u64::MAX, u64::MAX, u64::MAX, 0, 0).is_err());
        assert!("nope".parse::<AttentionKind>().is_err());
        assert_eq!(
            "W-MSA*".parse::<AttentionKind>().unwrap(),
            AttentionKind::WMsaLatent
        );
    }
}
