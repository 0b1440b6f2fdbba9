use std::fmt;
use std::str::FromStr;

use crate::attention::BranchKind;
use crate::error::CsdnError;

/// How the branches of one layer are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Branches applied one after another, each with residual + norm (`s-d`).
    Stacked,
    /// Branches run on the same input and mixed by the gate (`n+b+d`).
    Gated,
}

/// A branch composition such as `s-d` or `n+b+d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Topology {
    pub mode: FusionMode,
    /// Branch order; significant only in stacked mode.
    pub branches: Vec<BranchKind>,
}

/// The seven compositions of the ablation matrix, in table order.
pub const ABLATION_TOPOLOGIES: [&str; 7] = ["s-d", "n-d", "b-d", "s+d", "b+d", "n+d", "n+b+d"];

impl Topology {
    pub fn new(mode: FusionMode, branches: Vec<BranchKind>) -> Result<Self, CsdnError> {
        if branches.is_empty() {
            return Err(CsdnError::Config("topology needs at least one branch".into()));
        }
        for (i, b) in branches.iter().enumerate() {
            if branches[..i].contains(b) {
                return Err(CsdnError::Config(format!("branch '{}' listed twice", b.code())));
            }
            if mode == FusionMode::Gated && branches[..i].iter().any(|o| o.gate_slot() == b.gate_slot()) {
                return Err(CsdnError::Config(format!(
                    "'{}' and another branch compete for the same gate slot",
                    b.code()
                )));
            }
        }
        Ok(Self { mode, branches })
    }

    pub fn contains(&self, kind: BranchKind) -> bool {
        self.branches.contains(&kind)
    }
}

impl FromStr for Topology {
    type Err = CsdnError;

    fn from_str(s: &str) -> Result<Self, CsdnError> {
        let s = s.trim();
        let (mode, sep) = match (s.contains('+'), s.contains('-')) {
            (true, true) => return Err(CsdnError::Config(format!("topology '{s}' mixes '+' and '-'"))),
            (false, true) => (FusionMode::Stacked, '-'),
            _ => (FusionMode::Gated, '+'),
        };
        let branches = s
            .split(sep)
            .map(|part| match part.trim() {
                "s" => Ok(BranchKind::SelfAttention),
                "n" => Ok(BranchKind::Neighbor),
                "b" => Ok(BranchKind::Block),
                "d" => Ok(BranchKind::Deformable),
                other => Err(CsdnError::Config(format!(
                    "unknown branch '{other}' in topology '{s}' (expected s, n, b or d)"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(mode, branches)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sep = match self.mode {
            FusionMode::Stacked => "-",
            FusionMode::Gated => "+",
        };
        let codes: Vec<String> = self.branches.iter().map(|b| b.code().to_string()).collect();
        f.write_str(&codes.join(sep))
    }
}

impl TryFrom<String> for Topology {
    type Error = CsdnError;

    fn try_from(s: String) -> Result<Self, CsdnError> {
        s.parse()
    }
}

impl From<Topology> for String {
    fn from(t: Topology) -> String {
        t.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use BranchKind::*;

    #[test]
    fn parses_every_ablation_row() {
        for s in ABLATION_TOPOLOGIES {
            let t: Topology = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        let t: Topology = "s-d".parse().unwrap();
        assert_eq!(t.mode, FusionMode::Stacked);
        assert_eq!(t.branches, vec![SelfAttention, Deformable]);
        let t: Topology = "n+b+d".parse().unwrap();
        assert_eq!(t.mode, FusionMode::Gated);
        assert_eq!(t.branches, vec![Neighbor, Block, Deformable]);
    }

    #[test]
    fn single_branch_is_gated() {
        let t: Topology = "d".parse().unwrap();
        assert_eq!(t.mode, FusionMode::Gated);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["", "s+d-b", "x+d", "d+d", "s+n", "s--d"] {
            assert!(bad.parse::<Topology>().is_err(), "{bad}");
        }
        // stacked composition may use both query-interaction branches
        assert!("s-n-d".parse::<Topology>().is_ok());
    }
}
