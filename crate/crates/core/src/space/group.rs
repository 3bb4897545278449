use serde::{Deserialize, Serialize};

/// Gate groups: option 0 is the zero-connection, option 1 the operation.
pub const OFF: usize = 0;
pub const ON: usize = 1;
/// Identity groups of stride-1 Sensor-Fusion cells.
pub const IDENTITY: usize = 0;
pub const COMPUTE: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    /// Temporal kernel size of a Time-Reduce cell.
    Kernel(Vec<usize>),
    /// Filter count of a dynamic convolution.
    Filters(Vec<usize>),
    /// Operation vs zero-connection.
    Gate,
    /// Skip the cell vs compute it.
    Identity,
}

/// Architectural logits making one exclusive choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionGroup {
    pub id: String,
    pub role: GroupRole,
    pub option_labels: Vec<String>,
    pub logits: Vec<f64>,
}

impl DecisionGroup {
    pub(crate) fn new(id: String, role: GroupRole) -> Self {
        let option_labels: Vec<String> = match &role {
            GroupRole::Kernel(ks) => ks.iter().map(|k| format!("k{k}")).collect(),
            GroupRole::Filters(fs) => fs.iter().map(|f| f.to_string()).collect(),
            GroupRole::Gate => vec!["zero".into(), "op".into()],
            GroupRole::Identity => vec!["identity".into(), "compute".into()],
        };
        let logits = vec![0.0; option_labels.len()];
        Self {
            id,
            role,
            option_labels,
            logits,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Argmax of the logits; ties resolve to the lowest index.
    pub fn choice(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn filter_options(&self) -> Option<&[usize]> {
        match &self.role {
            GroupRole::Filters(fs) => Some(fs),
            _ => None,
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn one_hot(n: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[idx] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_tie_breaks_low() {
        let mut g = DecisionGroup::new("g".into(), GroupRole::Gate);
        assert_eq!(g.choice(), 0);
        g.logits = vec![0.1, 2.3];
        assert_eq!(g.choice(), 1);
        assert_eq!(argmax(&[0.1, 2.3, -1.0]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
    }
}
