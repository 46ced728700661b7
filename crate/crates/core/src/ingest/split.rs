use rand::seq::SliceRandom;

use super::IngestError;
use crate::rng::stream;

/// Which side of the train/test partition a flow belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train or test)")),
        }
    }
}

/// Assigns each flow (given by its label) to train or test so that every
/// label is split close to `ratio`: `ceil(ratio * n)` training flows, capped
/// at `n - 1` so each label keeps at least one test flow.
pub fn stratified_assignment(
    labels: &[u16],
    label_names: &[String],
    ratio: f64,
    seed: u64,
) -> Result<Vec<Split>, IngestError> {
    assert!((0.0..=1.0).contains(&ratio), "split ratio must lie in [0, 1]");
    let mut out = vec![Split::Test; labels.len()];
    for (label, name) in label_names.iter().enumerate() {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == label)
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        if n < 2 {
            return Err(IngestError::TooFewFlows {
                label: name.clone(),
                count: n,
            });
        }
        members.shuffle(&mut stream(seed, &[0x5e1, label as u64]));
        // The epsilon absorbs representation error in products like 0.9 * 20.
        let train = ((ratio * n as f64 - 1e-9).ceil() as usize).min(n - 1);
        for &i in &members[..train] {
            out[i] = Split::Train;
        }
    }
    Ok(out)
}

/// Partitions flows into `(train, test)`, preserving input order on each side.
pub fn stratified_split<T>(
    flows: Vec<T>,
    label_of: impl Fn(&T) -> u16,
    label_names: &[String],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), IngestError> {
    let labels: Vec<u16> = flows.iter().map(&label_of).collect();
    let assignment = stratified_assignment(&labels, label_names, ratio, seed)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (flow, side) in flows.into_iter().zip(assignment) {
        match side {
            Split::Train => train.push(flow),
            Split::Test => test.push(flow),
        }
    }
    Ok((train, test))
}
