use serde::Serialize;

use super::SplitName;

/// Expected per-split record counts for one CrisisMMD task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Table1Row {
    pub task_id: u8,
    pub task: &'static str,
    pub train: u64,
    pub validation: u64,
    pub test: u64,
}

impl Table1Row {
    pub fn total(&self) -> u64 {
        self.train + self.validation + self.test
    }

    pub fn expected(&self, split: SplitName) -> u64 {
        match split {
            SplitName::Train => self.train,
            SplitName::Validation => self.validation,
            SplitName::Test => self.test,
        }
    }

    pub fn for_task(task_id: u8) -> Option<&'static Table1Row> {
        TABLE1.iter().find(|r| r.task_id == task_id)
    }
}

/// CrisisMMD split sizes after keeping only identically labeled image-text pairs.
pub const TABLE1: [Table1Row; 3] = [
    Table1Row {
        task_id: 1,
        task: "Informativeness",
        train: 9599,
        validation: 1573,
        test: 1534,
    },
    Table1Row {
        task_id: 2,
        task: "Humanitarian",
        train: 2874,
        validation: 477,
        test: 451,
    },
    Table1Row {
        task_id: 3,
        task: "Damage Severity",
        train: 2468,
        validation: 529,
        test: 529,
    },
];

/// Identity and size of one split, from a loaded split or a file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitSummary {
    pub task_id: u8,
    pub split_name: SplitName,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountDelta {
    pub split: SplitName,
    pub task_id: u8,
    pub expected: u64,
    pub actual: u64,
    /// `actual − expected`.
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountReport {
    pub task_id: u8,
    pub entries: Vec<CountDelta>,
    /// Present only when all three splits were supplied.
    pub total: Option<(u64, u64)>,
    pub pass: bool,
}

/// Compares split sizes against a [`Table1Row`]. Never fails: mismatches,
/// including a wrong task id, show up as `pass == false` with deltas.
pub fn validate_counts(splits: &[SplitSummary], expected: &Table1Row) -> CountReport {
    let entries: Vec<CountDelta> = splits
        .iter()
        .map(|s| {
            let want = expected.expected(s.split_name);
            CountDelta {
                split: s.split_name,
                task_id: s.task_id,
                expected: want,
                actual: s.n,
                delta: s.n as i64 - want as i64,
            }
        })
        .collect();
    let complete = SplitName::ALL
        .iter()
        .all(|name| splits.iter().filter(|s| s.split_name == *name).count() == 1)
        && splits.len() == 3;
    let total = complete.then(|| (expected.total(), splits.iter().map(|s| s.n).sum()));
    let pass = entries.iter().all(|e| e.delta == 0 && e.task_id == expected.task_id)
        && total.is_none_or(|(want, got)| want == got);
    CountReport {
        task_id: expected.task_id,
        entries,
        total,
        pass,
    }
}
