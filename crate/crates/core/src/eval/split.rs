use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::QuarterTag;

/// Reference calendar: 48 training, 4 validation and 6 test quarters.
pub const REFERENCE_QUARTERS: usize = 58;
pub const REFERENCE_VAL: usize = 4;
pub const REFERENCE_TEST: usize = 6;

/// Disjoint, ordered quarter-index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn new(train: Range<usize>, val: Range<usize>, test: Range<usize>) -> Result<Self> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "split has an empty range: {self:?}"
            )));
        }
        if self.train.end > self.val.start || self.val.end > self.test.start {
            return Err(Error::InvalidArgument(format!(
                "split ranges overlap or are out of order: {self:?}"
            )));
        }
        Ok(())
    }

    /// Scales the reference 48/4/6 split to `t` quarters: test and validation get
    /// `max(1, round(6t/58))` and `max(1, round(4t/58))`, training the rest.
    pub fn proportional(t: usize) -> Result<Self> {
        let scaled = |k: usize| {
            ((k * t) as f64 / REFERENCE_QUARTERS as f64)
                .round()
                .max(1.0) as usize
        };
        let (test, val) = (scaled(REFERENCE_TEST), scaled(REFERENCE_VAL));
        if t < test + val + 1 {
            return Err(Error::InvalidArgument(format!(
                "{t} quarters are too few for a train/val/test split"
            )));
        }
        let train_end = t - test - val;
        Self::new(0..train_end, train_end..train_end + val, train_end + val..t)
    }

    /// Split by calendar: training through `train_end`, validation through `val_end`,
    /// test through `test_end` (inclusive tags).
    pub fn from_calendar(
        quarters: &[QuarterTag],
        train_end: QuarterTag,
        val_end: QuarterTag,
        test_end: QuarterTag,
    ) -> Result<Self> {
        let upto = |q: QuarterTag| quarters.iter().take_while(|&&x| x <= q).count();
        Self::new(
            0..upto(train_end),
            upto(train_end)..upto(val_end),
            upto(val_end)..upto(test_end),
        )
    }

    pub fn len(&self) -> usize {
        self.test.end
    }

    pub fn is_empty(&self) -> bool {
        self.test.end == 0
    }
}
