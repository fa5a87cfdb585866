//! Machine models: a single cache, a distributed-memory machine, and the
//! two-buffer accelerator layout.

/// Single processor with a fast memory of `cache_words` 32-bit words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SerialMachine {
    pub cache_words: u64,
}

impl SerialMachine {
    pub fn new(cache_words: u64) -> Self {
        Self { cache_words }
    }
}

/// Distributed-memory machine: P processors, each with its own local
/// memory of `mem_words_per_proc` words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParallelMachine {
    pub processors: u64,
    pub mem_words_per_proc: u64,
}

impl ParallelMachine {
    pub fn new(processors: u64, mem_words_per_proc: u64) -> Self {
        Self {
            processors,
            mem_words_per_proc,
        }
    }
}

/// Accelerator memory layout with a scratchpad (inputs and filters share
/// it) and an accumulator buffer that holds output partial sums at higher
/// precision.  When `double_buffered` is set only half of each buffer is
/// usable for the working tile; the other half streams the next one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwoBufferMachine {
    /// Total scratchpad capacity in scratchpad words.
    pub scratchpad_words: u64,
    /// Total accumulator capacity in output entries.
    pub accumulator_entries: u64,
    pub double_buffered: bool,
}

impl TwoBufferMachine {
    pub fn new(scratchpad_words: u64, accumulator_entries: u64, double_buffered: bool) -> Self {
        Self {
            scratchpad_words,
            accumulator_entries,
            double_buffered,
        }
    }

    /// The stock configuration: a 256KiB scratchpad of 8-bit words and a
    /// 64KiB accumulator of 32-bit entries, double-buffered, leaving 128K
    /// words and 8K entries usable.
    pub fn gemmini_default() -> Self {
        Self {
            scratchpad_words: 256 * 1024,
            accumulator_entries: 64 * 1024 / 4,
            double_buffered: true,
        }
    }

    pub fn usable_scratchpad_words(&self) -> u64 {
        if self.double_buffered {
            self.scratchpad_words / 2
        } else {
            self.scratchpad_words
        }
    }

    pub fn usable_accumulator_entries(&self) -> u64 {
        if self.double_buffered {
            self.accumulator_entries / 2
        } else {
            self.accumulator_entries
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemmini_default_halves_to_128k_and_8k() {
        let m = TwoBufferMachine::gemmini_default();
        assert_eq!(m.usable_scratchpad_words(), 128 * 1024);
        assert_eq!(m.usable_accumulator_entries(), 8 * 1024);
    }

    #[test]
    fn single_buffered_keeps_full_capacity() {
        let m = TwoBufferMachine::new(100, 10, false);
        assert_eq!(m.usable_scratchpad_words(), 100);
        assert_eq!(m.usable_accumulator_entries(), 10);
    }
}
