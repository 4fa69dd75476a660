//! Lazy best-first enumeration of the `beam × V₁ × … × Vₙ` candidate grid.
//!
//! Each model's step result is sorted, so a cell's score never increases when
//! one of its rank indices is incremented. Starting from the top-left corner of
//! every beam item, the frontier pops cells in non-increasing score order,
//! checks them for agreement and pushes the unvisited neighbors obtained by
//! incrementing exactly one rank. Neighbors never cross beam items.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use crate::error::{Error, Result};
use crate::model::StepResult;
use crate::score::combined_score_unchecked;
pub use crate::score::{combined_score, ModelScore};

/// Default bound on heap pops per timestep.
pub const DEFAULT_POP_CAP: usize = 65_536;

/// One model's sorted extensions for one beam item, with the hypothesis length
/// each extension would have (unchanged for an epsilon slot).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSlot {
    pub step: StepResult,
    pub length: usize,
}

/// The search space for one timestep: `items[beam][model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub weights: Vec<f64>,
    pub items: Vec<Vec<GridSlot>>,
}

impl Grid {
    pub fn new(weights: Vec<f64>, items: Vec<Vec<GridSlot>>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|slots| slots.len() != weights.len()) {
            return Err(Error::usage(format!(
                "grid item has {} model slots but there are {} weights",
                bad.len(),
                weights.len()
            )));
        }
        Ok(Self { weights, items })
    }

    /// Combined score of cell `(beam, ranks)`.
    pub fn score(&self, beam: usize, ranks: &[usize]) -> f64 {
        let slots = &self.items[beam];
        combined_score_unchecked(
            &self.weights,
            slots.iter().zip(ranks).map(|(slot, &r)| ModelScore {
                cum_logprob: slot.step.entries[r].score,
                length: slot.length,
            }),
        )
    }

    fn live(&self, beam: usize) -> bool {
        self.items[beam].iter().all(|s| !s.step.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub beam: usize,
    /// Position in each model's sorted step result; rank 0 of a stalled model is EPSILON.
    pub ranks: Vec<usize>,
    pub score: f64,
}

impl Candidate {
    fn key(&self) -> (usize, Vec<usize>) {
        (self.beam, self.ranks.clone())
    }
}

// Max-heap order: higher score first, then lexicographically smaller (beam, ranks).
struct Ranked(Candidate);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .score
            .total_cmp(&other.0.score)
            .then_with(|| other.0.beam.cmp(&self.0.beam))
            .then_with(|| other.0.ranks.cmp(&self.0.ranks))
    }
}

/// Cells adjacent to `candidate`: one rank incremented, same beam item.
pub fn neighbors(grid: &Grid, candidate: &Candidate) -> Vec<Candidate> {
    let slots = &grid.items[candidate.beam];
    (0..candidate.ranks.len())
        .filter(|&m| candidate.ranks[m] + 1 < slots[m].step.len())
        .map(|m| {
            let mut ranks = candidate.ranks.clone();
            ranks[m] += 1;
            let score = grid.score(candidate.beam, &ranks);
            Candidate {
                beam: candidate.beam,
                ranks,
                score,
            }
        })
        .collect()
}

/// Why a call to [`Frontier::next_agreeing`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStop {
    /// The requested number of agreeing cells was found.
    Satisfied,
    /// No cell with a finite score is left.
    HeapEmpty,
    /// The pop budget for this timestep is spent.
    PopCapReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub found: Vec<Candidate>,
    pub stop: SearchStop,
}

impl SearchOutcome {
    /// The pop budget ran out before any agreeing cell was seen.
    pub fn is_exhausted(&self) -> bool {
        self.found.is_empty() && self.stop == SearchStop::PopCapReached
    }
}

/// Heap and visited set for one timestep.
#[derive(Default)]
pub struct Frontier {
    heap: BinaryHeap<Ranked>,
    visited: HashSet<(usize, Vec<usize>)>,
    pops: usize,
    pushes: usize,
    popped_scores: Vec<f64>,
}

impl Frontier {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, candidate: Candidate) {
        // Cells with zero probability under some weighted model can never be chosen.
        if candidate.score == f64::NEG_INFINITY {
            return;
        }
        if self.visited.insert(candidate.key()) {
            self.pushes += 1;
            self.heap.push(Ranked(candidate));
        }
    }

    /// Pushes the all-zero-rank corner of every beam item whose slots are all non-empty.
    pub fn seed(&mut self, grid: &Grid) -> Result<()> {
        if !self.heap.is_empty() || !self.visited.is_empty() {
            return Err(Error::usage("frontier already seeded"));
        }
        for beam in 0..grid.items.len() {
            if !grid.live(beam) {
                continue;
            }
            let ranks = vec![0; grid.weights.len()];
            let score = grid.score(beam, &ranks);
            self.push(Candidate { beam, ranks, score });
        }
        Ok(())
    }

    /// Pops the best remaining cell and pushes its unvisited neighbors.
    pub fn pop(&mut self, grid: &Grid) -> Option<Candidate> {
        let Ranked(best) = self.heap.pop()?;
        self.pops += 1;
        self.popped_scores.push(best.score);
        for n in neighbors(grid, &best) {
            self.push(n);
        }
        Some(best)
    }

    /// Pops until a cell satisfying `agrees` is found, the heap empties or
    /// `pop_cap` total pops have been made on this frontier.
    pub fn pop_agreeing(
        &mut self,
        grid: &Grid,
        pop_cap: usize,
        mut agrees: impl FnMut(&Candidate) -> bool,
    ) -> std::result::Result<Candidate, SearchStop> {
        loop {
            if self.pops >= pop_cap {
                return Err(SearchStop::PopCapReached);
            }
            let c = self.pop(grid).ok_or(SearchStop::HeapEmpty)?;
            if agrees(&c) {
                return Ok(c);
            }
        }
    }

    /// Collects up to `needed` agreeing cells in non-increasing score order.
    pub fn next_agreeing(
        &mut self,
        grid: &Grid,
        needed: usize,
        pop_cap: usize,
        mut agrees: impl FnMut(&Candidate) -> bool,
    ) -> SearchOutcome {
        let mut found = Vec::with_capacity(needed);
        while found.len() < needed {
            match self.pop_agreeing(grid, pop_cap, &mut agrees) {
                Ok(c) => found.push(c),
                Err(stop) => return SearchOutcome { found, stop },
            }
        }
        SearchOutcome {
            found,
            stop: SearchStop::Satisfied,
        }
    }

    pub fn pops(&self) -> usize {
        self.pops
    }

    pub fn pushes(&self) -> usize {
        self.pushes
    }

    pub fn visited_len(&self) -> usize {
        self.visited.len()
    }

    /// Scores of every popped cell, in pop order.
    pub fn popped_scores(&self) -> &[f64] {
        &self.popped_scores
    }
}

/// True when `scores` never increases.
pub fn is_non_increasing(scores: &[f64]) -> bool {
    scores.windows(2).all(|w| w[1] <= w[0])
}
