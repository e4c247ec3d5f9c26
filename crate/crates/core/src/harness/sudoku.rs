//! 4x4 sudoku: rows, columns and 2x2 boxes each hold 1..=4 once.
//!
//! Grids are 16 cells in row-major order; 0 marks an empty cell.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;

pub type Grid = [u8; 16];

const fn peers_of(cell: usize) -> [usize; 7] {
    let (r, c) = (cell / 4, cell % 4);
    let mut out = [0usize; 7];
    let mut n = 0;
    let mut i = 0;
    while i < 16 {
        let (ri, ci) = (i / 4, i % 4);
        let same_box = ri / 2 == r / 2 && ci / 2 == c / 2;
        if i != cell && (ri == r || ci == c || same_box) {
            out[n] = i;
            n += 1;
        }
        i += 1;
    }
    out
}

const PEERS: [[usize; 7]; 16] = {
    let mut p = [[0usize; 7]; 16];
    let mut i = 0;
    while i < 16 {
        p[i] = peers_of(i);
        i += 1;
    }
    p
};

fn allowed(grid: &Grid, cell: usize, digit: u8) -> bool {
    PEERS[cell].iter().all(|&p| grid[p] != digit)
}

/// Exhaustive backtracking; collects up to `limit` completions.
pub fn solve_all(puzzle: &Grid, limit: usize) -> Vec<Grid> {
    let mut grid = *puzzle;
    let mut out = Vec::new();
    if puzzle.iter().any(|&d| d > 4) {
        return out;
    }
    // clues must not already conflict
    for cell in 0..16 {
        if grid[cell] != 0 && !allowed(&grid, cell, grid[cell]) {
            return out;
        }
    }
    backtrack(&mut grid, 0, limit, &mut out);
    out
}

fn backtrack(grid: &mut Grid, from: usize, limit: usize, out: &mut Vec<Grid>) {
    if out.len() >= limit {
        return;
    }
    let Some(cell) = (from..16).find(|&i| grid[i] == 0) else {
        out.push(*grid);
        return;
    };
    for digit in 1..=4 {
        if allowed(grid, cell, digit) {
            grid[cell] = digit;
            backtrack(grid, cell + 1, limit, out);
            grid[cell] = 0;
        }
    }
}

pub fn count_solutions(puzzle: &Grid, limit: usize) -> usize {
    solve_all(puzzle, limit).len()
}

/// True when `grid` is a complete valid solution agreeing with every clue of
/// `puzzle`.
pub fn is_solution(puzzle: &Grid, grid: &Grid) -> bool {
    (0..16).all(|i| (1..=4).contains(&grid[i]) && (puzzle[i] == 0 || puzzle[i] == grid[i]))
        && (0..16).all(|i| allowed(grid, i, grid[i]))
}

/// All 288 complete grids.
pub fn all_grids() -> &'static [Grid] {
    static GRIDS: OnceLock<Vec<Grid>> = OnceLock::new();
    GRIDS.get_or_init(|| solve_all(&[0; 16], usize::MAX))
}

/// Random puzzle with a unique solution. Clues are removed in random order
/// while the solution stays unique, stopping at a random clue target in
/// `[4, 10]` or when no more can be removed.
pub fn generate_puzzle(rng: &mut impl Rng) -> (Grid, Grid) {
    let grids = all_grids();
    let solution = grids[rng.gen_range(0..grids.len())];
    let target = rng.gen_range(4..=10);
    let mut puzzle = solution;
    let mut cells: Vec<usize> = (0..16).collect();
    cells.shuffle(rng);
    let mut clues = 16;
    for cell in cells {
        if clues <= target {
            break;
        }
        let keep = puzzle[cell];
        puzzle[cell] = 0;
        if count_solutions(&puzzle, 2) == 1 {
            clues -= 1;
        } else {
            puzzle[cell] = keep;
        }
    }
    (puzzle, solution)
}
