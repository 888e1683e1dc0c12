//! Exact-match solve rates for the planning and reasoning benchmarks.

use super::{greedy_generate_chunked, SequenceModel};
use crate::tasks::{check_equations, parse_problem, EqVerdict, Record, Tokenizer, EOS, PAD};

/// Greedy generation after the (edge list, start, goal) prompt, scored by
/// exact match against the unique correct arm (including the terminating
/// EOS).
pub fn path_star_solve_rate(model: &dyn SequenceModel, heldout: &[Record]) -> f64 {
    let prompts: Vec<Vec<u32>> = heldout.iter().map(|r| r.prompt().to_vec()).collect();
    let max_new = heldout.iter().map(|r| r.completion().len()).max().unwrap_or(0);
    let outs = greedy_generate_chunked(model, &prompts, max_new, EOS, PAD, 256);
    let mut solved = 0usize;
    for (rec, out) in heldout.iter().zip(outs.iter()) {
        let generated = &out[rec.prompt_len as usize..];
        solved += (generated == rec.completion()) as usize;
    }
    solved as f64 / heldout.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct CountdownReport {
    /// Fraction of problems fully solved (all equations valid, operands
    /// legal, target reached).
    pub solve_rate: f64,
    /// Per-equation validity fractions (Eq1, Eq2, Eq3) over all problems;
    /// malformed counts as not valid.
    pub eq_validity: [f64; 3],
    pub n: usize,
}

/// Greedy decode, then arithmetic checking of the three equations against
/// the prompt's inputs and target. Malformed generations count as unsolved.
pub fn countdown_accuracy(
    model: &dyn SequenceModel,
    tokenizer: &Tokenizer,
    heldout: &[Record],
    max_new: usize,
) -> CountdownReport {
    let prompts: Vec<Vec<u32>> = heldout.iter().map(|r| r.prompt().to_vec()).collect();
    let outs = greedy_generate_chunked(model, &prompts, max_new, EOS, PAD, 256);
    let mut solved = 0usize;
    let mut valid = [0usize; 3];
    let mut n = 0usize;
    for (rec, out) in heldout.iter().zip(outs.iter()) {
        let Ok((inputs, target)) = parse_problem(tokenizer, rec.prompt()) else { continue };
        n += 1;
        let completion = &out[rec.prompt_len as usize..];
        let verdicts = check_equations(tokenizer, &inputs, target, completion);
        solved += verdicts.solved() as usize;
        for i in 0..3 {
            valid[i] += (verdicts.eqs[i] == EqVerdict::Valid) as usize;
        }
    }
    let denom = n.max(1) as f64;
    CountdownReport {
        solve_rate: solved as f64 / denom,
        eq_validity: [valid[0] as f64 / denom, valid[1] as f64 / denom, valid[2] as f64 / denom],
        n,
    }
}
