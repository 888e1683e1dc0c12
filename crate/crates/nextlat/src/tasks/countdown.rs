//! Countdown arithmetic: combine four input numbers with +, -, *, / to
//! reach a target in three equations. Problems are built by composing
//! three valid operations forward from sampled operands (so every instance
//! carries a solution that is valid by construction), and the out-of-
//! distribution split reserves a fraction of the *target values* rather
//! than instances. Eight pause tokens sit between the target and the
//! solution.

use super::{Record, TaskDataset, TaskKind, TaskMeta, Tokenizer, BOS, EOS, PAUSE};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashSet;

pub const PAUSE_COUNT: usize = 8;
const OPS: [char; 4] = ['+', '-', '*', '/'];

#[derive(Debug, Clone)]
pub struct CountdownParams {
    pub target_min: u32,
    pub target_max: u32,
    /// Input operands are sampled from 1..=input_max.
    pub input_max: u32,
    /// Largest representable number; every intermediate must stay within.
    pub value_max: u32,
    pub count: usize,
    /// Fraction of target values reserved for the held-out split.
    pub holdout_targets: f64,
}

impl Default for CountdownParams {
    fn default() -> Self {
        CountdownParams {
            target_min: 10,
            target_max: 100,
            input_max: 100,
            value_max: 1000,
            count: 1000,
            holdout_targets: 0.1,
        }
    }
}

pub fn countdown_tokenizer(value_max: u32) -> Tokenizer {
    let mut symbols: Vec<String> = (1..=value_max).map(|v| v.to_string()).collect();
    symbols.extend([",", "+", "-", "*", "/", "="].map(str::to_string));
    Tokenizer::new(symbols)
}

fn num_token(v: u32) -> u32 {
    super::RESERVED.len() as u32 + (v - 1)
}

struct Syms {
    comma: u32,
    plus: u32,
    minus: u32,
    times: u32,
    div: u32,
    eq: u32,
}

impl Syms {
    fn of(tok: &Tokenizer) -> Self {
        Syms {
            comma: tok.id(",").unwrap(),
            plus: tok.id("+").unwrap(),
            minus: tok.id("-").unwrap(),
            times: tok.id("*").unwrap(),
            div: tok.id("/").unwrap(),
            eq: tok.id("=").unwrap(),
        }
    }
    fn op_token(&self, op: char) -> u32 {
        match op {
            '+' => self.plus,
            '-' => self.minus,
            '*' => self.times,
            '/' => self.div,
            _ => unreachable!(),
        }
    }
}

/// The target values reserved for out-of-distribution evaluation, a pure
/// function of the seed (so the train and test generators agree).
pub fn holdout_target_set(seed: u64, params: &CountdownParams) -> HashSet<u32> {
    let mut targets: Vec<u32> = (params.target_min..=params.target_max).collect();
    let mut rng = rng::stream(seed, "countdown/holdout");
    targets.shuffle(&mut rng);
    let k = ((targets.len() as f64) * params.holdout_targets).round().max(1.0) as usize;
    targets.into_iter().take(k).collect()
}

fn apply(op: char, x: u32, y: u32, value_max: u32) -> Option<u32> {
    match op {
        '+' => x.checked_add(y).filter(|&r| r <= value_max),
        '-' => (x > y).then(|| x - y),
        '*' => x.checked_mul(y).filter(|&r| r <= value_max),
        '/' => (y != 0 && x % y == 0 && x / y >= 1).then(|| x / y),
        _ => None,
    }
}

pub fn gen_countdown(seed: u64, params: &CountdownParams, split: &str) -> Result<TaskDataset> {
    if params.target_min > params.target_max {
        return Err(Error::Infeasible("empty target range".into()));
    }
    let tokenizer = countdown_tokenizer(params.value_max);
    let syms = Syms::of(&tokenizer);
    let holdout = holdout_target_set(seed, params);
    let want_holdout = split != "train";
    let mut rng = rng::stream(seed, &format!("countdown/{split}"));
    let mut records = Vec::with_capacity(params.count);

    'outer: while records.len() < params.count {
        let inputs: Vec<u32> = (0..4).map(|_| rng.gen_range(1..=params.input_max)).collect();
        // Compose three operations forward; the final result is the target.
        let mut pool = inputs.clone();
        let mut eqs: Vec<(u32, char, u32, u32)> = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut found = false;
            for _try in 0..24 {
                let i = rng.gen_range(0..pool.len());
                let mut j = rng.gen_range(0..pool.len() - 1);
                if j >= i {
                    j += 1;
                }
                let (x, y) = (pool[i], pool[j]);
                let op = OPS[rng.gen_range(0..4)];
                if let Some(r) = apply(op, x, y, params.value_max) {
                    eqs.push((x, op, y, r));
                    let (hi, lo) = (i.max(j), i.min(j));
                    pool.swap_remove(hi);
                    pool.swap_remove(lo);
                    pool.push(r);
                    found = true;
                    break;
                }
            }
            if !found {
                continue 'outer;
            }
        }
        let target = pool[0];
        if target < params.target_min || target > params.target_max {
            continue;
        }
        if holdout.contains(&target) != want_holdout {
            continue;
        }

        let mut tokens = vec![BOS];
        for (i, &n) in inputs.iter().enumerate() {
            if i > 0 {
                tokens.push(syms.comma);
            }
            tokens.push(num_token(n));
        }
        tokens.push(syms.comma);
        tokens.push(num_token(target));
        tokens.extend(std::iter::repeat(PAUSE).take(PAUSE_COUNT));
        let prompt_len = tokens.len() as u32;
        for (i, &(x, op, y, r)) in eqs.iter().enumerate() {
            if i > 0 {
                tokens.push(syms.comma);
            }
            tokens.push(num_token(x));
            tokens.push(syms.op_token(op));
            tokens.push(num_token(y));
            tokens.push(syms.eq);
            tokens.push(num_token(r));
        }
        tokens.push(EOS);
        records.push(Record { tokens, prompt_len });
    }

    Ok(TaskDataset {
        kind: TaskKind::Countdown,
        seed,
        split: split.to_string(),
        tokenizer,
        meta: TaskMeta::Countdown {
            target_min: params.target_min,
            target_max: params.target_max,
            input_max: params.input_max,
            value_max: params.value_max,
            holdout_targets: {
                let mut v: Vec<u32> = holdout.into_iter().collect();
                v.sort_unstable();
                v
            },
        },
        records,
    })
}

/// Inputs and target of a problem, read back from its prompt tokens.
pub fn parse_problem(tokenizer: &Tokenizer, prompt: &[u32]) -> Result<(Vec<u32>, u32)> {
    let mut numbers = Vec::new();
    for &t in prompt {
        if t == BOS || t == PAUSE {
            continue;
        }
        match tokenizer.symbol(t) {
            Some(",") => continue,
            Some(s) => match s.parse::<u32>() {
                Ok(v) => numbers.push(v),
                Err(_) => return Err(Error::Dataset(format!("unexpected prompt symbol `{s}`"))),
            },
            None => return Err(Error::Dataset(format!("unknown token id {t}"))),
        }
    }
    if numbers.len() != 5 {
        return Err(Error::Dataset(format!(
            "countdown prompt should carry 4 inputs and a target, got {numbers:?}"
        )));
    }
    let target = numbers.pop().expect("nonempty");
    Ok((numbers, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqVerdict {
    /// LHS computes and equals RHS.
    Valid,
    /// LHS computes but differs from RHS.
    Invalid,
    /// Unparseable, division by zero, non-integer division, or missing.
    Malformed,
}

/// Per-equation verdicts for a generated solution.
#[derive(Debug, Clone)]
pub struct EquationVerdicts {
    pub eqs: [EqVerdict; 3],
    /// Final result token equals the stated target.
    pub reaches_target: bool,
    /// Every equation consumed numbers available in the pool (inputs plus
    /// earlier results, each used once).
    pub operands_legal: bool,
}

impl EquationVerdicts {
    pub fn solved(&self) -> bool {
        self.eqs.iter().all(|&e| e == EqVerdict::Valid) && self.reaches_target && self.operands_legal
    }
}

/// Recompute each of the three equations of a decoded completion and check
/// the arithmetic, the operand-usage rule, and the target. Malformed input
/// yields verdicts, never a panic.
pub fn check_equations(
    tokenizer: &Tokenizer,
    inputs: &[u32],
    target: u32,
    completion: &[u32],
) -> EquationVerdicts {
    let mut eqs = [EqVerdict::Malformed; 3];
    let mut reaches_target = false;
    let mut operands_legal = true;
    let mut pool: Vec<u32> = inputs.to_vec();

    // Split the completion on commas/EOS into equation token groups.
    let comma = tokenizer.id(",").expect("countdown tokenizer");
    let mut groups: Vec<Vec<u32>> = vec![Vec::new()];
    for &t in completion {
        if t == EOS {
            break;
        }
        if t == comma {
            groups.push(Vec::new());
        } else {
            groups.last_mut().expect("nonempty").push(t);
        }
    }

    let mut last_result = None;
    for (i, group) in groups.iter().take(3).enumerate() {
        let parsed = parse_equation(tokenizer, group);
        let Some((x, op, y, rhs)) = parsed else {
            eqs[i] = EqVerdict::Malformed;
            operands_legal = false;
            continue;
        };
        // Operand rule: x and y must both be available in the pool.
        let mut legal = true;
        for v in [x, y] {
            if let Some(pos) = pool.iter().position(|&p| p == v) {
                pool.swap_remove(pos);
            } else {
                legal = false;
            }
        }
        if !legal {
            operands_legal = false;
        }
        match apply(op, x, y, u32::MAX) {
            Some(r) => {
                eqs[i] = if r == rhs { EqVerdict::Valid } else { EqVerdict::Invalid };
                pool.push(rhs);
                last_result = Some(rhs);
            }
            None => {
                eqs[i] = EqVerdict::Malformed;
                pool.push(rhs);
                last_result = Some(rhs);
            }
        }
    }
    if groups.len() < 3 {
        operands_legal = false;
    }
    if let Some(r) = last_result {
        reaches_target = r == target && groups.len() >= 3;
    }
    EquationVerdicts { eqs, reaches_target, operands_legal }
}

fn parse_equation(tokenizer: &Tokenizer, group: &[u32]) -> Option<(u32, char, u32, u32)> {
    if group.len() != 5 {
        return None;
    }
    let num = |t: u32| tokenizer.symbol(t).and_then(|s| s.parse::<u32>().ok());
    let op = match tokenizer.symbol(group[1])? {
        "+" => '+',
        "-" => '-',
        "*" => '*',
        "/" => '/',
        _ => return None,
    };
    if tokenizer.symbol(group[3])? != "=" {
        return None;
    }
    Some((num(group[0])?, op, num(group[2])?, num(group[4])?))
}
