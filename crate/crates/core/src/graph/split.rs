use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Random 80/10/10 partition of `0..len`; rounding remainders go to train.
pub fn split(len: usize, seed: u64) -> Result<Split> {
    if len == 0 {
        return Err(Error::contract("cannot split an empty dataset"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = len / 10;
    let n_test = len / 10;
    let test = idx.split_off(len - n_test);
    let validation = idx.split_off(len - n_test - n_val);
    Ok(Split {
        train: idx,
        validation,
        test,
        seed,
    })
}

/// Shuffled mini-batches over `part`. The trailing partial batch is kept,
/// except that a lone leftover graph joins the previous batch: every batch
/// needs at least two samples for its Gram matrices.
pub fn batches(part: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::contract(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut idx = part.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let lone = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(lone);
    }
    Ok(out)
}
