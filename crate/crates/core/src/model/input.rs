use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::merge::{Segment, TokenSequence};
use crate::numerics::Matrix;

const DUPLICATE_NOISE: f32 = 0.01;

/// Synthetic `system | image | instruction` input of width `dim`.
///
/// Text tokens and distinct image tokens are standard normal vectors. A
/// `redundancy` share of the image tokens are copies of a few prototypes
/// (about the square root of their number) with N(0, 0.01²) noise added,
/// scattered among the distinct ones.
pub fn build_input(
    n_system: usize,
    n_image: usize,
    n_instruction: usize,
    redundancy: f64,
    seed: u64,
    dim: usize,
) -> Result<TokenSequence> {
    let n = n_system + n_image + n_instruction;
    if n == 0 {
        return Err(Error::InvalidArgument("input needs at least one token".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding width must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&redundancy) {
        return Err(Error::InvalidArgument(format!("redundancy {redundancy} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..dim).map(|_| StandardNormal.sample(rng)).collect()
    };

    let n_dup = (redundancy * n_image as f64).round() as usize;
    let n_proto = if n_dup == 0 { 0 } else { (n_dup as f64).sqrt().ceil() as usize };
    let prototypes: Vec<Vec<f32>> = (0..n_proto).map(|_| gaussian(&mut rng)).collect();
    let noise = Normal::new(0.0f32, DUPLICATE_NOISE).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut is_dup: Vec<bool> = (0..n_image).map(|i| i < n_dup).collect();
    is_dup.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * dim);
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n_system {
        data.extend(gaussian(&mut rng));
        segments.push(Segment::SystemPrompt);
    }
    let mut next_proto = 0;
    for dup in is_dup {
        if dup {
            let p = &prototypes[next_proto % n_proto];
            next_proto += 1;
            data.extend(p.iter().map(|&x| x + noise.sample(&mut rng)));
        } else {
            data.extend(gaussian(&mut rng));
        }
        segments.push(Segment::Image);
    }
    for _ in 0..n_instruction {
        data.extend(gaussian(&mut rng));
        segments.push(Segment::Instruction);
    }
    TokenSequence::new(Matrix::new(n, dim, data)?, segments, (0..n).collect())
}
