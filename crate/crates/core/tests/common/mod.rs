#![allow(dead_code)]

use frgcf::dataset::{partition_by_feedback, split_train_test, InteractionDataset, Interaction, PartitionRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ratings drawn so that each user likes a contiguous block of items,
/// which gives training something to learn.
pub fn synthetic_interactions(users: usize, items: usize, per_user: usize, seed: u64) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for u in 0..users {
        let taste = (u * items) / users;
        for _ in 0..per_user {
            let i = rng.random_range(0..items);
            let dist = (i as i64 - taste as i64).unsigned_abs() as usize;
            let liked = dist < items / 4;
            let rating = if liked == rng.random_bool(0.85) { rng.random_range(4..=5) } else { rng.random_range(1..=3) };
            out.push(Interaction { user: format!("u{u}"), item: format!("i{i}"), feedback: rating as f64, timestamp: None });
        }
    }
    out
}

pub fn synthetic_dataset(users: usize, items: usize, per_user: usize, seed: u64) -> InteractionDataset {
    let parts = partition_by_feedback(&synthetic_interactions(users, items, per_user, seed), &PartitionRule::rating(4.0));
    split_train_test(&parts, 0.8, seed).unwrap()
}
