//! Synthetic MovieLens-format data with per-user genre affinities that a
//! user-agnostic model cannot capture.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{RawDataset, RawRecord, SourceFormat, MOVIELENS_FIELDS};

const GENRES: [&str; 8] = ["Action", "Comedy", "Drama", "Horror", "Romance", "Thriller", "Animation", "Sci-Fi"];
const AGES: [&str; 7] = ["1", "18", "25", "35", "45", "50", "56"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub movies: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Scale of per-user genre affinities.
    pub user_signal: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            movies: 60,
            min_len: 20,
            max_len: 60,
            user_signal: 1.5,
            seed: 7,
        }
    }
}

struct Movie {
    genre: usize,
    year: u32,
    quality: f64,
}

struct User {
    gender: &'static str,
    age: &'static str,
    occupation: u32,
    affinity: Vec<f64>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generated ratings, users and movies, in MovieLens-1M layout.
pub struct SynthData {
    pub ratings: Vec<(usize, usize, u8, i64)>,
    users: Vec<User>,
    movies: Vec<Movie>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.users == 0 || cfg.movies == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.max_len > cfg.movies {
        return Err(Error::Config(format!("inconsistent synthetic data config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let movies: Vec<Movie> = (0..cfg.movies)
        .map(|_| Movie {
            genre: rng.gen_range(0..GENRES.len()),
            year: rng.gen_range(1985..2001),
            quality: 0.8 * normal(&mut rng),
        })
        .collect();
    let users: Vec<User> = (0..cfg.users)
        .map(|_| User {
            gender: if rng.gen_bool(0.5) { "F" } else { "M" },
            age: AGES[rng.gen_range(0..AGES.len())],
            occupation: rng.gen_range(0..21),
            affinity: (0..GENRES.len()).map(|_| cfg.user_signal * normal(&mut rng)).collect(),
        })
        .collect();
    let len = Uniform::new_inclusive(cfg.min_len, cfg.max_len);
    let mut ratings = Vec::new();
    for (u, user) in users.iter().enumerate() {
        let n = len.sample(&mut rng);
        let mut t = 978_300_000 + rng.gen_range(0..1_000_000);
        for m in sample(&mut rng, cfg.movies, n) {
            let movie = &movies[m];
            let demo = if (user.gender == "F") == movie.genre.is_multiple_of(2) { 0.3 } else { -0.3 };
            let logit = movie.quality + user.affinity[movie.genre] + demo;
            let positive = rng.gen::<f64>() < 1.0 / (1.0 + (-logit).exp());
            let rating = if positive { rng.gen_range(3..=5) } else { rng.gen_range(1..=2) };
            t += rng.gen_range(1..5_000);
            ratings.push((u, m, rating, t));
        }
    }
    Ok(SynthData { ratings, users, movies })
}

impl SynthData {
    /// Writes `users.dat`, `movies.dat` and `ratings.dat` into `dir`.
    pub fn write_movielens(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut users = String::new();
        for (i, u) in self.users.iter().enumerate() {
            let _ = writeln!(users, "{}::{}::{}::{}::00000", i + 1, u.gender, u.age, u.occupation);
        }
        let mut movies = String::new();
        for (i, m) in self.movies.iter().enumerate() {
            let _ = writeln!(movies, "{}::Movie {} ({})::{}|Drama", i + 1, i + 1, m.year, GENRES[m.genre]);
        }
        let mut ratings = String::new();
        for &(u, m, r, t) in &self.ratings {
            let _ = writeln!(ratings, "{}::{}::{}::{}", u + 1, m + 1, r, t);
        }
        for (name, body) in [("users.dat", users), ("movies.dat", movies), ("ratings.dat", ratings)] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// The records `parse_movielens` would produce from the written files.
    pub fn to_raw(&self, threshold: f64) -> RawDataset {
        let records = self
            .ratings
            .iter()
            .map(|&(u, m, r, t)| {
                let (user, movie) = (&self.users[u], &self.movies[m]);
                RawRecord {
                    user: (u + 1).to_string(),
                    tokens: vec![
                        user.age.to_string(),
                        user.gender.to_string(),
                        user.occupation.to_string(),
                        (m + 1).to_string(),
                        GENRES[movie.genre].to_string(),
                        movie.year.to_string(),
                    ],
                    label: u8::from(f64::from(r) >= threshold),
                    timestamp: Some(t),
                }
            })
            .collect();
        RawDataset {
            format: SourceFormat::Movielens,
            field_names: MOVIELENS_FIELDS.iter().map(|s| s.to_string()).collect(),
            item_field: 3,
            records,
        }
    }
}
