//! Sinusoid few-shot regression: each task is `y = A sin(x + phi)` with the
//! amplitude in `[0.1, 5.0]`, the phase in `[0, 2pi]` and inputs sampled
//! uniformly from `[-5, 5]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use omni_autodiff::Tensor;

use crate::data::{Episode, MiniBatch, Targets};
use crate::error::{CoreError, Result};

pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const INPUT_RANGE: (f64, f64) = (-5.0, 5.0);
pub const BANK_TASKS: usize = 30_000;
pub const BANK_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SinusoidTask {
    pub fn sample(rng: &mut ChaCha8Rng) -> SinusoidTask {
        SinusoidTask {
            amplitude: rng.gen_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1),
            phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
        }
    }

    pub fn y(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    pub fn sample_x(rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(INPUT_RANGE.0..INPUT_RANGE.1)
    }
}

fn to_xy(points: &[(f64, f64)]) -> (Tensor, Targets) {
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let n = points.len();
    (
        Tensor::constant(xs, vec![n, 1]).expect("consistent point data"),
        Targets::Values(Tensor::constant(ys, vec![n, 1]).expect("consistent point data")),
    )
}

/// A fresh task with freshly sampled support and query inputs (used for held
/// out evaluation tasks).
pub fn sample_sinusoid_episode(rng: &mut ChaCha8Rng, k_support: usize, n_query: usize) -> Episode {
    let task = SinusoidTask::sample(rng);
    episode_from_task(rng, &task, k_support, n_query)
}

pub fn episode_from_task(
    rng: &mut ChaCha8Rng,
    task: &SinusoidTask,
    k_support: usize,
    n_query: usize,
) -> Episode {
    let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let x = SinusoidTask::sample_x(rng);
                (x, task.y(x))
            })
            .collect()
    };
    let (support_x, support_y) = to_xy(&draw(rng, k_support));
    let (query_x, query_y) = to_xy(&draw(rng, n_query));
    Episode {
        support_x,
        support_y,
        query_x,
        query_y,
        n_way: 0,
    }
}

/// The fixed training bank: tasks sampled once per seed, each carrying a
/// fixed set of labeled points.
pub struct SinusoidBank {
    pub tasks: Vec<SinusoidTask>,
    /// `points[i]` holds the labeled `(x, y)` pairs of task `i`.
    pub points: Vec<Vec<(f64, f64)>>,
}

impl SinusoidBank {
    pub fn generate(rng: &mut ChaCha8Rng, n_tasks: usize, n_points: usize) -> SinusoidBank {
        let mut tasks = Vec::with_capacity(n_tasks);
        let mut points = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let task = SinusoidTask::sample(rng);
            let pts: Vec<(f64, f64)> = (0..n_points)
                .map(|_| {
                    let x = SinusoidTask::sample_x(rng);
                    (x, task.y(x))
                })
                .collect();
            tasks.push(task);
            points.push(pts);
        }
        SinusoidBank { tasks, points }
    }

    pub fn points_per_task(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    /// A flat mini-batch of individual labeled points drawn across tasks.
    pub fn sample_minibatch(&self, rng: &mut ChaCha8Rng, batch_size: usize) -> MiniBatch {
        let mut pts = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let t = rng.gen_range(0..self.tasks.len());
            let p = rng.gen_range(0..self.points[t].len());
            pts.push(self.points[t][p]);
        }
        let (x, y) = to_xy(&pts);
        MiniBatch { x, y }
    }

    /// An episode from one bank task: disjoint support and query points drawn
    /// from the task's labeled set.
    pub fn sample_episode(&self, rng: &mut ChaCha8Rng, k_support: usize, n_query: usize) -> Episode {
        let t = rng.gen_range(0..self.tasks.len());
        let pts = &self.points[t];
        let take = (k_support + n_query).min(pts.len());
        let picked = index_sample(rng, pts.len(), take);
        let chosen: Vec<(f64, f64)> = picked.iter().map(|i| pts[i]).collect();
        let (s, q) = chosen.split_at(k_support.min(chosen.len()));
        let (support_x, support_y) = to_xy(s);
        let (query_x, query_y) = to_xy(q);
        Episode {
            support_x,
            support_y,
            query_x,
            query_y,
            n_way: 0,
        }
    }

    /// Binary cache: a little-endian u64 task count, then per task the
    /// amplitude, the phase, and `BANK_POINTS` (x, y) pairs as f64.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(self.tasks.len() as u64).to_le_bytes())?;
        for (task, pts) in self.tasks.iter().zip(&self.points) {
            w.write_all(&task.amplitude.to_le_bytes())?;
            w.write_all(&task.phase.to_le_bytes())?;
            for &(x, y) in pts {
                w.write_all(&x.to_le_bytes())?;
                w.write_all(&y.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_cache(path: &Path, n_points: usize) -> Result<SinusoidBank> {
        let mut r = BufReader::new(File::open(path)?);
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let n_tasks = u64::from_le_bytes(u64buf) as usize;
        let f64_at = |r: &mut BufReader<File>| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut tasks = Vec::with_capacity(n_tasks);
        let mut points = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let amplitude = f64_at(&mut r)?;
            let phase = f64_at(&mut r)?;
            let mut pts = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let x = f64_at(&mut r)?;
                let y = f64_at(&mut r)?;
                pts.push((x, y));
            }
            tasks.push(SinusoidTask { amplitude, phase });
            points.push(pts);
        }
        if tasks.is_empty() {
            return Err(CoreError::Data("empty sinusoid bank".into()));
        }
        Ok(SinusoidBank { tasks, points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    #[test]
    fn ground_truth_is_exact() {
        let t = SinusoidTask {
            amplitude: 1.0,
            phase: 0.0,
        };
        assert!((t.y(std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
        let t = SinusoidTask {
            amplitude: 5.0,
            phase: std::f64::consts::PI,
        };
        assert!(t.y(0.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_audit_stays_in_ranges() {
        let mut rng = stream(1, domain::BANK, 0);
        for _ in 0..10_000 {
            let t = SinusoidTask::sample(&mut rng);
            assert!(t.amplitude >= 0.1 && t.amplitude <= 5.0);
            assert!(t.phase >= 0.0 && t.phase <= 2.0 * std::f64::consts::PI);
            let x = SinusoidTask::sample_x(&mut rng);
            assert!((-5.0..=5.0).contains(&x));
        }
    }

    #[test]
    fn episode_labels_match_the_wave() {
        let mut rng = stream(2, domain::EPISODE, 0);
        let task = SinusoidTask::sample(&mut rng);
        let ep = episode_from_task(&mut rng, &task, 5, 7);
        assert_eq!(ep.support_x.shape(), &[5, 1]);
        assert_eq!(ep.query_x.shape(), &[7, 1]);
        if let Targets::Values(v) = &ep.query_y {
            for i in 0..7 {
                let x = ep.query_x.data()[i];
                assert!((v.data()[i] - task.y(x)).abs() < 1e-15);
            }
        } else {
            panic!("regression episode must carry values");
        }
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let mut rng = stream(3, domain::BANK, 0);
        let bank = SinusoidBank::generate(&mut rng, 17, 50);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        bank.write_cache(&path).unwrap();
        let loaded = SinusoidBank::read_cache(&path, 50).unwrap();
        assert_eq!(bank.tasks.len(), loaded.tasks.len());
        for (a, b) in bank.tasks.iter().zip(&loaded.tasks) {
            assert_eq!(a.amplitude.to_bits(), b.amplitude.to_bits());
            assert_eq!(a.phase.to_bits(), b.phase.to_bits());
        }
        for (pa, pb) in bank.points.iter().zip(&loaded.points) {
            for ((xa, ya), (xb, yb)) in pa.iter().zip(pb) {
                assert_eq!(xa.to_bits(), xb.to_bits());
                assert_eq!(ya.to_bits(), yb.to_bits());
            }
        }
    }

    #[test]
    fn bank_episode_support_query_disjoint_points() {
        let mut rng = stream(4, domain::EPISODE, 1);
        let bank = SinusoidBank::generate(&mut rng, 3, 50);
        let ep = bank.sample_episode(&mut rng, 10, 20);
        let sx: Vec<f64> = ep.support_x.data().to_vec();
        let qx: Vec<f64> = ep.query_x.data().to_vec();
        for x in &sx {
            assert!(!qx.contains(x));
        }
    }
}
