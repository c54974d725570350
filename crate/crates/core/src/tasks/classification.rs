//! Synthetic N-way-K-shot classification over Gaussian clusters: a fixed
//! pool of class centers drawn from a scaled standard normal, with samples
//! drawn fresh as center plus isotropic noise. Support and query points are
//! always disjoint draws.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use omni_autodiff::Tensor;

use crate::data::{Episode, MiniBatch, Targets};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct ClassPool {
    pub dim: usize,
    pub sigma_w: f64,
    pub centers: Vec<Vec<f64>>,
}

pub fn gen_class_pool(
    rng: &mut ChaCha8Rng,
    n_classes: usize,
    dim: usize,
    sigma_c: f64,
    sigma_w: f64,
) -> ClassPool {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers = (0..n_classes)
        .map(|_| (0..dim).map(|_| sigma_c * unit.sample(rng)).collect())
        .collect();
    ClassPool {
        dim,
        sigma_w,
        centers,
    }
}

impl ClassPool {
    pub fn n_classes(&self) -> usize {
        self.centers.len()
    }

    fn draw_point(&self, rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        self.centers[class]
            .iter()
            .map(|&c| c + self.sigma_w * unit.sample(rng))
            .collect()
    }

    /// A flat mini-batch with global class labels, classes drawn uniformly.
    pub fn sample_minibatch(&self, rng: &mut ChaCha8Rng, batch_size: usize) -> MiniBatch {
        let mut data = Vec::with_capacity(batch_size * self.dim);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let c = rng.gen_range(0..self.centers.len());
            data.extend(self.draw_point(rng, c));
            labels.push(c);
        }
        MiniBatch {
            x: Tensor::constant(data, vec![batch_size, self.dim]).expect("consistent batch"),
            y: Targets::Classes(labels),
        }
    }

    /// An N-way-K-shot episode with `n_query` queries per class and local
    /// labels `0..n_way`. Support and query points are fresh, disjoint draws.
    pub fn sample_episode(
        &self,
        rng: &mut ChaCha8Rng,
        n_way: usize,
        k_shot: usize,
        n_query: usize,
    ) -> Result<Episode> {
        if n_way < 2 || n_way > self.centers.len() {
            return Err(CoreError::Data(format!(
                "cannot sample {n_way}-way episode from {} classes",
                self.centers.len()
            )));
        }
        if k_shot == 0 {
            return Err(CoreError::Data("episodes need at least one shot".into()));
        }
        let classes: Vec<usize> = index_sample(rng, self.centers.len(), n_way).into_vec();
        let mut sx = Vec::with_capacity(n_way * k_shot * self.dim);
        let mut sy = Vec::with_capacity(n_way * k_shot);
        let mut qx = Vec::with_capacity(n_way * n_query * self.dim);
        let mut qy = Vec::with_capacity(n_way * n_query);
        for (local, &class) in classes.iter().enumerate() {
            for _ in 0..k_shot {
                sx.extend(self.draw_point(rng, class));
                sy.push(local);
            }
            for _ in 0..n_query {
                qx.extend(self.draw_point(rng, class));
                qy.push(local);
            }
        }
        Ok(Episode {
            support_x: Tensor::constant(sx, vec![n_way * k_shot, self.dim])
                .expect("consistent episode"),
            support_y: Targets::Classes(sy),
            query_x: Tensor::constant(qx, vec![n_way * n_query, self.dim])
                .expect("consistent episode"),
            query_y: Targets::Classes(qy),
            n_way,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    #[test]
    fn episode_shape_matches_protocol() {
        let mut rng = stream(7, domain::POOL, 0);
        let pool = gen_class_pool(&mut rng, 64, 16, 3.0, 1.0);
        let ep = pool.sample_episode(&mut rng, 5, 5, 16).unwrap();
        assert_eq!(ep.support_x.shape(), &[25, 16]);
        assert_eq!(ep.query_x.shape(), &[80, 16]);
        assert_eq!(ep.n_way, 5);
    }

    #[test]
    fn zero_noise_collapses_classes_to_centers() {
        let mut rng = stream(7, domain::POOL, 1);
        let pool = gen_class_pool(&mut rng, 8, 4, 2.0, 0.0);
        let ep = pool.sample_episode(&mut rng, 3, 2, 2).unwrap();
        if let Targets::Classes(labels) = &ep.support_y {
            for i in 1..labels.len() {
                if labels[i] == labels[0] {
                    for d in 0..4 {
                        assert_eq!(ep.support_x.at(i, d), ep.support_x.at(0, d));
                    }
                }
            }
        }
    }

    #[test]
    fn minibatch_label_histogram_roughly_uniform() {
        let mut rng = stream(7, domain::POOL, 2);
        let pool = gen_class_pool(&mut rng, 4, 2, 3.0, 1.0);
        let mut counts = [0usize; 4];
        for _ in 0..200 {
            let b = pool.sample_minibatch(&mut rng, 16);
            if let Targets::Classes(ls) = &b.y {
                for &l in ls {
                    counts[l] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        for &c in &counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 0.25).abs() < 0.05, "histogram {counts:?}");
        }
    }

    #[test]
    fn bad_episode_shapes_rejected() {
        let mut rng = stream(7, domain::POOL, 3);
        let pool = gen_class_pool(&mut rng, 4, 2, 3.0, 1.0);
        assert!(pool.sample_episode(&mut rng, 1, 5, 5).is_err());
        assert!(pool.sample_episode(&mut rng, 5, 5, 5).is_err());
        assert!(pool.sample_episode(&mut rng, 3, 0, 5).is_err());
    }
}
