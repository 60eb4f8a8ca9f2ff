//! Synthetic decode workloads with planted attention concentration.
//!
//! For every (request, layer) a random unit direction `u` is drawn. A chosen
//! set of "planted" blocks gets keys `skew * sqrt(d) * u + noise`; all other
//! keys are isotropic Gaussian noise. With the `1/sqrt(d)` temperature a
//! query aligned with `u` scores planted tokens about `skew` nats above the
//! rest, so `skew` directly controls how concentrated attention is.
//!
//! Decode queries start at `u` and follow
//! `q[t+1] = normalize(rho * q[t] + sqrt(1 - rho^2) * noise)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::attention::HeadVector;
use crate::error::{PsaError, Result};
use crate::metadata::{blocks_from_sequence, KVBlock};
use crate::store::BlockHandle;

#[derive(Debug, Clone, PartialEq)]
pub enum ContextDist {
    Fixed(usize),
    /// Uniform over `[min, max]` tokens.
    Uniform { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantedDist {
    /// `ceil(fraction * n_blocks)` planted blocks.
    Fraction(f64),
    /// Planted block counts assigned round-robin by request index, so a list
    /// of two values splits the requests in half.
    Choices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub n_requests: usize,
    pub n_layers: u32,
    pub d: usize,
    pub block_size: usize,
    pub context: ContextDist,
    pub decode_steps: usize,
    /// Skew is drawn uniformly from `[skew_min, skew_max]` per (request, layer).
    pub skew_min: f64,
    pub skew_max: f64,
    pub planted: PlantedDist,
    pub rho: f64,
    /// Requests per second; `0` means every request arrives at time zero.
    pub arrival_rate: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_requests: 4,
            n_layers: 2,
            d: 64,
            block_size: 32,
            context: ContextDist::Fixed(2048),
            decode_steps: 4,
            skew_min: 4.0,
            skew_max: 8.0,
            planted: PlantedDist::Fraction(0.1),
            rho: 0.9,
            arrival_rate: 0.0,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PsaError::config(m.to_string()));
        if self.n_requests == 0 || self.n_layers == 0 || self.decode_steps == 0 {
            return bad("n_requests, n_layers and decode_steps must be positive");
        }
        if self.d == 0 || self.block_size == 0 {
            return bad("d and block_size must be positive");
        }
        match self.context {
            ContextDist::Fixed(0) => return bad("context length must be positive"),
            ContextDist::Uniform { min, max } if min == 0 || min > max => {
                return bad("context range must satisfy 0 < min <= max")
            }
            _ => {}
        }
        if !(self.skew_min.is_finite() && self.skew_max.is_finite())
            || self.skew_min < 0.0
            || self.skew_min > self.skew_max
        {
            return bad("skew range must satisfy 0 <= skew_min <= skew_max");
        }
        match &self.planted {
            PlantedDist::Fraction(f) if !(0.0..=1.0).contains(f) => {
                return bad("planted_fraction must be in [0, 1]")
            }
            PlantedDist::Choices(c) if c.is_empty() => return bad("planted_blocks list is empty"),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must be in [0, 1)");
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= 0.0) {
            return bad("arrival_rate must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Request {
    pub request_id: u64,
    pub arrival_ms: f64,
    pub context_len: usize,
    pub decode_steps: usize,
    /// Prefilled KV blocks, per layer.
    pub blocks: Vec<Vec<KVBlock>>,
    /// Decode queries, `queries[step][layer]`.
    pub queries: Vec<Vec<HeadVector>>,
    /// Planted block indices, per layer.
    pub planted: Vec<Vec<usize>>,
    pub skew: Vec<f64>,
}

impl Request {
    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn handles(&self, layer: usize) -> Vec<BlockHandle> {
        self.blocks[layer].iter().map(BlockHandle::from).collect()
    }

    pub fn blocks_per_layer(&self) -> usize {
        self.blocks.first().map_or(0, Vec::len)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn to_head(v: &[f64]) -> HeadVector {
    HeadVector::new(v.iter().map(|&x| x as f32).collect()).expect("finite generated vector")
}

pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d;
    let sqrt_d = (d as f64).sqrt();
    let interarrival = if spec.arrival_rate > 0.0 {
        Some(Exp::new(spec.arrival_rate).map_err(|e| PsaError::config(e.to_string()))?)
    } else {
        None
    };

    let mut next_block_id = 0u64;
    let mut clock_s = 0.0f64;
    let mut requests = Vec::with_capacity(spec.n_requests);
    for r in 0..spec.n_requests {
        let request_id = r as u64;
        if let Some(exp) = &interarrival {
            if r > 0 {
                clock_s += exp.sample(&mut rng);
            }
        }
        let context_len = match spec.context {
            ContextDist::Fixed(n) => n,
            ContextDist::Uniform { min, max } => rng.random_range(min..=max),
        };
        let n_blocks = context_len.div_ceil(spec.block_size);

        let mut blocks = Vec::new();
        let mut planted_all = Vec::new();
        let mut skews = Vec::new();
        let mut dirs = Vec::new();
        for layer in 0..spec.n_layers {
            let mut u = gaussian(&mut rng, d, 1.0);
            normalize(&mut u);
            let skew = if spec.skew_max > spec.skew_min {
                rng.random_range(spec.skew_min..=spec.skew_max)
            } else {
                spec.skew_min
            };
            let n_planted = match &spec.planted {
                PlantedDist::Fraction(f) => (f * n_blocks as f64).ceil() as usize,
                PlantedDist::Choices(c) => c[r % c.len()],
            }
            .min(n_blocks);
            let mut planted: Vec<usize> = sample(&mut rng, n_blocks, n_planted).into_vec();
            planted.sort_unstable();

            let mut keys = Vec::with_capacity(context_len * d);
            let mut values = Vec::with_capacity(context_len * d);
            for t in 0..context_len {
                let hot = planted.binary_search(&(t / spec.block_size)).is_ok();
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    let k = if hot { noise + skew * sqrt_d * u[j] } else { noise };
                    keys.push(k as f32);
                    values.push(rng.sample::<f64, _>(StandardNormal) as f32);
                }
            }
            let layer_blocks = blocks_from_sequence(
                next_block_id,
                request_id,
                layer,
                d,
                spec.block_size,
                &keys,
                &values,
            )?;
            next_block_id += layer_blocks.len() as u64;
            blocks.push(layer_blocks);
            planted_all.push(planted);
            skews.push(skew);
            dirs.push(u);
        }

        let noise_sd = (1.0 - spec.rho * spec.rho).sqrt() / sqrt_d;
        let mut current = dirs;
        let mut queries = Vec::with_capacity(spec.decode_steps);
        for step in 0..spec.decode_steps {
            if step > 0 {
                for q in current.iter_mut() {
                    let noise = gaussian(&mut rng, d, noise_sd);
                    q.iter_mut().zip(noise).for_each(|(x, n)| *x = spec.rho * *x + n);
                    normalize(q);
                }
            }
            queries.push(current.iter().map(|q| to_head(q)).collect());
        }

        requests.push(Request {
            request_id,
            arrival_ms: clock_s * 1000.0,
            context_len,
            decode_steps: spec.decode_steps,
            blocks,
            queries,
            planted: planted_all,
            skew: skews,
        });
    }
    Ok(requests)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorkloadSpec {
        WorkloadSpec {
            n_requests: 3,
            n_layers: 2,
            d: 16,
            block_size: 8,
            context: ContextDist::Uniform { min: 60, max: 100 },
            decode_steps: 3,
            arrival_rate: 5.0,
            seed: 42,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn same_seed_same_workload() {
        let a = generate_workload(&small()).unwrap();
        let b = generate_workload(&small()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.blocks, y.blocks);
            assert_eq!(x.queries, y.queries);
            assert_eq!(x.arrival_ms.to_bits(), y.arrival_ms.to_bits());
        }
        let c = generate_workload(&WorkloadSpec { seed: 43, ..small() }).unwrap();
        assert_ne!(a[0].blocks, c[0].blocks);
    }

    #[test]
    fn shapes_and_ids() {
        let reqs = generate_workload(&small()).unwrap();
        let mut ids = std::collections::BTreeSet::new();
        let mut last_arrival = -1.0;
        for r in &reqs {
            assert!(r.arrival_ms >= last_arrival);
            last_arrival = r.arrival_ms;
            assert_eq!(r.queries.len(), 3);
            for layer in 0..2 {
                assert_eq!(r.blocks[layer].len(), r.context_len.div_ceil(8));
                assert!(r.blocks[layer].iter().all(|b| b.layer_id == layer as u32));
                let tokens: usize = r.blocks[layer].iter().map(KVBlock::n_tokens).sum();
                assert_eq!(tokens, r.context_len);
                for b in &r.blocks[layer] {
                    assert!(ids.insert(b.block_id));
                }
            }
            for q in r.queries.iter().flatten() {
                let n: f64 = q.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            WorkloadSpec { rho: 1.0, ..small() },
            WorkloadSpec { skew_min: 3.0, skew_max: 1.0, ..small() },
            WorkloadSpec { planted: PlantedDist::Fraction(1.5), ..small() },
            WorkloadSpec { context: ContextDist::Uniform { min: 10, max: 5 }, ..small() },
            WorkloadSpec { arrival_rate: -1.0, ..small() },
            WorkloadSpec { n_requests: 0, ..small() },
        ] {
            assert!(generate_workload(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn rho_controls_query_similarity() {
        let sim = |rho: f64| {
            let reqs = generate_workload(&WorkloadSpec {
                rho,
                decode_steps: 20,
                ..small()
            })
            .unwrap();
            let mut total = 0.0;
            let mut n = 0;
            for r in &reqs {
                for w in r.queries.windows(2) {
                    total += w[0][0].iter().zip(w[1][0].iter()).map(|(a, b)| a * b).sum::<f32>();
                    n += 1;
                }
            }
            total / n as f32
        };
        assert!(sim(0.95) > 0.9);
        assert!(sim(0.0).abs() < 0.2);
    }
}
