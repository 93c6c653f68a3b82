//! Per-iteration wall-clock measurement isolating the whitening overhead.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::SeedableRng;
use thiserror::Error;

use crate::augment::{derived_seed, make_views, Image};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::losses::build_loss;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::{adam_step, lr_at, AdamState, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench needs at least 10 measured steps, got {0}")]
    TooFewSteps(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub const SEGMENTS: [&str; 5] = ["augment", "forward", "whitening", "backward", "optimizer"];

#[derive(Debug, Clone)]
pub struct SegmentStats {
    pub segment: String,
    pub median_ms: f64,
    pub p90_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub segments: Vec<SegmentStats>,
    pub total_median_ms: f64,
    pub total_p90_ms: f64,
    pub measured_steps: usize,
}

impl BenchReport {
    pub fn segment(&self, name: &str) -> Option<&SegmentStats> {
        self.segments.iter().find(|s| s.segment == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,median_ms,p90_ms\n");
        for s in &self.segments {
            out.push_str(&format!("{},{},{}\n", s.segment, s.median_ms, s.p90_ms));
        }
        out.push_str(&format!("total,{},{}\n", self.total_median_ms, self.total_p90_ms));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), BenchError> {
        let mut f = fs::File::create(path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(self.to_csv().as_bytes()).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn quantiles(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    let median = samples[n / 2];
    let p90 = samples[((n as f64 * 0.9) as usize).min(n - 1)];
    (median, p90)
}

/// Time full optimization steps on `dataset`, splitting each step into
/// {augment, forward, whitening, backward, optimizer}. Whitening time is
/// taken from the graph's per-node clock and subtracted from the forward
/// and backward segments. Warmup steps run but are excluded.
pub fn bench_step<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut Model<T>,
    dataset: &Dataset,
    warmup_steps: usize,
    measured_steps: usize,
) -> Result<BenchReport, BenchError> {
    if measured_steps < 10 {
        return Err(BenchError::TooFewSteps(measured_steps));
    }
    cfg.validate()?;
    let d = cfg.loss.d;
    let n = cfg.batch_origins.min(dataset.len());
    let mut state = AdamState::new(&model.params);
    let mut per_segment: HashMap<&str, Vec<f64>> = SEGMENTS.iter().map(|&s| (s, vec![])).collect();
    let mut totals = Vec::new();
    for step in 0..warmup_steps + measured_steps {
        let t_step = Instant::now();

        let t0 = Instant::now();
        let mut views: Vec<Image> = Vec::with_capacity(n * d);
        for i in 0..n {
            let idx = (step * n + i) % dataset.len();
            let mut rng = StdRng::seed_from_u64(derived_seed(cfg.seed, step, idx));
            views.extend(make_views(&dataset.images[idx], d, &mut rng));
        }
        let augment_ms = t0.elapsed().as_secs_f64() * 1e3;

        let mut g: Graph<T> = Graph::new();
        g.train_mode = true;
        let x = g.input("x");
        let h = model.encoder_forward(&mut g, x);
        let v = model.projector_forward(&mut g, h);
        let mut loss_rng = StdRng::seed_from_u64(derived_seed(cfg.seed, step, usize::MAX));
        let loss_id = build_loss(&mut g, v, n, &cfg.loss, &mut loss_rng).map_err(TrainError::from)?;
        g.set_output(loss_id);
        let mut bindings = HashMap::new();
        bindings.insert("x".to_string(), model.batch_input(&views).map_err(TrainError::from)?);

        let t1 = Instant::now();
        g.forward_eval(&bindings).map_err(TrainError::from)?;
        let forward_ms = t1.elapsed().as_secs_f64() * 1e3;
        let whiten_fwd_ns = g.whitening_ns();

        let t2 = Instant::now();
        let grads = g.backward().map_err(TrainError::from)?;
        let backward_ms = t2.elapsed().as_secs_f64() * 1e3;
        let whiten_total_ns = g.whitening_ns();
        let whiten_fwd_ms = whiten_fwd_ns as f64 / 1e6;
        let whiten_bwd_ms = (whiten_total_ns - whiten_fwd_ns) as f64 / 1e6;

        let t3 = Instant::now();
        let lr = lr_at(step, 0, cfg);
        adam_step(&mut model.params, &grads, &mut state, lr, cfg).map_err(|name| {
            TrainError::NonFiniteGrad { name, epoch: 0, iteration: step }
        })?;
        model.apply_bn_updates(&g);
        let optimizer_ms = t3.elapsed().as_secs_f64() * 1e3;

        if step < warmup_steps {
            continue;
        }
        per_segment.get_mut("augment").unwrap().push(augment_ms);
        per_segment.get_mut("forward").unwrap().push(forward_ms - whiten_fwd_ms);
        per_segment.get_mut("whitening").unwrap().push(whiten_fwd_ms + whiten_bwd_ms);
        per_segment.get_mut("backward").unwrap().push(backward_ms - whiten_bwd_ms);
        per_segment.get_mut("optimizer").unwrap().push(optimizer_ms);
        totals.push(t_step.elapsed().as_secs_f64() * 1e3);
    }
    let segments = SEGMENTS
        .iter()
        .map(|&name| {
            let (median_ms, p90_ms) = quantiles(per_segment.get_mut(name).unwrap());
            SegmentStats { segment: name.to_string(), median_ms, p90_ms }
        })
        .collect();
    let (total_median_ms, total_p90_ms) = quantiles(&mut totals);
    Ok(BenchReport { segments, total_median_ms, total_p90_ms, measured_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::losses::LossConfig;
    use crate::model::{EncoderConfig, ProjectorConfig};

    fn setup(d: usize, emb: usize) -> (TrainConfig, Model<f64>, Dataset) {
        let mut cfg = TrainConfig::new(1, LossConfig::wmse(d, emb));
        cfg.batch_origins = 32;
        let model = Model::init(EncoderConfig::mlp(64, 32), ProjectorConfig::new(emb), 0).unwrap();
        let ds = gen_synthetic(4, 16, 0).unwrap();
        (cfg, model, ds)
    }

    #[test]
    fn rejects_too_few_steps() {
        let (cfg, mut model, ds) = setup(2, 8);
        assert!(matches!(
            bench_step(&cfg, &mut model, &ds, 0, 5),
            Err(BenchError::TooFewSteps(5))
        ));
    }

    #[test]
    fn report_has_all_segments_and_csv_shape() {
        let (cfg, mut model, ds) = setup(2, 8);
        let report = bench_step(&cfg, &mut model, &ds, 2, 10).unwrap();
        for s in SEGMENTS {
            assert!(report.segment(s).is_some(), "missing segment {s}");
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("segment,median_ms,p90_ms\n"));
        assert_eq!(csv.lines().count(), 7, "5 segments + total + header");
    }

    #[test]
    fn segments_sum_close_to_total() {
        let (cfg, mut model, ds) = setup(2, 8);
        let report = bench_step(&cfg, &mut model, &ds, 2, 15).unwrap();
        let sum: f64 = report.segments.iter().map(|s| s.median_ms).sum();
        // Medians of parts vs median of totals aren't exactly additive, but
        // unaccounted overhead must stay small.
        assert!(
            (sum - report.total_median_ms).abs() <= 0.15 * report.total_median_ms.max(0.5),
            "segments {sum} vs total {}",
            report.total_median_ms
        );
    }

    #[test]
    fn whitening_grows_with_embedding_dim() {
        let mut medians = Vec::new();
        for emb in [8, 16, 32] {
            let (mut cfg, mut model, ds) = setup(2, emb);
            cfg.batch_origins = 64; // divisible by every sub_size = 2·emb here
            let report = bench_step(&cfg, &mut model, &ds, 1, 10).unwrap();
            medians.push(report.segment("whitening").unwrap().median_ms);
        }
        assert!(
            medians[0] < medians[2],
            "whitening should grow with k: {medians:?}"
        );
    }

    #[test]
    fn d4_vs_d2_cost_ratio_reasonable() {
        let (cfg2, mut m2, ds) = setup(2, 8);
        let r2 = bench_step(&cfg2, &mut m2, &ds, 1, 10).unwrap();
        let (mut cfg4, mut m4, _) = setup(4, 8);
        cfg4.batch_origins = 16; // equal K = N·d
        let r4 = bench_step(&cfg4, &mut m4, &ds, 1, 10).unwrap();
        let ratio = r4.total_median_ms / r2.total_median_ms;
        assert!(ratio > 0.5 && ratio < 2.0, "per-step ratio {ratio} out of plausible range");
    }
}
