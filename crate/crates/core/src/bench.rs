//! Benchmark harness: per-prompt vanilla vs speculative runs, the β and γ
//! metrics, per-stage time fractions, and the CSV / JSON report formats.

use rayon::prelude::*;
use serde::Serialize;

use crate::decode::{generate, DecodeConfig, DecodeMode, Engine, StageTimers};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Counters and timings for one completed run.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    /// Tokens emitted.
    pub n: usize,
    /// Base-model decode steps.
    pub m: usize,
    /// Wall-clock seconds for the whole run.
    pub t_seconds: f64,
    pub frac_base: f64,
    pub frac_draft: f64,
    pub frac_transform: f64,
    pub frac_verify: f64,
    pub frac_other: f64,
}

impl RunMetrics {
    pub fn from_run(n: usize, m: usize, wall: f64, stages: StageTimers) -> Self {
        let t = wall.max(1e-12);
        let named = stages.base_forward + stages.draft_forward + stages.ctc_transform
            + stages.tree_verify;
        RunMetrics {
            n,
            m,
            t_seconds: wall,
            frac_base: stages.base_forward / t,
            frac_draft: stages.draft_forward / t,
            frac_transform: stages.ctc_transform / t,
            frac_verify: stages.tree_verify / t,
            frac_other: ((wall - named) / t).max(0.0),
        }
    }

    pub fn beta(&self) -> Result<f64> {
        compute_beta(self.n, self.m)
    }
}

/// Average accepted tokens per decoding step: N/M.
pub fn compute_beta(n: usize, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::UndefinedMetric("beta requires at least one step"));
    }
    Ok(n as f64 / m as f64)
}

/// Per-token wall-time speedup: (T_vanilla/N_vanilla) / (T_spec/N_spec).
pub fn compute_gamma(vanilla: &RunMetrics, spec: &RunMetrics) -> Result<f64> {
    if vanilla.n == 0 || spec.n == 0 {
        return Err(Error::UndefinedMetric("gamma requires emitted tokens"));
    }
    if vanilla.t_seconds <= 0.0 || spec.t_seconds <= 0.0 {
        return Err(Error::UndefinedMetric("gamma requires positive wall time"));
    }
    Ok((vanilla.t_seconds / vanilla.n as f64) / (spec.t_seconds / spec.n as f64))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub prompt_id: usize,
    /// "vanilla" or "spec".
    pub mode: String,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    pub beta: f64,
    pub truncated: bool,
    pub output_text: String,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub schema: u32,
    pub config: serde_json::Value,
    pub checkpoints: Vec<(String, String)>,
    pub rows: Vec<BenchRow>,
    /// ΣN/ΣM over non-truncated speculative rows.
    pub aggregate_beta: f64,
    /// Per-token time ratio over non-truncated pairs.
    pub aggregate_gamma: f64,
    pub truncated_prompts: usize,
    /// Greedy runs where speculative text differed from vanilla (must be 0).
    pub greedy_mismatches: usize,
    pub timings_comparable: bool,
}

/// Runs every prompt twice — vanilla autoregressive and speculative — under
/// identical budgets and seeds, then aggregates.
///
/// `parallel > 1` decodes prompts concurrently; counts stay exact but the
/// report flags timings as non-comparable.
pub fn run_benchmark<S: Scalar>(
    engine: &Engine<S>,
    prompts: &[String],
    decode: &DecodeConfig,
    config_echo: serde_json::Value,
    checkpoints: Vec<(String, String)>,
    parallel: usize,
) -> Result<BenchReport> {
    let vanilla_engine = Engine::new(engine.config.clone(), engine.params.clone(), false)?;

    let run_prompt = |(prompt_id, prompt): (usize, &String)| -> Result<Vec<BenchRow>> {
        let tokens = engine.vocab.encode(prompt);
        let mut cfg = decode.clone();
        cfg.seed = decode.seed.wrapping_add(prompt_id as u64);
        let mut rows = Vec::with_capacity(2);
        for (mode, eng) in [("vanilla", &vanilla_engine), ("spec", engine)] {
            let out = generate(eng, &tokens, cfg.clone())?;
            let metrics = RunMetrics::from_run(out.emitted, out.steps, out.wall_seconds, out.timers);
            let beta = if out.steps == 0 {
                1.0
            } else {
                metrics.beta()?
            };
            assert!(
                beta >= 1.0 - 1e-12,
                "beta invariant violated: {beta} on prompt {prompt_id} ({mode})"
            );
            rows.push(BenchRow {
                prompt_id,
                mode: mode.to_string(),
                metrics,
                beta,
                truncated: out.truncated_by_overflow,
                output_text: engine.vocab.decode(&out.tokens),
            });
        }
        Ok(rows)
    };

    let nested: Vec<Vec<BenchRow>> = if parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| {
            prompts
                .par_iter()
                .enumerate()
                .map(run_prompt)
                .collect::<Result<_>>()
        })?
    } else {
        prompts
            .iter()
            .enumerate()
            .map(run_prompt)
            .collect::<Result<_>>()?
    };
    let rows: Vec<BenchRow> = nested.into_iter().flatten().collect();

    fn clean<'r>(rows: &'r [BenchRow], mode: &'r str) -> impl Iterator<Item = &'r BenchRow> {
        rows.iter().filter(move |r| r.mode == mode && !r.truncated)
    }
    let clean = |mode| clean(&rows, mode);
    let spec_n: usize = clean("spec").map(|r| r.metrics.n).sum();
    let spec_m: usize = clean("spec").map(|r| r.metrics.m).sum();
    let spec_t: f64 = clean("spec").map(|r| r.metrics.t_seconds).sum();
    let van_n: usize = clean("vanilla").map(|r| r.metrics.n).sum();
    let van_t: f64 = clean("vanilla").map(|r| r.metrics.t_seconds).sum();
    let aggregate_beta = if spec_m > 0 {
        spec_n as f64 / spec_m as f64
    } else {
        f64::NAN
    };
    let aggregate_gamma = if spec_n > 0 && van_n > 0 && spec_t > 0.0 {
        (van_t / van_n as f64) / (spec_t / spec_n as f64)
    } else {
        f64::NAN
    };

    let greedy_mismatches = if decode.mode == DecodeMode::Greedy {
        prompts
            .iter()
            .enumerate()
            .filter(|(id, _)| {
                let van = rows.iter().find(|r| r.prompt_id == *id && r.mode == "vanilla");
                let spec = rows.iter().find(|r| r.prompt_id == *id && r.mode == "spec");
                match (van, spec) {
                    (Some(v), Some(s)) => v.output_text != s.output_text,
                    _ => true,
                }
            })
            .count()
    } else {
        0
    };

    let truncated_prompts = rows.iter().filter(|r| r.truncated).count();
    Ok(BenchReport {
        schema: 1,
        config: config_echo,
        checkpoints,
        rows,
        aggregate_beta,
        aggregate_gamma,
        truncated_prompts,
        greedy_mismatches,
        timings_comparable: parallel <= 1,
    })
}

/// Flat CSV, exact column order. Counts are exact; timing-derived columns
/// vary run to run.
pub fn report_to_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "prompt_id,mode,N,M,T_seconds,beta,frac_base,frac_draft,frac_transform,frac_verify,frac_other\n",
    );
    for row in &report.rows {
        let m = &row.metrics;
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.prompt_id,
            row.mode,
            m.n,
            m.m,
            m.t_seconds,
            row.beta,
            m.frac_base,
            m.frac_draft,
            m.frac_transform,
            m.frac_verify,
            m.frac_other
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn beta_arithmetic() {
        assert_eq!(compute_beta(355, 100).unwrap(), 3.55);
        assert_eq!(compute_beta(7, 7).unwrap(), 1.0);
        assert!(matches!(
            compute_beta(10, 0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    fn metrics(n: usize, m: usize, t: f64) -> RunMetrics {
        RunMetrics::from_run(n, m, t, StageTimers::default())
    }

    #[test]
    fn gamma_arithmetic() {
        // 10ms/token vanilla vs 4ms/token spec → 2.5×
        let v = metrics(100, 100, 1.0);
        let s = metrics(100, 30, 0.4);
        assert!((compute_gamma(&v, &s).unwrap() - 2.5).abs() < 1e-12);
        // identical runs → 1.0
        assert!((compute_gamma(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let zero = metrics(0, 1, 1.0);
        assert!(compute_gamma(&zero, &s).is_err());
    }

    #[test]
    fn stage_fractions_account_for_everything() {
        let stages = StageTimers {
            base_forward: 0.2,
            draft_forward: 0.1,
            ctc_transform: 0.05,
            tree_verify: 0.3,
        };
        let m = RunMetrics::from_run(10, 5, 1.0, stages);
        let sum = m.frac_base + m.frac_draft + m.frac_transform + m.frac_verify + m.frac_other;
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(m.frac_other > 0.3);
    }

    #[test]
    fn bench_greedy_runs_are_lossless_and_csv_has_exact_columns() {
        let config = ModelConfig {
            vocab_size: 259,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            slots: 3,
            m_max: 2,
        };
        let engine = Engine::<f32>::random(config, 9, true).unwrap();
        let prompts = vec!["hello".to_string(), "abc".to_string()];
        let decode = DecodeConfig {
            max_new_tokens: 12,
            ..DecodeConfig::default()
        };
        let report = run_benchmark(
            &engine,
            &prompts,
            &decode,
            serde_json::json!({}),
            vec![],
            1,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.greedy_mismatches, 0);
        for row in &report.rows {
            assert!(row.beta >= 1.0);
            let sum = row.metrics.frac_base
                + row.metrics.frac_draft
                + row.metrics.frac_transform
                + row.metrics.frac_verify
                + row.metrics.frac_other;
            assert!(sum <= 1.0 + 1e-9 && sum >= 0.9, "fraction sum {sum}");
        }
        let csv = report_to_csv(&report);
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "prompt_id,mode,N,M,T_seconds,beta,frac_base,frac_draft,frac_transform,frac_verify,frac_other"
        );
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn parallel_mode_marks_timings_non_comparable() {
        let config = ModelConfig {
            vocab_size: 259,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 64,
            slots: 3,
            m_max: 2,
        };
        let engine = Engine::<f32>::random(config, 10, true).unwrap();
        let prompts = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let decode = DecodeConfig {
            max_new_tokens: 6,
            ..DecodeConfig::default()
        };
        let report =
            run_benchmark(&engine, &prompts, &decode, serde_json::json!({}), vec![], 2).unwrap();
        assert!(!report.timings_comparable);
        assert_eq!(report.rows.len(), 6);
        // rows keep prompt order regardless of scheduling
        let ids: Vec<usize> = report.rows.iter().map(|r| r.prompt_id).collect();
        assert_eq!(ids, vec![0, 0, 1, 1, 2, 2]);
    }
}
