//! Scratch probe for pipeline calibration (not shipped; removed later).

use cdfcut_cli::pipeline::{run_experiment, PipelineConfig};
use cdfcut_core::eval::ReportStratum;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(42);
    let out = std::env::args()
        .nth(2)
        .unwrap_or_else(|| format!("/tmp/probe_{seed}"));
    let hidden: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(64);
    let batch: usize = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(64);
    let mut cfg = PipelineConfig {
        out_dir: out.into(),
        ..PipelineConfig::default()
    }
    .with_master_seed(seed);
    cfg.train.hidden_dim = hidden;
    cfg.train.batch_size = batch;

    let t0 = std::time::Instant::now();
    let art = run_experiment(&cfg).unwrap();
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    println!("score policy: {}", art.score_policy.descriptor());
    println!("cdf policy:   {}", art.cdf_policy.descriptor());

    // Learned tau by stratum.
    let (emb, taus) = cdfcut_core::eval::encode_queries(&art.model, &art.dataset).unwrap();
    let index = cdfcut_core::retrieval::ItemIndex::build(&art.model, &art.dataset).unwrap();
    for s in cdfcut_core::synth::Stratum::ALL {
        let idx = art.dataset.query_indices_of(s);
        let mean: f64 = idx.iter().map(|&q| taus[q]).sum::<f64>() / idx.len() as f64;
        let min = idx.iter().map(|&q| taus[q]).fold(f64::INFINITY, f64::min);
        let max = idx.iter().map(|&q| taus[q]).fold(0.0f64, f64::max);
        println!("tau[{s}]: mean {mean:.4} min {min:.4} max {max:.4}");
        // Learned positive-score distribution for this stratum.
        let mut pos_scores: Vec<f64> = Vec::new();
        let mut junk_scores: Vec<f64> = Vec::new();
        for &q in idx.iter().take(20) {
            let scores = index.embeddings().dot(&emb.row(q));
            let rel = art.dataset.relevant(q);
            for &it in rel {
                pos_scores.push(scores[it as usize]);
            }
            let mut all: Vec<f64> = scores.to_vec();
            all.sort_by(|a, b| b.total_cmp(a));
            junk_scores.push(all[rel.len().min(all.len() - 1)]);
        }
        pos_scores.sort_by(|a, b| a.total_cmp(b));
        let q = |f: f64| pos_scores[((pos_scores.len() - 1) as f64 * f) as usize];
        let junk_mean: f64 = junk_scores.iter().sum::<f64>() / junk_scores.len() as f64;
        println!(
            "  pos scores p10 {:.3} p50 {:.3} p90 {:.3} | junk boundary mean {junk_mean:.3}",
            q(0.1),
            q(0.5),
            q(0.9)
        );
    }

    for (name, report) in &art.reports {
        println!("--- {name}");
        for s in ReportStratum::ALL_ROWS {
            let m = report.stratum(s);
            println!(
                "  {:<6} P {:.4} R {:.4} count {:.1} empty {}",
                s.name(),
                m.precision_at_k,
                m.recall_at_k,
                m.mean_retrieved,
                m.empty_retrievals
            );
        }
    }
    println!("--- sweep (p: {:?})", art.sweep.p_values);
    for (s, row) in &art.sweep.rows {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:9.1}")).collect();
        println!("  {:<6} {}", s.name(), cells.join(" "));
    }
    println!("--- histogram p={}", art.histogram.p);
    for row in &art.histogram.rows {
        println!("  {:<6} mean {:.1}", row.stratum.name(), row.mean_retrieved);
    }
}
