//! Clustering performance benchmark on synthetic embedding maps.

use std::time::Instant;

use anyhow::{Context, Result};
use panolab_core::clustering::{classwise_cluster, BandwidthTable, MeanShiftConfig, SeedingMode};
use panolab_core::datagen::synthetic_embedding_map;
use panolab_core::{ClassDef, ClassKind, ClassTable, InstanceMap};

pub struct BenchRequest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub instances: usize,
    pub bandwidth: f64,
    pub seeding: SeedingMode,
    pub runs: usize,
    pub seed: u64,
}

pub struct BenchReport {
    pub request: BenchRequest,
    /// Wall-clock milliseconds per timed run, in execution order.
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    /// Peak resident set size from the OS, when available.
    pub peak_rss_bytes: Option<u64>,
    /// Instances found by clustering (identical across runs).
    pub discovered: usize,
}

impl BenchReport {
    /// The run-independent fields; this is what lands in the report file so
    /// repeated runs stay bit-identical. Timings go to stdout only.
    pub fn deterministic_key_values(&self) -> Vec<(String, String)> {
        let r = &self.request;
        vec![
            ("height".into(), r.height.to_string()),
            ("width".into(), r.width.to_string()),
            ("channels".into(), r.channels.to_string()),
            ("instances".into(), r.instances.to_string()),
            ("seeding".into(), seeding_name(r.seeding).into()),
            ("runs".into(), r.runs.to_string()),
            ("discovered".into(), self.discovered.to_string()),
        ]
    }
}

pub fn seeding_name(mode: SeedingMode) -> &'static str {
    match mode {
        SeedingMode::Bin => "bin",
        SeedingMode::Exhaustive => "exhaustive",
    }
}

fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Reads VmHWM from /proc/self/status, in bytes.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb * 1024);
        }
    }
    None
}

/// Builds the synthetic workload, clusters it `runs` times after one warm-up
/// run, and reports the median wall-clock time. The clustered result (and so
/// `discovered`) is deterministic; only timings vary.
pub fn run_benchmark(request: BenchRequest) -> Result<(BenchReport, InstanceMap)> {
    if request.runs < 1 {
        anyhow::bail!("benchmark needs at least one timed run");
    }
    let classes = ClassTable::new(vec![ClassDef {
        name: "object".into(),
        kind: ClassKind::Thing,
    }])?;
    let fixture = synthetic_embedding_map(
        request.height,
        request.width,
        request.channels,
        request.instances,
        0,
        request.bandwidth,
        request.seed,
    )
    .context("building the synthetic embedding map")?;
    let mut bandwidths = BandwidthTable::new();
    bandwidths.set("object", request.bandwidth)?;
    let cfg = MeanShiftConfig { seeding: request.seeding, ..MeanShiftConfig::default() };

    let cluster = || -> Result<InstanceMap> {
        Ok(classwise_cluster(&fixture.embedding, &fixture.semantic, &classes, &bandwidths, &cfg)?)
    };
    let reference = cluster()?; // warm-up, also the result we keep
    let mut times_ms = Vec::with_capacity(request.runs);
    for _ in 0..request.runs {
        let start = Instant::now();
        let result = cluster()?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
        if result != reference {
            anyhow::bail!("clustering result changed between benchmark runs");
        }
    }
    let discovered = reference.distinct_ids().len();
    let report = BenchReport {
        median_ms: median(&times_ms),
        times_ms,
        peak_rss_bytes: peak_rss_bytes(),
        discovered,
        request,
    };
    Ok((report, reference))
}

/// Returns the fixture embedding for `--dump-embedding`; kept separate from
/// the timed path so dumping cannot disturb measurements.
pub fn fixture_embedding(request: &BenchRequest) -> Result<panolab_core::EmbeddingMap> {
    Ok(synthetic_embedding_map(
        request.height,
        request.width,
        request.channels,
        request.instances,
        0,
        request.bandwidth,
        request.seed,
    )?
    .embedding)
}
