//! Forward + backward time and peak tensor memory of a single GAM or
//! transformer block as the sequence length grows.

use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Once;
use std::time::Instant;

use gamlab_core::gam::{gam_block_forward, GamBlockParams, GamVariant};
use gamlab_core::kernels;
use gamlab_core::transformer::{transformer_block_forward, TransformerBlockParams};
use gamlab_core::{rng_from_seed, Arch, Graph, MemoryScope, Mode, OutOfMemory, ParamStore, Tensor};

/// Sequence lengths of the reference sweep.
pub const DEFAULT_SEQ_LENS: [usize; 6] = [256, 512, 1024, 2048, 4096, 8192];

pub const CSV_HEADER: &str = "arch,seq_len,time_ms_mean,time_ms_median,peak_mem_mb,status";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub d_model: usize,
    pub num_slots: usize,
    pub kernel_size: usize,
    pub n_head: usize,
    pub dropout: f64,
    pub warmup: usize,
    pub iters: usize,
    /// Cap on tracked tensor bytes per measurement; exceeding it records
    /// the point as skipped.
    pub mem_limit: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 16,
            d_model: 512,
            num_slots: 512,
            kernel_size: 3,
            n_head: 8,
            dropout: 0.1,
            warmup: 3,
            iters: 10,
            mem_limit: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    SkippedOom,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::SkippedOom => "skipped_oom",
        }
    }
}

/// Extracts one measured quantity from a record.
pub type Metric = fn(&BenchRecord) -> Option<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub arch: Arch,
    pub seq_len: usize,
    pub time_ms_mean: Option<f64>,
    pub time_ms_median: Option<f64>,
    pub peak_mem_mb: Option<f64>,
    pub status: Status,
}

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.arch,
            self.seq_len,
            f(self.time_ms_mean),
            f(self.time_ms_median),
            f(self.peak_mem_mb),
            self.status.name()
        )
    }
}

/// Silences the default panic message for capped-allocation unwinds only.
fn quiet_oom_panics() {
    static HOOK: Once = Once::new();
    HOOK.call_once(|| {
        let previous = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            if !info.payload().is::<OutOfMemory>() {
                previous(info);
            }
        }));
    });
}

enum BlockParams {
    Gam(GamBlockParams),
    Transformer(TransformerBlockParams),
}

/// Times `warmup + iters` forward + backward passes of one block on random
/// input with a sum-of-outputs loss, and records the peak of tracked tensor
/// bytes (parameters, input, activations and gradients).
pub fn measure_block(arch: Arch, cfg: &BenchConfig, seq_len: usize) -> BenchRecord {
    assert!(seq_len >= 1, "seq_len must be positive");
    quiet_oom_panics();
    let scope = match cfg.mem_limit {
        Some(limit) => MemoryScope::with_limit(limit),
        None => MemoryScope::new(),
    };
    let run = || -> Vec<f64> {
        let mut rng = rng_from_seed(cfg.seed);
        let mut store = ParamStore::<f32>::new();
        let block = match arch {
            Arch::Gam => BlockParams::Gam(GamBlockParams::init(
                &mut store,
                "block",
                cfg.d_model,
                cfg.num_slots,
                cfg.kernel_size,
                GamVariant::Full,
                &mut rng,
            )),
            Arch::Transformer => BlockParams::Transformer(
                TransformerBlockParams::init(
                    &mut store,
                    "block",
                    cfg.d_model,
                    cfg.n_head,
                    &mut rng,
                )
                .expect("valid head count"),
            ),
        };
        let x = Tensor::<f32>::randn(&[cfg.batch, seq_len, cfg.d_model], 0.0, 1.0, &mut rng);
        let mut times = Vec::with_capacity(cfg.iters);
        for i in 0..cfg.warmup + cfg.iters {
            let start = Instant::now();
            let mut g = Graph::new(Mode::Train { seed: i as u64 });
            g.bind(&store, true);
            let xv = g.constant(&x);
            let y = match &block {
                BlockParams::Gam(p) => gam_block_forward(&mut g, p, xv, cfg.dropout),
                BlockParams::Transformer(p) => {
                    transformer_block_forward(&mut g, p, xv, cfg.dropout)
                }
            }
            .expect("shapes agree");
            let loss = g.sum(y);
            let grads = g.backward(loss).expect("scalar loss");
            drop(grads);
            drop(g);
            if i >= cfg.warmup {
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        times
    };
    let outcome = panic::catch_unwind(AssertUnwindSafe(run));
    let peak = scope.peak_bytes();
    drop(scope);
    match outcome {
        Ok(mut times) => {
            let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
            times.sort_by(f64::total_cmp);
            BenchRecord {
                arch,
                seq_len,
                time_ms_mean: Some(mean),
                time_ms_median: Some(median(&times)),
                peak_mem_mb: Some(peak as f64 / (1024.0 * 1024.0)),
                status: Status::Ok,
            }
        }
        Err(payload) if payload.is::<OutOfMemory>() => BenchRecord {
            arch,
            seq_len,
            time_ms_mean: None,
            time_ms_median: None,
            peak_mem_mb: None,
            status: Status::SkippedOom,
        },
        Err(payload) => panic::resume_unwind(payload),
    }
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Measures every `(arch, seq_len)` pair. Once an architecture runs out of
/// memory, its longer lengths are recorded as skipped without running.
pub fn run_sweep(
    archs: &[Arch],
    seq_lens: &[usize],
    cfg: &BenchConfig,
    mut progress: impl FnMut(&BenchRecord),
) -> Vec<BenchRecord> {
    let mut lens = seq_lens.to_vec();
    lens.sort_unstable();
    let mut out = Vec::new();
    for &arch in archs {
        let mut exhausted = false;
        for &n in &lens {
            let rec = if exhausted {
                BenchRecord {
                    arch,
                    seq_len: n,
                    time_ms_mean: None,
                    time_ms_median: None,
                    peak_mem_mb: None,
                    status: Status::SkippedOom,
                }
            } else {
                measure_block(arch, cfg, n)
            };
            exhausted |= rec.status == Status::SkippedOom;
            progress(&rec);
            out.push(rec);
        }
    }
    out
}

/// CSV with a leading `#` metadata comment naming the configuration and
/// kernel thread count.
pub fn to_csv(records: &[BenchRecord], cfg: &BenchConfig) -> String {
    let mut s = format!(
        "# batch={} d_model={} num_slots={} kernel_size={} n_head={} dropout={} warmup={} iters={} threads={} mem_limit_mb={}\n",
        cfg.batch,
        cfg.d_model,
        cfg.num_slots,
        cfg.kernel_size,
        cfg.n_head,
        cfg.dropout,
        cfg.warmup,
        cfg.iters,
        kernels::num_threads(),
        cfg.mem_limit.map(|b| (b >> 20).to_string()).unwrap_or_else(|| "none".into()),
    );
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// `(N, value)` points of one architecture, skipped rows excluded.
pub fn series(records: &[BenchRecord], arch: Arch, metric: Metric) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.arch == arch)
        .filter_map(|r| metric(r).map(|v| (r.seq_len as f64, v)))
        .collect()
}

/// Log-log plot: time on the left panel, peak memory on the right.
pub fn to_svg(records: &[BenchRecord]) -> String {
    const W: f64 = 420.0;
    const H: f64 = 320.0;
    const PAD: f64 = 56.0;
    let panels: [(&str, Metric); 2] = [
        ("time per step (ms)", |r| r.time_ms_median),
        ("peak memory (MiB)", |r| r.peak_mem_mb),
    ];
    let colors = [(Arch::Gam, "#1f77b4"), (Arch::Transformer, "#d62728")];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        2.0 * W,
        H
    );
    for (pi, (title, metric)) in panels.iter().enumerate() {
        let ox = pi as f64 * W;
        let pts: Vec<(f64, f64)> = colors
            .iter()
            .flat_map(|&(a, _)| series(records, a, *metric))
            .filter(|&(x, y)| x > 0.0 && y > 0.0)
            .collect();
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"16\" text-anchor=\"middle\">{title}</text>",
            ox + W / 2.0
        );
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
            ox + PAD,
            W - 1.5 * PAD,
            H - 2.0 * PAD
        );
        if pts.is_empty() {
            continue;
        }
        let (lx0, lx1) = log_range(pts.iter().map(|p| p.0));
        let (ly0, ly1) = log_range(pts.iter().map(|p| p.1));
        let px = |x: f64| ox + PAD + (x.log10() - lx0) / (lx1 - lx0) * (W - 1.5 * PAD);
        let py = |y: f64| H - PAD - (y.log10() - ly0) / (ly1 - ly0) * (H - 2.0 * PAD);
        let mut xs: Vec<f64> = records.iter().map(|r| r.seq_len as f64).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for x in xs {
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x}</text>",
                px(x),
                H - PAD + 14.0
            );
        }
        for v in [10f64.powf(ly0), 10f64.powf(ly1)] {
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
                ox + PAD - 4.0,
                py(v) + 4.0,
                v
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">sequence length</text>",
            ox + PAD + (W - 1.5 * PAD) / 2.0,
            H - PAD + 32.0
        );
        for (arch, color) in colors {
            let line = series(records, arch, *metric);
            if line.is_empty() {
                continue;
            }
            let path: Vec<String> = line
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                path.join(" ")
            );
            for &(x, y) in &line {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                    px(x),
                    py(y)
                );
            }
            let ly = PAD + 14.0 + 14.0 * (arch == Arch::Transformer) as u8 as f64;
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{arch}</text>",
                ox + PAD + 8.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn log_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v.log10());
        hi = hi.max(v.log10());
    }
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Writes `scaling.csv` and `scaling.svg` into `dir`.
pub fn write_sweep(
    dir: &Path,
    records: &[BenchRecord],
    cfg: &BenchConfig,
) -> std::io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("scaling.csv");
    let svg = dir.join("scaling.svg");
    std::fs::write(&csv, to_csv(records, cfg))?;
    std::fs::write(&svg, to_svg(records))?;
    Ok((csv, svg))
}

/// Coefficient of determination of the least-squares line through `pts`.
pub fn affine_r2(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// `(N, value(2N) / value(N))` for consecutive doublings present in the
/// records of `arch`.
pub fn doubling_ratios(records: &[BenchRecord], arch: Arch, metric: Metric) -> Vec<(usize, f64)> {
    let pts = series(records, arch, metric);
    let mut out = Vec::new();
    for &(n, v) in &pts {
        if let Some(&(_, v2)) = pts.iter().find(|p| p.0 == 2.0 * n) {
            out.push((n as usize, v2 / v));
        }
    }
    out
}
