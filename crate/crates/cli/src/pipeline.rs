//! Stage execution, persisted artefacts and the bundle manifest.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use percolab::clusters::{chemical_distance_check, extend_cluster, largest_cluster, volume_growth_check, VolumeSpec};
use percolab::isoperimetry::{isop_audit, Family};
use percolab::lattice::{connected_components, LatticeBox, Point, Subgraph};
use percolab::perforate::{self, Perforation, TieBreak};
use percolab::regularity::{very_good_scan, BallParams, CertifyOptions, ScanOptions};
use percolab::renorm::{classify, BadnessField, ScaleLadder};
use percolab::samplers::{sample, Snapshot};
use percolab::walk::{envelope_check, green, harnack_ratio, kernel_steps, qip_stats, Distance};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, IsopStage, SampleStage, STAGES};

pub const CSV_SCHEMA: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG_COPY: &str = "config.toml";
pub const SNAPSHOT: &str = "snapshot.bin";

/// Failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    Validation(Vec<String>),
    Dependency(String),
    Stage { stage: String, message: String },
    Integrity(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) | Failure::Dependency(_) => 2,
            Failure::Stage { .. } => 3,
            Failure::Integrity(_) => 4,
        }
    }
}

impl Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(v) => write!(f, "invalid configuration:\n  {}", v.join("\n  ")),
            Failure::Dependency(m) => write!(f, "dependency error: {m}"),
            Failure::Stage { stage, message } => write!(f, "stage {stage} failed: {message}"),
            Failure::Integrity(m) => write!(f, "integrity error: {m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Stage seed as 16 hex digits.
    pub seed: String,
    pub wall_ms: u64,
    pub files: Vec<FileRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub csv_schema: u32,
    pub config_sha256: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Failure::Integrity(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
        toml::from_str(&text).map_err(|e| Failure::Integrity(format!("corrupt manifest: {e}")))
    }

    /// Checks the config copy and every recorded file against their hashes.
    pub fn verify(&self, dir: &Path) -> Result<(), Failure> {
        let cfg = fs::read(dir.join(CONFIG_COPY)).map_err(|e| Failure::Integrity(format!("config copy: {e}")))?;
        if sha256(&cfg) != self.config_sha256 {
            return Err(Failure::Integrity("config hash does not match the manifest".into()));
        }
        for f in self.stages.iter().flat_map(|s| &s.files) {
            let bytes = fs::read(dir.join(&f.path)).map_err(|e| Failure::Integrity(format!("{}: {e}", f.path)))?;
            if sha256(&bytes) != f.sha256 {
                return Err(Failure::Integrity(format!("{} does not match its recorded hash", f.path)));
            }
        }
        Ok(())
    }
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Which stages to run and where extra inputs come from.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub snapshot: Option<PathBuf>,
    /// Single-stage mode: run this stage and its non-sampling prerequisites.
    pub only: Option<&'static str>,
}

fn prerequisites(stage: &str) -> &'static [&'static str] {
    match stage {
        "perforate" => &["classify"],
        "isop" => &["classify", "perforate"],
        _ => &[],
    }
}

fn plan(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<&'static str>, Failure> {
    let enabled = cfg.stages.enabled();
    let set: Vec<&'static str> = match opts.only {
        None => enabled,
        Some(stage) => {
            let mut want: Vec<&str> = prerequisites(stage).to_vec();
            want.push(stage);
            STAGES.iter().copied().filter(|s| want.contains(s)).collect()
        }
    };
    if set.is_empty() {
        return Err(Failure::Dependency("no stages enabled".into()));
    }
    for s in &set {
        for p in prerequisites(s) {
            if !set.contains(p) {
                return Err(Failure::Dependency(format!("stage {s} needs stage {p}")));
            }
        }
        if *s != "sample" && !set.contains(&"sample") && opts.snapshot.is_none() {
            return Err(Failure::Dependency(format!(
                "stage {s} needs a configuration: enable [stages.sample] or pass --snapshot"
            )));
        }
    }
    Ok(set)
}

fn stage_err(stage: &str, e: impl Display) -> Failure {
    Failure::Stage { stage: stage.into(), message: e.to_string() }
}

struct Bundle {
    dir: PathBuf,
    files: Vec<FileRecord>,
}

impl Bundle {
    fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(FileRecord { path: name.into(), sha256: sha256(bytes) });
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        self.write(name, &bytes)
    }

    /// Two-column `key,value` table.
    fn summary(&mut self, name: &str, rows: Vec<(&str, String)>) -> std::io::Result<()> {
        self.csv(name, &["key", "value"], rows.into_iter().map(|(k, v)| vec![k.to_string(), v]).collect())
    }
}

fn opt<T: Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn point(c: &[i64]) -> Result<Point, String> {
    Point::new(c).map_err(|e| e.to_string())
}

/// Occupied site of the largest component nearest to `target`.
fn nearest_in_largest(g: &Subgraph, target: &Point) -> Option<Point> {
    let cc = connected_components(g);
    let (big, _) = cc.largest()?;
    let bx = *g.bx();
    g.sites()
        .indices()
        .filter(|&i| cc.label(i) == Some(big))
        .map(|i| bx.point_of(i))
        .min_by_key(|q| (q.l1(target), *q))
}

fn shrink(bx: &LatticeBox, pad: u64) -> Result<LatticeBox, String> {
    let corner = bx.corner();
    let mut c = Vec::with_capacity(bx.dim());
    let mut sides = Vec::with_capacity(bx.dim());
    for a in 0..bx.dim() {
        if bx.side(a) <= 2 * pad {
            return Err(format!("box side {} too small for an L0 collar of {pad}", bx.side(a)));
        }
        c.push(corner[a] + pad as i64);
        sides.push(bx.side(a) - 2 * pad);
    }
    LatticeBox::new(point(&c)?, &sides).map_err(|e| e.to_string())
}

#[derive(Default)]
struct State {
    snapshot: Option<Snapshot>,
    badness: Option<BadnessField>,
    perforation: Option<Perforation>,
}

/// Runs the configured stages in order, persisting every artefact and a
/// manifest. A failing stage leaves a partial manifest.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Manifest, Failure> {
    let issues = cfg.validate();
    if !issues.is_empty() {
        return Err(Failure::Validation(issues.iter().map(|i| i.to_string()).collect()));
    }
    let stages = plan(cfg, opts)?;
    let bx = cfg.domain().map_err(|e| Failure::Validation(vec![e]))?;
    let mut state = State::default();
    if !stages.contains(&"sample") {
        let path = opts.snapshot.as_ref().expect("checked by plan");
        let bytes = fs::read(path).map_err(|e| Failure::Dependency(format!("{}: {e}", path.display())))?;
        let snap = Snapshot::from_bytes(&bytes).map_err(|e| Failure::Integrity(format!("{}: {e}", path.display())))?;
        if *snap.sites.bx() != bx {
            return Err(Failure::Validation(vec![format!(
                "snapshot box {:?} differs from the configured box {bx:?}",
                snap.sites.bx()
            )]));
        }
        state.snapshot = Some(snap);
    }
    fs::create_dir_all(&opts.out).map_err(|e| stage_err("setup", format!("{}: {e}", opts.out.display())))?;
    let cfg_text = cfg.to_text();
    fs::write(opts.out.join(CONFIG_COPY), &cfg_text).map_err(|e| stage_err("setup", e))?;
    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        csv_schema: CSV_SCHEMA,
        config_sha256: sha256(cfg_text.as_bytes()),
        complete: false,
        error: None,
        stages: vec![],
    };
    for stage in stages {
        let started = Instant::now();
        let mut bundle = Bundle { dir: opts.out.clone(), files: vec![] };
        let seed = cfg.stage_seed(stage);
        let outcome = run_stage(stage, cfg, &bx, seed, &mut state, &mut bundle);
        manifest.stages.push(StageRecord {
            name: stage.into(),
            seed: format!("{seed:016x}"),
            wall_ms: started.elapsed().as_millis() as u64,
            files: bundle.files,
        });
        if let Err(message) = outcome {
            let failure = stage_err(stage, message);
            manifest.error = Some(failure.to_string());
            write_manifest(&opts.out, &manifest)?;
            return Err(failure);
        }
    }
    manifest.complete = true;
    write_manifest(&opts.out, &manifest)?;
    Ok(manifest)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), Failure> {
    let text = toml::to_string(m).map_err(|e| stage_err("manifest", e))?;
    fs::write(dir.join(MANIFEST), text).map_err(|e| stage_err("manifest", e))
}

fn ladder(cfg: &ExperimentConfig) -> Result<ScaleLadder, String> {
    cfg.ladder().ok_or("no ladder configured")?
}

fn run_stage(
    stage: &str,
    cfg: &ExperimentConfig,
    bx: &LatticeBox,
    seed: u64,
    st: &mut State,
    out: &mut Bundle,
) -> Result<(), String> {
    let io = |e: std::io::Error| e.to_string();
    match stage {
        "sample" => {
            let spec = cfg.stages.sample.unwrap_or_default();
            sample_stage(cfg, bx, seed, &spec, st, out)
        }
        "classify" => {
            let g = st.snapshot.as_ref().expect("planned").subgraph();
            let lad = ladder(cfg)?;
            let nmax = cfg.stages.classify.and_then(|c| c.nmax).unwrap_or(lad.depth());
            let region = shrink(bx, lad.L(0))?;
            let field = classify(&g, &lad, &cfg.eta()?, &region, nmax).map_err(|e| e.to_string())?;
            let rows = field
                .levels
                .iter()
                .enumerate()
                .map(|(n, lv)| {
                    let d = lv.d_bad.count_ones();
                    let i = lv.i_bad.count_ones();
                    let bad = lv.bad_count();
                    let total = lv.grid.volume();
                    vec![n, lv.scale as usize, total, d, i, bad].into_iter().map(|v| v.to_string()).chain([
                        (bad as f64 / total as f64).to_string(),
                    ])
                    .collect()
                })
                .collect();
            out.csv("classify.csv", &["level", "scale", "vertices", "d_bad", "i_bad", "bad", "bad_fraction"], rows)
                .map_err(io)?;
            st.badness = Some(field);
            Ok(())
        }
        "perforate" => {
            let p = cfg.stages.perforate.as_ref().ok_or("missing [stages.perforate]")?;
            let field = st.badness.as_ref().expect("planned");
            let pf = perforate::build(field, p.k, p.s, &point(&p.origin)?, &mut TieBreak::Lexicographic)
                .map_err(|e| e.to_string())?;
            let rep = perforate::verify_structure(&pf, field).map_err(|e| e.to_string())?;
            out.write("perforation.txt", perforate::to_text(&pf).as_bytes()).map_err(io)?;
            out.summary(
                "perforate.csv",
                vec![
                    ("removals", pf.records.len().to_string()),
                    ("connected", rep.connected.to_string()),
                    ("volume", rep.volume.to_string()),
                    ("full_volume", rep.full_volume.to_string()),
                    ("product_bound", rep.product_bound.to_string()),
                    ("volume_ok", rep.volume_ok.to_string()),
                    ("all_good", rep.all_good.to_string()),
                    ("nested", rep.nested.to_string()),
                ],
            )
            .map_err(io)?;
            if !rep.passed() {
                return Err("perforation structure check failed".into());
            }
            st.perforation = Some(pf);
            Ok(())
        }
        "cluster" => cluster_stage(cfg, seed, st, out),
        "isop" => {
            let spec = cfg.stages.isop.clone().unwrap_or_else(IsopStage::default);
            let families = Family::parse_list(&spec.families.join(",")).map_err(|e| e.to_string())?;
            let pf = st.perforation.as_ref().expect("planned");
            let audit = isop_audit(pf, &families, seed).map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            audit.write_csv(&mut buf).map_err(|e| e.to_string())?;
            out.write("isop.csv", &buf).map_err(io)
        }
        "regularity" => {
            let r = cfg.stages.regularity.as_ref().ok_or("missing [stages.regularity]")?;
            let g = st.snapshot.as_ref().expect("planned").subgraph();
            let x = nearest_in_largest(&g, &point(&r.centre)?).ok_or("configuration has no occupied site")?;
            let params = BallParams::new(r.cv, r.cp, r.cw, g.dim()).map_err(|e| e.to_string())?;
            let mut certify = CertifyOptions::new(ladder(cfg)?, r.level);
            certify.seed = seed;
            let opts = ScanOptions { certify, max_centres: r.max_centres, seed };
            let scan = very_good_scan(&g, &x, r.radius, &params, &opts).map_err(|e| e.to_string())?;
            out.summary(
                "regularity.csv",
                vec![
                    ("centre", x.to_string()),
                    ("radius", scan.big_r.to_string()),
                    ("n", opt(scan.n)),
                    ("threshold", scan.threshold.to_string()),
                    ("very_good", scan.very_good.to_string()),
                    ("tested", scan.tested.to_string()),
                    ("failures", scan.failures.len().to_string()),
                ],
            )
            .map_err(io)?;
            let rows = scan
                .failures
                .iter()
                .map(|f| vec![f.centre.to_string(), f.radius.to_string(), format!("{:?}", f.verdict)])
                .collect();
            out.csv("regularity_failures.csv", &["centre", "radius", "verdict"], rows).map_err(io)
        }
        "walk" => walk_stage(cfg, seed, st, out),
        other => Err(format!("unknown stage {other}")),
    }
}

fn sample_stage(
    cfg: &ExperimentConfig,
    bx: &LatticeBox,
    seed: u64,
    spec: &SampleStage,
    st: &mut State,
    out: &mut Bundle,
) -> Result<(), String> {
    let (snap, rep) = sample(cfg.model.model(), bx, seed, spec.guard_factor).map_err(|e| e.to_string())?;
    out.write(SNAPSHOT, &snap.to_bytes()).map_err(|e| e.to_string())?;
    let occupied = snap.sites.count();
    out.summary(
        "sample.csv",
        vec![
            ("model", snap.model.name().to_string()),
            ("parameter", snap.model.parameter().to_string()),
            ("seed", snap.seed.to_string()),
            ("sites", bx.volume().to_string()),
            ("occupied", occupied.to_string()),
            ("density", (occupied as f64 / bx.volume() as f64).to_string()),
            ("trajectories", opt(rep.trajectories)),
            ("capacity", opt(rep.capacity)),
            ("neglected_return", opt(rep.neglected_return)),
        ],
    )
    .map_err(|e| e.to_string())?;
    st.snapshot = Some(snap);
    Ok(())
}

fn cluster_stage(cfg: &ExperimentConfig, seed: u64, st: &mut State, out: &mut Bundle) -> Result<(), String> {
    let io = |e: std::io::Error| e.to_string();
    let c = cfg.stages.cluster.as_ref().ok_or("missing [stages.cluster]")?;
    let g = st.snapshot.as_ref().expect("planned").subgraph();
    let lad = ladder(cfg)?;
    let cd = largest_cluster(&g, &lad, c.k, c.level, &point(&c.origin)?, c.r).map_err(|e| e.to_string())?;
    let ec = extend_cluster(&cd, &g).map_err(|e| e.to_string())?;
    let chem = chemical_distance_check(&ec, &g, c.pairs, seed).map_err(|e| e.to_string())?;
    let c_chem = if chem.max_ratio.is_finite() && chem.max_ratio > 0.0 { chem.max_ratio } else { 1.0 };
    let vol = if c.radii.is_empty() {
        None
    } else {
        let spec = VolumeSpec { radii: c.radii.clone(), centres: c.centres, c_chem, seed: seed ^ 1 };
        Some(volume_growth_check(&ec, &g, &spec).map_err(|e| e.to_string())?)
    };
    out.summary(
        "cluster.csv",
        vec![
            ("components", cd.sizes.len().to_string()),
            ("core_size", cd.core_size().to_string()),
            ("tie", cd.tie.to_string()),
            ("extension_size", ec.extension.count().to_string()),
            ("pairs", chem.pairs.to_string()),
            ("disconnected", chem.disconnected.to_string()),
            ("chemical_ratio", chem.max_ratio.to_string()),
            ("volume_ratio", opt(vol.as_ref().and_then(|v| v.min_ratio))),
        ],
    )
    .map_err(io)?;
    let rows = chem
        .shells
        .iter()
        .map(|s| vec![s.shell.to_string(), s.pairs.to_string(), s.max_ratio.to_string()])
        .collect();
    out.csv("chemical.csv", &["shell", "pairs", "max_ratio"], rows).map_err(io)?;
    if let Some(v) = vol {
        let rows = v
            .samples
            .iter()
            .map(|s| {
                vec![
                    s.centre.to_string(),
                    s.radius.to_string(),
                    s.measure.to_string(),
                    s.ratio.to_string(),
                    s.in_range.to_string(),
                    s.truncated.to_string(),
                ]
            })
            .collect();
        out.csv("volume.csv", &["centre", "radius", "measure", "ratio", "in_range", "truncated"], rows)
            .map_err(io)?;
    }
    Ok(())
}

fn walk_stage(cfg: &ExperimentConfig, seed: u64, st: &mut State, out: &mut Bundle) -> Result<(), String> {
    let io = |e: std::io::Error| e.to_string();
    let w = cfg.stages.walk.as_ref().ok_or("missing [stages.walk]")?;
    let g = st.snapshot.as_ref().expect("planned").subgraph();
    let x = nearest_in_largest(&g, &point(&w.source)?).ok_or("configuration has no occupied site")?;
    let mut summary = vec![("source", x.to_string())];
    if !w.times.is_empty() {
        let horizon = w.times.iter().max().expect("nonempty") + 1;
        let mut steps: Vec<usize> = w.times.iter().flat_map(|&t| [t, t + 1]).collect();
        steps.sort_unstable();
        steps.dedup();
        let ker = kernel_steps::<f64>(&g, &x, horizon, &steps, None).map_err(|e| e.to_string())?;
        summary.push(("kernel_safe", ker.safe.to_string()));
        summary.push(("mass_error", ker.mass_error().to_string()));
        let mut rows = Vec::new();
        for &t in &w.times {
            let fit = envelope_check(&g, &[&ker], &[t], Distance::Chemical, w.eps).map_err(|e| e.to_string())?;
            let up = fit.upper.as_ref();
            let lo = fit.lower.as_ref();
            rows.push(vec![
                t.to_string(),
                opt(up.map(|b| b.amplitude)),
                opt(up.map(|b| b.rate)),
                opt(lo.map(|b| b.amplitude)),
                opt(lo.map(|b| b.rate)),
                fit.upper_pairs.to_string(),
                fit.lower_pairs.to_string(),
                fit.coverage.to_string(),
                fit.violations.len().to_string(),
            ]);
        }
        out.csv(
            "walk_envelope.csv",
            &["t", "c1", "c2", "c3", "c4", "upper_pairs", "lower_pairs", "coverage", "violations"],
            rows,
        )
        .map_err(io)?;
    }
    if let Some(r) = w.harnack_radius {
        let h = harnack_ratio::<f64>(&g, &x, r, w.harnack_trials, seed).map_err(|e| e.to_string())?;
        out.csv(
            "walk_harnack.csv",
            &["radius", "interior", "boundary", "trials", "excluded", "max_ratio", "worst", "worst_site"],
            vec![vec![
                r.to_string(),
                h.interior.to_string(),
                h.boundary.to_string(),
                h.trials.to_string(),
                h.excluded.to_string(),
                opt(h.max_ratio),
                opt(h.worst),
                opt(h.worst_site),
            ]],
        )
        .map_err(io)?;
    }
    if let Some(n) = w.qip_steps {
        let q = qip_stats(&g, &x, n, w.qip_trials, seed ^ 1).map_err(|e| e.to_string())?;
        let mut rows = Vec::new();
        for i in 0..q.dim {
            for j in 0..q.dim {
                rows.push(vec![n.to_string(), i.to_string(), j.to_string(), q.entry(i, j).to_string(), q.se_entry(i, j).to_string()]);
            }
        }
        out.csv("walk_qip.csv", &["n", "i", "j", "sigma", "se"], rows).map_err(io)?;
    }
    if let Some(guard) = w.green_guard {
        let mut rows = Vec::new();
        for t in &w.green_targets {
            let y = point(t)?;
            let est = green::<f64>(&g, &y, &x, guard).map_err(|e| e.to_string())?;
            rows.push(vec![
                y.to_string(),
                y.l2(&x).to_string(),
                est.value.to_string(),
                opt(est.doubled),
                opt(est.extrapolated()),
            ]);
        }
        out.csv("walk_green.csv", &["target", "distance", "value", "doubled", "extrapolated"], rows).map_err(io)?;
    }
    out.summary("walk.csv", summary).map_err(io)
}
