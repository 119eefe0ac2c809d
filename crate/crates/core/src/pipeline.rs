//! End-to-end run driven by a flat TOML configuration: load, select, fit,
//! trace, permutation test, with every artifact stamped by the config hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::causality::{cluster_mass_test_many, directional_traces, CausalityTrace, ClusterResult, Direction};
use crate::design::DesignSpec;
use crate::dist::InvGamma;
use crate::error::{Error, Result};
use crate::io::{downsample_causal, ingest_csv, Layout};
use crate::model::{EpochedSeries, PriorSettings};
use crate::selection::{select_msbss, select_order_bss, Selection, SelectionConfig};
use crate::vbem::{fit, FitConfig, FitResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Bss,
    Msbss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub layout: Layout,
    pub output: PathBuf,
    pub model: ModelKind,
    /// Fixed time-domain order; skips selection.
    pub order: Option<usize>,
    /// Fixed multiscale orders `p_1..p_J, p_smooth`; skips selection.
    pub orders: Option<Vec<usize>>,
    pub p_max: usize,
    pub j_max: usize,
    pub scale_p_max: usize,
    pub single_trial_selection: bool,
    pub tol_selection: f64,
    pub tol_fit: f64,
    pub max_iter: usize,
    pub em_iters: usize,
    pub sigma1: f64,
    pub m_a: f64,
    pub half_t_scale: f64,
    pub a_q: f64,
    pub a_r: f64,
    pub nu: f64,
    pub directions: Vec<Direction>,
    pub cluster_level: f64,
    /// 0 skips the permutation test.
    pub permutations: usize,
    pub seed: u64,
    pub downsample: usize,
    pub smoothing: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let prior = PriorSettings::default();
        let fit = FitConfig::default();
        Self {
            input: None,
            layout: Layout::Wide,
            output: PathBuf::from("tvgc_out"),
            model: ModelKind::Bss,
            order: None,
            orders: None,
            p_max: 4,
            j_max: 3,
            scale_p_max: 2,
            single_trial_selection: false,
            tol_selection: FitConfig::selection().tol,
            tol_fit: fit.tol,
            max_iter: fit.max_iter,
            em_iters: fit.em_iters,
            sigma1: prior.sigma1,
            m_a: prior.m_a,
            half_t_scale: prior.half_t_scale,
            a_q: prior.a_q,
            a_r: prior.a_r,
            nu: prior.nu,
            directions: Direction::BOTH.to_vec(),
            cluster_level: 0.2,
            permutations: 2000,
            seed: 0,
            downsample: 1,
            smoothing: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn prior(&self) -> PriorSettings {
        PriorSettings {
            sigma1: self.sigma1,
            m_a: self.m_a,
            half_t_scale: self.half_t_scale,
            a_q: self.a_q,
            a_r: self.a_r,
            nu: self.nu,
        }
    }

    pub fn fit_config(&self, tol: f64) -> FitConfig {
        FitConfig { tol, max_iter: self.max_iter, em_iters: self.em_iters, ..FitConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tol_selection > 0.0 && self.tol_fit > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if !(self.cluster_level > 0.0 && self.cluster_level < 1.0) {
            return bad("cluster_level must lie in (0, 1)");
        }
        if self.directions.is_empty() {
            return bad("at least one direction is required");
        }
        if self.downsample == 0 {
            return bad("downsample must be at least 1");
        }
        if self.p_max == 0 || self.j_max == 0 || self.scale_p_max == 0 {
            return bad("selection bounds must be at least 1");
        }
        let s = self.prior();
        if !(s.sigma1 > 0.0 && s.half_t_scale > 0.0 && s.a_q > 0.0 && s.a_r > 0.0 && s.nu > 0.0) {
            return bad("prior scales must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canon).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How far a run goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Select,
    Fit,
    Causality,
    Permtest,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    config_hash: &'a str,
    kind: &'static str,
    data: &'a T,
}

/// Posterior summary written to `posterior.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub spec: DesignSpec,
    /// 1-based label of the first modelled sample.
    pub first_time: usize,
    pub trials: usize,
    pub channels: usize,
    pub k: usize,
    pub a_mean: Vec<f64>,
    pub a_var: Vec<f64>,
    pub q: InvGamma,
    /// `<R_j>` (or the scale over the degrees of freedom when the mean does not exist).
    pub r_mean: Vec<Vec<f64>>,
    pub free_energy: Vec<f64>,
    pub converged: bool,
    /// Smoothed means and variances of `phi_t`, one row per modelled time.
    pub coef_mean: Vec<Vec<f64>>,
    pub coef_var: Vec<Vec<f64>>,
}

impl PosteriorSummary {
    pub fn from_fit(f: &FitResult) -> Self {
        let st = &f.state;
        Self {
            spec: f.system.spec.clone(),
            first_time: st.t_start + 1,
            trials: f.system.trials,
            channels: f.system.channels,
            k: f.system.k(),
            a_mean: f.params.a_mean.clone(),
            a_var: f.params.a_var.clone(),
            q: f.params.q,
            r_mean: f
                .params
                .r
                .iter()
                .map(|w| {
                    let d = w.dim() as f64;
                    let div = if w.dof > d + 1.0 { w.dof - d - 1.0 } else { w.dof };
                    (&w.scale / div).as_slice().to_vec()
                })
                .collect(),
            free_energy: f.trace.values.clone(),
            converged: f.trace.converged,
            coef_mean: st.mu_s.iter().map(|m| m.as_slice().to_vec()).collect(),
            coef_var: st.sigma_s.iter().map(|s| s.diagonal().as_slice().to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub stages: Vec<Stage>,
    pub design: Option<DesignSpec>,
    pub files: Vec<String>,
}

struct Writer<'a> {
    dir: &'a Path,
    hash: String,
    files: Vec<String>,
}

impl Writer<'_> {
    fn json<T: Serialize>(&mut self, name: &str, kind: &'static str, data: &T) -> Result<()> {
        let env = Envelope { schema_version: SCHEMA_VERSION, config_hash: &self.hash, kind, data };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn traces_csv(&mut self, traces: &[CausalityTrace]) -> Result<()> {
        let mut out = format!("# config_hash={}\ndirection,scope,time,stat,sig\n", self.hash);
        for tr in traces {
            for ((t, m), s) in tr.times.iter().zip(&tr.statistic).zip(&tr.significance) {
                out.push_str(&format!("{},{},{t},{m},{s}\n", tr.direction.label(), tr.scope.label()));
            }
        }
        fs::write(self.dir.join("traces.csv"), out)?;
        self.files.push("traces.csv".into());
        Ok(())
    }
}

/// Input series after optional downsampling.
pub fn load_series(config: &PipelineConfig) -> Result<EpochedSeries> {
    let path = config.input.as_ref().ok_or_else(|| Error::Config("no input file configured".into()))?;
    let series = ingest_csv(path, config.layout)?;
    if config.downsample > 1 {
        downsample_causal(&series, config.downsample, config.smoothing)
    } else {
        Ok(series)
    }
}

/// The fixed design from the config, or the free-energy selection.
pub fn choose_design(series: &EpochedSeries, config: &PipelineConfig) -> Result<Selection> {
    let sel = SelectionConfig {
        fit: config.fit_config(config.tol_selection),
        prior: config.prior(),
        single_trial: config.single_trial_selection.then_some(0),
    };
    match config.model {
        ModelKind::Bss => match config.order {
            Some(p) => Ok(fixed(DesignSpec::time(p))),
            None => select_order_bss(series, config.p_max, &sel),
        },
        ModelKind::Msbss => match &config.orders {
            Some(o) => Ok(fixed(DesignSpec::wavelet(o.clone()))),
            None => select_msbss(series, config.j_max, config.scale_p_max, &sel),
        },
    }
}

fn fixed(spec: DesignSpec) -> Selection {
    Selection { t_start: spec.min_t_start(), spec, free_energy: f64::NAN, candidates: Vec::new() }
}

fn traces_for(fit: &FitResult, directions: &[Direction]) -> Result<Vec<CausalityTrace>> {
    Ok(directional_traces(fit)?.into_iter().filter(|t| directions.contains(&t.direction)).collect())
}

/// Permutation test of `observed`, refitting `spec` on channel-swapped data.
pub fn permutation_test(
    series: &EpochedSeries,
    spec: &DesignSpec,
    observed: &[CausalityTrace],
    config: &PipelineConfig,
) -> Result<Vec<ClusterResult>> {
    let prior = config.prior();
    let fc = config.fit_config(config.tol_fit);
    let dirs: Vec<Direction> = observed.iter().map(|t| t.direction).collect();
    cluster_mass_test_many(observed, config.cluster_level, config.permutations, series.trials(), config.seed, |flags| {
        let swapped = series.swap_channels(flags);
        traces_for(&fit(&swapped, spec, &prior, &fc, None)?, &dirs)
    })
}

/// Run up to `until`, writing artifacts into `config.output` as each stage
/// finishes. Earlier artifacts stay on disk if a later stage fails.
pub fn run_pipeline(config: &PipelineConfig, until: Stage) -> Result<Manifest> {
    config.validate()?;
    let series = load_series(config).map_err(|e| e.in_stage("load"))?;
    run_on_series(&series, config, until)
}

pub fn run_on_series(series: &EpochedSeries, config: &PipelineConfig, until: Stage) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(&config.output)?;
    let mut w = Writer { dir: &config.output, hash: config.hash(), files: Vec::new() };
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: w.hash.clone(),
        seed: config.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        stages: Vec::new(),
        design: None,
        files: Vec::new(),
    };
    let result = run_stages(series, config, until, &mut w, &mut manifest);
    manifest.files = std::mem::take(&mut w.files);
    manifest.files.push("manifest.json".into());
    w.json("manifest.json", "manifest", &manifest)?;
    result.map(|_| manifest)
}

fn run_stages(
    series: &EpochedSeries,
    config: &PipelineConfig,
    until: Stage,
    w: &mut Writer,
    manifest: &mut Manifest,
) -> Result<()> {
    let sel = choose_design(series, config).map_err(|e| e.in_stage("select"))?;
    w.json("selection.json", "selection", &sel)?;
    manifest.design = Some(sel.spec.clone());
    manifest.stages.push(Stage::Select);
    if until == Stage::Select {
        return Ok(());
    }

    let fitted = fit(series, &sel.spec, &config.prior(), &config.fit_config(config.tol_fit), None)
        .map_err(|e| e.in_stage("fit"))?;
    w.json("posterior.json", "posterior", &PosteriorSummary::from_fit(&fitted))?;
    manifest.stages.push(Stage::Fit);
    if until == Stage::Fit {
        return Ok(());
    }

    let traces = traces_for(&fitted, &config.directions).map_err(|e| e.in_stage("causality"))?;
    w.json("traces.json", "traces", &traces)?;
    w.traces_csv(&traces)?;
    manifest.stages.push(Stage::Causality);
    if until == Stage::Causality || config.permutations == 0 {
        return Ok(());
    }

    let clusters = permutation_test(series, &sel.spec, &traces, config).map_err(|e| e.in_stage("permtest"))?;
    w.json("clusters.json", "clusters", &clusters)?;
    manifest.stages.push(Stage::Permtest);
    Ok(())
}
