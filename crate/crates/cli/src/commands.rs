use crate::args::*;
use crate::failure::{data, usage};
use crate::manifest::{beside, RunManifest};
use anyhow::Context;
use loki_core::attention::{
    exact_topk_attention, loki_attention_projected, pca_attn, resolve_budget, vanilla_attention, Composition, H2oState,
    KeyTransform, KvCache, LokiConfig, ReducedKvCache,
};
use loki_core::bench::{bench_report, run_bench, BenchConfig, BenchMethod};
use loki_core::calibration::{build_projection, rank_at_v, rank_report, CalibrationInput, ProjectionSet, RotaryStage};
use loki_core::data_io::{gen_synthetic_keys, read_key_dump, read_projection, write_key_dump, write_projection, KeyDumpHeader, SyntheticSpec};
use loki_core::kernels::TileSpec;
use loki_core::metrics::agreement_sweep;
use loki_core::rope::{rope_apply, rope_apply_rows, RopeParams};
use loki_core::tensor::Matrix;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

type Result<T> = anyhow::Result<T>;

fn stage_of(s: Stage) -> RotaryStage {
    match s {
        Stage::Pre => RotaryStage::Pre,
        Stage::Post => RotaryStage::Post,
    }
}

fn load(path: &Path) -> Result<(KeyDumpHeader, Matrix)> {
    read_key_dump(path).with_context(|| format!("reading {}", path.display()))
}

fn load_projection(path: &Path) -> Result<ProjectionSet> {
    read_projection(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Pools key dumps by (layer, head, stage), keeping first-seen order.
fn group_keys(paths: &[PathBuf]) -> Result<Vec<CalibrationInput>> {
    let mut groups: BTreeMap<(u32, u32, u8), CalibrationInput> = BTreeMap::new();
    for path in paths {
        let (h, keys) = load(path)?;
        match groups.get_mut(&(h.layer, h.head, h.stage.code())) {
            Some(g) => {
                if g.keys.cols() != keys.cols() {
                    return Err(data(format!(
                        "{}: head dimension {} differs from {} seen earlier for layer {} head {}",
                        path.display(),
                        keys.cols(),
                        g.keys.cols(),
                        h.layer,
                        h.head
                    )));
                }
                for row in keys.row_iter() {
                    g.keys.push_row(row)?;
                }
            }
            None => {
                groups.insert(
                    (h.layer, h.head, h.stage.code()),
                    CalibrationInput {
                        layer: h.layer,
                        head: h.head,
                        stage: h.stage,
                        keys,
                    },
                );
            }
        }
    }
    Ok(groups.into_values().collect())
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seq_len: a.seq,
        head_dim: a.dim,
        rank: a.rank,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    if a.seq == 0 || a.dim == 0 {
        return Err(usage("--seq and --dim must be positive"));
    }
    let keys = gen_synthetic_keys(&spec)?;
    let header = KeyDumpHeader::for_matrix(a.layer, a.head, stage_of(a.stage), &keys);
    write_key_dump(&a.out, &header, &keys).with_context(|| format!("writing {}", a.out.display()))?;

    let mut m = RunManifest::new("gen");
    m.outputs.push(a.out.clone());
    m.config.seq_len = Some(vec![a.seq]);
    m.config.head_dim = Some(a.dim);
    m.config.rank = Some(a.rank);
    m.config.noise_sigma = Some(a.noise);
    m.config.seed = Some(a.seed);
    m.config.rotary_stage = Some(stage_of(a.stage).to_string());
    m.write(&beside(&a.out))?;
    println!("wrote {} ({}x{}, rank {}, σ={})", a.out.display(), a.seq, a.dim, a.rank, a.noise);
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let groups = group_keys(&a.keys)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("calibrate");
    m.inputs = a.keys.clone();
    println!("layer\thead\tstage\tS\tD\trank@90\ttop eigenvalues");
    for g in &groups {
        let p = build_projection(&g.keys, g.layer, g.head, g.stage)?;
        let path = a.out.join(format!("L{}_H{}_{}.lkp", g.layer, g.head, g.stage));
        write_projection(&path, &p).with_context(|| format!("writing {}", path.display()))?;
        let top: Vec<String> = p.eigenvalues().iter().take(4).map(|e| format!("{e:.4}")).collect();
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            g.layer,
            g.head,
            g.stage,
            g.keys.rows(),
            g.keys.cols(),
            rank_at_v(p.eigenvalues(), 90.0)?,
            top.join(" ")
        );
        m.outputs.push(path);
    }
    m.write(&a.out.join("manifest.json"))
}

pub fn rank(a: &RankArgs) -> Result<()> {
    let inputs = group_keys(&a.keys)?;
    let report = rank_report(&inputs, &a.v)?;
    write_text(&a.out, &report.to_tsv())?;
    for avg in report.model_averages() {
        println!("{} keys: mean Rank@{} = {:.2}", avg.stage, avg.v, avg.mean_rank);
    }
    let mut m = RunManifest::new("rank");
    m.inputs = a.keys.clone();
    m.outputs.push(a.out.clone());
    m.config.v_list = Some(a.v.clone());
    m.write(&beside(&a.out))
}

/// Keys and queries as they enter attention: RoPE is applied to whichever
/// inputs are pre-rotary, keys at their row position and queries at the
/// position of the last key (or their own row for streamed methods).
struct Inputs {
    keys_pre: Matrix,
    keys: Matrix,
    keys_stage: RotaryStage,
    values: Matrix,
    queries: Matrix,
    queries_stage: RotaryStage,
    rope: RopeParams,
}

impl Inputs {
    fn query_position(&self, i: usize, streamed: bool) -> u64 {
        if streamed {
            i as u64
        } else {
            self.keys.rows().saturating_sub(1) as u64
        }
    }

    fn query_post(&self, i: usize, streamed: bool) -> Result<Vec<f32>> {
        let q = self.queries.row(i);
        Ok(match self.queries_stage {
            RotaryStage::Pre => rope_apply(q, self.query_position(i, streamed), &self.rope)?,
            RotaryStage::Post => q.to_vec(),
        })
    }
}

fn load_inputs(keys: &Path, values: Option<&Path>, queries: &Path) -> Result<Inputs> {
    let (kh, k) = load(keys)?;
    let (qh, q) = load(queries)?;
    if q.cols() != k.cols() {
        return Err(data(format!("queries have D={}, keys have D={}", q.cols(), k.cols())));
    }
    if k.rows() == 0 || q.rows() == 0 {
        return Err(data("keys and queries must be nonempty"));
    }
    let v = match values {
        Some(path) => {
            let (_, v) = load(path)?;
            if v.shape() != k.shape() {
                return Err(data(format!(
                    "values are {}x{}, keys are {}x{}",
                    v.rows(),
                    v.cols(),
                    k.rows(),
                    k.cols()
                )));
            }
            v
        }
        None => Matrix::zeros(k.rows(), k.cols()),
    };
    let rope = RopeParams::with_default_base(k.cols())?;
    let post = match kh.stage {
        RotaryStage::Pre => rope_apply_rows(&k, 0, &rope)?,
        RotaryStage::Post => k.clone(),
    };
    Ok(Inputs {
        keys_pre: k,
        keys: post,
        keys_stage: kh.stage,
        values: v,
        queries: q,
        queries_stage: qh.stage,
        rope,
    })
}

fn composition(c: CompositionArg) -> Composition {
    match c {
        CompositionArg::RotateThenProject => Composition::RotateThenProject,
        CompositionArg::ProjectThenRotate => Composition::ProjectThenRotate,
    }
}

fn check_projection(p: &ProjectionSet, inputs: &Inputs) -> Result<()> {
    if p.head_dim() != inputs.keys.cols() {
        return Err(data(format!(
            "projection has D={}, keys have D={}",
            p.head_dim(),
            inputs.keys.cols()
        )));
    }
    Ok(())
}

fn push_row(out: &mut String, i: usize, values: &[f32], selected: Option<&[usize]>) {
    let _ = write!(out, "{i}");
    for v in values {
        let _ = write!(out, "\t{v}");
    }
    match selected {
        Some(s) => {
            let list: Vec<String> = s.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "\t{}", list.join(","));
        }
        None => out.push_str("\t-\n"),
    }
}

pub fn run(a: &RunArgs) -> Result<()> {
    let inputs = load_inputs(&a.keys, Some(&a.values), &a.queries)?;
    let (s, dim) = inputs.keys.shape();
    let cfg = LokiConfig::new(a.kf, a.df)?;
    let (k, d) = cfg.resolve(s, dim)?;
    let tile = TileSpec::default();
    let comp = composition(a.composition);
    if comp == Composition::ProjectThenRotate
        && (inputs.keys_stage == RotaryStage::Post || inputs.queries_stage == RotaryStage::Post)
    {
        return Err(usage("--composition project-then-rotate needs pre-rotary keys and queries"));
    }
    let proj = match (&a.proj, a.method) {
        (Some(path), _) => Some(load_projection(path)?),
        (None, Method::Loki | Method::PcaAttn) => {
            return Err(usage(format!("--method {:?} needs --proj", a.method).to_lowercase()));
        }
        (None, _) => None,
    };
    if let Some(p) = &proj {
        check_projection(p, &inputs)?;
    }

    let mut table = String::from("query");
    for j in 0..dim {
        let _ = write!(table, "\tout_{j}");
    }
    table.push_str("\tselected\n");

    let mut h2o_budget = None;
    match a.method {
        Method::Vanilla => {
            for i in 0..inputs.queries.rows() {
                let q = inputs.query_post(i, false)?;
                let out = vanilla_attention(&q, &inputs.keys, &inputs.values, &tile)?;
                push_row(&mut table, i, &out.output, None);
            }
        }
        Method::ExactTopk => {
            for i in 0..inputs.queries.rows() {
                let q = inputs.query_post(i, false)?;
                let out = exact_topk_attention(&q, &inputs.keys, &inputs.values, k, &tile)?;
                push_row(&mut table, i, &out.output, Some(out.selected.as_slice()));
            }
        }
        Method::Loki => {
            let p = proj.as_ref().expect("checked above");
            let rope = (inputs.keys_stage == RotaryStage::Pre).then_some(inputs.rope);
            let transform = KeyTransform {
                projection: p,
                rope,
                composition: comp,
            };
            let cache = KvCache::from_parts(transform.apply_rows(&inputs.keys_pre, 0)?, inputs.values.clone())?;
            for i in 0..inputs.queries.rows() {
                let q_hat = match (inputs.queries_stage, rope) {
                    (RotaryStage::Pre, Some(_)) => transform.apply(inputs.queries.row(i), inputs.query_position(i, false))?,
                    _ => p.project(&inputs.query_post(i, false)?)?,
                };
                let out = loki_attention_projected(&q_hat, &cache, &cfg, &tile)?;
                push_row(&mut table, i, &out.output, Some(out.selected.as_slice()));
            }
        }
        Method::PcaAttn => {
            if comp == Composition::ProjectThenRotate {
                return Err(usage("pca-attn supports only --composition rotate-then-project"));
            }
            let p = proj.as_ref().expect("checked above");
            let cache = ReducedKvCache::from_raw(&inputs.keys, &inputs.values, p, d)?;
            for i in 0..inputs.queries.rows() {
                let q = inputs.query_post(i, false)?;
                let out = pca_attn(&q, &cache, p, &tile)?;
                push_row(&mut table, i, &out.output, None);
            }
        }
        Method::H2o => {
            if inputs.queries.rows() != s {
                return Err(usage(format!(
                    "h2o streams one query per key: got {} queries for {} keys",
                    inputs.queries.rows(),
                    s
                )));
            }
            let budget = resolve_budget(a.kf, s)?.max(2);
            h2o_budget = Some(budget);
            let mut state = H2oState::new(budget, dim)?;
            for t in 0..s {
                let q = inputs.query_post(t, true)?;
                let mut attended = state.retained().into_vec();
                attended.push(t);
                let out = state.step(&q, inputs.keys.row(t), inputs.values.row(t), &tile)?;
                push_row(&mut table, t, &out.output, Some(&attended));
            }
        }
    }
    write_text(&a.out, &table)?;

    let mut m = RunManifest::new("run");
    m.inputs = [Some(&a.keys), Some(&a.values), Some(&a.queries), a.proj.as_ref()]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    m.outputs.push(a.out.clone());
    m.config.method = Some(format!("{:?}", a.method).to_lowercase());
    m.config.seq_len = Some(vec![s]);
    m.config.head_dim = Some(dim);
    m.config.key_fraction = Some(vec![a.kf]);
    m.config.dim_fraction = Some(vec![a.df]);
    m.config.composition = Some(format!("{:?}", comp));
    m.config.rotary_stage = Some(inputs.keys_stage.to_string());
    m.resolved.k = vec![k];
    m.resolved.d = vec![d];
    m.resolved.h2o_budget = h2o_budget;
    m.write(&beside(&a.out))?;
    println!("{} queries → {}", inputs.queries.rows(), a.out.display());
    Ok(())
}

pub fn agree(a: &AgreeArgs) -> Result<()> {
    let inputs = load_inputs(&a.keys, None, &a.queries)?;
    let p = load_projection(&a.proj)?;
    check_projection(&p, &inputs)?;
    let (s, dim) = inputs.keys.shape();
    let queries = (0..inputs.queries.rows())
        .map(|i| inputs.query_post(i, false))
        .collect::<Result<Vec<_>>>()?;
    let queries = Matrix::from_rows(&queries)?;
    let stats = agreement_sweep(&inputs.keys, &queries, &p, &a.kf_grid, &a.df_grid, &TileSpec::default())?;
    write_text(&a.out, &stats.to_tsv())?;

    let mut m = RunManifest::new("agree");
    m.inputs = vec![a.keys.clone(), a.queries.clone(), a.proj.clone()];
    m.outputs.push(a.out.clone());
    m.config.seq_len = Some(vec![s]);
    m.config.head_dim = Some(dim);
    m.config.key_fraction = Some(a.kf_grid.clone());
    m.config.dim_fraction = Some(a.df_grid.clone());
    m.resolved.k = a.kf_grid.iter().map(|&f| resolve_budget(f, s)).collect::<loki_core::Result<_>>()?;
    m.resolved.d = a.df_grid.iter().map(|&f| resolve_budget(f, dim)).collect::<loki_core::Result<_>>()?;
    m.write(&beside(&a.out))?;
    println!("{} queries x {} cells → {}", queries.rows(), stats.cells.len(), a.out.display());
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.seq_list.is_empty() || a.seq_list.contains(&0) {
        return Err(usage("--seq-list entries must be positive"));
    }
    if a.dim == 0 || a.batch == 0 {
        return Err(usage("--dim and --batch must be positive"));
    }
    create_dir(&a.out)?;
    let mut records = Vec::new();
    for &s in &a.seq_list {
        for &method in &a.method {
            let method = match method {
                BenchMethodArg::Vanilla => BenchMethod::Vanilla,
                BenchMethodArg::Loki => BenchMethod::Loki,
            };
            let mut cfg = BenchConfig::new(method, s, a.dim, a.kf, a.df);
            cfg.trials = a.trials;
            cfg.warmup = a.warmup;
            cfg.batch = a.batch;
            cfg.seed = a.seed;
            let r = run_bench(&cfg)?;
            println!(
                "{method}\tS={s}\tmean {:.1} µs ± {:.1}",
                r.total.mean_ns / 1e3,
                r.total.std_ns / 1e3
            );
            records.push(r);
        }
    }
    let report = bench_report(&records);
    let table = a.out.join("bench.tsv");
    let plot = a.out.join("bench_plotdata.tsv");
    write_text(&table, &report.table)?;
    write_text(&plot, &report.plot_data)?;

    let mut m = RunManifest::new("bench");
    m.outputs = vec![table, plot];
    m.config.method = Some(
        a.method
            .iter()
            .map(|x| format!("{x:?}").to_lowercase())
            .collect::<Vec<_>>()
            .join(","),
    );
    m.config.seq_len = Some(a.seq_list.clone());
    m.config.head_dim = Some(a.dim);
    m.config.key_fraction = Some(vec![a.kf]);
    m.config.dim_fraction = Some(vec![a.df]);
    m.config.seed = Some(a.seed);
    m.config.trials = Some(a.trials);
    m.config.warmup = Some(a.warmup);
    m.config.batch = Some(a.batch);
    m.resolved.k = records.iter().filter(|r| r.config.method == BenchMethod::Loki).map(|r| r.k).collect();
    m.resolved.d = records.iter().filter(|r| r.config.method == BenchMethod::Loki).map(|r| r.d).take(1).collect();
    m.write(&a.out.join("manifest.json"))
}
