//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p stormcast --test acceptance`.

use std::collections::{BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stormcast::config::{ModelKind, PipelineConfig};
use stormcast::stages;
use stormcast::store::hash_tree;
use stormcast_core::cells::{cluster_storm_objects, extract_storm_objects, DbzStats, PointRole, StormObject};
use stormcast_core::dataset::{DamageClass, Dataset, Sample, CLASS_COUNT, FEATURE_COUNT};
use stormcast_core::eval::{auc_ovr, f1_micro, split, ConfusionMatrix};
use stormcast_core::forest::{fit_forest, ForestModel, DEFAULT_TREES};
use stormcast_core::geo::Projection;
use stormcast_core::grid_io::ReflectivityGrid;
use stormcast_core::mlp::{evaluate, gradient_check, train_mlp, MlpModel, TrainConfig};
use stormcast_core::resample::smote;
use stormcast_core::synth::{generate_dataset_direct, generate_scenario, paper_priors, ScenarioConfig};
use stormcast_core::tracking::{forecast_path, horn_schunck_flow, FlowField, Tracker, FORECAST_STEPS};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scenario_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

// ---- clustering ----

fn obj(id: u32, x: f64, y: f64, area: f64) -> StormObject {
    StormObject {
        id,
        polygon: vec![(x, y), (x + 0.1, y), (x, y + 0.1), (x, y)],
        area_km2: area,
        centroid: (x, y),
        dbz_stats: DbzStats::default(),
    }
}

/// Quadratic DBSCAN over area-weighted neighborhoods. Border objects join
/// the nearest core, ties to the smaller core centroid (x, then y).
fn dbscan_reference(objs: &[StormObject], limit: f64, radius: f64) -> (Vec<PointRole>, BTreeSet<BTreeSet<u32>>) {
    let n = objs.len();
    let d2 = |i: usize, j: usize| {
        let (a, b) = (objs[i].centroid, objs[j].centroid);
        (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
    };
    let near = |i: usize, j: usize| d2(i, j).sqrt() <= radius;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| i == j || near(i, j)).map(|j| objs[j].area_km2).sum::<f64>() >= limit)
        .collect();
    let mut label = vec![usize::MAX; n];
    let mut clusters = 0;
    for s in 0..n {
        if !core[s] || label[s] != usize::MAX {
            continue;
        }
        label[s] = clusters;
        let mut queue = VecDeque::from([s]);
        while let Some(p) = queue.pop_front() {
            for q in 0..n {
                if core[q] && label[q] == usize::MAX && near(p, q) {
                    label[q] = clusters;
                    queue.push_back(q);
                }
            }
        }
        clusters += 1;
    }
    let mut roles = vec![PointRole::Noise; n];
    for i in 0..n {
        if core[i] {
            roles[i] = PointRole::Core;
            continue;
        }
        let best = (0..n).filter(|&j| core[j] && near(i, j)).min_by(|&a, &b| {
            let ka = (d2(i, a), objs[a].centroid.0, objs[a].centroid.1);
            let kb = (d2(i, b), objs[b].centroid.0, objs[b].centroid.1);
            ka.partial_cmp(&kb).expect("finite")
        });
        if let Some(b) = best {
            roles[i] = PointRole::Outlier;
            label[i] = label[b];
        }
    }
    let mut parts = vec![BTreeSet::new(); clusters];
    for i in 0..n {
        if label[i] != usize::MAX {
            parts[label[i]].insert(objs[i].id);
        }
    }
    (roles, parts.into_iter().collect())
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(0..=50);
        let extent = rng.random_range(5.0..25.0);
        let objs: Vec<StormObject> = (0..n)
            .map(|i| {
                obj(
                    i as u32,
                    rng.random_range(0.0..extent),
                    rng.random_range(0.0..extent),
                    rng.random_range(0.5..15.0),
                )
            })
            .collect();
        let got = cluster_storm_objects(&objs, 20.0, 2.0, 0, Projection::new(0.0, 0.0));
        let (roles, parts) = dbscan_reference(&objs, 20.0, 2.0);
        let got_parts: BTreeSet<BTreeSet<u32>> =
            got.cells.iter().map(|c| c.members.iter().copied().collect()).collect();
        let roles_ok = objs.iter().zip(&roles).all(|(o, r)| got.roles[&o.id] == *r);
        if !roles_ok || got_parts != parts {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatching sets out of 200"))
}

// ---- gradient check ----

/// Draws 20 small networks and batches. A draw whose hidden pre-activations
/// come within 100 steps of a ReLU kink is replaced, since the derivative is
/// undefined there.
fn gradient_check_criterion() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let (mut checked, mut redrawn) = (0, 0);
    while checked < 20 {
        let hidden = rng.random_range(1..=3);
        let mut sizes = vec![FEATURE_COUNT];
        sizes.extend((0..hidden).map(|_| rng.random_range(2..=10)));
        sizes.push(CLASS_COUNT);
        let model = MlpModel::new(&sizes, 0.0, rng.random()).map_err(|e| e.to_string())?;
        let batch = rng.random_range(1..=8);
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..FEATURE_COUNT).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..CLASS_COUNT)).collect();
        if model.kink_margin(&xs, None) < 100.0 * H {
            redrawn += 1;
            continue;
        }
        worst = worst.max(gradient_check(&model, &xs, &labels, None, H, 1e-7));
        checked += 1;
    }
    check(
        worst < 1e-6,
        format!("max relative error {worst:.3e} over {checked} configurations ({redrawn} kink draws replaced)"),
    )
}

// ---- metric identities ----

/// Mann-Whitney by counting every positive/negative pair, ties as half.
fn pairwise_auc(truth: &[DamageClass], scores: &[[f64; CLASS_COUNT]]) -> Option<f64> {
    let mut total = 0.0;
    let mut scored = 0;
    for k in 0..CLASS_COUNT {
        let pos: Vec<f64> = (0..truth.len()).filter(|&i| truth[i].index() == k).map(|i| scores[i][k]).collect();
        let neg: Vec<f64> = (0..truth.len()).filter(|&i| truth[i].index() != k).map(|i| scores[i][k]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                wins += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total += wins / (pos.len() * neg.len()) as f64;
        scored += 1;
    }
    (scored > 0).then(|| total / scored as f64)
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut f1_bad = 0;
    for _ in 0..1000 {
        let mut cm = ConfusionMatrix::default();
        for row in cm.counts.iter_mut() {
            for v in row.iter_mut() {
                *v = if rng.random_bool(0.3) { 0 } else { rng.random_range(0..5000) };
            }
        }
        cm.counts[0][0] += 1;
        let f1 = f1_micro(&cm).map_err(|e| e.to_string())?;
        if f1 != cm.trace() as f64 / cm.total() as f64 {
            f1_bad += 1;
        }
    }
    let mut auc_worst: f64 = 0.0;
    for fixture in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = if fixture % 2 == 0 { 5.0 } else { 1e6 };
        let truth: Vec<DamageClass> = (0..n).map(|_| DamageClass::ALL[rng.random_range(0..CLASS_COUNT)]).collect();
        let scores: Vec<[f64; CLASS_COUNT]> = (0..n)
            .map(|_| std::array::from_fn(|_| (rng.random::<f64>() * levels).floor() / levels))
            .collect();
        let Some(want) = pairwise_auc(&truth, &scores) else { continue };
        let got = auc_ovr(&truth, &scores).map_err(|e| e.to_string())?;
        auc_worst = auc_worst.max((got - want).abs());
    }
    check(
        f1_bad == 0 && auc_worst <= 1e-12,
        format!("{f1_bad}/1000 f1 mismatches, worst auc deviation {auc_worst:.1e} over 100 fixtures"),
    )
}

// ---- SMOTE ----

fn smote_balance() -> Outcome {
    let priors = paper_priors();
    let total = 20_000usize;
    let mut counts = priors.map(|p| (p * total as f64).floor() as usize);
    let short = total - counts.iter().sum::<usize>();
    counts[0] += short;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut samples = Vec::with_capacity(total);
    for (k, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let f = std::array::from_fn(|j| k as f64 * 3.0 + (j as f64) + rng.random_range(-1.0..1.0));
            samples.push(Sample::new(f, DamageClass::ALL[k]));
        }
    }
    let data = Dataset::new(samples);
    let out = smote(&data, 5, 3).map_err(|e| e.to_string())?;
    let after = out.data.class_counts();
    let balanced = after.iter().all(|&c| c == after[0]);
    let base = data.len();
    let mut contained = 0;
    for (p, s) in out.provenance.iter().zip(&out.data.samples[base..]) {
        let (a, b) = (&data.samples[p.base].features, &data.samples[p.neighbor].features);
        if (0..FEATURE_COUNT).all(|j| a[j].min(b[j]) <= s.features[j] && s.features[j] <= a[j].max(b[j])) {
            contained += 1;
        }
    }
    let synthetic = out.provenance.len();
    check(
        balanced && contained == synthetic && synthetic == out.data.len() - base,
        format!("{counts:?} -> {after:?}, {contained}/{synthetic} synthetic points inside their segment"),
    )
}

// ---- separable data ----

fn accuracy_forest(m: &ForestModel, d: &Dataset) -> Result<f64, String> {
    let xs: Vec<_> = d.samples.iter().map(|s| s.features).collect();
    let ps = m.predict_proba_batch(&xs).map_err(|e| e.to_string())?;
    let hits = ps
        .iter()
        .zip(&d.samples)
        .filter(|(p, s)| stormcast_core::forest::argmax(p) == s.label)
        .count();
    Ok(hits as f64 / d.len() as f64)
}

fn separable_sanity() -> Outcome {
    let start = Instant::now();
    let cfg = ScenarioConfig {
        seed: 8,
        priors: [0.25; CLASS_COUNT],
        overlap: 0.0,
        ..ScenarioConfig::default()
    };
    let data = generate_dataset_direct(&cfg, 5000);
    let (train, val) = split(&data, 0.75, 8).map_err(|e| e.to_string())?;
    let forest = fit_forest(&train, DEFAULT_TREES, 8).map_err(|e| e.to_string())?;
    let rfc_train = accuracy_forest(&forest, &train)?;
    let rfc_val = accuracy_forest(&forest, &val)?;
    let tc = TrainConfig {
        epochs: 200,
        seed: 8,
        ..TrainConfig::default()
    };
    let (mlp, _) = train_mlp(&train, Some(&val), &tc).map_err(|e| e.to_string())?;
    let (_, mlp_val) = evaluate(&mlp, &val);
    let secs = start.elapsed().as_secs_f64();
    check(
        rfc_train == 1.0 && rfc_val >= 0.99 && mlp_val >= 0.97 && secs < 300.0,
        format!(
            "rfc train {:.2}% val {:.2}%, mlp val {:.2}% after 200 epochs, {secs:.1} s",
            rfc_train * 100.0,
            rfc_val * 100.0,
            mlp_val * 100.0
        ),
    )
}

// ---- end to end ----

fn pipeline(store: &Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        store_dir: store.to_path_buf(),
        seed: Some(seed),
        ..PipelineConfig::default()
    }
}

fn run_chain(cfg: &PipelineConfig, scenario: &Path, through_report: bool) -> Result<(), String> {
    let err = |e: anyhow::Error| format!("{e:#}");
    stages::synth(cfg, Some(scenario)).map_err(err)?;
    stages::detect(cfg).map_err(err)?;
    stages::track(cfg).map_err(err)?;
    stages::featurize(cfg).map_err(err)?;
    stages::train(cfg).map_err(err)?;
    stages::evaluate(cfg).map_err(err)?;
    if through_report {
        stages::predict(cfg, None, None).map_err(err)?;
        stages::report(cfg).map_err(err)?;
    }
    Ok(())
}

fn imbalanced_end_to_end(store: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = pipeline(store, 11);
    run_chain(&cfg, &scenario_file("imbalanced.txt"), false)?;
    let text = std::fs::read_to_string(store.join(stages::CONFUSION_FILE)).map_err(|e| e.to_string())?;
    let cm = ConfusionMatrix::from_csv(&text).map_err(|e| e.to_string())?;
    let recall = cm.per_class_accuracy();
    let secs = start.elapsed().as_secs_f64();
    let (r0, r3) = (recall[0].unwrap_or(0.0), recall[3].unwrap_or(0.0));
    check(
        r0 >= 0.95 && r3 >= 0.70 && secs < 900.0,
        format!(
            "class-0 recall {:.1}%, class-3 recall {:.1}% ({} class-3 validation samples), {secs:.0} s",
            r0 * 100.0,
            r3 * 100.0,
            cm.support(3)
        ),
    )
}

// ---- throughput ----

/// Times batch classification of 221 506 pipeline feature vectors with the
/// end-to-end forest, reusing the featurized cells cyclically.
fn throughput(store: &Path) -> Outcome {
    const N: usize = 221_506;
    let cfg = pipeline(store, 11);
    let bytes = std::fs::read(cfg.model_path()).map_err(|e| format!("no trained forest: {e}"))?;
    let model = ForestModel::read_from(bytes.as_slice()).map_err(|e| e.to_string())?;
    let data = Dataset::load(store.join(stages::FEATURES_FILE)).map_err(|e| e.to_string())?;
    let xs: Vec<[f64; FEATURE_COUNT]> = (0..N).map(|i| data.samples[i % data.len()].features).collect();
    let start = Instant::now();
    let out = model.predict_proba_batch(&xs).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    check(
        out.len() == N && model.n_trees() == DEFAULT_TREES && secs <= 5.0,
        format!(
            "{N} samples, {} trees, {secs:.2} s ({:.0} samples/s) on {cores} core(s)",
            model.n_trees(),
            N as f64 / secs
        ),
    )
}

// ---- tracking ----

fn gaussian(rows: usize, cols: usize, cx: f64, cy: f64, sigma: f64, peak: f64) -> ReflectivityGrid {
    let values = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            (peak * (-((c - cx).powi(2) + (r - cy).powi(2)) / (2.0 * sigma * sigma)).exp()) as f32
        })
        .collect();
    ReflectivityGrid::new(0, rows, cols, 1.0, 0.0, 0.0, values).expect("valid grid")
}

fn tracking_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let values: Vec<f32> = (0..40 * 40).map(|_| rng.random_range(0.0..60.0)).collect();
    let frame = ReflectivityGrid::new(0, 40, 40, 1.0, 0.0, 0.0, values).expect("valid grid");
    let still = horn_schunck_flow(&frame, &frame, 1.0, 100).map_err(|e| e.to_string())?;
    let zero = still.u.iter().chain(&still.v).all(|&x| x == 0.0);

    // One column east, then one row south (which is -y).
    let prev = gaussian(48, 48, 23.0, 24.0, 5.0, 50.0);
    let mut shift_err: f64 = 0.0;
    for (next, want) in [
        (gaussian(48, 48, 24.0, 24.0, 5.0, 50.0), (1.0, 0.0)),
        (gaussian(48, 48, 23.0, 25.0, 5.0, 50.0), (0.0, -1.0)),
    ] {
        let f = horn_schunck_flow(&prev, &next, 1.0, 100).map_err(|e| e.to_string())?;
        let support: Vec<usize> = (0..prev.values().len()).filter(|&i| prev.values()[i] >= 5.0).collect();
        let n = support.len() as f64;
        let mu = support.iter().map(|&i| f.u[i]).sum::<f64>() / n;
        let mv = support.iter().map(|&i| f.v[i]).sum::<f64>() / n;
        shift_err = shift_err.max((mu - want.0).abs()).max((mv - want.1).abs());
    }

    let scenario = ScenarioConfig {
        seed: 21,
        rows: 64,
        cols: 64,
        n_frames: 12,
        storm_count: 20,
        ..ScenarioConfig::default()
    };
    let frames = generate_scenario(&scenario).map_err(|e| e.to_string())?.frames;
    let mut tracker = Tracker::new(10.0);
    let mut flow = FlowField::zeros(64, 64, 1.0);
    let mut prev: Option<&ReflectivityGrid> = None;
    for g in frames.frames() {
        let objs = extract_storm_objects(g, 35.0);
        let cells = cluster_storm_objects(&objs, 20.0, 2.0, g.timestamp(), g.projection()).cells;
        if let Some(p) = prev {
            flow = horn_schunck_flow(p, g, 1.0, 100).map_err(|e| e.to_string())?;
        }
        tracker.step(&cells, prev.map(|_| &flow));
        prev = Some(g);
    }
    let tracks = tracker.into_tracks();
    let lengths: BTreeSet<usize> = tracks.iter().map(|t| forecast_path(t, &flow).positions.len()).collect();
    let all_24 = !tracks.is_empty() && lengths.iter().all(|&l| l == FORECAST_STEPS && l == 24);
    check(
        zero && shift_err <= 0.2 && all_24,
        format!(
            "zero-motion flow identically zero: {zero}, worst mean-flow error {shift_err:.3} cells, {} forecasts with lengths {lengths:?}",
            tracks.len()
        ),
    )
}

// ---- determinism ----

fn determinism(root: &Path) -> Outcome {
    let small = scenario_file("small.txt");
    let mut digests = Vec::new();
    for run in 0..2 {
        let store = root.join(format!("run{run}"));
        let mut cfg = pipeline(&store, 5);
        run_chain(&cfg, &small, true)?;
        cfg.model = ModelKind::Mlp;
        cfg.epochs = 20;
        let err = |e: anyhow::Error| format!("{e:#}");
        stages::train(&cfg).map_err(err)?;
        stages::evaluate(&cfg).map_err(err)?;
        stages::report(&cfg).map_err(err)?;
        digests.push(hash_tree(&store).map_err(|e| e.to_string())?);
    }
    let differing: Vec<&String> = digests[0]
        .iter()
        .filter(|(k, v)| digests[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    check(
        differing.is_empty() && digests[0].len() == digests[1].len(),
        format!("{} files hashed per run, {} differ {:?}", digests[0].len(), differing.len(), differing),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let e2e = tmp.path().join("e2e");
    let e2e_for_throughput = e2e.clone();
    let criteria: Vec<Criterion> = vec![
        ("clustering matches brute-force DBSCAN", Box::new(clustering_oracle)),
        ("MLP gradient check", Box::new(gradient_check_criterion)),
        ("f1_micro and AUC identities", Box::new(metric_identities)),
        ("SMOTE balance and containment", Box::new(smote_balance)),
        ("separable-data sanity", Box::new(separable_sanity)),
        ("imbalanced end-to-end recall", Box::new(move || imbalanced_end_to_end(&e2e))),
        ("batch classification throughput", Box::new(move || throughput(&e2e_for_throughput))),
        ("tracking flow and forecasts", Box::new(tracking_criterion)),
        ("stage determinism", Box::new({
            let root = tmp.path().join("det");
            move || determinism(&root)
        })),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
