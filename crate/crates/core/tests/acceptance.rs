//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use circuit_dynamics::analysis::{analyze_group, AnalysisConfig};
use circuit_dynamics::dynamics::{
    iou, markov_matrix, per_layer_switches, switch_counts, RoleTrajectory, SwitchFilter,
};
use circuit_dynamics::ingest::GroupFilter;
use circuit_dynamics::model::{ActivationRecord, ComponentId, FactEntry, Group, Relation, Role, SnapshotId, Span};
use circuit_dynamics::probing::{
    topk_accuracy, validate_fact, Candidate, FactValidity, LogitSnapshot, RejectReason, CANDIDATE_DEPTH,
};
use circuit_dynamics::roles::{assign_roles, general_score, score_snapshot, RoleScores, Thresholds};
use circuit_dynamics::store::CircuitStore;
use circuit_dynamics::synth::{generate_synthetic, SyntheticConfig};
use circuit_dynamics::tracer::{forward_trace, prune_routes, EdgeId, NodeId, ToyModelConfig, TraceGraph};

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

// ---------------------------------------------------------------------------
// Role partition

fn random_scores(rng: &mut ChaCha8Rng, n: usize, theta: f64) -> BTreeMap<ComponentId, RoleScores> {
    // Values are drawn from a small grid that includes theta itself so the
    // strict comparison is exercised.
    let grid = [0.0, theta / 2.0, theta, (theta + 1.0) / 2.0, 1.0];
    let pick = |rng: &mut ChaCha8Rng| grid[rng.random_range(0..grid.len())];
    (0..n)
        .map(|i| {
            let c = if i % 8 == 7 {
                ComponentId::ffn(i as u32)
            } else {
                ComponentId::head(i as u32 / 8, i as u32 % 8)
            };
            let mut s = RoleScores {
                general: pick(rng),
                entity: pick(rng),
                ..RoleScores::default()
            };
            for r in 0..rng.random_range(0..3) {
                s.relation_answer.insert(format!("r{r}"), pick(rng));
            }
            for f in 0..rng.random_range(0..4) {
                s.fact_answer.insert(format!("f{f}"), pick(rng));
            }
            (c, s)
        })
        .collect()
}

fn role_partition_oracle() -> Result<(), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for table in 0..1000 {
        let n = rng.random_range(1..=64);
        let theta = [0.1, 0.25, 0.5, 0.9][rng.random_range(0..4)];
        let thresholds = Thresholds {
            head: theta,
            ffn: if table % 2 == 0 { theta } else { 0.9 },
        };
        let scores = random_scores(&mut rng, n, theta);
        let universe: BTreeSet<ComponentId> = scores.keys().copied().collect();
        let sets = assign_roles(&scores, &thresholds, &universe);

        // Literal application of the definitions.
        let j = |pred: &dyn Fn(&RoleScores, f64) -> bool| -> BTreeSet<ComponentId> {
            scores
                .iter()
                .filter(|(c, s)| pred(s, thresholds.for_component(**c)))
                .map(|(c, _)| *c)
                .collect()
        };
        let jg = j(&|s, t| s.general > t);
        let je = j(&|s, t| s.entity > t);
        let jr = j(&|s, t| s.relation_answer.values().any(|&v| v > t));
        let jf = j(&|s, t| s.fact_answer.values().any(|&v| v > t));
        let minus = |a: &BTreeSet<ComponentId>, b: &BTreeSet<ComponentId>| -> BTreeSet<ComponentId> {
            a.difference(b).copied().collect()
        };
        let union = |a: &BTreeSet<ComponentId>, b: &BTreeSet<ComponentId>| -> BTreeSet<ComponentId> {
            a.union(b).copied().collect()
        };
        let hg = jg.clone();
        let he = minus(&je, &jg);
        let g_e = union(&jg, &je);
        let hr = minus(&jr, &g_e);
        let g_e_r = union(&g_e, &jr);
        let hf = minus(&jf, &g_e_r);
        let hd = minus(&universe, &union(&g_e_r, &jf));

        let expected = [&hg, &he, &hr, &hf, &hd];
        for (role, want) in Role::ALL.iter().zip(expected) {
            ensure(sets.proper(*role) == want, || {
                format!("table {table}: {role:?} mismatch: got {:?}, want {want:?}", sets.proper(*role))
            })?;
        }
        let mut seen = BTreeSet::new();
        for role in Role::ALL {
            for c in sets.proper(role) {
                ensure(seen.insert(*c), || format!("table {table}: {c} in two proper sets"))?;
            }
        }
        ensure(seen == universe, || format!("table {table}: proper sets do not cover the universe"))?;
    }
    within(start, Duration::from_secs(10))
}

// ---------------------------------------------------------------------------
// Averaging order

fn fact(id: &str, n: usize, subject: (usize, usize), answer: (usize, usize)) -> FactEntry {
    FactEntry {
        fact_id: id.into(),
        relation_id: String::new(),
        group: None,
        subtokens: (0..n).map(|i| format!("{id}_{i}")).collect(),
        subject_span: Span::new(subject.0, subject.1),
        answer_span: Span::new(answer.0, answer.1),
        gold_answer: format!("{id}_{}", answer.0),
        final_period_index: None,
    }
}

fn relation(id: &str, group: Group, facts: Vec<FactEntry>) -> Relation {
    let mut r = Relation {
        relation_id: id.into(),
        group,
        template: "{subject} x".into(),
        candidate_templates: Vec::new(),
        facts,
    };
    r.link_facts();
    r
}

fn averaging_order() -> Result<(), String> {
    // Relation A has one fact where the component never fires; relation B has
    // three facts where it fires everywhere. Micro = 3/4, macro = 1/2.
    let c = ComponentId::head(0, 0);
    let relations = vec![
        relation("a", Group::Loc, vec![fact("a0", 4, (0, 1), (2, 3))]),
        relation(
            "b",
            Group::Loc,
            (0..3).map(|i| fact(&format!("b{i}"), 4, (0, 1), (2, 3))).collect(),
        ),
    ];
    let store: CircuitStore = (0..3)
        .flat_map(|i| {
            (0..4).map(move |pos| ActivationRecord {
                snapshot: SnapshotId::Main,
                fact_id: format!("b{i}"),
                token_pos: pos,
                active_components: BTreeSet::from([c]),
            })
        })
        .collect();
    let reference = general_score(&store, SnapshotId::Main, c, &relations).map_err(|e| e.to_string())?;
    let fast = score_snapshot(&store, SnapshotId::Main, &relations, &BTreeSet::from([c]))
        .map_err(|e| e.to_string())?
        .scores[&c]
        .general;
    ensure(reference == 0.75, || format!("reference general score {reference}, want 0.75"))?;
    ensure(fast == 0.75, || format!("fast-path general score {fast}, want 0.75"))
}

// ---------------------------------------------------------------------------
// IoU

fn iou_properties() -> Result<(), String> {
    let abc: BTreeSet<char> = "abc".chars().collect();
    let bcd: BTreeSet<char> = "bcd".chars().collect();
    ensure(iou(&abc, &bcd) == 0.5, || format!("iou(abc, bcd) = {}", iou(&abc, &bcd)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let mut set = || -> BTreeSet<u8> { (0..rng.random_range(0..12)).map(|_| rng.random_range(0..16)).collect() };
        let (a, b) = (set(), set());
        let ab = iou(&a, &b);
        ensure(ab == iou(&b, &a), || format!("asymmetric on {a:?} {b:?}"))?;
        ensure((0.0..=1.0).contains(&ab), || format!("out of bounds: {ab}"))?;
        ensure(iou(&a, &a) == 1.0, || format!("iou(a, a) != 1 for {a:?}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Markov

fn snapshots(n: usize) -> Vec<SnapshotId> {
    (1..n as u32).map(SnapshotId::Numbered).chain([SnapshotId::Main]).collect()
}

fn trajectory(c: ComponentId, roles: &[Role]) -> RoleTrajectory {
    RoleTrajectory::new(c, snapshots(roles.len()).into_iter().zip(roles.iter().copied()).collect()).unwrap()
}

fn random_trajectories(rng: &mut ChaCha8Rng, layers: u32, heads: u32, n: usize) -> Vec<RoleTrajectory> {
    (0..layers)
        .flat_map(|l| (0..heads).map(move |h| ComponentId::head(l, h)))
        .map(|c| {
            let roles: Vec<Role> = (0..n).map(|_| Role::ALL[rng.random_range(0..5)]).collect();
            trajectory(c, &roles)
        })
        .collect()
}

fn markov_correctness() -> Result<(), String> {
    use Role::{Deactivated as D, General as G};
    let ts = vec![
        trajectory(ComponentId::head(0, 0), &[G, G, D, D]),
        trajectory(ComponentId::head(0, 1), &[G, D, D, D]),
    ];
    let m = markov_matrix(&ts).map_err(|e| e.to_string())?;
    ensure(m.probability(G, G) == Some(1.0 / 3.0), || format!("P(g->g) = {:?}", m.probability(G, G)))?;
    ensure(m.probability(G, D) == Some(2.0 / 3.0), || format!("P(g->d) = {:?}", m.probability(G, D)))?;
    ensure(m.probability(D, D) == Some(1.0), || format!("P(d->d) = {:?}", m.probability(D, D)))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let layers = rng.random_range(1..5);
        let heads = rng.random_range(1..6);
        let n = rng.random_range(2..12);
        let ts = random_trajectories(&mut rng, layers, heads, n);
        let m = markov_matrix(&ts).map_err(|e| e.to_string())?;
        let want = u64::from(layers * heads) * (n as u64 - 1);
        ensure(m.total() == want, || format!("total {} != {want}", m.total()))?;
        for row in m.probabilities().iter().flatten() {
            let s: f64 = row.iter().sum();
            ensure((s - 1.0).abs() <= 1e-9, || format!("row sums to {s}"))?;
        }
    }
    Ok(())
}

fn switch_markov_consistency() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let layers = rng.random_range(1..5);
        let n = rng.random_range(2..10);
        let heads = rng.random_range(1..6);
        let ts = random_trajectories(&mut rng, layers, heads, n);
        let all = snapshots(n);
        let mut selected: Vec<SnapshotId> = all.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        if selected.len() < 2 {
            selected = vec![all[0], *all.last().unwrap()];
        }
        let restricted: Vec<RoleTrajectory> = ts
            .iter()
            .map(|t| {
                let roles = selected.iter().map(|&s| (s, t.role_at(s).unwrap())).collect();
                RoleTrajectory::new(t.component, roles).unwrap()
            })
            .collect();
        let sw = switch_counts(&ts, &selected).map_err(|e| e.to_string())?;
        let mk = markov_matrix(&restricted).map_err(|e| e.to_string())?;
        for a in Role::ALL {
            for b in Role::ALL {
                let want = if a == b { 0 } else { mk.count(a, b) };
                ensure(sw.count(a, b) == want, || {
                    format!("{a:?}->{b:?}: switches {} vs markov {}", sw.count(a, b), mk.count(a, b))
                })?;
            }
        }
        let per_layer =
            per_layer_switches(&ts, &selected, layers, &SwitchFilter::default()).map_err(|e| e.to_string())?;
        let layer_total: u64 = per_layer.values().sum();
        ensure(layer_total == sw.off_diagonal_total(), || {
            format!("per-layer total {layer_total} != global {}", sw.off_diagonal_total())
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tracer

fn random_config(rng: &mut ChaCha8Rng, max_layers: usize, max_heads: usize) -> ToyModelConfig {
    let heads = rng.random_range(1..=max_heads);
    ToyModelConfig {
        num_layers: rng.random_range(1..=max_layers),
        num_heads: heads,
        d_model: heads * rng.random_range(2..=4),
        d_ff: rng.random_range(2..=8),
        vocab_size: 16,
        weight_seed: rng.random(),
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<usize> {
    (0..rng.random_range(1..=max_len)).map(|_| rng.random_range(0..16)).collect()
}

/// Every backward path from the root whose edges all exceed `theta`,
/// enumerated explicitly; returns the union of their nodes and edges.
fn path_oracle(g: &TraceGraph, theta: f64) -> (BTreeSet<NodeId>, BTreeSet<EdgeId>) {
    fn walk(
        g: &TraceGraph,
        node: NodeId,
        theta: f64,
        path: &mut Vec<EdgeId>,
        nodes: &mut BTreeSet<NodeId>,
        edges: &mut BTreeSet<EdgeId>,
    ) {
        nodes.insert(node);
        edges.extend(path.iter().copied());
        for &e in g.incoming(node) {
            if g.edges()[e].importance > theta {
                path.push(e);
                walk(g, g.edges()[e].source, theta, path, nodes, edges);
                path.pop();
            }
        }
    }
    let (mut nodes, mut edges) = (BTreeSet::new(), BTreeSet::new());
    walk(g, g.final_node(), theta, &mut Vec::new(), &mut nodes, &mut edges);
    (nodes, edges)
}

fn tracer_conservation_and_pruning() -> Result<(), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..100 {
        let cfg = random_config(&mut rng, 4, 4);
        let tokens = random_tokens(&mut rng, 6);
        let g = forward_trace(&cfg, &tokens).map_err(|e| e.to_string())?;
        for (node, s) in g.residual_importance_sums() {
            ensure((s - 1.0).abs() <= 1e-6, || format!("config {i}: node {node} sums to {s}"))?;
        }
        let thetas = [0.0, 0.01, 0.04, 0.1, 0.2, 0.5];
        let routes: Vec<_> = thetas.iter().map(|&t| prune_routes(&g, t).unwrap()).collect();
        for w in routes.windows(2) {
            ensure(w[1].nodes().is_subset(w[0].nodes()) && w[1].edges().is_subset(w[0].edges()), || {
                format!("config {i}: route at theta {} not inside route at {}", w[1].theta(), w[0].theta())
            })?;
        }
    }
    for i in 0..200 {
        let cfg = random_config(&mut rng, 3, 2);
        let tokens = random_tokens(&mut rng, 4);
        let g = forward_trace(&cfg, &tokens).map_err(|e| e.to_string())?;
        let theta = [0.0, 0.02, 0.04, 0.08, 0.15][i % 5];
        let route = prune_routes(&g, theta).map_err(|e| e.to_string())?;
        let (nodes, edges) = path_oracle(&g, theta);
        ensure(route.nodes() == &nodes && route.edges() == &edges, || {
            format!("graph {i}: pruned route differs from path enumeration at theta {theta}")
        })?;
    }
    within(start, Duration::from_secs(60))
}

// ---------------------------------------------------------------------------
// Probing

fn logits_for(gold: &str, gold_rank: usize, p_gold: f64, p_runner: f64) -> LogitSnapshot {
    let mut cands = Vec::new();
    let mut p = p_runner;
    for rank in 1..=CANDIDATE_DEPTH {
        if rank == gold_rank {
            cands.push(Candidate::new(gold, p_gold));
        } else {
            cands.push(Candidate::new(format!("alt{rank}"), p));
            p *= 0.5;
        }
    }
    if gold_rank != 1 {
        cands.sort_by(|a, b| b.prob.total_cmp(&a.prob));
    }
    LogitSnapshot::from_candidates(SnapshotId::Main, "f", cands, gold, p_gold)
}

fn probing_thresholds() -> Result<(), String> {
    let f = fact("f", 4, (0, 1), (2, 3));
    let gold = f.gold_first_token().to_string();
    let cases = [
        (logits_for(&gold, 1, 0.80, 0.05), FactValidity::Reliable),
        (
            logits_for(&gold, 1, 0.75, 0.05),
            FactValidity::Rejected(RejectReason::Top1Margin),
        ),
        (
            logits_for(&gold, 2, 0.05, 0.80),
            FactValidity::Rejected(RejectReason::WrongTop1),
        ),
    ];
    for (l, want) in &cases {
        let got = validate_fact(&f, l);
        ensure(got == *want, || {
            format!("gold {} runner-up {}: got {got:?}, want {want:?}", l.gold_first_token_prob, l.runner_up_prob)
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..500 {
        let n = rng.random_range(1..20);
        let facts: Vec<FactEntry> = (0..n).map(|j| fact(&format!("q{j}"), 4, (0, 1), (2, 3))).collect();
        let logits: Vec<LogitSnapshot> = facts
            .iter()
            .map(|f| {
                let mut probs: Vec<f64> = (0..CANDIDATE_DEPTH).map(|_| rng.random::<f64>()).collect();
                probs.sort_by(|a, b| b.total_cmp(a));
                let gold_rank = rng.random_range(1..=CANDIDATE_DEPTH + 3);
                let cands = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let tok = if k + 1 == gold_rank {
                            f.gold_first_token().to_string()
                        } else {
                            format!("z{k}")
                        };
                        Candidate::new(tok, p)
                    })
                    .collect();
                LogitSnapshot::from_candidates(SnapshotId::Main, f.fact_id.clone(), cands, f.gold_first_token(), 0.0)
            })
            .collect();
        let refs: Vec<&FactEntry> = facts.iter().collect();
        let mut prev = 0.0;
        for k in 1..=CANDIDATE_DEPTH {
            let acc = topk_accuracy(k, SnapshotId::Main, &refs, &logits).map_err(|e| e.to_string())?;
            ensure(acc >= prev, || format!("fixture {i}: top-{k} accuracy {acc} < top-{} {prev}", k - 1))?;
            prev = acc;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic reproduction

fn synthetic_reproduction() -> Result<(), String> {
    let start = Instant::now();
    let cfg = SyntheticConfig {
        seed: 7,
        ..SyntheticConfig::default()
    };
    ensure(cfg.num_layers * cfg.num_heads == 200 && cfg.num_snapshots == 10, || {
        "default synthetic geometry is not 200 heads x 10 snapshots".into()
    })?;
    ensure(cfg.head_stability[Role::General.index()] == 0.95, || "general stability is not 0.95".into())?;
    ensure(cfg.head_stability[Role::FactAnswer.index()] == 0.5, || "fact-answer stability is not 0.5".into())?;
    ensure(cfg.thresholds.ffn == 0.90, || "FFN threshold is not 0.90".into())?;
    let data = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let a = analyze_group(&data.dataset, GroupFilter::All, &AnalysisConfig::default()).map_err(|e| e.to_string())?;

    let general = &a.heads.iou[&Role::General];
    let fact_answer = &a.heads.iou[&Role::FactAnswer];
    for (g, f) in general.iter().zip(fact_answer) {
        ensure(g.iou >= f.iou, || {
            format!("at {}: IoU(general) {} < IoU(fact-answer) {}", g.snapshot, g.iou, f.iou)
        })?;
    }
    let p = a
        .heads
        .markov
        .probability(Role::General, Role::General)
        .ok_or("no general transitions observed")?;
    ensure((p - 0.95).abs() <= 0.05, || format!("P(g->g) = {p}, want 0.95 +- 0.05"))?;
    let heads = a.heads.switches.off_diagonal_total();
    let ffns = a.ffns.switches.off_diagonal_total();
    ensure(ffns < heads, || format!("FFN switches {ffns} not below head switches {heads}"))?;
    within(start, Duration::from_secs(120))
}

// ---------------------------------------------------------------------------
// End-to-end determinism

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_all_determinism() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_circdyn"))
            .args(["run-all", "--seed", "7", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("run-all failed: {}", String::from_utf8_lossy(&status.stderr))
        })?;
        trees.push(read_tree(&out.join("report")));
    }
    ensure(!trees[0].is_empty(), || "report directory is empty".into())?;
    ensure(trees[0] == trees[1], || "report directories differ between runs".into())
}

fn main() -> ExitCode {
    let suite_start = Instant::now();
    let checks: [(&str, Check); 9] = [
        ("role partition oracle (1000 tables, < 10 s)", role_partition_oracle),
        ("micro-averaged general score = 0.75", averaging_order),
        ("IoU symmetry, bounds, identity, abc/bcd = 0.5", iou_properties),
        ("Markov hand fixture, row sums, total counts", markov_correctness),
        ("switch/Markov consistency and per-layer conservation", switch_markov_consistency),
        ("tracer conservation, monotone pruning, path oracle (< 60 s)", tracer_conservation_and_pruning),
        ("probing thresholds and monotone top-k", probing_thresholds),
        ("synthetic qualitative reproduction (< 2 min)", synthetic_reproduction),
        ("run-all --seed 7 byte-identical", run_all_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(()) => println!("PASS  {name}  [{:.2?}]", t.elapsed()),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}  [{:.2?}]: {msg}", t.elapsed());
            }
        }
    }
    let total = suite_start.elapsed();
    if total < Duration::from_secs(300) {
        println!("PASS  full suite under 5 minutes  [{total:.2?}]");
    } else {
        failed += 1;
        println!("FAIL  full suite under 5 minutes  [{total:.2?}]");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
