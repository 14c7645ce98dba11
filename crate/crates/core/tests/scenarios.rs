//! End-to-end runs checked against independent recomputations.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;
use trustchain::audit::{verify_chain, Failure};
use trustchain::chain::Transaction;
use trustchain::net_sim::{host_traffic, TrafficModel};
use trustchain::report::report;
use trustchain::rng::{self, Purpose};
use trustchain::scenario::Simulation;
use trustchain::{NodeId, ScenarioConfig};

fn bundled(name: &str) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    ScenarioConfig::load(&path).unwrap()
}

fn config(v: serde_json::Value) -> ScenarioConfig {
    ScenarioConfig::parse(&v.to_string()).unwrap()
}

fn small(nodes: serde_json::Value, hosts: serde_json::Value, rounds: u64) -> ScenarioConfig {
    config(json!({
        "schema_version": 1,
        "name": "t",
        "rounds": rounds,
        "rng_seed": 11,
        "trust": { "lambda": 0.9, "phi": 1, "theta": 0.8, "tau": 0.5, "zeta": 0.3, "interval_len": 50 },
        "consensus": { "d_cred": 1, "d_stake": 1, "r_bits": 16, "q_max": 10, "t_cap": 20 },
        "network": { "drop_prob": 0.0, "delay_rounds": 0, "challenge_prob": 1.0 },
        "hosts": hosts,
        "nodes": nodes
    }))
}

#[test]
fn baseline_recall_for_likely_malicious_hosts_by_round_30() {
    let sim = Simulation::run(&bundled("baseline_honest.json"), false);
    let full: Vec<u64> = sim
        .host_class_rows()
        .iter()
        .filter(|h| h.p_mal == 0.9)
        .filter(|h| h.monitored_pairs > 0 && h.blacklisted_pairs == h.monitored_pairs)
        .map(|h| h.round)
        .collect();
    let first = *full
        .first()
        .expect("p_mal 0.9 hosts never fully blacklisted");
    assert!(first <= 30, "first full recall at round {first}");
    assert!(
        (first..=30).all(|r| full.contains(&r)),
        "recall dropped again before round 30"
    );
    // Frozen from the reference run.
    assert_eq!(first, 10);
}

#[test]
fn single_member_adopts_its_own_scores() {
    let cfg = small(
        json!([{ "host_count": 2, "false_positive": 0.1, "false_negative": 0.1, "know_prob": 1.0 }]),
        json!([{ "p_mal": 0.2 }, { "p_mal": 0.9 }]),
        40,
    );
    let mut sim = Simulation::new(&cfg, false);
    let t = cfg.trust;
    let ident = &sim.roster()[0].clone();
    let mut oracle: Vec<(f64, rng::StreamRng, TrafficModel)> = ident
        .hosts
        .iter()
        .map(|h| {
            let model = TrafficModel {
                p_mal: cfg.hosts[*h].p_mal,
                false_positive: ident.false_positive,
                false_negative: ident.false_negative,
            };
            (
                t.tau,
                rng::stream(cfg.rng_seed, Purpose::Traffic, 0, *h as u32),
                model,
            )
        })
        .collect();
    for _ in 0..cfg.rounds {
        sim.step();
        for (tr, rng, model) in &mut oracle {
            if *tr > t.zeta {
                let (k, n) = host_traffic(model, t.interval_len, rng);
                let inst = (1.0 + k as f64) / (2.0 + n as f64);
                *tr = t.lambda * *tr + (1.0 - t.lambda) * inst;
            }
        }
        let got: Vec<f64> = sim
            .node(NodeId(0))
            .host_states()
            .map(|(_, s)| s.tr_ids)
            .collect();
        let want: Vec<f64> = oracle.iter().map(|o| o.0).collect();
        assert_eq!(got, want, "round {}", sim.round());
    }
    let blocks: Vec<_> = sim.store().iter().skip(1).collect();
    assert!(!blocks.is_empty());
    assert!(blocks.iter().all(|v| v.weight.avg_cred == 1.0));
    let e = &sim.node(NodeId(0)).stats.election;
    assert_eq!(e.samples, cfg.rounds);
    assert_eq!(e.mean(e.avg_cred), 1.0);
}

#[test]
fn two_members_on_one_benign_host_agree() {
    let cfg = small(
        json!([{ "count": 2, "hosts": [0], "false_positive": 0.0, "false_negative": 0.0, "know_prob": 1.0 }]),
        json!([{ "p_mal": 0.0 }]),
        50,
    );
    let sim = Simulation::run(&cfg, false);
    let tr = |i| sim.node(NodeId(i)).host_states().next().unwrap().1.tr_ids;
    assert!((tr(0) - tr(1)).abs() <= 1e-6, "{} vs {}", tr(0), tr(1));
    assert!((tr(0) - 51.0 / 52.0).abs() < 0.01);
    assert!(sim.node(NodeId(0)).credibility_of(NodeId(1)).unwrap() >= cfg.trust.theta);
}

/// Latest committed credibility per observer by scanning the whole prefix.
fn replay(prefix: &[&Transaction], target: NodeId) -> BTreeMap<NodeId, f64> {
    let mut latest: BTreeMap<NodeId, &Transaction> = BTreeMap::new();
    for tx in prefix {
        latest.insert(tx.ids_id, tx);
    }
    latest
        .into_iter()
        .filter(|(obs, _)| *obs != target)
        .filter_map(|(obs, tx)| {
            tx.peers
                .iter()
                .position(|p| *p == target)
                .map(|i| (obs, tx.creds[i]))
        })
        .collect()
}

#[test]
fn committed_credibility_matches_full_replay() {
    let cfg = bundled("baseline_honest.json");
    let sim = Simulation::run(&cfg, false);
    let chain = sim.chain_of(sim.reference());
    assert!(chain.len() > 20);
    let n = sim.roster().len() as f64;
    for h in 1..chain.len() {
        let parent = sim.store().get(&chain[h - 1].hash()).unwrap();
        let txs: Vec<&Transaction> = chain[1..h].iter().flat_map(|b| &b.transactions).collect();
        for ident in sim.roster() {
            assert_eq!(
                parent.state.credibility_of(ident.id),
                replay(&txs, ident.id),
                "height {h}"
            );
        }
        let leader = chain[h].header.leader_id;
        let reports = replay(&txs, leader);
        let others: f64 = sim
            .roster()
            .iter()
            .filter(|i| i.id != leader)
            .map(|i| reports.get(&i.id).copied().unwrap_or(cfg.trust.tau))
            .sum();
        let stored = sim.store().get(&chain[h].hash()).unwrap().weight.avg_cred;
        assert!((stored - (1.0 + others) / n).abs() < 1e-12, "height {h}");
    }
}

#[test]
fn one_edited_hex_digit_fails_at_that_block() {
    let cfg = bundled("baseline_honest.json");
    let export = Simulation::run(&cfg, false).chain_export();
    assert!(verify_chain(&export, &cfg).ok());
    let lines: Vec<&str> = export.lines().collect();
    for target in [1, lines.len() / 2, lines.len() - 1] {
        let line = lines[target];
        let start = line.find("\"bytes\":\"").unwrap() + 9;
        let end = line.len() - 2;
        for pos in (start..end).step_by(97) {
            let old = line.as_bytes()[pos];
            let new = if old == b'0' { '1' } else { '0' };
            let mut edited = line.to_string();
            edited.replace_range(pos..pos + 1, &new.to_string());
            let mut all = lines.clone();
            all[target] = &edited;
            let r = verify_chain(&(all.join("\n") + "\n"), &cfg);
            let (at, why) = r.failure.expect("edit went unnoticed");
            assert_eq!(at, target, "{why}");
            assert_eq!(r.verified, target);
        }
    }
    // Reordering two blocks breaks linkage.
    let mut swapped = lines.clone();
    swapped.swap(3, 4);
    let r = verify_chain(&(swapped.join("\n") + "\n"), &cfg);
    assert!(matches!(
        r.failure,
        Some((3, Failure::FieldMismatch("index")))
    ));
}

fn reference_spearman(csv_path: &Path) -> f64 {
    let mut r = csv::Reader::from_path(csv_path).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (c_class, c_led, c_weight) = (col("class"), col("blocks_led"), col("mean_weight"));
    let mut led = vec![];
    let mut weight = vec![];
    for row in r.records() {
        let row = row.unwrap();
        if &row[c_class] == "sybil" {
            continue;
        }
        led.push(row[c_led].parse::<f64>().unwrap());
        weight.push(row[c_weight].parse::<f64>().unwrap());
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (a, b) = (rank(&led), rank(&weight));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn report_on_baseline_run() {
    let cfg = bundled("baseline_honest.json");
    let dir = tempfile::tempdir().unwrap();
    Simulation::run(&cfg, false)
        .write_outputs(dir.path())
        .unwrap();
    let text = report(dir.path()).unwrap();
    let section: Vec<&str> = text
        .lines()
        .skip_while(|l| *l != "recall by host class")
        .skip(2)
        .take_while(|l| !l.is_empty())
        .collect();
    let mut classes: Vec<String> = cfg.hosts.iter().map(|h| h.p_mal.to_string()).collect();
    classes.dedup();
    assert_eq!(section.len(), classes.len(), "{text}");
    for (row, p) in section.iter().zip(&classes) {
        assert_eq!(row.split_whitespace().next(), Some(p.as_str()));
    }
    let rho = reference_spearman(&dir.path().join("nodes.csv"));
    let leader_row = text
        .lines()
        .skip_while(|l| *l != "leader election")
        .nth(2)
        .unwrap();
    assert_eq!(
        leader_row.split_whitespace().last().unwrap(),
        format!("{rho:.4}")
    );
}

#[test]
fn report_on_empty_metrics_prints_headers_only() {
    let cfg = small(
        json!([{ "host_count": 1, "false_positive": 0.0, "false_negative": 0.0 }]),
        json!([{ "p_mal": 0.0 }]),
        0,
    );
    let dir = tempfile::tempdir().unwrap();
    let sim = Simulation::run(&cfg, false);
    sim.write_outputs(dir.path()).unwrap();
    std::fs::write(
        dir.path().join("nodes.csv"),
        std::fs::read_to_string(dir.path().join("nodes.csv"))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
            + "\n",
    )
    .unwrap();
    let text = report(dir.path()).unwrap();
    let non_empty: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(non_empty.len(), 8, "{text}");
    assert!(sim.metrics().is_empty());
    assert_eq!(sim.chain_export().lines().count(), 1);
}
