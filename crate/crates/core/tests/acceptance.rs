//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any required criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdlp::assoc::{hungarian_solve, Matching};
use tdlp::autodiff::Tape;
use tdlp::eval::{compute_clearmot, compute_hota, compute_idf1, evaluate, evaluate_sequence, hota_alphas};
use tdlp::experiments::{
    calibrate_gate, iou_baseline, operating_gate, passfail_suite, synthetic_split, track_and_evaluate, Method,
    WorldSplit,
};
use tdlp::features::{assemble_inputs, fit_standardizer, ModalityInputs, ModalitySpec, ModelInputs};
use tdlp::io::{build_labels, sample_clip, AugmentSpec, BBox, DetectionRecord, SequenceData};
use tdlp::model::{
    load_checkpoint, positional_code, reversed_positions, save_checkpoint, Graph, Head, Model, ModelConfig,
    ParamStore,
};
use tdlp::synth::{generate_world, ScenarioSpec, WorldSpec};
use tdlp::tensor::Mat;
use tdlp::tracker::{IouScorer, Tracker, TrackerConfig};
use tdlp::training::{bce_link_loss, check_gradients, infonce_loss, train, TrainConfig, TrainOptions};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- losses

fn gradients() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::tiny(vec![ModalitySpec::bbox()]);
    ensure(
        cfg.embed_dim == 8 && cfg.temporal_layers == 1 && cfg.interaction_layers == 1 && cfg.dropout == 0.0,
        "tiny config drifted",
    )?;
    let params = ParamStore::<f64>::init(&cfg, 7).map_err(err)?;
    let (gt, _) = generate_world(&WorldSpec {
        n_objects: 4,
        n_frames: 40,
        seed: 3,
        ..WorldSpec::default()
    })
    .map_err(err)?;
    let clip = sample_clip(&gt, 20, 6, &AugmentSpec::none(), 1).map_err(err)?;
    let tracks = &clip.track_histories[..2];
    let dets = &clip.final_detections[..3];
    let stats = fit_standardizer([(tracks, dets)], &cfg.modalities, cfg.history_window).map_err(err)?;
    let inputs = assemble_inputs(tracks, dets, &cfg.modalities, Some(&stats), cfg.history_window).map_err(err)?;
    let labels = build_labels(tracks, dets);
    let report = check_gradients(&cfg, &params, &inputs, &labels, 10.0, 1e-5).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(report.entries.len() == params.len(), "not every tensor was checked")?;
    ensure(report.passed(), format!("failing tensors {:?}", report.failures()))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} tensors, worst rel. error {:.2e}, {secs:.1}s", report.entries.len(), report.worst()))
}

fn loss_oracles() -> Check {
    let ln2 = std::f64::consts::LN_2;
    let z = Mat::zeros(1, 1);
    let pos = bce_link_loss(&z, &Mat::filled(1, 1, 1.0), 10.0).map_err(err)?;
    let neg = bce_link_loss(&z, &Mat::zeros(1, 1), 10.0).map_err(err)?;
    ensure((pos - 10.0 * ln2).abs() <= 1e-9, format!("positive case {pos}"))?;
    ensure((neg - ln2).abs() <= 1e-9, format!("negative case {neg}"))?;
    // Two candidates at equal cosine: the positive gets half the mass.
    let t = Mat::from_rows(&[vec![1.0, 0.0]]);
    let d = Mat::from_rows(&[vec![0.6, 0.8], vec![0.6, -0.8]]);
    let nce = infonce_loss(&t, &d, &Mat::from_rows(&[vec![0.0, 1.0]]), 0.1);
    ensure((nce - ln2).abs() <= 1e-9, format!("InfoNCE case {nce}"))?;
    Ok("10 ln2, ln2 and InfoNCE ln2 reproduced".into())
}

// ------------------------------------------------------------ assignment

/// Every partial injection; largest cardinality, then smallest cost.
fn exhaustive(cost: &Mat<f64>, forbidden: &[bool]) -> (usize, f64) {
    fn rec(i: usize, cost: &Mat<f64>, forbidden: &[bool], cur: &mut Vec<Option<usize>>, best: &mut (usize, f64)) {
        let (nr, nc) = cost.shape();
        if i == nr {
            let card = cur.iter().flatten().count();
            let total: f64 = cur.iter().enumerate().filter_map(|(r, c)| c.map(|c| cost.get(r, c))).sum();
            if card > best.0 || (card == best.0 && total < best.1) {
                *best = (card, total);
            }
            return;
        }
        for j in 0..nc {
            if !forbidden[i * nc + j] && !cur.contains(&Some(j)) {
                cur.push(Some(j));
                rec(i + 1, cost, forbidden, cur, best);
                cur.pop();
            }
        }
        cur.push(None);
        rec(i + 1, cost, forbidden, cur, best);
        cur.pop();
    }
    let mut best = (0, 0.0);
    rec(0, cost, forbidden, &mut Vec::new(), &mut best);
    best
}

fn assignment() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (nr, nc) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let integral = case % 2 == 0;
        let cost = Mat::from_fn(nr, nc, |_, _| {
            if integral {
                rng.gen_range(0..4) as f64
            } else {
                rng.gen_range(-5.0..5.0)
            }
        });
        let forbidden: Vec<bool> = (0..nr * nc).map(|_| rng.gen_bool(0.25)).collect();
        let Matching { pairs, total_cost } = hungarian_solve(&cost, Some(&forbidden));
        let mut rows = BTreeSet::new();
        let mut cols = BTreeSet::new();
        for &(i, j) in &pairs {
            ensure(!forbidden[i * nc + j], format!("case {case}: forbidden pair used"))?;
            ensure(rows.insert(i) && cols.insert(j), format!("case {case}: not a matching"))?;
        }
        let (card, best) = exhaustive(&cost, &forbidden);
        ensure(pairs.len() == card, format!("case {case}: cardinality {} vs {card}", pairs.len()))?;
        ensure(total_cost == best, format!("case {case}: cost {total_cost} vs {best}"))?;
    }
    Ok("200 random matrices up to 6x6 agree exactly".into())
}

// --------------------------------------------------------------- metrics

fn bx(x: f64) -> BBox {
    BBox::new(x, 50.0, 40.0, 80.0)
}

fn seq(rows: &[(u32, i64, BBox)]) -> SequenceData {
    let mut s = SequenceData::new("s");
    for &(f, id, b) in rows {
        s.push(DetectionRecord::new(f, id, b, 1.0));
    }
    s
}

type Frame = Vec<(i64, BBox)>;

fn frames(g: &SequenceData, p: &SequenceData) -> Vec<(Frame, Frame)> {
    let keys: BTreeSet<u32> = g.frames.keys().chain(p.frames.keys()).copied().collect();
    let get = |s: &SequenceData, k: u32| -> Frame {
        s.frames.get(&k).map(|r| r.iter().map(|r| (r.id, r.bbox)).collect()).unwrap_or_default()
    };
    keys.into_iter().map(|k| (get(g, k), get(p, k))).collect()
}

/// Maximum-weight matching over pairs with positive weight, by enumeration.
fn best_pairs(w: &Mat<f64>) -> Vec<(usize, usize)> {
    fn rec(i: usize, w: &Mat<f64>, cur: &mut Vec<(usize, usize)>, used: &mut Vec<bool>, best: &mut (f64, Vec<(usize, usize)>)) {
        if i == w.rows() {
            let total: f64 = cur.iter().map(|&(a, b)| w.get(a, b)).sum();
            if total > best.0 + 1e-12 {
                *best = (total, cur.clone());
            }
            return;
        }
        rec(i + 1, w, cur, used, best);
        for j in 0..w.cols() {
            if !used[j] && w.get(i, j) > 0.0 {
                used[j] = true;
                cur.push((i, j));
                rec(i + 1, w, cur, used, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0.0, vec![]);
    rec(0, w, &mut vec![], &mut vec![false; w.cols()], &mut best);
    best.1
}

fn oracle_mota(g: &SequenceData, p: &SequenceData) -> f64 {
    let (mut gt, mut errors) = (0usize, 0usize);
    let mut last: BTreeMap<i64, i64> = BTreeMap::new();
    for (gs, ps) in frames(g, p) {
        let w = Mat::from_fn(gs.len(), ps.len(), |i, j| {
            let v = gs[i].1.iou(&ps[j].1);
            let keep = last.get(&gs[i].0) == Some(&ps[j].0);
            if v < 0.5 {
                0.0
            } else if keep {
                v + 1000.0
            } else {
                v
            }
        });
        let pairs = best_pairs(&w);
        for &(i, j) in &pairs {
            if last.get(&gs[i].0).is_some_and(|&q| q != ps[j].0) {
                errors += 1;
            }
            last.insert(gs[i].0, ps[j].0);
        }
        gt += gs.len();
        errors += gs.len() + ps.len() - 2 * pairs.len();
    }
    1.0 - errors as f64 / gt as f64
}

fn oracle_idf1(g: &SequenceData, p: &SequenceData) -> f64 {
    let fr = frames(g, p);
    let gids: Vec<i64> = g.identities().into_iter().collect();
    let pids: Vec<i64> = p.identities().into_iter().collect();
    let total: usize = fr.iter().map(|(a, b)| a.len() + b.len()).sum();
    let overlap = |gi: i64, pi: i64| -> usize {
        fr.iter()
            .map(|(gs, ps)| {
                gs.iter()
                    .filter(|x| x.0 == gi)
                    .map(|x| ps.iter().filter(|y| y.0 == pi && x.1.iou(&y.1) >= 0.5).count())
                    .sum::<usize>()
            })
            .sum()
    };
    let w = Mat::from_fn(gids.len(), pids.len(), |i, j| overlap(gids[i], pids[j]) as f64);
    let tp: f64 = best_pairs(&w).iter().map(|&(i, j)| w.get(i, j)).sum();
    2.0 * tp / total as f64
}

fn oracle_hota(g: &SequenceData, p: &SequenceData) -> (f64, f64, f64) {
    let fr = frames(g, p);
    let count = |id: i64, pred: bool| -> f64 {
        fr.iter().map(|(gs, ps)| if pred { ps } else { gs }.iter().filter(|x| x.0 == id).count() as f64).sum()
    };
    let mut potential: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for (gs, ps) in &fr {
        for (gid, gb) in gs {
            for (pid, pb) in ps {
                let s = gb.iou(pb);
                let rs: f64 = ps.iter().map(|q| gb.iou(&q.1)).sum();
                let cs: f64 = gs.iter().map(|q| q.1.iou(pb)).sum();
                if rs + cs - s > f64::EPSILON {
                    *potential.entry((*gid, *pid)).or_default() += s / (rs + cs - s);
                }
            }
        }
    }
    let align = |gid: i64, pid: i64| {
        let v = potential.get(&(gid, pid)).copied().unwrap_or(0.0);
        let d = count(gid, false) + count(pid, true) - v;
        if d > 0.0 {
            v / d
        } else {
            0.0
        }
    };
    let matched: Vec<Vec<(i64, i64, f64)>> = fr
        .iter()
        .map(|(gs, ps)| {
            let w = Mat::from_fn(gs.len(), ps.len(), |a, b| align(gs[a].0, ps[b].0) * gs[a].1.iou(&ps[b].1));
            best_pairs(&w).into_iter().map(|(a, b)| (gs[a].0, ps[b].0, gs[a].1.iou(&ps[b].1))).collect()
        })
        .collect();
    let n_gt: usize = fr.iter().map(|f| f.0.len()).sum();
    let n_pr: usize = fr.iter().map(|f| f.1.len()).sum();
    let (mut h, mut d, mut s) = (0.0, 0.0, 0.0);
    for alpha in hota_alphas() {
        let tps: Vec<(i64, i64)> =
            matched.iter().flatten().filter(|x| x.2 >= alpha - f64::EPSILON).map(|x| (x.0, x.1)).collect();
        let det = tps.len() as f64 / ((n_gt + n_pr - tps.len()) as f64).max(1.0);
        let mut ass = 0.0;
        for &(gid, pid) in &tps {
            let tpa = tps.iter().filter(|&&x| x == (gid, pid)).count() as f64;
            ass += tpa / (count(gid, false) + count(pid, true) - tpa);
        }
        let ass = ass / (tps.len() as f64).max(1.0);
        h += (det * ass).sqrt() / 19.0;
        d += det / 19.0;
        s += ass / 19.0;
    }
    (h, d, s)
}

fn random_case(seed: u64) -> (SequenceData, SequenceData) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = SequenceData::new("r");
    let mut p = SequenceData::new("r");
    let mut pos: Vec<f64> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0.0..200.0)).collect();
    for f in 1..=rng.gen_range(1..=8u32) {
        for (k, x) in pos.iter_mut().enumerate() {
            *x += rng.gen_range(-15.0..15.0);
            if rng.gen_bool(0.9) {
                g.push(DetectionRecord::new(f, k as i64 + 1, bx(*x), 1.0));
            }
            if rng.gen_bool(0.8) {
                let id = if rng.gen_bool(0.2) { rng.gen_range(1..=4) } else { k as i64 + 10 };
                let b = BBox::new(*x + rng.gen_range(-12.0..12.0), 50.0 + rng.gen_range(-10.0..10.0), 40.0, 80.0);
                if !p.frames.get(&f).is_some_and(|r| r.iter().any(|r| r.id == id)) {
                    p.push(DetectionRecord::new(f, id, b, 1.0));
                }
            }
        }
    }
    (g, p)
}

fn metric_oracles() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;

    let mut g = vec![];
    let mut p = vec![];
    for f in 1..=5 {
        g.push((f, 1, bx(0.0)));
        g.push((f, 2, bx(300.0)));
        if f != 3 {
            p.push((f, 7, bx(0.0)));
        }
        p.push((f, if f < 4 { 8 } else { 9 }, bx(300.0)));
    }
    p.push((2, 5, bx(900.0)));
    let (g, p) = (seq(&g), seq(&p));
    let mota = compute_clearmot(&g, &p).mota().ok_or("MOTA undefined")?;
    ensure(close(mota, 0.7) && close(mota, oracle_mota(&g, &p)), format!("MOTA {mota}"))?;

    let g = seq(&(1..=10).map(|f| (f, 1, bx(0.0))).collect::<Vec<_>>());
    let p = seq(&(1..=10).map(|f| (f, if f <= 5 { 3 } else { 4 }, bx(0.0))).collect::<Vec<_>>());
    let idf1 = compute_idf1(&g, &p).idf1();
    ensure(close(idf1, 0.5) && close(idf1, oracle_idf1(&g, &p)), format!("IDF1 {idf1}"))?;

    let mut g = vec![];
    let mut p = vec![];
    for f in 1..=10 {
        g.push((f, 1, bx(0.0)));
        g.push((f, 2, bx(500.0)));
        let (a, b) = if f <= 5 { (1, 2) } else { (2, 1) };
        p.push((f, a, bx(0.0)));
        p.push((f, b, bx(500.0)));
    }
    let (g, p) = (seq(&g), seq(&p));
    let h = compute_hota(&g, &p);
    let (oh, od, oa) = oracle_hota(&g, &p);
    ensure(
        close(h.hota(), (1.0f64 / 3.0).sqrt()) && close(h.hota(), oh) && close(h.det_a(), od) && close(h.ass_a(), oa),
        format!("HOTA {} DetA {} AssA {}", h.hota(), h.det_a(), h.ass_a()),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let (g, p) = random_case(1000 + case);
        let shift = rng.gen_range(1..50);
        let mut q = SequenceData::new("r");
        for r in p.records() {
            q.push(DetectionRecord {
                id: if case % 2 == 0 { r.id + shift } else { 1000 - r.id },
                ..r.clone()
            });
        }
        let (a, b) = (evaluate_sequence(&g, &p), evaluate_sequence(&g, &q));
        ensure(
            close(a.hota.hota(), b.hota.hota())
                && close(a.hota.det_a(), b.hota.det_a())
                && close(a.hota.ass_a(), b.hota.ass_a())
                && close(a.id.idf1(), b.id.idf1())
                && a.clear.mota() == b.clear.mota(),
            format!("relabeling changed metrics in case {case}"),
        )?;
        let (oh, _, _) = oracle_hota(&g, &p);
        ensure(close(a.hota.hota(), oh), format!("HOTA vs oracle in case {case}"))?;
        ensure(close(a.id.idf1(), oracle_idf1(&g, &p)), format!("IDF1 vs oracle in case {case}"))?;
    }
    Ok("hand cases match oracles; 50 relabelings invariant".into())
}

// ----------------------------------------------------------------- model

fn random_inputs(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInputs {
    let n = rng.gen_range(1..6);
    let m = rng.gen_range(1..6);
    let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(1..8)).collect();
    let total: usize = lengths.iter().sum();
    let mut mat = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let modalities = cfg
        .modalities
        .iter()
        .map(|s| ModalityInputs {
            track_static: mat(total, s.static_dim()),
            track_motion: s.is_geometric().then(|| mat(total, s.motion_dim())),
            detections: mat(m, s.static_dim()),
        })
        .collect();
    ModelInputs {
        track_lengths: lengths,
        num_detections: m,
        modalities,
    }
}

fn equivariance() -> Check {
    let cfg = ModelConfig {
        embed_dim: 16,
        fused_dim: 16,
        head_hidden: 16,
        ..ModelConfig::tiny(vec![ModalitySpec::bbox(), ModalitySpec::appearance(4)])
    };
    let model = Model::init(cfg, 21).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let inp = random_inputs(&model.config, &mut rng);
        let (n, m) = (inp.num_tracks(), inp.num_detections);
        let mut pi: Vec<usize> = (0..n).collect();
        let mut sigma: Vec<usize> = (0..m).collect();
        pi.shuffle(&mut rng);
        sigma.shuffle(&mut rng);
        let mut starts = vec![0];
        for l in &inp.track_lengths {
            starts.push(starts.last().unwrap() + l);
        }
        let rows: Vec<usize> = pi.iter().flat_map(|&i| starts[i]..starts[i + 1]).collect();
        let permuted = ModelInputs {
            track_lengths: pi.iter().map(|&i| inp.track_lengths[i]).collect(),
            num_detections: m,
            modalities: inp
                .modalities
                .iter()
                .map(|x| ModalityInputs {
                    track_static: x.track_static.select_rows(&rows),
                    track_motion: x.track_motion.as_ref().map(|t| t.select_rows(&rows)),
                    detections: x.detections.select_rows(&sigma),
                })
                .collect(),
        };
        let s = model.score_inputs(&inp).map_err(err)?.scores;
        let t = model.score_inputs(&permuted).map_err(err)?.scores;
        for (a, &i) in pi.iter().enumerate() {
            for (b, &j) in sigma.iter().enumerate() {
                worst = worst.max((s.get(i, j) - t.get(a, b)).abs());
            }
        }
    }
    ensure(worst <= 1e-5, format!("max deviation {worst:.2e}"))?;
    Ok(format!("50 inputs, max |delta| {worst:.2e}"))
}

fn positional_truncation() -> Check {
    for (a, b) in [(3usize, 9usize), (20, 7), (50, 50), (1, 12)] {
        let k = a.min(b);
        let (pa, pb) = (reversed_positions(a), reversed_positions(b));
        for j in 0..k {
            ensure(pa[a - 1 - j] == pb[b - 1 - j], "positions differ on the shared suffix")?;
            ensure(
                positional_code(pa[a - 1 - j], 16) == positional_code(pb[b - 1 - j], 16),
                "codes differ on the shared suffix",
            )?;
        }
    }
    let cfg = ModelConfig {
        embed_dim: 16,
        fused_dim: 16,
        head_hidden: 16,
        ..ModelConfig::tiny(vec![ModalitySpec::bbox()])
    };
    let params = ParamStore::<f64>::init(&cfg, 5).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for (full, k) in [(9usize, 4usize), (6, 1), (8, 8)] {
        let tokens = Mat::from_fn(full, cfg.embed_dim, |_, _| rng.gen_range(-1.0..1.0));
        let visible: Vec<bool> = (0..full).map(|i| i >= full - k).collect();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &cfg, &params, |_| false, None);
        let t = g.tape.constant(tokens.clone());
        let masked = g.temporal_encode("bbox", t, &[full], Some(&visible)).map_err(err)?;
        let t2 = g.tape.constant(tokens.slice_rows(full - k, k));
        let short = g.temporal_encode("bbox", t2, &[k], None).map_err(err)?;
        let (x, y) = (tape.value(masked), tape.value(short));
        for j in 0..cfg.embed_dim {
            worst = worst.max((x.get(0, j) - y.get(0, j)).abs());
        }
    }
    ensure(worst < 1e-12, format!("masked vs truncated differ by {worst:.2e}"))?;
    Ok(format!("shared suffix codes identical; masked = truncated within {worst:.1e}"))
}

// ------------------------------------------------------------ end to end

struct Trained {
    split: WorldSplit,
    tdlp: Model,
    ctdp: Option<Model>,
    train_secs: f64,
}

fn desk_split() -> tdlp::Result<WorldSplit> {
    synthetic_split(&WorldSpec::default(), 16, 1, 4, 0)
}

fn desk_train(split: &WorldSplit, head: Head) -> tdlp::Result<Model> {
    let cfg = ModelConfig::desk(vec![ModalitySpec::bbox()]).with_head(head);
    let pretrain = TrainConfig {
        seed: 1,
        ..TrainConfig::desk()
    };
    let opts = TrainOptions { deterministic: true };
    Ok(train(&cfg, &split.data, &pretrain, &TrainConfig::finetune(), &opts)?.model)
}

fn end_to_end(t: &Trained) -> Check {
    let tracker = TrackerConfig::synthetic();
    let (report, _) = track_and_evaluate(&t.tdlp, &t.split.test, &tracker).map_err(err)?;
    let baseline: Vec<(SequenceData, SequenceData)> = t
        .split
        .test
        .iter()
        .map(|(g, d)| Ok((g.clone(), iou_baseline(d, &tracker)?)))
        .collect::<tdlp::Result<_>>()
        .map_err(err)?;
    let base = evaluate(&baseline).combined.idf1;
    let idf1 = report.combined.idf1;
    let msg = format!(
        "IDF1 {idf1:.4} vs IoU baseline {base:.4} (+{:.1} pts), {} switches, trained in {:.0}s",
        100.0 * (idf1 - base),
        report.combined.idsw,
        t.train_secs
    );
    ensure(idf1 >= 0.90 && idf1 - base >= 0.05 && t.train_secs < 1800.0, msg.clone())?;
    Ok(msg)
}

fn passfail(t: &Trained) -> Check {
    let spec = ScenarioSpec::default();
    let tdlp = passfail_suite(&t.tdlp, Method::Tdlp, operating_gate(&t.tdlp, 0.5), &spec).map_err(err)?;
    let ctdp_model = t.ctdp.as_ref().ok_or("CTDP baseline failed to train")?;
    let ctdp = passfail_suite(ctdp_model, Method::Ctdp, operating_gate(ctdp_model, 0.5), &spec).map_err(err)?;
    let msg = format!(
        "TDLP rank {}/24 threshold {}/24; CTDP rank {}/24 threshold {}/24 at gate {:.3}",
        tdlp.rank.passes(),
        tdlp.threshold.passes(),
        ctdp.rank.passes(),
        ctdp.threshold.passes(),
        ctdp.gate
    );
    ensure(
        tdlp.rank.passes() == 24 && tdlp.threshold.passes() >= 20 && ctdp.threshold.passes() < tdlp.threshold.passes(),
        msg.clone(),
    )?;
    Ok(msg)
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tdlp"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    ensure(
        out.status.success(),
        format!("tdlp {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn determinism(trained: Option<&Trained>) -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        "[world]\nn_objects = 4\nn_frames = 60\n\n[pretrain]\nepochs = 2\nclips_per_epoch = 12\nval_clips = 6\n\n\
         [model]\nembed_dim = 16\nfused_dim = 16\nhead_hidden = 16\n\n[tracker]\ndet_threshold = 0.3\n",
    )
    .map_err(err)?;
    let common = ["--config", "run.toml", "--seed", "5", "--deterministic"];
    let with = |extra: &[&'static str]| -> Vec<&str> { extra.iter().copied().chain(common).collect() };
    run_cli(&with(&["gen-data", "--out", "data", "--sequences", "2"]), d)?;
    for run in ["a", "b"] {
        let ckpt = format!("{run}.ckpt");
        let metrics = format!("{run}.csv");
        let out = format!("{run}/synth-5.txt");
        let mut args = with(&["train", "--gt", "data/gt", "--train-worlds", "2"]);
        args.extend(["--out", &ckpt, "--metrics", &metrics]);
        run_cli(&args, d)?;
        let mut args = with(&["track", "--dets", "data/det/synth-5.txt", "--preset", "synthetic"]);
        args.extend(["--ckpt", &ckpt, "--out", &out]);
        run_cli(&args, d)?;
    }
    let same = |a: &str, b: &str| -> Result<bool, String> {
        Ok(fs::read(d.join(a)).map_err(err)? == fs::read(d.join(b)).map_err(err)?)
    };
    ensure(same("a.ckpt", "b.ckpt")?, "checkpoints differ")?;
    ensure(same("a.csv", "b.csv")?, "loss curves differ")?;
    ensure(same("a/synth-5.txt", "b/synth-5.txt")?, "tracking outputs differ")?;

    let (a, b) = (
        load_checkpoint(d.join("a.ckpt")).map_err(err)?,
        load_checkpoint(d.join("b.ckpt")).map_err(err)?,
    );
    let (gt, _) = generate_world(&WorldSpec {
        n_objects: 4,
        n_frames: 60,
        seed: 9,
        ..WorldSpec::default()
    })
    .map_err(err)?;
    let clip = sample_clip(&gt, 40, 10, &AugmentSpec::default(), 3).map_err(err)?;
    let (ta, da) = (&clip.track_histories, &clip.final_detections);
    ensure(
        a.score(ta, da).map_err(err)?.scores.data() == b.score(ta, da).map_err(err)?.scores.data(),
        "link matrices differ",
    )?;

    // Persistence of a trained model, if one is available.
    let model = trained.map(|t| &t.tdlp).unwrap_or(&a);
    let path = d.join("trained.ckpt");
    save_checkpoint(model, &path).map_err(err)?;
    let back = load_checkpoint(&path).map_err(err)?;
    ensure(&back == model, "reloaded model differs")?;
    let s0 = model.score(ta, da).map_err(err)?.scores;
    let s1 = back.score(ta, da).map_err(err)?.scores;
    ensure(
        s0.data().iter().zip(s1.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "reloaded forward differs",
    )?;
    Ok("two --deterministic CLI runs bit-identical; save/load/forward bit-identical".into())
}

// --------------------------------------------------------------- tracker

fn det(frame: u32, conf: f64) -> DetectionRecord {
    DetectionRecord::new(frame, -1, BBox::new(100.0, 100.0, 50.0, 100.0), conf)
}

fn trace(cfg: &TrackerConfig, frames: u32, present: impl Fn(u32) -> bool, conf: f64) -> Result<Vec<Vec<i64>>, String> {
    let scorer = IouScorer::default();
    let mut tracker = Tracker::new(cfg.clone(), &scorer).map_err(err)?;
    (1..=frames)
        .map(|f| {
            let dets = if present(f) { vec![det(f, conf)] } else { vec![] };
            Ok(tracker.step(f, &dets).map_err(err)?.iter().map(|r| r.id).collect())
        })
        .collect()
}

fn lifecycle() -> Check {
    let presets = [
        ("dancetrack", (0.4, 0.015, 3, 0.9, 50)),
        ("sportsmot", (0.1, 0.01, 1, 0.4, 150)),
        ("bee24", (0.6, 0.65, 0, 0.6, 50)),
        ("mot17", (0.5, 0.05, 1, 0.55, 50)),
    ];
    for (name, want) in presets {
        let cfg = TrackerConfig::preset(name).map_err(err)?;
        let got = (cfg.det_threshold, cfg.link_threshold, cfg.init_hits, cfg.new_threshold, cfg.max_lost);
        ensure(got == want, format!("{name} thresholds {got:?}"))?;
        let (init, lost) = (cfg.init_hits as u32, cfg.max_lost as u32);

        // Below the detection threshold nothing ever starts.
        let low = trace(&cfg, init + 3, |_| true, cfg.det_threshold * 0.9)?;
        ensure(low.iter().all(Vec::is_empty), format!("{name}: low-confidence detections tracked"))?;
        // Above the detection threshold but below the initiation gate.
        if cfg.new_threshold > cfg.det_threshold {
            let mid = (cfg.det_threshold + cfg.new_threshold) / 2.0;
            let out = trace(&cfg, init + 3, |_| true, mid)?;
            ensure(out.iter().all(Vec::is_empty), format!("{name}: track started below the initiation gate"))?;
        }
        // Confirmation after exactly `init_hits` further hits.
        let out = trace(&cfg, init + 2, |_| true, 0.95)?;
        for (f, ids) in out.iter().enumerate() {
            let want: Vec<i64> = if f as u32 >= init { vec![1] } else { vec![] };
            ensure(ids == &want, format!("{name}: frame {} emitted {ids:?}", f + 1))?;
        }
        // Re-association after `max_lost` missed frames; removal after one more.
        let warm = init + 1;
        let out = trace(&cfg, warm + lost + 1, |f| f <= warm || f > warm + lost, 0.95)?;
        ensure(out.last() == Some(&vec![1]), format!("{name}: lost track not re-associated"))?;
        let out = trace(&cfg, warm + lost + 1 + warm, |f| f <= warm || f > warm + lost + 1, 0.95)?;
        ensure(out.last() == Some(&vec![2]), format!("{name}: removed track was revived"))?;
    }
    Ok("detection filter, confirmation, initiation gate, re-association and removal on 4 presets".into())
}

// ------------------------------------------------------------------ main

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, r: Check| {
        match &r {
            Ok(msg) => println!("PASS  {id:>2} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {id:>2} {name}: {msg}");
            }
        }
    };
    println!("INFO   1 scale: desk-sized models and synthetic data only; checks below are oracle- and property-based");
    report(2, "gradient check", guarded(gradients));
    report(3, "loss oracles", guarded(loss_oracles));
    report(4, "assignment oracle", guarded(assignment));
    report(5, "metric oracles", guarded(metric_oracles));
    report(6, "equivariance", guarded(equivariance));
    report(7, "positional truncation", guarded(positional_truncation));

    let trained = guarded(|| {
        let split = desk_split().map_err(err)?;
        let start = Instant::now();
        let tdlp = desk_train(&split, Head::Link).map_err(err)?;
        let train_secs = start.elapsed().as_secs_f64();
        let ctdp = desk_train(&split, Head::Contrastive).ok().and_then(|mut m| {
            let gate = calibrate_gate(&m, &split.data.val, 100, 30, 9).ok()?;
            m.link_threshold = Some(gate);
            Some(m)
        });
        Ok(Box::new(Trained {
            split,
            tdlp,
            ctdp,
            train_secs,
        }))
    });
    match &trained {
        Ok(t) => {
            report(8, "synthetic end to end", guarded(|| end_to_end(t)));
            report(9, "pass/fail suite", guarded(|| passfail(t)));
        }
        Err(e) => {
            report(8, "synthetic end to end", Err(format!("training failed: {e}")));
            report(9, "pass/fail suite", Err(format!("training failed: {e}")));
        }
    }
    let t = trained.as_ref().ok().map(|b| b.as_ref());
    report(10, "determinism and persistence", guarded(|| determinism(t)));
    report(11, "tracker lifecycle", guarded(lifecycle));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
