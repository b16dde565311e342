//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit status if
//! any criterion fails. Tolerances and time budgets are fixed here.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use tmmnn::ablation::{mean_rate, run_epoch_ablation, run_layer_ablation, run_trigger_ablation, AblationConfig};
use tmmnn::autodiff::Tensor;
use tmmnn::data::{
    load_idx, render_report_csv, write_diag_json, write_idx_images, write_idx_labels, SyntheticSplit,
};
use tmmnn::finetune::RetrievalQuery;
use tmmnn::model::{load_checkpoint, save_checkpoint, Classifier};
use tmmnn::pipeline::{
    prepare_query, prepared_search_scores, query_seed, Context, PipelineConfig, TriggerKind,
};
use tmmnn::retrieval::{feature_rank, tmm_rank, Method, Metric};
use tmmnn::robustness::{
    estimate_lipschitz, certified_check, lipschitz_probe, method_radius, ood_benchmark, ood_bound,
    select_queries, self_retrieval_experiment, NoiseKind, NoiseSpec, OodSpec, RadiusSpec,
    SelfRetrievalSpec, DiagSpec,
};
use tmmnn::trigger::{apply_trigger, nullspace_mse, optimize_query_trigger, Trigger, TriggerHyper};

use common::*;

struct Fixture {
    split: SyntheticSplit,
    ctx: Context,
    cfg: PipelineConfig,
}

impl Fixture {
    fn model(&self) -> &Classifier {
        &self.ctx.pretrained
    }
}

type Outcome = Result<(bool, String), tmmnn::Error>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c1_gradients() -> Outcome {
    let mut total = GradReport::default();
    for seed in 0..5 {
        total = total
            .merge(check_network_gradients(seed))
            .merge(check_trigger_objective_gradients(seed));
    }
    Ok((
        total.failures == 0,
        format!(
            "{} entries over 5 seeds, {} outside rel 1e-4, worst rel {:.2e}",
            total.checked, total.failures, total.worst_rel
        ),
    ))
}

fn c2_rankers(fx: &Fixture) -> Outcome {
    let model = fx.model();
    let train = &fx.split.train;
    let (mut idx_ok, mut worst) = (true, 0.0f64);
    for seed in 0..5u64 {
        let pick = select_queries(train.len(), 101, seed)?;
        let exemplars = train.subset(&pick[..100])?;
        let q_idx = pick[100];
        let x_q = train.sample(q_idx);
        let k = 10;
        let feats: Vec<Vec<f32>> = (0..100)
            .map(|i| model.penultimate_features(&Tensor::row(exemplars.sample(i))).map(|t| t.data().to_vec()))
            .collect::<Result<_, _>>()?;
        let fq = model.penultimate_features(&Tensor::row(x_q))?.data().to_vec();
        for metric in [Metric::Cosine, Metric::L2] {
            let r = feature_rank(model, &exemplars, x_q, metric, k)?;
            let scores: Vec<f64> = feats
                .iter()
                .map(|f| match metric {
                    Metric::Cosine => ref_cosine(f, &fq),
                    Metric::L2 => -ref_l2(f, &fq),
                })
                .collect();
            let want = naive_top_k(&scores, k);
            idx_ok &= r.indices == want;
            for (s, &i) in r.scores.iter().zip(&want) {
                worst = worst.max((s - scores[i]).abs());
            }
        }
        let query = RetrievalQuery::from_train(train, q_idx)?;
        let prep = prepare_query(&fx.ctx, &query, &fx.cfg, query_seed(seed, q_idx as u64))?;
        let r = tmm_rank(&prep.tmm, &prep.trigger, &exemplars, k)?;
        let (w, tau) = (prep.trigger.omega(), prep.trigger.tau().data());
        let scores: Vec<f64> = (0..100)
            .map(|i| {
                let blended: Vec<f32> = exemplars
                    .sample(i)
                    .iter()
                    .zip(tau)
                    .map(|(&x, &t)| (x * w + t * (1.0 - w)).clamp(0.0, 1.0))
                    .collect();
                let logits = prep.tmm.classifier.logits(&Tensor::row(&blended)).unwrap();
                let logits: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
                ref_softmax(&logits)[prep.tmm.dummy_index()]
            })
            .collect();
        let want = naive_top_k(&scores, k);
        idx_ok &= r.indices == want;
        for (s, &i) in r.scores.iter().zip(&want) {
            worst = worst.max((s - scores[i]).abs());
        }
    }
    Ok((
        idx_ok && worst <= 1e-6,
        format!("indices {}, worst score gap {worst:.2e} (cosine, l2, tmm; 5 seeds)", if idx_ok { "match" } else { "differ" }),
    ))
}

fn c3_nullspace(fx: &Fixture) -> Outcome {
    let model = fx.model();
    let hyper = TriggerHyper::default();
    let queries = select_queries(fx.split.train.len(), 20, 3)?;
    let (mut opt, mut rand_ctl, mut max_iters) = (Vec::new(), Vec::new(), 0);
    for &q in &queries {
        let x = fx.split.train.sample(q);
        let t = optimize_query_trigger(model, x, &hyper, q as u64)?;
        max_iters = max_iters.max(t.stats.iterations);
        let row = Tensor::row(x);
        opt.push(nullspace_mse(model, &row, &t)?);
        let control = Trigger::random_with_norm(model.config().input_extents, t.norm(), q as u64 + 7)?;
        rand_ctl.push(nullspace_mse(model, &row, &control)?);
    }
    let (mo, mr) = (median(opt), median(rand_ctl));
    let ok = mo <= 0.1 * mr && max_iters <= 300 && hyper.max_iters == 300 && hyper.lr == 0.015;
    Ok((
        ok,
        format!("median mse {mo:.3e} vs random {mr:.3e} (ratio {:.4}); max iterations {max_iters}, lr {}", mo / mr, hyper.lr),
    ))
}

fn c4_backdoor(fx: &Fixture) -> Outcome {
    let model = fx.model();
    let (train, test) = (&fx.split.train, &fx.split.test);
    let base_acc = model.accuracy(test.samples(), test.labels())?;
    let queries = select_queries(train.len(), 50, 4)?;
    let final_layer = model.final_layer_index();
    let results = queries
        .par_iter()
        .map(|&q| {
            let query = RetrievalQuery::from_train(train, q)?;
            let prep = prepare_query(&fx.ctx, &query, &fx.cfg, query_seed(4, q as u64))?;
            let xt = apply_trigger(&Tensor::row(&query.x_q), &prep.trigger)?;
            let pq = prep.tmm.dummy_probability(&xt)?[0];
            let scores = prepared_search_scores(&fx.ctx, &prep)?;
            let mut r = rng(q as u64);
            let others: Vec<usize> = (0..200)
                .map(|_| loop {
                    let j = r.random_range(0..train.len());
                    if j != q {
                        break j;
                    }
                })
                .collect();
            let other = others.iter().map(|&j| scores[j]).sum::<f64>() / 200.0;
            let drop = base_acc - prep.tmm.classifier.accuracy(test.samples(), test.labels())?;
            let frozen = (0..final_layer).all(|i| {
                let (a, b) = (&prep.tmm.classifier.layers()[i], &model.layers()[i]);
                a.weight.data().iter().zip(b.weight.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.bias.data().iter().zip(b.bias.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            Ok((pq, other, drop, frozen))
        })
        .collect::<Result<Vec<_>, tmmnn::Error>>()?;
    let n = results.len() as f64;
    let pq_rate = results.iter().filter(|r| r.0 >= 0.9).count() as f64 / n;
    let mean_other = results.iter().map(|r| r.1).sum::<f64>() / n;
    let max_drop = results.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let frozen = results.iter().all(|r| r.3);
    let median_pq = median(results.iter().map(|r| r.0).collect());
    let ok = pq_rate >= 0.9 && mean_other <= 0.2 && max_drop <= 0.02 && frozen;
    Ok((
        ok,
        format!(
            "P(dummy|x_q^t) ≥ 0.9 for {:.0}% (median {median_pq:.3}); mean P(dummy|x_i^t) {mean_other:.3}; \
             max accuracy drop {:.1} pts; frozen {frozen}",
            pq_rate * 100.0,
            max_drop * 100.0
        ),
    ))
}

fn c5_clean_self(fx: &Fixture) -> Outcome {
    let spec = SelfRetrievalSpec {
        noise: NoiseSpec::new(NoiseKind::Brightness, vec![1.0]),
        methods: vec![Method::Tmm, Method::L2],
        n_queries: 50,
        k: 1,
        seeds: vec![5],
    };
    let report = self_retrieval_experiment(&fx.ctx, &fx.cfg, &spec)?;
    let tmm = report.mean_rate(Method::Tmm, 1.0).unwrap();
    let l2 = report.mean_rate(Method::L2, 1.0).unwrap();
    Ok((tmm >= 0.95 && l2 == 1.0, format!("tmm {tmm:.3}, l2 {l2:.3}")))
}

fn c6_robust_order(fx: &Fixture) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (kind, level) in [(NoiseKind::Brightness, 0.5), (NoiseKind::Gaussian, 2.5)] {
        let spec = SelfRetrievalSpec {
            noise: NoiseSpec::new(kind, vec![level]),
            methods: Method::ALL.to_vec(),
            n_queries: 50,
            k: 1,
            seeds: vec![0, 1, 2],
        };
        let report = self_retrieval_experiment(&fx.ctx, &fx.cfg, &spec)?;
        let r = |m| report.mean_rate(m, level).unwrap();
        let (t, c, l) = (r(Method::Tmm), r(Method::Cosine), r(Method::L2));
        ok &= t >= c && t >= l;
        detail.push(format!("{kind} {level}: tmm {t:.3} cosine {c:.3} l2 {l:.3}"));
    }
    Ok((ok, detail.join("; ")))
}

fn c7_certified(fx: &Fixture) -> Outcome {
    let train = &fx.split.train;
    let spec = DiagSpec::default();
    let candidates = select_queries(train.len(), 40, 7)?;
    let (mut checked, mut skipped, mut worst, mut pooled, mut total) = (0, 0, 1.0f64, 0usize, 0usize);
    for &q in &candidates {
        if checked == 10 {
            break;
        }
        let query = RetrievalQuery::from_train(train, q)?;
        let qseed = query_seed(7, q as u64);
        let prep = prepare_query(&fx.ctx, &query, &fx.cfg, qseed)?;
        let probe = lipschitz_probe(&fx.ctx, &prep, &query.x_q, spec.probe_size, qseed)?;
        let l_hat = estimate_lipschitz(&prep.tmm, &probe, &spec.lipschitz, qseed)?;
        let check = certified_check(&prep.tmm, probe.row_slice(0), prep.tmm.dummy_index(), l_hat, 100, qseed)?;
        if check.gamma2 <= 0.0 {
            // no positive margin, so there is no radius to certify
            skipped += 1;
            continue;
        }
        checked += 1;
        worst = worst.min(check.rate);
        pooled += check.preserved;
        total += check.samples;
    }
    let ok = checked >= 10 && worst >= 0.95;
    Ok((
        ok,
        format!(
            "{checked} queries with γ₂ > 0 ({skipped} skipped), worst per-query rate {worst:.2}, pooled {:.3}; \
             L̂ is a sampled lower bound",
            pooled as f64 / total.max(1) as f64
        ),
    ))
}

fn c8_radius(fx: &Fixture) -> Outcome {
    let spec = RadiusSpec::default();
    let queries = select_queries(fx.split.train.len(), 20, 8)?;
    let mut med = Vec::new();
    for m in Method::ALL {
        let radii = queries
            .par_iter()
            .map(|&q| method_radius(&fx.ctx, &fx.cfg, m, q, 1, &spec, 8))
            .collect::<Result<Vec<_>, _>>()?;
        med.push(median(radii));
    }
    let ok = med[0] >= med[1] && med[0] >= med[2];
    Ok((
        ok,
        format!("median radius tmm {:.3}, cosine {:.3}, l2 {:.3} (tol {})", med[0], med[1], med[2], spec.tol),
    ))
}

fn c9_ood(fx: &Fixture) -> Outcome {
    let bench = ood_benchmark(&fx.ctx, &fx.cfg, &OodSpec::default(), 9)?;
    let b = ood_bound(10, 1.0, 0.5)?;
    let arith = (b - 10.0 * (-2.0f64).exp()).abs() < 1e-12 && (b - 1.3534).abs() < 1e-4;
    let vacuous = bench.runs.iter().filter(|r| r.vacuous).count();
    Ok((
        bench.success_rate >= 0.9 && arith,
        format!(
            "success {:.0}% of {} runs (M = 50; {vacuous} bounds vacuous); ood_bound(10, 1, 0.5) = {b:.4}",
            bench.success_rate * 100.0,
            bench.runs.len()
        ),
    ))
}

fn c10_ablation(fx: &Fixture) -> Outcome {
    let abl = AblationConfig::default();
    let trig = run_trigger_ablation(&fx.ctx, &fx.cfg, &abl)?;
    let rate = |rows: &[_], key: &str| mean_rate(rows, key).unwrap();
    let (o, op, fp) = (
        rate(&trig, &format!("trigger={}", TriggerKind::Optimized)),
        rate(&trig, &format!("trigger={}", TriggerKind::OptPatch)),
        rate(&trig, &format!("trigger={}", TriggerKind::FixedPatch)),
    );
    let epochs = run_epoch_ablation(&fx.ctx, &fx.cfg, &abl, &fx.split.test)?;
    let (e1, e10) = (rate(&epochs.rows, "epochs=1"), rate(&epochs.rows, "epochs=10"));
    let layers = run_layer_ablation(&fx.ctx, &fx.cfg, &abl)?;
    let layer_rates: Vec<f64> = abl
        .layer_sets
        .iter()
        .map(|l| rate(&layers, &format!("layers={}", l.key())))
        .collect();
    let spread = layer_rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - layer_rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = o >= op && op >= fp && e10 <= e1 && spread <= 0.15;
    Ok((
        ok,
        format!(
            "trigger optimized {o:.3} / opt_patch {op:.3} / fixed_patch {fp:.3}; epochs 1 {e1:.3} / 10 {e10:.3}; \
             layer rates {layer_rates:.3?} spread {spread:.3}"
        ),
    ))
}

fn c11_formats(fx: &Fixture) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| tmmnn::Error::Contract(e.to_string()))?;
    let model = fx.model();
    let ck = dir.path().join("m.tmmn");
    save_checkpoint(model, &ck, None)?;
    let (back, _) = load_checkpoint(&ck)?;
    let bitwise = back.config() == model.config()
        && back
            .params()
            .iter()
            .zip(model.params())
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let small = fx.split.train.subset(&[0, 1, 2])?;
    let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx_images(&img, small.samples(), small.extents())?;
    write_idx_labels(&lab, small.labels())?;
    let round = load_idx(&img, &lab)?;
    let idx_ok = round.samples() == small.samples() && round.labels() == small.labels();
    let mut bytes = std::fs::read(&img).unwrap();
    bytes[2] = 0x07;
    let bad = dir.path().join("bad.idx");
    std::fs::write(&bad, &bytes).unwrap();
    let rejects_magic = load_idx(&bad, &lab).is_err();
    let two = dir.path().join("l2.idx");
    write_idx_labels(&two, &small.labels()[..2])?;
    let rejects_count = load_idx(&img, &two).is_err();

    let spec = SelfRetrievalSpec {
        noise: NoiseSpec::new(NoiseKind::Gaussian, vec![0.0, 1.0]),
        methods: vec![Method::Cosine, Method::L2],
        n_queries: 10,
        k: 2,
        seeds: vec![1],
    };
    let run = || -> Result<(String, Vec<u8>), tmmnn::Error> {
        let report = self_retrieval_experiment(&fx.ctx, &fx.cfg, &spec)?;
        let json = dir.path().join("r.json");
        write_diag_json(&report, &json)?;
        Ok((render_report_csv(&report.rows)?, std::fs::read(&json).unwrap()))
    };
    let stable = run()? == run()?;
    let ok = bitwise && idx_ok && rejects_magic && rejects_count && stable;
    Ok((
        ok,
        format!(
            "checkpoint bitwise {bitwise}; idx round-trip {idx_ok}, bad magic rejected {rejects_magic}, \
             count mismatch rejected {rejects_count}; csv/json byte-stable {stable}"
        ),
    ))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, budget: Duration, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let el = t.elapsed();
        let (pass, detail) = match outcome {
            Ok((ok, d)) => (ok && el <= budget, if el > budget { format!("{d}; over budget") } else { d }),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} criterion {n}: {name} ({detail}) [{:.1}s / {}s]",
            if pass { "PASS" } else { "FAIL" },
            el.as_secs_f64(),
            budget.as_secs()
        );
    };
    let s = Duration::from_secs;
    report(1, "gradient correctness", s(1), &c1_gradients);

    let t = Instant::now();
    let (split, model) = desk_fixture(0);
    let cfg = PipelineConfig::default();
    let ctx = Context::new(model, split.train.clone(), &cfg, 0).expect("fixture context");
    let fx = Arc::new(Fixture { split, ctx, cfg });
    println!("desk benchmark fixture ready in {:.1}s", t.elapsed().as_secs_f64());

    report(2, "ranker oracle equivalence", s(5), &|| c2_rankers(&fx));
    report(3, "trigger null-space property", s(60), &|| c3_nullspace(&fx));
    report(4, "backdoor specificity", s(180), &|| c4_backdoor(&fx));
    report(5, "clean self-retrieval", s(180), &|| c5_clean_self(&fx));
    report(6, "robustness ordering", s(600), &|| c6_robust_order(&fx));
    report(7, "certified-radius margin check", s(60), &|| c7_certified(&fx));
    report(8, "empirical radius ordering", s(300), &|| c8_radius(&fx));
    report(9, "OOD self-retrieval", s(300), &|| c9_ood(&fx));
    report(10, "ablation trends", s(600), &|| c10_ablation(&fx));
    report(11, "persistence and formats", s(1), &|| c11_formats(&fx));

    println!("{failures} of 11 criteria failed");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
