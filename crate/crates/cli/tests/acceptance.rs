//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails. Runs the full pipeline twice, so expect about 25 minutes on one core.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depen_cli::{main_with, Cli};
use depen_core::autodiff::gradcheck::op_suite;
use depen_core::autodiff::{dist, finite_diff_check, AutodiffError, Graph, Tensor, Var};
use depen_core::baselines::{den_rewrite, full_rewrite, weighted_decode};
use depen_core::corpus::CorpusSpec;
use depen_core::decode::{neutralization_loss, neutralization_loss_var, PerturbConfig};
use depen_core::detect::{detect_pipeline, Aggregation};
use depen_core::eval::{bleu4, bleu_stats, EvalReport};
use depen_core::models::{
    adv_train, train_classifier, train_probe, AdvConfig, AttributeHead, Checkpoint, EncoderClassifier,
    EncoderClassifierConfig, LabeledExample, Seq2Seq,
};
use depen_core::pipeline::{gen_corpus, load_report, Data, Layout, RunConfig};

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name.to_string());
        }
    }

    fn error(&mut self, name: &str, e: impl std::fmt::Display) {
        self.check(name, false, format!("error: {e}"));
    }
}

fn config_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.conf")
}

fn base_config() -> RunConfig {
    RunConfig::parse_text(&std::fs::read_to_string(config_file()).unwrap()).unwrap()
}

fn numeric_core(s: &mut Suite) {
    let t0 = Instant::now();
    let mut worst_smooth: f64 = 0.0;
    let mut worst_kinked: f64 = 0.0;
    let mut names = Vec::new();
    for case in op_suite(11) {
        match case.run(1e-5) {
            Ok(e) if case.smooth => worst_smooth = worst_smooth.max(e),
            Ok(e) => worst_kinked = worst_kinked.max(e),
            Err(e) => return s.error("numeric core", e),
        }
        names.push(case.name);
    }
    // Gradient of the neutralisation loss through a linear head and mean pooling, with respect
    // to additive perturbations of every hidden row.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = AttributeHead::new(64, 2, 9).unwrap();
    let mut worst_ntrl: f64 = 0.0;
    for t in [1usize, 4, 9] {
        let hidden = Tensor::uniform(&[t, 64], 1.0, &mut rng);
        let f = |g: &mut Graph, delta: Var| -> Result<Var, AutodiffError> {
            let h = g.constant(hidden.clone())?;
            let x = g.add(h, delta)?;
            let w = g.constant(Tensor::filled(&[1, t], 1.0 / t as f64))?;
            let pooled = g.matmul(w, x)?;
            let p = head.bind(g, false)?;
            let logits = head.logits_var(g, &p, pooled)?;
            neutralization_loss_var(g, logits)
        };
        let delta = Tensor::uniform(&[t, 64], 0.5, &mut rng);
        match finite_diff_check(f, &delta, 1e-5) {
            Ok(e) => worst_ntrl = worst_ntrl.max(e),
            Err(e) => return s.error("numeric core", e),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    s.check(
        "numeric core",
        worst_smooth < 1e-6 && worst_kinked < 1e-4 && worst_ntrl < 1e-6 && secs < 60.0,
        format!(
            "{} op cases, smooth max rel err {worst_smooth:.2e} (< 1e-6), others {worst_kinked:.2e} (< 1e-4), \
             grad L_ntrl wrt perturbation {worst_ntrl:.2e} (< 1e-6), {secs:.1}s (< 60s)",
            names.len()
        ),
    );
}

fn neutralization_math(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for c in [2usize, 3, 4] {
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(1e-3..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let kl = dist::kl_divergence(&dist::uniform(c), &p).unwrap();
            worst = worst.max((neutralization_loss(&p) - (c as f64).ln() - kl).abs());
        }
    }
    s.check("neutralization identity", worst <= 1e-12, format!("max |L - ln|C| - KL(U||p)| = {worst:.2e} over 3000 draws (<= 1e-12)"));

    let n = 300;
    let step = 1.0 / n as f64;
    let mut best = (f64::INFINITY, [0.0; 3]);
    for i in 1..n {
        for j in 1..(n - i) {
            let p = [i as f64 * step, j as f64 * step, (n - i - j) as f64 * step];
            let l = neutralization_loss(&p);
            if l < best.0 {
                best = (l, p);
            }
        }
    }
    let off = best.1.iter().map(|v| (v - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    s.check(
        "neutralization minimum",
        off <= step,
        format!("grid argmin {:?} is {off:.4} from uniform (resolution {step:.4})", best.1.map(|v| (v * 1e4).round() / 1e4)),
    );
}

fn bleu_oracle(s: &mut Suite) {
    let hand = bleu4(&[vec!["a", "b", "c", "d", "e"]], &[vec!["a", "b", "c", "d"]]).unwrap();
    s.check("bleu hand example", format!("{hand:.4}") == "0.6687", format!("{hand:.6} (want 0.6687)"));

    // Brute force: every n-gram of the candidate is looked up by linear scan in both sentences.
    fn oracle(pairs: &[(Vec<u8>, Vec<u8>)]) -> ([u64; 4], [u64; 4], u64, u64) {
        let (mut m, mut t, mut cl, mut rl) = ([0u64; 4], [0u64; 4], 0, 0);
        for (c, r) in pairs {
            cl += c.len() as u64;
            rl += r.len() as u64;
            for n in 1..=4usize {
                if c.len() < n {
                    continue;
                }
                let cg: Vec<&[u8]> = c.windows(n).collect();
                let rg: Vec<&[u8]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
                let mut seen: Vec<&[u8]> = Vec::new();
                for g in &cg {
                    if seen.contains(g) {
                        continue;
                    }
                    seen.push(g);
                    let in_c = cg.iter().filter(|x| *x == g).count() as u64;
                    let in_r = rg.iter().filter(|x| *x == g).count() as u64;
                    m[n - 1] += in_c.min(in_r);
                }
                t[n - 1] += cg.len() as u64;
            }
        }
        (m, t, cl, rl)
    }
    fn score(o: &([u64; 4], [u64; 4], u64, u64)) -> f64 {
        if o.0.iter().any(|&v| v == 0) {
            return 0.0;
        }
        let lp: f64 = (0..4).map(|i| (o.0[i] as f64 / o.1[i] as f64).ln()).sum::<f64>() / 4.0;
        let bp = if o.2 < o.3 { (1.0 - o.3 as f64 / o.2 as f64).exp() } else { 1.0 };
        bp * lp.exp()
    }
    fn all_up_to(max: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max {
            let next: Vec<Vec<u8>> = frontier
                .iter()
                .flat_map(|s: &Vec<u8>| (0..5u8).map(move |a| [s.clone(), vec![a]].concat()))
                .collect();
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }
    let mut checked = 0usize;
    let mut mismatch = None;
    let mut compare = |pairs: Vec<(Vec<u8>, Vec<u8>)>| {
        let (cs, rs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let st = bleu_stats(&cs, &rs).unwrap();
        let o = oracle(&pairs);
        checked += 1;
        if (st.matches, st.totals, st.candidate_len, st.reference_len) != o || st.score() != score(&o) {
            mismatch.get_or_insert(pairs);
        }
    };
    let short = all_up_to(3);
    for c in short.iter().filter(|c| !c.is_empty()) {
        for r in short.iter().filter(|r| !r.is_empty()) {
            compare(vec![(c.clone(), r.clone())]);
        }
    }
    let reference: Vec<u8> = vec![0, 1, 2, 0, 1, 3, 4, 0];
    let reversed: Vec<u8> = reference.iter().rev().copied().collect();
    for c in all_up_to(8).into_iter().filter(|c| !c.is_empty()) {
        compare(vec![(c.clone(), reference.clone())]);
        compare(vec![(c, reversed.clone())]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20_000 {
        let k = rng.gen_range(1..=5);
        let pairs = (0..k)
            .map(|_| {
                let sent = |rng: &mut ChaCha8Rng| (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..5u8)).collect();
                (sent(&mut rng), sent(&mut rng))
            })
            .collect();
        compare(pairs);
    }
    s.check(
        "bleu oracle",
        mismatch.is_none(),
        match &mismatch {
            None => format!("{checked} corpora agree exactly with the brute-force oracle"),
            Some(p) => format!("mismatch on {p:?}"),
        },
    );
}

fn gradient_reversal(s: &mut Suite, scratch: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
    let w = Tensor::uniform(&[3, 4], 2.0, &mut rng);
    let mut exact = true;
    for lambda in [0.0, 0.5, 1.0, 2.5] {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true).unwrap();
        let r = g.grad_reverse(xv, lambda).unwrap();
        exact &= g.value(r) == &x;
        let wv = g.constant(w.clone()).unwrap();
        let m = g.mul(r, wv).unwrap();
        let loss = g.sum(m).unwrap();
        g.backward(loss).unwrap();
        let want: Vec<f64> = w.data().iter().map(|v| -lambda * v).collect();
        exact &= g.grad(xv).unwrap().data() == want.as_slice();
    }
    s.check("gradient reversal forward/backward", exact, "identity forward, -lambda * g backward, bit-exact for lambda in {0, 0.5, 1, 2.5}".into());

    let mut cfg = base_config();
    cfg.out = scratch.to_path_buf();
    for (k, v) in [("corpus.train_docs", "600"), ("corpus.valid_docs", "60"), ("corpus.test_docs", "200"), ("train.seq2seq_epochs", "6")] {
        cfg.set(k, v).unwrap();
    }
    let layout = Layout::new(scratch);
    let result = (|| -> Result<(f64, f64), Box<dyn std::error::Error>> {
        gen_corpus(&cfg, &layout)?;
        let data = Data::load(&layout)?;
        let ex = |rows: &[depen_core::pipeline::SentenceRow]| {
            rows.iter().map(|r| LabeledExample { tokens: r.tokens.clone(), label: r.attribute }).collect::<Vec<_>>()
        };
        let (train, valid, test) = (ex(&data.train), ex(&data.valid), ex(&data.test));
        let probe_acc = |lambda: f64| -> Result<f64, Box<dyn std::error::Error>> {
            let mut model = Seq2Seq::new(cfg.seq2seq_config(data.vocab.len()), 61)?;
            let mut disc = AttributeHead::new(cfg.model_d_model, 2, 61)?;
            let adv = AdvConfig { lambda_rev: lambda, ..cfg.adv.clone() };
            adv_train(&mut model, &mut disc, &train, &valid, &cfg.adv_training(61), &adv, cfg.train_mask_fraction)?;
            Ok(train_probe(&model, &train, &test, &cfg.head_training(62))?.2)
        };
        Ok((probe_acc(1.0)?, probe_acc(0.0)?))
    })();
    match result {
        Ok((adv, control)) => s.check(
            "gradient reversal probe",
            adv < control,
            format!("probe accuracy on encoder states: lambda=1 {adv:.4} < lambda=0 control {control:.4}"),
        ),
        Err(e) => s.error("gradient reversal probe", e),
    }
}

fn detect_efficacy(s: &mut Suite, scratch: &Path) {
    let mut cfg = RunConfig::default();
    cfg.out = scratch.to_path_buf();
    cfg.seed = 3;
    cfg.set("corpus.p_leak", "1.0").unwrap();
    let layout = Layout::new(scratch);
    let result = (|| -> Result<(usize, usize, f64), Box<dyn std::error::Error>> {
        gen_corpus(&cfg, &layout)?;
        let data = Data::load(&layout)?;
        let ex = |rows: &[depen_core::pipeline::SentenceRow]| {
            rows.iter().map(|r| LabeledExample { tokens: r.tokens.clone(), label: r.attribute }).collect::<Vec<_>>()
        };
        let c = EncoderClassifierConfig { encoder: cfg.encoder_config(data.vocab.len()), num_classes: 2 };
        let mut f = EncoderClassifier::new(c, 71)?;
        train_classifier(&mut f, &ex(&data.train), &ex(&data.valid), &cfg.classifier_training(71))?;
        let sentences: Vec<Vec<usize>> = data.test.iter().map(|r| r.tokens.clone()).collect();
        let masked = detect_pipeline(&f, &sentences, cfg.detect_k, Aggregation::default())?;
        let spec = CorpusSpec::reference_letters(0, 0, 1.0);
        let (mut bearing, mut hit) = (0, 0);
        for m in &masked {
            let markers: Vec<usize> =
                (0..m.original.len()).filter(|&i| spec.marker_class(data.vocab.token(m.original[i])).is_some()).collect();
            if !markers.is_empty() {
                bearing += 1;
                if markers.iter().any(|i| m.positions.contains(i)) {
                    hit += 1;
                }
            }
        }
        let probs = f.predict_proba(&masked.iter().map(|m| m.tokens.clone()).collect::<Vec<_>>())?;
        let labels: Vec<usize> = data.test.iter().map(|r| r.attribute).collect();
        Ok((hit, bearing, depen_core::models::accuracy(&probs, &labels)))
    })();
    match result {
        Ok((hit, bearing, acc)) => {
            let rate = hit as f64 / bearing.max(1) as f64;
            s.check("detect marker recall", rate >= 0.8, format!("marker masked in {hit}/{bearing} = {rate:.4} (>= 0.80) at k=20"));
            s.check("detect masked accuracy", (acc - 0.5).abs() <= 0.1, format!("classifier accuracy on masked sentences {acc:.4} (chance 0.5 +- 0.1)"));
        }
        Err(e) => s.error("detect efficacy", e),
    }
}

fn full_run(out: &Path) -> Result<f64, String> {
    let t0 = Instant::now();
    let cfg = config_file();
    let mut steps: Vec<Vec<String>> =
        ["gen-corpus", "train-classifier", "train-seq2seq", "train-heads", "detect"].iter().map(|c| vec![c.to_string()]).collect();
    for m in ["depen", "den", "pen", "rb", "wd", "adv"] {
        steps.push(vec!["rewrite".into(), "--method".into(), m.into()]);
    }
    steps.push(vec!["evaluate".into()]);
    for step in steps {
        let mut args = vec!["depen".to_string()];
        args.extend(step.iter().cloned());
        args.extend(["--config".into(), cfg.display().to_string(), "--out".into(), out.display().to_string()]);
        let code = main_with(Cli::try_parse_from(&args).map_err(|e| e.to_string())?);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", step.join(" ")));
        }
    }
    Ok(t0.elapsed().as_secs_f64())
}

fn end_to_end(s: &mut Suite, report: &EvalReport, secs: f64) {
    let row = |m: &str| report.row(m).unwrap_or_else(|| panic!("report has no {m} row"));
    let (orig, depen, den, pen) = (row("original"), row("depen"), row("den"), row("pen"));
    s.check("e2e (a) original bias accuracy", orig.bias_acc >= 0.85, format!("{:.4} (>= 0.85)", orig.bias_acc));
    s.check(
        "e2e (b) DePeN bias accuracy and confidence",
        depen.bias_acc <= 0.65 && depen.bias_conf <= 0.65,
        format!("acc {:.4}, conf {:.4} (both <= 0.65)", depen.bias_acc, depen.bias_conf),
    );
    s.check("e2e (c) DeN above DePeN", den.bias_acc > depen.bias_acc, format!("DeN acc {:.4} > DePeN acc {:.4}", den.bias_acc, depen.bias_acc));
    s.check("e2e (d) PeN BLEU below DePeN", pen.bleu4 < depen.bleu4, format!("PeN BLEU4 {:.4} < DePeN BLEU4 {:.4}", pen.bleu4, depen.bleu4));
    s.check(
        "e2e (e) outcome preserved",
        depen.outcome_acc >= 0.9 * orig.outcome_acc,
        format!("DePeN outcome acc {:.4} >= 0.9 x {:.4}", depen.outcome_acc, orig.outcome_acc),
    );
    s.check("e2e (f) DePeN BLEU", depen.bleu4 >= 0.3, format!("{:.4} (>= 0.3)", depen.bleu4));
    s.check("e2e runtime", secs <= 1200.0, format!("{secs:.0}s (<= 1200s on one core)"));
}

fn reductions(s: &mut Suite, run: &Path) {
    let layout = Layout::new(run);
    let cfg = base_config();
    let result = (|| -> Result<(usize, usize), Box<dyn std::error::Error>> {
        let load = |name: &str| -> Result<Checkpoint, Box<dyn std::error::Error>> {
            Ok(Checkpoint::from_bytes(&std::fs::read(layout.model(name))?)?)
        };
        let data = Data::load(&layout)?;
        let f = EncoderClassifier::from_checkpoint(&load("detector")?)?;
        let g = Seq2Seq::from_checkpoint(&load("seq2seq")?)?;
        let head = AttributeHead::from_checkpoint(&load("head")?)?;
        let sentences: Vec<Vec<usize>> = data.test.iter().take(100).map(|r| r.tokens.clone()).collect();
        let masked = detect_pipeline(&f, &sentences, cfg.detect_k, Aggregation::default())?;
        let disabled = PerturbConfig { step_size: 0.0, kl_anchor: 0.0, fusion_weight: 1.0, ..cfg.perturb.clone() };
        let (mut den_same, mut wd_same) = (0, 0);
        for (s, m) in sentences.iter().zip(&masked) {
            let a = full_rewrite(&f, &g, &head, m, &disabled, cfg.decode_max_len)?.tokens;
            let b = den_rewrite(&f, &g, s, cfg.detect_k, cfg.decode_max_len)?;
            den_same += usize::from(a == b);
            let w = weighted_decode(&g, s, &Default::default(), 1.0, cfg.decode_max_len)?;
            wd_same += usize::from(w == g.greedy_decode(s, cfg.decode_max_len)?);
        }
        Ok((den_same, wd_same))
    })();
    match result {
        Ok((den_same, wd_same)) => {
            s.check("reduction DePeN(eta=0, kl=0, gamma=1) = DeN", den_same == 100, format!("{den_same}/100 token-identical"));
            s.check("reduction WD(alpha=1, no flags) = greedy", wd_same == 100, format!("{wd_same}/100 token-identical"));
        }
        Err(e) => s.error("reduction identities", e),
    }
}

fn main() {
    let mut s = Suite { failed: vec![] };
    let tmp = tempfile::tempdir().unwrap();
    numeric_core(&mut s);
    neutralization_math(&mut s);
    bleu_oracle(&mut s);
    gradient_reversal(&mut s, &tmp.path().join("gr"));
    detect_efficacy(&mut s, &tmp.path().join("detect"));

    let (first, second) = (tmp.path().join("run1"), tmp.path().join("run2"));
    match full_run(&first) {
        Ok(secs) => {
            match load_report(&Layout::new(&first)) {
                Ok(report) => {
                    println!("{}", report.table().trim_end());
                    end_to_end(&mut s, &report, secs);
                }
                Err(e) => s.error("e2e", e),
            }
            reductions(&mut s, &first);
            match full_run(&second) {
                Ok(_) => {
                    let read = |p: &Path| std::fs::read(Layout::new(p).report()).unwrap_or_default();
                    let (a, b) = (read(&first), read(&second));
                    s.check("determinism", !a.is_empty() && a == b, format!("two seeded runs: reports of {} and {} bytes, identical={}", a.len(), b.len(), a == b));
                }
                Err(e) => s.error("determinism", e),
            }
        }
        Err(e) => s.error("e2e", e),
    }

    if s.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", s.failed.len(), s.failed.join(", "));
        std::process::exit(1);
    }
}
