use std::fs;
use std::path::Path;

use depen_core::baselines::{den_rewrite, full_rewrite};
use depen_core::detect::{detect_pipeline, Aggregation};
use depen_core::models::{AttributeHead, Checkpoint, EncoderClassifier, Seq2Seq};
use depen_core::pipeline::{load_report, run, Data, Layout};
use depen_core::{Command, Method, PerturbConfig, RunConfig};

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse_text(
        "seed = 9
         corpus.train_docs = 80
         corpus.valid_docs = 10
         corpus.test_docs = 20
         corpus.context_tilt = 0.2
         model.d_model = 16
         model.heads = 2
         model.ff_dim = 16
         model.layers = 1
         train.classifier_epochs = 2
         train.seq2seq_epochs = 2
         train.head_epochs = 2
         perturb.step_size = 5
         perturb.grad_clip = 0
         decode.max_len = 12",
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn run_all(cfg: &RunConfig) {
    for c in [Command::GenCorpus, Command::TrainClassifier, Command::TrainSeq2Seq, Command::TrainHeads, Command::Detect] {
        run(c, cfg).unwrap();
    }
    for m in Method::ALL {
        run(Command::Rewrite(m), cfg).unwrap();
    }
    run(Command::Evaluate, cfg).unwrap();
}

fn checkpoint(layout: &Layout, name: &str) -> Checkpoint {
    Checkpoint::from_bytes(&fs::read(layout.model(name)).unwrap()).unwrap()
}

#[test]
fn tiny_run_is_complete_deterministic_and_reduces_correctly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&tiny(&a));
    run_all(&tiny(&b));

    let layout = Layout::new(&a);
    let report = load_report(&layout).unwrap();
    let data = Data::load(&layout).unwrap();
    assert_eq!(report.rows[0].method, "original");
    assert_eq!(report.rows.len(), 1 + Method::ALL.len());
    for row in &report.rows {
        assert_eq!(row.sentences, data.test.len());
        assert!((0.0..=1.0).contains(&row.bias_acc) && (0.0..=1.0).contains(&row.bleu4));
    }
    assert_eq!(report.row("original").unwrap().bleu4, 1.0);
    let sums: Vec<&String> = report.checksums.values().collect();
    assert!(sums.windows(2).any(|w| w[0] != w[1]), "checkpoint checksums should differ: {sums:?}");

    let read = |p: &Path| fs::read(Layout::new(p).report()).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read(layout.rewrites(Method::Depen)).unwrap(), fs::read(Layout::new(&b).rewrites(Method::Depen)).unwrap());

    let cfg = tiny(&a);
    let f = EncoderClassifier::from_checkpoint(&checkpoint(&layout, "detector")).unwrap();
    let g = Seq2Seq::from_checkpoint(&checkpoint(&layout, "seq2seq")).unwrap();
    let head = AttributeHead::from_checkpoint(&checkpoint(&layout, "head")).unwrap();
    let sentences: Vec<Vec<usize>> = data.test.iter().map(|r| r.tokens.clone()).collect();
    let masked = detect_pipeline(&f, &sentences, cfg.detect_k, Aggregation::default()).unwrap();
    for (s, m) in sentences.iter().zip(&masked) {
        let depen = full_rewrite(&f, &g, &head, m, &PerturbConfig::disabled(), cfg.decode_max_len).unwrap();
        assert_eq!(depen.tokens, den_rewrite(&f, &g, s, cfg.detect_k, cfg.decode_max_len).unwrap());
    }
}

#[test]
fn commands_fail_cleanly_on_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for c in [Command::TrainClassifier, Command::Detect, Command::Rewrite(Method::Rb), Command::Evaluate, Command::Report] {
        let err = run(c, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{c:?}: {err}");
    }
    run(Command::GenCorpus, &cfg).unwrap();
    let err = run(Command::Rewrite(Method::Depen), &cfg).unwrap_err();
    assert!(err.to_string().contains(".ckpt") || err.to_string().contains("masked"), "{err}");
}
