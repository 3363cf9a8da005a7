mod common;

use std::collections::HashSet;

use common::{random_batch, rng, tiny_config};
use drugprot_core::corpus::generate_instances;
use drugprot_core::ensemble::{
    fuse, run_pipeline, stacker_loss, stacker_loss_and_grad, train_stacker, EncoderSettings, EnsembleGroup,
    EnsembleManifest, InstanceViews, ManifestGroup, MemberSpec, PipelineConfig, PipelineKind, StackerHyper,
    StackerParams,
};
use drugprot_core::model::{backward_gradients, batch_loss, init_params, ClassWeights, HeadKind, Parameters};
use drugprot_core::optim::{AdamW, AdamWConfig};
use drugprot_core::synthetic::{generate, SyntheticConfig};
use drugprot_core::tokenizer::{build_vocab, Vocabulary};
use drugprot_core::train::TrainHyper;
use drugprot_core::{CorpusBundle, RelationType, SchemeKind};
use rand::Rng;

fn small_setup(n_docs: usize, seed: u64) -> (CorpusBundle, Vocabulary) {
    let bundle = generate(&SyntheticConfig {
        n_docs,
        seed,
        ..Default::default()
    });
    let mut texts = Vec::new();
    for s in SchemeKind::ALL {
        texts.extend(generate_instances(&bundle, s).instances.into_iter().map(|i| i.tagged_text));
    }
    let vocab = build_vocab(texts.iter().map(String::as_str), 250, false).unwrap();
    (bundle, vocab)
}

fn small_config(kind: PipelineKind, members: Vec<MemberSpec>) -> PipelineConfig {
    PipelineConfig {
        kind,
        encoder: EncoderSettings {
            layers: 1,
            heads: 2,
            hidden: 16,
            ffn: 32,
            max_len: 64,
        },
        members,
        partition_seed: 2,
        train: TrainHyper {
            epochs: 2,
            ..Default::default()
        },
        stacker: StackerHyper {
            epochs: 4,
            hidden: 24,
            ..Default::default()
        },
    }
}

fn spec(head_kind: HeadKind, scheme: SchemeKind) -> MemberSpec {
    MemberSpec {
        head_kind,
        scheme,
        class_weighted: false,
        seed: 3,
    }
}

#[test]
fn stacker_gradient_matches_central_differences() {
    let mut r = rng(21);
    let params = StackerParams::init(10, 6, 4);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..10).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
    let features: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let labels: Vec<RelationType> = (0..5).map(|i| RelationType::from_index(i * 3 % 14).unwrap()).collect();
    let (_, grads) = stacker_loss_and_grad(&params, &features, &labels).unwrap();
    let h = 1e-5;
    let mut work = params.clone();
    for (ti, (name, g)) in grads.named_tensors().into_iter().enumerate() {
        for i in 0..g.len() {
            let orig = work.tensors_mut()[ti].data[i];
            work.tensors_mut()[ti].data[i] = orig + h;
            let up = stacker_loss(&work, &features, &labels).unwrap();
            work.tensors_mut()[ti].data[i] = orig - h;
            let down = stacker_loss(&work, &features, &labels).unwrap();
            work.tensors_mut()[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "{name}[{i}]: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn one_layer_model_overfits_eight_instances() {
    let cfg = tiny_config(HeadKind::Cls, 9);
    let mut params = init_params(&cfg).unwrap();
    let batch = random_batch(&mut rng(33), 8, &cfg);
    let refs: Vec<_> = batch.iter().map(|(s, l)| (s, *l)).collect();
    let weights = ClassWeights::uniform();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        },
        &params,
    );
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        let (l, grads) = backward_gradients(&params, &refs, &weights).unwrap();
        loss = l;
        if loss < 0.01 {
            break;
        }
        opt.step(&mut params, &grads).unwrap();
    }
    let final_loss = batch_loss(&params, &refs, &weights).unwrap();
    assert!(loss < 0.01 && final_loss < 0.01, "loss {loss}, final {final_loss}");
}

#[test]
fn stacked_run_keeps_members_frozen_and_emits_known_pairs() {
    let (bundle, vocab) = small_setup(50, 12);
    let cfg = small_config(
        PipelineKind::Run1Stack,
        vec![
            spec(HeadKind::Cls, SchemeKind::Anonymize),
            spec(HeadKind::Lstm, SchemeKind::Markers),
            spec(HeadKind::Attn, SchemeKind::Anonymize),
            spec(HeadKind::Cls, SchemeKind::Markers),
            spec(HeadKind::Attn, SchemeKind::Markers),
        ],
    );
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, &bundle, &vocab, dir.path()).unwrap();
    let g = &out.manifest.groups[0];
    let group = EnsembleGroup::load(1, &g.members).unwrap();
    let before = group.checksums();
    let views = InstanceViews::build(&bundle, &vocab, cfg.encoder.max_len, &group.schemes()).unwrap();
    let (stacker, _) = train_stacker(&group, &views, &cfg.stacker).unwrap();
    assert_eq!(group.checksums(), before);
    assert_eq!(EnsembleGroup::load(1, &g.members).unwrap().checksums(), before);
    assert_eq!(stacker.input_dim(), group.feature_dim());
    assert_eq!(group.feature_dim(), 5 * cfg.encoder.hidden);

    let test = generate(&SyntheticConfig {
        n_docs: 15,
        seed: 13,
        pmid_base: 70_000_000,
        ..Default::default()
    });
    let fused = fuse(&out.manifest, &test, &vocab).unwrap();
    let candidates: HashSet<(String, String, String)> = SchemeKind::ALL
        .iter()
        .flat_map(|&s| generate_instances(&test, s).instances)
        .map(|i| (i.pmid, i.chem.eid, i.gene.eid))
        .collect();
    for r in &fused.records {
        assert_ne!(r.rtype, RelationType::None);
        let key = (r.pmid.clone(), r.arg1.clone(), r.arg2.clone());
        assert!(candidates.contains(&key), "{r:?} is not a candidate pair");
    }
}

#[test]
fn voting_five_copies_of_one_model_equals_that_model() {
    let (bundle, vocab) = small_setup(40, 14);
    let cfg = small_config(PipelineKind::Run5Single, vec![spec(HeadKind::Attn, SchemeKind::Anonymize)]);
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, &bundle, &vocab, dir.path()).unwrap();
    assert_eq!(out.member_reports[0].1.epochs.len(), 2);
    let single = out.manifest.groups[0].members[0].clone();
    let copies = EnsembleManifest {
        kind: PipelineKind::Run4Vote,
        groups: vec![ManifestGroup {
            iteration: 1,
            members: vec![single; 5],
            stacker: None,
        }],
    };
    let test = generate(&SyntheticConfig {
        n_docs: 20,
        seed: 15,
        pmid_base: 80_000_000,
        ..Default::default()
    });
    let alone = fuse(&out.manifest, &test, &vocab).unwrap();
    let voted = fuse(&copies, &test, &vocab).unwrap();
    assert_eq!(voted.records, alone.records);
    assert!(voted.votes.iter().all(|v| v.fused == v.member_labels[0] && v.member_labels.len() == 5));
}

#[test]
fn fold_run_trains_five_members_on_distinct_dev_sets() {
    let (bundle, vocab) = small_setup(30, 16);
    let mut cfg = small_config(PipelineKind::Run4Vote, vec![spec(HeadKind::Cls, SchemeKind::Markers)]);
    cfg.train.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cfg, &bundle, &vocab, dir.path()).unwrap();
    assert_eq!(out.manifest.groups.len(), 1);
    assert_eq!(out.manifest.groups[0].members.len(), 5);
    let n_dev: Vec<usize> = out.member_reports.iter().map(|(_, r)| r.n_dev).collect();
    assert!(n_dev.iter().all(|&n| n > 0), "{n_dev:?}");
    assert_eq!(EnsembleManifest::load(&out.manifest_path).unwrap(), out.manifest);
}
