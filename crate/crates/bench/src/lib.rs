//! Shared fixtures for the criterion benches.

use drugprot_core::corpus::generate_instances;
use drugprot_core::model::{init_params, EncoderConfig, HeadKind, ModelParameters};
use drugprot_core::synthetic::{generate, SyntheticConfig};
use drugprot_core::tokenizer::{build_vocab, Vocabulary};
use drugprot_core::train::{encode_instances, EncodedInstance};
use drugprot_core::{SchemeKind, SentenceInstance};

pub struct Fixture {
    pub vocab: Vocabulary,
    pub instances: Vec<SentenceInstance>,
    pub encoded: Vec<EncodedInstance>,
}

/// A small synthetic corpus tagged with `scheme` and encoded at desk length.
pub fn fixture(n_docs: usize, scheme: SchemeKind) -> Fixture {
    let bundle = generate(&SyntheticConfig {
        n_docs,
        ..Default::default()
    });
    let instances = generate_instances(&bundle, scheme).instances;
    let vocab = build_vocab(instances.iter().map(|i| i.tagged_text.as_str()), 600, false).expect("vocab");
    let max_len = EncoderConfig::desk(vocab.len(), HeadKind::Cls, 0).max_len;
    let encoded = encode_instances(&instances, &vocab, max_len).expect("encodable");
    Fixture {
        vocab,
        instances,
        encoded,
    }
}

pub fn desk_model(vocab: &Vocabulary, head: HeadKind) -> ModelParameters {
    init_params(&EncoderConfig::desk(vocab.len(), head, 1)).expect("valid desk config")
}
