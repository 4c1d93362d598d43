use proptest::prelude::*;

use randq_core::seq2seq::{Model, ModelConfig, ParamStore};
use randq_core::train::{decode_checkpoint, encode_checkpoint, Checkpoint};
use randq_core::{Error, Tensor};

fn small_checkpoint() -> Checkpoint {
    let config = ModelConfig { n_enc_layers: 1, n_dec_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, ..ModelConfig::default() };
    let model = Model::init(config, 3).unwrap();
    let ema: ParamStore = model.params.iter().map(|(n, t)| (n.to_string(), t.map(|v| v * 0.5))).collect();
    Checkpoint { step: 17, config_digest: "f00d".into(), params: model.params.clone(), ema }
}

fn is_format_error(r: &randq_core::Result<Checkpoint>) -> bool {
    matches!(r, Err(Error::Format { .. } | Error::UnsupportedVersion { .. }))
}

#[test]
fn model_checkpoint_round_trips_through_both_encoders() {
    let c = small_checkpoint();
    let bytes = c.to_bytes();
    assert_eq!(encode_checkpoint(&c.to_file()), bytes);
    let file = decode_checkpoint(&bytes).unwrap();
    assert!(Checkpoint::from_file(file).unwrap().bit_eq(&c));
}

#[test]
fn special_float_values_survive() {
    let params: ParamStore = [(
        "w".to_string(),
        Tensor::vector(vec![f32::NAN, f32::INFINITY, f32::NEG_INFINITY, -0.0, f32::MIN_POSITIVE / 2.0, f32::MAX]),
    )]
    .into_iter()
    .collect();
    let c = Checkpoint { step: 0, config_digest: String::new(), params: params.clone(), ema: params };
    assert!(Checkpoint::from_bytes(&c.to_bytes()).unwrap().bit_eq(&c));
}

proptest! {
    #[test]
    fn flipped_bits_are_format_errors(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = small_checkpoint().to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(is_format_error(&Checkpoint::from_bytes(&bytes)));
    }

    #[test]
    fn truncations_are_format_errors(cut in any::<prop::sample::Index>()) {
        let bytes = small_checkpoint().to_bytes();
        let cut = cut.index(bytes.len());
        prop_assert!(is_format_error(&Checkpoint::from_bytes(&bytes[..cut])));
    }

    #[test]
    fn arbitrary_bytes_never_panic(mut bytes in prop::collection::vec(any::<u8>(), 0..256), header in any::<bool>()) {
        if header && bytes.len() >= 5 {
            bytes[..4].copy_from_slice(b"RQCK");
            bytes[4] = 1;
        }
        prop_assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
