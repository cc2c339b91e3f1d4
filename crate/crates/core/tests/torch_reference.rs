//! Forward pass against activations recorded with PyTorch on a small
//! random-initialised network of the same topology.

use std::path::Path;

use d2feat::container::Container;
use d2feat::convnet::{forward, load_weights, ArchitectureSpec, Variant, FINAL_RELU_ENTRY, NORM_ENTRY};
use d2feat::{Image, Tensor3};

fn fixture() -> d2feat::convnet::WeightBank {
    load_weights(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/torch_tiny.d2wb")).unwrap()
}

fn entry_tensor(bank: &d2feat::convnet::WeightBank, name: &str) -> Tensor3 {
    let mut c = Container::new();
    c.insert(name, bank.extras[name].clone());
    c.tensor(name).unwrap()
}

fn max_diff(variant: Variant, out_entry: &str) -> f32 {
    let bank = fixture();
    let img = Image::from_tensor(entry_tensor(&bank, "__ref_in__")).unwrap();
    let want = entry_tensor(&bank, out_entry);
    let arch = ArchitectureSpec::for_bank(variant, &bank, None).unwrap();
    let got = forward(&img, &arch, &bank).unwrap();
    assert_eq!(got.shape(), want.shape());
    got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
}

#[test]
fn metadata_is_read_from_the_bank() {
    let bank = fixture();
    assert_eq!(bank.final_relu, Some(false));
    assert_eq!(bank.convs.len(), 10);
    assert!(!bank.extras.contains_key(NORM_ENTRY));
    assert!(!bank.extras.contains_key(FINAL_RELU_ENTRY));
    let arch = ArchitectureSpec::for_bank(Variant::Train, &bank, None).unwrap();
    assert_eq!(arch.output_channels(), 64);
    assert_eq!(arch.output_stride, 8);
}

#[test]
fn train_variant_matches_pytorch() {
    assert!(max_diff(Variant::Train, "__ref_out__") < 1e-4);
}

#[test]
fn test_variant_matches_pytorch() {
    assert!(max_diff(Variant::Test, "__ref_out_test__") < 1e-4);
}

#[test]
fn bank_survives_a_round_trip() {
    let bank = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.d2wb");
    d2feat::convnet::save_weights(&bank, &path).unwrap();
    assert_eq!(load_weights(&path).unwrap(), bank);
}
