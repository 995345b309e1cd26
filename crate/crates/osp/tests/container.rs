use osp::container::{Container, NamedTensor, TensorData};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn random_tensor(rng: &mut rand::rngs::StdRng, i: usize) -> NamedTensor {
    let rank = rng.gen_range(0..4);
    let dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..6)).collect();
    let n: usize = dims.iter().product();
    let data = match rng.gen_range(0..4) {
        // raw bit patterns, NaN payloads included
        0 => TensorData::F64((0..n).map(|_| f64::from_bits(rng.gen())).collect()),
        1 => TensorData::F32((0..n).map(|_| f32::from_bits(rng.gen())).collect()),
        2 => TensorData::U8((0..n).map(|_| rng.gen()).collect()),
        _ => TensorData::U32((0..n).map(|_| rng.gen()).collect()),
    };
    NamedTensor::new(&format!("t{i:04}.w"), &dims, data).unwrap()
}

fn random_container(seed: u64, count: usize) -> Container {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut c = Container::new();
    for i in 0..count {
        c.push(random_tensor(&mut rng, i)).unwrap();
    }
    c
}

#[test]
fn thousand_tensors_round_trip_byte_identically() {
    let c = random_container(2024, 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.ospt");
    c.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Container::load(&path).unwrap();
    assert_eq!(back.tensors.len(), 1000);
    assert_eq!(back.to_bytes(), bytes);
    for (a, b) in c.tensors.iter().zip(&back.tensors) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.dims, b.dims);
        // compare bits so NaN payloads count
        let bits = |t: &TensorData| -> Vec<u64> {
            match t {
                TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
                TensorData::F32(v) => v.iter().map(|x| u64::from(x.to_bits())).collect(),
                TensorData::U8(v) => v.iter().map(|&x| u64::from(x)).collect(),
                TensorData::U32(v) => v.iter().map(|&x| u64::from(x)).collect(),
            }
        };
        assert_eq!(a.data.dtype(), b.data.dtype());
        assert_eq!(bits(&a.data), bits(&b.data));
    }
}

#[test]
fn every_single_byte_corruption_is_detected() {
    let bytes = random_container(7, 6).to_bytes();
    for pos in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff, 0x5a] {
            let mut b = bytes.clone();
            b[pos] ^= flip;
            assert!(Container::from_bytes(&b).is_err(), "byte {pos} ^ {flip:#x} went unnoticed");
        }
    }
}

#[test]
fn truncation_and_extension_are_detected() {
    let bytes = random_container(8, 4).to_bytes();
    for len in 0..bytes.len() {
        assert!(Container::from_bytes(&bytes[..len]).is_err(), "prefix of {len} bytes accepted");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Container::from_bytes(&longer).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_single_byte_changes_on_larger_files(seed in 0u64..1000, pos_frac in 0.0f64..1.0, v in any::<u8>()) {
        let bytes = random_container(seed, 40).to_bytes();
        let pos = ((bytes.len() - 1) as f64 * pos_frac) as usize;
        prop_assume!(bytes[pos] != v);
        let mut b = bytes.clone();
        b[pos] = v;
        prop_assert!(Container::from_bytes(&b).is_err());
    }
}
