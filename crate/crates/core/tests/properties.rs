use std::collections::BTreeSet;
use std::sync::OnceLock;

use num_bigint::{BigInt, BigUint};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use dvfl::data::{align_to_intersection, ids_of, sequential_partition, vertical_split, Record, VerticalSplitSpec};
use dvfl::filters::{encode_sigma, positions, BloomFilter, FilterParams, GarbledBloomFilter};
use dvfl::nn::{ModelConfig, SplitModel, Tensor2, WeightVector};
use dvfl::paillier::{keygen, FixedPointCodec, PrivateKey, PublicKey};
use dvfl::ps::{aggregate, join_chunks, split_chunks};
use dvfl::psi::{distributed_psi, hash_partition, psi_pair, IdSet, PsiConfig};
use dvfl::secure::{encrypt_activation, homomorphic_linear, masked_decrypt_exchange, MaskState, Producer};

fn key64() -> &'static (PublicKey, PrivateKey) {
    static KEY: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
    KEY.get_or_init(|| keygen(64, 1).unwrap())
}

fn key128() -> &'static (PublicKey, PrivateKey) {
    static KEY: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
    KEY.get_or_init(|| keygen(128, 2).unwrap())
}

fn big_below(n: &BigUint) -> impl Strategy<Value = BigUint> {
    let n = n.clone();
    proptest::collection::vec(any::<u8>(), 32).prop_map(move |b| BigUint::from_bytes_le(&b) % &n)
}

fn id_set(max: usize) -> impl Strategy<Value = BTreeSet<u16>> {
    proptest::collection::btree_set(0u16..600, 0..max)
}

fn to_ids(s: &BTreeSet<u16>) -> IdSet {
    IdSet::from_raw(s.iter().map(|v| format!("u{v}").into_bytes()))
}

fn records(ids: &[u16], dim: usize, labelled: bool) -> Vec<Record> {
    ids.iter()
        .map(|&i| Record {
            id: format!("r{i}").into_bytes(),
            features: (0..dim).map(|d| f64::from(i) * 0.5 + d as f64).collect(),
            label: labelled.then_some((i % 2) as u8),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn paillier_add_is_plaintext_add(m1 in big_below(key128().0.n()), m2 in big_below(key128().0.n()), seed in any::<u64>()) {
        let (pk, sk) = key128();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = pk.add(&pk.encrypt(&m1, &mut rng).unwrap(), &pk.encrypt(&m2, &mut rng).unwrap()).unwrap();
        prop_assert_eq!(sk.decrypt(&c).unwrap(), (m1 + m2) % pk.n());
    }

    #[test]
    fn paillier_homomorphisms(a in big_below(key64().0.n()), b in big_below(key64().0.n()), seed in any::<u64>()) {
        let (pk, sk) = key64();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ca = pk.encrypt(&a, &mut rng).unwrap();
        let cb = pk.encrypt(&b, &mut rng).unwrap();
        prop_assert!(ca.value() < pk.n_squared());
        prop_assert_eq!(sk.decrypt(&pk.add(&ca, &cb).unwrap()).unwrap(), (&a + &b) % pk.n());
        prop_assert_eq!(sk.decrypt(&pk.scalar_mul(&ca, &b).unwrap()).unwrap(), (&a * &b) % pk.n());
    }

    #[test]
    fn codec_integer_round_trip(x in any::<i64>()) {
        let codec = FixedPointCodec::new(&key128().0, 16);
        let x = BigInt::from(x);
        prop_assert_eq!(codec.decode_int(&codec.encode_int(&x).unwrap()), x);
    }

    #[test]
    fn codec_real_round_trip(v in -1.0e9f64..1.0e9) {
        let codec = FixedPointCodec::new(&key128().0, 16);
        let back = codec.decode(&codec.encode(v).unwrap());
        prop_assert!((back - v).abs() <= 2f64.powi(-16));
    }

    #[test]
    fn fixed_point_dot_product(u in proptest::collection::vec(-10.0f64..10.0, 1..12), seed in any::<u64>()) {
        let (pk, sk) = key128();
        let codec = FixedPointCodec::new(pk, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w: Vec<f64> = u.iter().enumerate().map(|(i, x)| (x * 1.7 + i as f64) % 10.0).collect();
        let mut acc = pk.zero_ciphertext();
        for (ui, wi) in u.iter().zip(&w) {
            let c = pk.encrypt(&codec.encode(*ui).unwrap(), &mut rng).unwrap();
            acc = pk.add(&acc, &pk.scalar_mul_signed(&c, &codec.quantize(*wi).unwrap()).unwrap()).unwrap();
        }
        let got = codec.decode_scaled(&sk.decrypt(&acc).unwrap(), 32);
        let want: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        let max_u = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let max_w = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let bound = 2f64.powi(-16) * u.len() as f64 * (1.0 + max_u + max_w);
        prop_assert!((got - want).abs() <= bound, "{got} vs {want}");
    }

    #[test]
    fn bloom_popcount_and_determinism(items in proptest::collection::btree_set(proptest::collection::vec(any::<u8>(), 1..10), 1..80), seed in any::<u64>()) {
        let params = FilterParams::new(items.len(), 1e-4).unwrap();
        let build = || {
            let mut bf = BloomFilter::with_params(&params, seed);
            for x in &items {
                bf.insert(x);
            }
            bf
        };
        let bf = build();
        prop_assert!(bf.popcount() <= u64::from(params.k) * items.len() as u64);
        prop_assert_eq!(bf.to_bytes(), build().to_bytes());
        let n = items.len() as f64;
        prop_assert_eq!(params.m, (-n * 1e-4f64.ln() / 2f64.ln().powi(2)).ceil() as u64);
    }

    #[test]
    fn gbf_shares_reconstruct_and_break(items in proptest::collection::btree_set(proptest::collection::vec(any::<u8>(), 1..10), 1..60), seed in any::<u64>()) {
        let items: Vec<Vec<u8>> = items.into_iter().collect();
        let params = FilterParams::new(items.len(), 1e-6).unwrap();
        let gbf = GarbledBloomFilter::build(&items, &params, 64, seed, seed ^ 1).unwrap();
        let victim = &items[seed as usize % items.len()];
        let mut acc = vec![0u8; gbf.slot_width()];
        let mut pos = positions(victim, gbf.m(), gbf.k(), gbf.hash_seed());
        for &p in &pos {
            for (a, s) in acc.iter_mut().zip(gbf.slot(p)) {
                *a ^= s;
            }
        }
        prop_assert_eq!(&acc, &encode_sigma(victim, 64, gbf.hash_seed()));
        pos.sort_unstable();
        pos.dedup();
        let mut broken = gbf.clone();
        let slot = broken.slot_mut(pos[0]);
        for (i, b) in slot.iter_mut().enumerate() {
            *b ^= 0x5a ^ i as u8 | 1;
        }
        prop_assert!(!broken.query(victim));
    }

    #[test]
    fn psi_is_exact_and_sound(a in id_set(200), p in id_set(200)) {
        let (ia, ip) = (to_ids(&a), to_ids(&p));
        let got = psi_pair(&ia, &ip, &PsiConfig::default()).unwrap();
        prop_assert!(got.is_subset(&ia));
        prop_assert_eq!(got, to_ids(&a.intersection(&p).copied().collect()));
    }

    #[test]
    fn psi_bucket_count_invariance(a in id_set(300), p in id_set(300), seed in any::<u64>()) {
        let (ia, ip) = (to_ids(&a), to_ids(&p));
        let cfg = PsiConfig { partition_seed: seed, ..PsiConfig::default() };
        let reference = distributed_psi(&ia, &ip, 1, &cfg).unwrap();
        for n in [2, 3, 8] {
            prop_assert_eq!(&distributed_psi(&ia, &ip, n, &cfg).unwrap(), &reference);
        }
    }

    #[test]
    fn hash_partition_is_a_cover(a in id_set(300), n in 1usize..9, seed in any::<u64>()) {
        let ids = to_ids(&a);
        let buckets = hash_partition(&ids, n, seed);
        prop_assert_eq!(buckets.len(), n);
        prop_assert_eq!(buckets.iter().map(IdSet::len).sum::<usize>(), ids.len());
        let mut union = IdSet::new();
        for b in &buckets {
            union.extend(b.clone());
        }
        prop_assert_eq!(&union, &ids);
        prop_assert_eq!(hash_partition(&ids, n, seed), buckets);
    }

    #[test]
    fn pairing_and_partition(a in id_set(120), p in id_set(120), n in 1usize..7) {
        let a: Vec<u16> = a.into_iter().collect();
        let p: Vec<u16> = p.into_iter().rev().collect();
        let ra = records(&a, 3, true);
        let rp = records(&p, 2, false);
        let common = ids_of(&ra).intersection(&ids_of(&rp));
        let aligned_a = align_to_intersection(&ra, &common);
        let aligned_p = align_to_intersection(&rp, &common);
        let sa = sequential_partition(aligned_a.clone(), n).shards;
        let sp = sequential_partition(aligned_p, n).shards;
        let lens: Vec<usize> = sa.iter().map(Vec::len).collect();
        prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        for (x, y) in sa.iter().zip(&sp) {
            prop_assert_eq!(x.iter().map(|r| &r.id).collect::<Vec<_>>(), y.iter().map(|r| &r.id).collect::<Vec<_>>());
        }
        prop_assert_eq!(sa.concat(), aligned_a);
    }

    #[test]
    fn vertical_split_is_lossless(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 1..20), cut in 0usize..=6) {
        let recs: Vec<Record> = rows.iter().enumerate().map(|(i, f)| Record { id: i.to_string().into_bytes(), features: f.clone(), label: Some(1) }).collect();
        let (a, p) = vertical_split(&recs, &VerticalSplitSpec::active_prefix(cut, 6)).unwrap();
        for ((r, x), y) in recs.iter().zip(&a).zip(&p) {
            prop_assert_eq!(&[x.features.clone(), y.features.clone()].concat(), &r.features);
            prop_assert_eq!(y.label, None);
        }
    }

    #[test]
    fn weight_vector_round_trip(seed in any::<u64>(), a in 1usize..6, p in 0usize..6) {
        let cfg = ModelConfig { seed, ..ModelConfig::with_inputs(a, p) };
        let model = SplitModel::init(&cfg);
        let w = model.weights();
        prop_assert_eq!(SplitModel::from_weights(&w).unwrap(), model.clone());
        let back = WeightVector::from_checkpoint(&w.to_checkpoint()).unwrap();
        prop_assert_eq!(back, w);
        let (act, pas) = model.clone().into_parties();
        prop_assert_eq!(SplitModel::from_parties(act, pas), model);
    }

    #[test]
    fn forward_stays_finite(seed in any::<u64>(), scale in 0.0f64..1e6) {
        let model = SplitModel::init(&ModelConfig { seed, ..ModelConfig::with_inputs(3, 2) });
        let xa = Tensor2::from_vec(2, 3, vec![scale, -scale, 0.5, 1.0, 2.0, -3.0]).unwrap();
        let xp = Tensor2::from_vec(2, 2, vec![-scale, scale, 0.0, 1.0]).unwrap();
        let batch = dvfl::nn::JointBatch { active: xa, passive: xp, labels: vec![1.0, 0.0] };
        let (loss, grads) = model.loss_and_grads(&batch).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert!(model.grads_vector(&grads).values.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn aggregation_is_order_insensitive(vs in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 5), 1..9), rot in 0usize..8) {
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let mean = aggregate(&refs).unwrap();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        let mean_r = aggregate(&rotated).unwrap();
        for (j, (x, y)) in mean.iter().zip(&mean_r).enumerate() {
            let want = vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64;
            prop_assert!((x - want).abs() <= 1e-9 * (1.0 + want.abs()));
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        let same = vec![vs[0].as_slice(); vs.len()];
        prop_assert_eq!(aggregate(&same).unwrap(), vs[0].clone());
    }

    #[test]
    fn chunks_round_trip(values in proptest::collection::vec(any::<f64>(), 0..10_000), round in any::<u64>()) {
        let chunks = split_chunks(&values, round);
        prop_assert!(chunks.iter().all(|c| c.values.len() <= 4096 && c.round == round));
        let back = join_chunks(&chunks).unwrap();
        prop_assert_eq!(back.len(), values.len());
        prop_assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn secure_linear_matches_plaintext(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..6, out in 1usize..6) {
        let (pk, sk) = key128();
        let codec = FixedPointCodec::new(pk, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let gen = |r: usize, c: usize, rng: &mut ChaCha20Rng| {
            use rand::Rng;
            Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        let x = gen(rows, cols, &mut rng);
        let w = gen(out, cols, &mut rng);
        let enc = encrypt_activation(&x, pk, &codec, Producer::Passive, &mut rng).unwrap();
        let mask = MaskState::random(rows, out, 16, &mut rng);
        let grid = homomorphic_linear(&enc, &w, &mask, pk, &codec, &mut rng).unwrap();
        let got = masked_decrypt_exchange(&grid, sk, &mask).unwrap();
        let want = x.matmul_bt(&w).unwrap();
        let bound = 2f64.powi(-16) * (cols as f64 + 2.0) * w.max_abs().max(1.0) * x.max_abs().max(1.0);
        for (g, t) in got.data().iter().zip(want.data()) {
            prop_assert!((g - t).abs() <= bound, "{g} vs {t}");
        }
    }
}

#[test]
fn encryption_is_randomized() {
    let (pk, _) = key128();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let m = BigUint::from(5u32);
    let distinct: BTreeSet<Vec<u8>> = (0..100).map(|_| pk.encrypt(&m, &mut rng).unwrap().value().to_bytes_le()).collect();
    assert!(distinct.len() >= 99);
}
