//! Property tests: codec round trips, parser robustness and partition invariants.

use std::path::PathBuf;

use proptest::prelude::*;
use stnhcl::checkpoint::Checkpoint;
use stnhcl::config::RunConfig;
use stnhcl::data::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, Domain, Manifest, ManifestRecord, Mask};
use stnhcl::numeric::Tensor;
use stnhcl::patch::PatchIdList;
use stnhcl::weighting::{partition_patches, Heatmap};

fn domain() -> impl Strategy<Value = Domain> {
    (0usize..4).prop_map(|i| Domain::from_index(i).unwrap())
}

fn tensor() -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(-1e6f32..1e6, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
    })
}

proptest! {
    #[test]
    fn ppm_round_trips_bytes(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let bytes: Vec<u8> = (0..3 * h * w).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let data: Vec<f64> = (0..3).flat_map(|c| (0..h * w).map(move |p| (c, p)))
            .map(|(c, p)| bytes[p * 3 + c] as f64 / 255.0).collect();
        let img = Tensor::new(&[3, h, w], data).unwrap();
        let enc = encode_ppm(&img).unwrap();
        let dec = decode_ppm(&enc).unwrap();
        prop_assert_eq!(encode_ppm(&dec).unwrap(), enc);
        prop_assert!(dec.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn pgm_round_trips(h in 1usize..12, w in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
        let mask = Mask { height: h, width: w, data: bits[..h * w].to_vec() };
        prop_assert_eq!(decode_pgm(&encode_pgm(&mask)).unwrap(), mask);
    }

    #[test]
    fn image_decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_ppm(&bytes);
        let _ = decode_pgm(&bytes);
        let mut p6 = b"P6\n2 2\n255\n".to_vec();
        p6.extend(&bytes);
        let _ = decode_ppm(&p6);
    }

    #[test]
    fn checkpoint_round_trips(entries in prop::collection::btree_map("[a-z.0-9]{1,12}", tensor(), 0..5)) {
        let mut ck = Checkpoint::default();
        for (n, t) in entries {
            ck.push(n, t);
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);

        if let Some((name, t)) = ck.entries.first().cloned() {
            ck.push(name, t);
            prop_assert!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap_err().is_validation());
        }
    }

    #[test]
    fn checkpoint_decoder_rejects_truncation(cut in 0usize..200) {
        let mut ck = Checkpoint::default();
        ck.push("w", Tensor::new(&[3, 4], (0..12).map(|i| i as f32).collect()).unwrap());
        ck.push("b", Tensor::new(&[4], vec![0.5; 4]).unwrap());
        let bytes = ck.to_bytes();
        if cut < bytes.len() {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            prop_assert!(err.is_validation());
        }
    }

    #[test]
    fn manifest_round_trips(recs in prop::collection::vec(("[a-z0-9_]{1,8}(/[a-z0-9_]{1,8}){0,2}\\.ppm", domain(), any::<u64>()), 0..8)) {
        let m = Manifest {
            records: recs.into_iter().map(|(p, domain, seed)| ManifestRecord { path: PathBuf::from(p), domain, seed }).collect(),
        };
        let text = m.render();
        prop_assert_eq!(Manifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn parsers_never_panic(text in "\\PC{0,80}") {
        let _ = Manifest::parse(&text);
        let _ = RunConfig::parse(&text);
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        iterations in 1usize..100_000,
        mu in 0.0f64..1.0,
        sigma in 0.01f64..5.0,
        lambda in 0.0f64..100.0,
        use_hcl in any::<bool>(),
        targets in prop::sample::subsequence(vec![Domain::Mas, Domain::Pas, Domain::Pasm], 1..=3),
    ) {
        let cfg = RunConfig {
            seed,
            iterations,
            mu_tissue: mu,
            sigma_background: sigma,
            lambda2: lambda,
            use_hcl,
            target_domains: targets,
            ..RunConfig::default()
        };
        let back = RunConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.render(), cfg.render());
    }

    #[test]
    fn partition_is_disjoint_and_ordered(
        (h, w) in (2usize..9, 2usize..9),
        k in 1usize..8,
        values in prop::collection::vec(-10.0f64..10.0, 64),
        seed in any::<u64>(),
    ) {
        let n = h * w;
        prop_assume!(2 * k <= n);
        let heat = Heatmap { height: h, width: w, values: values[..n].to_vec() };
        let mut locs: Vec<(usize, usize)> = (0..n).map(|i| (i / w, i % w)).collect();
        let mut s = seed;
        for i in (1..locs.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            locs.swap(i, (s >> 33) as usize % (i + 1));
        }
        locs.truncate(2 * k + (s as usize % (n - 2 * k + 1)));
        let cand = PatchIdList::new(0, locs, (h, w)).unwrap();
        let p = partition_patches(&heat, &cand, k).unwrap();
        prop_assert_eq!(p.hard.ids.len(), k);
        prop_assert_eq!(p.easy.ids.len(), k);
        prop_assert!(p.hard.ids.iter().all(|id| !p.easy.ids.contains(id)));
        let at = |&(r, c): &(usize, usize)| heat.values[r * w + c];
        let min_hard = p.hard.ids.iter().map(at).fold(f64::INFINITY, f64::min);
        let max_easy = p.easy.ids.iter().map(at).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_hard >= max_easy);
    }
}
