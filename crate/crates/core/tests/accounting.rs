//! Parameter/FLOP accounting against an independent recount, plus structural
//! properties of width resolution.

use chanprune_core::structmodel::{
    apply_structure, build_template, compression_report, count_flops, count_params, totals, LayerInput, LayerKind,
    StructError, StructureVector,
};
use proptest::prelude::*;

/// (arch, params, multiply-accumulates) from a standalone recount script.
const RECOUNT: &[(&str, u64, u64)] = &[
    ("vgg16-cifar", 14_728_266, 313_201_664),
    ("vgg19-cifar", 20_040_522, 398_136_320),
    ("vgg19-cifar100", 20_086_692, 398_182_400),
    ("resnet56-cifar", 855_770, 125_747_840),
    ("resnet110-cifar", 1_730_714, 253_149_824),
    ("googlenet-cifar", 6_166_250, 1_521_756_160),
    ("toynet-2", 6_580, 160_768),
    ("toynet-6", 15_860, 750_592),
];

#[test]
fn baselines_match_recount() {
    for &(arch, params, flops) in RECOUNT {
        let t = build_template(arch).unwrap();
        let tot = totals(&t, &t.baseline()).unwrap();
        assert_eq!((tot.params, tot.flops), (params, flops), "{arch}");
    }
}

#[test]
fn pruned_vectors_match_recount() {
    let t = build_template("vgg16-cifar").unwrap();
    let mut s = t.baseline();
    s.channels[0] = 32;
    let tot = totals(&t, &s).unwrap();
    assert_eq!((tot.params, tot.flops), (14_708_874, 293_442_560));

    let halved = StructureVector::new("vgg16-cifar", t.original_counts().iter().map(|c| c / 2).collect());
    let tot = totals(&t, &halved).unwrap();
    assert_eq!((tot.params, tot.flops), (3_686_954, 78_744_064));

    let r = build_template("resnet56-cifar").unwrap();
    let tot = totals(&r, &r.minimal()).unwrap();
    assert_eq!((tot.params, tot.flops), (23_648, 5_294_720));
}

#[test]
fn published_baseline_totals_within_tolerance() {
    // (arch, params in M, FLOPs in M, tolerance)
    let published = [
        ("vgg16-cifar", 14.73, 314.59, 0.02),
        ("resnet56-cifar", 0.85, 127.62, 0.03),
        ("resnet110-cifar", 1.73, 256.04, 0.03),
        ("vgg19-cifar100", 20.09, 399.52, 0.03),
        ("googlenet-cifar", 6.17, 1533.96, 0.05),
    ];
    for (arch, p, f, tol) in published {
        let t = build_template(arch).unwrap();
        let tot = totals(&t, &t.baseline()).unwrap();
        let (pm, fm) = (tot.params as f64 / 1e6, tot.flops as f64 / 1e6);
        assert!((pm / p - 1.0).abs() <= tol, "{arch} params {pm}");
        assert!((fm / f - 1.0).abs() <= tol, "{arch} flops {fm}");
    }
}

#[test]
fn halving_toynet_report_matches_recount() {
    let t = build_template("toynet-2").unwrap();
    let half = StructureVector::new("toynet-2", vec![8, 8]);
    let r = compression_report(&t, &t.baseline(), &half).unwrap();
    assert_eq!(r.pruned.params, 2_716);
    assert_eq!(r.pruned.flops, 43_520);
    assert_eq!(r.params_drop, 6_580 - 2_716);
    assert!((r.params_drop_pct - 100.0 * (6_580.0 - 2_716.0) / 6_580.0).abs() < 1e-12);
    assert!((r.flops_drop_pct - 100.0 * (160_768.0 - 43_520.0) / 160_768.0).abs() < 1e-12);
    assert!(r.groups.iter().all(|g| g.pruned * 2 == g.baseline));
}

#[test]
fn residual_adds_keep_trunk_width_at_extremes() {
    for arch in ["resnet56-cifar", "resnet110-cifar"] {
        let t = build_template(arch).unwrap();
        for s in [t.baseline(), t.minimal()] {
            let n = apply_structure(&t, &s).unwrap();
            for l in n.layers.iter().filter(|l| l.kind == LayerKind::Add) {
                assert!([16, 32, 64].contains(&l.c_out), "{} has {}", l.name, l.c_out);
            }
        }
    }
}

#[test]
fn errors_are_typed() {
    let t = build_template("vgg16-cifar").unwrap();
    let mut s = t.baseline();
    s.channels.pop();
    assert!(matches!(
        apply_structure(&t, &s),
        Err(StructError::StructureMismatch(_))
    ));
    let mut s = t.baseline();
    s.channels[3] = 129;
    assert!(matches!(
        apply_structure(&t, &s),
        Err(StructError::ChannelOutOfRange { group: 3, .. })
    ));
    assert!(matches!(
        build_template("alexnet"),
        Err(StructError::UnknownArchitecture(_))
    ));
}

const ARCHS: &[&str] = &["vgg16-cifar", "resnet56-cifar", "googlenet-cifar", "toynet-4w12"];

fn arch_and_vector() -> impl Strategy<Value = (String, Vec<usize>)> {
    prop::sample::select(ARCHS).prop_flat_map(|arch| {
        let t = build_template(arch).unwrap();
        let ranges: Vec<_> = t.original_counts().into_iter().map(|c| 1..=c).collect();
        (Just(arch.to_string()), ranges)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolution_reads_back_free_widths((arch, channels) in arch_and_vector()) {
        let t = build_template(&arch).unwrap();
        let s = StructureVector::new(&arch, channels);
        let n = apply_structure(&t, &s).unwrap();
        prop_assert_eq!(n.free_widths(&t), s.channels.clone());
    }

    #[test]
    fn counts_strictly_increase_in_every_entry((arch, channels) in arch_and_vector(), pick in any::<prop::sample::Index>()) {
        let t = build_template(&arch).unwrap();
        let g = pick.index(channels.len());
        prop_assume!(channels[g] < t.original_counts()[g]);
        let lo = StructureVector::new(&arch, channels.clone());
        let mut hi = lo.clone();
        hi.channels[g] += 1;
        let (a, b) = (apply_structure(&t, &lo).unwrap(), apply_structure(&t, &hi).unwrap());
        prop_assert!(count_params(&b) > count_params(&a));
        prop_assert!(count_flops(&b) > count_flops(&a));
    }

    #[test]
    fn consumers_match_producers((arch, channels) in arch_and_vector()) {
        let t = build_template(&arch).unwrap();
        let n = apply_structure(&t, &StructureVector::new(&arch, channels)).unwrap();
        for (spec, l) in t.layers.iter().zip(&n.layers) {
            if l.kind == LayerKind::Concat {
                let sum: usize = spec.inputs.iter().map(|i| match i {
                    LayerInput::Layer(j) => n.layers[*j].c_out,
                    LayerInput::Image => t.input_shape.0,
                }).sum();
                prop_assert_eq!(sum, l.c_out);
            }
            if let (LayerKind::Conv | LayerKind::BatchNorm | LayerKind::Pool, [LayerInput::Layer(j)]) = (l.kind, spec.inputs.as_slice()) {
                prop_assert_eq!(n.layers[*j].c_out, l.c_in, "{}", l.name);
            }
            if let (LayerKind::Dense, [LayerInput::Layer(j)]) = (l.kind, spec.inputs.as_slice()) {
                let p = &n.layers[*j];
                prop_assert_eq!(p.c_out * p.out_spatial.0 * p.out_spatial.1, l.c_in, "{}", l.name);
            }
            if l.kind == LayerKind::Add {
                for i in &spec.inputs {
                    if let LayerInput::Layer(j) = i {
                        prop_assert_eq!(n.layers[*j].c_out, l.c_out);
                    }
                }
            }
        }
    }
}
