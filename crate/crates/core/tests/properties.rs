use std::f64::consts::TAU;

use proptest::prelude::*;

use blurry_edges::aggregate::BlockConfig;
use blurry_edges::eval::{calibrate_linear, compute_metrics};
use blurry_edges::geometry::{Wedge, WedgePatch};
use blurry_edges::grid::{Field, Grid};
use blurry_edges::optics::{OpticsConfig, Power};
use blurry_edges::par::Exec;
use blurry_edges::render::{alpha, collective_alphas, sobel, RenderedPatch};

fn wedge() -> impl Strategy<Value = Wedge> {
    (
        0.0..21.0f64,
        0.0..21.0f64,
        0.0..TAU,
        0.05..6.2f64,
        prop::array::uniform3(0.0..1.0f64),
        0.3..6.0f64,
    )
        .prop_map(|(x, y, t, w, c, eta)| Wedge::new([x, y], t, t + w, c, eta).unwrap())
}

fn patch() -> impl Strategy<Value = WedgePatch> {
    (
        prop::collection::vec(wedge(), 1..=4),
        prop::array::uniform3(0.0..1.0f64),
    )
        .prop_map(|(wedges, bg)| WedgePatch {
            wedges,
            background: bg,
            width: 9,
            height: 9,
        })
}

proptest! {
    #[test]
    fn alpha_is_a_symmetric_monotone_ramp(d in -20.0..20.0f64, e in 0.0..1.0f64, eta in 0.3..6.0f64) {
        let a = alpha(d, eta);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + alpha(-d, eta) - 1.0).abs() < 1e-14);
        prop_assert!(alpha(d + e, eta) >= a);
    }

    #[test]
    fn collective_alphas_partition_unity(a in prop::collection::vec(0.0..1.0f64, 1..=4)) {
        let mut out = vec![0.0; a.len() + 1];
        collective_alphas(&a, &mut out);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rendered_colour_is_a_convex_mix(p in patch()) {
        let r = RenderedPatch::render(&p, 1.0, 1.0);
        let mut colors = vec![p.background];
        colors.extend(p.wedges.iter().map(|w| w.color));
        for (k, px) in r.color.data.iter().enumerate() {
            let total: f64 = r.collective.iter().map(|c| c.data[k]).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for ch in 0..3 {
                let lo = colors.iter().map(|c| c[ch]).fold(f64::INFINITY, f64::min);
                let hi = colors.iter().map(|c| c[ch]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(px[ch] >= lo - 1e-12 && px[ch] <= hi + 1e-12);
            }
        }
        prop_assert!(r.boundary.data.iter().all(|b| (0.0..=1.0 + 1e-12).contains(b)));
    }

    #[test]
    fn wedge_angles_are_canonical(t in -20.0..20.0f64, w in 0.01..6.2f64) {
        let wd = Wedge::new([0.0, 0.0], t, t + w, [0.0; 3], 1.0).unwrap();
        prop_assert!((0.0..TAU).contains(&wd.angles[0]));
        prop_assert!((wd.angles[1] - wd.angles[0] - w).abs() < 1e-9);
    }

    #[test]
    fn sobel_vanishes_on_constant_images(c in prop::array::uniform3(0.0..1.0f64), w in 3usize..12, h in 3usize..12) {
        let d = sobel(&vec![c; w * h], w, h);
        prop_assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn depth_inverts_smoothness(z in 0.75..1.18f64) {
        let o = OpticsConfig::default();
        let d = o.depth(o.eta_px(z, Power::Plus), o.eta_px(z, Power::Minus)).unwrap();
        prop_assert!(d.valid);
        prop_assert!((d.z - z).abs() <= 1e-9 * z);
        let q = o.eta_px(z, Power::Plus).powi(2) - o.eta_px(z, Power::Minus).powi(2);
        prop_assert!((o.depth_from_difference(q).unwrap().z - z).abs() <= 1e-9 * z);
    }

    #[test]
    fn block_offsets_cover_the_image(extent in 147usize..800, stride in 1usize..8) {
        let bc = BlockConfig::default();
        let off = bc.offsets(extent, 21, stride).unwrap();
        let step = bc.stride(21, stride).unwrap();
        prop_assert_eq!(off[0], 0);
        prop_assert_eq!(*off.last().unwrap(), extent - bc.block_size);
        prop_assert!(off.windows(2).all(|p| p[1] > p[0] && p[1] - p[0] <= step));
    }

    #[test]
    fn metrics_vanish_for_exact_predictions(z in prop::collection::vec(0.75..1.18f64, 1..50)) {
        let f = Grid { width: z.len(), height: 1, data: z.clone() };
        let m = compute_metrics(&f, &f, &vec![true; z.len()], [0.75, 1.18], "all").unwrap();
        prop_assert_eq!(m.rmse, 0.0);
        prop_assert_eq!(m.abs_rel, 0.0);
        prop_assert_eq!(m.delta, [1.0; 3]);
    }

    #[test]
    fn calibration_recovers_a_line(w0 in -1.0..1.0f64, w1 in 0.2..3.0f64, xs in prop::collection::vec(0.5..1.5f64, 3..20)) {
        prop_assume!(xs.iter().any(|x| (x - xs[0]).abs() > 1e-3));
        let pairs: Vec<_> = xs.iter().map(|&x| (x, w0 + w1 * x)).collect();
        let c = calibrate_linear(&pairs).unwrap();
        prop_assert!((c.omega0 - w0).abs() < 1e-9 && (c.omega1 - w1).abs() < 1e-9);
    }

    #[test]
    fn raster_files_roundtrip(vals in prop::collection::vec(-1e3..1e3f32, 1..64)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.f32");
        let f: Field = Grid { width: vals.len(), height: 1, data: vals.iter().map(|&v| v as f64).collect() };
        blurry_edges::io::write_field(&path, &f).unwrap();
        prop_assert_eq!(blurry_edges::io::read_field(&path).unwrap(), f);
    }

    #[test]
    fn serial_and_parallel_maps_agree(n in 0usize..200) {
        let f = |i: usize| (i as f64).sqrt().sin();
        prop_assert_eq!(Exec::Serial.map_range(n, f), Exec::Parallel.map_range(n, f));
    }
}
