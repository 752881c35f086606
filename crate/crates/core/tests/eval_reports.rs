//! Probing frozen encoders, variance reports and ablation grids end to end.

use salmask::augment::{BranchPolicy, MaskMode, ViewConfig};
use salmask::config::Config;
use salmask::data::synth::generate_splits;
use salmask::eval::{
    ablation_report, embedding_variance, linear_probe, localization_for, CellOptions, ProbeConfig, ViewSpec, REPORT_HEADER,
};
use salmask::masking::{Strategy, StrategyConfig};
use salmask::model::{checksum, new_encoder};
use salmask::numerics::Rng;

fn tiny(strategy: Strategy) -> Config {
    Config {
        strategy,
        batch: 16,
        queue: 32,
        epochs: 1,
        warmup: 0,
        loc_epochs: 1,
        probe_epochs: 2,
        variance_k: 2,
        ..Config::ablation_base()
    }
}

#[test]
fn probing_leaves_the_encoder_untouched() {
    let (train, val) = generate_splits(40, 20, 32, 4, 1);
    let enc = new_encoder(&mut Rng::new(2)).unwrap();
    let before = checksum(&enc);
    let hp = StrategyConfig::for_side(Strategy::Highpass, 32);
    for domain in [None, Some(&hp)] {
        let r = linear_probe(&enc, &train, &val, domain, &ProbeConfig::new(3, 3.0, 0)).unwrap();
        assert_eq!(r.checksum, before);
        assert_eq!(r.per_class.len(), 4);
        assert_eq!(r.epochs, 3);
    }
    assert_eq!(checksum(&enc), before);
}

#[test]
fn masked_views_spread_embeddings() {
    let (train, val) = generate_splits(64, 8, 32, 4, 3);
    let cfg = tiny(Strategy::Meanfill);
    let loc = localization_for(&cfg, &train).unwrap().unwrap();
    let enc = new_encoder(&mut Rng::new(4)).unwrap();
    let plain = ViewConfig::new(32, Strategy::Meanfill, BranchPolicy::None, MaskMode::Saliency, false);
    let a = embedding_variance(&enc, &val, 4, &ViewSpec::Views(plain.clone()), None, &Rng::new(5), "standard").unwrap();
    let b = embedding_variance(&enc, &val, 4, &ViewSpec::Views(plain), None, &Rng::new(5), "standard").unwrap();
    assert_eq!(a, b);
    assert!(a.variance > 0.0);
    let masked = ViewConfig::new(32, Strategy::Meanfill, BranchPolicy::Query, MaskMode::Saliency, false);
    let m = embedding_variance(&enc, &val, 4, &ViewSpec::Views(masked), Some(&loc), &Rng::new(5), "meanfill").unwrap();
    assert!(m.variance >= 0.0 && m.k == 4);
}

#[test]
fn reports_are_deterministic_with_one_row_per_cell() {
    let (train, val) = generate_splits(48, 16, 32, 4, 5);
    let configs = vec![("hp".to_string(), tiny(Strategy::Highpass)), ("mf".to_string(), tiny(Strategy::Meanfill))];
    let opts = CellOptions { variance_images: 4, ..Default::default() };
    let mut seen = 0;
    let a = ablation_report(&configs, &[1, 2], &train, &val, &opts, |c, o| {
        assert!(!c.failed() && o.is_some());
        seen += 1;
    });
    assert_eq!(seen, 4);
    let b = ablation_report(&configs, &[1, 2], &train, &val, &opts, |_, _| {});
    assert_eq!(a.csv(), b.csv());
    assert_eq!(a.summary_csv(), b.summary_csv());
    let csv = a.csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("hp,1,") && lines[4].starts_with("mf,2,"));
}

#[test]
fn failing_cells_are_marked_and_the_report_continues() {
    let (train, val) = generate_splits(48, 16, 32, 4, 6);
    let bad = Config { grid: 3, ..tiny(Strategy::Blur) };
    let configs = vec![("ok".to_string(), tiny(Strategy::Blur)), ("bad".to_string(), bad)];
    let r = ablation_report(&configs, &[7], &train, &val, &CellOptions { variance_images: 2, ..Default::default() }, |_, _| {});
    assert_eq!(r.cells.len(), 2);
    assert!(!r.cells[0].failed());
    assert!(r.cells[1].failed());
    assert!(r.csv().contains("bad,7,failed,failed,failed"));
}
