use lblm::analysis::{band_by_name, band_power, welch_default};
use lblm::pipeline::{trial_corpus, RunConfig};
use lblm::signal::{preprocess_recording, synth_dataset, Condition, GeneratorSpec};

/// Mean alpha power per channel over the trials of one condition.
fn alpha(cfg: &RunConfig, recs: &[lblm::signal::EegRecording], c: Condition) -> Vec<f64> {
    let band = band_by_name("alpha").unwrap();
    let trials = trial_corpus(cfg, recs, c).unwrap();
    let mut acc = vec![0.0; trials[0].channels()];
    for t in &trials {
        let bp = band_power(&welch_default(&t.data, t.fs).unwrap(), &band).unwrap();
        acc.iter_mut().zip(&bp).for_each(|(a, b)| *a += b);
    }
    acc.iter().map(|v| v / trials.len() as f64).collect()
}

// Rest trials carry no signature and read trials carry it at `read_gain`, so
// the excess over rest scales with the squared gain: (read - rest) /
// (silent - rest) = read_gain^2 in expectation, independent of filter gains,
// re-referencing and the Welch window.
#[test]
fn planted_alpha_excess_scales_with_squared_gain() {
    let mut cfg = RunConfig::default();
    cfg.data.generator = GeneratorSpec {
        subjects: 1,
        sessions: 1,
        trials_per_session: 432,
        conditions: vec![Condition::Silent, Condition::Rest, Condition::Read],
        snr: 2.0,
        ..GeneratorSpec::default()
    };
    let gain = cfg.data.generator.read_gain;
    let recs: Vec<_> = synth_dataset(&cfg.data.generator, 5)
        .unwrap()
        .iter()
        .map(|r| preprocess_recording(r, &cfg.data.preprocess).unwrap())
        .collect();
    let (silent, rest, read) = (
        alpha(&cfg, &recs, Condition::Silent),
        alpha(&cfg, &recs, Condition::Rest),
        alpha(&cfg, &recs, Condition::Read),
    );
    // the 10 Hz group sits on channels 0 and 2
    for ch in [0, 2] {
        assert!(silent[ch] > 1.5 * rest[ch], "channel {ch}: {} vs {}", silent[ch], rest[ch]);
        let ratio = (read[ch] - rest[ch]) / (silent[ch] - rest[ch]);
        assert!((ratio - gain * gain).abs() < 0.3 * gain * gain, "channel {ch}: ratio {ratio}");
    }
}
