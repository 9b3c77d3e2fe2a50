//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test -p roisep-core --test acceptance`; pass criterion
//! numbers after `--` to run a subset.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roisep_core::autodiff::{check_primitives, Tape, DEFAULT_EPS};
use roisep_core::cruse::{
    count_flops, count_params, forward_mask, prepare_input, separate, separate_streaming, CruseConfig, CruseParams,
    ParamVars, StreamingSeparator,
};
use roisep_core::dsp::{istft, stft, AudioBuffer, MultichannelBuffer, HOP, SAMPLE_RATE};
use roisep_core::eval::{bench_rtf, pr_heatmap_many, HeatmapConfig, Separator, PR_CLAMP_DB};
use roisep_core::roomsim::{estimate_t60_schroeder, simulate_rir, RirOptions, RoomSpec, SPEED_OF_SOUND};
use roisep_core::scenegen::{
    classify_position, generate_clip, generate_dataset, load_stems, measure_ratios, read_manifest, regenerate_clip,
    source_angle_deg, Corpus, DatasetConfig, Region, Scenario, SourceRole, MANIFEST_FILE,
};
use roisep_core::train::{load_clips, mean_delta_si_sdr, train, TrainConfig, TrainingClip};
use roisep_core::Result;

/// Outcome of one criterion: whether it passed and a one-line summary.
type Verdict = Result<(bool, String)>;

fn criteria() -> Vec<(u32, &'static str, fn() -> Verdict)> {
    vec![
        (1, "parameter counts", param_counts),
        (2, "FLOPs bracket", flops_bracket),
        (3, "STFT round trip", stft_round_trip),
        (4, "gradient correctness", gradients),
        (5, "RIR physics", rir_physics),
        (6, "dataset invariants", dataset_invariants),
        (7, "streaming equivalence", streaming_equivalence),
        (8, "toy training efficacy", toy_training),
        (9, "heatmap harness", heatmap_harness),
        (10, "real-time bound", real_time),
    ]
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, check) in criteria() {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match check() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let status = if passed { "PASS" } else { "FAIL" };
        println!("[{status}] {id:>2} {name}: {detail} ({:.1} s)", start.elapsed().as_secs_f64());
        if !passed {
            failures += 1;
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}

fn noise_clip(rng: &mut ChaCha8Rng, len: usize) -> MultichannelBuffer {
    let mut ch = || (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect::<Vec<_>>();
    MultichannelBuffer::new(vec![ch(), ch()]).expect("equal lengths")
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn param_counts() -> Verdict {
    let light = count_params(&CruseConfig::light());
    let heavy = count_params(&CruseConfig::heavy());
    let rounded = |n: usize| format!("{:.2}", n as f64 / 1e6);
    let mut ok = light == 637_346 && heavy == 8_575_010;
    ok &= rounded(light) == "0.64" && rounded(heavy) == "8.58";
    for config in [CruseConfig::light(), CruseConfig::heavy(), CruseConfig::toy()] {
        let p = CruseParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ok &= p.num_weights() == count_params(&config);
    }
    Ok((ok, format!("light {light} ({} M), heavy {heavy} ({} M)", rounded(light), rounded(heavy))))
}

fn flops_bracket() -> Verdict {
    let flops = count_flops(&CruseConfig::light(), 1001);
    let ok = (6e9..=1.4e10).contains(&(flops as f64));
    Ok((ok, format!("light, 1001 frames: {:.3e} (bracket [6e9, 1.4e10])", flops as f64)))
}

fn stft_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let x: Vec<f32> = (0..SAMPLE_RATE as usize).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = AudioBuffer::new(x)?;
        let y = istft(&stft(&x)?, x.len())?;
        worst = worst.max(max_abs_diff(x.samples(), y.samples()));
    }
    Ok((worst < 1e-6, format!("100 signals of 1 s, max abs error {worst:.2e} (bound 1e-6)")))
}

fn gradients() -> Verdict {
    let primitives = check_primitives(5)?;
    let (worst_name, worst_prim) = primitives
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let report = roisep_core::train::loss_gradient_check(&CruseConfig::toy(), 11, 20, DEFAULT_EPS)?;
    let worst_loss = report.worst();
    let ok = primitives.iter().all(|&(_, e)| e < 1e-4) && report.checks.len() >= 20 && worst_loss < 1e-3;
    Ok((
        ok,
        format!(
            "{} primitives, worst {worst_name} {worst_prim:.2e} (bound 1e-4); end-to-end worst {worst_loss:.2e} over {} coordinates (bound 1e-3)",
            primitives.len(),
            report.checks.len()
        ),
    ))
}

/// Centroid (in samples) and sum of an impulse response.
fn centroid(taps: &[f32]) -> (f64, f64) {
    let sum: f64 = taps.iter().map(|&v| v as f64).sum();
    let moment: f64 = taps.iter().enumerate().map(|(i, &v)| i as f64 * v as f64).sum();
    (moment / sum, sum)
}

fn rir_physics() -> Verdict {
    let anechoic = RoomSpec {
        dims: [12.0, 12.0, 4.0],
        t60: 0.1,
        absorption: 1.0,
        speed_of_sound: SPEED_OF_SOUND,
    };
    let opts = RirOptions { max_order: 0, len: 600 };
    let src = [3.0, 6.0, 2.0];
    let (mut worst_delay, mut worst_amp) = (0.0f64, 0.0f64);
    for d in [0.5, 1.0, 1.37, 2.0, 3.3, 5.0] {
        let rir = simulate_rir(&anechoic, &src, &[3.0 + d, 6.0, 2.0], opts)?;
        let (delay, amp) = centroid(&rir.taps);
        let expected = d / SPEED_OF_SOUND * SAMPLE_RATE as f64;
        worst_delay = worst_delay.max((delay - expected).abs());
        worst_amp = worst_amp.max((amp * d - 1.0).abs());
    }
    let room = RoomSpec::from_t60([6.0, 6.0, 3.0], 0.5)?;
    let pairs = [
        ([2.0, 3.5, 1.5], [4.0, 2.5, 1.5]),
        ([1.0, 1.0, 1.2], [4.5, 5.0, 1.7]),
        ([3.0, 4.8, 2.2], [2.9, 1.3, 0.9]),
    ];
    let mut worst_t60 = 0.0f64;
    let mut estimates = Vec::new();
    for (s, m) in pairs {
        let t60 = estimate_t60_schroeder(&simulate_rir(&room, &s, &m, RirOptions::for_room(&room))?.taps)?;
        worst_t60 = worst_t60.max((t60 / 0.5 - 1.0).abs());
        estimates.push(format!("{t60:.3}"));
    }
    let ok = worst_delay <= 0.5 && worst_amp < 0.01 && worst_t60 <= 0.25;
    Ok((
        ok,
        format!(
            "delay error {worst_delay:.3} samples (bound 0.5), 1/d error {:.3}% (bound 1%), T60 estimates [{}] s for 0.5 s (bound 25%)",
            100.0 * worst_amp,
            estimates.join(", ")
        ),
    ))
}

fn dataset_invariants() -> Verdict {
    let dir = tempfile::tempdir()?;
    let scenarios = [
        Scenario::TrainSimple,
        Scenario::TrainComplex,
        Scenario::One,
        Scenario::Two,
        Scenario::Four,
    ];
    let mut failures = Vec::new();
    let mut clips = 0;
    let (mut worst_sir, mut worst_snr) = (0.0f64, 0.0f64);
    for (i, &scenario) in scenarios.iter().enumerate() {
        let mut config = DatasetConfig::new(scenario, 20, 100 + i as u64);
        config.clip_seconds = 2.0;
        let out = dir.path().join(scenario.name());
        let written = generate_dataset(&config, &out)?;
        let records = read_manifest(&out.join(MANIFEST_FILE))?;
        if records != written {
            failures.push(format!("{scenario}: manifest does not round-trip"));
        }
        let corpus = Corpus::load(&config.material)?;
        for (index, r) in records.iter().enumerate() {
            clips += 1;
            let stems = load_stems(&out, r)?;
            let sum_exact = (0..2).all(|c| {
                stems.y.channel(c).iter().enumerate().all(|(j, &y)| {
                    y == stems.t.channel(c)[j] + stems.k.channel(c)[j] + stems.n.channel(c)[j]
                })
            });
            if !sum_exact {
                failures.push(format!("{}: y != t + k + n", r.clip_id));
            }
            let (sir, snr) = measure_ratios(&stems.t, &stems.k, &stems.n);
            worst_sir = worst_sir.max((sir - r.sir_db).abs());
            match r.snr_db {
                Some(v) => worst_snr = worst_snr.max((snr - v).abs()),
                None if stems.n.channels().iter().flatten().any(|&v| v != 0.0) => {
                    failures.push(format!("{}: noise present without an SNR", r.clip_id))
                }
                None => {}
            }
            for s in &r.sources {
                let angle = source_angle_deg(&r.array, &s.position)?;
                let region = classify_position(&r.array, r.roi_angle_deg, &s.position)?;
                let ok = match s.role {
                    SourceRole::Target => angle <= r.roi_angle_deg / 2.0 && region == Region::InsideRoi,
                    SourceRole::Interferer => region == Region::Outside,
                    SourceRole::Noise => true,
                };
                if !ok {
                    failures.push(format!("{}: {:?} at {angle:.1} deg in {region:?}", r.clip_id, s.role));
                }
            }
            let regenerated = regenerate_clip(r)?;
            let (_, from_seed) = generate_clip(&config, &corpus, index)?;
            for clip in [&regenerated, &from_seed] {
                if clip.y != stems.y || clip.t != stems.t || clip.k != stems.k || clip.n != stems.n {
                    failures.push(format!("{}: regeneration differs", r.clip_id));
                }
            }
        }
    }
    let ok = failures.is_empty() && worst_sir <= 0.01 && worst_snr <= 0.01;
    let mut detail = format!(
        "{clips} clips over 5 scenarios, SIR error {worst_sir:.2e} dB, SNR error {worst_snr:.2e} dB (bound 0.01)"
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; {} violation(s), first: {}", failures.len(), failures[0]));
    }
    Ok((ok, detail))
}

fn streaming_equivalence() -> Verdict {
    let params = CruseParams::init(&CruseConfig::light(), &mut ChaCha8Rng::seed_from_u64(21))?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut sep = StreamingSeparator::new(&params)?;
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let len = rng.random_range(4_000..24_000);
        let y = noise_clip(&mut rng, len);
        let batch = separate(&params, &y)?;
        let stream = separate_streaming(&mut sep, &y)?;
        if stream.len() != batch.len() {
            return Ok((false, format!("streaming output has {} samples, batch {}", stream.len(), batch.len())));
        }
        worst = worst.max(max_abs_diff(batch.samples(), stream.samples()));
    }

    // Changing the input from sample `cut` on must leave the mask of every
    // earlier frame and every output sample before the previous hop intact.
    let len = 16_000;
    let cut = 9_000;
    let y = noise_clip(&mut rng, len);
    let mut tail = y.clone().into_channels();
    for ch in &mut tail {
        for v in &mut ch[cut..] {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let z = MultichannelBuffer::new(tail)?;
    let masks = |x: &MultichannelBuffer| -> Result<Vec<f32>> {
        let input = prepare_input::<f32>(x)?;
        let mut tape = Tape::new();
        let pv = ParamVars::new(&mut tape, &params, false);
        let v = tape.constant(input.features);
        let q = forward_mask(&mut tape, &params, &pv, v)?;
        Ok(tape.value(q).data().to_vec())
    };
    let (qa, qb) = (masks(&y)?, masks(&z)?);
    let frames = qa.len() / (2 * roisep_core::dsp::FREQ_BINS);
    // Frame t spans samples [(t - 1) * HOP, (t + 1) * HOP).
    let clean_frames = cut / HOP;
    let bins = roisep_core::dsp::FREQ_BINS;
    let mask_prefix = (0..2).all(|c| {
        let r = c * frames * bins..(c * frames + clean_frames) * bins;
        qa[r.clone()] == qb[r]
    });
    let clean_samples = (cut / HOP - 1) * HOP;
    let sa = separate_streaming(&mut sep, &y)?;
    let sb = separate_streaming(&mut sep, &z)?;
    let out_prefix = sa.samples()[..clean_samples] == sb.samples()[..clean_samples];
    let ok = worst < 1e-5 && mask_prefix && out_prefix;
    Ok((
        ok,
        format!(
            "light model, 20 clips, max abs difference {worst:.2e} (bound 1e-5); causal prefix: mask {}, output {}",
            if mask_prefix { "unchanged" } else { "CHANGED" },
            if out_prefix { "unchanged" } else { "CHANGED" }
        ),
    ))
}

/// Train-simple clips of 2 s from a fixed master seed.
fn simple_clips(dir: &Path, count: usize) -> Result<Vec<TrainingClip>> {
    let mut config = DatasetConfig::new(Scenario::TrainSimple, count, 7);
    config.clip_seconds = 2.0;
    generate_dataset(&config, dir)?;
    load_clips(dir)
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 4,
        seed: 1,
        ..Default::default()
    }
}

fn toy_training() -> Verdict {
    let dir = tempfile::tempdir()?;
    let clips = simple_clips(dir.path(), 50)?;
    let (train_set, held_out) = clips.split_at(40);
    let config = toy_train_config();
    let init = CruseParams::init(&CruseConfig::toy(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let outcome = train(init, train_set, &[], &config, None)?;
    let first = outcome.log[0].mean_loss_db;
    let last = outcome.log.last().expect("epoch 0 is logged").mean_loss_db;
    let delta = mean_delta_si_sdr(&outcome.last, held_out, config.clamp_db)?;
    let ok = first - last >= 3.0 && delta > 0.0;
    Ok((
        ok,
        format!(
            "loss {first:.2} dB at epoch 0 -> {last:.2} dB at epoch {} (improvement {:.2} dB, bound 3); held-out delta SI-SDR {delta:.2} dB on {} clips (bound > 0)",
            config.epochs,
            first - last,
            held_out.len()
        ),
    ))
}

fn heatmap_harness() -> Verdict {
    let dir = tempfile::tempdir()?;
    let clips = simple_clips(dir.path(), 160)?;
    let config = toy_train_config();
    let init = CruseParams::init(&CruseConfig::toy(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let model = train(init, &clips, &[], &config, None)?.last;

    let hm = HeatmapConfig::default();
    let grids = pr_heatmap_many(&[Separator::Oracle, Separator::Model(model)], &hm)?;
    let (oracle, trained) = (&grids[0], &grids[1]);
    let expected_cells = oracle.computed().count();
    let mut oracle_ok = expected_cells > 0;
    let mut worst_inside = 0.0f64;
    let mut worst_outside = 0.0f64;
    let mut counts = [0usize; 2];
    for cell in oracle.computed() {
        match cell.region {
            Region::InsideRoi => {
                counts[0] += 1;
                worst_inside = worst_inside.max(cell.pr_db.abs());
                oracle_ok &= cell.pr_db.abs() < 1e-6;
            }
            Region::Outside => {
                counts[1] += 1;
                worst_outside = worst_outside.max((cell.pr_db - PR_CLAMP_DB).abs());
                oracle_ok &= cell.pr_db == PR_CLAMP_DB;
            }
            Region::MirrorForbidden => oracle_ok = false,
        }
    }
    let failed = trained.computed().filter(|c| !c.pr_db.is_finite()).count();
    let (inside, outside) = (trained.mean_pr(Region::InsideRoi), trained.mean_pr(Region::Outside));
    let model_ok = failed == 0 && matches!((inside, outside), (Some(i), Some(o)) if o > i);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    Ok((
        oracle_ok && model_ok,
        format!(
            "oracle over {} inside / {} outside cells: max |PR| inside {worst_inside:.1e} dB, max |PR - 60| outside {worst_outside:.1e} dB; toy model (160 clips) mean PR inside {} dB, outside {} dB, contrast {} dB (bound > 0)",
            counts[0],
            counts[1],
            fmt(inside),
            fmt(outside),
            fmt(trained.contrast_db())
        ),
    ))
}

fn real_time() -> Verdict {
    let params = CruseParams::init(&CruseConfig::light(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let report = bench_rtf(&params, "light", 100, 10.0, 10)?;
    Ok((
        report.rtf < 0.5,
        format!(
            "light model, {} files x {} s, {:.4} s per file, RTF {:.4} (bound 0.5) on {}",
            report.files, report.duration_s, report.mean_seconds, report.rtf, report.host
        ),
    ))
}
