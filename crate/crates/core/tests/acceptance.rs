//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::Command;
use std::time::{Duration, Instant};

use etlsim::calibration::{
    fit_curve, fit_gamma, fit_lognormal, CurveFamily, FittedDistribution, ThroughputObservation,
};
use etlsim::control::server::{self, ServerConfig};
use etlsim::control::{decode_event, replay, ControlCore, Event, TranscriptEntry};
use etlsim::engine::WindowMetrics;
use etlsim::scenario::{Scenario, ScenarioFile};
use etlsim::stochastic::{sample_seconds, ProcTimeModel, Purpose, RngStream, StreamId};
use etlsim::throughput::ConvenientCurve;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const RUN_TICKS: u64 = 60_000;
const WARMUP: u64 = 10_000;
const WINDOW: u64 = 1_000;

type Outcome = Result<String, String>;

/// Number, name, check, runtime limit in seconds.
type Criterion = (u32, &'static str, fn() -> Outcome, Option<f64>);

fn run_windows(file: &ScenarioFile, ticks: u64) -> (Scenario, Vec<WindowMetrics>) {
    let sc = file.compile().expect("scenario compiles");
    let mut sim = sc.simulation(None).expect("simulation builds");
    let windows = sim.run(&sc.schedule, ticks, WINDOW).expect("run");
    (sc, windows)
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn flow_balance() -> Outcome {
    let file = flow_balance_scenario(10);
    let (_, w) = run_windows(&file, RUN_TICKS);
    let rate = delivered_rate(&w, WARMUP, file.tick_ms);
    let expected = 100.0 * (1.0 - (-1.0f64).exp());
    let msg = format!("delivered {rate:.3} rec/s, expected {expected:.2} ± 5%");
    if within(rate, expected, 0.05) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bottleneck() -> Outcome {
    // rational curves: 80a/(4+a) gives 40 at a=4, 50a/(4+a) gives 25
    let fast = ConvenientCurve::rational(80.0, 4.0).unwrap();
    let slow = ConvenientCurve::rational(50.0, 4.0).unwrap();
    let mut rates = Vec::new();
    for (first, second) in [(fast, slow), (slow, fast)] {
        let file = series_scenario(first, 4, second, 4);
        let (_, w) = run_windows(&file, RUN_TICKS);
        rates.push(delivered_rate(&w, WARMUP, file.tick_ms));
    }
    let msg = format!(
        "40->25: {:.3} rec/s, 25->40: {:.3} rec/s, expected 25 ± 5%",
        rates[0], rates[1]
    );
    if rates.iter().all(|&r| within(r, 25.0, 0.05)) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn monotone_response() -> Outcome {
    let mut rates = Vec::new();
    for a in [1, 2, 4, 8, 16] {
        let file = flow_balance_scenario(a);
        let (_, w) = run_windows(&file, RUN_TICKS);
        rates.push(delivered_rate(&w, WARMUP, file.tick_ms));
    }
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.2}")).collect();
    let msg = format!("rates at a=1,2,4,8,16: [{}], bound 102", shown.join(", "));
    let increasing = rates.windows(2).all(|p| p[1] > p[0]);
    let bounded = rates.iter().all(|&r| r < 100.0 * 1.02);
    if increasing && bounded {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut file = flow_balance_scenario(10);
    file.arrivals.insert(
        "S".into(),
        etlsim::engine::ArrivalProcess::Poisson { rate: 0.08 },
    );
    let scenario = dir.path().join("scenario.json");
    std::fs::write(&scenario, file.to_json()).map_err(|e| e.to_string())?;
    let simulate = |out: &str, seed: Option<&str>| -> Result<Vec<u8>, String> {
        let path = dir.path().join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_etlsim"));
        cmd.args([
            "simulate", "--ticks", "20000", "--window", "500", "--format", "csv",
        ])
        .arg("--scenario")
        .arg(&scenario)
        .arg("--metrics-out")
        .arg(&path);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        let status = cmd.status().map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("simulate exited with {status}"));
        }
        std::fs::read(&path).map_err(|e| e.to_string())
    };
    let a = simulate("a.csv", None)?;
    let b = simulate("b.csv", None)?;
    let c = simulate("c.csv", Some("99"))?;
    let msg = format!(
        "same seed identical: {}, other seed differs: {} ({} bytes)",
        a == b,
        a != c,
        a.len()
    );
    if a == b && a != c {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scenarios = 60;
    let mut records = 0;
    for n in 0..scenarios {
        let file = random_scenario(&mut rng);
        let sc = file
            .compile()
            .map_err(|e| format!("scenario {n} invalid: {e}"))?;
        let mut sim = sc.simulation(None).map_err(|e| e.to_string())?;
        check_conservation(&sim).map_err(|e| format!("scenario {n}: {e}"))?;
        for _ in 0..10 {
            let windows = sim
                .run(&sc.schedule, WINDOW, WINDOW)
                .map_err(|e| e.to_string())?;
            if windows.len() != 1 {
                return Err(format!("scenario {n}: expected one window per 1000 ticks"));
            }
            check_conservation(&sim)
                .map_err(|e| format!("scenario {n}: {e}\n{}", file.to_json()))?;
        }
        records += sim.state().records().len();
    }
    Ok(format!(
        "{scenarios} random scenarios x 10^4 ticks, {records} records, balance held at every window"
    ))
}

fn sampler_means() -> Outcome {
    let mut cfg = ChaCha8Rng::seed_from_u64(6);
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let curve = if cfg.random_bool(0.5) {
            ConvenientCurve::exponential(cfg.random_range(10.0..500.0), cfg.random_range(0.5..20.0))
        } else {
            ConvenientCurve::rational(cfg.random_range(10.0..500.0), cfg.random_range(0.5..20.0))
        }
        .unwrap();
        let a = cfg.random_range(1..=32u32);
        let model = if i % 2 == 0 {
            ProcTimeModel::Gamma {
                curve,
                shape: cfg.random_range(0.5..10.0),
            }
        } else {
            ProcTimeModel::Lognormal {
                curve,
                sigma: cfg.random_range(0.1..1.0),
            }
        };
        let mut rng = RngStream::new(1000 + i, StreamId::new(0, Purpose::ProcessingTime));
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_seconds(&model, a, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let target = curve.mean_processing_time(f64::from(a)).unwrap();
        let z = (mean - target).abs() / se;
        worst = worst.max(z);
        if z > 4.0 {
            return Err(format!(
                "config {i} ({model:?}, a={a}): {z:.2} standard errors off"
            ));
        }
    }
    Ok(format!(
        "20 configurations x 10^5 draws, worst deviation {worst:.2} SE (limit 4)"
    ))
}

fn calibration_recovery() -> Outcome {
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let mut notes = Vec::new();

    for (family, curve) in [
        (
            CurveFamily::Exponential,
            ConvenientCurve::exponential(100.0, 10.0).unwrap(),
        ),
        (
            CurveFamily::Rational,
            ConvenientCurve::rational(80.0, 12.0).unwrap(),
        ),
    ] {
        let obs: Vec<_> = (1..=40)
            .map(|a| ThroughputObservation::new(f64::from(a), curve.eval(f64::from(a)).unwrap()))
            .collect();
        let fit = fit_curve(&obs, family).map_err(|e| e.to_string())?;
        let (p, q) = fit.curve.params();
        let (tp, tq) = curve.params();
        let err = rel(p, tp).max(rel(q, tq));
        if err > 1e-3 || !fit.converged {
            return Err(format!("noiseless {family:?}: relative error {err:e}"));
        }
        notes.push(format!("noiseless {family:?} err {err:.1e}"));
    }

    let truth = ConvenientCurve::exponential(100.0, 10.0).unwrap();
    let mut hits = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<_> = (1..=60)
            .map(|i| {
                let a = f64::from(i) * 0.5;
                let noise = rng.random_range(0.95..=1.05);
                ThroughputObservation::new(a, truth.eval(a).unwrap() * noise)
            })
            .collect();
        let fit = fit_curve(&obs, CurveFamily::Exponential).map_err(|e| e.to_string())?;
        if rel(fit.curve.supremum(), 100.0) <= 0.05 {
            hits += 1;
        }
    }
    notes.push(format!("noisy t_max within 5% in {hits}/20"));
    if hits < 18 {
        return Err(notes.join(", "));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let gamma = rand_distr::Gamma::new(4.0, 0.075).unwrap();
    let xs: Vec<f64> = (0..n).map(|_| rng.sample(gamma)).collect();
    let FittedDistribution::Gamma { shape, scale } = fit_gamma(&xs).map_err(|e| e.to_string())?
    else {
        unreachable!()
    };
    let lognormal = rand_distr::LogNormal::new(-2.0, 0.5).unwrap();
    let ys: Vec<f64> = (0..n).map(|_| rng.sample(lognormal)).collect();
    let FittedDistribution::Lognormal { mu, sigma } =
        fit_lognormal(&ys).map_err(|e| e.to_string())?
    else {
        unreachable!()
    };
    let dist_err = rel(shape, 4.0)
        .max(rel(scale, 0.075))
        .max(rel(mu, -2.0))
        .max(rel(sigma, 0.5));
    notes.push(format!(
        "gamma/lognormal worst parameter error {:.2}%",
        100.0 * dist_err
    ));
    if dist_err > 0.05 {
        return Err(notes.join(", "));
    }
    Ok(notes.join(", "))
}

fn occupancy_and_little() -> Outcome {
    let file = flow_balance_scenario(10);
    let (_, w) = run_windows(&file, RUN_TICKS);
    let kept: Vec<_> = w.iter().filter(|w| w.window_start >= WARMUP).collect();
    let phases: Vec<_> = kept.iter().map(|w| w.phase("e1.T").unwrap()).collect();
    let ticks: u64 = kept.iter().map(|w| w.ticks()).sum();
    let occupancy = kept
        .iter()
        .zip(&phases)
        .map(|(w, p)| p.mean_occupancy * w.ticks() as f64)
        .sum::<f64>()
        / ticks as f64;
    let completed: u64 = phases.iter().map(|p| p.completed).sum();
    let residence_ticks = phases
        .iter()
        .map(|p| p.mean_residence_ticks.unwrap_or(0.0) * p.completed as f64)
        .sum::<f64>()
        / completed as f64;
    let rate = delivered_rate(&w, WARMUP, file.tick_ms);
    let little = rate * residence_ticks * file.tick_ms / 1000.0;
    let msg = format!(
        "mean T occupancy {occupancy:.3} (10 ± 2%), rate x residence {little:.3} threads (10 ± 5%)"
    );
    if within(occupancy, 10.0, 0.02) && within(little, 10.0, 0.05) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct Session {
    windows: Vec<WindowMetrics>,
    transcript: Vec<TranscriptEntry>,
    error_events: usize,
    unknown_phase_reason: Option<String>,
}

fn scripted_session(scenario: &Scenario) -> Result<Session, String> {
    let core = ControlCore::new(scenario.clone(), WINDOW).map_err(|e| e.to_string())?;
    let mut handle = server::start(core, ServerConfig::default());
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    handle.serve_tcp(listener).map_err(|e| e.to_string())?;

    let stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    stream
        .set_read_timeout(Some(Duration::from_secs(20)))
        .map_err(|e| e.to_string())?;
    let mut writer = stream.try_clone().map_err(|e| e.to_string())?;
    let mut reader = BufReader::new(stream);
    let mut next = || -> Result<Event, String> {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| e.to_string())?;
        decode_event(line.trim()).map_err(|e| format!("{e}: {line}"))
    };
    let mut send = |line: &str| writeln!(writer, "{line}").map_err(|e| e.to_string());

    let mut session = Session {
        windows: Vec::new(),
        transcript: Vec::new(),
        error_events: 0,
        unknown_phase_reason: None,
    };
    let until_complete = |next: &mut dyn FnMut() -> Result<Event, String>,
                          session: &mut Session|
     -> Result<(), String> {
        loop {
            match next()? {
                Event::WindowMetrics(w) => session.windows.push(w),
                Event::RunComplete { .. } => return Ok(()),
                Event::Ack { accepted: true, .. } => {}
                other => return Err(format!("unexpected {other:?}")),
            }
        }
    };

    send(r#"{"cmd":"set_pace","ticks_per_second":1000000}"#)?;
    next()?;
    send(r#"{"cmd":"set_allocation","alloc":{"e1.T":4}}"#)?;
    next()?;
    send(r#"{"cmd":"set_allocation","alloc":{"bogus.T":4}}"#)?;
    if let Event::Ack {
        accepted: false,
        reason,
        ..
    } = next()?
    {
        session.unknown_phase_reason = reason;
    }
    send("{this is not json")?;
    if let Event::Error { .. } = next()? {
        session.error_events += 1;
    }
    send(r#"{"cmd":"run","ticks":3000}"#)?;
    until_complete(&mut next, &mut session)?;
    send(r#"{"cmd":"snapshot"}"#)?;
    next()?;
    match next()? {
        Event::StateSummary(s) if s.tick == 3000 && s.allocation["e1.T"] == 4 => {}
        other => return Err(format!("bad snapshot {other:?}")),
    }
    send(r#"{"cmd":"set_allocation","alloc":{"e1.T":12}}"#)?;
    next()?;
    send(r#"{"cmd":"run","ticks":2000}"#)?;
    until_complete(&mut next, &mut session)?;
    send(r#"{"cmd":"reset","seed":5}"#)?;
    next()?;
    send(r#"{"cmd":"run","ticks":2000}"#)?;
    until_complete(&mut next, &mut session)?;

    session.transcript = handle.shutdown();
    Ok(session)
}

fn protocol() -> Outcome {
    let mut file = flow_balance_scenario(2);
    file.arrivals.insert(
        "S".into(),
        etlsim::engine::ArrivalProcess::Poisson { rate: 0.05 },
    );
    let scenario = file.compile().map_err(|e| e.to_string())?;
    let first = scripted_session(&scenario)?;
    let second = scripted_session(&scenario)?;
    let replayed: Vec<WindowMetrics> = replay(&scenario, WINDOW, &first.transcript)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter_map(|e| match e {
            Event::WindowMetrics(w) => Some(w),
            _ => None,
        })
        .collect();
    let msg = format!(
        "{} windows per session, sessions identical: {}, replay identical: {}, \
         malformed -> error event: {}, unknown phase reason: {:?}",
        first.windows.len(),
        first.windows == second.windows,
        first.windows == replayed,
        first.error_events == 1,
        first.unknown_phase_reason.as_deref().unwrap_or("none"),
    );
    let ok = first.windows.len() == 7
        && first.windows == second.windows
        && first.windows == replayed
        && first.error_events == 1
        && first
            .unknown_phase_reason
            .as_deref()
            .is_some_and(|r| r.starts_with("unknown phase"));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "flow balance", flow_balance, Some(5.0)),
        (2, "bottleneck law", bottleneck, None),
        (3, "monotone response", monotone_response, None),
        (4, "determinism", determinism, Some(5.0)),
        (5, "conservation", conservation, Some(60.0)),
        (6, "sampler mean constraint", sampler_means, Some(10.0)),
        (7, "calibration recovery", calibration_recovery, Some(10.0)),
        (8, "occupancy / Little", occupancy_and_little, None),
        (9, "protocol conformance", protocol, None),
    ];
    let mut failed = 0;
    for (n, name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let over = limit.is_some_and(|l| secs > l);
        let (status, detail) = match &outcome {
            Ok(d) if !over => ("PASS", d.clone()),
            Ok(d) => (
                "FAIL",
                format!("{d}; took {secs:.2}s, limit {}s", limit.unwrap()),
            ),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {n} [{name}]: {status} ({secs:.2}s) {detail}");
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 9 criteria passed");
}
