//! Serves the control protocol on a local TCP port, drives it with a
//! scripted client that changes the allocation mid-run, and replays the
//! recorded transcript to show the session is reproducible.
//!
//! ```text
//! cargo run --example control_session
//! ```

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};

use etlsim::control::server::{self, ServerConfig};
use etlsim::control::{decode_event, replay, write_transcript, ControlCore, Event};
use etlsim::scenario::load_scenario;

const SCENARIO: &str = include_str!("scenarios/flow_balance.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = load_scenario(SCENARIO)?;
    let window = 1_000;
    let mut handle = server::start(
        ControlCore::new(sc.clone(), window)?,
        ServerConfig::default(),
    );
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    handle.serve_tcp(listener)?;

    let stream = TcpStream::connect(addr)?;
    let mut writer = stream.try_clone()?;
    let lines = BufReader::new(stream).lines();
    let mut send = |line: &str| -> std::io::Result<()> {
        println!("> {line}");
        writeln!(writer, "{line}")
    };

    send(r#"{"cmd":"set_pace","ticks_per_second":100000}"#)?;
    send(r#"{"cmd":"set_allocation","alloc":{"e1.T":1}}"#)?;
    send(r#"{"cmd":"run","ticks":3000}"#)?;
    let mut live = Vec::new();
    let mut runs = 0;
    for line in lines {
        let event = decode_event(&line?)?;
        match &event {
            Event::WindowMetrics(w) => {
                println!(
                    "< window {:>5}..{:<5} e1.T={:<2} delivered {}",
                    w.window_start,
                    w.window_end,
                    w.phase("e1.T").map_or(0, |p| p.threads),
                    w.delivered()
                );
                live.push(w.clone());
            }
            Event::RunComplete { tick } => {
                println!("< run_complete at tick {tick}");
                runs += 1;
                if runs == 2 {
                    break;
                }
                send(r#"{"cmd":"set_allocation","alloc":{"e1.T":8}}"#)?;
                send(r#"{"cmd":"run","ticks":3000}"#)?;
            }
            other => println!("< {other:?}"),
        }
    }

    let transcript = handle.shutdown();
    print!("\ntranscript:\n{}", write_transcript(&transcript));
    let replayed: Vec<_> = replay(&sc, window, &transcript)?
        .into_iter()
        .filter_map(|e| match e {
            Event::WindowMetrics(w) => Some(w),
            _ => None,
        })
        .collect();
    println!("replay reproduces the live windows: {}", replayed == live);
    Ok(())
}
