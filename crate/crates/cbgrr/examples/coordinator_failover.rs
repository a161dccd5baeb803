//! Coordinator failure in the middle of a workload: fault detection, the
//! message-free election, and the successor picking the rounds back up.

use cbgrr::sim::{run, FaultTrigger, ProtocolKind, SimConfig, Workload};

fn main() {
    let cfg = SimConfig {
        n: 4,
        initial_members: (1..=4).collect(),
        protocol: ProtocolKind::Cbgrr,
        workload: Workload::Rounds { count: 12, payload_len: 128 },
        // The coordinator dies the instant its third request hits the air.
        fault_triggers: vec![FaultTrigger { victim: 1, sender: 1, tag: "AREQ".into(), nth: 3 }],
        seed: 5,
        ..SimConfig::default()
    };
    let rep = run(cfg).unwrap();
    assert!(rep.violations.is_empty(), "{:?}", rep.violations);
    assert!(!rep.timed_out, "the successor finished the workload");

    println!("what the survivors saw:");
    for line in rep.trace.lines() {
        if line.contains("CRASH")
            || line.contains("FAULT")
            || line.contains("BECAME_COORD")
            || line.contains("ROUND_DONE")
        {
            println!("  {line}");
        }
    }

    println!("\nfinal states:");
    for (n, s) in &rep.final_states {
        println!("  n{n}: {s}");
    }
    println!(
        "\n{} rounds completed in total; the election itself sent no messages:",
        rep.rounds.len()
    );
    println!(
        "  every member ranks the shared view by ticket age, so when the fault",
    );
    println!(
        "  detector removes the coordinator, the next ticket just takes over."
    );
}
