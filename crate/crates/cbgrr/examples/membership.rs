//! Group membership end to end: a process joins through a poll, the view is
//! pushed and acknowledged, and a member later leaves through a leave poll.

use cbgrr::sim::{run, ScriptEvent, ScriptOp, SimConfig};

fn main() {
    let cfg = SimConfig {
        n: 4,
        initial_members: vec![1, 2, 3],
        events: vec![
            // n4 wants in; the coordinator polls shortly after.
            ScriptEvent { at: 10_000, node: 4, op: ScriptOp::Join },
            ScriptEvent { at: 40_000, node: 1, op: ScriptOp::CheckJoins { window: 30_000 } },
            // later, n3 wants out; the coordinator polls for leavers.
            ScriptEvent { at: 300_000, node: 3, op: ScriptOp::Leave },
            ScriptEvent { at: 320_000, node: 1, op: ScriptOp::CheckLeaves { window: 30_000 } },
        ],
        ..SimConfig::default()
    };
    let rep = run(cfg).unwrap();
    assert!(rep.violations.is_empty(), "{:?}", rep.violations);

    println!("membership traffic:");
    for line in rep.trace.lines() {
        if ["JPOLL", "JOIN", "VPUSH", "VACK", "LPOLL", "LEFT", "STATE", "GROUP"]
            .iter()
            .any(|t| line.contains(t))
        {
            println!("  {line}");
        }
    }

    println!("\nadmissions:");
    for j in &rep.joins {
        println!(
            "  n{} saw the poll at {}us and was a full member by {}us ({}us total)",
            j.node,
            j.poll_seen,
            j.normal_at,
            j.normal_at - j.poll_seen
        );
    }

    println!("\nmembership operations at the coordinator:");
    for m in &rep.membership {
        println!("  {} by n{}: {}us", m.kind, m.node, m.end - m.start);
    }

    println!("\nfinal states:");
    for (n, s) in &rep.final_states {
        println!("  n{n}: {s}");
    }
}
