//! The protocol over real UDP sockets on loopback: three founding nodes, a
//! request round, a live join, and a crash handled by the heartbeat fault
//! detector. Runs in a few seconds of wall time.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{SocketAddr, UdpSocket};
use std::time::Duration;

use cbgrr::protocol::{pid, Config, ProcessId};
use cbgrr::udp::{echo_responder, spawn_node_with_socket, Command, NodeEvent, NodeSetup};

fn main() {
    // Bind everything on port 0 first, then tell every node where the
    // others live. The peer table is the broadcast domain.
    let mut socks: Vec<UdpSocket> = Vec::new();
    let mut peers: BTreeMap<ProcessId, SocketAddr> = BTreeMap::new();
    for p in 1..=4u8 {
        let s = UdpSocket::bind("127.0.0.1:0").unwrap();
        peers.insert(pid(p), s.local_addr().unwrap());
        socks.push(s);
    }
    let config = Config { msg_t: 20_000, fault_detect_t: 300_000, ..Config::default() };
    let founders: BTreeSet<ProcessId> = [pid(1), pid(2), pid(3)].into();

    let mut nodes = Vec::new();
    for (i, sock) in socks.into_iter().enumerate() {
        let p = pid(i as u8 + 1);
        let initial = if founders.contains(&p) { founders.clone() } else { BTreeSet::new() };
        let setup = NodeSetup {
            pid: p,
            peers: peers.clone(),
            initial_members: initial,
            config: config.clone(),
        };
        nodes.push(spawn_node_with_socket(setup, sock, echo_responder(p)).unwrap());
    }
    println!("spawned n1..n3 as founders, n4 out of the group");

    let coord = &nodes[0];
    ev(coord.wait_for(secs(2), |e| matches!(e, NodeEvent::BecameCoord { .. })));

    println!("\n-- a request round against the whole group --");
    coord.command(Command::Request { data: b"hello".to_vec(), dsts: BTreeSet::new() });
    ev(coord.wait_for(secs(5), |e| matches!(e, NodeEvent::RoundDone { .. })));

    println!("\n-- n4 joins through a poll --");
    nodes[3].command(Command::Join);
    // The poll only finds processes already waiting to join, so give n4's
    // thread a moment to act on the command before polling.
    std::thread::sleep(Duration::from_millis(200));
    coord.command(Command::CheckJoins { window: Duration::from_millis(100) });
    ev(nodes[3].wait_for(secs(5), |e| matches!(e, NodeEvent::GroupChanged { .. })));
    ev(coord.wait_for(secs(5), |e| matches!(e, NodeEvent::GroupChanged { .. })));
    ev(coord.wait_for(secs(5), |e| matches!(e, NodeEvent::PollDone { .. })));

    println!("\n-- another round, now with three repliers --");
    coord.command(Command::Request { data: b"again".to_vec(), dsts: BTreeSet::new() });
    ev(coord.wait_for(secs(5), |e| matches!(e, NodeEvent::RoundDone { .. })));

    println!("\n-- the coordinator dies; heartbeats stop; n2 takes over --");
    let n1 = nodes.remove(0);
    n1.kill().unwrap();
    ev(nodes[0].wait_for(secs(5), |e| matches!(e, NodeEvent::BecameCoord { .. })));

    println!("\n-- the successor runs a round to prove the group still works --");
    nodes[0].command(Command::Request { data: b"still here".to_vec(), dsts: BTreeSet::new() });
    ev(nodes[0].wait_for(secs(5), |e| matches!(e, NodeEvent::RoundDone { .. })));

    for n in nodes {
        n.shutdown().unwrap();
    }
    println!("\nall nodes shut down cleanly");
}

fn ev(e: Option<NodeEvent>) {
    match e {
        Some(e) => println!("  {e}"),
        None => panic!("expected event did not arrive in time"),
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}
