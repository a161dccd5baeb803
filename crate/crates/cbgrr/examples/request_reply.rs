//! The protocol core, driven by hand: three machines, one request-reply
//! round, no clocks or sockets. Shows the event-in/actions-out contract and
//! the slot chain: the second replier overhears the first reply instead of
//! waiting for a timer.

use std::collections::BTreeSet;

use cbgrr::protocol::{pid, Action, Config, Event, Machine, Message, ProcessId, Via};

fn deliver(to: &mut Machine, msg: &Message) -> Vec<Action> {
    to.handle(Event::MsgRecv { msg: msg.clone(), via: Via::Broadcast }).unwrap()
}

fn show(owner: ProcessId, actions: &[Action]) {
    for a in actions {
        match a {
            Action::Broadcast(m) => println!("  n{} broadcasts {m:?}", owner.get()),
            Action::Unicast { dst, msg } => {
                println!("  n{} unicasts {msg:?} to n{}", owner.get(), dst.get())
            }
            Action::SetTimer { kind, delay, .. } => {
                println!("  n{} arms {} timer for {delay}us", owner.get(), kind.name())
            }
            Action::CancelTimers { .. } => println!("  n{} cancels timers", owner.get()),
            Action::DeliverRequest { token, data } => {
                println!("  n{} delivers request to app (token {token}, {:?})", owner.get(), data)
            }
            Action::NotifyBecameCoord { members } => {
                println!("  n{} becomes coordinator of {members:?}", owner.get())
            }
            Action::NotifyGroupChanged { members } => {
                println!("  n{} sees membership {members:?}", owner.get())
            }
            Action::RoundComplete { replies } => {
                println!("  n{} round complete: {replies:?}", owner.get())
            }
        }
    }
}

fn main() {
    let group: BTreeSet<ProcessId> = [pid(1), pid(2), pid(3)].into();
    let cfg = Config::default();
    let (mut m1, a) = Machine::init(pid(1), &group, cfg.clone()).unwrap();
    show(pid(1), &a);
    let (mut m2, _) = Machine::init(pid(2), &group, cfg.clone()).unwrap();
    let (mut m3, _) = Machine::init(pid(3), &group, cfg).unwrap();

    println!("\n-- coordinator starts a round against n2 and n3 --");
    let dsts: BTreeSet<ProcessId> = [pid(2), pid(3)].into();
    let a = m1.request_reply(dsts, b"read sensors".to_vec(), 1_000).unwrap();
    show(pid(1), &a);
    let areq = first_broadcast(&a);

    println!("\n-- both members receive the request --");
    let a2 = deliver(&mut m2, &areq);
    show(pid(2), &a2);
    let a3 = deliver(&mut m3, &areq);
    show(pid(3), &a3);

    println!("\n-- applications answer; n2 owns slot 0 and sends at once --");
    let a2 = m2.reply_ready(token_of(&a2), b"21C".to_vec()).unwrap();
    show(pid(2), &a2);
    let arpl2 = first_broadcast(&a2);

    println!("\n-- n3 owns slot 1: it holds its reply until its turn --");
    let a3 = m3.reply_ready(token_of(&a3), b"22C".to_vec()).unwrap();
    show(pid(3), &a3);

    println!("\n-- n3 overhears n2's reply and takes its slot without any timer --");
    let a3 = deliver(&mut m3, &arpl2);
    show(pid(3), &a3);
    let arpl3 = first_broadcast(&a3);

    println!("\n-- the coordinator collects both replies --");
    let a = deliver(&mut m1, &arpl2);
    show(pid(1), &a);
    let a = deliver(&mut m1, &arpl3);
    show(pid(1), &a);

    assert!(m1.is_idle(), "round closed, coordinator idle again");
    println!("\nround finished; total frames on the wire: 3 (one request, two replies)");
}

fn first_broadcast(actions: &[Action]) -> Message {
    actions
        .iter()
        .find_map(|a| match a {
            Action::Broadcast(m) => Some(m.clone()),
            _ => None,
        })
        .expect("a broadcast action")
}

fn token_of(actions: &[Action]) -> u64 {
    actions
        .iter()
        .find_map(|a| match a {
            Action::DeliverRequest { token, .. } => Some(*token),
            _ => None,
        })
        .expect("a delivery")
}
