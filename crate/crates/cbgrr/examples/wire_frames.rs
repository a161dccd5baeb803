//! The wire codec: every frame kind encoded, hexdumped and decoded back,
//! plus what the decoder does with garbage.

use cbgrr::protocol::{pid, Message, ReplyMask, Ticket, ViewEntry};
use cbgrr::wire;

fn hexdump(buf: &[u8]) -> String {
    buf.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    let frames = vec![
        Message::Areq {
            pid: pid(1),
            seqno: 7,
            rmask: ReplyMask::from_pids([pid(2), pid(3)]),
            data: b"poll".to_vec(),
        },
        Message::Arpl { pid: pid(3), seqno: 7, data: b"ok".to_vec() },
        Message::Jpoll { pid: pid(1) },
        Message::Join { pid: pid(9) },
        Message::Lpoll { pid: pid(1) },
        Message::Left { pid: pid(4) },
        Message::Vpush {
            pid: pid(1),
            rmask: ReplyMask::from_pids([pid(2)]),
            view: vec![
                ViewEntry { pid: pid(1), ticket: Ticket::new(1).unwrap(), is_new: false },
                ViewEntry { pid: pid(2), ticket: Ticket::new(2).unwrap(), is_new: false },
                ViewEntry { pid: pid(9), ticket: Ticket::new(3).unwrap(), is_new: true },
            ],
        },
        Message::Vack { pid: pid(2) },
    ];

    for msg in &frames {
        let buf = wire::encode(msg).unwrap();
        println!("{:>5} {:>3}B  {}", msg.kind().name(), buf.len(), hexdump(&buf));
        let back = wire::decode(&buf).unwrap();
        assert_eq!(&back, msg, "codec round-trips bit-exactly");
    }

    println!("\nrejections:");
    let mut buf = wire::encode(&frames[0]).unwrap();
    println!("  truncated frame:  {:?}", wire::decode(&buf[..5]).unwrap_err());
    buf[0] ^= 0xff;
    println!("  wrong magic:      {:?}", wire::decode(&buf).unwrap_err());
    let mut buf = wire::encode(&frames[7]).unwrap();
    buf[3] = 0x7f;
    println!("  unknown kind:     {:?}", wire::decode(&buf).unwrap_err());
}
