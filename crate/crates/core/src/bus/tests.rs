use std::fs::OpenOptions;
use std::sync::Arc;

use super::*;
use crate::clock::VirtualClock;
use crate::model::{HeartbeatPayload, ProcessorId};

fn beat(n: u32) -> Payload {
    Payload::Heartbeat(HeartbeatPayload { processor: ProcessorId(1), current_load: n, timestamp: n as u64 })
}

fn load_of(m: &Message) -> u32 {
    match &m.body {
        Payload::Heartbeat(h) => h.current_load,
        other => panic!("unexpected payload {other:?}"),
    }
}

fn durable(dir: &Path, clock: &VirtualClock) -> Broker {
    Broker::open(BrokerConfig::durable(dir), Arc::new(clock.clone())).unwrap()
}

#[test]
fn fresh_queue_is_empty_and_names_are_unique() {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new(0);
    let b = durable(dir.path(), &clock);
    b.create_queue("status", true).unwrap();
    assert_eq!(b.len("status").unwrap(), 0);
    b.create_queue("requests", true).unwrap();
    assert!(matches!(b.create_queue("requests", true), Err(BusError::DuplicateQueue(_))));
    assert!(matches!(b.create_queue("../x", true), Err(BusError::InvalidName(_))));
}

#[test]
fn fifo_and_unknown_queue() {
    let b = Broker::open(BrokerConfig::in_memory(), Arc::new(VirtualClock::new(0))).unwrap();
    b.create_queue("q", false).unwrap();
    for n in 1..=3 {
        b.enqueue("q", beat(n)).unwrap();
    }
    let order: Vec<u32> = (0..3)
        .map(|_| {
            let d = b.dequeue("q", "c", 1000).unwrap().unwrap();
            b.ack("q", d.delivery_tag).unwrap();
            load_of(&d.message)
        })
        .collect();
    assert_eq!(order, [1, 2, 3]);
    assert!(b.dequeue("q", "c", 1000).unwrap().is_none());
    assert!(matches!(b.enqueue("nope", beat(1)), Err(BusError::UnknownQueue(_))));
    assert!(matches!(b.dequeue("nope", "c", 1), Err(BusError::UnknownQueue(_))));
}

#[test]
fn in_flight_message_is_exclusive_until_timeout() {
    let clock = VirtualClock::new(0);
    let b = Broker::open(BrokerConfig::in_memory(), Arc::new(clock.clone())).unwrap();
    b.create_queue("q", false).unwrap();
    b.enqueue("q", beat(1)).unwrap();
    let first = b.dequeue("q", "c1", 100).unwrap().unwrap();
    assert_eq!(first.attempt, 1);
    assert!(b.dequeue("q", "c2", 100).unwrap().is_none());
    clock.advance(101);
    let again = b.dequeue("q", "c2", 100).unwrap().unwrap();
    assert_eq!(again.message, first.message);
    assert_eq!(again.attempt, 2);
    assert!(matches!(b.ack("q", first.delivery_tag), Err(BusError::ExpiredTag(_))));
    b.ack("q", again.delivery_tag).unwrap();
    b.ack("q", again.delivery_tag).unwrap();
    assert!(matches!(b.ack("q", DeliveryTag(u64::MAX)), Err(BusError::UnknownTag(u64::MAX))));
}

#[test]
fn expired_lease_can_still_be_acked_before_redelivery() {
    let clock = VirtualClock::new(0);
    let b = Broker::open(BrokerConfig::in_memory(), Arc::new(clock.clone())).unwrap();
    b.create_queue("q", false).unwrap();
    b.enqueue("q", beat(1)).unwrap();
    let d = b.dequeue("q", "c", 10).unwrap().unwrap();
    clock.advance(50);
    b.ack("q", d.delivery_tag).unwrap();
    assert!(b.is_empty("q").unwrap());
}

#[test]
fn message_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new(0);
    let id = {
        let b = durable(dir.path(), &clock);
        b.create_queue("dispatch.P1", true).unwrap();
        b.enqueue("dispatch.P1", beat(7)).unwrap()
    };
    let b = durable(dir.path(), &clock);
    let msgs = b.messages("dispatch.P1").unwrap();
    assert_eq!(msgs.len(), 1);
    assert_eq!(msgs[0].message.msg_id, id);
    assert_eq!(load_of(&msgs[0].message), 7);
}

#[test]
fn thousand_messages_recovered_with_ids() {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new(0);
    let ids: Vec<MsgId> = {
        let b = durable(dir.path(), &clock);
        b.create_queue("requests", true).unwrap();
        (0..1000).map(|n| b.enqueue("requests", beat(n)).unwrap()).collect()
    };
    let b = durable(dir.path(), &clock);
    let got: Vec<MsgId> =
        b.messages("requests").unwrap().into_iter().map(|m| m.message.msg_id).collect();
    assert_eq!(got, ids);
    // new ids never collide with recovered ones
    let fresh = b.enqueue("requests", beat(0)).unwrap();
    assert!(!ids.contains(&fresh));
}

#[test]
fn acked_message_stays_gone_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new(0);
    {
        let b = durable(dir.path(), &clock);
        b.create_queue("q", true).unwrap();
        for n in 1..=3 {
            b.enqueue("q", beat(n)).unwrap();
        }
        let d = b.dequeue("q", "c", 1000).unwrap().unwrap();
        b.ack("q", d.delivery_tag).unwrap();
        // leased but unacked: must come back
        b.dequeue("q", "c", 1000).unwrap().unwrap();
    }
    let b = durable(dir.path(), &clock);
    let loads: Vec<u32> = b.messages("q").unwrap().iter().map(|m| load_of(&m.message)).collect();
    assert_eq!(loads, [2, 3]);
    let d = b.dequeue("q", "c", 1000).unwrap().unwrap();
    assert_eq!(load_of(&d.message), 2);
}

#[test]
fn recover_from_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let b = Broker::recover(dir.path(), Arc::new(VirtualClock::new(0))).unwrap();
    assert!(b.queue_names().is_empty());
    assert_eq!(b.recovery_report().skipped(), 0);
}

#[test]
fn truncated_final_record_is_reported_and_cut() {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new(0);
    {
        let b = durable(dir.path(), &clock);
        b.create_queue("q", true).unwrap();
        for n in 1..=3 {
            b.enqueue("q", beat(n)).unwrap();
        }
    }
    let path = dir.path().join("q.qlog");
    let len = std::fs::metadata(&path).unwrap().len();
    OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 5).unwrap();

    let b = durable(dir.path(), &clock);
    let rep = &b.recovery_report().queues[0];
    assert_eq!(rep.recovered, 2);
    assert_eq!(rep.skipped_offsets.len(), 1);
    // the broken tail is gone, so later appends stay readable
    b.enqueue("q", beat(4)).unwrap();
    drop(b);
    let b = durable(dir.path(), &clock);
    assert_eq!(b.recovery_report().skipped(), 0);
    let loads: Vec<u32> = b.messages("q").unwrap().iter().map(|m| load_of(&m.message)).collect();
    assert_eq!(loads, [1, 2, 4]);
}

#[test]
fn non_durable_queue_is_not_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new(0);
    {
        let b = durable(dir.path(), &clock);
        b.create_queue("scratch", false).unwrap();
        b.enqueue("scratch", beat(1)).unwrap();
    }
    let b = durable(dir.path(), &clock);
    assert!(!b.has_queue("scratch"));
}

#[test]
fn concurrent_consumers_never_share_a_message() {
    let b = Arc::new(Broker::open(BrokerConfig::in_memory(), Arc::new(VirtualClock::new(0))).unwrap());
    b.create_queue("q", false).unwrap();
    for n in 0..400 {
        b.enqueue("q", beat(n)).unwrap();
    }
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let b = b.clone();
            std::thread::spawn(move || {
                let mut seen = Vec::new();
                while let Some(d) = b.dequeue("q", &format!("c{i}"), 60_000).unwrap() {
                    b.ack("q", d.delivery_tag).unwrap();
                    seen.push(load_of(&d.message));
                }
                seen
            })
        })
        .collect();
    let mut all: Vec<u32> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..400).collect::<Vec<_>>());
}
