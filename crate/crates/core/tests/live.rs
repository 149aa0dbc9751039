mod common;

use std::sync::mpsc;
use std::time::Duration;

use scout_core::dataset::Dataset;
use scout_core::mission::initial_head;
use scout_core::robot::{run_live, LiveOptions, RobotConfig, RobotNode};
use scout_core::station::{serve, OracleOperator, ServeOptions, Station, StationConfig};

#[test]
fn robot_and_station_converge_over_tcp() {
    let ds = Dataset::open(common::small_mission()).unwrap();
    let station_cfg = StationConfig {
        sync_period_ms: 0,
        ..StationConfig::default()
    };
    let (head, pool) = initial_head(&ds.root().join("base"), &station_cfg.detector, 0, &station_cfg).unwrap();
    let station = Station::new(station_cfg, head.clone(), pool, None).unwrap();

    let (addr_tx, addr_rx) = mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let opts = ServeOptions {
        http: Some("127.0.0.1:0".into()),
        robot: Some("127.0.0.1:0".into()),
        oracle: Some(OracleOperator::from_dataset(&ds, 3)),
        tick_ms: 5,
        on_ready: Some(Box::new(move |_, robot| addr_tx.send(robot.unwrap()).unwrap())),
    };
    let server = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(serve(station, opts, async move {
            let _ = stop_rx.await;
        }))
        .unwrap()
    });
    let robot_addr = addr_rx.recv_timeout(Duration::from_secs(10)).unwrap();

    let cfg = RobotConfig {
        warmup: 20,
        ..RobotConfig::default()
    };
    let memory = RobotNode::fresh_memory(&cfg, ds.load_rgb(0).unwrap().dimensions()).unwrap();
    let mut node = RobotNode::new(cfg, memory, head, None).unwrap();
    let stats = run_live(
        &mut node,
        &ds,
        &LiveOptions {
            endpoint: robot_addr.to_string(),
            frame_interval_ms: 2,
            linger_ms: 6000,
            reconnect_ms: 50,
        },
    )
    .unwrap();
    stop_tx.send(()).unwrap();
    let (station, summary) = server.join().unwrap();

    assert!(stats.sent > 0);
    assert_eq!(summary.candidates as u64, stats.sent);
    assert_eq!(summary.uninteresting as u64, stats.write_backs);
    assert!(summary.interesting > 0);
    assert_eq!(station.queue().counts().pending, 0);
    assert!(!station.is_training());
    assert_eq!(node.head(), station.head(), "heads diverged");
}
