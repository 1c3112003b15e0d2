use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::storage::{SimDir, SimFs};

fn small() -> SpaceConfig {
    SpaceConfig {
        reserved_free_segments: 2,
        log_size_threshold: 16 << 10,
        node_capacity: 8,
        log_buffer_entries: 64,
        ..SpaceConfig::with_segment_size(64 << 10)
    }
}

fn sim() -> (Arc<SimFs>, SimDir) {
    let fs = SimFs::new();
    let dir = fs.dir("s");
    (fs, dir)
}

fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

/// Applies a random op to both the space and a plain byte vector.
fn random_op(rng: &mut StdRng, space: &FlexSpace, oracle: &mut Vec<u8>, max_size: usize) -> Result<()> {
    let size = oracle.len();
    match rng.gen_range(0..10) {
        0..=3 => {
            let len = rng.gen_range(1..=3000usize);
            if size + len > max_size {
                let len = rng.gen_range(1..=size.max(1)).min(size);
                if len > 0 {
                    let off = rng.gen_range(0..=size - len);
                    space.collapse_range(off as u64, len as u64)?;
                    oracle.drain(off..off + len);
                }
                return Ok(());
            }
            let off = rng.gen_range(0..=size);
            let data = pattern(rng.gen(), len);
            space.insert_range(off as u64, &data)?;
            oracle.splice(off..off, data);
        }
        4..=6 => {
            let len = rng.gen_range(1..=5000usize);
            let off = rng.gen_range(0..=size + 100);
            if off + len > max_size {
                return Ok(());
            }
            let data = pattern(rng.gen(), len);
            space.pwrite(off as u64, &data)?;
            if oracle.len() < off + len {
                oracle.resize(off + len, 0);
            }
            oracle[off..off + len].copy_from_slice(&data);
        }
        7 | 8 if size > 0 => {
            let len = rng.gen_range(1..=size.min(4000));
            let off = rng.gen_range(0..=size - len);
            space.collapse_range(off as u64, len as u64)?;
            oracle.drain(off..off + len);
        }
        _ if size > 0 => {
            let len = rng.gen_range(1..=size);
            let off = rng.gen_range(0..=size - len);
            space.defrag(off as u64, len as u64)?;
        }
        _ => {}
    }
    Ok(())
}

fn assert_content(space: &FlexSpace, oracle: &[u8]) {
    assert_eq!(space.total_size(), oracle.len() as u64);
    assert!(
        space.pread(0, oracle.len() as u64).unwrap() == oracle,
        "content differs"
    );
}

#[test]
fn create_is_empty_version_one() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    assert_eq!(s.total_size(), 0);
    assert_eq!(s.version(), 1);
}

#[test]
fn pwrite_survives_barrier_and_reopen() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.pwrite(0, &[0xAB; 4096]).unwrap();
    assert_eq!(s.pread(0, 4096).unwrap(), vec![0xAB; 4096]);
    s.barrier().unwrap();
    drop(s);
    let img = fs.durable_image();
    let s = FlexSpace::open_in(&img.dir("s"), small()).unwrap();
    assert_eq!(s.pread(0, 4096).unwrap(), vec![0xAB; 4096]);
}

#[test]
fn write_past_end_leaves_hole() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.pwrite(8192, b"xyz").unwrap();
    assert_eq!(s.total_size(), 8195);
    assert_eq!(s.pread(0, 8192).unwrap(), vec![0; 8192]);
    assert_eq!(s.pread(8192, 3).unwrap(), b"xyz");
    assert!(matches!(s.pread(8000, 200), Err(SpaceError::OutOfRange { .. })));
    s.verify().unwrap();
}

#[test]
fn insert_shifts_existing_bytes() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.insert_range(0, b"world").unwrap();
    s.insert_range(0, b"hello").unwrap();
    assert_eq!(s.pread(0, 10).unwrap(), b"helloworld");
    s.collapse_range(2, 6).unwrap();
    assert_eq!(s.pread(0, 4).unwrap(), b"held");
    assert!(s.collapse_range(3, 2).is_err());
}

#[test]
fn inserting_at_front_shifts_every_byte() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let a = pattern(1, 9);
    let b = pattern(2, 8);
    let c = pattern(3, 13);
    s.insert_range(0, &a).unwrap();
    s.insert_range(9, &b).unwrap();
    s.insert_range(17, &c).unwrap();
    let before = s.pread(0, 30).unwrap();
    s.insert_range(0, b"NEW").unwrap();
    let after = s.pread(0, 33).unwrap();
    assert_eq!(&after[..3], b"NEW");
    assert_eq!(&after[3..], &before[..]);
}

#[test]
fn read_extent_returns_extent_start() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let data = pattern(4, 100);
    s.pwrite(0, &data).unwrap();
    let (start, got) = s.read_extent(40, 64).unwrap();
    assert_eq!(start, 0);
    assert_eq!(got, &data[..64]);

    s.insert_range(50, b"mid").unwrap();
    let (start, got) = s.read_extent(50, 64).unwrap();
    assert_eq!(start, 50);
    assert_eq!(got, b"mid");
    let (start, got) = s.read_extent(53, 1000).unwrap();
    assert_eq!(start, 53);
    assert_eq!(got, &data[50..]);
    assert!(s.read_extent(103, 1).is_err());

    s.pwrite(200, b"z").unwrap();
    let (start, got) = s.read_extent(150, 10).unwrap();
    assert_eq!((start, got.len()), (103, 0));
}

#[test]
fn defrag_coalesces_fragmented_range() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.pwrite(0, &pattern(5, 16 << 10)).unwrap();
    // Punch 16 separate 1 KB writes, interleaved with an unrelated region
    // so none of them are physically adjacent.
    for i in 0..16u64 {
        s.pwrite(i * 1024, &pattern(100 + i, 1024)).unwrap();
        s.pwrite(1 << 20, &[i as u8]).unwrap();
    }
    let before = s.pread(0, 16 << 10).unwrap();
    assert_eq!(s.query_range(0, 16 << 10).unwrap().len(), 16);
    s.defrag(0, 16 << 10).unwrap();
    let runs = s.query_range(0, 16 << 10).unwrap();
    assert!(runs.len() <= (16usize << 10).div_ceil(2048), "{} runs", runs.len());
    assert_eq!(s.pread(0, 16 << 10).unwrap(), before);
    // Already contiguous: nothing gets worse.
    s.defrag(0, 16 << 10).unwrap();
    assert!(s.query_range(0, 16 << 10).unwrap().len() <= runs.len());
    assert_eq!(s.pread(0, 16 << 10).unwrap(), before);
    s.verify().unwrap();
}

#[test]
fn barrier_on_clean_space_writes_nothing() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.pwrite(0, b"abc").unwrap();
    s.barrier().unwrap();
    let ops = fs.io_ops();
    s.barrier().unwrap();
    s.barrier().unwrap();
    assert_eq!(fs.io_ops(), ops);
}

#[test]
fn unbarriered_write_is_lost_barriered_write_survives() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.pwrite(0, b"old!").unwrap();
    s.barrier().unwrap();
    s.pwrite(0, b"new!").unwrap();
    for seed in 0..16 {
        let img = fs.crash_image(seed);
        let r = FlexSpace::open_in(&img.dir("s"), small()).unwrap();
        assert_eq!(r.pread(0, 4).unwrap(), b"old!");
    }
    s.barrier().unwrap();
    for seed in 0..16 {
        let img = fs.crash_image(seed);
        let r = FlexSpace::open_in(&img.dir("s"), small()).unwrap();
        assert_eq!(r.pread(0, 4).unwrap(), b"new!");
    }
}

#[test]
fn checkpoint_bumps_version_and_resets_log() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    assert_eq!(s.checkpoint().unwrap(), 2);
    let log = fs.contents("s/log").unwrap();
    assert_eq!(log.len() as u64, self::log::HEADER_SIZE);
    assert_eq!(u64::from_le_bytes(log[8..16].try_into().unwrap()), 2);
    drop(s);
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    assert_eq!(s.version(), 2);
}

#[test]
fn checkpoint_then_crash_needs_no_replay() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let mut rng = StdRng::seed_from_u64(9);
    let mut oracle = Vec::new();
    for _ in 0..1000 {
        random_op(&mut rng, &s, &mut oracle, 200 << 10).unwrap();
    }
    let v = s.checkpoint().unwrap();
    let img = fs.crash_image(1);
    assert_eq!(img.contents("s/log").unwrap().len() as u64, self::log::HEADER_SIZE);
    let r = FlexSpace::open_in(&img.dir("s"), small()).unwrap();
    assert_eq!(r.version(), v);
    assert_content(&r, &oracle);
    r.verify().unwrap();
}

#[test]
fn clean_close_roundtrip() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let mut rng = StdRng::seed_from_u64(10);
    let mut oracle = Vec::new();
    for _ in 0..500 {
        random_op(&mut rng, &s, &mut oracle, 100 << 10).unwrap();
    }
    s.close().unwrap();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    assert_content(&s, &oracle);
    s.verify().unwrap();
}

#[test]
fn persisted_config_wins_on_reopen() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.close().unwrap();
    let s = FlexSpace::open_in(&dir, SpaceConfig::default()).unwrap();
    assert_eq!(s.config(), small());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = small();
    c.max_extent = 4096;
    assert!(matches!(c.validate(), Err(SpaceError::InvalidConfig(_))));
    let mut c = small();
    c.utilization_cap = Ratio { num: 32, den: 32 };
    assert!(c.validate().is_err());
    c.utilization_cap = Ratio { num: 31, den: 32 };
    assert!(c.validate().is_ok());
}

#[test]
fn corrupt_tree_header_is_unrecoverable() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.pwrite(0, b"x").unwrap();
    s.close().unwrap();
    fs.poke("s/tree", 10, &[0x55]);
    assert!(matches!(
        FlexSpace::open_in(&dir, small()),
        Err(SpaceError::Unrecoverable(_))
    ));
}

#[test]
fn stale_log_is_discarded_newer_log_fails() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    s.pwrite(0, b"abcd").unwrap();
    s.barrier().unwrap();
    let old_log = fs.contents("s/log").unwrap();
    s.checkpoint().unwrap();
    s.pwrite(0, b"zz").unwrap();
    s.barrier().unwrap();
    drop(s);

    // A log from an older version (as if the reinit never landed) is ignored.
    let img = fs.durable_image();
    img.poke("s/log", 0, &old_log);
    let r = FlexSpace::open_in(&img.dir("s"), small()).unwrap();
    assert_eq!(r.pread(0, 4).unwrap(), b"abcd");
    drop(r);

    // A log claiming a newer version than the tree is an error.
    let img = fs.durable_image();
    let log = img.contents("s/log").unwrap();
    let mut hdr = log[..32].to_vec();
    hdr[8..16].copy_from_slice(&99u64.to_le_bytes());
    let crc = crc32fast::hash(&hdr[..28]);
    hdr[28..32].copy_from_slice(&crc.to_le_bytes());
    img.poke("s/log", 0, &hdr);
    assert!(matches!(
        FlexSpace::open_in(&img.dir("s"), small()),
        Err(SpaceError::Unrecoverable(_))
    ));
}

#[test]
fn random_ops_match_byte_string_oracle() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let mut rng = StdRng::seed_from_u64(11);
    let mut oracle = Vec::new();
    for i in 0..10_000 {
        random_op(&mut rng, &s, &mut oracle, 1 << 20).unwrap();
        if i % 97 == 0 {
            s.barrier().unwrap();
        }
        if i % 1000 == 0 {
            assert_content(&s, &oracle);
            s.verify().unwrap();
        }
    }
    assert_content(&s, &oracle);
    s.verify().unwrap();
    assert!(s.stats().checkpoints > 0);
}

#[test]
fn single_byte_operations() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let mut oracle = Vec::new();
    let mut rng = StdRng::seed_from_u64(12);
    for _ in 0..3000 {
        let size = oracle.len();
        if size > 0 && rng.gen_bool(0.3) {
            let off = rng.gen_range(0..size);
            s.collapse_range(off as u64, 1).unwrap();
            oracle.remove(off);
        } else {
            let off = rng.gen_range(0..=size);
            let b: u8 = rng.gen();
            s.insert_range(off as u64, &[b]).unwrap();
            oracle.insert(off, b);
        }
    }
    assert_content(&s, &oracle);
    s.verify().unwrap();
}

#[test]
fn gc_on_empty_segments_relocates_nothing() {
    let (_fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let seg = small().segment_size;
    for i in 0..3u64 {
        s.pwrite(i * seg, &vec![1u8; seg as usize - 2048]).unwrap();
    }
    s.collapse_range(0, s.total_size()).unwrap();
    let before = s.stats();
    let reclaimed = s.gc().unwrap();
    let after = s.stats();
    assert_eq!(after.gc_relocated_bytes, before.gc_relocated_bytes);
    assert!(reclaimed >= 2 * seg, "reclaimed {reclaimed}");
    // Everything but the open head segment is free again.
    assert_eq!(after.free_segments + 1, after.segments);
}

#[test]
fn gc_sole_victim_reclaims_at_least_one_extent() {
    let (_fs, dir) = sim();
    let cfg = SpaceConfig {
        capacity_segments: Some(4),
        reserved_free_segments: 1,
        ..small()
    };
    let seg = cfg.segment_size;
    let me = cfg.max_extent;
    let s = FlexSpace::open_in(&dir, cfg).unwrap();
    // Fill exactly one segment, then overwrite one extent of it so it sits
    // at 31/32 utilization.
    s.pwrite(0, &pattern(1, seg as usize)).unwrap();
    s.pwrite(me * 3, &pattern(2, me as usize)).unwrap();
    s.barrier().unwrap();
    let valid = s.segment_valid_bytes();
    assert_eq!(valid[0], seg - me);
    let content = s.pread(0, seg).unwrap();
    let reclaimed = s.gc().unwrap();
    assert!(reclaimed >= me, "reclaimed {reclaimed}");
    assert_eq!(s.segment_valid_bytes()[0], 0);
    assert_eq!(s.pread(0, seg).unwrap(), content);
    s.verify().unwrap();
}

#[test]
fn overwrites_under_capacity_never_fail() {
    let (_fs, dir) = sim();
    let cfg = SpaceConfig {
        capacity_segments: Some(16),
        reserved_free_segments: 2,
        utilization_cap: Ratio { num: 85, den: 100 },
        ..small()
    };
    let seg = cfg.segment_size;
    let s = FlexSpace::open_in(&dir, cfg).unwrap();
    let size = (16 * seg * 85 / 100) / 4096 * 4096;
    let mut oracle = vec![0u8; size as usize];
    for off in (0..size).step_by(4096) {
        let d = pattern(off, 4096);
        s.pwrite(off, &d).unwrap();
        oracle[off as usize..off as usize + 4096].copy_from_slice(&d);
    }
    let mut rng = StdRng::seed_from_u64(13);
    for i in 0..5000 {
        // Skewed: most writes hit the first tenth.
        let page = if rng.gen_bool(0.8) {
            rng.gen_range(0..size / 4096 / 10)
        } else {
            rng.gen_range(0..size / 4096)
        };
        let d = pattern(i, 4096);
        s.pwrite(page * 4096, &d).unwrap();
        oracle[(page * 4096) as usize..(page * 4096 + 4096) as usize].copy_from_slice(&d);
        if i % 500 == 0 {
            s.verify().unwrap();
        }
    }
    assert_content(&s, &oracle);
    s.verify().unwrap();
    let st = s.stats();
    assert!(st.segments <= 16);
    assert!(st.gc_runs > 0);
    // Growing past the cap is refused rather than breaking the bound.
    assert!(matches!(
        s.pwrite(size, &vec![0u8; seg as usize]),
        Err(SpaceError::SpaceExhausted(_))
    ));
}

#[test]
fn log_replay_is_deterministic() {
    let (fs, dir) = sim();
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    let mut rng = StdRng::seed_from_u64(14);
    let mut oracle = Vec::new();
    for i in 0..400 {
        random_op(&mut rng, &s, &mut oracle, 100 << 10).unwrap();
        if i % 10 == 0 {
            s.barrier().unwrap();
        }
    }
    s.barrier().unwrap();
    let img = fs.durable_image();
    let tree_f = img.dir("s").open(TREE_FILE).unwrap();
    let log_f = img.dir("s").open(LOG_FILE).unwrap();
    let header = Header::read(&tree_f).unwrap();
    let cfg = SpaceConfig::decode(&header.config).tree_config();
    let scan = self::log::LogFile::scan(&log_f).unwrap();
    assert!(!scan.batches.is_empty());
    let replayed = || {
        let (_, mut t) = TreeFile::load(Arc::clone(&tree_f), &header, cfg.clone()).unwrap();
        for e in scan.batches.iter().flatten() {
            replay(&mut t, e).unwrap();
        }
        t.to_layout()
    };
    assert_eq!(replayed(), replayed());
}

/// Runs a scripted workload, crashes at I/O call `k`, recovers from a
/// random post-crash image and checks the content against every state the
/// durability contract allows.
fn crash_once(script_seed: u64, k: u64, image_seed: u64) -> bool {
    let fs = SimFs::new();
    let dir = fs.dir("s");
    let s = FlexSpace::open_in(&dir, small()).unwrap();
    fs.crash_after(k);
    let mut rng = StdRng::seed_from_u64(script_seed);
    let mut oracle = Vec::new();
    // Snapshots from the newest state known to be durable onward.
    let mut window: Vec<Vec<u8>> = vec![Vec::new()];
    let mut commits = s.stats().commits + s.stats().checkpoints;
    for _ in 0..300 {
        let r = match rng.gen_range(0..20) {
            0..=2 => s.barrier(),
            3 => s.checkpoint().map(|_| ()),
            _ => random_op(&mut rng, &s, &mut oracle, 64 << 10),
        };
        if r.is_err() {
            // The failed op may or may not have reached its commit.
            window.push(oracle.clone());
            break;
        }
        let now = s.stats().commits + s.stats().checkpoints;
        if now != commits {
            // A commit inside this op covers at least the previous state.
            let keep = window.len() - 1;
            window.drain(..keep);
            commits = now;
        }
        window.push(oracle.clone());
    }
    if !fs.crashed() {
        return false;
    }
    let img = fs.crash_image(image_seed);
    let r = FlexSpace::open_in(&img.dir("s"), small()).unwrap();
    let got = r.pread(0, r.total_size()).unwrap();
    assert!(
        window.contains(&got),
        "crash at {k}: recovered {} bytes matching none of {} candidate states",
        got.len(),
        window.len()
    );
    r.verify().unwrap();
    true
}

#[test]
fn crashes_recover_to_committed_state() {
    let mut rng = StdRng::seed_from_u64(15);
    let mut crashed = 0;
    for i in 0..60 {
        let k = rng.gen_range(1..400);
        crashed += crash_once(i % 7, k, rng.gen()) as usize;
    }
    assert!(crashed >= 50, "only {crashed} runs reached their crash point");
}
