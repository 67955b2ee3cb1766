//! Episode persistence, loading, batching, and train/val splitting.
//!
//! Episode files use the shared binary container (magic `PCSG`): a header of
//! `key=value` strings (format version, tensor shapes, dt, scenario id,
//! expert config hash) followed by one length-prefixed record per frame.
//! All floats are 64-bit little-endian; roundtrips are bit-exact.

use crate::autodiff::Tensor;
use crate::container::{Container, ContainerError, RecordReader, RecordWriter};
use crate::sensors;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const EPISODE_MAGIC: [u8; 4] = *b"PCSG";

/// One dataset unit: a timestep of sensor views, measurements, rule context,
/// and ground-truth future waypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera: Tensor,
    pub lidar: Tensor,
    pub front_seg: Tensor,
    pub td_seg: Tensor,
    /// speed, throttle, steer, brake from the previous frame.
    pub meas: Tensor,
    /// One-hot {red, yellow, green, none}.
    pub light_state: [f64; 4],
    pub stop_sign_flag: f64,
    pub is_red: bool,
    /// Forward distance to the governing stop line; +inf when none ahead.
    pub y_stop: f64,
    pub delta_heading: f64,
    /// Goal location in the ego frame.
    pub goal: (f64, f64),
    /// Ego positions at t+1..t+4 in the frame-t ego frame.
    pub waypoints: [[f64; 2]; 4],
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("batch_size must be >= 2 (the contrastive loss needs negatives), got {0}")]
    BatchTooSmall(usize),
    #[error("episode header missing key '{0}'")]
    MissingHeader(String),
}

fn encode_frame(f: &Frame) -> Vec<u8> {
    let mut w = RecordWriter::new();
    w.tensor(&f.camera);
    w.tensor(&f.lidar);
    w.tensor(&f.front_seg);
    w.tensor(&f.td_seg);
    w.tensor(&f.meas);
    for v in f.light_state {
        w.f64(v);
    }
    w.f64(f.stop_sign_flag);
    w.f64(if f.is_red { 1.0 } else { 0.0 });
    w.f64(f.y_stop);
    w.f64(f.delta_heading);
    w.f64(f.goal.0);
    w.f64(f.goal.1);
    for wp in f.waypoints {
        w.f64(wp[0]);
        w.f64(wp[1]);
    }
    w.finish()
}

fn decode_frame(buf: &[u8]) -> Result<Frame, ContainerError> {
    let mut r = RecordReader::new(buf);
    let camera = r.tensor()?;
    let lidar = r.tensor()?;
    let front_seg = r.tensor()?;
    let td_seg = r.tensor()?;
    let meas = r.tensor()?;
    let mut light_state = [0.0; 4];
    for v in &mut light_state {
        *v = r.f64()?;
    }
    let stop_sign_flag = r.f64()?;
    let is_red = r.f64()? != 0.0;
    let y_stop = r.f64()?;
    let delta_heading = r.f64()?;
    let goal = (r.f64()?, r.f64()?);
    let mut waypoints = [[0.0; 2]; 4];
    for wp in &mut waypoints {
        wp[0] = r.f64()?;
        wp[1] = r.f64()?;
    }
    if !r.done() {
        return Err(ContainerError::Malformed("trailing bytes in frame".into()));
    }
    Ok(Frame {
        camera,
        lidar,
        front_seg,
        td_seg,
        meas,
        light_state,
        stop_sign_flag,
        is_red,
        y_stop,
        delta_heading,
        goal,
        waypoints,
    })
}

pub fn write_episode(
    path: &Path,
    scenario_id: &str,
    dt: f64,
    expert_hash: u64,
    frames: &[Frame],
) -> Result<(), DatasetError> {
    let mut c = Container::new();
    c.meta.push("format=episode/1".to_string());
    c.meta.push(format!("scenario={scenario_id}"));
    c.meta.push(format!("dt={dt}"));
    c.meta.push(format!("expert_hash={expert_hash:016x}"));
    c.meta.push(format!(
        "camera_shape={}x{}x{}",
        sensors::CAM_C,
        sensors::CAM_H,
        sensors::CAM_W
    ));
    c.meta.push(format!(
        "lidar_shape={}x{}x{}",
        sensors::BEV_C,
        sensors::BEV_H,
        sensors::BEV_W
    ));
    c.records = frames.iter().map(encode_frame).collect();
    c.write(path, EPISODE_MAGIC)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<(String, Vec<Frame>), DatasetError> {
    let c = Container::read(path, EPISODE_MAGIC)?;
    let scenario = c
        .meta_value("scenario")
        .ok_or_else(|| DatasetError::MissingHeader("scenario".into()))?
        .to_string();
    let frames = c
        .records
        .iter()
        .map(|r| decode_frame(r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((scenario, frames))
}

/// Deterministically shuffled index batches; the final short batch is
/// dropped. Rejects `batch_size < 2`.
pub fn make_batches(
    n_frames: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size < 2 {
        return Err(DatasetError::BatchTooSmall(batch_size));
    }
    let mut order: Vec<usize> = (0..n_frames).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Split by episode (not frame) to avoid temporal leakage. Returns
/// (train, val) index lists over the episode array.
pub fn split_episodes(n_episodes: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_episodes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911);
    order.shuffle(&mut rng);
    let n_val = ((n_episodes as f64) * val_fraction).round() as usize;
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
        let mut t = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect())
        };
        Frame {
            camera: t(vec![3, 4, 6]),
            lidar: t(vec![2, 4, 4]),
            front_seg: t(vec![4, 4, 6]),
            td_seg: t(vec![4, 4, 4]),
            meas: t(vec![4]),
            light_state: [1.0, 0.0, 0.0, 0.0],
            stop_sign_flag: 0.0,
            is_red: true,
            y_stop: rng.random::<f64>() * 20.0,
            delta_heading: rng.random::<f64>() - 0.5,
            goal: (rng.random::<f64>(), rng.random::<f64>()),
            waypoints: [[rng.random::<f64>(); 2]; 4],
        }
    }

    #[test]
    fn roundtrip_bit_exact_random_episodes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ep in 0..20 {
            let frames: Vec<Frame> = (0..5).map(|_| random_frame(&mut rng)).collect();
            let path = dir.path().join(format!("{ep}.ep"));
            write_episode(&path, "test", 0.5, 0xabc, &frames).unwrap();
            let (name, back) = read_episode(&path).unwrap();
            assert_eq!(name, "test");
            assert_eq!(back, frames);
        }
    }

    #[test]
    fn infinity_sentinel_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = random_frame(&mut rng);
        f.y_stop = f64::INFINITY;
        f.is_red = false;
        let path = dir.path().join("inf.ep");
        write_episode(&path, "s", 0.5, 0, &[f.clone()]).unwrap();
        let (_, back) = read_episode(&path).unwrap();
        assert_eq!(back[0], f);
    }

    #[test]
    fn empty_episode_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ep");
        write_episode(&path, "s", 0.5, 0, &[]).unwrap();
        let (_, back) = read_episode(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_byte_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ep");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        write_episode(&path, "s", 0.5, 0, &[random_frame(&mut rng)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_episode(&path),
            Err(DatasetError::Container(
                ContainerError::ChecksumMismatch { .. }
            ))
        ));
    }

    #[test]
    fn batches_deterministic_and_exclusive() {
        let b1 = make_batches(10, 4, 42).unwrap();
        let b2 = make_batches(10, 4, 42).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.len(), 2, "final short batch must be dropped");
        let mut seen: Vec<usize> = b1.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8, "no index may repeat within an epoch");
    }

    #[test]
    fn batch_size_one_rejected() {
        assert!(matches!(
            make_batches(10, 1, 0),
            Err(DatasetError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn different_seeds_differ() {
        let b1 = make_batches(64, 8, 1).unwrap();
        let b2 = make_batches(64, 8, 2).unwrap();
        assert_ne!(b1, b2);
    }

    #[test]
    fn split_partitions_episodes() {
        let (train, val) = split_episodes(10, 0.2, 0);
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
