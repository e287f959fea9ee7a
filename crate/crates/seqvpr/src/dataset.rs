//! Synthetic sequence place-recognition data.
//!
//! Places sit on a smoothed random-walk trajectory with fixed step length.
//! Each place owns an i.i.d. latent appearance code; a frame is the latent
//! pushed through a fixed random renderer into an [n, D] token map (or a
//! tiny RGB image in image mode), plus per-capture noise. The database is
//! captured under condition A, queries under condition B, where B applies
//! a fixed rotation + gain + bias to the latent before rendering -- a
//! controllable analogue of a day/night appearance change. Queries come in
//! two independent noise draws (train and val) over the same places.
//!
//! Ground truth is either a metric radius around the sequence anchor
//! (the last frame's position) or a frame-index window; exactly one mode
//! is active per dataset.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{FrameSequence, TokenFeatureMap};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::tsr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    A,
    B,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::A => write!(f, "A"),
            Condition::B => write!(f, "B"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Place {
    pub id: usize,
    pub position: (f64, f64),
    pub latent: Vec<f64>,
}

/// Positive-match rule. Radius mode compares anchor positions in meters;
/// frame mode compares anchor indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GroundTruth {
    Radius { meters: f64 },
    Frame { tolerance: usize },
}

impl GroundTruth {
    pub fn default_radius() -> Self {
        GroundTruth::Radius { meters: 10.0 }
    }

    pub fn default_frame() -> Self {
        GroundTruth::Frame { tolerance: 1 }
    }
}

/// What a sample carries: rendered token maps, or frames for the encoder.
#[derive(Clone, Debug)]
pub enum SampleData {
    Features(Vec<TokenFeatureMap>),
    Frames(FrameSequence),
}

#[derive(Clone, Debug)]
pub struct SequenceSample {
    /// Consecutive place ids, earliest first.
    pub place_ids: Vec<usize>,
    pub condition: Condition,
    pub data: SampleData,
    /// Position of the last (most recent) frame.
    pub anchor_position: (f64, f64),
    /// Place id of the last frame; frame-mode ground truth compares these.
    pub anchor_index: usize,
}

impl SequenceSample {
    pub fn seq_len(&self) -> usize {
        self.place_ids.len()
    }

    /// The same sample truncated to its most recent `l` frames; anchor is
    /// unchanged. Supports evaluating one checkpoint at shorter lengths.
    pub fn truncated(&self, l: usize) -> Result<SequenceSample> {
        if l == 0 || l > self.seq_len() {
            return Err(Error::Input(format!(
                "cannot truncate length-{} sample to {l}",
                self.seq_len()
            )));
        }
        let skip = self.seq_len() - l;
        let data = match &self.data {
            SampleData::Features(maps) => SampleData::Features(maps[skip..].to_vec()),
            SampleData::Frames(seq) => {
                let s = seq.frames().shape();
                let frame_len = s[1] * s[2] * s[3];
                let tail = seq.frames().data()[skip * frame_len..].to_vec();
                SampleData::Frames(FrameSequence::new(Tensor::new(
                    vec![l, s[1], s[2], s[3]],
                    tail,
                )?)?)
            }
        };
        Ok(SequenceSample {
            place_ids: self.place_ids[skip..].to_vec(),
            condition: self.condition,
            data,
            anchor_position: self.anchor_position,
            anchor_index: self.anchor_index,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_places: usize,
    pub seq_len: usize,
    /// Per-capture feature noise sigma.
    pub noise: f64,
    /// 0 disables the condition transform (queries render like the
    /// database); 1 is a strong appearance change.
    pub condition_strength: f64,
    /// Trajectory step length in meters.
    pub separation: f64,
    pub latent_dim: usize,
    pub grid: (usize, usize),
    pub dim: usize,
    /// Render tiny RGB frames instead of token maps.
    pub image_mode: bool,
    pub frame_size: (usize, usize),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_places: 50,
            seq_len: 5,
            noise: 0.05,
            condition_strength: 1.0,
            separation: 2.0,
            latent_dim: 8,
            grid: (4, 4),
            dim: 32,
            image_mode: false,
            frame_size: (32, 32),
        }
    }
}

/// Fixed affine distortion of latent codes for one condition.
struct ConditionTransform {
    /// Per-plane rotation angles over consecutive latent dimension pairs.
    angles: Vec<f64>,
    gain: f64,
    bias: Vec<f64>,
}

impl ConditionTransform {
    fn identity(latent_dim: usize) -> Self {
        ConditionTransform {
            angles: vec![0.0; latent_dim / 2],
            gain: 1.0,
            bias: vec![0.0; latent_dim],
        }
    }

    fn random(latent_dim: usize, strength: f64, rng: &mut StreamRng) -> Self {
        let angles = (0..latent_dim / 2)
            .map(|_| strength * rng.uniform(std::f64::consts::PI / 4.0, std::f64::consts::PI))
            .collect();
        let gain = 1.0 + strength * 0.3;
        let bias = (0..latent_dim).map(|_| strength * rng.normal() * 0.4).collect();
        ConditionTransform { angles, gain, bias }
    }

    fn apply(&self, latent: &[f64]) -> Vec<f64> {
        let mut out = latent.to_vec();
        for (p, angle) in self.angles.iter().enumerate() {
            let (i, j) = (2 * p, 2 * p + 1);
            let (c, s) = (angle.cos(), angle.sin());
            let (a, b) = (out[i], out[j]);
            out[i] = c * a - s * b;
            out[j] = s * a + c * b;
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o = self.gain * *o + b;
        }
        out
    }
}

pub struct SyntheticDataset {
    pub cfg: DatasetConfig,
    pub seed: u64,
    pub places: Vec<Place>,
    /// Condition-A sequences, one per anchor.
    pub database: Vec<SequenceSample>,
    /// Condition-B sequences for training, aligned with database anchors.
    pub queries_train: Vec<SequenceSample>,
    /// Independent noise draw over the same places, for validation.
    pub queries_val: Vec<SequenceSample>,
}

impl SyntheticDataset {
    pub fn database_positions(&self) -> Vec<(f64, f64)> {
        self.database.iter().map(|s| s.anchor_position).collect()
    }
}

/// Deterministically generate places, trajectory, and all three sample
/// sets from one seed (streams under `dataset`).
pub fn generate(seed: u64, cfg: &DatasetConfig) -> Result<SyntheticDataset> {
    if cfg.n_places < cfg.seq_len {
        return Err(Error::Config(format!(
            "n_places {} < seq_len {}",
            cfg.n_places, cfg.seq_len
        )));
    }
    if cfg.latent_dim % 2 != 0 {
        return Err(Error::Config("latent_dim must be even".into()));
    }
    let mut rng = StreamRng::new(seed, "dataset");

    // trajectory: smoothed heading random walk, fixed step length
    let mut places = Vec::with_capacity(cfg.n_places);
    let mut heading = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let mut turn = 0.0;
    let mut pos = (0.0, 0.0);
    for id in 0..cfg.n_places {
        let mut latent = vec![0.0; cfg.latent_dim];
        rng.fill_normal(&mut latent, 1.0);
        places.push(Place {
            id,
            position: pos,
            latent,
        });
        turn = 0.7 * turn + 0.3 * rng.normal() * 0.15;
        heading += turn;
        pos = (
            pos.0 + cfg.separation * heading.cos(),
            pos.1 + cfg.separation * heading.sin(),
        );
    }

    let cond_a = ConditionTransform::identity(cfg.latent_dim);
    let cond_b = if cfg.condition_strength == 0.0 {
        ConditionTransform::identity(cfg.latent_dim)
    } else {
        ConditionTransform::random(cfg.latent_dim, cfg.condition_strength, &mut rng)
    };

    // fixed random renderer shared by every sample
    let out_elems = if cfg.image_mode {
        cfg.frame_size.0 * cfg.frame_size.1 * 3
    } else {
        cfg.grid.0 * cfg.grid.1 * cfg.dim
    };
    let mut render_w = vec![0.0; out_elems * cfg.latent_dim];
    rng.fill_normal(&mut render_w, 1.0 / (cfg.latent_dim as f64).sqrt());
    let mut render_b = vec![0.0; out_elems];
    rng.fill_normal(&mut render_b, 0.1);

    let render = |latent: &[f64], noise: &mut StreamRng, sigma: f64| -> Vec<f64> {
        let mut out = vec![0.0; out_elems];
        for (e, o) in out.iter_mut().enumerate() {
            let mut s = render_b[e];
            for (l, v) in latent.iter().enumerate() {
                s += render_w[e * cfg.latent_dim + l] * v;
            }
            *o = s + sigma * noise.normal();
        }
        out
    };

    // one capture per place per set, in fixed stream order
    let mut captures: Vec<Vec<Vec<f64>>> = Vec::with_capacity(3);
    for (stream, cond) in [
        ("dataset/db", &cond_a),
        ("dataset/query_train", &cond_b),
        ("dataset/query_val", &cond_b),
    ] {
        let mut noise_rng = StreamRng::new(seed, stream);
        let set: Vec<Vec<f64>> = places
            .iter()
            .map(|p| render(&cond.apply(&p.latent), &mut noise_rng, cfg.noise))
            .collect();
        captures.push(set);
    }
    let [db_caps, qt_caps, qv_caps]: [Vec<Vec<f64>>; 3] =
        captures.try_into().expect("three capture sets");

    let build_set = |caps: &[Vec<f64>], condition: Condition| -> Result<Vec<SequenceSample>> {
        let mut out = Vec::new();
        for anchor in (cfg.seq_len - 1)..cfg.n_places {
            let ids: Vec<usize> = (anchor + 1 - cfg.seq_len..=anchor).collect();
            let data = if cfg.image_mode {
                let (h, w) = cfg.frame_size;
                let mut px = Vec::with_capacity(cfg.seq_len * h * w * 3);
                for &pid in &ids {
                    // squash into [0, 1]
                    px.extend(caps[pid].iter().map(|v| 0.5 + 0.5 * v.tanh()));
                }
                SampleData::Frames(FrameSequence::new(Tensor::new(
                    vec![cfg.seq_len, h, w, 3],
                    px,
                )?)?)
            } else {
                let maps = ids
                    .iter()
                    .map(|&pid| {
                        TokenFeatureMap::new(
                            Tensor::new(
                                vec![cfg.grid.0 * cfg.grid.1, cfg.dim],
                                caps[pid].clone(),
                            )?,
                            cfg.grid,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                SampleData::Features(maps)
            };
            out.push(SequenceSample {
                place_ids: ids,
                condition,
                data,
                anchor_position: places[anchor].position,
                anchor_index: anchor,
            });
        }
        Ok(out)
    };

    let database = build_set(&db_caps, Condition::A)?;
    let queries_train = build_set(&qt_caps, Condition::B)?;
    let queries_val = build_set(&qv_caps, Condition::B)?;
    Ok(SyntheticDataset {
        cfg: *cfg,
        seed,
        places,
        database,
        queries_train,
        queries_val,
    })
}

/// Database indices that count as correct matches for a query.
pub fn positives_for(
    query: &SequenceSample,
    database: &[SequenceSample],
    gt: &GroundTruth,
) -> Result<BTreeSet<usize>> {
    if database.is_empty() {
        return Err(Error::Input("empty database".into()));
    }
    let mut out = BTreeSet::new();
    for (i, db) in database.iter().enumerate() {
        let hit = match gt {
            GroundTruth::Radius { meters } => {
                let dx = query.anchor_position.0 - db.anchor_position.0;
                let dy = query.anchor_position.1 - db.anchor_position.1;
                (dx * dx + dy * dy).sqrt() <= *meters
            }
            GroundTruth::Frame { tolerance } => {
                query.anchor_index.abs_diff(db.anchor_index) <= *tolerance
            }
        };
        if hit {
            out.insert(i);
        }
    }
    Ok(out)
}

// ── Persistence ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    seed: u64,
    n_places: usize,
    seq_len: usize,
    noise: f64,
    condition_strength: f64,
    separation: f64,
    latent_dim: usize,
    grid: (usize, usize),
    dim: usize,
    image_mode: bool,
    frame_size: (usize, usize),
}

/// Persist as `positions.csv` (id, x, y, condition: one row per sequence
/// anchor per condition), per-place TSR feature files, and a JSON manifest.
pub fn save(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    if ds.cfg.image_mode {
        return Err(Error::Config(
            "persistence covers feature-mode datasets; image mode is in-memory only".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let mut csv = String::from("id,x,y,condition\n");
    for s in &ds.database {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{}\n",
            s.anchor_index, s.anchor_position.0, s.anchor_position.1, s.condition
        ));
    }
    for s in &ds.queries_train {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{}\n",
            s.anchor_index, s.anchor_position.0, s.anchor_position.1, s.condition
        ));
    }
    fs::write(dir.join("positions.csv"), csv)?;

    for (sub, set) in [
        ("db", &ds.database),
        ("query_train", &ds.queries_train),
        ("query_val", &ds.queries_val),
    ] {
        let subdir = dir.join("features").join(sub);
        fs::create_dir_all(&subdir)?;
        // per-place captures; sequences are sliding windows over them
        let mut written = BTreeSet::new();
        for s in set {
            let SampleData::Features(maps) = &s.data else {
                unreachable!("feature mode checked above");
            };
            for (k, &pid) in s.place_ids.iter().enumerate() {
                if written.insert(pid) {
                    tsr::write_tensor(&subdir.join(format!("place_{pid:04}.tsr")), &maps[k].tokens)?;
                }
            }
        }
    }

    let m = DatasetManifest {
        format: "seqvpr-dataset-v1".into(),
        seed: ds.seed,
        n_places: ds.cfg.n_places,
        seq_len: ds.cfg.seq_len,
        noise: ds.cfg.noise,
        condition_strength: ds.cfg.condition_strength,
        separation: ds.cfg.separation,
        latent_dim: ds.cfg.latent_dim,
        grid: ds.cfg.grid,
        dim: ds.cfg.dim,
        image_mode: ds.cfg.image_mode,
        frame_size: ds.cfg.frame_size,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&m)? + "\n",
    )?;
    Ok(())
}

/// Load a dataset from the persisted layout (also accepts externally
/// produced files following it).
pub fn load(dir: &Path) -> Result<SyntheticDataset> {
    let m: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let cfg = DatasetConfig {
        n_places: m.n_places,
        seq_len: m.seq_len,
        noise: m.noise,
        condition_strength: m.condition_strength,
        separation: m.separation,
        latent_dim: m.latent_dim,
        grid: m.grid,
        dim: m.dim,
        image_mode: m.image_mode,
        frame_size: m.frame_size,
    };

    // positions keyed by anchor id (A rows; B rows mirror them)
    let mut positions = vec![(0.0, 0.0); m.n_places];
    let csv = fs::read_to_string(dir.join("positions.csv"))?;
    for line in csv.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Io(format!("bad positions.csv row: {line}")));
        }
        let id: usize = parts[0]
            .parse()
            .map_err(|_| Error::Io(format!("bad id in positions.csv: {line}")))?;
        let x: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Io(format!("bad x in positions.csv: {line}")))?;
        let y: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Io(format!("bad y in positions.csv: {line}")))?;
        if id < positions.len() {
            positions[id] = (x, y);
        }
    }

    let load_set = |sub: &str, condition: Condition| -> Result<Vec<SequenceSample>> {
        let subdir = dir.join("features").join(sub);
        let mut caps: Vec<Option<Tensor>> = vec![None; m.n_places];
        for (pid, cap) in caps.iter_mut().enumerate() {
            let p = subdir.join(format!("place_{pid:04}.tsr"));
            if p.exists() {
                *cap = Some(tsr::read_tensor(&p)?);
            }
        }
        let mut out = Vec::new();
        for anchor in (m.seq_len - 1)..m.n_places {
            let ids: Vec<usize> = (anchor + 1 - m.seq_len..=anchor).collect();
            let maps = ids
                .iter()
                .map(|&pid| {
                    let t = caps[pid]
                        .clone()
                        .ok_or_else(|| Error::Io(format!("{sub}: missing place {pid}")))?;
                    TokenFeatureMap::new(t, m.grid)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SequenceSample {
                place_ids: ids,
                condition,
                data: SampleData::Features(maps),
                anchor_position: positions[anchor],
                anchor_index: anchor,
            });
        }
        Ok(out)
    };

    // latents are not persisted; places carry geometry only
    let places = positions
        .iter()
        .enumerate()
        .map(|(id, &position)| Place {
            id,
            position,
            latent: Vec::new(),
        })
        .collect();

    Ok(SyntheticDataset {
        cfg,
        seed: m.seed,
        places,
        database: load_set("db", Condition::A)?,
        queries_train: load_set("query_train", Condition::B)?,
        queries_val: load_set("query_val", Condition::B)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            n_places: 12,
            seq_len: 3,
            noise: 0.05,
            condition_strength: 1.0,
            separation: 2.0,
            latent_dim: 4,
            grid: (2, 2),
            dim: 4,
            image_mode: false,
            frame_size: (8, 8),
        }
    }

    fn features(s: &SequenceSample) -> &Vec<TokenFeatureMap> {
        match &s.data {
            SampleData::Features(f) => f,
            _ => panic!("expected features"),
        }
    }

    #[test]
    fn zero_noise_identity_condition_makes_queries_equal_database() {
        let mut cfg = small_cfg();
        cfg.noise = 0.0;
        cfg.condition_strength = 0.0;
        let ds = generate(11, &cfg).unwrap();
        for (q, d) in ds.queries_train.iter().zip(&ds.database) {
            for (qm, dm) in features(q).iter().zip(features(d)) {
                assert_eq!(qm.tokens, dm.tokens);
            }
        }
    }

    #[test]
    fn generation_is_bit_deterministic_under_seed() {
        let cfg = small_cfg();
        let a = generate(42, &cfg).unwrap();
        let b = generate(42, &cfg).unwrap();
        for (sa, sb) in a.database.iter().zip(&b.database) {
            assert_eq!(sa.anchor_position, sb.anchor_position);
            for (ma, mb) in features(sa).iter().zip(features(sb)) {
                assert_eq!(ma.tokens, mb.tokens);
            }
        }
        let c = generate(43, &cfg).unwrap();
        assert_ne!(
            features(&a.database[0])[0].tokens,
            features(&c.database[0])[0].tokens
        );
    }

    #[test]
    fn consecutive_places_are_separation_apart() {
        let ds = generate(7, &small_cfg()).unwrap();
        for w in ds.places.windows(2) {
            let dx = w[1].position.0 - w[0].position.0;
            let dy = w[1].position.1 - w[0].position.1;
            assert!(((dx * dx + dy * dy).sqrt() - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sequences_are_temporally_ordered_sliding_windows() {
        let ds = generate(7, &small_cfg()).unwrap();
        assert_eq!(ds.database.len(), 12 - 3 + 1);
        for s in &ds.database {
            for w in s.place_ids.windows(2) {
                assert_eq!(w[1], w[0] + 1);
            }
            assert_eq!(*s.place_ids.last().unwrap(), s.anchor_index);
        }
    }

    #[test]
    fn positives_radius_boundary_straddle() {
        let cfg = small_cfg();
        let ds = generate(3, &cfg).unwrap();
        let mut q = ds.queries_train[0].clone();
        q.anchor_position = (0.0, 0.0);
        let mut db = vec![ds.database[0].clone(), ds.database[1].clone()];
        db[0].anchor_position = (0.0, 9.9);
        db[1].anchor_position = (0.0, 10.1);
        let pos = positives_for(&q, &db, &GroundTruth::default_radius()).unwrap();
        assert_eq!(pos.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn positives_frame_window() {
        let cfg = small_cfg();
        let ds = generate(3, &cfg).unwrap();
        let mut q = ds.queries_train[0].clone();
        q.anchor_index = 5;
        let pos = positives_for(&q, &ds.database, &GroundTruth::default_frame()).unwrap();
        // database anchors run from 2..=11, index i holds anchor i+2
        let anchors: Vec<usize> = pos.iter().map(|&i| ds.database[i].anchor_index).collect();
        assert_eq!(anchors, vec![4, 5, 6]);
    }

    #[test]
    fn positives_match_brute_force_distance_scan() {
        let ds = generate(19, &small_cfg()).unwrap();
        let gt = GroundTruth::Radius { meters: 5.0 };
        for q in &ds.queries_train {
            let got = positives_for(q, &ds.database, &gt).unwrap();
            let expect: BTreeSet<usize> = ds
                .database
                .iter()
                .enumerate()
                .filter(|(_, d)| {
                    let dx = q.anchor_position.0 - d.anchor_position.0;
                    let dy = q.anchor_position.1 - d.anchor_position.1;
                    dx.hypot(dy) <= 5.0
                })
                .map(|(i, _)| i)
                .collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn radius_positives_are_symmetric() {
        let ds = generate(23, &small_cfg()).unwrap();
        let gt = GroundTruth::Radius { meters: 6.0 };
        // database vs database: i in pos(j) iff j in pos(i)
        for (i, a) in ds.database.iter().enumerate() {
            let pos_a = positives_for(a, &ds.database, &gt).unwrap();
            for &j in &pos_a {
                let pos_j = positives_for(&ds.database[j], &ds.database, &gt).unwrap();
                assert!(pos_j.contains(&i));
            }
        }
    }

    #[test]
    fn empty_database_is_input_error() {
        let ds = generate(3, &small_cfg()).unwrap();
        assert!(positives_for(
            &ds.queries_train[0],
            &[],
            &GroundTruth::default_radius()
        )
        .is_err());
    }

    #[test]
    fn n_places_below_seq_len_is_config_error() {
        let mut cfg = small_cfg();
        cfg.n_places = 2;
        assert!(generate(1, &cfg).is_err());
    }

    #[test]
    fn truncation_keeps_anchor_and_latest_frames() {
        let ds = generate(29, &small_cfg()).unwrap();
        let full = &ds.queries_train[3];
        let short = full.truncated(2).unwrap();
        assert_eq!(short.place_ids, full.place_ids[1..]);
        assert_eq!(short.anchor_index, full.anchor_index);
        assert_eq!(
            features(&short)[1].tokens,
            features(full)[2].tokens
        );
        assert!(full.truncated(0).is_err());
        assert!(full.truncated(4).is_err());
    }

    #[test]
    fn image_mode_renders_valid_frames() {
        let mut cfg = small_cfg();
        cfg.image_mode = true;
        cfg.frame_size = (8, 8);
        let ds = generate(31, &cfg).unwrap();
        match &ds.database[0].data {
            SampleData::Frames(seq) => {
                assert_eq!(seq.len(), 3);
                assert_eq!(seq.height(), 8);
            }
            _ => panic!("expected frames"),
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(37, &small_cfg()).unwrap();
        save(&ds, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.database.len(), ds.database.len());
        for (a, b) in ds.database.iter().zip(&back.database) {
            assert_eq!(a.anchor_index, b.anchor_index);
            // TSR stores f32, so compare at f32 resolution
            for (ma, mb) in features(a).iter().zip(features(b)) {
                for (x, y) in ma.tokens.data().iter().zip(mb.tokens.data()) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
        let (ax, ay) = ds.queries_val[2].anchor_position;
        let (bx, by) = back.queries_val[2].anchor_position;
        assert!((ax - bx).abs() < 1e-8 && (ay - by).abs() < 1e-8);
    }
}
