//! Feature files, annotation sidecars, checkpoints and reports.
//!
//! All binary data is little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::heads::{Model, ModelShape};
use crate::metrics::{DenseEntry, EvalReport, SegScores};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::rng::{Rng, RngState};
use crate::snippets::{segments_of, FrameSequence, Segment};
use crate::tensor::Tensor;
use crate::train::{EpochLog, TrainState};

pub const FEATURE_MAGIC: &[u8; 4] = b"TAGG";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TAGC";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Activity id stored for sequences without one.
pub const NO_ACTIVITY: u32 = u32::MAX;
pub const FEATURE_EXT: &str = "tagg";
pub const SIDECAR_EXT: &str = "csv";

/// Initialization and layer conventions, stored in every checkpoint.
const CHECKPOINT_METADATA: &str =
    "init=uniform(+-sqrt(6/(fan_in+fan_out))) bias=0 ln_gain=1 ln_bias=0; relu after fusing linears; lstm forget bias 1";

/// Cursor over a byte buffer that reports the failing offset.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            offset: start as u64,
            reason: format!("{what} is not UTF-8"),
        })
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expect {
            self.pos -= 4;
            return Err(self.fail(format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn version(&mut self, expect: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v != expect {
            self.pos -= 4;
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Encodes a sequence; features are narrowed to f32.
pub fn feature_bytes(seq: &FrameSequence) -> Result<Vec<u8>> {
    let (t, d) = (seq.len(), seq.dim());
    if t > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::arg("sequence too large for the feature format"));
    }
    let mut out = Vec::with_capacity(21 + 4 * t * (d + 1));
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION as usize);
    put_u32(&mut out, t);
    put_u32(&mut out, d);
    out.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    out.push(seq.frame_labels.is_some() as u8);
    let activity = match seq.activity {
        Some(a) if a < NO_ACTIVITY as usize => a as u32,
        Some(a) => return Err(Error::arg(format!("activity id {a} does not fit the format"))),
        None => NO_ACTIVITY,
    };
    out.extend_from_slice(&activity.to_le_bytes());
    for &v in seq.features() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(labels) = &seq.frame_labels {
        for &l in labels {
            put_u32(&mut out, l);
        }
    }
    Ok(out)
}

pub fn parse_features(bytes: &[u8], path: &Path) -> Result<FrameSequence> {
    let mut r = Reader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    r.version(FEATURE_VERSION)?;
    let t = r.u32("frame count")? as usize;
    let d = r.u32("feature dim")? as usize;
    if t == 0 || d == 0 {
        r.pos -= 8;
        return Err(r.fail(format!("empty sequence ({t} frames of dim {d})")));
    }
    let fps = r.f32("fps")?;
    if !(fps > 0.0) || !fps.is_finite() {
        r.pos -= 4;
        return Err(r.fail(format!("fps {fps} is not positive")));
    }
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        other => {
            r.pos -= 1;
            return Err(r.fail(format!("label flag {other} is not 0 or 1")));
        }
    };
    let activity = match r.u32("activity")? {
        NO_ACTIVITY => None,
        a => Some(a as usize),
    };
    let n = t.checked_mul(d).ok_or_else(|| r.fail("frame count overflow"))?;
    let mut feats = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.f32("features")?;
        if !v.is_finite() {
            r.pos -= 4;
            return Err(r.fail("non-finite feature value"));
        }
        feats.push(v as f64);
    }
    let mut seq = FrameSequence::new(feats, d, fps as f64)?.with_activity(activity);
    if has_labels {
        let labels = (0..t).map(|_| r.u32("labels").map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
        seq = seq.with_labels(labels)?;
    }
    r.finish()?;
    Ok(seq)
}

pub fn write_features(path: &Path, seq: &FrameSequence) -> Result<()> {
    write(path, &feature_bytes(seq)?)
}

pub fn read_features(path: &Path) -> Result<FrameSequence> {
    parse_features(&read(path)?, path)
}

/// One `start_frame,end_frame,action_id` line per segment.
pub fn sidecar_text(segments: &[Segment]) -> String {
    let mut s = String::new();
    for seg in segments {
        let _ = writeln!(s, "{},{},{}", seg.start, seg.end, seg.action);
    }
    s
}

/// Parses a sidecar and checks that it tiles `0..n_frames` without gaps.
pub fn parse_sidecar(text: &str, n_frames: usize, path: &Path) -> Result<Vec<Segment>> {
    let mut segs: Vec<Segment> = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            reason,
        };
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let nums = fields
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| fail(format!("expected start,end,action but got {trimmed:?}")))?;
            let [start, end, action] = nums[..] else {
                return Err(fail(format!("expected 3 fields, got {}", fields.len())));
            };
            let expect = segs.last().map_or(0, |s| s.end + 1);
            if start != expect || end < start {
                return Err(fail(format!("segment {start}..{end} does not continue at frame {expect}")));
            }
            segs.push(Segment { start, end, action });
        }
        offset += line.len() as u64;
    }
    let covered = segs.last().map_or(0, |s| s.end + 1);
    if covered != n_frames {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset,
            reason: format!("segments cover {covered} of {n_frames} frames"),
        });
    }
    Ok(segs)
}

pub fn segment_labels(segments: &[Segment]) -> Vec<usize> {
    segments.iter().flat_map(|s| std::iter::repeat(s.action).take(s.frames())).collect()
}

pub fn sidecar_path(feature_path: &Path) -> PathBuf {
    feature_path.with_extension(SIDECAR_EXT)
}

/// Reads a feature file; a sidecar next to it supplies (or replaces) frame labels.
pub fn read_sequence(path: &Path) -> Result<FrameSequence> {
    let seq = read_features(path)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(seq);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let segs = parse_sidecar(&text, seq.len(), &side)?;
    seq.with_labels(segment_labels(&segs))
}

/// All `*.tagg` files of `dir`, in file-name order.
pub fn read_corpus(dir: &Path) -> Result<Vec<FrameSequence>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == FEATURE_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::arg(format!("no .{FEATURE_EXT} files in {}", dir.display())));
    }
    paths.iter().map(|p| read_sequence(p)).collect()
}

/// Writes `seq_0000.tagg` plus sidecar for every sequence.
pub fn write_corpus(dir: &Path, seqs: &[FrameSequence]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let path = dir.join(format!("seq_{i:04}.{FEATURE_EXT}"));
        write_features(&path, seq)?;
        if let Some(labels) = &seq.frame_labels {
            write(&sidecar_path(&path), sidecar_text(&segments_of(labels)).as_bytes())?;
        }
        out.push(path);
    }
    Ok(out)
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_data(out, t);
}

fn put_data(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_data(r: &mut Reader, shape: &[usize], what: &str) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.f64(what)).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}

pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_str(&mut out, CHECKPOINT_METADATA);
    put_str(&mut out, &state.config.snapshot().to_toml()?);
    let s = state.model.shape();
    for v in [s.input_dim, s.n_actions, s.n_activities, s.n_recent, s.n_scales] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let params = state.model.params();
    put_u32(&mut out, params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_str(&mut out, name);
        put_tensor(&mut out, t);
    }
    let a = &state.adam;
    out.extend_from_slice(&a.step.to_le_bytes());
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in a.m.iter().chain(&a.v) {
        put_data(&mut out, t);
    }
    let rs = state.rng.state();
    out.extend_from_slice(&rs.key);
    out.extend_from_slice(&rs.stream.to_le_bytes());
    out.extend_from_slice(&rs.word_pos.to_le_bytes());
    put_u32(&mut out, state.curve.len());
    for e in &state.curve {
        out.extend_from_slice(&(e.epoch as u64).to_le_bytes());
        out.extend_from_slice(&e.lr.to_le_bytes());
        out.extend_from_slice(&e.loss.to_le_bytes());
        out.push(e.heldout.is_some() as u8);
        out.extend_from_slice(&e.heldout.unwrap_or(0.0).to_le_bytes());
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let _metadata = r.string("metadata")?;
    let config_at = r.pos;
    let config = RunConfig::from_toml(&r.string("config")?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: config_at as u64,
        reason: e.to_string(),
    })?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u64("model shape")? as usize;
    }
    let shape = ModelShape {
        input_dim: dims[0],
        n_actions: dims[1],
        n_activities: dims[2],
        n_recent: dims[3],
        n_scales: dims[4],
    };
    let n_params = r.u32("parameter count")? as usize;
    let mut stored = ParamStore::new();
    for _ in 0..n_params {
        let name = r.string("parameter name")?;
        let rank = r.u32("parameter rank")? as usize;
        if rank > 4 {
            r.pos -= 4;
            return Err(r.fail(format!("parameter {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64("parameter shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let t = get_data(&mut r, &shape, "parameter data")?;
        stored.add(name, t);
    }
    let dense = (config.task == Task::Dense).then(|| config.dense.head.clone());
    let layout_at = r.pos;
    let mut model = Model::new(shape, config.model.clone(), dense, config.seed)?;
    model.params_mut().load_from(&stored).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: layout_at as u64,
        reason: e.to_string(),
    })?;
    let step = r.u64("adam step")?;
    let mut hyper = [0.0; 4];
    for h in &mut hyper {
        *h = r.f64("adam hyperparameters")?;
    }
    let shapes: Vec<Vec<usize>> = stored.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let m = shapes.iter().map(|s| get_data(&mut r, s, "adam moments")).collect::<Result<Vec<_>>>()?;
    let v = shapes.iter().map(|s| get_data(&mut r, s, "adam moments")).collect::<Result<Vec<_>>>()?;
    let adam = AdamState {
        step,
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
        m,
        v,
    };
    let key: [u8; 32] = r.take(32, "rng key")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let lo = r.u64("rng position")? as u128;
    let hi = r.u64("rng position")? as u128;
    let rng = Rng::from_state(RngState {
        key,
        stream,
        word_pos: lo | (hi << 64),
    });
    let n_epochs = r.u32("curve length")? as usize;
    let mut curve = Vec::with_capacity(n_epochs.min(1 << 16));
    for _ in 0..n_epochs {
        let epoch = r.u64("curve epoch")? as usize;
        let lr = r.f64("curve lr")?;
        let loss = r.f64("curve loss")?;
        let has = r.u8("curve flag")?;
        let h = r.f64("curve heldout")?;
        curve.push(EpochLog {
            epoch,
            lr,
            loss,
            heldout: (has == 1).then_some(h),
        });
    }
    r.finish()?;
    Ok(TrainState {
        config,
        model,
        adam,
        rng,
        curve,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<String> {
    let bytes = checkpoint_bytes(state)?;
    write(path, &bytes)?;
    Ok(hash_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    parse_checkpoint(&read(path)?, path)
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// `key = value` summary of a report. Floats use shortest round-trip formatting.
pub fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "task = {}", r.task);
    let _ = writeln!(s, "samples = {}", r.samples);
    let _ = writeln!(s, "top1 = {}", opt(r.top1));
    let _ = writeln!(s, "top5 = {}", opt(r.top5));
    let _ = writeln!(s, "class_mean = {}", opt(r.class_mean));
    for d in &r.dense {
        let _ = writeln!(s, "dense.{}.{} = {}", d.obs, d.pred, d.class_mean);
    }
    if let Some(g) = &r.seg {
        let _ = writeln!(s, "f1_10 = {}", g.f1[0]);
        let _ = writeln!(s, "f1_25 = {}", g.f1[1]);
        let _ = writeln!(s, "f1_50 = {}", g.f1[2]);
        let _ = writeln!(s, "edit = {}", g.edit);
        let _ = writeln!(s, "frame_acc = {}", g.accuracy);
    }
    if let Some(n) = r.segments {
        let _ = writeln!(s, "segments = {n}");
    }
    s
}

pub fn parse_report(text: &str, path: &Path) -> Result<EvalReport> {
    let mut r = EvalReport::default();
    let mut seg = [None::<f64>; 5];
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        let fail = |reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: at,
            reason,
        };
        let trimmed = line.trim();
        offset += line.len() as u64;
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once(" = ")
            .ok_or_else(|| fail(format!("expected key = value, got {trimmed:?}")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| fail(format!("bad number {v:?} for {key}")));
        let maybe = |v: &str| if v == "-" { Ok(None) } else { num(v).map(Some) };
        match key {
            "task" => r.task = value.to_string(),
            "samples" => r.samples = value.parse().map_err(|_| fail(format!("bad count {value:?}")))?,
            "top1" => r.top1 = maybe(value)?,
            "top5" => r.top5 = maybe(value)?,
            "class_mean" => r.class_mean = maybe(value)?,
            "f1_10" => seg[0] = Some(num(value)?),
            "f1_25" => seg[1] = Some(num(value)?),
            "f1_50" => seg[2] = Some(num(value)?),
            "edit" => seg[3] = Some(num(value)?),
            "frame_acc" => seg[4] = Some(num(value)?),
            "segments" => r.segments = Some(value.parse().map_err(|_| fail(format!("bad count {value:?}")))?),
            k if k.starts_with("dense.") => {
                // Fractions contain dots themselves, so split on the key's own structure.
                let rest = &k["dense.".len()..];
                let (obs, pred) = split_fractions(rest).ok_or_else(|| fail(format!("bad dense key {k:?}")))?;
                r.dense.push(DenseEntry {
                    obs,
                    pred,
                    class_mean: num(value)?,
                });
            }
            _ => return Err(fail(format!("unknown key {key:?}"))),
        }
    }
    match seg {
        [Some(a), Some(b), Some(c), Some(edit), Some(accuracy)] => {
            r.seg = Some(SegScores {
                f1: [a, b, c],
                edit,
                accuracy,
            })
        }
        [None, None, None, None, None] => {}
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset,
                reason: "incomplete segmentation scores".into(),
            })
        }
    }
    Ok(r)
}

/// Splits `"0.2.0.5"` style pairs at the dot that leaves two fractions in `[0, 1]`.
fn split_fractions(s: &str) -> Option<(f64, f64)> {
    s.match_indices('.').find_map(|(i, _)| {
        let (a, b) = (&s[..i], &s[i + 1..]);
        let x = a.parse::<f64>().ok()?;
        let y = b.parse::<f64>().ok()?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        (x.to_string() == a && y.to_string() == b && unit(x) && unit(y)).then_some((x, y))
    })
}

pub fn write_report(path: &Path, r: &EvalReport) -> Result<()> {
    write(path, report_text(r).as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text, path)
}

/// Comma-separated table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write(path, s.as_bytes())
}

pub fn dense_table_rows(r: &EvalReport) -> Vec<Vec<String>> {
    r.dense
        .iter()
        .map(|d| vec![d.obs.to_string(), d.pred.to_string(), d.class_mean.to_string()])
        .collect()
}

pub fn curve_rows(curve: &[EpochLog]) -> Vec<Vec<String>> {
    curve
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.lr.to_string(), e.loss.to_string(), opt(e.heldout)])
        .collect()
}
