//! Clip decoding, per-person masking into three streams, and uniform frame
//! sampling.
//!
//! Two on-disk formats are handled besides animated GIF:
//!
//! * raw clip: `T, H, W` as little-endian `u32`, then `T·H·W·3` RGB bytes;
//! * mask file: the same header followed by two bit-packed `T·H·W` planes
//!   (person 1, then person 2), row-major, least significant bit first, each
//!   plane padded to a whole byte.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{AnimationDecoder, RgbImage};

/// Frame rate assigned to raw clips, whose header carries none.
pub const RAW_FPS: f64 = 25.0;

const HEADER_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum VideoError {
    #[error("{}: cannot decode clip: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },
    #[error("{}: clip has no frames", path.display())]
    EmptyClip { path: PathBuf },
    #[error("mask/clip misaligned in {dimension}: clip {clip}, masks {masks}")]
    Alignment {
        dimension: &'static str,
        clip: usize,
        masks: usize,
    },
    #[error("invalid frame sequence: {0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Ordered RGB frames of one clip, all `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    height: usize,
    width: usize,
    fps: f64,
    frames: Vec<Vec<u8>>,
}

impl FrameSequence {
    pub fn new(
        height: usize,
        width: usize,
        fps: f64,
        frames: Vec<Vec<u8>>,
    ) -> Result<Self, VideoError> {
        if frames.is_empty() {
            return Err(VideoError::Invalid("no frames".into()));
        }
        if height == 0 || width == 0 {
            return Err(VideoError::Invalid(format!(
                "zero-sized frame {height}x{width}"
            )));
        }
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.len() != height * width * 3)
        {
            return Err(VideoError::Invalid(format!(
                "frame {i} has {} bytes, expected {}",
                f.len(),
                height * width * 3
            )));
        }
        Ok(Self {
            height,
            width,
            fps,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> &[Vec<u8>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t]
    }

    /// Frames at `indices`, in order; repeats allowed.
    pub fn select(&self, indices: &[usize]) -> Result<Self, VideoError> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames.get(i).cloned().ok_or_else(|| {
                    VideoError::Invalid(format!("frame index {i} out of {}", self.frames.len()))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(self.height, self.width, self.fps, frames)
    }

    /// Uniformly sampled `k`-frame version of this clip.
    pub fn sampled(&self, k: usize) -> Self {
        self.select(&sample_frames(self.len(), k))
            .expect("sample indices are in range")
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * self.height * self.width * 3);
        write_header(&mut out, self.len(), self.height, self.width);
        for f in &self.frames {
            out.extend_from_slice(f);
        }
        out
    }

    pub fn write_raw(&self, path: &Path) -> Result<(), VideoError> {
        fs::write(path, self.to_raw_bytes()).map_err(|source| VideoError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Per-frame binary masks for the two people of a clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    height: usize,
    width: usize,
    person1: Vec<Vec<bool>>,
    person2: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn new(
        height: usize,
        width: usize,
        person1: Vec<Vec<bool>>,
        person2: Vec<Vec<bool>>,
    ) -> Result<Self, VideoError> {
        if person1.len() != person2.len() {
            return Err(VideoError::Alignment {
                dimension: "frames",
                clip: person1.len(),
                masks: person2.len(),
            });
        }
        if person1
            .iter()
            .chain(&person2)
            .any(|m| m.len() != height * width)
        {
            return Err(VideoError::Invalid(format!(
                "mask plane is not {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            person1,
            person2,
        })
    }

    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        let plane = vec![vec![false; height * width]; frames];
        Self {
            height,
            width,
            person1: plane.clone(),
            person2: plane,
        }
    }

    pub fn len(&self) -> usize {
        self.person1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person1.is_empty()
    }

    pub fn person1(&self) -> &[Vec<bool>] {
        &self.person1
    }

    pub fn person2(&self) -> &[Vec<bool>] {
        &self.person2
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_header(&mut out, self.len(), self.height, self.width);
        for plane in [&self.person1, &self.person2] {
            let bits: Vec<bool> = plane.iter().flatten().copied().collect();
            out.extend(pack_bits(&bits));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let (t, h, w) = read_header(bytes)?;
        let n = t * h * w;
        let plane_len = n.div_ceil(8);
        if bytes.len() != HEADER_LEN + 2 * plane_len {
            return Err(format!(
                "mask payload is {} bytes, header implies {}",
                bytes.len() - HEADER_LEN,
                2 * plane_len
            ));
        }
        let unpack = |start: usize| -> Vec<Vec<bool>> {
            let bits = unpack_bits(&bytes[start..start + plane_len], n);
            bits.chunks(h * w).map(<[bool]>::to_vec).collect()
        };
        let p1 = unpack(HEADER_LEN);
        let p2 = unpack(HEADER_LEN + plane_len);
        MaskSet::new(h, w, p1, p2).map_err(|e| e.to_string())
    }

    pub fn read(path: &Path) -> Result<Self, VideoError> {
        let bytes = fs::read(path).map_err(|source| VideoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|reason| VideoError::Decode {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), VideoError> {
        fs::write(path, self.to_bytes()).map_err(|source| VideoError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn write_header(out: &mut Vec<u8>, t: usize, h: usize, w: usize) {
    for v in [t, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

fn read_header(bytes: &[u8]) -> Result<(usize, usize, usize), String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!(
            "header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        ));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    Ok((field(0), field(1), field(2)))
}

/// The three masked instances of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamTriplet {
    pub p1: FrameSequence,
    pub p2: FrameSequence,
    pub bg: FrameSequence,
}

impl StreamTriplet {
    pub fn sampled(&self, k: usize) -> Self {
        Self {
            p1: self.p1.sampled(k),
            p2: self.p2.sampled(k),
            bg: self.bg.sampled(k),
        }
    }
}

/// Splits a clip into person-1, person-2 and background streams. Masked-out
/// pixels are black; pixels covered by both person masks go to both person
/// streams and never to the background.
pub fn apply_masks(clip: &FrameSequence, masks: &MaskSet) -> Result<StreamTriplet, VideoError> {
    for (dimension, c, m) in [
        ("frames", clip.len(), masks.len()),
        ("height", clip.height, masks.height),
        ("width", clip.width, masks.width),
    ] {
        if c != m {
            return Err(VideoError::Alignment {
                dimension,
                clip: c,
                masks: m,
            });
        }
    }
    let pixels = clip.height * clip.width;
    let mut p1 = Vec::with_capacity(clip.len());
    let mut p2 = Vec::with_capacity(clip.len());
    let mut bg = Vec::with_capacity(clip.len());
    for t in 0..clip.len() {
        let src = &clip.frames[t];
        let (m1, m2) = (&masks.person1[t], &masks.person2[t]);
        let mut f1 = vec![0u8; pixels * 3];
        let mut f2 = vec![0u8; pixels * 3];
        let mut fb = vec![0u8; pixels * 3];
        for px in 0..pixels {
            let rgb = &src[px * 3..px * 3 + 3];
            if m1[px] {
                f1[px * 3..px * 3 + 3].copy_from_slice(rgb);
            }
            if m2[px] {
                f2[px * 3..px * 3 + 3].copy_from_slice(rgb);
            }
            if !m1[px] && !m2[px] {
                fb[px * 3..px * 3 + 3].copy_from_slice(rgb);
            }
        }
        p1.push(f1);
        p2.push(f2);
        bg.push(fb);
    }
    let make = |frames| FrameSequence::new(clip.height, clip.width, clip.fps, frames);
    Ok(StreamTriplet {
        p1: make(p1)?,
        p2: make(p2)?,
        bg: make(bg)?,
    })
}

/// `k` uniformly spaced frame indices `⌊i·T/k⌋`, `i = 0..k`.
pub fn sample_frames(total: usize, k: usize) -> Vec<usize> {
    assert!(
        total >= 1 && k >= 1,
        "sample_frames needs T >= 1 and k >= 1"
    );
    (0..k).map(|i| i * total / k).collect()
}

/// Decodes a raw clip or GIF. With `target_hw`, frames are scaled to fit and
/// centered on a black canvas of that size.
pub fn load_clip(
    path: &Path,
    target_hw: Option<(usize, usize)>,
) -> Result<FrameSequence, VideoError> {
    let bytes = fs::read(path).map_err(|source| VideoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_gif = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("gif"));
    let decode_err = |reason: String| VideoError::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let (h, w, fps, frames) = if is_gif {
        decode_gif(&bytes).map_err(decode_err)?
    } else {
        decode_raw(&bytes).map_err(decode_err)?
    };
    if frames.is_empty() {
        return Err(VideoError::EmptyClip {
            path: path.to_path_buf(),
        });
    }
    let clip = FrameSequence::new(h, w, fps, frames).map_err(|e| decode_err(e.to_string()))?;
    match target_hw {
        Some((th, tw)) if (th, tw) != (h, w) => letterbox(&clip, th, tw),
        _ => Ok(clip),
    }
}

type Decoded = (usize, usize, f64, Vec<Vec<u8>>);

fn decode_raw(bytes: &[u8]) -> Result<Decoded, String> {
    let (t, h, w) = read_header(bytes)?;
    if t > 0 && (h == 0 || w == 0) {
        return Err(format!("zero-sized frames {h}x{w}"));
    }
    let frame_len = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(3))
        .ok_or("frame size overflows")?;
    let expected = frame_len.checked_mul(t).ok_or("clip size overflows")?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len() - HEADER_LEN
        ));
    }
    let frames = bytes[HEADER_LEN..]
        .chunks(frame_len.max(1))
        .take(t)
        .map(<[u8]>::to_vec)
        .collect();
    Ok((h, w, RAW_FPS, frames))
}

fn decode_gif(bytes: &[u8]) -> Result<Decoded, String> {
    let decoder = image::codecs::gif::GifDecoder::new(BufReader::new(Cursor::new(bytes)))
        .map_err(|e| e.to_string())?;
    let frames = decoder
        .into_frames()
        .collect_frames()
        .map_err(|e| e.to_string())?;
    let Some(first) = frames.first() else {
        return Ok((0, 0, 0.0, Vec::new()));
    };
    let (num, den) = first.delay().numer_denom_ms();
    let fps = if num == 0 {
        10.0
    } else {
        1000.0 * den as f64 / num as f64
    };
    let (w, h) = first.buffer().dimensions();
    let rgb = frames
        .iter()
        .map(|f| {
            f.buffer()
                .pixels()
                .flat_map(|p| [p.0[0], p.0[1], p.0[2]])
                .collect()
        })
        .collect();
    Ok((h as usize, w as usize, fps, rgb))
}

/// Aspect-preserving resize into `th × tw` with zero padding, content
/// centered (extra padding row/column goes to the bottom/right).
pub fn letterbox(clip: &FrameSequence, th: usize, tw: usize) -> Result<FrameSequence, VideoError> {
    let (h, w) = (clip.height as f64, clip.width as f64);
    let scale = (th as f64 / h).min(tw as f64 / w);
    let nh = ((h * scale).round() as usize).clamp(1, th);
    let nw = ((w * scale).round() as usize).clamp(1, tw);
    let (top, left) = ((th - nh) / 2, (tw - nw) / 2);
    let mut frames = Vec::with_capacity(clip.len());
    for f in &clip.frames {
        let img = RgbImage::from_raw(clip.width as u32, clip.height as u32, f.clone())
            .expect("frame buffer matches dimensions");
        let resized = if (nh, nw) == (clip.height, clip.width) {
            img
        } else {
            imageops::resize(&img, nw as u32, nh as u32, FilterType::Triangle)
        };
        let mut out = vec![0u8; th * tw * 3];
        for y in 0..nh {
            let src = &resized.as_raw()[y * nw * 3..(y + 1) * nw * 3];
            let dst = ((top + y) * tw + left) * 3;
            out[dst..dst + nw * 3].copy_from_slice(src);
        }
        frames.push(out);
    }
    FrameSequence::new(th, tw, clip.fps, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> FrameSequence {
        let frames = (0..t)
            .map(|_| (0..h * w * 3).map(|_| rng.random()).collect())
            .collect();
        FrameSequence::new(h, w, 30.0, frames).unwrap()
    }

    fn disjoint_masks(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> MaskSet {
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        for _ in 0..t {
            let owner: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..3)).collect();
            p1.push(owner.iter().map(|&o| o == 1).collect());
            p2.push(owner.iter().map(|&o| o == 2).collect());
        }
        MaskSet::new(h, w, p1, p2).unwrap()
    }

    #[test]
    fn zero_masks_keep_everything_in_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clip = random_clip(&mut rng, 2, 8, 8);
        let s = apply_masks(&clip, &MaskSet::empty(2, 8, 8)).unwrap();
        assert_eq!(s.bg, clip);
        assert!(s.p1.frames().iter().flatten().all(|&v| v == 0));
        assert!(s.p2.frames().iter().flatten().all(|&v| v == 0));
    }

    #[test]
    fn saturated_person_one_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clip = random_clip(&mut rng, 2, 8, 8);
        let masks = MaskSet::new(8, 8, vec![vec![true; 64]; 2], vec![vec![false; 64]; 2]).unwrap();
        let s = apply_masks(&clip, &masks).unwrap();
        assert_eq!(s.p1, clip);
        assert!(s.p2.frames().iter().flatten().all(|&v| v == 0));
        assert!(s.bg.frames().iter().flatten().all(|&v| v == 0));
    }

    #[test]
    fn disjoint_masks_partition_pixels_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let clip = random_clip(&mut rng, 2, 8, 8);
            let masks = disjoint_masks(&mut rng, 2, 8, 8);
            let s = apply_masks(&clip, &masks).unwrap();
            for t in 0..2 {
                for px in 0..64 {
                    let owner = [masks.person1()[t][px], masks.person2()[t][px]];
                    for c in 0..3 {
                        let i = px * 3 + c;
                        let vals = [s.p1.frame(t)[i], s.p2.frame(t)[i], s.bg.frame(t)[i]];
                        let expect_stream = match owner {
                            [true, _] => 0,
                            [_, true] => 1,
                            _ => 2,
                        };
                        for (k, v) in vals.iter().enumerate() {
                            let want = if k == expect_stream {
                                clip.frame(t)[i]
                            } else {
                                0
                            };
                            assert_eq!(*v, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn overlapping_masks_share_pixels_between_people() {
        let clip = FrameSequence::new(1, 2, 1.0, vec![vec![10, 20, 30, 40, 50, 60]]).unwrap();
        let masks = MaskSet::new(1, 2, vec![vec![true, false]], vec![vec![true, true]]).unwrap();
        let s = apply_masks(&clip, &masks).unwrap();
        assert_eq!(s.p1.frame(0), [10, 20, 30, 0, 0, 0]);
        assert_eq!(s.p2.frame(0), [10, 20, 30, 40, 50, 60]);
        assert_eq!(s.bg.frame(0), [0; 6]);
    }

    #[test]
    fn background_masking_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clip = random_clip(&mut rng, 3, 4, 4);
        let masks = disjoint_masks(&mut rng, 3, 4, 4);
        let once = apply_masks(&clip, &masks).unwrap();
        let twice = apply_masks(&once.bg, &masks).unwrap();
        assert_eq!(twice.bg, once.bg);
    }

    #[test]
    fn misaligned_masks_name_the_dimension() {
        let clip = FrameSequence::new(4, 4, 1.0, vec![vec![0; 48]; 2]).unwrap();
        match apply_masks(&clip, &MaskSet::empty(2, 4, 5)) {
            Err(VideoError::Alignment { dimension, .. }) => assert_eq!(dimension, "width"),
            other => panic!("unexpected {other:?}"),
        }
        match apply_masks(&clip, &MaskSet::empty(3, 4, 4)) {
            Err(VideoError::Alignment { dimension, .. }) => assert_eq!(dimension, "frames"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(
            sample_frames(32, 16),
            (0..16).map(|i| 2 * i).collect::<Vec<_>>()
        );
        assert_eq!(sample_frames(16, 16), (0..16).collect::<Vec<_>>());
        let five = sample_frames(5, 16);
        for (i, &v) in five.iter().enumerate() {
            assert_eq!(v, (5.0 * i as f64 / 16.0).floor() as usize);
        }
        for t in [1, 5, 16, 17, 32, 1000] {
            let s = sample_frames(t, 16);
            assert_eq!(s.len(), 16);
            assert!(s.windows(2).all(|w| w[0] <= w[1]));
            assert!(s.iter().all(|&i| i < t));
            if t >= 16 {
                assert!(s.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn mask_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = disjoint_masks(&mut rng, 3, 5, 7);
        assert_eq!(MaskSet::from_bytes(&m.to_bytes()).unwrap(), m);
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(MaskSet::from_bytes(&bytes).is_err());
    }

    #[test]
    fn raw_clip_loads_identically_at_native_size() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let clip = random_clip(&mut rng, 4, 6, 5);
        let path = dir.path().join("c.raw");
        clip.write_raw(&path).unwrap();
        let loaded = load_clip(&path, Some((6, 5))).unwrap();
        assert_eq!(loaded.frames(), clip.frames());
        assert_eq!(loaded.fps(), RAW_FPS);
    }

    #[test]
    fn letterbox_centers_scaled_content() {
        let clip = FrameSequence::new(10, 20, 25.0, vec![vec![200; 10 * 20 * 3]]).unwrap();
        let out = letterbox(&clip, 16, 16).unwrap();
        let f = out.frame(0);
        for y in 0..16 {
            for x in 0..16 {
                let inside = (4..12).contains(&y);
                let v = f[(y * 16 + x) * 3];
                assert_eq!(v, if inside { 200 } else { 0 }, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn corrupted_raw_headers_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let good = FrameSequence::new(2, 2, 1.0, vec![vec![1; 12]; 3])
            .unwrap()
            .to_raw_bytes();
        let mut fixtures: Vec<Vec<u8>> = vec![good[..5].to_vec(), good[..good.len() - 1].to_vec()];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let mut b = good.clone();
            let i = rng.random_range(0..HEADER_LEN);
            b[i] ^= 1 << rng.random_range(0..8);
            fixtures.push(b);
        }
        for (n, bytes) in fixtures.iter().enumerate() {
            let p = dir.path().join(format!("f{n}.raw"));
            fs::write(&p, bytes).unwrap();
            match load_clip(&p, None) {
                Err(VideoError::Decode { .. }) | Err(VideoError::EmptyClip { .. }) => {}
                other => panic!("fixture {n}: expected decode error, got {other:?}"),
            }
        }
        let empty = dir.path().join("empty.raw");
        fs::write(&empty, [0u8; 12]).unwrap();
        assert!(matches!(
            load_clip(&empty, None),
            Err(VideoError::EmptyClip { .. })
        ));
    }

    #[test]
    fn gif_clips_decode() {
        use image::codecs::gif::GifEncoder;
        use image::{Delay, Frame, Rgba, RgbaImage};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gif");
        {
            let file = fs::File::create(&path).unwrap();
            let mut enc = GifEncoder::new(file);
            for shade in [0u8, 255] {
                let img = RgbaImage::from_pixel(4, 3, Rgba([shade, shade, shade, 255]));
                enc.encode_frame(Frame::from_parts(
                    img,
                    0,
                    0,
                    Delay::from_numer_denom_ms(100, 1),
                ))
                .unwrap();
            }
        }
        let clip = load_clip(&path, None).unwrap();
        assert_eq!((clip.len(), clip.height(), clip.width()), (2, 3, 4));
        assert!((clip.fps() - 10.0).abs() < 1e-9);
        assert!(clip.frame(0).iter().all(|&v| v == 0));
        assert!(clip.frame(1).iter().all(|&v| v == 255));
        assert!(load_clip(&dir.path().join("missing.gif"), None).is_err());
        let bad = dir.path().join("bad.gif");
        fs::write(&bad, b"GIF89a\x00garbage").unwrap();
        assert!(matches!(
            load_clip(&bad, None),
            Err(VideoError::Decode { .. })
        ));
    }
}
