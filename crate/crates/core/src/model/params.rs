//! Flat parameter vector with a named segment layout, plus the weights file.
//!
//! The entire network lives in one `Vec<f32>`; each layer holds `Seg` handles
//! (offset + length) into it. The on-disk form is a single UTF-8 header line
//! naming the architecture hyperparameters followed by the raw little-endian
//! f32 payload.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seg {
    pub offset: usize,
    pub len: usize,
}

impl Seg {
    pub fn slice<'a>(&self, data: &'a [f32]) -> &'a [f32] {
        &data[self.offset..self.offset + self.len]
    }

    pub fn slice_mut<'a>(&self, data: &'a mut [f32]) -> &'a mut [f32] {
        &mut data[self.offset..self.offset + self.len]
    }

    pub fn view1<'a>(&self, data: &'a [f32]) -> ArrayView1<'a, f32> {
        ArrayView1::from(self.slice(data))
    }

    pub fn view2<'a>(&self, data: &'a [f32], rows: usize, cols: usize) -> ArrayView2<'a, f32> {
        debug_assert_eq!(rows * cols, self.len);
        ArrayView2::from_shape((rows, cols), self.slice(data)).expect("segment shape")
    }

    pub fn view1_mut<'a>(&self, data: &'a mut [f32]) -> ArrayViewMut1<'a, f32> {
        ArrayViewMut1::from(self.slice_mut(data))
    }

    pub fn view2_mut<'a>(
        &self,
        data: &'a mut [f32],
        rows: usize,
        cols: usize,
    ) -> ArrayViewMut2<'a, f32> {
        debug_assert_eq!(rows * cols, self.len);
        ArrayViewMut2::from_shape((rows, cols), self.slice_mut(data)).expect("segment shape")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinH {
    pub w: Seg, // [in, out]
    pub b: Option<Seg>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvH {
    pub w: Seg, // [cout, cin*9]
    pub b: Seg,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnH {
    pub channels: usize,
    pub ln1_g: Seg,
    pub ln1_b: Seg,
    pub wq: LinH,
    pub wk: LinH,
    pub wv: LinH,
    pub wo: LinH,
    pub ln2_g: Seg,
    pub ln2_b: Seg,
    pub xq: LinH,
    pub xk: LinH,
    pub xv: LinH,
    pub xo: LinH,
}

#[derive(Debug, Clone)]
pub struct Handles {
    pub time_fc1: LinH,
    pub time_fc2: LinH,
    pub tok_embed: Seg, // [vocab, token_dim]
    pub tok_pos: Seg,   // [max_tokens, token_dim]
    pub stem: ConvH,
    pub down1: ConvH,
    pub down2: ConvH,
    pub mid: ConvH,
    pub up1: ConvH,
    pub up2: ConvH,
    pub head: ConvH,
    /// Time-feature projections for down1, down2, mid, up1 (in that order),
    /// each `[channels, time_dim]`.
    pub tproj: [Seg; 4],
    pub attn: Vec<AttnH>,
    pub total: usize,
}

struct LayoutBuilder {
    cursor: usize,
    names: Vec<(String, Seg)>,
}

impl LayoutBuilder {
    fn new() -> Self {
        LayoutBuilder { cursor: 0, names: Vec::new() }
    }

    fn seg(&mut self, name: &str, len: usize) -> Seg {
        let s = Seg { offset: self.cursor, len };
        self.cursor += len;
        self.names.push((name.to_string(), s));
        s
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> LinH {
        let w = self.seg(&format!("{name}.w"), fan_in * fan_out);
        let b = bias.then(|| self.seg(&format!("{name}.b"), fan_out));
        LinH { w, b, fan_in, fan_out }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> ConvH {
        let w = self.seg(&format!("{name}.w"), cout * cin * 9);
        let b = self.seg(&format!("{name}.b"), cout);
        ConvH { w, b, cin, cout }
    }

    fn attn(&mut self, name: &str, channels: usize, inner: usize, token_dim: usize) -> AttnH {
        AttnH {
            channels,
            ln1_g: self.seg(&format!("{name}.ln1.g"), channels),
            ln1_b: self.seg(&format!("{name}.ln1.b"), channels),
            wq: self.linear(&format!("{name}.wq"), channels, inner, false),
            wk: self.linear(&format!("{name}.wk"), channels, inner, false),
            wv: self.linear(&format!("{name}.wv"), channels, inner, false),
            wo: self.linear(&format!("{name}.wo"), inner, channels, true),
            ln2_g: self.seg(&format!("{name}.ln2.g"), channels),
            ln2_b: self.seg(&format!("{name}.ln2.b"), channels),
            xq: self.linear(&format!("{name}.xq"), channels, inner, false),
            xk: self.linear(&format!("{name}.xk"), token_dim, inner, false),
            xv: self.linear(&format!("{name}.xv"), token_dim, inner, false),
            xo: self.linear(&format!("{name}.xo"), inner, channels, true),
        }
    }
}

pub fn build_handles(cfg: &ModelConfig) -> Handles {
    let mut b = LayoutBuilder::new();
    let inner = cfg.heads * cfg.head_dim;
    let td = cfg.time_dim;

    let time_fc1 = b.linear("time.fc1", td, td, true);
    let time_fc2 = b.linear("time.fc2", td, td, true);
    let tok_embed = b.seg("tok.embed", cfg.vocab_size * cfg.token_dim());
    let tok_pos = b.seg("tok.pos", cfg.max_tokens * cfg.token_dim());

    let stem = b.conv("stem", cfg.channels, cfg.c0);
    let down1 = b.conv("down1", cfg.c0, cfg.c1);
    let down2 = b.conv("down2", cfg.c1, cfg.c2);
    let mid = b.conv("mid", cfg.c2, cfg.c2);
    let up1 = b.conv("up1", cfg.c2, cfg.c1);
    let up2 = b.conv("up2", cfg.c1, cfg.c0);
    let head = b.conv("head", cfg.c0, cfg.channels);

    let tproj = [
        b.seg("down1.t", cfg.c1 * td),
        b.seg("down2.t", cfg.c2 * td),
        b.seg("mid.t", cfg.c2 * td),
        b.seg("up1.t", cfg.c1 * td),
    ];

    let mut attn = Vec::with_capacity(8);
    let channels_per_block = [
        cfg.c1, cfg.c1, cfg.c2, cfg.c2, // encoder
        cfg.c2, cfg.c2, cfg.c1, cfg.c1, // decoder
    ];
    for (i, ch) in channels_per_block.iter().enumerate() {
        attn.push(b.attn(&format!("attn{i}"), *ch, inner, cfg.token_dim()));
    }

    Handles {
        time_fc1,
        time_fc2,
        tok_embed,
        tok_pos,
        stem,
        down1,
        down2,
        mid,
        up1,
        up2,
        head,
        tproj,
        attn,
        total: b.cursor,
    }
}

/// Seeded initialization. Convolutions and projections get fan-in-scaled
/// normals; attention output projections and the prediction head start at
/// zero so the untrained network outputs zero and every block begins as an
/// identity with a live gradient path.
pub fn init_params(_cfg: &ModelConfig, handles: &Handles, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0f32; handles.total];

    let fill_normal = |seg: Seg, std: f32, data: &mut Vec<f32>, rng: &mut ChaCha8Rng| {
        for v in seg.slice_mut(data) {
            let n: f32 = rng.sample(StandardNormal);
            *v = n * std;
        }
    };

    let lin_std = |h: &LinH| (1.0 / h.fan_in as f32).sqrt();
    let conv_std = |h: &ConvH| (2.0 / (h.cin * 9) as f32).sqrt();

    fill_normal(handles.time_fc1.w, lin_std(&handles.time_fc1), &mut data, &mut rng);
    fill_normal(handles.time_fc2.w, lin_std(&handles.time_fc2), &mut data, &mut rng);
    fill_normal(handles.tok_embed, 0.5, &mut data, &mut rng);
    fill_normal(handles.tok_pos, 0.1, &mut data, &mut rng);

    for conv in [&handles.stem, &handles.down1, &handles.down2, &handles.mid, &handles.up1, &handles.up2] {
        fill_normal(conv.w, conv_std(conv), &mut data, &mut rng);
    }
    // head stays zero-initialized

    for seg in handles.tproj {
        fill_normal(seg, 0.05, &mut data, &mut rng);
    }

    for a in &handles.attn {
        // layernorm gains start at 1
        for v in a.ln1_g.slice_mut(&mut data) {
            *v = 1.0;
        }
        for v in a.ln2_g.slice_mut(&mut data) {
            *v = 1.0;
        }
        fill_normal(a.wq.w, lin_std(&a.wq), &mut data, &mut rng);
        fill_normal(a.wk.w, lin_std(&a.wk), &mut data, &mut rng);
        fill_normal(a.wv.w, lin_std(&a.wv), &mut data, &mut rng);
        fill_normal(a.xq.w, lin_std(&a.xq), &mut data, &mut rng);
        fill_normal(a.xk.w, lin_std(&a.xk), &mut data, &mut rng);
        fill_normal(a.xv.w, lin_std(&a.xv), &mut data, &mut rng);
        // wo / xo stay zero-initialized
    }
    data
}

/// Writes the weights file: one UTF-8 header line, then the little-endian
/// f32 parameter vector.
pub fn save_weights(path: &Path, cfg: &ModelConfig, data: &[f32]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "maskctrl-denoiser v1 image_size={} channels={} c0={} c1={} c2={} heads={} head_dim={} time_dim={} vocab={} max_tokens={} params={}",
        cfg.image_size, cfg.channels, cfg.c0, cfg.c1, cfg.c2, cfg.heads, cfg.head_dim,
        cfg.time_dim, cfg.vocab_size, cfg.max_tokens, data.len()
    )?;
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, Vec<f32>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    f.read_line(&mut header)?;
    let header = header.trim_end();
    let mut fields = header.split_whitespace();
    let magic = fields.next().unwrap_or("");
    let version = fields.next().unwrap_or("");
    if magic != "maskctrl-denoiser" || version != "v1" {
        return Err(Error::format(format!("{}: unrecognized weights header", path.display())));
    }
    let mut kv = std::collections::BTreeMap::new();
    for field in fields {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad header field {field:?}")))?;
        let n: usize =
            v.parse().map_err(|_| Error::format(format!("bad header value {field:?}")))?;
        kv.insert(k.to_string(), n);
    }
    let get = |k: &str| {
        kv.get(k).copied().ok_or_else(|| Error::format(format!("weights header missing {k}")))
    };
    let cfg = ModelConfig {
        image_size: get("image_size")?,
        channels: get("channels")?,
        c0: get("c0")?,
        c1: get("c1")?,
        c2: get("c2")?,
        heads: get("heads")?,
        head_dim: get("head_dim")?,
        time_dim: get("time_dim")?,
        vocab_size: get("vocab")?,
        max_tokens: get("max_tokens")?,
    };
    let count = get("params")?;
    let mut payload = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        f.read_exact(&mut buf)?;
        payload.push(f32::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::format(format!("{}: trailing bytes after payload", path.display())));
    }
    Ok((cfg, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_dense_and_non_overlapping() {
        let cfg = ModelConfig::default();
        let h = build_handles(&cfg);
        // spot-check: segments tile [0, total) without gaps
        let mut b = LayoutBuilder::new();
        let _ = b.linear("x", cfg.time_dim, cfg.time_dim, true);
        assert!(h.total > 0);
        let params = init_params(&cfg, &h, 1);
        assert_eq!(params.len(), h.total);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        let h = build_handles(&cfg);
        assert_eq!(init_params(&cfg, &h, 7), init_params(&cfg, &h, 7));
        assert_ne!(init_params(&cfg, &h, 7), init_params(&cfg, &h, 8));
    }

    #[test]
    fn weights_file_round_trip() {
        let cfg = ModelConfig::default();
        let h = build_handles(&cfg);
        let params = init_params(&cfg, &h, 3);
        let dir = std::env::temp_dir().join("maskctrl_params_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.bin");
        save_weights(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_weights(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
    }
}
