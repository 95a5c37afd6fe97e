//! Teacher, coach and student networks.
//!
//! All three share one layout: 2D encoders at half resolution, a BEV
//! projection block, then a decoder that upsamples back to the grid and
//! emits 3 class logits plus a 2-channel instance embedding. Teacher and
//! coach additionally fuse the SD and HD priors after the BEV block.
//!
//! | role    | encoders                        | BEV width |
//! |---------|---------------------------------|-----------|
//! | student | camera                          | 16        |
//! | coach   | camera + pseudo-LiDAR from cam  | 24        |
//! | teacher | camera + LiDAR                  | 32        |

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{get_grid, put_grid, read_file, write_file, Reader, Writer};
use crate::diffcore::{Grid4, Tape, Var};
use crate::error::{Error, Result};
use crate::scenegen::{CAM_CHANNELS, LIDAR_CHANNELS, NUM_CLASSES};

pub const EMBED_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Teacher,
    Coach,
    Student,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Teacher, Role::Coach, Role::Student];

    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Coach => "coach",
            Role::Student => "student",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.tag() == t)
    }

    /// Channel width of the BEV feature used for distillation.
    pub fn bev_channels(self) -> usize {
        match self {
            Role::Teacher => 32,
            Role::Coach => 24,
            Role::Student => 16,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named parameter store for one network (or one set of projections).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub role: Role,
    pub frozen: bool,
    tensors: BTreeMap<String, Grid4>,
}

pub type Grads = BTreeMap<String, Vec<f64>>;
pub type Bound = BTreeMap<String, Var>;

const CKPT_MAGIC: &[u8; 4] = b"TCSP";
const CKPT_VERSION: u32 = 1;

impl NetParams {
    pub fn empty(role: Role) -> Self {
        Self {
            role,
            frozen: false,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Grid4) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name}"
            )));
        }
        self.tensors.insert(name, g.with_requires_grad(false));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Grid4> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Grid4> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Grid4)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Grid4)> {
        self.tensors.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Grid4::len).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn thaw(&mut self) {
        self.frozen = false;
    }

    /// Put every tensor on the tape; trainable unless frozen.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.tensors
            .iter()
            .map(|(k, g)| {
                (
                    k.clone(),
                    tape.leaf(g.clone().with_requires_grad(!self.frozen)),
                )
            })
            .collect()
    }

    /// Gradients left on the tape by `backward`, for tensors that got one.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound) -> Grads {
        bound
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.to_vec())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CKPT_MAGIC, CKPT_VERSION);
        w.u8(self.role.tag());
        w.u8(self.frozen as u8);
        w.u64(self.tensors.len() as u64);
        for (k, g) in &self.tensors {
            w.str(k);
            put_grid(&mut w, g);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, CKPT_MAGIC, path)?;
        if version != CKPT_VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let role = Role::from_tag(r.u8()?).ok_or_else(|| r.corrupt("unknown role"))?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(r.corrupt("bad frozen flag")),
        };
        let n = r.u64()?;
        let mut p = Self::empty(role);
        p.frozen = frozen;
        for _ in 0..n {
            let name = r.str()?;
            let g = get_grid(&mut r)?;
            if p.tensors.insert(name, g).is_some() {
                return Err(r.corrupt("duplicate parameter name"));
            }
        }
        r.expect_end()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// CRC32 of the serialized form; equal checksums mean equal bytes.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.to_bytes())
    }
}

struct ConvSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
    k: usize,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Kaiming,
    Zero,
    /// Pass the first `cout` input channels through; the remaining (prior)
    /// channels start small.
    Identity,
}

const fn conv(name: &'static str, cin: usize, cout: usize, k: usize) -> ConvSpec {
    ConvSpec {
        name,
        cin,
        cout,
        k,
        init: Init::Kaiming,
    }
}

fn layers(role: Role) -> Vec<ConvSpec> {
    let c = role.bev_channels();
    let zero = |mut s: ConvSpec| {
        s.init = Init::Zero;
        s
    };
    let ident = |mut s: ConvSpec| {
        s.init = Init::Identity;
        s
    };
    match role {
        Role::Student => vec![
            conv("enc2d.0", CAM_CHANNELS, 8, 3),
            conv("enc2d.1", 8, 8, 3),
            conv("enc2d.2", 8, 16, 3),
            conv("bevproj", 16, c, 1),
            conv("dec.0", c, 8, 3),
            zero(conv("dec.out", 8, NUM_CLASSES, 3)),
            conv("emb", 8, EMBED_DIM, 1),
        ],
        Role::Coach => vec![
            conv("enc2d.0", CAM_CHANNELS, 12, 3),
            conv("enc2d.1", 12, 12, 3),
            conv("enc3d.0", CAM_CHANNELS, 8, 3),
            conv("enc3d.1", 8, 16, 3),
            conv("bevproj", 28, c, 3),
            ident(conv("sdfusion", c + 1, c, 1)),
            ident(conv("hdfusion", c + NUM_CLASSES, c, 1)),
            conv("dec.0", c, 12, 3),
            zero(conv("dec.out", 12, NUM_CLASSES, 3)),
            conv("emb", 12, EMBED_DIM, 1),
        ],
        Role::Teacher => vec![
            conv("enc_img.0", CAM_CHANNELS, 16, 3),
            conv("enc_img.1", 16, 16, 3),
            conv("enc_lidar.0", LIDAR_CHANNELS, 8, 3),
            conv("enc_lidar.1", 8, 16, 3),
            conv("bevproj", 32, c, 3),
            ident(conv("sdfusion", c + 1, c, 1)),
            ident(conv("hdfusion", c + NUM_CLASSES, c, 1)),
            conv("dec.0", c, 16, 3),
            zero(conv("dec.out", 16, NUM_CLASSES, 3)),
            conv("emb", 16, EMBED_DIM, 1),
        ],
    }
}

fn role_stream(role: Role) -> u64 {
    0x6e65_7473_0000_0000 | role.tag() as u64
}

/// Fan-in scaled normal init for every conv, zero biases, zero final
/// decoder layer.
pub fn init_params(role: Role, seed: u64) -> NetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(role_stream(role));
    let mut p = NetParams::empty(role);
    for l in layers(role) {
        let fan_in = (l.cin * l.k * l.k) as f64;
        let n = l.cout * l.cin * l.k * l.k;
        let mut w = match l.init {
            Init::Zero => vec![0.0; n],
            _ => {
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        if let Init::Identity = l.init {
            for (o, row) in w.chunks_mut(l.cin * l.k * l.k).enumerate() {
                for (i, v) in row.iter_mut().enumerate() {
                    if i < l.cout {
                        *v = if i == o { 1.0 } else { 0.0 };
                    } else {
                        *v *= 0.1;
                    }
                }
            }
        }
        let w = Grid4::new([l.cout, l.cin, l.k, l.k], w).expect("layer shape");
        p.insert(format!("{}.w", l.name), w)
            .expect("unique layer names");
        p.insert(format!("{}.b", l.name), Grid4::zeros([1, l.cout, 1, 1]))
            .expect("unique layer names");
    }
    p
}

/// Modality inputs for one batch. Missing entries are `None`.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub cam: &'a Grid4,
    pub lidar: Option<&'a Grid4>,
    pub sd: Option<&'a Grid4>,
    pub hd: Option<&'a Grid4>,
}

impl<'a> Inputs<'a> {
    pub fn camera(cam: &'a Grid4) -> Self {
        Self {
            cam,
            lidar: None,
            sd: None,
            hd: None,
        }
    }
}

/// Forward outputs as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct TapeOut {
    /// (B, C_bev, H/2, W/2)
    pub bev: Var,
    /// (B, 3, H, W)
    pub logits: Var,
    /// (B, 2, H, W)
    pub embed: Var,
    /// Output of the LiDAR (teacher) or pseudo-LiDAR (coach) encoder.
    pub geom: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut {
    pub bev: Grid4,
    pub logits: Grid4,
    pub embed: Grid4,
}

fn check_input(what: &'static str, g: &Grid4, want: [usize; 4]) -> Result<()> {
    if g.shape() != want {
        return Err(Error::shape(what, &g.shape(), &want));
    }
    Ok(())
}

struct Ctx<'t> {
    tape: &'t mut Tape,
    vars: &'t Bound,
}

impl Ctx<'_> {
    fn conv(&mut self, name: &str, x: Var, stride: usize, relu: bool) -> Result<Var> {
        let w = *self
            .vars
            .get(&format!("{name}.w"))
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}.w")))?;
        let b = self.vars.get(&format!("{name}.b")).copied();
        let k = self.tape.shape(w)[2];
        let y = self.tape.conv2d(x, w, b, stride, k / 2)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }
}

/// Run `params` on a tape. Inputs are placed as constants.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &NetParams,
    vars: &Bound,
    inputs: Inputs,
) -> Result<TapeOut> {
    let s = inputs.cam.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    check_input("camera input", inputs.cam, [b, CAM_CHANNELS, h, w])?;
    if h % 8 != 0 || w % 8 != 0 || b == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {h}x{w} must be a positive multiple of 8"
        )));
    }
    let role = params.role;
    fn need<'g>(g: Option<&'g Grid4>, role: Role, what: &str) -> Result<&'g Grid4> {
        g.ok_or_else(|| Error::MissingInput(format!("{role} forward requires {what}")))
    }
    let lidar = if role == Role::Teacher {
        let l = need(inputs.lidar, role, "lidar_view")?;
        check_input("lidar input", l, [b, LIDAR_CHANNELS, h, w])?;
        Some(l)
    } else {
        None
    };
    let priors = if role == Role::Student {
        None
    } else {
        let sd = need(inputs.sd, role, "sd_prior")?;
        let hd = need(inputs.hd, role, "hd_prior")?;
        check_input("sd prior", sd, [b, 1, h / 8, w / 8])?;
        check_input("hd prior", hd, [b, NUM_CLASSES, h, w])?;
        Some((sd, hd))
    };

    let cam = tape.constant(inputs.cam.clone());
    let mut c = Ctx { tape, vars };
    let mut geom = None;
    let bev = match role {
        Role::Student => {
            let x = c.conv("enc2d.0", cam, 2, true)?;
            let x = c.conv("enc2d.1", x, 1, true)?;
            let x = c.conv("enc2d.2", x, 1, true)?;
            c.conv("bevproj", x, 1, true)?
        }
        Role::Coach | Role::Teacher => {
            let (a, bname) = if role == Role::Teacher {
                ("enc_img", "enc_lidar")
            } else {
                ("enc2d", "enc3d")
            };
            let fi = c.conv(&format!("{a}.0"), cam, 2, true)?;
            let fi = c.conv(&format!("{a}.1"), fi, 1, true)?;
            let src = match lidar {
                Some(l) => c.tape.constant(l.clone()),
                None => cam,
            };
            let fl = c.conv(&format!("{bname}.0"), src, 2, true)?;
            let fl = c.conv(&format!("{bname}.1"), fl, 1, true)?;
            geom = Some(fl);
            let cat = c.tape.concat_channels(&[fi, fl])?;
            let f = c.conv("bevproj", cat, 1, true)?;
            let (sd, hd) = priors.expect("checked above");
            let sd = c.tape.constant(sd.clone());
            let sd = c.tape.upsample_nearest(sd, 4)?;
            let cat = c.tape.concat_channels(&[f, sd])?;
            let f = c.conv("sdfusion", cat, 1, true)?;
            let hd = c.tape.constant(hd.clone());
            let hd = c.tape.avg_pool2d(hd, 2)?;
            let cat = c.tape.concat_channels(&[f, hd])?;
            c.conv("hdfusion", cat, 1, true)?
        }
    };
    let d = c.conv("dec.0", bev, 1, true)?;
    let up = c.tape.upsample_nearest(d, 2)?;
    let logits = c.conv("dec.out", up, 1, false)?;
    let e = c.conv("emb", d, 1, false)?;
    let embed = c.tape.upsample_nearest(e, 2)?;
    Ok(TapeOut {
        bev,
        logits,
        embed,
        geom,
    })
}

fn run_inference(params: &NetParams, inputs: Inputs) -> Result<ForwardOut> {
    let mut tape = Tape::inference();
    let frozen = NetParams {
        frozen: true,
        ..params.clone()
    };
    let vars = frozen.bind(&mut tape);
    let out = forward_on_tape(&mut tape, params, &vars, inputs)?;
    Ok(ForwardOut {
        bev: tape.value(out.bev).clone(),
        logits: tape.value(out.logits).clone(),
        embed: tape.value(out.embed).clone(),
    })
}

fn expect_role(p: &NetParams, role: Role) -> Result<()> {
    if p.role != role {
        return Err(Error::InvalidArgument(format!(
            "expected {role} parameters, got {}",
            p.role
        )));
    }
    Ok(())
}

pub fn student_forward(p: &NetParams, cam: &Grid4) -> Result<ForwardOut> {
    expect_role(p, Role::Student)?;
    run_inference(p, Inputs::camera(cam))
}

pub fn teacher_forward(
    p: &NetParams,
    cam: &Grid4,
    lidar: &Grid4,
    sd: &Grid4,
    hd: &Grid4,
) -> Result<ForwardOut> {
    expect_role(p, Role::Teacher)?;
    run_inference(
        p,
        Inputs {
            cam,
            lidar: Some(lidar),
            sd: Some(sd),
            hd: Some(hd),
        },
    )
}

pub fn coach_forward(p: &NetParams, cam: &Grid4, sd: &Grid4, hd: &Grid4) -> Result<ForwardOut> {
    expect_role(p, Role::Coach)?;
    run_inference(
        p,
        Inputs {
            cam,
            lidar: None,
            sd: Some(sd),
            hd: Some(hd),
        },
    )
}

/// Forward for any role; inputs the role does not use are ignored.
pub fn forward(p: &NetParams, inputs: Inputs) -> Result<ForwardOut> {
    run_inference(p, inputs)
}

/// Output shape of the pseudo-LiDAR (coach) or LiDAR (teacher) encoder.
pub fn geometry_encoder_shape(role: Role, batch: usize, h: usize, w: usize) -> Option<[usize; 4]> {
    match role {
        Role::Teacher | Role::Coach => Some([batch, 16, h / 2, w / 2]),
        Role::Student => None,
    }
}
