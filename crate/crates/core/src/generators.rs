//! Compositional 3D pose generators: bone angle (G_BA), bone length (G_BL)
//! and rigid transform (G_RT) heads driven by a shared embedding of the
//! predicted pose, its temporal context and a 2D prior.
//!
//! Inside graphs poses are in metres (`[batch, J*3]` rows); the plain-value
//! API takes millimetres like the rest of the crate.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kinematics::{BoneAlgebra, BoneSet, MIN_BONE_LENGTH_MM};
use crate::nn::{Activation, Architecture, ModelSet, ParamModel};
use crate::pose::{Pose2D, Pose3D, PoseClip};
use crate::skeleton::{Skeleton, SEGMENT_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Scale of G_BA's raw output before it is added to the base direction.
    pub ba_gain: f64,
    /// Half-width of the G_BL length ratio interval around 1.
    pub ratio_range: f64,
    pub max_translation_mm: f64,
    /// Width of the JC, BV, TE and DE embeddings.
    pub embed_dim: usize,
    /// Width of each part-segment embedding.
    pub segment_embed_dim: usize,
    pub hidden: usize,
    pub use_ps: bool,
    pub use_te: bool,
    pub use_de: bool,
    pub use_bl: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            ba_gain: 0.3,
            ratio_range: 0.3,
            max_translation_mm: 200.0,
            embed_dim: 32,
            segment_embed_dim: 16,
            hidden: 128,
            use_ps: true,
            use_te: true,
            use_de: true,
            use_bl: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ba_gain > 0.0) {
            return Err(Error::config("generator.ba_gain", "must be positive"));
        }
        if !(self.ratio_range > 0.0 && self.ratio_range < 1.0) {
            return Err(Error::config("generator.ratio_range", "must lie in (0, 1)"));
        }
        if !(self.max_translation_mm >= 0.0) {
            return Err(Error::config("generator.max_translation_mm", "must be >= 0"));
        }
        if self.embed_dim == 0 || self.segment_embed_dim == 0 || self.hidden == 0 {
            return Err(Error::config(
                "generator",
                "embedding and hidden widths must be positive",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        4 * self.embed_dim + SEGMENT_NAMES.len() * self.segment_embed_dim
    }
}

/// The concatenated generator input, split by component.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInput {
    pub jc: Vec<f64>,
    pub bv: Vec<f64>,
    pub ps: Vec<f64>,
    pub te: Vec<f64>,
    pub de: Vec<f64>,
}

impl GeneratorInput {
    /// Components in the fixed order JC, BV, PS, TE, DE.
    pub fn concatenated(&self) -> Vec<f64> {
        [&self.jc, &self.bv, &self.ps, &self.te, &self.de]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }
}

/// Embedding slices recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Embedding<'t> {
    pub jc: Var<'t>,
    pub bv: Var<'t>,
    pub ps: Var<'t>,
    pub te: Var<'t>,
    pub de: Var<'t>,
    pub all: Var<'t>,
}

/// Intermediate values of one augmentation pass.
#[derive(Clone, Copy, Debug)]
pub struct AugmentTrace<'t> {
    pub embedding: Embedding<'t>,
    pub units: Var<'t>,
    pub lengths: Var<'t>,
    pub ratios: Var<'t>,
    pub quaternion: Var<'t>,
    pub translation: Var<'t>,
    pub output: Var<'t>,
}

const ENC_JC: &str = "enc_jc";
const ENC_BV: &str = "enc_bv";
const ENC_TE: &str = "enc_te";
const ENC_DE: &str = "enc_de";
const POOL: &str = "pool";
const G_BA: &str = "g_ba";
const G_BL: &str = "g_bl";
const G_RT: &str = "g_rt";

fn enc_ps_name(segment: &str) -> String {
    format!("enc_ps.{segment}")
}

/// Encoders, temporal pooling network and the three generator heads.
#[derive(Clone, Debug)]
pub struct Generators {
    pub config: GeneratorConfig,
    pub models: ModelSet,
    skeleton: Skeleton,
    algebra: BoneAlgebra,
    prior_dim: usize,
}

impl Generators {
    /// Random encoders; generator heads start at the identity.
    pub fn new(config: GeneratorConfig, skeleton: &Skeleton, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let j = skeleton.joint_count();
        let b = skeleton.bones().len();
        let (e, h) = (config.embed_dim, config.hidden);
        let enc = |i: usize, o: usize| Architecture::mlp(i, &[], o, Activation::Identity);
        let mut models = ModelSet::new();
        models.push(ENC_JC, ParamModel::init(enc(j * 3, e), rng)?);
        models.push(ENC_BV, ParamModel::init(enc(b * 3, e), rng)?);
        for (name, seg) in SEGMENT_NAMES.iter().zip(skeleton.segments()) {
            let m = ParamModel::init(enc(seg.len() * 3, config.segment_embed_dim), rng)?;
            models.push(enc_ps_name(name), m);
        }
        models.push(POOL, ParamModel::init(enc(j * 3, 1), rng)?);
        models.push(ENC_TE, ParamModel::init(enc(j * 3, e), rng)?);
        models.push(ENC_DE, ParamModel::init(enc(j * 2, e), rng)?);
        let input = config.input_dim();
        for (name, out) in [(G_BA, b * 3), (G_BL, b), (G_RT, 7)] {
            let mut m = ParamModel::init(Architecture::mlp(input, &[h], out, Activation::Silu), rng)?;
            m.zero_output_layer();
            models.push(name, m);
        }
        Self::from_models(config, skeleton, models)
    }

    pub fn from_models(config: GeneratorConfig, skeleton: &Skeleton, models: ModelSet) -> Result<Self> {
        config.validate()?;
        for name in [ENC_JC, ENC_BV, POOL, ENC_TE, ENC_DE, G_BA, G_BL, G_RT] {
            if models.get(name).is_none() {
                return Err(Error::Checkpoint(format!("generator set lacks `{name}`")));
            }
        }
        Ok(Self {
            config,
            models,
            skeleton: skeleton.clone(),
            algebra: BoneAlgebra::new(skeleton),
            prior_dim: skeleton.joint_count() * 2,
        })
    }

    fn idx(&self, name: &str) -> usize {
        self.models.index_of(name).expect("checked at construction")
    }

    fn encode<'t>(&self, p: &[Vec<Var<'t>>], name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let i = self.idx(name);
        Ok(self.models.models()[i].apply(&p[i], x)?.tanh())
    }

    /// Temporal weighted pose of `[batch, T*J*3]` clips, `[batch, J*3]`.
    ///
    /// Evaluated as `centre + sum_t w_t (frame_t - centre)`, which equals
    /// `sum_t w_t frame_t` and returns a static clip's pose bit for bit.
    pub fn pool_graph<'t>(&self, p: &[Vec<Var<'t>>], clip: Var<'t>) -> Result<Var<'t>> {
        let width = self.skeleton.joint_count() * 3;
        let (rows, cols) = clip.shape();
        if cols % width != 0 || (cols / width) % 2 == 0 {
            return Err(Error::shape(
                format!("[batch, odd T * {width}]"),
                format!("[{rows}, {cols}]"),
            ));
        }
        let t = cols / width;
        let i = self.idx(POOL);
        let frames = clip.reshape(rows * t, width);
        let logits = self.models.models()[i].apply(&p[i], frames)?.reshape(rows, t);
        let max = logits
            .value()
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect::<Vec<_>>();
        let shift = clip.tape().constant(Array2::from_shape_vec((rows, 1), max).unwrap());
        let e = logits.sub(shift.broadcast_cols(t)).exp();
        let weights = e.mul_col(e.sum_rows().safe_recip());
        let centre = clip.slice_cols((t / 2) * width, width);
        let offsets = clip.sub(Var::concat_cols(&vec![centre; t]));
        let weighted = offsets
            .reshape(rows * t, width)
            .mul_col(weights.reshape(rows * t, 1))
            .reshape(rows, t * width);
        let mut stack = Tensor::zeros((t * width, width));
        for f in 0..t {
            for c in 0..width {
                stack[[f * width + c, c]] = 1.0;
            }
        }
        Ok(centre.add(weighted.matmul(clip.tape().constant(stack))))
    }

    /// Embeds a batch. `centre` is `[batch, J*3]`; `clip` the 3D context
    /// `[batch, T*J*3]`; `prior` `[batch, J*2]`. Disabled components are
    /// zero blocks of their nominal width and their inputs may be `None`.
    pub fn embed<'t>(
        &self,
        p: &[Vec<Var<'t>>],
        centre: Var<'t>,
        clip: Option<Var<'t>>,
        prior: Option<Var<'t>>,
    ) -> Result<Embedding<'t>> {
        let tape = centre.tape();
        let (rows, width) = centre.shape();
        if width != self.skeleton.joint_count() * 3 {
            return Err(Error::shape(
                format!("[batch, {}]", self.skeleton.joint_count() * 3),
                format!("[{rows}, {width}]"),
            ));
        }
        let zeros = |n: usize| tape.constant(Tensor::zeros((rows, n)));
        let c = &self.config;
        let jc = self.encode(p, ENC_JC, centre)?;
        let bone_vecs = centre.matmul(tape.constant(self.algebra.diff.clone()));
        let bv = self.encode(p, ENC_BV, bone_vecs)?;
        let ps = if c.use_ps {
            let mut parts = Vec::new();
            for (name, seg) in SEGMENT_NAMES.iter().zip(self.skeleton.segments()) {
                let cols: Vec<usize> = seg.iter().flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2]).collect();
                parts.push(self.encode(p, &enc_ps_name(name), centre.gather_cols(&cols))?);
            }
            Var::concat_cols(&parts)
        } else {
            zeros(SEGMENT_NAMES.len() * c.segment_embed_dim)
        };
        let te = match (c.use_te, clip) {
            (true, Some(clip)) => {
                let pooled = self.pool_graph(p, clip)?;
                self.encode(p, ENC_TE, pooled)?
            }
            (true, None) => return Err(Error::config("generator.use_te", "temporal context missing")),
            (false, _) => zeros(c.embed_dim),
        };
        let de = match (c.use_de, prior) {
            (true, Some(prior)) => {
                if prior.shape() != (rows, self.prior_dim) {
                    return Err(Error::shape(
                        format!("[{rows}, {}]", self.prior_dim),
                        format!("{:?}", prior.shape()),
                    ));
                }
                self.encode(p, ENC_DE, prior)?
            }
            (true, None) => return Err(Error::config("generator.use_de", "prior missing")),
            (false, _) => zeros(c.embed_dim),
        };
        let all = Var::concat_cols(&[jc, bv, ps, te, de]);
        Ok(Embedding {
            jc,
            bv,
            ps,
            te,
            de,
            all,
        })
    }

    fn normalize_bones<'t>(&self, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = v.tape();
        let norms = v.square().matmul(tape.constant(self.algebra.group_sum.clone())).sqrt();
        let units = v.mul(norms.safe_recip().matmul(tape.constant(self.algebra.expand.clone())));
        Ok((units, norms))
    }

    /// Unit directions and lengths of `[batch, J*3]` joints.
    pub fn decompose<'t>(&self, joints: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let v = joints.matmul(joints.tape().constant(self.algebra.diff.clone()));
        let (units, lengths) = self.normalize_bones(v)?;
        let min_len = MIN_BONE_LENGTH_MM / 1000.0;
        for row in lengths.value().rows() {
            if let Some(i) = row.iter().position(|&l| !(l >= min_len)) {
                let (parent, child) = self.skeleton.bones()[i];
                return Err(Error::ZeroLengthBone { parent, child });
            }
        }
        Ok((units, lengths))
    }

    /// New unit directions from G_BA.
    pub fn ba_graph<'t>(&self, p: &[Vec<Var<'t>>], emb: Var<'t>, units: Var<'t>) -> Result<Var<'t>> {
        let i = self.idx(G_BA);
        let raw = self.models.models()[i].apply(&p[i], emb)?;
        let v = units.add(raw.scale(self.config.ba_gain));
        let (out, norms) = self.normalize_bones(v)?;
        for row in norms.value().rows() {
            if let Some(b) = row.iter().position(|&n| !(n >= 1e-9)) {
                return Err(Error::DegenerateDirection(b));
            }
        }
        Ok(out)
    }

    /// Length ratios from G_BL, each in `1 ± ratio_range`.
    pub fn bl_graph<'t>(&self, p: &[Vec<Var<'t>>], emb: Var<'t>) -> Result<Var<'t>> {
        let i = self.idx(G_BL);
        let raw = self.models.models()[i].apply(&p[i], emb)?;
        // tanh rounds to exactly 1 for |x| > 19; the shrink keeps both bounds open.
        Ok(raw.tanh().scale(self.config.ratio_range * (1.0 - 1e-9)).add_scalar(1.0))
    }

    /// Unit quaternion `[batch, 4]` and translation `[batch, 3]` (metres).
    pub fn rt_params<'t>(&self, p: &[Vec<Var<'t>>], emb: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let i = self.idx(G_RT);
        let raw = self.models.models()[i].apply(&p[i], emb)?;
        let tape = emb.tape();
        let q = raw
            .slice_cols(0, 4)
            .add_row(tape.constant(ndarray::array![[1.0, 0.0, 0.0, 0.0]]));
        let norm = q.square().sum_rows().sqrt();
        if norm.value().iter().any(|&n| !(n >= 1e-9)) {
            return Err(Error::DegenerateQuaternion);
        }
        let q = q.mul_col(norm.safe_recip());
        let t = raw
            .slice_cols(4, 3)
            .tanh()
            .scale(self.config.max_translation_mm / 1000.0);
        Ok((q, t))
    }

    /// `R(q) x + t` for every joint of `[batch, J*3]` rows.
    pub fn rigid_graph<'t>(&self, joints: Var<'t>, q: Var<'t>, t: Var<'t>) -> Var<'t> {
        rigid_graph(joints, q, t)
    }

    /// The full chain on the centre frame: bones, G_BA, G_BL, reassembly,
    /// then G_RT.
    pub fn augment_graph<'t>(
        &self,
        p: &[Vec<Var<'t>>],
        centre: Var<'t>,
        clip: Option<Var<'t>>,
        prior: Option<Var<'t>>,
    ) -> Result<AugmentTrace<'t>> {
        let tape = centre.tape();
        let embedding = self.embed(p, centre, clip, prior)?;
        let (units, lengths) = self.decompose(centre)?;
        let new_units = self.ba_graph(p, embedding.all, units)?;
        let ratios = if self.config.use_bl {
            self.bl_graph(p, embedding.all)?
        } else {
            tape.constant(Tensor::ones(lengths.shape()))
        };
        let new_lengths = lengths.mul(ratios);
        // Rebuild from the change in bone vectors so identity heads give
        // the input back exactly.
        let (base_units, _) = self.normalize_bones(units)?;
        let expand = tape.constant(self.algebra.expand.clone());
        let new_vecs = new_units.mul(new_lengths.matmul(expand));
        let base_vecs = base_units.mul(lengths.matmul(expand));
        let joints = centre.add(
            new_vecs
                .sub(base_vecs)
                .matmul(tape.constant(self.algebra.assemble.clone())),
        );
        let (quaternion, translation) = self.rt_params(p, embedding.all)?;
        let output = rigid_graph(joints, quaternion, translation);
        Ok(AugmentTrace {
            embedding,
            units: new_units,
            lengths: new_lengths,
            ratios,
            quaternion,
            translation,
            output,
        })
    }

    fn centre_and_clip(&self, clip3d: &PoseClip<Pose3D>) -> (Tensor, Tensor) {
        let centre = pose_row_m(clip3d.center());
        let flat: Vec<f64> = clip3d
            .frames
            .iter()
            .flat_map(|f| f.to_flat())
            .map(|v| v / 1000.0)
            .collect();
        let n = flat.len();
        (centre, Tensor::from_shape_vec((1, n), flat).unwrap())
    }

    fn single<'t>(
        &self,
        tape: &'t Tape,
        clip3d: &PoseClip<Pose3D>,
        prior2d: Option<&Pose2D>,
    ) -> (Var<'t>, Option<Var<'t>>, Option<Var<'t>>) {
        let (centre, clip) = self.centre_and_clip(clip3d);
        let prior = prior2d.map(|p| {
            let v = p.to_flat();
            tape.constant(Tensor::from_shape_vec((1, v.len()), v).unwrap())
        });
        (tape.constant(centre), Some(tape.constant(clip)), prior)
    }

    /// Embedding of one clip and prior. The prior is in network units.
    pub fn encode_input(&self, clip3d: &PoseClip<Pose3D>, prior2d: Option<&Pose2D>) -> Result<GeneratorInput> {
        let tape = Tape::new();
        let p = self.models.bind_frozen(&tape);
        let (centre, clip, prior) = self.single(&tape, clip3d, prior2d);
        let e = self.embed(&p, centre, clip, prior)?;
        let row = |v: Var| v.value().iter().copied().collect::<Vec<_>>();
        Ok(GeneratorInput {
            jc: row(e.jc),
            bv: row(e.bv),
            ps: row(e.ps),
            te: row(e.te),
            de: row(e.de),
        })
    }

    /// Temporal weighted single-frame pose, millimetres.
    pub fn temporal_pool(&self, clip3d: &PoseClip<Pose3D>) -> Result<Pose3D> {
        let tape = Tape::new();
        let p = self.models.bind_frozen(&tape);
        let (_, clip) = self.centre_and_clip(clip3d);
        let out = self.pool_graph(&p, tape.constant(clip))?;
        row_to_pose_mm(&out.value())
    }

    fn input_var<'t>(&self, tape: &'t Tape, input: &GeneratorInput) -> Result<Var<'t>> {
        let v = input.concatenated();
        if v.len() != self.config.input_dim() {
            return Err(Error::shape(self.config.input_dim(), v.len()));
        }
        Ok(tape.constant(Tensor::from_shape_vec((1, v.len()), v).unwrap()))
    }

    /// G_BA on a bone set; lengths pass through untouched.
    pub fn g_ba(&self, input: &GeneratorInput, base: &BoneSet) -> Result<BoneSet> {
        let tape = Tape::new();
        let p = self.models.bind_frozen(&tape);
        let emb = self.input_var(&tape, input)?;
        let flat: Vec<f64> = base.units.iter().flatten().copied().collect();
        let units = tape.constant(Tensor::from_shape_vec((1, flat.len()), flat).unwrap());
        let out = self.ba_graph(&p, emb, units)?.to_tensor();
        Ok(BoneSet {
            units: out.as_slice().unwrap().chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            lengths: base.lengths.clone(),
        })
    }

    /// G_BL on a bone set; directions pass through untouched.
    pub fn g_bl(&self, input: &GeneratorInput, base: &BoneSet) -> Result<BoneSet> {
        let tape = Tape::new();
        let p = self.models.bind_frozen(&tape);
        let emb = self.input_var(&tape, input)?;
        let ratios = self.bl_graph(&p, emb)?.to_tensor();
        Ok(BoneSet {
            units: base.units.clone(),
            lengths: base.lengths.iter().zip(ratios.iter()).map(|(l, r)| l * r).collect(),
        })
    }

    /// G_RT on a root-relative pose (millimetres).
    pub fn g_rt(&self, input: &GeneratorInput, pose: &Pose3D) -> Result<Pose3D> {
        let tape = Tape::new();
        let p = self.models.bind_frozen(&tape);
        let emb = self.input_var(&tape, input)?;
        let (q, t) = self.rt_params(&p, emb)?;
        let q = q.value();
        let t = t.value();
        rigid_transform(
            pose,
            [q[[0, 0]], q[[0, 1]], q[[0, 2]], q[[0, 3]]],
            [t[[0, 0]] * 1000.0, t[[0, 1]] * 1000.0, t[[0, 2]] * 1000.0],
        )
    }

    /// Augmented centre-frame pose, millimetres.
    pub fn augment(&self, clip3d: &PoseClip<Pose3D>, prior2d: Option<&Pose2D>) -> Result<Pose3D> {
        let tape = Tape::new();
        let p = self.models.bind_frozen(&tape);
        let (centre, clip, prior) = self.single(&tape, clip3d, prior2d);
        let out = self.augment_graph(&p, centre, clip, prior)?.output;
        row_to_pose_mm(&out.value())
    }
}

fn pose_row_m(pose: &Pose3D) -> Tensor {
    let v: Vec<f64> = pose.to_flat().iter().map(|x| x / 1000.0).collect();
    Tensor::from_shape_vec((1, v.len()), v).unwrap()
}

fn row_to_pose_mm(row: &Tensor) -> Result<Pose3D> {
    let v: Vec<f64> = row.iter().map(|x| x * 1000.0).collect();
    Pose3D::from_flat(&v)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// `R(q) x + t` on every joint; `q` is normalised first.
pub fn rigid_transform(pose: &Pose3D, q: [f64; 4], t: [f64; 3]) -> Result<Pose3D> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n >= 1e-9) {
        return Err(Error::DegenerateQuaternion);
    }
    let r = quaternion_matrix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
    Ok(Pose3D::new(
        pose.joints
            .iter()
            .map(|p| {
                let mut out = [0.0; 3];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
                }
                out
            })
            .collect(),
    ))
}

/// Graph form of [`rigid_transform`] for `[batch, J*3]` rows with unit
/// quaternions `[batch, 4]` and translations `[batch, 3]`.
pub fn rigid_graph<'t>(joints: Var<'t>, q: Var<'t>, t: Var<'t>) -> Var<'t> {
    let (_, width) = joints.shape();
    let n = width / 3;
    let (w, x, y, z) = (
        q.slice_cols(0, 1),
        q.slice_cols(1, 1),
        q.slice_cols(2, 1),
        q.slice_cols(3, 1),
    );
    let two = |a: Var<'t>, b: Var<'t>| a.mul(b).scale(2.0);
    let one_minus = |a: Var<'t>, b: Var<'t>| a.square().add(b.square()).scale(-2.0).add_scalar(1.0);
    let r = [
        [one_minus(y, z), two(x, y).sub(two(w, z)), two(x, z).add(two(w, y))],
        [two(x, y).add(two(w, z)), one_minus(x, z), two(y, z).sub(two(w, x))],
        [two(x, z).sub(two(w, y)), two(y, z).add(two(w, x)), one_minus(x, y)],
    ];
    let cols = |k: usize| (0..n).map(|j| 3 * j + k).collect::<Vec<_>>();
    let comps = [
        joints.gather_cols(&cols(0)),
        joints.gather_cols(&cols(1)),
        joints.gather_cols(&cols(2)),
    ];
    let mut out: Option<Var<'t>> = None;
    for i in 0..3 {
        let rotated = comps[0]
            .mul_col(r[i][0])
            .add(comps[1].mul_col(r[i][1]))
            .add(comps[2].mul_col(r[i][2]))
            .add(t.slice_cols(i, 1).broadcast_cols(n));
        let placed = rotated.scatter_cols(&cols(i), width);
        out = Some(match out {
            Some(o) => o.add(placed),
            None => placed,
        });
    }
    out.expect("three components")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::kinematics::{bones_from_joints, joints_from_bones};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn skel() -> Skeleton {
        Skeleton::canonical()
    }

    fn template() -> Pose3D {
        let units = vec![[0.0, -1.0, 0.0]; 15];
        let mut bones = BoneSet {
            units,
            lengths: vec![0.0; 15],
        };
        let s = skel();
        for (i, &(p, c)) in s.bones().iter().enumerate() {
            let dir: [f64; 3] = match (p, c) {
                (0, 1) | (1, 2) | (2, 3) => [0.0, -1.0, 0.05],
                (2, 4) | (0, 10) => [1.0, 0.1, 0.0],
                (2, 7) | (0, 13) => [-1.0, 0.1, 0.0],
                (4, 5) | (5, 6) => [0.3, 1.0, 0.1],
                (7, 8) | (8, 9) => [-0.3, 1.0, 0.1],
                _ => [0.05, 1.0, -0.05],
            };
            let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            bones.units[i] = [dir[0] / n, dir[1] / n, dir[2] / n];
            bones.lengths[i] = 150.0 + 20.0 * (i % 5) as f64;
        }
        joints_from_bones(&bones, [0.0; 3], &s).unwrap()
    }

    fn jittered_clip(rng: &mut ChaCha8Rng, frames: usize) -> PoseClip<Pose3D> {
        let base = template();
        let frames = (0..frames)
            .map(|_| {
                Pose3D::new(
                    base.joints
                        .iter()
                        .map(|j| {
                            let mut out = *j;
                            for v in &mut out {
                                let z: f64 = StandardNormal.sample(rng);
                                *v += 10.0 * z;
                            }
                            out
                        })
                        .collect(),
                )
                .root_centered()
            })
            .collect();
        PoseClip::new(frames, 50.0).unwrap()
    }

    fn prior(rng: &mut ChaCha8Rng) -> Pose2D {
        Pose2D::new(
            (0..16)
                .map(|_| [StandardNormal.sample(rng), StandardNormal.sample(rng)])
                .collect(),
        )
    }

    fn randomize_heads(g: &mut Generators, rng: &mut ChaCha8Rng, scale: f64) {
        for name in [G_BA, G_BL, G_RT] {
            let m = g.models.get_mut(name).unwrap();
            for p in m.params_mut() {
                p.mapv_inplace(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                });
            }
        }
    }

    #[test]
    fn identity_at_initialisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generators::new(GeneratorConfig::default(), &skel(), &mut rng).unwrap();
        for _ in 0..5 {
            let clip = jittered_clip(&mut rng, 9);
            let out = g.augment(&clip, Some(&prior(&mut rng))).unwrap();
            // Exact in metres; the mm conversion round trip is the only
            // source of difference.
            for (a, b) in out.joints.iter().zip(&clip.center().joints) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() <= 1e-12 * b[k].abs().max(1.0));
                }
            }
        }
        let tape = Tape::new();
        let p = g.models.bind_frozen(&tape);
        let clip = jittered_clip(&mut rng, 9);
        let (c, cl) = g.centre_and_clip(&clip);
        let centre = tape.constant(c.clone());
        let pr = prior(&mut rng).to_flat();
        let pr = tape.constant(Tensor::from_shape_vec((1, 32), pr).unwrap());
        let out = g.augment_graph(&p, centre, Some(tape.constant(cl)), Some(pr)).unwrap();
        assert_eq!(out.output.to_tensor(), c);
    }

    #[test]
    fn zero_encoders_give_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Generators::new(GeneratorConfig::default(), &skel(), &mut rng).unwrap();
        for m in g.models.models_mut() {
            for p in m.params_mut() {
                p.fill(0.0);
            }
        }
        let input = g
            .encode_input(&jittered_clip(&mut rng, 9), Some(&prior(&mut rng)))
            .unwrap();
        let all = input.concatenated();
        assert_eq!(all.len(), 224);
        assert!(all.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabled_components_zero_only_their_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = Generators::new(GeneratorConfig::default(), &skel(), &mut rng).unwrap();
        let clip = jittered_clip(&mut rng, 9);
        let pr = prior(&mut rng);
        let a = full.encode_input(&clip, Some(&pr)).unwrap();
        for which in ["ps", "te", "de"] {
            let mut cfg = GeneratorConfig::default();
            match which {
                "ps" => cfg.use_ps = false,
                "te" => cfg.use_te = false,
                _ => cfg.use_de = false,
            }
            let g = Generators::from_models(cfg, &skel(), full.models.clone()).unwrap();
            let b = g.encode_input(&clip, Some(&pr)).unwrap();
            assert_eq!(a.jc, b.jc);
            assert_eq!(a.bv, b.bv);
            let pairs = [("ps", &a.ps, &b.ps), ("te", &a.te, &b.te), ("de", &a.de, &b.de)];
            for (name, x, y) in pairs {
                if name == which {
                    assert!(y.iter().all(|&v| v == 0.0));
                    assert_eq!(x.len(), y.len());
                } else {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn frame_permutation_only_moves_temporal_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generators::new(GeneratorConfig::default(), &skel(), &mut rng).unwrap();
        let clip = jittered_clip(&mut rng, 9);
        let pr = prior(&mut rng);
        let mut frames = clip.frames.clone();
        frames.swap(0, 7);
        frames.swap(2, 5);
        let permuted = PoseClip::new(frames, 50.0).unwrap();
        let a = g.encode_input(&clip, Some(&pr)).unwrap();
        let b = g.encode_input(&permuted, Some(&pr)).unwrap();
        assert_eq!((&a.jc, &a.bv, &a.ps, &a.de), (&b.jc, &b.bv, &b.ps, &b.de));
        assert_ne!(a.te, b.te);
    }

    #[test]
    fn temporal_pool_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Generators::new(GeneratorConfig::default(), &skel(), &mut rng).unwrap();
        let p = template();
        let still = PoseClip::new(vec![p.clone(); 9], 50.0).unwrap();
        let (centre, clip) = g.centre_and_clip(&still);
        let tape = Tape::new();
        let params = g.models.bind_frozen(&tape);
        let pooled = g.pool_graph(&params, tape.constant(clip)).unwrap();
        assert_eq!(pooled.to_tensor(), centre);

        let clip = jittered_clip(&mut rng, 9);
        let pooled = g.temporal_pool(&clip).unwrap();
        for j in 0..16 {
            for k in 0..3 {
                let lo = clip.frames.iter().map(|f| f.joints[j][k]).fold(f64::INFINITY, f64::min);
                let hi = clip
                    .frames
                    .iter()
                    .map(|f| f.joints[j][k])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(pooled.joints[j][k] >= lo - 1e-9 && pooled.joints[j][k] <= hi + 1e-9);
            }
        }

        for t in g.models.get_mut(POOL).unwrap().params_mut() {
            t.fill(0.0);
        }
        let mean = g.temporal_pool(&clip).unwrap();
        for j in 0..16 {
            for k in 0..3 {
                let m = clip.frames.iter().map(|f| f.joints[j][k]).sum::<f64>() / 9.0;
                assert!((mean.joints[j][k] - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn head_contracts_over_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Generators::new(GeneratorConfig::default(), &skel(), &mut rng).unwrap();
        let clip = jittered_clip(&mut rng, 9);
        let base = bones_from_joints(clip.center(), &skel()).unwrap();
        for _ in 0..20 {
            randomize_heads(&mut g, &mut rng, 0.1);
            let input = g.encode_input(&clip, Some(&prior(&mut rng))).unwrap();
            let ba = g.g_ba(&input, &base).unwrap();
            assert_eq!(ba.lengths, base.lengths);
            for u in &ba.units {
                let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                assert!((n - 1.0).abs() <= 1e-6);
            }
            let bl = g.g_bl(&input, &base).unwrap();
            assert_eq!(bl.units, base.units);
            for (l, b) in bl.lengths.iter().zip(&base.lengths) {
                let r = l / b;
                assert!(r > 0.7 && r < 1.3);
            }
            let rt = g.g_rt(&input, clip.center()).unwrap();
            for a in 0..16 {
                for b in 0..16 {
                    let d = |p: &Pose3D| {
                        let (x, y) = (p.joints[a], p.joints[b]);
                        ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
                    };
                    assert!((d(&rt) - d(clip.center())).abs() <= 1e-6);
                }
            }
            let out = g.augment(&clip, Some(&prior(&mut rng))).unwrap();
            bones_from_joints(&out, &skel()).unwrap();
        }
    }

    #[test]
    fn pure_translation_and_identity_rotation() {
        let p = template();
        let moved = rigid_transform(&p, [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 100.0]).unwrap();
        for (a, b) in moved.joints.iter().zip(&p.joints) {
            assert_eq!(*a, [b[0], b[1], b[2] + 100.0]);
        }
        assert!(matches!(
            rigid_transform(&p, [0.0; 4], [0.0; 3]),
            Err(Error::DegenerateQuaternion)
        ));
    }

    #[test]
    fn symmetric_lengths_stay_symmetric() {
        // Ratios depend only on the raw per-bone outputs; mirrored raw
        // outputs on a mirrored base give mirrored lengths.
        let s = skel();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Generators::new(GeneratorConfig::default(), &s, &mut rng).unwrap();
        randomize_heads(&mut g, &mut rng, 0.3);
        let bones = s.bones().to_vec();
        let mirror_bone = |i: usize| {
            let (p, c) = bones[i];
            bones.iter().position(|&b| b == (s.mirror(p), s.mirror(c))).unwrap()
        };
        // Mirror the output layer columns so raw[i] == raw[mirror(i)].
        let m = g.models.get_mut(G_BL).unwrap();
        let n = m.params().len();
        let (w, b) = (m.params()[n - 2].clone(), m.params()[n - 1].clone());
        for i in 0..15 {
            let j = mirror_bone(i);
            if j < i {
                m.params_mut()[n - 2].column_mut(i).assign(&w.column(j));
                m.params_mut()[n - 1][[0, i]] = b[[0, j]];
            }
        }
        let base = bones_from_joints(&template(), &s).unwrap();
        let mut sym = base.clone();
        for i in 0..15 {
            sym.lengths[i] = 200.0 + 10.0 * i.min(mirror_bone(i)) as f64;
        }
        let input = g
            .encode_input(&jittered_clip(&mut rng, 9), Some(&prior(&mut rng)))
            .unwrap();
        let out = g.g_bl(&input, &sym).unwrap();
        for i in 0..15 {
            assert_eq!(out.lengths[i], out.lengths[mirror_bone(i)]);
        }
    }

    #[test]
    fn disabling_bl_keeps_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = GeneratorConfig {
            use_bl: false,
            ..GeneratorConfig::default()
        };
        let mut g = Generators::new(cfg, &skel(), &mut rng).unwrap();
        randomize_heads(&mut g, &mut rng, 0.3);
        let clip = jittered_clip(&mut rng, 9);
        let out = g.augment(&clip, Some(&prior(&mut rng))).unwrap();
        let (a, b) = (
            bones_from_joints(&out, &skel()).unwrap(),
            bones_from_joints(clip.center(), &skel()).unwrap(),
        );
        for (x, y) in a.lengths.iter().zip(&b.lengths) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = GeneratorConfig {
            embed_dim: 2,
            segment_embed_dim: 1,
            hidden: 3,
            ..GeneratorConfig::default()
        };
        let mut g = Generators::new(cfg, &skel(), &mut rng).unwrap();
        randomize_heads(&mut g, &mut rng, 0.3);
        let clip = jittered_clip(&mut rng, 3);
        let (c, cl) = g.centre_and_clip(&clip);
        let pr = Tensor::from_shape_vec((1, 32), prior(&mut rng).to_flat()).unwrap();
        let refs: Vec<&ParamModel> = g.models.models().iter().collect();
        let report = check_gradients(&refs, 1e-5, |tape, p| {
            let out = g.augment_graph(
                p,
                tape.constant(c.clone()),
                Some(tape.constant(cl.clone())),
                Some(tape.constant(pr.clone())),
            )?;
            Ok(out.output.sub(tape.constant(c.clone())).square().sum().scale(100.0))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
