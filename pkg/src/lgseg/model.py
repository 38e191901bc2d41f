"""End-to-end dual-branch part/object segmenter, its loss, optimizer and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .assoc import (AssocPixSp, AssocSpGroup, bilinear_resize, pix_sp_assoc, sp_group_assoc,
                    upsample_group_to_sp, upsample_sp_to_pix)
from .blocks import (LinearParams, NormParams, ViTBlockParams, iter_parameters, linear, norm,
                     trunc_normal, vit_block)
from .hierarchy import (CELL, CandidateMap, GcaParams, GeometryError, ScaParams, StemParams,
                        build_candidate_map, conv_stem, gca_stage, group_init, init_stem, sca_block,
                        superpixel_init)
from .numerics import Parameter, Tensor

GROUP_INIT_METHODS = ("avgpool", "learnable", "conv")
UPSAMPLE_MODES = ("assoc", "bilinear")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    stem_stride: int = 2
    stem_channels: int = 32
    sp_channels: int = 64
    trunk_depth: int = 4
    sca_positions: list = field(default_factory=lambda: [0, 2])
    branch_depth: int = 3
    gca_stages: int = 3
    sca_heads: int = 2
    gca_heads: int = 6
    vit_heads: int = 6
    mlp_ratio: int = 4
    group_cell: int = 4
    group_init: str = "avgpool"
    n_parts: int = 6
    n_objects: int = 2
    loss_weight: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.sca_positions = list(cfg.sca_positions)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def pixel_hw(self) -> tuple:
        return self.image_h // self.stem_stride, self.image_w // self.stem_stride

    @property
    def sp_hw(self) -> tuple:
        ih, iw = self.pixel_hw
        return ih // CELL, iw // CELL

    @property
    def group_hw(self) -> tuple:
        sh, sw = self.sp_hw
        return sh // self.group_cell, sw // self.group_cell

    @property
    def n_groups(self) -> int:
        gh, gw = self.group_hw
        return gh * gw

    def validate(self) -> None:
        problems = []
        unit = self.stem_stride * CELL * self.group_cell
        if self.image_h % unit or self.image_w % unit:
            problems.append(f"image {self.image_h}x{self.image_w} must be divisible by "
                            f"stem_stride*4*group_cell = {unit}")
        if self.stem_stride < 2 or self.stem_stride & (self.stem_stride - 1):
            problems.append(f"stem_stride {self.stem_stride} must be a power of two >= 2")
        if self.sp_channels % self.sca_heads:
            problems.append(f"sp_channels {self.sp_channels} not divisible by sca_heads {self.sca_heads}")
        if min(self.trunk_depth, self.branch_depth) < 1:
            problems.append("trunk_depth and branch_depth must be >= 1")
        if not self.sca_positions or any(not 0 <= p < self.trunk_depth for p in self.sca_positions):
            problems.append(f"sca_positions {self.sca_positions} must be non-empty and inside the trunk")
        if not 1 <= self.gca_stages <= self.branch_depth:
            problems.append(f"gca_stages {self.gca_stages} must be in [1, branch_depth]")
        if self.group_init not in GROUP_INIT_METHODS:
            problems.append(f"group_init {self.group_init!r} not in {GROUP_INIT_METHODS}")
        if self.n_parts < 1 or self.n_objects < 1:
            problems.append("need at least one part and one object class")
        if min(self.gca_heads, self.vit_heads, self.sca_heads) < 1:
            problems.append("head counts must be positive")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class Model:
    cfg: ModelConfig
    stem: StemParams
    sp_proj: LinearParams
    sca: list
    trunk: list
    part_blocks: list
    part_norm: NormParams
    part_head: LinearParams
    obj_blocks: list
    gca: list
    group_embed: Optional[object]
    obj_norm: NormParams
    obj_head: LinearParams
    cmap: CandidateMap = field(repr=False, default=None)

    def parameters(self) -> list:
        return list(iter_parameters([self.stem, self.sp_proj, self.sca, self.trunk,
                                     self.part_blocks, self.part_norm, self.part_head,
                                     self.obj_blocks, self.gca, self.group_embed,
                                     self.obj_norm, self.obj_head]))

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def object_branch_parameters(self) -> list:
        """Parameters used only by the object branch."""
        return list(iter_parameters([self.obj_blocks, self.gca, self.group_embed,
                                     self.obj_norm, self.obj_head]))

    def part_branch_parameters(self) -> list:
        return list(iter_parameters([self.part_blocks, self.part_norm, self.part_head]))


@dataclass
class ForwardOutput:
    part_logits: Tensor
    obj_logits: Tensor
    assoc_pix_sp: AssocPixSp
    assoc_sp_group: AssocSpGroup
    chain: dict = field(default_factory=dict)


def model_build(cfg: ModelConfig, seed: Optional[int] = None) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c, ic = cfg.sp_channels, cfg.stem_channels
    stem = init_stem(rng, "stem", cfg.stem_stride, ic)
    sp_proj = LinearParams.init(rng, "sp_proj", ic, c)
    sca = [ScaParams.init(rng, f"sca.{i}", c, ic, cfg.sca_heads) for i in range(len(cfg.sca_positions))]
    trunk = [ViTBlockParams.init(rng, f"trunk.{i}", c, cfg.vit_heads, cfg.mlp_ratio)
             for i in range(cfg.trunk_depth)]
    part_blocks = [ViTBlockParams.init(rng, f"part.{i}", c, cfg.vit_heads, cfg.mlp_ratio)
                   for i in range(cfg.branch_depth)]
    obj_blocks = [ViTBlockParams.init(rng, f"obj.{i}", c, cfg.vit_heads, cfg.mlp_ratio)
                  for i in range(cfg.branch_depth)]
    gca = [GcaParams.init(rng, f"gca.{i}", c, cfg.gca_heads, cfg.mlp_ratio) for i in range(cfg.gca_stages)]
    if cfg.group_init == "learnable":
        group_embed = Parameter("group_embed", trunc_normal(rng, (cfg.n_groups, c)))
    elif cfg.group_init == "conv":
        group_embed = LinearParams.init(rng, "group_conv", cfg.group_cell ** 2 * c, c)
    else:
        group_embed = None
    model = Model(cfg, stem, sp_proj, sca, trunk, part_blocks, NormParams.init("part_norm", c),
                  LinearParams.init(rng, "part_head", c, cfg.n_parts + 1),
                  obj_blocks, gca, group_embed, NormParams.init("obj_norm", c),
                  LinearParams.init(rng, "obj_head", c, cfg.n_objects + 1))
    model.cmap = build_candidate_map(*cfg.pixel_hw)
    names = [p.name for p in model.parameters()]
    if len(names) != len(set(names)):
        raise ConfigError("duplicate parameter names")
    return model


def _init_groups(model: Model, s: Tensor) -> Tensor:
    cfg = model.cfg
    b, sh, sw, c = s.shape
    if cfg.group_init == "avgpool":
        return group_init(s, cell=cfg.group_cell)
    if cfg.group_init == "learnable":
        return model.group_embed.reshape(1, cfg.n_groups, c) + nx.Tensor(np.zeros((b, 1, 1)))
    gc = cfg.group_cell
    gh, gw = sh // gc, sw // gc
    patches = s.reshape(b, gh, gc, gw, gc, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, gc * gc * c)
    return linear(patches, model.group_embed)


def _tokens(x: Tensor) -> Tensor:
    b, h, w, c = x.shape
    return x.reshape(b, h * w, c)


def model_forward(model: Model, image, upsample: str = "assoc",
                  force_assoc: Optional[tuple] = None) -> ForwardOutput:
    """Run both branches on ``image [B, H, W, 3]`` (float, roughly unit scale).

    ``force_assoc`` optionally replaces the computed associations with fixed
    ``(pix_sp_weights [B, n_pix, 9], sp_group_weights [B, sn, gn])`` arrays.
    """
    cfg = model.cfg
    image = nx.as_tensor(image)
    if image.ndim != 4 or image.shape[1:] != (cfg.image_h, cfg.image_w, 3):
        raise nx.ShapeError(f"image batch {image.shape} does not match configured "
                            f"{cfg.image_h}x{cfg.image_w}x3")
    if upsample not in UPSAMPLE_MODES:
        raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}")
    b = image.shape[0]
    sh, sw = cfg.sp_hw
    c = cfg.sp_channels

    pixels = conv_stem(image, model.stem)
    s = superpixel_init(pixels, model.sp_proj)
    logits = None
    sca_iter = iter(model.sca)
    for t, blk in enumerate(model.trunk):
        if t in cfg.sca_positions:
            s, logits = sca_block(s, pixels, model.cmap, next(sca_iter))
        s = vit_block(_tokens(s), blk).reshape(b, sh, sw, c)
    a_pi = pix_sp_assoc(logits, model.cmap)

    sp = _tokens(s)
    for blk in model.part_blocks:
        sp = vit_block(sp, blk)
    part_sp = linear(norm(sp, model.part_norm), model.part_head).reshape(b, sh, sw, cfg.n_parts + 1)

    so, g, w = s, None, None
    first_gca = cfg.branch_depth - cfg.gca_stages
    for j, blk in enumerate(model.obj_blocks):
        if j >= first_gca:
            if g is None:
                g = _init_groups(model, so)
            g, so, w = gca_stage(g, so, model.gca[j - first_gca])
        so = vit_block(_tokens(so), blk).reshape(b, sh, sw, c)
    obj_g = linear(norm(g, model.obj_norm), model.obj_head)
    a_sg = sp_group_assoc(w)

    if force_assoc is not None:
        a_pi = AssocPixSp(model.cmap, nx.Tensor(force_assoc[0]))
        a_sg = AssocSpGroup(nx.Tensor(force_assoc[1]))

    chain = {"part_S": part_sp, "obj_G": obj_g}
    if upsample == "assoc":
        part_i = upsample_sp_to_pix(part_sp, a_pi)
        obj_s = upsample_group_to_sp(obj_g, a_sg, sh, sw)
        obj_i = upsample_sp_to_pix(obj_s, a_pi)
        chain.update(part_I=part_i, obj_S=obj_s, obj_I=obj_i)
        part_logits = bilinear_resize(part_i, cfg.image_h, cfg.image_w)
        obj_logits = bilinear_resize(obj_i, cfg.image_h, cfg.image_w)
    else:
        gh, gw = cfg.group_hw
        part_logits = bilinear_resize(part_sp, cfg.image_h, cfg.image_w)
        obj_grid = obj_g.reshape(b, gh, gw, cfg.n_objects + 1)
        obj_logits = bilinear_resize(obj_grid, cfg.image_h, cfg.image_w)
    return ForwardOutput(part_logits, obj_logits, a_pi, a_sg, chain)


def joint_loss(out: ForwardOutput, part_gt, obj_gt, lam: float = 1.0, part_weight: float = 1.0) -> Tensor:
    """``part_weight * CE(part) + lam * CE(object)``, per-pixel means; zero weights drop the term."""
    terms = []
    if part_weight:
        terms.append(nx.cross_entropy(out.part_logits, np.asarray(part_gt)) * part_weight)
    if lam:
        terms.append(nx.cross_entropy(out.obj_logits, np.asarray(obj_gt)) * lam)
    if not terms:
        raise ValueError("both loss weights are zero")
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


# ---------------------------------------------------------------- optimisation

def lr_at(it: int, total: int, base_lr: float) -> float:
    """Step schedule: base, then /10 from 90% and /100 from 95% of ``total``."""
    if not 0 <= it < total:
        raise ValueError(f"iteration {it} outside [0, {total})")
    if it * 20 >= total * 19:
        return base_lr / 100
    if it * 10 >= total * 9:
        return base_lr / 10
    return base_lr


@dataclass
class AdamWState:
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    decay_vectors: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def decays(self, p: Parameter) -> bool:
        return self.decay_vectors or p.data.ndim >= 2


def adamw_update(params: Sequence[Parameter], opt: AdamWState) -> None:
    """One decoupled-weight-decay Adam step using each parameter's ``.grad``.

    By default only matrices and kernels are decayed; norms, biases and
    LayerScale gammas are not.
    """
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p in params:
        if not p.trainable:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m.get(p.name)
        if m is None:
            m = opt.m[p.name] = np.zeros_like(p.data)
            opt.v[p.name] = np.zeros_like(p.data)
        v = opt.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if opt.weight_decay and opt.decays(p):
            p.data *= 1.0 - opt.lr * opt.weight_decay
        p.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def batch_arrays(samples) -> tuple:
    """Stack samples into float images in [0, 1] plus label maps."""
    images = np.stack([s.image for s in samples]).astype(np.float64) / 255.0
    parts = np.stack([s.part_map for s in samples]).astype(np.int64)
    objs = np.stack([s.obj_map for s in samples]).astype(np.int64)
    return images, parts, objs


def train_step(model: Model, opt: AdamWState, batch, lam: Optional[float] = None,
               part_weight: float = 1.0) -> tuple:
    """Forward, backward and one AdamW update on ``batch = (images, part_gt, obj_gt)``.

    Returns ``(loss, global grad norm)``.
    """
    images, part_gt, obj_gt = batch
    if len(images) == 0:
        raise ValueError("empty batch")
    lam = model.cfg.loss_weight if lam is None else lam
    params = model.parameters()
    try:
        with nx.Graph() as graph:
            out = model_forward(model, images)
            loss = joint_loss(out, part_gt, obj_gt, lam, part_weight)
    except nx.NonFiniteError as exc:
        raise TrainingDiverged(f"{exc} at optimizer step {opt.step}") from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at optimizer step {opt.step}")
    nx.backward(graph, loss, params)
    gnorm = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if not np.isfinite(gnorm):
        raise TrainingDiverged(f"non-finite gradient norm at optimizer step {opt.step}")
    adamw_update(params, opt)
    return value, gnorm


def predict(model: Model, images: np.ndarray, upsample: str = "assoc", batch_size: int = 16) -> tuple:
    """Argmax part and object maps for ``images [N, H, W, 3]`` in [0, 1]."""
    parts, objs = [], []
    with nx.no_grad():
        for i in range(0, len(images), batch_size):
            out = model_forward(model, images[i:i + batch_size], upsample=upsample)
            parts.append(out.part_logits.data.argmax(-1))
            objs.append(out.obj_logits.data.argmax(-1))
    return np.concatenate(parts), np.concatenate(objs)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"LGCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, model: Model, extra: Optional[dict] = None) -> None:
    """Header, config echo, then (name, shape, little-endian float64 data) per parameter."""
    echo = canonical_json({"model": model.cfg.to_dict(), **(extra or {})}).encode()
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(echo)))
        fh.write(echo)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Rebuild the model from the config echo and fill in every parameter.

    Returns ``(model, echo dict)``.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def read(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if read(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic at offset 0")
    version, n_echo = struct.unpack("<II", read(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    echo = json.loads(read(n_echo, "config echo").decode())
    model = model_build(ModelConfig.from_dict(echo["model"]))
    expected = model.named_parameters()
    (count,) = struct.unpack("<I", read(4, "parameter count"))
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} parameters, model expects {len(expected)}")
    seen = set()
    for _ in range(count):
        (n_name,) = struct.unpack("<H", read(2, "name length"))
        name = read(n_name, "name").decode()
        (ndim,) = struct.unpack("<B", read(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim, "shape"))
        p = expected.get(name)
        if p is None:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if tuple(shape) != p.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, expected {p.data.shape}")
        n = int(np.prod(shape)) if ndim else 1
        p.data[...] = np.frombuffer(read(8 * n, name), dtype="<f8").reshape(shape)
        seen.add(name)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return model, echo
