"""Command-line entry point: ``lgseg {gen,train,eval,emerge,dump}``.

Exit codes: 0 success, 1 validation error (bad config, flags or input
files), 2 runtime failure (e.g. diverged training).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import evalkit as ev
from . import model as M
from . import numerics as nx
from . import synthshapes as ss
from .hierarchy import CELL


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    base_lr: float = 2e-4
    weight_decay: float = 0.05
    eval_interval: int = 500
    train_samples: int = 2000
    val_samples: int = 200
    supervision: str = "joint"  # joint | object | part
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValidationError("iterations, batch_size and eval_interval must be >= 1")
        if self.train_samples < self.batch_size:
            raise ValidationError("train_samples must be >= batch_size")
        if self.val_samples < 1:
            raise ValidationError("val_samples must be >= 1")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ValidationError("base_lr and weight_decay must be non-negative")
        if self.supervision not in ("joint", "object", "part"):
            raise ValidationError(f"supervision must be joint, object or part, got {self.supervision!r}")


@dataclass
class RunConfig:
    seed: int = 0
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    data: ss.GenConfig = field(default_factory=ss.GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        unknown = set(d) - {"seed", "model", "data", "train"}
        if unknown:
            raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
        try:
            model = M.ModelConfig.from_dict(d.get("model", {}))
            data = ss.GenConfig.from_dict(d.get("data", {}))
            train = _dataclass_from(TrainConfig, d.get("train", {}), "train")
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc
        cfg = cls(int(d.get("seed", 0)), model, data, train)
        if "seed" in d:
            cfg.set_seed(cfg.seed)
        return cfg

    def set_seed(self, seed: int) -> None:
        self.seed = self.model.seed = self.data.seed = self.train.seed = int(seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "model": self.model.to_dict(), "data": asdict(self.data),
                "train": asdict(self.train)}

    def validate(self) -> None:
        try:
            self.model.validate()
            self.data.validate()
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        self.train.validate()
        if (self.model.image_h, self.model.image_w) != (self.data.image_h, self.data.image_w):
            raise ValidationError("model and data image sizes differ")
        if (self.model.n_parts, self.model.n_objects) != (ss.N_PARTS, ss.N_OBJECTS):
            raise ValidationError(f"model class counts must match the dataset taxonomy "
                                  f"({ss.N_PARTS} parts, {ss.N_OBJECTS} objects)")


def _dataclass_from(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {section} config keys: {sorted(unknown)}")
    return cls(**d)


def load_run_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        try:
            cfg = RunConfig.from_dict(raw)
        except (M.ConfigError, ValueError) as exc:
            raise ValidationError(str(exc)) from exc
    else:
        cfg = RunConfig()
    if seed is not None:
        cfg.set_seed(seed)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- images

def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PPM (``[H, W, 3]``) or PGM (``[H, W]``) with maxval 255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValidationError(f"{path}: only P5/P6 with maxval 255 are supported")
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos)
    return data.reshape(h, w, 3) if ch == 3 else data.reshape(h, w)


OBJECT_COLORS = np.array([[0, 0, 0], [230, 120, 40], [40, 160, 230]], dtype=np.uint8)


def id_palette(n: int) -> np.ndarray:
    """Deterministic distinct-ish colors for ``n`` unit ids."""
    out = np.empty((n, 3), dtype=np.uint8)
    st = 0x5EED
    for i in range(n):
        st, z = ss.splitmix64(st)
        out[i] = [(z >> s) & 0xFF for s in (0, 8, 16)]
    return out


def colorize(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    return palette[np.asarray(labels) % len(palette)]


def overlay(image: np.ndarray, colors: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    return np.rint((1 - alpha) * image.astype(float) + alpha * colors.astype(float)).astype(np.uint8)


def heatmap(values: np.ndarray) -> np.ndarray:
    """Weights in [0, 1] to 8-bit gray."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def upscale_nearest(ids: np.ndarray, h: int, w: int) -> np.ndarray:
    fy, fx = h // ids.shape[0], w // ids.shape[1]
    return np.repeat(np.repeat(ids, fy, axis=0), fx, axis=1)


# ---------------------------------------------------------------- shared helpers

def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return str(v)


def _datasets(cfg: RunConfig, train_path: Optional[str], val_path: Optional[str]) -> tuple:
    """Training and validation samples: files when given, else generated from ``cfg``.

    Generated validation samples continue the training stream's indices, so the
    two sets never share a sample.
    """
    t = cfg.train
    train = _read_dataset(train_path) if train_path else ss.generate(cfg.data, t.train_samples)
    val = (_read_dataset(val_path) if val_path
           else ss.generate(cfg.data, t.val_samples, start=t.train_samples))
    return train, val


def _read_dataset(path: str) -> list:
    try:
        return ss.dataset_read(path)
    except OSError as exc:
        raise ValidationError(f"cannot read dataset {path}: {exc}") from exc
    except ss.DatasetFormatError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _load_model(path: str) -> tuple:
    try:
        return M.load_checkpoint(path)
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    except (M.CheckpointError, M.ConfigError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def evaluate(model: M.Model, samples: list, upsample: str = "assoc") -> dict:
    """Confusion matrices and mean per-image boundary F-scores over ``samples``."""
    images, parts, objs = M.batch_arrays(samples)
    pp, po = M.predict(model, images, upsample=upsample)
    cm_p = ev.ConfusionMatrix(model.cfg.n_parts + 1).update(pp, parts)
    cm_o = ev.ConfusionMatrix(model.cfg.n_objects + 1).update(po, objs)
    bf_p = float(np.mean([ev.boundary_fscore(a, b) for a, b in zip(pp, parts)]))
    bf_o = float(np.mean([ev.boundary_fscore(a, b) for a, b in zip(po, objs)]))
    return dict(part=ev.miou_macc(cm_p), obj=ev.miou_macc(cm_o), part_boundary_f=bf_p,
                obj_boundary_f=bf_o, part_cm=cm_p, obj_cm=cm_o)


def summary_of(m: dict) -> dict:
    return dict(part_miou=m["part"][1], part_macc=m["part"][3], obj_miou=m["obj"][1],
                obj_macc=m["obj"][3], part_boundary_f=m["part_boundary_f"],
                obj_boundary_f=m["obj_boundary_f"])


def _write_class_metrics(out_dir, prefix, m: dict) -> None:
    ev.write_metrics_csv(os.path.join(out_dir, f"{prefix}part_metrics.csv"), ss.PART_NAMES,
                         {"iou": m["part"][0], "acc": m["part"][2]},
                         {"iou": m["part"][1], "acc": m["part"][3]})
    ev.write_metrics_csv(os.path.join(out_dir, f"{prefix}object_metrics.csv"), ss.OBJECT_NAMES,
                         {"iou": m["obj"][0], "acc": m["obj"][2]},
                         {"iou": m["obj"][1], "acc": m["obj"][3]})


# ---------------------------------------------------------------- training

def _log(msg: str) -> None:
    print(msg, flush=True)


def train_model(cfg: RunConfig, train: list, val: list, out_dir: Optional[str] = None,
                log=_log) -> tuple:
    """Run the optimisation loop; returns ``(model, final metrics)``.

    With ``out_dir`` set, writes ``config.json``, ``train_log.csv`` (every
    iteration), ``eval_log.csv`` (every ``eval_interval``), the final metric
    CSVs and ``model.ckpt``.
    """
    t = cfg.train
    model = M.model_build(cfg.model, seed=cfg.seed)
    opt = M.AdamWState(lr=t.base_lr, weight_decay=t.weight_decay)
    images, parts, objs = M.batch_arrays(train)
    lam, part_w = {"joint": (cfg.model.loss_weight, 1.0), "object": (1.0, 0.0),
                   "part": (0.0, 1.0)}[t.supervision]
    order = ss.Xoshiro256ss(ss.derive_seed(t.seed, 0xBA7C4))
    log_rows, eval_rows = [], []
    t0 = time.time()
    for it in range(t.iterations):
        opt.lr = M.lr_at(it, t.iterations, t.base_lr)
        idx = _sample_batch(order, len(train), t.batch_size)
        loss, gnorm = M.train_step(model, opt, (images[idx], parts[idx], objs[idx]), lam, part_w)
        log_rows.append((it, opt.lr, loss, gnorm))
        if (it + 1) % t.eval_interval == 0 or it + 1 == t.iterations:
            m = evaluate(model, val)
            eval_rows.append((it + 1, opt.lr, loss, m["part"][1], m["obj"][1]))
            log(f"iter {it + 1}/{t.iterations} lr {opt.lr:.1e} loss {loss:.4f} "
                f"part mIoU {m['part'][1]:.4f} obj mIoU {m['obj'][1]:.4f} ({time.time() - t0:.0f}s)")
    final = m
    if out_dir:
        _ensure_dir(out_dir)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(M.canonical_json(cfg.to_dict()) + "\n")
        _write_rows(os.path.join(out_dir, "train_log.csv"), ["iter", "lr", "loss", "grad_norm"], log_rows)
        _write_rows(os.path.join(out_dir, "eval_log.csv"),
                    ["iter", "lr", "loss", "part_miou", "obj_miou"], eval_rows)
        _write_class_metrics(out_dir, "final_", final)
        _write_rows(os.path.join(out_dir, "final_summary.csv"), ["metric", "value"],
                    summary_of(final).items())
        M.save_checkpoint(os.path.join(out_dir, "model.ckpt"), model, extra={"run": cfg.to_dict()})
    return model, final


def _sample_batch(rng: ss.Xoshiro256ss, n: int, k: int) -> np.ndarray:
    """``k`` distinct indices from ``range(n)`` (partial Fisher-Yates)."""
    pool = list(range(n))
    for i in range(k):
        j = rng.integers(i, n)
        pool[i], pool[j] = pool[j], pool[i]
    return np.array(pool[:k])


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    data = cfg.data
    if args.occlude:
        data.occlusion = True
    samples = ss.generate(data, args.count, start=args.start)
    ss.dataset_write(args.out, samples)
    part_hist = np.zeros(ss.N_PARTS + 1, dtype=np.int64)
    obj_hist = np.zeros(ss.N_OBJECTS + 1, dtype=np.int64)
    for s in samples:
        part_hist += np.bincount(s.part_map.ravel(), minlength=ss.N_PARTS + 1)
        obj_hist += np.bincount(s.obj_map.ravel(), minlength=ss.N_OBJECTS + 1)
    print(f"wrote {len(samples)} samples to {args.out}")
    print("level,class,pixels")
    for name, n in zip(ss.PART_NAMES, part_hist):
        print(f"part,{name},{n}")
    for name, n in zip(ss.OBJECT_NAMES, obj_hist):
        print(f"object,{name},{n}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
        cfg.train.validate()
    train, val = _datasets(cfg, args.train, args.val)
    _, final = train_model(cfg, train, val, _ensure_dir(args.out))
    for k, v in summary_of(final).items():
        print(f"{k},{v:.6f}")
    return 0


def cmd_eval(args) -> int:
    model, echo = _load_model(args.checkpoint)
    cfg = _run_config_from_echo(echo, args.config, args.seed)
    samples = _read_dataset(args.data) if args.data else _datasets(cfg, None, None)[1]
    out = _ensure_dir(args.out)
    tag = args.upsample
    clean = evaluate(model, samples, args.upsample)
    if not args.occlude:
        _write_class_metrics(out, f"{tag}_", clean)
        _write_rows(os.path.join(out, f"{tag}_summary.csv"), ["metric", "value"], summary_of(clean).items())
        for k, v in summary_of(clean).items():
            print(f"{k},{v:.6f}")
        return 0
    occluded, coverage = occlude_samples(samples, cfg.data, args.seed if args.seed is not None else cfg.seed)
    occ = evaluate(model, occluded, args.upsample)
    for level, names in (("part", ss.PART_NAMES), ("obj", ss.OBJECT_NAMES)):
        iou_c, miou_c, acc_c, macc_c = clean[level]
        iou_o, miou_o, acc_o, macc_o = occ[level]
        ev.write_metrics_csv(
            os.path.join(out, f"{tag}_occluded_{'object' if level == 'obj' else 'part'}_metrics.csv"), names,
            {"iou_clean": iou_c, "iou_occluded": iou_o, "iou_drop": iou_c - iou_o,
             "acc_clean": acc_c, "acc_occluded": acc_o, "acc_drop": acc_c - acc_o},
            {"iou_clean": miou_c, "iou_occluded": miou_o, "iou_drop": miou_c - miou_o,
             "acc_clean": macc_c, "acc_occluded": macc_o, "acc_drop": macc_c - macc_o})
    sc, so = summary_of(clean), summary_of(occ)
    _write_rows(os.path.join(out, f"{tag}_occluded_summary.csv"), ["metric", "clean", "occluded", "drop"],
                [(k, sc[k], so[k], sc[k] - so[k]) for k in sc])
    _write_rows(os.path.join(out, "coverage.csv"), ["sample", "covered_fraction", "y0", "x0", "y1", "x1"],
                [(i, f, *box) for i, (f, box) in enumerate(coverage)])
    fr = np.array([f for f, _ in coverage])
    print(f"coverage min {fr.min():.4f} max {fr.max():.4f} mean {fr.mean():.4f}")
    for k in sc:
        print(f"{k},{sc[k]:.6f},{so[k]:.6f},{sc[k] - so[k]:.6f}")
    return 0


def occlude_samples(samples: list, data: ss.GenConfig, seed: int) -> tuple:
    """Apply the occluder protocol per sample with index-derived streams."""
    out, coverage = [], []
    for i, s in enumerate(samples):
        o = ss.apply_occlusion(s, ss.Xoshiro256ss(ss.derive_seed(seed ^ 0x0CC1, i)),
                               (data.occlusion_min, data.occlusion_max))
        out.append(o)
        coverage.append((o.occluded_fraction, o.occluder))
    return out, coverage


def _run_config_from_echo(echo: dict, path: Optional[str], seed: Optional[int]) -> RunConfig:
    if path:
        return load_run_config(path, seed)
    cfg = RunConfig.from_dict(echo.get("run", {"model": echo["model"]}))
    if seed is not None:
        cfg.set_seed(seed)
    return cfg


def emergence_maps(model: M.Model, samples: list, level: str) -> np.ndarray:
    """Argmax unit ids per image pixel: superpixel ids or composed group ids."""
    images = M.batch_arrays(samples)[0]
    h, w = model.cfg.image_h, model.cfg.image_w
    out = []
    with nx.no_grad():
        for i in range(0, len(images), 16):
            f = M.model_forward(model, images[i:i + 16])
            if level == "superpixel":
                ids = ev.argmax_assignment(f.assoc_pix_sp)
            else:
                ids = ev.pixel_group_assignment(f.assoc_pix_sp, f.assoc_sp_group)
            out.extend(upscale_nearest(m, h, w) for m in ids)
    return np.stack(out)


def topk_curve(ids: np.ndarray, gt: np.ndarray, n_classes: int, ks) -> np.ndarray:
    """``[len(ks), n_classes]`` mean oracle IoU over images where the class is present (NaN otherwise)."""
    out = np.full((len(ks), n_classes), np.nan)
    for c in range(1, n_classes):
        per_k = [[] for _ in ks]
        for m, g in zip(ids, gt):
            if not (g == c).any():
                continue
            masks = ev.unit_masks(m)
            for j, k in enumerate(ks):
                per_k[j].append(ev.oracle_topk_miou(masks, g, c, k))
        for j in range(len(ks)):
            if per_k[j]:
                out[j, c] = np.mean(per_k[j])
    return out


def cmd_emerge(args) -> int:
    level = args.level
    k = args.topk if args.topk is not None else (6 if level == "superpixel" else 10)
    if k < 1:
        raise ValidationError("--topk must be >= 1")
    out = _ensure_dir(args.out)
    if args.checkpoint:
        model, echo = _load_model(args.checkpoint)
        cfg = _run_config_from_echo(echo, args.config, args.seed)
    else:
        # unsupervised level: superpixels under object-only labels, groups under part-only labels
        cfg = load_run_config(args.config, args.seed)
        cfg.train.supervision = "object" if level == "superpixel" else "part"
        train, val = _datasets(cfg, None, None)
        model, _ = train_model(cfg, train, val, os.path.join(out, "model"))
    samples = _read_dataset(args.data) if args.data else _datasets(cfg, None, None)[1]
    samples = samples[:args.samples] if args.samples else samples
    ids = emergence_maps(model, samples, level)
    images, parts, objs = M.batch_arrays(samples)
    gt, names = (parts, ss.PART_NAMES) if level == "superpixel" else (objs, ss.OBJECT_NAMES)
    n_units = model.cmap.n_superpixels if level == "superpixel" else model.cfg.n_groups
    palette = id_palette(n_units)
    for i in range(min(len(samples), args.maps)):
        write_pgm(os.path.join(out, f"{level}_ids_{i:03d}.pgm"), ids[i])
        write_ppm(os.path.join(out, f"{level}_overlay_{i:03d}.ppm"),
                  overlay(samples[i].image, colorize(ids[i], palette)))
    ks = list(range(1, k + 1))
    curve = topk_curve(ids, gt, len(names), ks)
    ev.write_metrics_csv(os.path.join(out, f"{level}_top{k}.csv"), names[1:], {"iou": curve[-1, 1:]})
    _write_rows(os.path.join(out, f"{level}_topk_curve.csv"), ["k", "mean_iou"],
                [(kk, float(np.nanmean(curve[j, 1:]))) for j, kk in enumerate(ks)])
    print(f"{level} top-{k} oracle IoU (argmax ids, greedy union stand-in): {np.nanmean(curve[-1, 1:]):.4f}")
    return 0


DUMP_FILES = ("image.ppm", "part_pred.ppm", "obj_pred.ppm", "part_gt.ppm", "obj_gt.ppm",
              "assoc_pix_sp_max.pgm", "assoc_pix_sp_ids.pgm", "assoc_sp_group_max.pgm",
              "assoc_sp_group_ids.pgm", "chain_obj_G.ppm", "chain_obj_S.ppm", "chain_obj_I.ppm",
              "chain_part_S.ppm", "chain_part_I.ppm", "assoc_pix_sp.npy", "assoc_pix_sp_cand.npy",
              "assoc_sp_group.npy")


def cmd_dump(args) -> int:
    model, echo = _load_model(args.checkpoint)
    cfg = model.cfg
    out = _ensure_dir(args.out)
    sample = None
    if args.image:
        img = read_pnm(args.image)
        if img.ndim != 3 or img.shape[:2] != (cfg.image_h, cfg.image_w):
            raise ValidationError(f"image must be a {cfg.image_w}x{cfg.image_h} PPM")
    else:
        samples = (_read_dataset(args.data) if args.data
                   else _datasets(_run_config_from_echo(echo, args.config, args.seed), None, None)[1])
        if not 0 <= args.index < len(samples):
            raise ValidationError(f"--index {args.index} outside [0, {len(samples)})")
        sample = samples[args.index]
        img = sample.image
    with nx.no_grad():
        f = M.model_forward(model, img[None].astype(np.float64) / 255.0)
    h, w = cfg.image_h, cfg.image_w
    ih, iw = cfg.pixel_hw
    sh, sw = cfg.sp_hw
    obj_pal = OBJECT_COLORS
    part_pal = ss.PART_COLORS.astype(np.uint8)
    write_ppm(os.path.join(out, "image.ppm"), img)
    write_ppm(os.path.join(out, "part_pred.ppm"), colorize(f.part_logits.data[0].argmax(-1), part_pal))
    write_ppm(os.path.join(out, "obj_pred.ppm"), colorize(f.obj_logits.data[0].argmax(-1), obj_pal))
    if sample is not None:
        write_ppm(os.path.join(out, "part_gt.ppm"), colorize(sample.part_map, part_pal))
        write_ppm(os.path.join(out, "obj_gt.ppm"), colorize(sample.obj_map, obj_pal))
    a_pi, a_sg = f.assoc_pix_sp, f.assoc_sp_group
    w_pi = a_pi.weights.data[0]
    w_sg = a_sg.weights.data[0]
    np.save(os.path.join(out, "assoc_pix_sp.npy"), w_pi)
    np.save(os.path.join(out, "assoc_pix_sp_cand.npy"), np.where(model.cmap.cand_valid, model.cmap.cand, -1))
    np.save(os.path.join(out, "assoc_sp_group.npy"), w_sg)
    write_pgm(os.path.join(out, "assoc_pix_sp_max.pgm"),
              upscale_nearest(heatmap(w_pi.max(-1).reshape(ih, iw)), h, w))
    write_pgm(os.path.join(out, "assoc_pix_sp_ids.pgm"),
              upscale_nearest(ev.argmax_assignment(a_pi)[0].astype(np.uint8), h, w))
    write_pgm(os.path.join(out, "assoc_sp_group_max.pgm"),
              upscale_nearest(heatmap(w_sg.max(-1).reshape(sh, sw)), h, w))
    write_pgm(os.path.join(out, "assoc_sp_group_ids.pgm"),
              upscale_nearest(w_sg.argmax(-1).reshape(sh, sw).astype(np.uint8), h, w))
    gh, gw = cfg.group_hw
    ch = f.chain
    write_ppm(os.path.join(out, "chain_obj_G.ppm"),
              upscale_nearest(colorize(ch["obj_G"].data[0].argmax(-1).reshape(gh, gw), obj_pal), h, w))
    write_ppm(os.path.join(out, "chain_obj_S.ppm"),
              upscale_nearest(colorize(ch["obj_S"].data[0].argmax(-1), obj_pal), h, w))
    write_ppm(os.path.join(out, "chain_obj_I.ppm"),
              upscale_nearest(colorize(ch["obj_I"].data[0].argmax(-1), obj_pal), h, w))
    write_ppm(os.path.join(out, "chain_part_S.ppm"),
              upscale_nearest(colorize(ch["part_S"].data[0].argmax(-1), part_pal), h, w))
    write_ppm(os.path.join(out, "chain_part_I.ppm"),
              upscale_nearest(colorize(ch["part_I"].data[0].argmax(-1), part_pal), h, w))
    print(f"wrote {len(os.listdir(out))} files to {out}")
    return 0


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lgseg", description="Hierarchical pixel/superpixel/group segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON run config (sections: seed, model, data, train)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("gen", help="write a synthetic dataset file")
    common(g, "dataset file to write")
    g.add_argument("--count", type=int, default=100, help="number of samples (default 100)")
    g.add_argument("--start", type=int, default=0, help="first sample index in the seeded stream")
    g.add_argument("--occlude", action="store_true", help="apply the occluder to every sample")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write logs, metrics and a checkpoint")
    common(t, "output directory")
    t.add_argument("--train", help="training dataset file (default: generate from config)")
    t.add_argument("--val", help="validation dataset file (default: generate from config)")
    t.add_argument("--iterations", type=int, help="override train.iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, "output directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset file (default: the run's validation set)")
    e.add_argument("--occlude", action="store_true", help="also evaluate with occluders and report drops")
    e.add_argument("--upsample", choices=M.UPSAMPLE_MODES, default="assoc")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("emerge", help="argmax association maps and oracle top-k IoU")
    common(m, "output directory")
    m.add_argument("--checkpoint", help="single-supervision checkpoint (default: train one)")
    m.add_argument("--data", help="dataset file (default: the run's validation set)")
    m.add_argument("--level", choices=("superpixel", "group"), default="superpixel")
    m.add_argument("--topk", type=int, help="units per class (default 6 superpixels / 10 groups)")
    m.add_argument("--samples", type=int, default=0, help="limit evaluated samples (0 = all)")
    m.add_argument("--maps", type=int, default=8, help="number of id maps / overlays to write")
    m.set_defaults(func=cmd_emerge)

    d = sub.add_parser("dump", help="predictions, association maps and the upsampling chain for one image")
    common(d, "output directory")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", help="dataset file (default: the run's validation set)")
    d.add_argument("--index", type=int, default=0, help="sample index in the dataset")
    d.add_argument("--image", help="PPM image instead of a dataset sample")
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, M.ConfigError) as exc:
        print(f"lgseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except M.TrainingDiverged as exc:
        print(f"lgseg {args.command}: training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"lgseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
