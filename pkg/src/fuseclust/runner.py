"""Training orchestration: config, model assembly, Adam, the epoch loop,
checkpoint I/O, evaluation, attention export, gradient audit, and the
attention cost/memory model."""

import json
import math
import os
import struct
import time
from dataclasses import dataclass, fields, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, ShapeError
from .clipfeat import (FEATURE_DIM, AnchorBank, FeatureTable, FormatError,
                       insert_clip_token, read_table, synthetic_features)
from .encoder import MFAVBsParams, mfavbs_forward, mfavbs_stage
from .heads import ProjectorParams, cluster_assignment, predict_clusters, total_loss
from .metrics import compute_metrics
from .pipeline import (AugmentationConfig, DatasetError, InputError, StemParams,
                       add_positional, augment_pair, bilinear_resize, conv_stem,
                       mask_image, write_pgm)
from .rng import stream, truncated_normal


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    side: int = 32
    n_convs: int = 3
    embed: int = 64
    heads: int = 4
    n_stages: int = 4
    k: int = 4
    d_instance: int = 128
    batch: int = 32
    epochs: int = 100
    patience: int = 20
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    tau_i: float = 0.5
    tau_c: float = 1.0
    penalty_weight: float = 1.0
    seed: int = 0
    clip_fusion: bool = False
    feature_file: str = ""
    feature_class_sep: float = 1.0
    feature_noise: float = 0.1
    mask_fraction: float = 0.0
    crop_min: float = 0.08
    p_jitter: float = 0.8
    p_grayscale: float = 0.2
    p_hflip: float = 0.5
    p_blur: float = 0.5
    p_solarize: float = 0.2
    fresh_views: bool = False
    strict_denominator: bool = False
    rowwise_cluster: bool = False
    cluster_rescue: bool = True

    @classmethod
    def large(cls, **overrides):
        """Full-scale reference configuration."""
        base = dict(side=224, n_convs=4, embed=512, heads=8, n_stages=4,
                    batch=128, epochs=500)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.batch < 2:
            raise ContractError(f"batch must be >= 2, got {self.batch}")
        if self.epochs < 1 or self.patience < 1:
            raise ContractError("epochs and patience must be >= 1")
        if self.k < 2:
            raise ContractError(f"k must be >= 2, got {self.k}")
        if self.d_instance < 2:
            raise ContractError("d_instance must be >= 2")
        if self.embed % self.heads != 0:
            raise ContractError(
                f"heads {self.heads} must divide embed {self.embed}")
        if self.n_stages < 0:
            raise ContractError("n_stages must be >= 0")
        if self.side % (2 ** self.n_convs) != 0:
            raise ContractError(
                f"side {self.side} not divisible by stride {2 ** self.n_convs}")
        if self.tau_i <= 0 or self.tau_c <= 0:
            raise ContractError("temperatures must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be >= 0")
        if self.mask_fraction != 0.0 and not 0.3 <= self.mask_fraction <= 0.5:
            raise ContractError(
                f"mask_fraction must be 0 (off) or in [0.3, 0.5], "
                f"got {self.mask_fraction}")
        if not 0.0 < self.crop_min <= 1.0:
            raise ContractError(f"crop_min must be in (0, 1], got {self.crop_min}")
        for name in ("p_jitter", "p_grayscale", "p_hflip", "p_blur",
                     "p_solarize"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must be in [0, 1], got {v}")
        return self

    def augmentation(self):
        return AugmentationConfig(out_side=self.side,
                                  crop_scale_min=self.crop_min,
                                  p_colorjitter=self.p_jitter,
                                  p_grayscale=self.p_grayscale,
                                  p_hflip=self.p_hflip,
                                  p_blur=self.p_blur,
                                  p_solarize=self.p_solarize)

    def serialize(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"


def parse_config(text):
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key=value, "
                                f"got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        typ = known[key]
        if typ is bool:
            if val.lower() in ("true", "1"):
                values[key] = True
            elif val.lower() in ("false", "0"):
                values[key] = False
            else:
                raise ContractError(
                    f"config line {lineno}: {key} must be true/false")
        elif typ is int:
            values[key] = int(val)
        elif typ is float:
            values[key] = float(val)
        else:
            values[key] = val
    return TrainConfig(**values)


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as e:
        raise InputError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

class ClusterModel:
    """Conv stem + positional table + stacked fuse/split encoder + the two
    projection heads, with optional per-image feature anchors."""

    def __init__(self, cfg, dataset_ids=None, feature_table=None,
                 dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        patches = (cfg.side // (2 ** cfg.n_convs)) ** 2
        max_tokens = patches + 2 if cfg.clip_fusion else patches + 1
        self.stem = StemParams(cfg.side, cfg.n_convs, cfg.embed,
                               max_tokens, cfg.seed, dtype=dtype)
        self.encoder = MFAVBsParams(cfg.embed, cfg.heads, cfg.n_stages,
                                    cfg.seed, dtype=dtype)
        self.inst = ProjectorParams(cfg.embed, cfg.d_instance, cfg.seed,
                                    tag="inst", dtype=dtype)
        self.clus = ProjectorParams(cfg.embed, cfg.k, cfg.seed,
                                    tag="clus", dtype=dtype)
        self.projection = None
        self.bank = None
        if cfg.clip_fusion:
            if feature_table is None or dataset_ids is None:
                raise ContractError(
                    "clip_fusion requires a feature table and the dataset ids")
            self.bank = AnchorBank(feature_table, dataset_ids, dtype=dtype)
            if cfg.embed != FEATURE_DIM:
                rng = stream(cfg.seed, "clipproj")
                self.projection = (
                    ad.parameter(
                        truncated_normal(rng, (FEATURE_DIM, cfg.embed),
                                         dtype=dtype),
                        name="clip.proj.w"),
                    ad.parameter(np.zeros(cfg.embed, dtype=dtype),
                                 name="clip.proj.b"))

    def parameters(self):
        ps = (self.stem.parameters() + self.encoder.parameters()
              + self.inst.parameters() + self.clus.parameters())
        if self.projection is not None:
            ps += list(self.projection)
        if self.bank is not None:
            ps.append(self.bank.param)
        names = [p.name for p in ps]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names in census")
        return ps

    def embed_view(self, images, batch_ids=None):
        tokens = conv_stem(images, self.stem)
        if self.cfg.clip_fusion:
            tokens = insert_clip_token(tokens, self.bank.gather(batch_ids),
                                       self.projection)
        return add_positional(tokens, self.stem.pos)

    def encode(self, images_a, images_b, batch_ids=None, collect_attn=False):
        ya = self.embed_view(images_a, batch_ids)
        yb = self.embed_view(images_b, batch_ids)
        return mfavbs_forward(ya, yb, self.encoder,
                              clip_fusion_enabled=self.cfg.clip_fusion,
                              collect_attn=collect_attn)

    def loss(self, ha, hb):
        cfg = self.cfg
        return total_loss(ha, hb, self.inst, self.clus, cfg.tau_i, cfg.tau_c,
                          include_positive=not cfg.strict_denominator,
                          rowwise_cluster=cfg.rowwise_cluster,
                          penalty_weight=cfg.penalty_weight)


def build_feature_table(cfg, dataset):
    """Resolve the configured feature source; None when fusion is off."""
    if not cfg.clip_fusion:
        return None
    if cfg.feature_file:
        return read_table(cfg.feature_file)
    return synthetic_features(dataset.labels.tolist(),
                              class_sep=cfg.feature_class_sep,
                              noise=cfg.feature_noise,
                              seed=cfg.seed, ids=dataset.ids)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay (plain Adam at the 0.0 default)."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay > 0.0:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()},
                "step": self.step_count}

    def load_state(self, state):
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
        self.step_count = int(state["step"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    params: dict
    opt_state: dict
    epoch: int
    best_loss: float


def _batch_views(dataset, idx, cfg, aug, epoch, dtype):
    # default: view randomness keyed by the sample index alone, so a
    # frozen model sees identical views every epoch; fresh_views re-keys
    # by epoch, which adds the gradient noise plateau escapes need
    n = len(dataset)
    va, vb = [], []
    for j in idx:
        key = (epoch - 1) * n + j if cfg.fresh_views else j
        img = dataset.images[j]
        if cfg.mask_fraction > 0.0:
            # masking is the pre-augmentation stage of the view pipeline,
            # so it follows the view keying: fixed per image by default,
            # redrawn each epoch under fresh_views (any occlusion frozen
            # across epochs turns into a spurious cluster cue; a wandering
            # one averages out and the heads learn to ignore it)
            img = mask_image(img, cfg.mask_fraction, cfg.seed, index=key)
        a, b = augment_pair(img, aug, cfg.seed, index=key)
        va.append(a)
        vb.append(b)
    xa = np.stack(va).transpose(0, 3, 1, 2).astype(dtype)
    xb = np.stack(vb).transpose(0, 3, 1, 2).astype(dtype)
    ids = [dataset.ids[j] for j in idx] if cfg.clip_fusion else None
    return ad.constant(xa), ad.constant(xb), ids


def _rescue_cluster(clus, opt, usage, seed, epoch):
    """Reseed the least-used cluster column on top of the dominant one with
    a small seeded perturbation, and clear the two slots' Adam moments. The
    near-identical columns make the strongest possible negative pair, so the
    column contrast itself drives them apart along whatever structure the
    dominant cluster was hiding."""
    dead = int(np.argmin(usage))
    top = int(np.argmax(usage))
    w2, b2 = clus.w2, clus.b2
    rng = stream(seed, "rescue", epoch)
    scale = max(0.05 * float(np.std(w2.data[:, top])), 1e-3)
    w2.data[:, dead] = (w2.data[:, top]
                        + scale * rng.standard_normal(
                            w2.data.shape[0]).astype(w2.data.dtype))
    b2.data[dead] = b2.data[top]
    for state in (opt.m, opt.v):
        state[w2.name][:, dead] = 0.0
        state[b2.name][dead] = 0.0
    return dead


def train(cfg, dataset, feature_table=None, log_file=None):
    """Run the full loop; returns (Checkpoint at the best epoch, log list)."""
    cfg.validate()
    if len(dataset) == 0:
        raise DatasetError("dataset is empty")
    if cfg.clip_fusion and feature_table is None:
        feature_table = build_feature_table(cfg, dataset)
    # a missing feature id aborts here, before any training step
    model = ClusterModel(cfg, dataset.ids, feature_table, dtype=np.float32)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               weight_decay=cfg.weight_decay)
    aug = cfg.augmentation()
    n = len(dataset)

    log = []
    sink = open(log_file, "w", encoding="utf-8") if log_file else None
    best_loss = math.inf
    best_epoch = 0
    best_params = None
    best_opt = None
    epochs_since_best = 0
    rescues_left = 2 * cfg.k if cfg.cluster_rescue else 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = stream(cfg.seed, "shuffle", epoch).permutation(n)
            sums = dict.fromkeys(
                ("li_a", "li_b", "lc_a", "lc_b", "penalty", "total"), 0.0)
            usage = np.zeros(cfg.k)
            steps = 0
            for start in range(0, n, cfg.batch):
                idx = order[start:start + cfg.batch]
                if idx.size < 2:
                    continue        # a 1-sample tail has no negatives
                xa, xb, ids = _batch_views(dataset, idx, cfg, aug, epoch,
                                           np.float32)
                try:
                    with ad.Tape() as tape:
                        ha, hb, _ = model.encode(xa, xb, ids)
                        rep = model.loss(ha, hb)
                    total = rep.total.item()
                    if not math.isfinite(total):
                        raise NumericError(f"non-finite total loss {total}")
                    opt.zero_grad()
                    tape.backward(rep.total)
                    opt.step()
                except NumericError as e:
                    raise NumericError(
                        f"epoch {epoch} step {steps}: {e}") from None
                for key, val in rep.components().items():
                    sums[key] += val
                usage += rep.usage
                steps += 1
            if steps == 0:
                raise DatasetError(
                    f"dataset of {n} samples yields no batch of >= 2")
            usage /= steps
            entry = {"epoch": epoch}
            entry.update({k: sums[k] / steps for k in
                          ("li_a", "li_b", "lc_a", "lc_b", "penalty", "total")})
            entry["usage"] = [round(float(u), 4) for u in usage]
            stop = False
            if entry["total"] < best_loss:
                best_loss = entry["total"]
                best_epoch = epoch
                best_params = {p.name: p.data.copy() for p in params}
                best_opt = opt.state()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.patience:
                    # rescue instead of giving up: a converged solution
                    # with one starved cluster next to >= 2 established
                    # ones is the stable merged minimum of the column
                    # contrast (the balance penalty can be paid with soft
                    # rows and never revives a dead argmax). Reseed the
                    # starved column and grant a fresh patience window;
                    # runs that never exhaust patience are untouched, and
                    # k=2 can never pass the two-established gate
                    if (rescues_left > 0
                            and float(usage.min()) < 0.1 / cfg.k
                            and int((usage >= 0.5 / cfg.k).sum()) >= 2):
                        rescues_left -= 1
                        entry["rescue"] = _rescue_cluster(
                            model.clus, opt, usage, cfg.seed, epoch)
                        # losses before and after the reseed are not
                        # comparable: restart the best-checkpoint race
                        best_loss = math.inf
                        epochs_since_best = 0
                    else:
                        stop = True
            entry["seconds"] = time.perf_counter() - t0
            log.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            if stop:
                break
    finally:
        if sink:
            sink.close()
    for p in params:
        p.data[...] = best_params[p.name]
    ckpt = Checkpoint(version=CKPT_VERSION, config=cfg,
                      params={p.name: p.data.copy() for p in params},
                      opt_state=best_opt, epoch=best_epoch,
                      best_loss=best_loss)
    return ckpt, log


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(model, dataset, batch=None):
    """Cluster indices from one deterministic resize-only view per image."""
    cfg = model.cfg
    bsz = batch or cfg.batch
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), bsz):
        idx = range(start, min(start + bsz, len(dataset)))
        views = [bilinear_resize(dataset.images[i], cfg.side, cfg.side)
                 for i in idx]
        x = ad.constant(np.stack(views).transpose(0, 3, 1, 2)
                        .astype(model.dtype))
        ids = [dataset.ids[i] for i in idx] if cfg.clip_fusion else None
        y = model.embed_view(x, ids)
        h, _, _ = mfavbs_forward(y, y, model.encoder,
                                 clip_fusion_enabled=cfg.clip_fusion)
        c = cluster_assignment(h, model.clus)
        preds[list(idx)] = predict_clusters(c.data)
    return preds


def evaluate(model, dataset, batch=None):
    if dataset.labels is None or len(dataset.labels) != len(dataset):
        raise InputError("dataset has no usable labels")
    return compute_metrics(predict(model, dataset, batch), dataset.labels)


def model_from_checkpoint(ckpt, dataset=None, dtype=np.float32):
    cfg = ckpt.config
    table = None
    ids = None
    if cfg.clip_fusion:
        if dataset is None:
            raise ContractError(
                "restoring a fusion model requires the dataset for its ids")
        anchors = ckpt.params.get("anchors")
        if anchors is None:
            raise FormatError("checkpoint has no anchor records")
        if anchors.shape[0] != len(dataset.ids):
            raise InputError(
                f"checkpoint has {anchors.shape[0]} anchors, dataset has "
                f"{len(dataset.ids)} images")
        table = FeatureTable(anchors.astype(np.float32), dataset.ids)
        ids = dataset.ids
    model = ClusterModel(cfg, ids, table, dtype=dtype)
    census = {p.name: p for p in model.parameters()}
    extra = sorted(set(ckpt.params) - set(census))
    missing = sorted(set(census) - set(ckpt.params))
    if extra or missing:
        raise FormatError(f"checkpoint/config mismatch: extra {extra[:3]}, "
                          f"missing {missing[:3]}")
    for name, p in census.items():
        saved = ckpt.params[name]
        if tuple(saved.shape) != tuple(p.data.shape):
            raise FormatError(
                f"record {name}: shape {saved.shape} != {p.data.shape}")
        p.data[...] = saved.astype(dtype)
    return model


def evaluate_checkpoint(path, dataset, batch=None):
    model = model_from_checkpoint(load_checkpoint(path), dataset)
    return evaluate(model, dataset, batch)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MFCK"
CKPT_VERSION = 1


def _pack_record(name, arr):
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise ContractError(f"record name too long: {name!r}")
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise ContractError(f"record {name}: payload must be float32, "
                            f"got {arr.dtype}")
    if arr.ndim > 0xFF:
        raise ContractError(f"record {name}: rank {arr.ndim} too large")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return head + payload


def save_checkpoint(path, ckpt):
    records = dict(ckpt.params)
    if ckpt.opt_state is not None:
        for name, arr in ckpt.opt_state["m"].items():
            records[f"opt.m.{name}"] = arr
        for name, arr in ckpt.opt_state["v"].items():
            records[f"opt.v.{name}"] = arr
        records["opt.step"] = np.float32(ckpt.opt_state["step"])
    records["meta.epoch"] = np.float32(ckpt.epoch)
    records["meta.best_loss"] = np.float32(ckpt.best_loss)
    config_text = ckpt.config.serialize().encode("utf-8")
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", ckpt.version)
    blob += struct.pack("<I", len(config_text)) + config_text
    blob += struct.pack("<I", len(records))
    for name, arr in records.items():
        blob += _pack_record(name, arr)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def checkpoint_size(ckpt):
    """Exact on-disk byte count without writing."""
    total = 4 + 4 + 4 + len(ckpt.config.serialize().encode("utf-8")) + 4
    names = list(ckpt.params)
    extras = []
    if ckpt.opt_state is not None:
        extras = ([f"opt.m.{n}" for n in ckpt.opt_state["m"]]
                  + [f"opt.v.{n}" for n in ckpt.opt_state["v"]]
                  + ["opt.step"])
    for name in names + extras + ["meta.epoch", "meta.best_loss"]:
        if name.startswith("opt.m."):
            arr = ckpt.opt_state["m"][name[6:]]
        elif name.startswith("opt.v."):
            arr = ckpt.opt_state["v"][name[6:]]
        elif name in ("opt.step", "meta.epoch", "meta.best_loss"):
            arr = np.float32(0.0)
        else:
            arr = ckpt.params[name]
        arr = np.asarray(arr)
        total += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim
        total += 4 * arr.size
    return total


class _Cursor:
    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated at offset {self.off}, "
                f"need {n} more bytes")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise InputError(f"{path}: {e}") from None
    cur = _Cursor(buf, path)
    if cur.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version = cur.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, "
                          f"this build reads version {CKPT_VERSION}")
    config_text = cur.take(cur.u32()).decode("utf-8")
    cfg = parse_config(config_text)
    n_records = cur.u32()
    records = {}
    for _ in range(n_records):
        name = cur.take(cur.u16()).decode("utf-8")
        rank = cur.u8()
        shape = tuple(cur.u32() for _ in range(rank))
        count = 1
        for d in shape:
            count *= d
        arr = np.frombuffer(cur.take(4 * count), dtype="<f4").reshape(shape)
        records[name] = arr.copy()
    if cur.off != len(buf):
        raise FormatError(f"{path}: {len(buf) - cur.off} trailing bytes")
    params = {}
    opt = {"m": {}, "v": {}, "step": 0}
    epoch, best_loss = 0, math.inf
    has_opt = False
    for name, arr in records.items():
        if name.startswith("opt.m."):
            opt["m"][name[6:]] = arr
            has_opt = True
        elif name.startswith("opt.v."):
            opt["v"][name[6:]] = arr
            has_opt = True
        elif name == "opt.step":
            opt["step"] = int(arr)
            has_opt = True
        elif name == "meta.epoch":
            epoch = int(arr)
        elif name == "meta.best_loss":
            best_loss = float(arr)
        else:
            params[name] = arr
    return Checkpoint(version=version, config=cfg, params=params,
                      opt_state=opt if has_opt else None,
                      epoch=epoch, best_loss=best_loss)


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def export_attention(model, image, out_dir, image_id=None):
    """Head-averaged final-stage attention: branch maps (T x T) and the
    fused map (2T x 2T), each as raw CSV and min-max normalized PGM."""
    cfg = model.cfg
    if cfg.n_stages < 1:
        raise ContractError("model has no fusion stage to export")
    if cfg.clip_fusion and image_id is None:
        raise ContractError("fusion model needs the image id for its anchor")
    os.makedirs(out_dir, exist_ok=True)
    view = bilinear_resize(np.asarray(image, dtype=np.float64),
                           cfg.side, cfg.side)
    x = ad.constant(view[None].transpose(0, 3, 1, 2).astype(model.dtype))
    y = model.embed_view(x, [image_id] if cfg.clip_fusion else None)
    _, _, attn = mfavbs_forward(y, y, model.encoder,
                                clip_fusion_enabled=cfg.clip_fusion,
                                collect_attn=True)
    written = []
    for name, tens in attn[-3:]:
        short = name.split(".", 1)[1]
        mat = tens.data.mean(axis=1)[0]
        csv_path = os.path.join(out_dir, f"{short}.csv")
        pgm_path = os.path.join(out_dir, f"{short}.pgm")
        try:
            np.savetxt(csv_path, mat, delimiter=",", fmt="%.8e")
            write_pgm(pgm_path, mat)
        except OSError as e:
            raise InputError(f"{out_dir}: {e}") from None
        written += [csv_path, pgm_path]
    return written


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def attention_work(tokens, embed):
    """Attention-score multiply-adds for one block pass: T'^2 * E."""
    return int(tokens) * int(tokens) * int(embed)


def attention_memory(batch, heads, tokens):
    """Float32 score storage for one block pass: B * h * T'^2 * 4 bytes."""
    return int(batch) * int(heads) * int(tokens) * int(tokens) * 4


def mfavbs_schedule(n_stages, tokens, count_shared_once=False):
    """Per-stage: shared block on each branch at T, fused block at 2T.
    ``count_shared_once`` counts the weight-shared branch pass once."""
    branch = n_stages if count_shared_once else 2 * n_stages
    return [(branch, tokens), (n_stages, 2 * tokens)]


def baseline_schedule(n_stages, tokens):
    """Fusion-free twin encoder of equal depth: 2 branches x 2N blocks."""
    return [(2 * 2 * n_stages, tokens)]


@dataclass
class CostReport:
    embed: int
    batch: int
    heads: int
    work_rows: list          # (count, tokens, count * tokens^2 * embed)
    total_work: int
    memory_rows: list        # (count, tokens, batch * heads * tokens^2 * 4)
    max_pass_memory: int

    def to_text(self):
        lines = [f"embed={self.embed} batch={self.batch} heads={self.heads}"]
        for count, tokens, work in self.work_rows:
            lines.append(f"passes={count} tokens={tokens} work={work}")
        lines.append(f"total_work={self.total_work}")
        for count, tokens, mem in self.memory_rows:
            lines.append(f"passes={count} tokens={tokens} "
                         f"bytes_per_pass={mem}")
        lines.append(f"max_pass_memory={self.max_pass_memory}")
        return "\n".join(lines) + "\n"


def cost_model(passes, embed, batch, heads):
    """passes: list of (count, tokens). All arithmetic in exact ints."""
    for count, tokens in passes:
        if count < 0 or tokens < 1:
            raise ContractError(f"bad pass entry ({count}, {tokens})")
    if embed < 1 or batch < 1 or heads < 1:
        raise ContractError("dims must be positive")
    work_rows = [(c, t, c * attention_work(t, embed)) for c, t in passes]
    memory_rows = [(c, t, attention_memory(batch, heads, t))
                   for c, t in passes]
    return CostReport(
        embed=embed, batch=batch, heads=heads,
        work_rows=work_rows,
        total_work=sum(w for _, _, w in work_rows),
        memory_rows=memory_rows,
        max_pass_memory=max((m for _, _, m in memory_rows), default=0),
    )


@dataclass
class ScheduleComparison:
    baseline: CostReport
    fused_both: CostReport
    fused_shared_once: CostReport
    ratio_both: Fraction
    ratio_shared_once: Fraction

    def to_text(self):
        lines = [
            "baseline (twin encoder, every pass counted):",
            self.baseline.to_text().rstrip(),
            "fused schedule, both branch passes counted:",
            self.fused_both.to_text().rstrip(),
            f"overhead_ratio={self.ratio_both} "
            f"(+{float(self.ratio_both - 1) * 100:g}%)",
            "fused schedule, weight-shared branch pass counted once:",
            self.fused_shared_once.to_text().rstrip(),
            f"overhead_ratio={self.ratio_shared_once} "
            f"(+{float(self.ratio_shared_once - 1) * 100:g}%)",
        ]
        if self.ratio_shared_once == Fraction(5, 4):
            lines.append("the 25% overhead figure corresponds to counting "
                         "the weight-shared branch pass once")
        return "\n".join(lines) + "\n"


def compare_schedules(n_stages, tokens, embed, batch, heads):
    if n_stages < 1:
        raise ContractError("comparison needs n_stages >= 1")
    base = cost_model(baseline_schedule(n_stages, tokens), embed, batch, heads)
    both = cost_model(mfavbs_schedule(n_stages, tokens), embed, batch, heads)
    once = cost_model(mfavbs_schedule(n_stages, tokens, count_shared_once=True),
                      embed, batch, heads)
    return ScheduleComparison(
        baseline=base, fused_both=both, fused_shared_once=once,
        ratio_both=Fraction(both.total_work, base.total_work),
        ratio_shared_once=Fraction(once.total_work, base.total_work),
    )


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict          # name -> max relative error
    max_rel: float
    n_scalars: int
    seconds: float
    redraws: int = 0
    relu_clearance: float = 0.0

    def worst(self, count=5):
        return sorted(self.per_param.items(), key=lambda kv: -kv[1])[:count]

    def to_text(self):
        lines = [f"scalars={self.n_scalars} seconds={self.seconds:.1f}",
                 f"audit_redraws={self.redraws} "
                 f"relu_clearance={self.relu_clearance:.2e}",
                 f"max_rel_error={self.max_rel:.3e}"]
        for name, err in self.worst():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines) + "\n"


def check_grad(batch=4, side=16, n_convs=3, embed=16, heads=2, n_stages=2,
               k=3, d_instance=8, fusion=False, seed=0, fd_step=1e-5,
               floor=1e-6, max_redraws=50):
    """Audit every parameter gradient of the total loss against 64-bit
    central differences on a small synthetic batch.

    Central differences at step h are only valid where the loss is smooth
    over the whole [x-h, x+h] interval. The training init concentrates
    ReLU pre-activations near the kink, so the audit point is redrawn
    from a wider distribution until every ReLU input clears the kink by a
    safe multiple of h; the clearance found is recorded in the report.

    Stage-boundary activations do not depend on the parameters of later
    stages, so each parameter group's finite differences re-run only the
    pipeline tail from that group's cached boundary. Identical ops on
    identical inputs give identical floats, which is verified against the
    full forward before the sweep.
    """
    from .pipeline import gen_synthetic

    cfg = TrainConfig(side=side, n_convs=n_convs, embed=embed, heads=heads,
                      n_stages=n_stages, k=k, d_instance=d_instance,
                      batch=batch, epochs=1, seed=seed, clip_fusion=fusion)
    cfg.validate()
    data = gen_synthetic(k, -(-batch // k), side, sigma=0.05, seed=seed)
    images = data.images[:batch]
    ids = data.ids[:batch]
    labels = data.labels[:batch].tolist()
    table = synthetic_features(labels, seed=seed, ids=ids) if fusion else None
    model = ClusterModel(cfg, ids if fusion else None, table,
                         dtype=np.float64)
    aug = AugmentationConfig(out_side=side)
    va, vb = [], []
    for i, img in enumerate(images):
        a, b = augment_pair(img, aug, seed, index=i)
        va.append(a)
        vb.append(b)
    xa = ad.constant(np.stack(va).transpose(0, 3, 1, 2).astype(np.float64))
    xb = ad.constant(np.stack(vb).transpose(0, 3, 1, 2).astype(np.float64))
    batch_ids = ids if fusion else None

    t0 = time.perf_counter()
    params = model.parameters()
    init = {p.name: p.data.copy() for p in params}
    clearance_floor = 20.0 * fd_step
    clearance = 0.0
    redraws = 0
    tape = rep = None
    for attempt in range(max_redraws):
        for p in params:
            rng = stream(seed, "audit", attempt, p.name)
            std = 0.25 if p.data.ndim >= 2 else 0.05
            p.data = init[p.name] + truncated_normal(
                rng, p.data.shape, std=std, dtype=np.float64)
        with ad.Tape() as tape:
            ha, hb, _ = model.encode(xa, xb, batch_ids)
            rep = model.loss(ha, hb)
        clearance = min((float(np.abs(r.inputs[0].data).min())
                         for r in tape.records if r.name == "relu"),
                        default=float("inf"))
        redraws = attempt
        if clearance > clearance_floor:
            break
    else:
        raise ad.NumericError(
            f"no audit point with ReLU clearance above {clearance_floor:g} "
            f"in {max_redraws} redraws")

    for p in params:
        p.zero_grad()
    tape.backward(rep.total)

    # prefix states, computed once at the audit point
    enc = model.encoder
    a = model.embed_view(xa, batch_ids)
    b = model.embed_view(xb, batch_ids)
    bounds = []
    for i in range(n_stages):
        bounds.append((a, b))
        a, b, _ = mfavbs_stage(a, b, enc.shared[i], enc.fused[i])
    bounds.append((a, b))        # entering the final LayerNorm
    hca, hcb, _ = mfavbs_forward(a, b, enc, clip_fusion_enabled=fusion,
                                 start_stage=n_stages)

    def eval_full():
        h1, h2, _ = model.encode(xa, xb, batch_ids)
        return model.loss(h1, h2).total.item()

    def eval_from_stage(i):
        a0, b0 = bounds[i]

        def run():
            h1, h2, _ = mfavbs_forward(a0, b0, enc, clip_fusion_enabled=fusion,
                                       start_stage=i)
            return model.loss(h1, h2).total.item()
        return run

    def eval_heads():
        return model.loss(hca, hcb).total.item()

    stage_evals = [eval_from_stage(i) for i in range(n_stages + 1)]

    def evaluator(name):
        for i in range(n_stages):
            if name.startswith((f"enc.shared{i}.", f"enc.fused{i}.")):
                return stage_evals[i]
        if name.startswith("enc.final_"):
            return stage_evals[n_stages]
        if name.startswith(("inst.", "clus.")):
            return eval_heads
        return eval_full         # stem, positional, clip projection, anchors

    base_val = eval_full()
    for fn in stage_evals + [eval_heads]:
        if fn() != base_val:
            raise ad.NumericError(
                "cached tail diverges from the full forward")

    per_param = {}
    n_scalars = 0
    for p in params:
        fn = evaluator(p.name)
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            up = fn()
            flat[i] = orig - fd_step
            dn = fn()
            flat[i] = orig
            fd[i] = (up - dn) / (2.0 * fd_step)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), floor)
        per_param[p.name] = float((np.abs(grad - fd) / denom).max())
        n_scalars += flat.size
    return GradCheckReport(per_param=per_param,
                           max_rel=max(per_param.values()),
                           n_scalars=n_scalars,
                           seconds=time.perf_counter() - t0,
                           redraws=redraws,
                           relu_clearance=clearance)
