"""Auto-decoder training: stage 1 (base model), stage 2 (detail), latent fitting, checkpoints.

Randomness is derived per epoch and per step from the master seed, so a run
resumed from any checkpoint replays exactly the batches of an uninterrupted run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .diffcore import Adam, CheckpointError, NumericError, Tensor, backward
from .diffcore import ops as T
from .diffcore.serialize import dumps_tensors, loads_tensors
from .geomprep import ScanRecord
from .losses import Batch, LossWeights, stage1_terms, stage2_terms, stage_weights, total
from .model import ImFaceModel, LatentCodes, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TERM_KEYS = ("sdf", "eik", "emb", "res", "lmk_g", "lmk_c", "imp")


class TrainingError(NumericError):
    """Training produced a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, msg: str, checkpoint: Path | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    points_per_scan: int = 512
    dense_points: int = 512
    lr: float = 1e-4
    lr_final: float | None = None  # log-linear decay to this value over each stage; None keeps lr constant
    seed: int = 0
    t_m: float = 0.7
    literal_kappa: bool = False
    consistency: bool = True
    emb_init_std: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0
    max_steps: int | None = None
    base_log_every: int = 1
    fit_steps: int = 300
    fit_lr: float = 1e-3
    fit_points: int = 1024

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        elif isinstance(self.weights, (list, tuple)):
            self.weights = LossWeights.from_list(self.weights)
        for name in ("epochs", "batch_size", "points_per_scan", "fit_steps", "fit_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("dense_points", "checkpoint_every", "base_log_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.t_m < 1.0:
            raise ValueError("t_m must lie in [0, 1)")
        if not self.lr > 0 or not self.fit_lr > 0 or not (self.lr_final is None or self.lr_final > 0):
            raise ValueError("learning rates must be positive")

    @property
    def stage1_epochs(self) -> int:
        """Stage 1 covers training progress ``t < T_m``; stage 2 the rest."""
        return max(1, round(self.t_m * self.epochs))

    @property
    def stage2_epochs(self) -> int:
        return self.epochs - self.stage1_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# -- data ----------------------------------------------------------------------------

@dataclass
class TrainingSet:
    """Scan records regrouped for batching; geometry kept in millimetres."""

    records: list[ScanRecord]
    identities: list[str]
    scan_identity: np.ndarray
    neutral_of: np.ndarray  # identity -> index of its neutral scan

    @classmethod
    def from_records(cls, records: list[ScanRecord]) -> TrainingSet:
        if not records:
            raise DataError("empty dataset")
        identities = sorted({r.identity for r in records})
        pos = {name: i for i, name in enumerate(identities)}
        scan_identity = np.array([pos[r.identity] for r in records])
        neutral_of = np.full(len(identities), -1)
        for s, r in enumerate(records):
            if r.is_neutral and neutral_of[pos[r.identity]] < 0:
                neutral_of[pos[r.identity]] = s
        missing = [identities[i] for i in np.flatnonzero(neutral_of < 0)]
        if missing:
            raise DataError(f"identities without a neutral scan: {missing[:5]}")
        k = {r.k for r in records}
        if len(k) != 1:
            raise DataError(f"inconsistent landmark counts {sorted(k)}")
        m = {len(r.dense) for r in records}
        if len(m) != 1:
            raise DataError("inconsistent dense landmark counts")
        return cls(records, identities, scan_identity, neutral_of)

    @property
    def n_scans(self) -> int:
        return len(self.records)

    def template_landmarks(self) -> np.ndarray:
        return np.mean([self.records[s].landmarks for s in self.neutral_of], axis=0)

    def template_dense(self) -> np.ndarray:
        return np.mean([self.records[s].dense for s in self.neutral_of], axis=0)

    def batch(self, idx: np.ndarray, n_points: int, m_dense: int, template_dense: np.ndarray,
              rng: np.random.Generator, scale: float) -> Batch:
        pts, sdf, nrm, lm, lmn, dense, densen = [], [], [], [], [], [], []
        m_total = len(self.records[0].dense)
        dsel = (np.sort(rng.choice(m_total, size=min(m_dense, m_total), replace=False))
                if m_total and m_dense else None)
        for s in idx:
            r = self.records[s]
            t = r.triplets
            sel = rng.choice(len(t), size=n_points, replace=len(t) < n_points)
            pts.append(t.points[sel])
            sdf.append(t.sdf[sel])
            nrm.append(t.gradients[sel])
            rn = self.records[self.neutral_of[self.scan_identity[s]]]
            lm.append(r.landmarks)
            lmn.append(rn.landmarks)
            if dsel is not None:
                dense.append(r.dense[dsel])
                densen.append(rn.dense[dsel])
        has_dense = dsel is not None
        return Batch(
            points=np.stack(pts) / scale, sdf=np.stack(sdf) / scale, normals=np.stack(nrm),
            landmarks=np.stack(lm) / scale, neutral_landmarks=np.stack(lmn) / scale,
            dense=np.stack(dense) / scale if has_dense else None,
            dense_neutral=np.stack(densen) / scale if has_dense else None,
            dense_template=template_dense[dsel] / scale if has_dense else None,
            is_neutral=np.array([self.records[s].is_neutral for s in idx]))


@dataclass
class EmbeddingTable:
    """Per-scan expression and detail codes, per-identity shape codes."""

    z_exp: Tensor
    z_id: Tensor
    z_detail: Tensor
    scan_names: list[str]
    identities: list[str]
    scan_identity: np.ndarray

    @classmethod
    def create(cls, ts: TrainingSet, cfg: ModelConfig, std: float, seed: int) -> EmbeddingTable:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        s, i = ts.n_scans, len(ts.identities)
        return cls(Tensor(rng.normal(0, std, (s, cfg.exp_dim)), True, "z_exp"),
                   Tensor(rng.normal(0, std, (i, cfg.id_dim)), True, "z_id"),
                   Tensor(rng.normal(0, std, (s, cfg.detail_dim)), True, "z_detail"),
                   [f"{r.identity}/{r.expression}" for r in ts.records], list(ts.identities),
                   ts.scan_identity.copy())

    def codes(self, scan: int) -> LatentCodes:
        return LatentCodes(self.z_exp.value[scan].copy(), self.z_id.value[self.scan_identity[scan]].copy(),
                           self.z_detail.value[scan].copy())

    def mean_codes(self) -> LatentCodes:
        return LatentCodes(self.z_exp.value.mean(0), self.z_id.value.mean(0), self.z_detail.value.mean(0))

    def lookup(self, idx: np.ndarray):
        idx = np.asarray(idx)
        return (T.getitem(self.z_exp, idx), T.getitem(self.z_id, self.scan_identity[idx]),
                T.getitem(self.z_detail, idx))


@contextmanager
def frozen(params):
    """Temporarily exclude leaves from the graph (no adjoints, smaller graphs)."""
    params = list(params)
    old = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, o in zip(params, old):
            p.requires_grad = o


# -- checkpoints ------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: ImFaceModel
    table: EmbeddingTable | None
    config: TrainConfig
    stage: int
    epoch: int
    step: int
    opt_step: int = 0
    opt_m: list = field(default_factory=list)
    opt_v: list = field(default_factory=list)


def _encode_json(d: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(d, sort_keys=True).encode("utf-8"), np.uint8).astype(np.float64)


def _decode_json(a: np.ndarray) -> dict:
    return json.loads(a.astype(np.uint8).tobytes().decode("utf-8"))


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    manifest = {
        "format": "imface-checkpoint", "version": CHECKPOINT_VERSION,
        "model": asdict(ck.model.cfg), "train": ck.config.to_dict(),
        "stage": ck.stage, "epoch": ck.epoch, "step": ck.step, "opt_step": ck.opt_step,
        "n_opt": len(ck.opt_m),
    }
    tensors = {"manifest": _encode_json(manifest)}
    tensors.update({f"model/{k}": v for k, v in ck.model.state_dict().items()})
    if ck.table is not None:
        manifest_t = {"scans": ck.table.scan_names, "identities": ck.table.identities,
                      "scan_identity": ck.table.scan_identity.tolist()}
        tensors["table/meta"] = _encode_json(manifest_t)
        tensors["table/z_exp"] = ck.table.z_exp.value
        tensors["table/z_id"] = ck.table.z_id.value
        tensors["table/z_detail"] = ck.table.z_detail.value
    for i, (m, v) in enumerate(zip(ck.opt_m, ck.opt_v)):
        tensors[f"opt/m/{i:04d}"] = m
        tensors[f"opt/v/{i:04d}"] = v
    return dumps_tensors(tensors)


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    data = checkpoint_bytes(ck)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect_model`` every model dimension must match."""
    t = loads_tensors(Path(path).read_bytes())
    if "manifest" not in t:
        raise CheckpointError("checkpoint has no manifest")
    man = _decode_json(t["manifest"])
    if man.get("format") != "imface-checkpoint":
        raise CheckpointError("not an imface checkpoint")
    if man.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {man.get('version')} != {CHECKPOINT_VERSION}")
    mcfg = ModelConfig.from_dict(man["model"])
    if expect_model is not None:
        for f in fields(ModelConfig):
            a, b = getattr(mcfg, f.name), getattr(expect_model, f.name)
            if a != b:
                raise CheckpointError(f"model config mismatch in field '{f.name}': "
                                      f"checkpoint {a!r}, config {b!r}")
    model = ImFaceModel.create(mcfg)
    sd = {k[len("model/"):]: v for k, v in t.items() if k.startswith("model/")}
    try:
        model.load_state_dict(sd)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    table = None
    if "table/meta" in t:
        meta = _decode_json(t["table/meta"])
        table = EmbeddingTable(Tensor(t["table/z_exp"], True, "z_exp"), Tensor(t["table/z_id"], True, "z_id"),
                               Tensor(t["table/z_detail"], True, "z_detail"), meta["scans"],
                               meta["identities"], np.array(meta["scan_identity"], dtype=np.int64))
    n = man["n_opt"]
    return Checkpoint(model, table, TrainConfig.from_dict(man["train"]), man["stage"], man["epoch"],
                      man["step"], man["opt_step"], [t[f"opt/m/{i:04d}"] for i in range(n)],
                      [t[f"opt/v/{i:04d}"] for i in range(n)])


# -- training loops -----------------------------------------------------------------------

class CSVLog:
    COLUMNS = ("stage", "epoch", "step", "kappa", "lr", "total") + TERM_KEYS

    def __init__(self, path, append: bool = False, start: tuple[int, int] | None = None):
        """``append`` keeps an existing log; rows at or after ``start`` (epoch, step) are
        dropped, since a run killed after its last checkpoint will log them again."""
        self.path = None if path is None else Path(path)
        if self.path is None:
            return
        rows = []
        if append and self.path.exists():
            with self.path.open(newline="") as f:
                rows = list(csv.reader(f))[1:]
            if start is not None:
                rows = [r for r in rows if (int(r[1]), int(r[2])) < tuple(start)]
        with self.path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            w.writerows(rows)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c, "")) for c in self.COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


@dataclass
class TrainResult:
    model: ImFaceModel
    table: EmbeddingTable
    history: list[dict]
    training_set: TrainingSet


def _steps_per_epoch(n_scans: int, batch: int) -> int:
    return math.ceil(n_scans / batch)


def _epoch_batches(n_scans: int, batch: int, seed: int, stage: int, epoch: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, stage, epoch])).permutation(n_scans)
    return [perm[i:i + batch] for i in range(0, n_scans, batch)]


def _step_rng(seed, stage, epoch, step):
    return np.random.default_rng(np.random.SeedSequence([seed, stage, epoch, step, 1]))


def _restore_optimizer(opt: Adam, ck: Checkpoint | None) -> None:
    if ck is None or not ck.opt_m:
        return
    if len(ck.opt_m) != len(opt.state.m):
        raise CheckpointError("optimizer state does not match the parameter layout")
    for dst, src in zip(opt.state.m + opt.state.v, ck.opt_m + ck.opt_v):
        dst[...] = src
    opt.state.step = ck.opt_step


def _run(stage, ts, model, table, cfg, opt, frozen_params, loss_fn, epochs, start, out_dir,
         log_path, on_epoch, lr_fn=None):
    """Shared epoch/step loop; ``loss_fn(idx, rng, progress, k)`` returns ``(loss, terms, kappa)``
    and optionally the value to log as the total (``None`` when not computed)."""
    history = []
    csv_log = CSVLog(log_path, append=start != (0, 0), start=start)
    spe = _steps_per_epoch(ts.n_scans, cfg.batch_size)
    total_steps = epochs * spe
    done = 0
    e0, s0 = start
    out_dir = None if out_dir is None else Path(out_dir)

    def snapshot(epoch, step):
        return Checkpoint(model, table, cfg, stage, epoch, step, opt.state.step,
                          [m.copy() for m in opt.state.m], [v.copy() for v in opt.state.v])

    with frozen(frozen_params):
        for epoch in range(e0, epochs):
            batches = _epoch_batches(ts.n_scans, cfg.batch_size, cfg.seed, stage, epoch)
            for step in range(s0 if epoch == e0 else 0, len(batches)):
                if cfg.max_steps is not None and done >= cfg.max_steps:
                    if out_dir is not None:
                        save_checkpoint(out_dir / f"stage{stage}.ckpt", snapshot(epoch, step))
                    return history, (epoch, step)
                progress = (epoch * spe + step) / total_steps
                loss, terms, kappa, *logged = loss_fn(batches[step], _step_rng(cfg.seed, stage, epoch, step),
                                                      progress, epoch * spe + step)
                logged = logged[0] if logged else float(loss.value)
                if not np.isfinite(loss.value) or (logged is not None and not np.isfinite(logged)):
                    path = None
                    if out_dir is not None:
                        path = save_checkpoint(out_dir / f"stage{stage}_last_good.ckpt", snapshot(epoch, step))
                    raise TrainingError(f"non-finite loss at stage {stage} epoch {epoch} step {step}", path)
                if cfg.lr_final is not None:
                    opt.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** progress
                if lr_fn is not None:
                    lr_fn(progress)
                opt.zero_grad()
                backward(loss, opt.parameters())
                opt.step()
                done += 1
                # effective learning rate of the trained groups (stage 2 scales them by the blend weight)
                lr = opt.lr * max(opt.group_scale.values(), default=1.0)
                row = dict(stage=stage, epoch=epoch, step=step, kappa=kappa, lr=lr,
                           total="" if logged is None else logged,
                           **{k: float(v.value) for k, v in terms.items()})
                history.append(row)
                csv_log.write(row)
            if on_epoch is not None:
                on_epoch(epoch, model, table)
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"stage{stage}.ckpt", snapshot(epoch + 1, 0))
    if out_dir is not None:
        save_checkpoint(out_dir / f"stage{stage}.ckpt", snapshot(epochs, 0))
    return history, (epochs, 0)


def train_stage1(records: list[ScanRecord], config: TrainConfig, model_cfg: ModelConfig | None = None,
                 out_dir=None, log_path=None, resume: Checkpoint | None = None,
                 on_epoch: Callable | None = None) -> TrainResult:
    """Jointly optimise the base networks and per-scan / per-identity codes."""
    ts = TrainingSet.from_records(records)
    if resume is not None:
        model, table = resume.model, resume.table
    else:
        mcfg = ModelConfig(k=records[0].k) if model_cfg is None else model_cfg
        if mcfg.k != records[0].k:
            raise DataError(f"model expects {mcfg.k} landmarks, data has {records[0].k}")
        model = ImFaceModel.create(mcfg, ts.template_landmarks(), ts.template_dense())
        table = EmbeddingTable.create(ts, mcfg, config.emb_init_std, config.seed)
    pg = model.parameter_groups()
    opt = Adam({"exp": pg["exp"], "id": pg["id"], "temp": pg["temp"], "landmark": pg["landmark"],
                "emb": [table.z_exp, table.z_id]}, lr=config.lr)
    _restore_optimizer(opt, resume)
    scale = model.cfg.scale_mm

    def loss_fn(idx, rng, progress, k):
        batch = ts.batch(idx, config.points_per_scan, config.dense_points, model.template_dense, rng, scale)
        z_exp, z_id, _ = table.lookup(idx)
        cond = model.condition(z_exp, z_id, with_detail=False)
        terms = stage1_terms(model, cond, batch, config.weights, consistency=config.consistency)
        return total(terms), terms, ""

    start = (0, 0) if resume is None else (resume.epoch, resume.step)
    hist, _ = _run(1, ts, model, table, config, opt, pg["detail"] + [table.z_detail], loss_fn,
                   config.stage1_epochs, start, out_dir, log_path, on_epoch)
    return TrainResult(model, table, hist, ts)


def train_stage2(records: list[ScanRecord], stage1: TrainResult | Checkpoint, config: TrainConfig,
                 out_dir=None, log_path=None, resume: Checkpoint | None = None,
                 on_epoch: Callable | None = None) -> TrainResult:
    """Train DetailNet and the detail codes with every base network and base code frozen.

    The blend weight of the detail objective scales the learning rate of the
    active groups (the base objective has no trainable parameters left).
    """
    ts = TrainingSet.from_records(records)
    src = resume if resume is not None else stage1
    model, table = src.model, src.table
    if resume is None:
        model.zero_detail_head()
    pg = model.parameter_groups()
    base_hash = model.parameter_hash()
    opt = Adam({"detail": pg["detail"], "emb_detail": [table.z_detail]}, lr=config.lr)
    _restore_optimizer(opt, resume)
    scale = model.cfg.scale_mm
    frozen_params = pg["exp"] + pg["id"] + pg["temp"] + pg["landmark"] + [table.z_exp, table.z_id]

    def weights_at(progress):
        t = config.t_m + (1.0 - config.t_m) * progress
        return stage_weights(t, config.t_m, config.literal_kappa)

    def w_base_at(progress):
        return weights_at(progress)[0]

    def set_lr(progress):
        _, w_detail = weights_at(progress)
        opt.group_scale = {"detail": w_detail, "emb_detail": w_detail}

    def loss_fn(idx, rng, progress, k):
        with_base = w_base_at(progress) > 0 and config.base_log_every and k % config.base_log_every == 0
        batch = ts.batch(idx, config.points_per_scan, config.dense_points if with_base else 0,
                         model.template_dense, rng, scale)
        z_exp, z_id, z_det = table.lookup(idx)
        cond = model.condition(z_exp, z_id, z_det)
        terms = stage2_terms(model, cond, batch, config.weights)
        w_base, w_detail = weights_at(progress)
        kappa = w_detail if config.literal_kappa else w_base
        loss = total(terms)
        if w_base == 0:
            return loss, terms, kappa, float(loss.value)
        if not with_base:
            return loss, terms, kappa, None
        # the base objective has no trainable inputs left; it only enters the logged blend
        base = float(total(stage1_terms(model, cond, batch, config.weights, config.consistency)).value)
        return loss, terms, kappa, w_base * base + w_detail * float(loss.value)

    start = (0, 0) if resume is None else (resume.epoch, resume.step)
    hist, _ = _run(2, ts, model, table, config, opt, frozen_params, loss_fn, config.stage2_epochs,
                   start, out_dir, log_path, on_epoch, lr_fn=set_lr)
    if model.parameter_hash() != base_hash:
        raise RuntimeError("frozen base parameters changed during stage 2")
    return TrainResult(model, table, hist, ts)


# -- latent fitting ---------------------------------------------------------------------

@dataclass
class FitResult:
    codes: LatentCodes
    losses: list[float]
    restarted: bool
    diverged: bool


def fit_latents(triplets, model: ImFaceModel, config: TrainConfig, init: LatentCodes | None = None,
                detail: bool = True, seed: int | None = None) -> FitResult:
    """Optimise only the three codes of one scan against its samples (mm) with the model frozen.

    Starts at ``init`` (normally the training-set mean codes); if the loss
    exceeds ten times its initial value the fit restarts once from zero codes.
    """
    seed = config.seed if seed is None else seed
    scale = model.cfg.scale_mm
    params = [p for ps in model.parameter_groups().values() for p in ps]
    inits = [LatentCodes.zeros(model.cfg) if init is None else init, LatentCodes.zeros(model.cfg)]
    losses: list[float] = []
    for attempt, start in enumerate(inits):
        z = [Tensor(start.z_exp[None].copy(), True, "z_exp"), Tensor(start.z_id[None].copy(), True, "z_id"),
             Tensor(start.z_detail[None].copy(), True, "z_detail")]
        opt = Adam({"codes": z}, lr=config.fit_lr)
        losses = []
        first = None
        diverged = False
        with frozen(params):
            for step in range(config.fit_steps):
                rng = np.random.default_rng(np.random.SeedSequence([seed, 99, attempt, step]))
                sel = rng.choice(len(triplets), size=config.fit_points, replace=len(triplets) < config.fit_points)
                batch = Batch(triplets.points[sel][None] / scale, triplets.sdf[sel][None] / scale,
                              triplets.gradients[sel][None])
                cond = model.condition(z[0], z[1], z[2], with_detail=detail)
                if detail:
                    terms = stage2_terms(model, cond, batch, config.weights)
                else:
                    terms = {k: v for k, v in stage1_terms(model, cond, batch, config.weights, False).items()
                             if k in ("sdf", "eik", "emb")}
                loss = total(terms)
                value = float(loss.value)
                first = value if first is None else first
                if not np.isfinite(value) or value > 10 * first:
                    diverged = True
                    break
                losses.append(value)
                opt.zero_grad()
                backward(loss, z)
                opt.step()
        if not diverged:
            codes = LatentCodes(z[0].value[0].copy(), z[1].value[0].copy(), z[2].value[0].copy())
            return FitResult(codes, losses, attempt > 0, False)
        log.warning("latent fit diverged (attempt %d)", attempt)
    return FitResult(inits[0].copy(), losses, True, True)
