"""Multi-step autoregressive training, the optimization protocol, and the
grid-search sweep runner.

The loss for one sample unrolls the model M steps feeding its own predictions
forward, sums the per-step area-weighted squared errors, and backpropagates
once through the whole chain. The reported scalar is the paper sum divided by
(M * K_p * H * W) and averaged over the batch, so magnitudes are comparable
across configurations; gradients differ from the raw sum only by that positive
constant.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (DatasetStore, NormalizationStats, compute_normalization,
                   load_batch, parse_date, sample_index, variable_set)
from .errors import ConfigError, NonFiniteError
from .grid import area_weights
from .models import (ModelSpec, ModelState, build_model, model_forward_t,
                     model_spec)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Appendix-style replication protocol constants.
REPLICATION_LR = {"climax": 4e-3, "fcn": 4e-3, "sfno": 1e-3}
REPLICATION_EPOCHS = 20
REPLICATION_PATIENCE = 5
REPLICATION_CLIP = 0.001
REPLICATION_BATCH = 64
REPLICATION_M = (1, 2, 4)
PAPER_SEEDS = (597, 1152, 1826, 3909, 6153, 5513, 5707, 9813, 9941, 9982)


@dataclass
class TrainConfig:
    model: ModelSpec
    m_steps: int
    seed: int
    variable_set: str
    train_start: str
    train_end: str
    val_start: str
    val_end: str
    batch_size: int = REPLICATION_BATCH
    lr_init: float | None = None          # None -> per-architecture default
    epochs: int = REPLICATION_EPOCHS
    early_stop_patience: int = REPLICATION_PATIENCE
    grad_clip_norm: float = REPLICATION_CLIP
    replication: bool = False

    @property
    def lr(self) -> float:
        return REPLICATION_LR[self.model.arch] if self.lr_init is None else self.lr_init

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_json()
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_json(d["model"])
        return TrainConfig(**d)


def validate_train_config(cfg: TrainConfig) -> None:
    if cfg.m_steps < 1 or cfg.batch_size < 1 or cfg.epochs < 1:
        raise ConfigError("m_steps, batch_size and epochs must be positive")
    if cfg.replication:
        if cfg.m_steps not in REPLICATION_M:
            raise ConfigError(f"replication mode requires M in {REPLICATION_M}")
        if cfg.batch_size != REPLICATION_BATCH:
            raise ConfigError(f"replication mode requires batch size {REPLICATION_BATCH}")
        if cfg.epochs != REPLICATION_EPOCHS or cfg.early_stop_patience != REPLICATION_PATIENCE:
            raise ConfigError("replication mode locks epochs=20, patience=5")
        if cfg.grad_clip_norm != REPLICATION_CLIP:
            raise ConfigError("replication mode locks gradient clipping to 0.001")
        if cfg.lr_init is not None and cfg.lr_init != REPLICATION_LR[cfg.model.arch]:
            raise ConfigError("replication mode locks the initial learning rate")
        if not cfg.model.replication:
            raise ConfigError("replication mode requires a replication-mode model spec")


def run_id(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ------------------------------------------------------------------ loss

def multi_step_loss(state: ModelState, x_seq, f_seq, c, weights,
                    step_terms: list | None = None) -> ad.Tensor:
    """L = (1/M) sum_m mean_{batch,k} area_mean((Xhat_{m+1} - X_{m+1})^2),
    with Xhat fed forward from the model's own predictions.

    When `step_terms` is given, the per-step scalar errors are appended to it
    (term 0 is the 1-step error)."""
    m_steps = len(f_seq)
    if len(x_seq) != m_steps + 1:
        raise ConfigError(f"need {m_steps + 1} states for {m_steps} steps")
    w = weights.weights if hasattr(weights, "weights") else np.asarray(weights)
    cur = x_seq[0] if isinstance(x_seq[0], ad.Tensor) else ad.Tensor(np.asarray(x_seq[0]))
    cc = c if isinstance(c, ad.Tensor) else ad.Tensor(np.asarray(c))
    if cc.data.ndim == 3:
        cc = ad.Tensor(np.broadcast_to(cc.data, (cur.shape[0],) + cc.data.shape))
    total = None
    for m in range(m_steps):
        ff = f_seq[m] if isinstance(f_seq[m], ad.Tensor) else ad.Tensor(np.asarray(f_seq[m]))
        cur = ad.add(cur, model_forward_t(state, cur, ff, cc))
        tgt = x_seq[m + 1] if isinstance(x_seq[m + 1], ad.Tensor) else \
            ad.Tensor(np.asarray(x_seq[m + 1]))
        diff = ad.sub(cur, tgt)
        term = ad.mean_(ad.lat_weighted_mean(ad.mul(diff, diff), w))
        if step_terms is not None:
            step_terms.append(float(term.data))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / m_steps)


def persistence_loss(x_seq, weights) -> float:
    """The same objective for the trivial f=0 model (no graph)."""
    w = np.asarray(weights.weights if hasattr(weights, "weights") else weights,
                   np.float64)
    x0 = np.asarray(x_seq[0], np.float64)
    h, ww = x0.shape[-2:]
    total = 0.0
    for m in range(1, len(x_seq)):
        d2 = (x0 - np.asarray(x_seq[m], np.float64)) ** 2
        total += ((d2 * w[:, None]).sum(axis=(-2, -1)) / (h * ww)).mean()
    return total / (len(x_seq) - 1)


# ------------------------------------------------------------------ optimizer

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - p.data.dtype.type(lr) * update.astype(p.data.dtype)


def cosine_lr(epoch: int, epochs_total: int, lr_init: float) -> float:
    """Epoch-granular cosine annealing toward zero."""
    if not 0 <= epoch < epochs_total:
        raise ConfigError(f"epoch {epoch} outside [0, {epochs_total})")
    return lr_init * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs_total))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = REPLICATION_CLIP
                   ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, np.float64) ** 2))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise NonFiniteError("non-finite gradient norm")
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * np.asarray(g).dtype.type(s) for k, g in grads.items()}, norm


# ------------------------------------------------------------------ records

@dataclass
class TrainRecord:
    status: str                       # "ok" | "failed"
    seed: int
    val_m_steps: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0               # 1-based
    best_val: float = float("inf")
    stopped_epoch: int = 0
    persistence_val: float = float("nan")
    val_rmse_1step: float = float("nan")   # cross-check for rollout instability
    diagnostics: dict | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(d: dict) -> "TrainRecord":
        return TrainRecord(**d)


# ------------------------------------------------------------------ training

def _batched(indices: np.ndarray, size: int):
    for i in range(0, len(indices), size):
        yield indices[i : i + size]


def train(cfg: TrainConfig, store: DatasetStore,
          log=lambda s: None) -> tuple[ModelState, TrainRecord, NormalizationStats]:
    """Full training protocol: seeded shuffles, cosine schedule, clipping,
    Adam, patience-based early stopping, best-checkpoint restore."""
    validate_train_config(cfg)
    t_start, t_end = parse_date(cfg.train_start), parse_date(cfg.train_end)
    v_start, v_end = parse_date(cfg.val_start), parse_date(cfg.val_end)
    stats = compute_normalization(store, t_start, t_end)
    weights = area_weights(store.grid)
    state = build_model(cfg.model, store.grid, cfg.seed)

    train_ts = sample_index(t_start, t_end, cfg.m_steps, store.end)
    val_ts = sample_index(v_start, v_end, cfg.m_steps, store.end)
    if not train_ts or not val_ts:
        raise ConfigError("empty training or validation sample set")

    record = TrainRecord(status="ok", seed=cfg.seed, val_m_steps=cfg.m_steps)
    best_params: dict[str, np.ndarray] | None = None
    opt = AdamState()

    def validation() -> tuple[float, float, float]:
        tot = pers = one = 0.0
        n = 0
        with ad.no_grad():
            for chunk in _batched(np.arange(len(val_ts)), 256):
                ts = [val_ts[i] for i in chunk]
                x_seq, f_seq, c = load_batch(store, stats, ts, cfg.m_steps)
                terms: list[float] = []
                loss = multi_step_loss(state, x_seq, f_seq, c, weights, terms)
                tot += loss.item() * len(ts)
                one += terms[0] * len(ts)
                pers += persistence_loss(x_seq, weights) * len(ts)
                n += len(ts)
        return tot / n, pers / n, float(np.sqrt(one / n))

    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = rng.permutation(len(train_ts))
        epoch_loss = 0.0
        n_seen = 0
        t0 = time.time()
        for b_idx, chunk in enumerate(_batched(order, cfg.batch_size)):
            ts = [train_ts[i] for i in chunk]
            x_seq, f_seq, c = load_batch(store, stats, ts, cfg.m_steps)
            ad.zero_grads(state.params.values())
            loss = multi_step_loss(state, x_seq, f_seq, c, weights)
            lval = loss.item()
            if not np.isfinite(lval):
                record.status = "failed"
                record.stopped_epoch = epoch
                record.diagnostics = {"reason": "non-finite training loss",
                                      "run_id": run_id(cfg), "epoch": epoch,
                                      "batch": b_idx, "seed": cfg.seed}
                log(f"FAILED at epoch {epoch} batch {b_idx}: loss={lval}")
                if best_params is not None:
                    _assign(state, best_params)
                return state, record, stats
            ad.backward(loss)
            grads = {k: p.grad for k, p in state.params.items() if p.grad is not None}
            try:
                grads, _ = clip_grad_norm(grads, cfg.grad_clip_norm)
            except NonFiniteError:
                record.status = "failed"
                record.stopped_epoch = epoch
                record.diagnostics = {"reason": "non-finite gradient norm",
                                      "run_id": run_id(cfg), "epoch": epoch,
                                      "batch": b_idx, "seed": cfg.seed}
                if best_params is not None:
                    _assign(state, best_params)
                return state, record, stats
            adam_step(state.params, grads, opt, lr)
            epoch_loss += lval * len(ts)
            n_seen += len(ts)
        val_loss, val_pers, val_rmse1 = validation()
        record.persistence_val = val_pers
        record.epochs.append({"epoch": epoch, "train_loss": epoch_loss / n_seen,
                              "val_loss": val_loss, "lr": lr})
        if val_loss < record.best_val:
            record.val_rmse_1step = val_rmse1
        log(f"epoch {epoch}: train={epoch_loss / n_seen:.6g} val={val_loss:.6g} "
            f"lr={lr:.3g} ({time.time() - t0:.1f}s)")
        if val_loss < record.best_val:
            record.best_val = val_loss
            record.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in state.params.items()}
        record.stopped_epoch = epoch
        if epoch - record.best_epoch >= cfg.early_stop_patience:
            log(f"early stop after epoch {epoch} (best epoch {record.best_epoch})")
            break
    if best_params is not None:
        _assign(state, best_params)
    return state, record, stats


def _assign(state: ModelState, arrays: dict[str, np.ndarray]) -> None:
    for k, arr in arrays.items():
        state.params[k].data = arr.copy()


def run_training(cfg: TrainConfig, store: DatasetStore, run_dir) -> TrainRecord:
    """Train and persist the run-directory artifacts."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as f:
        json.dump(cfg.to_json(), f, indent=1, sort_keys=True)
    lines: list[str] = []

    def log(s: str):
        lines.append(s)

    state, record, stats = train(cfg, store, log)
    state.save(run_dir / "best.ckpt")     # train() restores the best checkpoint
    state.save(run_dir / "last.ckpt")
    with open(run_dir / "record.json", "w") as f:
        json.dump(record.to_json(), f, indent=1, sort_keys=True)
    with open(run_dir / "stats.json", "w") as f:
        json.dump(stats.to_json(), f, indent=1, sort_keys=True)
    with open(run_dir / "log.txt", "w") as f:
        f.write("\n".join(lines) + "\n")
    return record


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepSpec:
    archs: list[str]
    variable_sets: list[str]
    m_steps: list[int]
    layers: list[int]
    dims: list[int]
    seeds: list[int]
    train_start: str = "1979-01-01"
    train_end: str = "2007-12-31"
    val_start: str = "2008-01-01"
    val_end: str = "2008-12-31"
    batch_size: int = REPLICATION_BATCH
    epochs: int = REPLICATION_EPOCHS
    replication: bool = False
    overrides: dict = field(default_factory=dict)   # extra ModelSpec fields

    @staticmethod
    def from_json(d: dict) -> "SweepSpec":
        return SweepSpec(**d)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def enumerate_runs(sweep: SweepSpec) -> list[TrainConfig]:
    """Cartesian product of the grid, in deterministic order."""
    out = []
    for arch in sweep.archs:
        for vs_name in sweep.variable_sets:
            vs = variable_set(vs_name) if not vs_name.startswith("custom:") else \
                variable_set("custom", int(vs_name.split(":")[1]))
            for m in sweep.m_steps:
                for layers in sweep.layers:
                    for dim in sweep.dims:
                        for seed in sweep.seeds:
                            spec = model_spec(
                                arch, layers, dim, vs.n_prognostic,
                                n_forcing=len(vs.forcings),
                                n_constant=len(vs.constants),
                                replication=sweep.replication,
                                **sweep.overrides)
                            out.append(TrainConfig(
                                model=spec, m_steps=m, seed=seed,
                                variable_set=vs_name,
                                train_start=sweep.train_start,
                                train_end=sweep.train_end,
                                val_start=sweep.val_start,
                                val_end=sweep.val_end,
                                batch_size=sweep.batch_size,
                                epochs=sweep.epochs,
                                replication=sweep.replication))
    return out


def _sweep_worker(cfg_json: dict, store_dir: str, run_dir: str) -> tuple[str, str]:
    cfg = TrainConfig.from_json(cfg_json)
    store = DatasetStore.open(store_dir)
    try:
        record = run_training(cfg, store, run_dir)
        return run_id(cfg), record.status
    except Exception as exc:  # individual run failures never kill the sweep
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(run_dir) / "record.json", "w") as f:
            json.dump({"status": "failed", "seed": cfg.seed,
                       "diagnostics": {"reason": repr(exc)}}, f)
        return run_id(cfg), "failed"


def run_sweep(sweep: SweepSpec, store_dir, root, jobs: int = 1,
              log=lambda s: None) -> dict:
    """Execute every run of the grid as share-nothing workers; resumable."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    configs = enumerate_runs(sweep)
    statuses: dict[str, str] = {}
    todo = []
    for cfg in configs:
        rid = run_id(cfg)
        rec_path = root / rid / "record.json"
        if rec_path.exists():
            with open(rec_path) as f:
                statuses[rid] = json.load(f).get("status", "ok")
            log(f"skip {rid} (completed: {statuses[rid]})")
        else:
            todo.append(cfg)
    if jobs <= 1:
        for cfg in todo:
            rid, status = _sweep_worker(cfg.to_json(), str(store_dir),
                                        str(root / run_id(cfg)))
            statuses[rid] = status
            log(f"run {rid}: {status}")
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(_sweep_worker, cfg.to_json(), str(store_dir),
                                str(root / run_id(cfg))): cfg for cfg in todo}
            for fut in futs:
                rid, status = fut.result()
                statuses[rid] = status
                log(f"run {rid}: {status}")
    manifest = {"runs": [{"id": run_id(c), "status": statuses[run_id(c)],
                          "config": c.to_json()} for c in configs]}
    with open(root / "sweep.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest
