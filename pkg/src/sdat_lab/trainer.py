"""Domain-adversarial training with optional sharpness-aware smoothing.

One step for each smoothing mode (``sam.mode``):

* ``none``: one forward/backward of task loss + domain loss (the domain loss
  reaches the feature extractor through gradient reversal), then a plain
  step for (psi, theta) and for phi.
* ``task``: gradient of the source task loss alone, SAM first step on
  (psi, theta), then the combined forward/backward at the perturbed weights,
  SAM second step on (psi, theta), plain step on phi.
* ``adv``: combined pass as in ``none``; phi is updated by SAM on the
  discriminator's loss, re-evaluated on the same (detached) features.
* ``all``: both wrappers.

Target labels never enter this loop: training sees an UnlabeledDataset.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__, jsonio
from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import DomainPair, LabeledDataset, UnlabeledDataset, inject_label_noise, load_pair, toy_pair
from .losses import cross_entropy, domain_accuracy, domain_loss
from .models import (
    ModelParams,
    classify,
    disc_input,
    discriminate,
    features,
    grl,
    grl_lambda,
    init,
)
from .optimizers import SAM, lr_at, make_optimizer
from .rng import child_seed, get_state, make_rng, set_state


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    task_loss: float
    domain_loss: float
    src_acc: float
    tgt_acc: float
    domain_acc: float
    lr: float
    eps_norm_mean: float
    wall_ms: float

    def to_json(self) -> str:
        return jsonio.dumps(asdict(self), indent=0).replace("\n", "") + "\n"


@dataclass
class StepMetrics:
    task_loss: float
    domain_loss: float
    domain_acc: float
    lr: float
    eps_norm: float


def _combined_forward(params: ModelParams, flat: Tensor, xs, ys, xt, lam, alpha, running):
    p = params.views(flat)
    spec = params.spec
    fs = features(p, xs)
    ft = features(p, xt)
    ls = classify(p, fs)
    task = cross_entropy(ls, ys, alpha)
    feats = ad.concat([fs, ft])
    logits = ad.concat([ls, classify(p, ft)]) if spec.conditioning == "multilinear" else None
    din = disc_input(spec, grl(feats, lam), logits)
    probs = discriminate(p, din, True, running)
    ns = xs.shape[0]
    d_src, d_tgt = probs[:ns], probs[ns:]
    dom = domain_loss(d_src, d_tgt)
    return task, dom, d_src, d_tgt, din


def _task_forward(params: ModelParams, flat: Tensor, xs, ys, alpha):
    p = params.views(flat)
    return cross_entropy(classify(p, features(p, xs)), ys, alpha)


def _disc_forward(params: ModelParams, flat: Tensor, din: np.ndarray, ns: int):
    p = params.views(flat)
    probs = discriminate(p, din, True, None)
    return domain_loss(probs[:ns], probs[ns:])


class Trainer:
    """Holds parameters, optimizer states and the batch RNG for one run."""

    def __init__(self, config: TrainConfig, pair: DomainPair | None = None):
        self.config = config
        if pair is None:
            pair = load_data(config)
        self.pair = pair
        seed = config.get_int("train.seed")
        src = pair.source
        noise = config.get_float("data.label_noise")
        if noise > 0:
            src = inject_label_noise(src, noise, child_seed(seed, 2))
        self.train_src: LabeledDataset = src
        self.train_tgt: UnlabeledDataset = pair.unlabeled_target()
        spec = config.model_spec
        if spec.input_dim != src.d or spec.num_classes != src.k:
            raise TrainingError(
                f"model expects d={spec.input_dim}, k={spec.num_classes}; data has d={src.d}, k={src.k}"
            )
        self.params = init(spec, child_seed(seed, 0))
        self.rng = make_rng(child_seed(seed, 1))

        v = config.values
        kind, mom, wd = v["opt.kind"], float(v["opt.momentum"]), float(v["opt.weight_decay"])
        task_scope = self.params.scope("psi", "theta")
        disc_scope = self.params.scope("phi")
        self.sm = config.smoothing
        task_opt = make_optimizer(kind, task_scope, mom, wd)
        disc_opt = make_optimizer(kind, disc_scope, mom, wd)
        self.task_opt = SAM(task_opt, self.sm.rho_task) if self.sm.smooth_task else task_opt
        self.disc_opt = SAM(disc_opt, self.sm.rho_adv) if self.sm.smooth_adv else disc_opt

        self.epochs = config.get_int("train.epochs")
        self.iters = config.get_int("train.iters")
        self.total_steps = self.epochs * self.iters
        self.batch = config.get_int("train.batch")
        self.alpha = config.get_float("train.label_smoothing")
        self.step_count = 0
        self.epoch = 0

    # schedules -------------------------------------------------------------
    def progress(self) -> float:
        return self.step_count / self.total_steps

    def grl_coeff(self) -> float:
        const = self.config.grl_constant
        if const is not None:
            return const
        return grl_lambda(
            self.progress(),
            gamma=self.config.get_float("grl.gamma"),
            hi=self.config.get_float("grl.hi"),
        )

    # one step --------------------------------------------------------------
    def sample_batch(self):
        s = self.rng.choice(self.train_src.n, size=self.batch, replace=False)
        t = self.rng.choice(self.train_tgt.n, size=self.batch, replace=False)
        return self.train_src.X[s], self.train_src.y[s], self.train_tgt.X[t]

    def train_step(self, xs, ys, xt) -> StepMetrics:
        params = self.params
        flat = params.flat
        p = self.progress()
        lam = self.grl_coeff()
        lr = lr_at(self.config.schedule, p)
        lr_d = lr_at(self.config.disc_schedule, p)
        step = self.step_count

        eps_norm = 0.0
        clean_task = None
        if self.sm.smooth_task:
            tape = ad.Tape()
            leaf = tape.watch(flat)
            try:
                task = _task_forward(params, leaf, xs, ys, self.alpha)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            clean_task = _checked(task, step, "task")
            (g,) = tape.gradient(task, [leaf])
            eps = self.task_opt.first_step(flat, g)
            eps_norm = float(np.linalg.norm(eps))

        tape = ad.Tape()
        leaf = tape.watch(flat)
        try:
            task, dom, d_src, d_tgt, din = _combined_forward(
                params, leaf, xs, ys, xt, lam, self.alpha, params.buffers
            )
        except ad.NonFiniteError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        task_val = _checked(task, step, "task")
        dom_val = _checked(dom, step, "domain")
        (grads,) = tape.gradient(task + dom, [leaf])

        if self.sm.smooth_adv:
            gd = grads.copy()
            self.disc_opt.first_step(flat, gd)
            tape = ad.Tape()
            leaf = tape.watch(flat)
            dl = _disc_forward(params, leaf, din.data, xs.shape[0])
            _checked(dl, step, "perturbed domain")
            (gd,) = tape.gradient(dl, [leaf])
            self.disc_opt.second_step(flat, gd, lr_d)
        else:
            self.disc_opt.step(flat, grads, lr_d)

        if self.sm.smooth_task:
            self.task_opt.second_step(flat, grads, lr)
        else:
            self.task_opt.step(flat, grads, lr)

        self.step_count += 1
        return StepMetrics(
            task_loss=task_val if clean_task is None else clean_task,
            domain_loss=dom_val,
            domain_acc=domain_accuracy(d_src, d_tgt),
            lr=lr,
            eps_norm=eps_norm,
        )

    # epochs ----------------------------------------------------------------
    def run_epoch(self) -> EpochMetrics:
        t0 = time.perf_counter()
        steps = [self.train_step(*self.sample_batch()) for _ in range(self.iters)]
        self.epoch += 1
        ev = evaluate(self.params, self.pair)
        wall = (time.perf_counter() - t0) * 1e3
        return EpochMetrics(
            epoch=self.epoch,
            task_loss=float(np.mean([s.task_loss for s in steps])),
            domain_loss=float(np.mean([s.domain_loss for s in steps])),
            src_acc=ev["src_acc"],
            tgt_acc=ev["tgt_acc"],
            domain_acc=float(np.mean([s.domain_acc for s in steps])),
            lr=steps[-1].lr,
            eps_norm_mean=float(np.mean([s.eps_norm for s in steps])),
            wall_ms=wall if self.config.get_bool("train.record_wall_time") else 0.0,
        )

    # checkpoints -------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "format": "sdat-lab-checkpoint/1",
            "config_hash": self.config.hash(),
            "config": self.config.text(),
            "epoch": self.epoch,
            "step": self.step_count,
            "params": self.params.flat,
            "partitions": {k: list(v) for k, v in self.params.manifest["partitions"].items()},
            "tensors": {
                k: {"offset": lo, "end": hi, "shape": list(shape)}
                for k, (lo, hi, shape) in self.params.manifest["tensors"].items()
            },
            "buffers": {k: v for k, v in self.params.buffers.items()},
            "task_optimizer": self.task_opt.state_dict(),
            "disc_optimizer": self.disc_opt.state_dict(),
            "rng": get_state(self.rng),
        }

    def save_checkpoint(self, path) -> None:
        jsonio.write_durable(path, jsonio.dumps(self.state_dict()) + "\n")

    def load_state_dict(self, state: dict) -> None:
        if state["config_hash"] != self.config.hash():
            raise TrainingError("checkpoint was written under a different config")
        flat = np.asarray(state["params"], dtype=np.float64)
        if flat.shape != self.params.flat.shape:
            raise TrainingError("checkpoint parameter vector does not match the model")
        self.params.flat[:] = flat
        self.params.buffers = {k: np.asarray(v, dtype=np.float64) for k, v in state["buffers"].items()}
        self.task_opt.load_state_dict(state["task_optimizer"])
        self.disc_opt.load_state_dict(state["disc_optimizer"])
        set_state(self.rng, state["rng"])
        self.epoch = int(state["epoch"])
        self.step_count = int(state["step"])


def _checked(t: Tensor, step: int, what: str) -> float:
    v = t.item()
    if not np.isfinite(v):
        raise TrainingError(f"step {step}: {what} loss is not finite")
    return v


def load_data(config: TrainConfig) -> DomainPair:
    src, tgt = config["data.src"].strip(), config["data.tgt"].strip()
    if bool(src) != bool(tgt):
        raise TrainingError("set both data.src and data.tgt, or neither")
    if src:
        return load_pair(src, tgt)
    return toy_pair(seed=config.get_int("data.seed"))


def evaluate(params: ModelParams, pair: DomainPair) -> dict:
    """Eval-mode accuracies; the only place target labels are read."""
    spec = params.spec
    fs = features(params, pair.source.X)
    ft = features(params, pair.target.X)
    ls = classify(params, fs)
    lt = classify(params, ft)
    src_acc = float(np.mean(ls.data.argmax(axis=1) == pair.source.y))
    tgt_acc = float(np.mean(lt.data.argmax(axis=1) == pair.target.y))
    feats = ad.concat([fs, ft])
    logits = ad.concat([ls, lt]) if spec.conditioning == "multilinear" else None
    probs = discriminate(params, disc_input(spec, feats, logits), False)
    ns = pair.source.n
    return {
        "src_acc": src_acc,
        "tgt_acc": tgt_acc,
        "domain_acc": domain_accuracy(probs.data[:ns], probs.data[ns:]),
    }


def _manifest(config: TrainConfig) -> dict:
    return {
        "tool": "sdat_lab",
        "version": __version__,
        "seed": config.get_int("train.seed"),
        "config_hash": config.hash(),
        "config": config.values,
    }


def train(
    config: TrainConfig,
    out_dir=None,
    pair: DomainPair | None = None,
    resume=None,
    stop_after: int | None = None,
) -> tuple[list[EpochMetrics], Trainer]:
    """Run ``train.epochs`` epochs, writing metrics.jsonl / checkpoint.json / manifest.json.

    ``resume`` is a checkpoint path; metrics are then appended to the existing
    file. ``stop_after`` halts after that many total epochs (the schedules
    still assume the full horizon), which is how interrupted runs are made.
    """
    trainer = Trainer(config, pair)
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        trainer.load_state_dict(json.loads(Path(resume).read_text()))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        jsonio.write_durable(out / "manifest.json", json.dumps(_manifest(config), indent=2) + "\n")
        (out / "config.txt").write_text(config.text())
        if resume is None:
            (out / "metrics.jsonl").write_text("")
    history = []
    last = trainer.epochs if stop_after is None else min(stop_after, trainer.epochs)
    while trainer.epoch < last:
        m = trainer.run_epoch()
        history.append(m)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8", newline="\n") as fh:
                fh.write(m.to_json())
            trainer.save_checkpoint(out / "checkpoint.json")
    return history, trainer


def load_checkpoint(path) -> tuple[TrainConfig, ModelParams, dict]:
    state = json.loads(Path(path).read_text())
    from .config import parse_config_text

    config = TrainConfig(parse_config_text(state["config"]))
    params = init(config.model_spec, 0)
    params.flat[:] = np.asarray(state["params"], dtype=np.float64)
    params.buffers = {k: np.asarray(v, dtype=np.float64) for k, v in state["buffers"].items()}
    return config, params, state


def summarize(values) -> dict:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


FINAL_FIELDS = ("task_loss", "domain_loss", "src_acc", "tgt_acc", "domain_acc")


def multi_seed(config: TrainConfig, seeds, pair: DomainPair | None = None, out_dir=None) -> dict:
    """Train once per seed; summary holds mean/std of each final-epoch metric."""
    per_seed = {}
    for s in seeds:
        run_dir = None if out_dir is None else Path(out_dir) / f"seed_{s}"
        hist, _ = train(config.updated(train__seed=s), run_dir, pair=pair)
        per_seed[int(s)] = hist
    order = sorted(per_seed)
    summary = {
        f: summarize([getattr(per_seed[s][-1], f) for s in order]) for f in FINAL_FIELDS
    }
    return {"per_seed": per_seed, "summary": summary}
