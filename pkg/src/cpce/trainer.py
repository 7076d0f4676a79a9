"""Alternating WGAN-GP training of the CPCE generator and critic.

One epoch is one pass over the training patches in shuffled batches. Every
batch drives one critic update; every ``n_critic``-th batch additionally
drives one generator update on the same batch. Validation (perceptual loss,
absolute Wasserstein estimate, MSE) runs every ``eval_every`` epochs.

All randomness is derived from ``(seed, epoch)`` for shuffling and
``(seed, iteration)`` for interpolation weights, so a run resumed from a
checkpoint continues exactly as an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .container import load_container, pack_text, save_container, unpack_text
from .data import Dataset, PatchSet
from .losses import (FeatureExtractor, LossBundle, adversarial_loss, combined_generator_loss,
                     critic_loss, gradient_penalty, perceptual_loss)
from .model import (ConfigurationError, DiscriminatorParams, GeneratorParams, build_discriminator,
                    build_generator, depth_schedule_for, discriminator_forward, generator_forward)
from .transfer import inflate_generator

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "pl", "wd", "mse")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``components`` holds the loss terms at the failing step."""

    def __init__(self, where: str, components: dict):
        msg = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss in {where}: {msg}")
        self.components = components


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1.0e-4
    transfer_lr_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_gp: float = 10.0
    lambda_p: float = 0.1
    n_critic: int = 4
    epochs: int = 10
    lr_decay: str = "one_over_t"
    seed: int = 0
    eval_every: float = 0.5
    loss_reduction: str = "mean"
    eval_batch: int = 256

    def __post_init__(self):
        if self.lr_decay not in ("one_over_t", "none"):
            raise ConfigurationError(f"unknown lr_decay {self.lr_decay!r}")
        if self.n_critic < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("n_critic, batch_size must be >= 1 and epochs >= 0")
        if not 0 < self.eval_every:
            raise ConfigurationError("eval_every must be positive")

    def lr_at(self, epoch: int, transferred: bool = False) -> float:
        base = self.lr * (self.transfer_lr_factor if transferred else 1.0)
        return base / epoch if self.lr_decay == "one_over_t" else base

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)


@dataclass
class HistoryRecord:
    step: int
    pl: float
    wd: float
    mse: float


@dataclass
class TrainState:
    generator: GeneratorParams
    critic: DiscriminatorParams
    config: TrainConfig
    g_opt: torch.optim.Adam = None
    d_opt: torch.optim.Adam = None
    epoch: int = 0       # completed epochs
    step: int = 0        # batches consumed
    g_steps: int = 0
    d_steps: int = 0
    transferred: bool = False
    history: list[HistoryRecord] = field(default_factory=list)
    last_critic: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in self._all_params():
            p.requires_grad_(True)
        c = self.config
        if self.g_opt is None:
            self.g_opt = torch.optim.Adam(list(self.generator.weights.values()), lr=c.lr,
                                          betas=(c.beta1, c.beta2), foreach=False)
        if self.d_opt is None:
            self.d_opt = torch.optim.Adam(list(self.critic.weights.values()), lr=c.lr,
                                          betas=(c.beta1, c.beta2), foreach=False)

    def _all_params(self):
        return [*self.generator.weights.values(), *self.critic.weights.values()]

    def set_lr(self, lr: float) -> None:
        for opt in (self.g_opt, self.d_opt):
            for g in opt.param_groups:
                g["lr"] = lr

    def adam_moments(self, which: str) -> dict[str, dict[str, torch.Tensor]]:
        opt, params = (self.g_opt, self.generator) if which == "generator" else (self.d_opt, self.critic)
        out = {}
        for name, p in params.weights.items():
            st = opt.state.get(p)
            if st:
                out[name] = {"exp_avg": st["exp_avg"], "exp_avg_sq": st["exp_avg_sq"], "step": st["step"]}
        return out


def new_state(config: TrainConfig, d: int = 1, channels: int = 32) -> TrainState:
    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    G = build_generator(d, int(seeds[0]), channels)
    D = build_discriminator(int(seeds[1]))
    return TrainState(G, D, config)


def _eps(seed: int, step: int, n: int) -> torch.Tensor:
    rng = np.random.default_rng([seed, 7, step])
    return torch.from_numpy(rng.uniform(0.0, 1.0, size=n).astype(np.float32))


def _apply(opt: torch.optim.Optimizer, params: list[torch.Tensor], grads) -> None:
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    for p in params:
        p.grad = None


def _finite(where: str, **terms) -> None:
    vals = {k: float(v.detach()) if hasattr(v, "detach") else float(v) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingDiverged(where, vals)


def critic_step(state: TrainState, real_batch, lowdose_batch, epsilon=None) -> float:
    """One Adam update of the critic on ``mean D(fake) - mean D(real) + GP``."""
    c = state.config
    real = torch.as_tensor(real_batch)
    low = torch.as_tensor(lowdose_batch)
    if epsilon is None:
        epsilon = _eps(c.seed, state.step, real.shape[0])
    with torch.no_grad():
        fake = generator_forward(state.generator, low)
    d_fake = discriminator_forward(state.critic, fake)
    d_real = discriminator_forward(state.critic, real)
    gp = gradient_penalty(state.critic, fake, real, epsilon, c.lambda_gp)
    loss = critic_loss(d_fake, d_real, gp)
    _finite("critic_step", loss=loss, d_fake=d_fake.mean(), d_real=d_real.mean(), gp=gp)
    params = list(state.critic.weights.values())
    _apply(state.d_opt, params, torch.autograd.grad(loss, params))
    state.d_steps += 1
    state.last_critic = {"wasserstein_estimate": (d_fake.mean() - d_real.mean()).item(),
                         "gradient_penalty": gp.item()}
    return loss.item()


def generator_step(state: TrainState, lowdose_batch, real_batch,
                   extractor: FeatureExtractor) -> LossBundle:
    """One Adam update of the generator on ``L_a + lambda_p * L_p``."""
    c = state.config
    real = torch.as_tensor(real_batch)
    fake = generator_forward(state.generator, torch.as_tensor(lowdose_batch))
    adv = adversarial_loss(discriminator_forward(state.critic, fake))
    perc = perceptual_loss(extractor, fake, real, c.loss_reduction)
    total = combined_generator_loss(adv, perc, c.lambda_p)
    _finite("generator_step", adversarial=adv, perceptual=perc, combined=total)
    params = list(state.generator.weights.values())
    _apply(state.g_opt, params, torch.autograd.grad(total, params))
    state.g_steps += 1
    return LossBundle(adv.item(), perc.item(), total.item(), **state.last_critic,
                      lambda_gp=c.lambda_gp, lambda_p=c.lambda_p)


def validate(state: TrainState, val: PatchSet, extractor: FeatureExtractor) -> HistoryRecord:
    """Perceptual loss, |Wasserstein| and MSE over the whole validation split."""
    c = state.config
    n = len(val)
    pl = mse = s_fake = s_real = 0.0
    with torch.no_grad():
        for a in range(0, n, c.eval_batch):
            low = torch.from_numpy(val.lowdose[a:a + c.eval_batch])
            real = torch.from_numpy(val.normaldose[a:a + c.eval_batch])
            fake = generator_forward(state.generator, low)
            k = real.shape[0]
            pl += float(perceptual_loss(extractor, fake, real, c.loss_reduction)) * k
            mse += float(((fake.double() - real.double()) ** 2).mean()) * k
            s_fake += float(discriminator_forward(state.critic, fake).double().sum())
            s_real += float(discriminator_forward(state.critic, real).double().sum())
    return HistoryRecord(state.step, pl / n, abs(s_real - s_fake) / n, mse / n)


def _eval_points(n_batches: int, eval_every: float) -> set[int]:
    # batch counts (1-based, within an epoch) after which validation runs
    if eval_every >= 1:
        return {n_batches}
    k = max(1, int(round(1 / eval_every)))
    return {max(1, int(round(n_batches * j / k))) for j in range(1, k + 1)}


def train_epoch(state: TrainState, train: PatchSet, val: PatchSet, extractor: FeatureExtractor,
                progress: Callable[[str], None] | None = None,
                on_eval: Callable[[TrainState, HistoryRecord], None] | None = None) -> None:
    c = state.config
    t = state.epoch + 1
    state.set_lr(c.lr_at(t, state.transferred))
    perm = np.random.default_rng([c.seed, 3, t]).permutation(len(train))
    n_batches = len(train) // c.batch_size
    if n_batches == 0:
        raise ConfigurationError(f"{len(train)} training patches is less than one batch of {c.batch_size}")
    evals = _eval_points(n_batches, c.eval_every)
    for b in range(n_batches):
        idx = np.sort(perm[b * c.batch_size:(b + 1) * c.batch_size])
        low = torch.from_numpy(train.lowdose[idx])
        real = torch.from_numpy(train.normaldose[idx])
        d_loss = critic_step(state, real, low)
        state.step += 1
        if state.step % c.n_critic == 0:
            bundle = generator_step(state, low, real, extractor)
            if progress:
                progress(f"epoch {t} step {state.step} critic {d_loss:.4g} adv {bundle.adversarial:.4g} "
                         f"pl {bundle.perceptual:.4g} total {bundle.combined:.4g}")
        if b + 1 in evals:
            rec = validate(state, val, extractor)
            state.history.append(rec)
            if progress:
                progress(f"epoch {t} step {state.step} val pl {rec.pl:.6g} wd {rec.wd:.6g} mse {rec.mse:.6g}")
            if on_eval:
                on_eval(state, rec)
    state.epoch = t


def state_from_checkpoint(path, config: TrainConfig, target_d: int) -> TrainState:
    """Transfer initialization: inflate a 2D checkpoint's generator, keep its
    critic, start fresh Adam moments at the halved learning rate."""
    ckpt = load_checkpoint(path)
    G2 = ckpt.generator
    if G2.slices == target_d:
        G = G2
    elif G2.slices == 1:
        G = inflate_generator(G2, target_d)
    else:
        raise ConfigurationError(f"checkpoint has a {G2.slices}-slice generator; cannot transfer to d={target_d}")
    return TrainState(G, ckpt.critic, config, transferred=True)


def train(config: TrainConfig, dataset: Dataset, extractor: FeatureExtractor,
          init: str | tuple = "scratch", d: int | None = None, out_dir=None,
          progress: Callable[[str], None] | None = None,
          state: TrainState | None = None) -> TrainState:
    """Run ``config.epochs`` epochs.

    ``init`` is ``"scratch"`` or ``("from_checkpoint", path, target_d)``. A
    transfer-initialized run records a validation point at step 0. With
    ``out_dir``, a checkpoint ``epoch_XXX.cpce`` and ``history.csv`` are
    written after every epoch.
    """
    if state is None:
        if init == "scratch":
            state = new_state(config, d or 1)
        elif isinstance(init, tuple) and init[0] == "from_checkpoint":
            _, path, target_d = init
            if d is not None and d != target_d:
                raise ConfigurationError(f"d={d} conflicts with transfer target {target_d}")
            if not Path(path).exists():
                raise ConfigurationError(f"checkpoint not found: {path}")
            state = state_from_checkpoint(path, config, target_d)
        else:
            raise ConfigurationError(f"unknown init {init!r}")
    d = state.generator.slices
    train_set, val_set = dataset.train_patches(d), dataset.val_patches(d)
    if state.transferred and state.step == 0 and not state.history:
        rec = validate(state, val_set, extractor)
        state.history.append(rec)
        if progress:
            progress(f"epoch 0 step 0 val pl {rec.pl:.6g} wd {rec.wd:.6g} mse {rec.mse:.6g}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.epoch < config.epochs:
        train_epoch(state, train_set, val_set, extractor, progress)
        if out is not None:
            save_checkpoint(out / f"epoch_{state.epoch:03d}.cpce", state)
            write_history(out / "history.csv", state.history)
    return state


def print_progress(line: str) -> None:
    print(line, file=sys.stdout, flush=True)


# -- persistence -------------------------------------------------------------

def history_csv(history: list[HistoryRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([r.step, repr(r.pl), repr(r.wd), repr(r.mse)])
    return buf.getvalue()


def write_history(path, history: list[HistoryRecord]) -> None:
    Path(path).write_text(history_csv(history))


def read_history(path) -> list[HistoryRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0]) != HISTORY_COLUMNS:
        raise ValueError(f"{path}: expected columns {HISTORY_COLUMNS}, got {tuple(rows[0])}")
    return [HistoryRecord(int(r["step"]), float(r["pl"]), float(r["wd"]), float(r["mse"])) for r in rows]


def generator_arrays(G: GeneratorParams, prefix: str = "generator.") -> dict:
    arrays = {f"{prefix}{k}": v.detach() for k, v in G.weights.items()}
    arrays[f"{prefix}depth_schedule"] = np.array([m == "volumetric" for m in G.depth_schedule], np.float32)
    return arrays


def critic_arrays(D: DiscriminatorParams, prefix: str = "critic.") -> dict:
    arrays = {f"{prefix}{k}": v.detach() for k, v in D.weights.items()}
    arrays[f"{prefix}layout"] = np.array([D.padding, D.patch_size, *D.strides], np.float32)
    return arrays


def _split(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def generator_from_arrays(arrays: dict) -> GeneratorParams:
    flags = arrays.pop("depth_schedule")
    d = 1 + 2 * int(np.sum(flags))
    schedule = depth_schedule_for(d)
    if tuple(m == "volumetric" for m in schedule) != tuple(bool(f) for f in flags):
        raise ConfigurationError(f"invalid depth schedule flags {flags}")
    return GeneratorParams({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}, schedule)


def critic_from_arrays(arrays: dict) -> DiscriminatorParams:
    layout = [int(v) for v in arrays.pop("layout")]
    return DiscriminatorParams({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()},
                               tuple(layout[2:]), layout[0], layout[1])


def checkpoint_arrays(state: TrainState) -> dict:
    arrays = {}
    arrays.update(generator_arrays(state.generator))
    arrays.update(critic_arrays(state.critic))
    for which in ("generator", "critic"):
        for name, st in state.adam_moments(which).items():
            arrays[f"adam.{which}.m.{name}"] = st["exp_avg"]
            arrays[f"adam.{which}.v.{name}"] = st["exp_avg_sq"]
            arrays[f"adam.{which}.t.{name}"] = np.array([float(st["step"])], np.float32)
    arrays["meta.counters"] = np.array([state.epoch, state.step, state.g_steps, state.d_steps,
                                        int(state.transferred)], np.float32)
    arrays["meta.config"] = pack_text(json.dumps(asdict(state.config), sort_keys=True))
    arrays["meta.history"] = np.array([[r.step, r.pl, r.wd, r.mse] for r in state.history],
                                      np.float32).reshape(-1, 4)
    arrays["meta.history_csv"] = pack_text(history_csv(state.history))
    return arrays


def save_checkpoint(path, state: TrainState) -> None:
    save_container(path, checkpoint_arrays(state))


@dataclass
class Checkpoint:
    generator: GeneratorParams
    critic: DiscriminatorParams | None
    arrays: dict
    config: TrainConfig | None

    @property
    def epoch(self) -> int | None:
        c = self.arrays.get("meta.counters")
        return None if c is None else int(c[0])


def load_checkpoint(path) -> Checkpoint:
    arrays = load_container(path)
    gen = _split(arrays, "generator.")
    if "conv1.weight" not in gen:
        raise ConfigurationError(f"{path}: no generator weights in checkpoint")
    G = generator_from_arrays(gen)
    crit = _split(arrays, "critic.")
    D = critic_from_arrays(crit) if crit else None
    cfg = TrainConfig.from_dict(json.loads(unpack_text(arrays["meta.config"]))) if "meta.config" in arrays else None
    return Checkpoint(G, D, arrays, cfg)


def restore_state(path, config: TrainConfig | None = None) -> TrainState:
    """Resume training exactly where a checkpoint left off."""
    ckpt = load_checkpoint(path)
    cfg = config or ckpt.config
    if cfg is None:
        raise ConfigurationError(f"{path}: checkpoint has no training config")
    if ckpt.critic is None:
        raise ConfigurationError(f"{path}: checkpoint has no critic")
    epoch, step, g_steps, d_steps, transferred = (int(v) for v in ckpt.arrays["meta.counters"])
    state = TrainState(ckpt.generator, ckpt.critic, cfg, epoch=epoch, step=step, g_steps=g_steps,
                       d_steps=d_steps, transferred=bool(transferred))
    a = ckpt.arrays
    for which, opt, params in (("generator", state.g_opt, state.generator),
                               ("critic", state.d_opt, state.critic)):
        for name, p in params.weights.items():
            key = f"adam.{which}.m.{name}"
            if key in a:
                opt.state[p] = {
                    "step": torch.tensor(float(a[f"adam.{which}.t.{name}"][0])),
                    "exp_avg": torch.from_numpy(np.array(a[key])),
                    "exp_avg_sq": torch.from_numpy(np.array(a[f"adam.{which}.v.{name}"])),
                }
    hist = np.asarray(a.get("meta.history", np.zeros((0, 4))))
    if "meta.history_csv" in a:
        rows = list(csv.DictReader(io.StringIO(unpack_text(a["meta.history_csv"]))))
        state.history = [HistoryRecord(int(r["step"]), float(r["pl"]), float(r["wd"]), float(r["mse"]))
                         for r in rows]
    else:
        state.history = [HistoryRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in hist]
    return state
