"""Stage 1 (synthesis network) and stage 2 (U-Net) training, synthesis and checkpoints.

Per synthesis step, with x from A (CT, with liver mask) and y from B (MR):

    Path A:  fake_B = G1(x),  rec_A = G2(fake_B),  seg = S(fake_B) vs mask(x)
    Path B:  fake_A = G2(y),  rec_B = G1(fake_A)

G1, G2 and S take one Adam step on the weighted objective, then D1 (y vs
fake_B) and D2 (x vs fake_A) each take one step on detached fakes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .dataset import (
    DatasetError,
    DatasetManifest,
    Modality,
    SamplerState,
    SliceCache,
    SliceEntry,
    denormalize_slice,
    draw_indices,
    eligible_a,
    eligible_b,
    stack_masks,
    stack_pixels,
    write_image_png,
    write_manifest,
    write_mask_png,
)
from .losses import (
    CSV_HEADER,
    LossBreakdown,
    LossError,
    LossWeights,
    cycle_loss,
    discriminator_loss,
    generator_adversarial_loss,
    segmentation_loss,
    total_loss,
)
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    UNetConfig,
    build_generator,
    build_patch_discriminator,
    build_segmentor,
    build_unet,
    config_to_dict,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
DETERMINISTIC_ENV = "XMOD_DETERMINISTIC"


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0")


def set_deterministic(enabled: bool | None = None) -> None:
    """Single-threaded, deterministic-kernel mode (forced by XMOD_DETERMINISTIC=1)."""
    if enabled is None:
        enabled = deterministic_requested()
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class EssNetTrainConfig:
    epochs: int = 100
    batch_size: int = 1
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = LossWeights()
    seed: int = 0
    ablation_no_seg: bool = False
    gan_mode: str = "nonsaturating"
    checkpoint_every: int = 10
    keep_last: int = 3
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("essnet.batch_size must be >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs < 1:
            raise ValueError("essnet.epochs must be >= 1")


@dataclass(frozen=True)
class UNetTrainConfig:
    epochs: int = 300
    batch_size: int = 2
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 10
    keep_last: int = 3
    unet: UNetConfig = UNetConfig()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("unet.batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("unet.lr must be > 0")
        if self.epochs < 1:
            raise ValueError("unet.epochs must be >= 1")

    def steps_per_epoch(self, n_images: int) -> int:
        return math.ceil(n_images / self.batch_size)


@dataclass
class TrainingRun:
    run_id: str
    out_dir: str
    config: dict
    log_path: str
    checkpoints: list[str] = field(default_factory=list)
    seconds_per_epoch: list[float] = field(default_factory=list)
    frames_per_second: float | None = None

    def write(self) -> Path:
        path = Path(self.out_dir) / "run.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# synthesis-network state


def _set_requires_grad(nets: Iterable[nn.Module], flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


class EssNetState:
    """Networks, optimizers and counters for one synthesis-network training run."""

    def __init__(self, cfg: EssNetTrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.G1 = build_generator(cfg.generator)
        self.G2 = build_generator(cfg.generator)
        self.S = build_segmentor(cfg.generator)
        self.D1 = build_patch_discriminator(cfg.discriminator)
        self.D2 = build_patch_discriminator(cfg.discriminator)
        gen_params = [*self.G1.parameters(), *self.G2.parameters()]
        if not cfg.ablation_no_seg:
            gen_params += list(self.S.parameters())
        self.opt_g = torch.optim.Adam(gen_params, lr=cfg.lr_g, betas=cfg.betas)
        self.opt_d1 = torch.optim.Adam(self.D1.parameters(), lr=cfg.lr_d, betas=cfg.betas)
        self.opt_d2 = torch.optim.Adam(self.D2.parameters(), lr=cfg.lr_d, betas=cfg.betas)
        self.step = 0
        self.epoch = 0
        self.sampler = SamplerState(seed=cfg.seed)

    @property
    def networks(self) -> dict[str, nn.Module]:
        return {"G1": self.G1, "G2": self.G2, "S": self.S, "D1": self.D1, "D2": self.D2}

    @property
    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"opt_g": self.opt_g, "opt_d1": self.opt_d1, "opt_d2": self.opt_d2}


def generator_update(state: EssNetState, x_a, mask_a, y_b):
    """One G1/G2/S step; returns the per-term losses and the fakes for the D updates."""
    cfg = state.cfg
    w = cfg.weights
    if cfg.ablation_no_seg:
        w = replace(w, lambda5=0.0)
    _set_requires_grad([state.D1, state.D2], False)
    fake_b = state.G1(x_a)
    rec_a = state.G2(fake_b)
    fake_a = state.G2(y_b)
    rec_b = state.G1(fake_a)
    adv_a2b = generator_adversarial_loss(state.D1(fake_b), cfg.gan_mode)
    adv_b2a = generator_adversarial_loss(state.D2(fake_a), cfg.gan_mode)
    cyc_a = cycle_loss(x_a, rec_a)
    cyc_b = cycle_loss(y_b, rec_b)
    if cfg.ablation_no_seg:
        seg = torch.zeros((), dtype=x_a.dtype)
    else:
        if mask_a is None:
            raise DatasetError("A-side slices need liver masks unless ablation_no_seg is set")
        seg = segmentation_loss(state.S(fake_b), mask_a)
    parts = [adv_a2b, adv_b2a, cyc_a, cyc_b, seg]
    total = total_loss(parts, w)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    _set_requires_grad([state.D1, state.D2], True)
    values = [float(p.detach()) for p in parts]
    return values, float(total.detach()), fake_b.detach(), fake_a.detach()


def discriminator_update(state: EssNetState, x_a, y_b, fake_b, fake_a) -> tuple[float, float]:
    gan_mode = state.cfg.gan_mode
    d1 = discriminator_loss(state.D1(y_b), state.D1(fake_b.detach()), gan_mode)
    state.opt_d1.zero_grad(set_to_none=True)
    d1.backward()
    state.opt_d1.step()
    d2 = discriminator_loss(state.D2(x_a), state.D2(fake_a.detach()), gan_mode)
    state.opt_d2.zero_grad(set_to_none=True)
    d2.backward()
    state.opt_d2.step()
    return float(d1.detach()), float(d2.detach())


def essnet_training_step(state: EssNetState, x_a: torch.Tensor, mask_a: torch.Tensor | None, y_b: torch.Tensor) -> LossBreakdown:
    """Update G1, G2, S then D1, then D2 on one unpaired batch; mutates ``state``."""
    values, total, fake_b, fake_a = generator_update(state, x_a, mask_a, y_b)
    d1, d2 = discriminator_update(state, x_a, y_b, fake_b, fake_a)
    state.step += 1
    return LossBreakdown(*values, total=total, d1_loss=d1, d2_loss=d2)


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_dir_write(final: Path, write) -> None:
    tmp = final.with_name(final.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    write(tmp)
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def _rng_state() -> dict:
    return {"torch": torch.get_rng_state()}


def save_checkpoint(state, directory: str | Path) -> Path:
    """Write configs, weights, optimizer slots, counters and RNG state to ``directory``."""
    directory = Path(directory)
    if isinstance(state, EssNetState):
        cfg = state.cfg
        meta = {
            "kind": "essnet",
            "generator": config_to_dict(cfg.generator),
            "discriminator": config_to_dict(cfg.discriminator),
            "weights": asdict(cfg.weights),
            "ablation_no_seg": cfg.ablation_no_seg,
            "gan_mode": cfg.gan_mode,
            "sampler": asdict(state.sampler),
        }
    elif isinstance(state, UNetState):
        meta = {"kind": "unet", "unet": config_to_dict(state.cfg.unet)}
    else:
        raise TypeError(f"cannot checkpoint {type(state).__name__}")
    meta.update(
        schema_version=CHECKPOINT_SCHEMA,
        tool_version=__version__,
        epoch=state.epoch,
        step=state.step,
        seed=state.cfg.seed,
    )

    def write(tmp: Path):
        for name, net in state.networks.items():
            torch.save(net.state_dict(), tmp / f"{name}.pt")
        torch.save({k: o.state_dict() for k, o in state.optimizers.items()}, tmp / "optim.pt")
        torch.save(_rng_state(), tmp / "rng.pt")
        (tmp / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    _atomic_dir_write(directory, write)
    return directory


def read_checkpoint_meta(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    meta = json.loads(path.read_text())
    if meta.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"{directory}: checkpoint schema_version {meta.get('schema_version')!r} unsupported "
            f"(expected {CHECKPOINT_SCHEMA})"
        )
    return meta


def _check_arch(expected, found: dict, what: str, directory) -> None:
    exp = config_to_dict(expected)
    if exp != found:
        diffs = [f"{k}: checkpoint={found.get(k)!r} expected={exp.get(k)!r}" for k in exp if exp.get(k) != found.get(k)]
        raise CheckpointError(f"{directory}: {what} architecture mismatch ({'; '.join(diffs)})")


def _load_weights(net: nn.Module, path: Path, directory) -> None:
    try:
        net.load_state_dict(torch.load(path, weights_only=True))
    except (RuntimeError, FileNotFoundError) as err:
        raise CheckpointError(f"{directory}: cannot load {path.name}: {err}") from err


def load_checkpoint(directory: str | Path, expect=None):
    """Rebuild an ``EssNetState`` or ``UNetState`` from ``directory``.

    ``expect`` (a train config) pins the architecture; a mismatch raises
    ``CheckpointError`` instead of silently adopting the stored one.
    """
    directory = Path(directory)
    meta = read_checkpoint_meta(directory)
    if meta["kind"] == "essnet":
        gen = GeneratorConfig(**meta["generator"])
        disc_d = dict(meta["discriminator"])
        disc_d["strides"] = tuple(disc_d["strides"])
        disc = DiscriminatorConfig(**disc_d)
        if expect is not None:
            _check_arch(expect.generator, meta["generator"], "generator", directory)
            _check_arch(expect.discriminator, meta["discriminator"], "discriminator", directory)
            cfg = expect
        else:
            cfg = EssNetTrainConfig(
                generator=gen,
                discriminator=disc,
                weights=LossWeights(**meta["weights"]),
                ablation_no_seg=meta["ablation_no_seg"],
                gan_mode=meta["gan_mode"],
                seed=meta["seed"],
            )
        state = EssNetState(cfg)
        state.sampler = SamplerState(**meta["sampler"])
    elif meta["kind"] == "unet":
        if expect is not None:
            _check_arch(expect.unet, meta["unet"], "unet", directory)
            cfg = expect
        else:
            cfg = UNetTrainConfig(unet=UNetConfig(**meta["unet"]), seed=meta["seed"])
        state = UNetState(cfg)
    else:
        raise CheckpointError(f"{directory}: unknown checkpoint kind {meta['kind']!r}")
    for name, net in state.networks.items():
        _load_weights(net, directory / f"{name}.pt", directory)
    optim = torch.load(directory / "optim.pt", weights_only=True)
    for name, opt in state.optimizers.items():
        opt.load_state_dict(optim[name])
    torch.set_rng_state(torch.load(directory / "rng.pt", weights_only=True)["torch"])
    state.epoch, state.step = meta["epoch"], meta["step"]
    return state


def list_checkpoints(out_dir: str | Path) -> list[Path]:
    ck = Path(out_dir) / "checkpoints"
    if not ck.is_dir():
        return []
    return sorted(p for p in ck.iterdir() if p.is_dir() and p.name.startswith("epoch_") and not p.name.endswith(".tmp"))


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a checkpoint directory or a training output directory (latest checkpoint)."""
    path = Path(path)
    if (path / "manifest.json").is_file() and (path / "optim.pt").is_file():
        return path
    found = list_checkpoints(path)
    if not found:
        raise CheckpointError(f"no checkpoint found under {path}")
    return found[-1]


def _prune(out_dir: Path, keep_last: int, final_epoch: int) -> None:
    found = list_checkpoints(out_dir)
    final_name = f"epoch_{final_epoch:04d}"
    extra = [p for p in found if p.name != final_name]
    for p in extra[: max(0, len(found) - keep_last)]:
        shutil.rmtree(p)


# ---------------------------------------------------------------------------
# loss logs


def _read_log(path: Path) -> list[list[str]]:
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def _rewrite_log(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# stage 1 driver


def _config_snapshot(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=list))


def train_essnet(
    cfg: EssNetTrainConfig,
    manifest_a: DatasetManifest,
    manifest_b: DatasetManifest,
    out_dir: str | Path,
    run_id: str = "essnet",
    resume: bool = True,
) -> TrainingRun:
    """Train for ``cfg.epochs`` epochs of ceil(|A|/batch) steps each.

    Resumes from the newest checkpoint in ``out_dir`` when one exists. A
    non-finite loss raises ``TrainingAborted`` and leaves earlier checkpoints
    untouched.
    """
    set_deterministic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool_a, pool_b = eligible_a(manifest_a), eligible_b(manifest_b)
    if not pool_a:
        raise DatasetError(f"{manifest_a.root_path}: no liver-visible, masked A slices")
    if not cfg.ablation_no_seg:
        for e in pool_a:
            if e.mask_path is None:
                raise DatasetError(f"{e.id}: A slice without mask")
    steps_per_epoch = math.ceil(len(pool_a) / cfg.batch_size)
    load_a, load_b = SliceCache(manifest_a), SliceCache(manifest_b)
    log_path = out_dir / "loss_log.csv"

    found = list_checkpoints(out_dir) if resume else []
    if found:
        state = load_checkpoint(found[-1], expect=cfg)
        rows = [r for r in _read_log(log_path) if int(r[0]) <= state.step]
        log.info("resuming synthesis training from %s (epoch %d)", found[-1].name, state.epoch)
    else:
        state = EssNetState(cfg)
        rows = []
    _rewrite_log(log_path, CSV_HEADER, rows)

    run = TrainingRun(run_id, str(out_dir), _config_snapshot(cfg), str(log_path))
    prev = out_dir / "run.json"
    if found and prev.is_file():
        run.seconds_per_epoch = json.loads(prev.read_text()).get("seconds_per_epoch", [])[: state.epoch]

    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while state.epoch < cfg.epochs:
            t0 = time.perf_counter()
            for _ in range(steps_per_epoch):
                ia, ib, state.sampler = draw_indices(state.sampler, len(pool_a), len(pool_b), cfg.batch_size)
                batch_a = [load_a(pool_a[i]) for i in ia]
                batch_b = [load_b(pool_b[i]) for i in ib]
                x_a = stack_pixels(batch_a)
                mask_a = None if cfg.ablation_no_seg else stack_masks(batch_a)
                y_b = stack_pixels(batch_b)
                try:
                    parts = essnet_training_step(state, x_a, mask_a, y_b)
                except LossError as err:
                    raise TrainingAborted(f"step {state.step + 1}: {err}") from err
                if not (math.isfinite(parts.d1_loss) and math.isfinite(parts.d2_loss)):
                    raise TrainingAborted(f"step {state.step}: non-finite discriminator loss")
                writer.writerow([_fmt(v) for v in parts.csv_row(state.step)])
            fh.flush()
            state.epoch += 1
            run.seconds_per_epoch.append(time.perf_counter() - t0)
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
                save_checkpoint(state, out_dir / "checkpoints" / f"epoch_{state.epoch:04d}")
                _prune(out_dir, cfg.keep_last, cfg.epochs)
            log.info("synthesis epoch %d/%d done (step %d)", state.epoch, cfg.epochs, state.step)

    run.checkpoints = [str(p) for p in list_checkpoints(out_dir)]
    run.write()
    return run


# ---------------------------------------------------------------------------
# synthesis


def synthesize(
    checkpoint: str | Path,
    manifest_a: DatasetManifest,
    out_dir: str | Path,
    batch_size: int = 8,
    expect_generator: GeneratorConfig | None = None,
) -> DatasetManifest:
    """Translate every liver-visible A slice with G1 into a synthetic B slice.

    The A slice's liver mask is carried over unchanged.
    """
    set_deterministic()
    ckpt = resolve_checkpoint(checkpoint)
    meta = read_checkpoint_meta(ckpt)
    if meta["kind"] != "essnet":
        raise CheckpointError(f"{ckpt}: expected a synthesis checkpoint, found {meta['kind']!r}")
    gen_cfg = GeneratorConfig(**meta["generator"])
    if expect_generator is not None:
        _check_arch(expect_generator, meta["generator"], "generator", ckpt)
    g1 = build_generator(gen_cfg)
    _load_weights(g1, ckpt / "G1.pt", ckpt)
    g1.eval()

    out_dir = Path(out_dir)
    entries_a = manifest_a.liver_visible
    load_a = SliceCache(manifest_a)
    entries = []
    t0 = time.perf_counter()
    with torch.no_grad():
        for start in range(0, len(entries_a), batch_size):
            chunk = entries_a[start : start + batch_size]
            slices = [load_a(e) for e in chunk]
            fake = g1(stack_pixels(slices))[:, 0].numpy()
            for e, s, img in zip(chunk, slices, fake):
                sid = f"syn_{e.id}"
                image_rel, mask_rel = f"images/{sid}.png", f"masks/{sid}.png"
                write_image_png(out_dir / image_rel, denormalize_slice(img, 16))
                write_mask_png(out_dir / mask_rel, s.mask)
                entries.append(
                    SliceEntry(
                        id=sid,
                        image_path=image_rel,
                        mask_path=mask_rel,
                        width=img.shape[1],
                        height=img.shape[0],
                        source_bit_depth=16,
                        liver_visible=bool(s.mask.any()),
                        subject_id=e.subject_id,
                        synthetic=True,
                    )
                )
    elapsed = time.perf_counter() - t0
    manifest = DatasetManifest(root_path=out_dir, modality=Modality.B_MR, entries=tuple(entries))
    write_manifest(manifest)
    fps = len(entries) / elapsed if elapsed > 0 else None
    (out_dir / "synthesis.json").write_text(
        json.dumps({"checkpoint": str(ckpt), "n_images": len(entries), "seconds": elapsed, "frames_per_second": fps}, indent=2)
        + "\n"
    )
    log.info("synthesized %d slices (%.2f frames/s)", len(entries), fps or float("nan"))
    return manifest


# ---------------------------------------------------------------------------
# stage 2


class UNetState:
    def __init__(self, cfg: UNetTrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.unet = build_unet(cfg.unet)
        self.opt = torch.optim.Adam(self.unet.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.step = 0
        self.epoch = 0

    @property
    def networks(self) -> dict[str, nn.Module]:
        return {"unet": self.unet}

    @property
    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"opt": self.opt}


def select_synthetic(manifest: DatasetManifest, take: int | None, seed: int) -> list[SliceEntry]:
    pool = manifest.liver_visible
    if take is None or take == len(pool):
        return list(pool)
    if take > len(pool):
        raise DatasetError(f"requested {take} synthetic slices, only {len(pool)} available")
    idx = np.sort(np.random.default_rng([seed, 3]).choice(len(pool), size=take, replace=False))
    return [pool[i] for i in idx]


def unet_training_set(real: DatasetManifest, synthetic: DatasetManifest | None = None, take: int | None = None, seed: int = 0):
    """(entry, loader) pairs for the real liver-visible slices plus ``take`` synthetic ones."""
    for m in (real, synthetic):
        if m is None:
            continue
        missing = [e.id for e in m.entries if e.mask_path is None]
        if missing:
            raise DatasetError(f"{m.root_path}: {len(missing)} entries without masks (e.g. {missing[0]})")
    cache_r = SliceCache(real)
    items = [(e, cache_r) for e in real.liver_visible]
    if synthetic is not None and take != 0:
        cache_s = SliceCache(synthetic)
        items += [(e, cache_s) for e in select_synthetic(synthetic, take, seed)]
    if not items:
        raise DatasetError("empty U-Net training set")
    return items


def train_unet(
    cfg: UNetTrainConfig,
    real_manifest: DatasetManifest,
    out_dir: str | Path,
    synthetic_manifest: DatasetManifest | None = None,
    take: int | None = None,
    run_id: str = "unet",
    resume: bool = True,
) -> TrainingRun:
    """Per-pixel BCE training on real (+ synthetic) masked slices; epochs reshuffle with the seed."""
    set_deterministic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = unet_training_set(real_manifest, synthetic_manifest, take, cfg.seed)
    n = len(items)
    steps_per_epoch = cfg.steps_per_epoch(n)
    log_path = out_dir / "loss_log.csv"
    header = ["step", "epoch", "loss"]

    found = list_checkpoints(out_dir) if resume else []
    if found:
        state = load_checkpoint(found[-1], expect=cfg)
        rows = [r for r in _read_log(log_path) if int(r[0]) <= state.step]
    else:
        state = UNetState(cfg)
        rows = []
    _rewrite_log(log_path, header, rows)

    snapshot = _config_snapshot(cfg)
    snapshot["n_train"] = n
    snapshot["n_synthetic"] = n - len(real_manifest.liver_visible)
    run = TrainingRun(run_id, str(out_dir), snapshot, str(log_path))
    model = state.unet
    model.train()
    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while state.epoch < cfg.epochs:
            t0 = time.perf_counter()
            perm = np.random.default_rng([cfg.seed, 2, state.epoch]).permutation(n)
            for b in range(steps_per_epoch):
                chunk = [items[i] for i in perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                slices = [loader(e) for e, loader in chunk]
                x = stack_pixels(slices)
                y = stack_masks(slices)[:, None].float()
                loss = F.binary_cross_entropy_with_logits(model.logits(x), y)
                if not torch.isfinite(loss):
                    raise TrainingAborted(f"U-Net step {state.step + 1}: non-finite loss")
                state.opt.zero_grad(set_to_none=True)
                loss.backward()
                state.opt.step()
                state.step += 1
                writer.writerow([state.step, state.epoch + 1, repr(float(loss.detach()))])
            fh.flush()
            state.epoch += 1
            run.seconds_per_epoch.append(time.perf_counter() - t0)
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
                save_checkpoint(state, out_dir / "checkpoints" / f"epoch_{state.epoch:04d}")
                _prune(out_dir, cfg.keep_last, cfg.epochs)

    run.checkpoints = [str(p) for p in list_checkpoints(out_dir)]
    run.write()
    return run


def predict_unet(model, slices, batch_size: int = 8) -> list[np.ndarray]:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            probs = model(stack_pixels(slices[start : start + batch_size]))[:, 0]
            out.extend(p.numpy() for p in probs)
    return out
