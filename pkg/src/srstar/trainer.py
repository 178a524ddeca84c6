"""Adversarial multi-domain training: schedule, steps, checkpoints, ablations."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .corpus import (
    AugPolicy, CorpusManifest, EmptyCorpusError, MIXING_OPS, ManifestEntry, apply_moa,
    domain_view, draw_moa, extract_paired_patch, flip_rotate, load_entry, sample_target_labels,
)
from .degradation import Domain
from .losses import (
    LossWeights, adversarial_d, adversarial_g, cls_loss, cycle_loss, l1_loss, load_backbone,
    perceptual_loss, total_d, total_g, tv_loss,
)
from .models import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, init_weights

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "srstar"
ABLATION_MODES = ("v1", "v2", "v3")
# fields that may legitimately change between a checkpoint and its resumption
RESUMABLE_FIELDS = ("iterations", "checkpoint_every", "keep_checkpoints")


class ConfigValidationError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    patch: int = 128
    iterations: int = 51_000
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_milestones: tuple[int, ...] = (5_000, 10_000, 20_000, 30_000)
    lr_factor: float = 0.5
    ablation_mode: str = "v3"
    seed: int = 0
    scale: int = 4
    flip_rotate: bool = True
    backbone: str = "fixed-random"
    checkpoint_every: int = 1_000
    keep_checkpoints: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    aug: AugPolicy = field(default_factory=AugPolicy)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc_base_channels: int = 64

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Patch 64, batch 4, 500 iterations."""
        base = dict(patch=64, batch_size=4, iterations=500)
        base.update(overrides)
        return cls(**base)

    def problems(self) -> list[str]:
        out = []
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.patch < 64 or self.patch % 64:
            out.append(f"patch must be a positive multiple of 64 (got {self.patch})")
        if self.iterations < 0:
            out.append(f"iterations must be >= 0 (got {self.iterations})")
        if self.lr0 <= 0:
            out.append(f"lr0 must be > 0 (got {self.lr0})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("beta1/beta2 must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            out.append(f"lr_milestones must be strictly increasing (got {list(self.lr_milestones)})")
        if self.ablation_mode not in ABLATION_MODES:
            out.append(f"ablation_mode must be one of {ABLATION_MODES} (got {self.ablation_mode!r})")
        if self.scale < 1 or self.patch % max(self.scale, 1):
            out.append(f"patch must be divisible by scale {self.scale}")
        if self.checkpoint_every < 1:
            out.append("checkpoint_every must be >= 1")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigValidationError(problems)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["aug"]["cut_ratio_range"] = list(self.aug.cut_ratio_range)
        d["aug"]["blend_range"] = list(self.aug.blend_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigValidationError([f"unknown config key {k!r}" for k in sorted(unknown)])
        nested = {"weights": LossWeights, "aug": AugPolicy, "generator": GeneratorConfig}
        problems = []
        for key, typ in nested.items():
            if key in data and isinstance(data[key], dict):
                try:
                    data[key] = typ(**data[key])
                except (TypeError, ValueError) as exc:
                    problems.append(f"{key}: {exc}")
        if problems:
            raise ConfigValidationError(problems)
        if "aug" in data and isinstance(data["aug"], AugPolicy):
            data["aug"].cut_ratio_range = tuple(data["aug"].cut_ratio_range)
        return cls(**data)

    def signature(self) -> dict:
        d = json.loads(json.dumps(self.to_dict()))
        for k in RESUMABLE_FIELDS:
            d.pop(k)
        return d

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(image_size=self.patch, base_channels=self.disc_base_channels)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr0 * factor ** (#milestones <= iteration)``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    passed = sum(1 for m in cfg.lr_milestones if m <= iteration)
    return cfg.lr0 * cfg.lr_factor**passed


@dataclass(frozen=True)
class AblationWiring:
    mode: str
    target_sampling: str  # "random" | "hr_only"
    source_domains: str  # "all" | "lr_only"
    discriminators: tuple[str, ...]


def configure_ablation(mode: str) -> AblationWiring:
    if mode == "v1":
        return AblationWiring("v1", "hr_only", "lr_only", ("trg", "src"))
    if mode == "v2":
        return AblationWiring("v2", "hr_only", "lr_only", ("trg",))
    if mode == "v3":
        return AblationWiring("v3", "random", "all", ("trg",))
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


# -- data ---------------------------------------------------------------------

@dataclass
class TrainingSample:
    image: torch.Tensor
    src_label: Domain
    trg_label: Domain
    target_image: torch.Tensor | None = None


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, P, P) canonical-grid sources
    src_labels: list[Domain]
    trg_labels: list[Domain]
    targets: torch.Tensor  # zeros where no supervision exists
    target_mask: torch.Tensor  # (B,) bool

    @classmethod
    def from_samples(cls, samples: list[TrainingSample]) -> "Batch":
        imgs = torch.stack([s.image for s in samples])
        targets = torch.stack([s.target_image if s.target_image is not None else torch.zeros_like(s.image)
                               for s in samples])
        mask = torch.tensor([s.target_image is not None for s in samples])
        return cls(imgs, [s.src_label for s in samples], [s.trg_label for s in samples], targets, mask)

    def __len__(self):
        return self.images.shape[0]


def select_supervision(hr_patch: torch.Tensor, lr_patch: torch.Tensor | None, trg_label: Domain,
                       scale: int = 4) -> torch.Tensor | None:
    """Ground truth for ``trg_label`` on the HR grid, or None if it does not exist."""
    return domain_view(hr_patch, lr_patch, trg_label, scale)


class ImageCache:
    """Decoded manifest images, loaded on first use."""

    def __init__(self, manifest: CorpusManifest, scale: int = 4):
        if not manifest.entries:
            raise EmptyCorpusError("manifest has no entries")
        self.manifest = manifest
        self.scale = scale
        self._cache: dict[int, tuple] = {}

    def __len__(self):
        return len(self.manifest.entries)

    def get(self, index: int):
        if index not in self._cache:
            self._cache[index] = load_entry(self.manifest.entries[index], self.scale)
        return self._cache[index]


def _source_choices(entry: ManifestEntry, wiring: AblationWiring) -> list[Domain]:
    doms = list(entry.domains)
    if wiring.source_domains == "lr_only":
        doms = [d for d in doms if d != Domain.HR]
    return doms


def build_batch(cache: ImageCache, cfg: TrainConfig, wiring: AblationWiring,
                data_rng: np.random.Generator, aug_rng: np.random.Generator) -> Batch:
    """Crop, pick domains, build supervision, then flip/rotate and MOA jointly."""
    trg_labels = sample_target_labels(cfg.batch_size, wiring.target_sampling, data_rng)
    samples = []
    for trg in trg_labels:
        idx = int(data_rng.integers(len(cache)))
        hr, lr = cache.get(idx)
        hr_p, lr_p, _, _ = extract_paired_patch(hr, lr, cfg.patch, data_rng, cfg.scale)
        choices = _source_choices(cache.manifest.entries[idx], wiring)
        src = choices[int(data_rng.integers(len(choices)))]
        image = domain_view(hr_p, lr_p, src, cfg.scale)
        target = select_supervision(hr_p, lr_p, trg, cfg.scale)
        if cfg.flip_rotate:
            image, target = flip_rotate(image, target, rng=aug_rng)
        samples.append(TrainingSample(image.float(), src, trg, None if target is None else target.float()))
    batch = Batch.from_samples(samples)
    draw = draw_moa(cfg.aug, *batch.images.shape, aug_rng)
    if draw.op is not None:
        perm = torch.from_numpy(aug_rng.permutation(len(batch)))
        batch.images = apply_moa(draw, batch.images, batch.images[perm], fill_value=cfg.aug.fill_value)
        batch.targets = apply_moa(draw, batch.targets, batch.targets[perm],
                                  fill_value=cfg.aug.fill_value, is_target=True)
        if draw.op in MIXING_OPS:
            batch.target_mask = batch.target_mask & batch.target_mask[perm]
    return batch


# -- state --------------------------------------------------------------------

def _stream_seeds(seed: int) -> dict[str, int]:
    data, aug, init = np.random.SeedSequence(seed).spawn(3)
    return {"data": int(data.generate_state(1, np.uint64)[0]),
            "aug": int(aug.generate_state(1, np.uint64)[0]),
            "init": int(init.generate_state(1, np.uint64)[0])}


class TrainState:
    """Models, optimizers and RNG streams for one run."""

    def __init__(self, cfg: TrainConfig, backbone=None):
        cfg.validate()
        self.cfg = cfg
        self.wiring = configure_ablation(cfg.ablation_mode)
        seeds = _stream_seeds(cfg.seed)
        self.data_rng = np.random.default_rng(seeds["data"])
        self.aug_rng = np.random.default_rng(seeds["aug"])
        init = torch.Generator().manual_seed(seeds["init"])
        self.generator = Generator(cfg.generator)
        init_weights(self.generator, init)
        self.discriminators = {}
        for name in self.wiring.discriminators:
            d = Discriminator(cfg.discriminator_config())
            init_weights(d, init)
            self.discriminators[name] = d
        self.opt_g = _adam(self.generator.parameters(), cfg)
        self.opt_d = _adam((p for d in self.discriminators.values() for p in d.parameters()), cfg)
        self.backbone = backbone if backbone is not None else load_backbone(cfg.backbone)
        self.iteration = 0

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr


def _num(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    params = list(params)
    kwargs = dict(lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    try:
        # the fused kernel is several times faster on the large discriminator
        return torch.optim.Adam(params, fused=True, **kwargs)
    except (RuntimeError, TypeError):
        return torch.optim.Adam(params, **kwargs)


def _set_requires_grad(models, flag: bool):
    for m in models:
        m.requires_grad_(flag)


def d_update(state: TrainState, batch: Batch) -> dict[str, float]:
    """One discriminator step on the adversarial and domain terms; G is untouched."""
    G, Ds, w = state.generator, state.discriminators, state.cfg.weights
    _set_requires_grad(Ds.values(), True)
    with torch.no_grad():
        fake = G(batch.images, batch.trg_labels)
        rec = G(fake, batch.src_labels) if "src" in Ds else None
    n = len(batch)
    # real and fake share one pass so the weight gradients are accumulated once
    maps, logits = Ds["trg"](torch.cat([batch.images, fake]))
    gan = adversarial_d(maps[:n], maps[n:])
    cls = cls_loss(logits[:n], batch.src_labels)
    if "src" in Ds:
        maps, logits = Ds["src"](torch.cat([batch.images, rec]))
        gan = gan + adversarial_d(maps[:n], maps[n:])
        cls = cls + cls_loss(logits[:n], batch.src_labels)
    parts = {"gan": gan, "cls": cls}
    total = total_d(parts, w, state.iteration)
    state.opt_d.zero_grad()
    if isinstance(total, torch.Tensor) and total.requires_grad:
        total.backward()
    state.opt_d.step()
    return {"d_gan": _num(gan), "d_cls": _num(cls), "d_total": _num(total)}


def g_update(state: TrainState, batch: Batch) -> dict[str, float]:
    """One generator step; discriminator weights are frozen."""
    G, Ds, w = state.generator, state.discriminators, state.cfg.weights
    _set_requires_grad(Ds.values(), False)
    fake = G(batch.images, batch.trg_labels)
    fake_map, fake_cls = Ds["trg"](fake)
    gan = adversarial_g(fake_map)
    cls = cls_loss(fake_cls, batch.trg_labels)
    rec = G(fake, batch.src_labels)
    cyc = cycle_loss(batch.images, rec)
    if "src" in Ds:
        rec_map, rec_cls = Ds["src"](rec)
        gan = gan + adversarial_g(rec_map)
        cls = cls + cls_loss(rec_cls, batch.src_labels)
    mask = batch.target_mask
    if bool(mask.any()):
        l1 = l1_loss(fake[mask], batch.targets[mask])
        per = perceptual_loss(fake[mask], batch.targets[mask], state.backbone)
    else:
        l1 = per = fake.new_zeros(())
    tv = tv_loss(fake)
    parts = {"per": per, "gan": gan, "tv": tv, "cls": cls, "l1": l1, "cyc": cyc}
    total = total_g(parts, w, state.iteration)
    state.opt_g.zero_grad()
    if isinstance(total, torch.Tensor) and total.requires_grad:
        total.backward()
    state.opt_g.step()
    _set_requires_grad(Ds.values(), True)
    stats = {f"g_{k}": _num(v) for k, v in parts.items()}
    stats["g_total"] = _num(total)
    stats["n_supervised"] = int(mask.sum())
    return stats


def train_step(state: TrainState, batch: Batch) -> dict:
    """D step then G step at the current iteration's learning rate."""
    lr = lr_schedule(state.iteration, state.cfg)
    state.set_lr(lr)
    G = state.generator
    G.train()
    stats = {"iter": state.iteration, "lr": lr}
    stats.update(d_update(state, batch))
    stats.update(g_update(state, batch))
    stats["trg_labels"] = [int(d) for d in batch.trg_labels]
    state.iteration += 1
    return stats


# -- checkpoints --------------------------------------------------------------

def _opt_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            t = val if isinstance(val, torch.Tensor) else torch.tensor(val)
            tensors[f"{prefix}.state.{idx}.{key}"] = t.detach().contiguous().clone()
    return tensors, sd["param_groups"]


def _load_opt(prefix: str, opt: torch.optim.Optimizer, tensors: dict, groups: list) -> None:
    state: dict = {}
    plen = len(prefix) + len(".state.")
    for name, t in tensors.items():
        if not name.startswith(prefix + ".state."):
            continue
        idx, key = name[plen:].split(".", 1)
        state.setdefault(int(idx), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Single safetensors file: named arrays plus a text header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"G.{k}": v.detach().contiguous().clone() for k, v in state.generator.state_dict().items()}
    for name, d in state.discriminators.items():
        tensors.update({f"D.{name}.{k}": v.detach().contiguous().clone() for k, v in d.state_dict().items()})
    og, groups_g = _opt_tensors("opt_g", state.opt_g)
    od, groups_d = _opt_tensors("opt_d", state.opt_d)
    tensors.update(og)
    tensors.update(od)
    meta = {
        "format_version": str(FORMAT_VERSION),
        "iteration": str(state.iteration),
        "config": json.dumps(state.cfg.to_dict(), sort_keys=True),
        "rng": json.dumps({"data": state.data_rng.bit_generator.state,
                           "aug": state.aug_rng.bit_generator.state}, sort_keys=True),
        "opt_g_groups": json.dumps(groups_g, sort_keys=True),
        "opt_d_groups": json.dumps(groups_d, sort_keys=True),
        "discriminators": ",".join(state.discriminators),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    # a single metadata entry keeps the header byte-stable (map order is not)
    save_file(tensors, str(tmp), metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    tmp.replace(path)
    return path


def read_header(path: str | Path) -> dict:
    with safe_open(str(path), framework="pt") as fh:
        raw = fh.metadata() or {}
    try:
        meta = json.loads(raw[META_KEY])
    except (KeyError, ValueError):
        raise CheckpointMismatchError(f"{path} is not an srstar checkpoint") from None
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint format {meta.get('format_version')}")
    return meta


def checkpoint_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(read_header(path)["config"]))


def load_checkpoint(path: str | Path, cfg: TrainConfig | None = None, backbone=None) -> TrainState:
    """Restore a full training state; ``cfg`` must match the stored echo."""
    meta = read_header(path)
    stored = TrainConfig.from_dict(json.loads(meta["config"]))
    if cfg is None:
        cfg = stored
    elif cfg.signature() != stored.signature():
        diff = sorted(k for k in cfg.signature() if cfg.signature()[k] != stored.signature().get(k))
        raise CheckpointMismatchError(f"checkpoint config differs from running config in {diff}")
    state = TrainState(cfg, backbone)
    with safe_open(str(path), framework="pt") as fh:
        tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    state.generator.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("G.")})
    for name, d in state.discriminators.items():
        prefix = f"D.{name}."
        d.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    _load_opt("opt_g", state.opt_g, tensors, json.loads(meta["opt_g_groups"]))
    _load_opt("opt_d", state.opt_d, tensors, json.loads(meta["opt_d_groups"]))
    rng = json.loads(meta["rng"])
    state.data_rng.bit_generator.state = rng["data"]
    state.aug_rng.bit_generator.state = rng["aug"]
    state.iteration = int(meta["iteration"])
    return state


def load_generator(path: str | Path) -> Generator:
    """Generator weights only, in eval mode."""
    cfg = checkpoint_config(path)
    g = Generator(cfg.generator)
    with safe_open(str(path), framework="pt") as fh:
        g.load_state_dict({k[2:]: fh.get_tensor(k) for k in fh.keys() if k.startswith("G.")})
    g.eval()
    g.requires_grad_(False)
    return g


def discriminator_names(path: str | Path) -> list[str]:
    return [n for n in read_header(path)["discriminators"].split(",") if n]


# -- runs ---------------------------------------------------------------------

def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:06d}.safetensors"


def _prune(ckpt_dir: Path, keep: int) -> None:
    found = sorted(ckpt_dir.glob("ckpt_*.safetensors"))
    for old in found[:-keep] if keep > 0 else []:
        old.unlink()


def run_training(cfg: TrainConfig, manifest: CorpusManifest, run_dir: str | Path,
                 resume: str | Path | None = None, backbone=None, log_every: int = 50):
    """Train for ``cfg.iterations`` steps, writing checkpoints and a JSONL log.

    Returns ``(final_checkpoint_path, log_records)`` where the records are the
    steps executed by this call.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    log_path = run_dir / "train_log.jsonl"
    if resume is not None:
        state = load_checkpoint(resume, cfg, backbone)
        if log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines()
                    if ln and json.loads(ln)["iter"] < state.iteration]
            log_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        state = TrainState(cfg, backbone)
        if log_path.exists():
            log_path.unlink()
    cache = ImageCache(manifest, cfg.scale)
    records = []
    last = None
    if state.iteration >= cfg.iterations:
        last = Path(resume) if resume is not None else save_checkpoint(state, ckpt_dir / checkpoint_name(0))
        return last, records
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a") as fh:
        while state.iteration < cfg.iterations:
            batch = build_batch(cache, cfg, state.wiring, state.data_rng, state.aug_rng)
            stats = train_step(state, batch)
            records.append(stats)
            fh.write(json.dumps(stats) + "\n")
            fh.flush()
            if state.iteration % log_every == 0:
                log.info("iter %d lr %.2e g_total %.4f d_total %.4f", state.iteration, stats["lr"],
                         stats["g_total"], stats["d_total"])
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations:
                last = save_checkpoint(state, ckpt_dir / checkpoint_name(state.iteration))
                _prune(ckpt_dir, cfg.keep_checkpoints)
    return last, records
