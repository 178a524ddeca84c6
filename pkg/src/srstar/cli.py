"""Command-line entry points: synth, train, infer, eval, report.

Configuration comes from defaults, then an optional YAML file (``--config``),
then flat ``--key value`` overrides, where nested keys use dots
(``--aug.mixup_alpha 0.8``). Run directories live under ``$SRSTAR_RUNS``
(default ``./runs``) unless ``--run-dir`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .corpus import CorpusManifest, EmptyCorpusError, scan_corpus
from .degradation import SYNTHETIC_DOMAINS, ConfigError, Domain, InvalidDomainError, synth_lr
from .evalkit import evaluate, super_resolve, write_results_table
from .losses import BackboneUnavailableError, TrainingDivergenceError, load_backbone
from .pngio import ImageReadError, list_pngs, read_png, write_png
from .trainer import (
    ABLATION_MODES, CheckpointMismatchError, ConfigValidationError, TrainConfig, load_generator,
    run_training,
)

log = logging.getLogger("srstar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
RUNS_ENV = "SRSTAR_RUNS"
SNAPSHOT = "config.yaml"
EVAL_DOMAINS = ("bicubic", "bilinear", "nearest", "real")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration --------------------------------------------------------------

def parse_overrides(tokens: list[str]) -> dict:
    """Turn ``--a.b value`` pairs into a nested dict; values are YAML scalars."""
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override --{key} is missing a value")
            raw = tokens[i + 1]
            i += 2
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(config_file: str | None, overrides: dict, desk_scale: bool = False,
                 mode: str | None = None) -> TrainConfig:
    """Defaults < file < CLI; the desk-scale profile replaces the defaults layer."""
    data = (TrainConfig.desk_scale() if desk_scale else TrainConfig()).to_dict()
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a mapping")
        data = _merge(data, loaded)
    data = _merge(data, overrides)
    if mode is not None:
        data["ablation_mode"] = mode
    return TrainConfig.from_dict(data).validate()


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def resolve_run_dir(run_dir: str | None, name: str) -> Path:
    return Path(run_dir) if run_dir else runs_root() / name


def write_snapshot(run_dir: Path, cfg: TrainConfig, extra: dict | None = None) -> Path:
    """Write the config snapshot once; a rerun must agree with the stored one."""
    path = run_dir / SNAPSHOT
    body = {"config": cfg.to_dict(), **(extra or {})}
    if path.exists():
        stored = yaml.safe_load(path.read_text()) or {}
        old = TrainConfig.from_dict(stored.get("config", {}))
        if old.signature() != cfg.signature():
            raise UsageError(f"{run_dir} already holds a run with a different configuration")
        return path
    run_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(yaml.safe_dump(body, sort_keys=True))
    os.replace(tmp, path)
    return path


def _manifest(data: list[str] | None, manifest: str | None) -> CorpusManifest:
    if manifest:
        if not Path(manifest).is_file():
            raise DataError(f"manifest not found: {manifest}")
        return CorpusManifest.load(manifest)
    if not data:
        raise UsageError("give --data <folder> or --manifest <file>")
    return scan_corpus(data)


# -- commands -------------------------------------------------------------------

def cmd_synth(args, overrides) -> int:
    if overrides:
        raise UsageError(f"synth takes no config overrides: {sorted(overrides)}")
    hr_files = list_pngs(args.hr)
    if not hr_files:
        raise DataError(f"no PNG images in {args.hr}")
    out = Path(args.out)
    written = 0
    for path in hr_files:
        try:
            hr = read_png(path).double()
        except ImageReadError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        side = (hr.shape[-2] // args.scale * args.scale, hr.shape[-1] // args.scale * args.scale)
        hr = hr[:, :side[0], :side[1]]
        for dom in SYNTHETIC_DOMAINS:
            write_png(out / dom.short / path.name, synth_lr(hr, dom, scale=args.scale), bits=args.bits)
            written += 1
    if not written:
        raise DataError(f"no readable images in {args.hr}")
    print(f"wrote {written} LR images to {out}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    cfg = build_config(args.config, overrides, args.desk_scale, args.mode)
    run_dir = resolve_run_dir(args.run_dir, args.name)
    man = _manifest(args.data, args.manifest)
    write_snapshot(run_dir, cfg, {"data": [str(r) for r in (args.data or [])]})
    man_path = run_dir / "manifest.json"
    if not man_path.exists():
        man.save(man_path)
    if args.resume and not Path(args.resume).is_file():
        raise DataError(f"checkpoint not found: {args.resume}")
    ckpt, records = run_training(cfg, man, run_dir, resume=args.resume, log_every=args.log_every)
    if not records:
        print(f"nothing to do: checkpoint {ckpt} already at {cfg.iterations} iterations")
    else:
        print(f"trained {len(records)} iterations; final checkpoint {ckpt}")
    return EXIT_OK


def cmd_infer(args, overrides) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    files = list_pngs(args.input)
    if not files:
        raise DataError(f"no PNG images in {args.input}")
    g = load_generator(args.checkpoint)
    done = skipped = 0
    for path in files:
        try:
            lr = read_png(path)
        except ImageReadError as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped += 1
            continue
        write_png(Path(args.output) / path.name, super_resolve(g, lr, args.scale), bits=args.bits)
        done += 1
    print(f"super-resolved {done} images, skipped {skipped}")
    return EXIT_OK if done else EXIT_DATA


def _backbone(name: str):
    return None if name == "none" else load_backbone(name)


def cmd_eval(args, overrides) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    domains = [d.strip() for d in args.domains.split(",") if d.strip()]
    for d in domains:
        Domain.parse(d)
    man = _manifest(args.data, args.manifest)
    out = Path(args.out)
    panels = out / "panels" if args.panels else None
    records = evaluate(args.checkpoint, man, domains, backbone=_backbone(args.backbone),
                       panel_dir=panels)
    table = write_results_table(records, out / "results.tsv")
    print(table.read_text(), end="")
    missing = [r.domain for r in records if r.average_of is None and r.count == 0]
    if missing:
        log.error("no images evaluated for: %s", ", ".join(missing))
        return EXIT_DATA
    return EXIT_OK


def cmd_report(args, overrides) -> int:
    """Summarise a run directory (training log tail and any results tables) as markdown."""
    run_dir = Path(args.run_dir) if args.run_dir else runs_root() / args.name
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    lines = [f"# Run report: {run_dir.name}", ""]
    snap = run_dir / SNAPSHOT
    if snap.exists():
        cfg = yaml.safe_load(snap.read_text())["config"]
        lines += ["## Configuration", "",
                  *(f"- {k}: {cfg[k]}" for k in ("ablation_mode", "iterations", "batch_size", "patch", "seed")), ""]
    log_path = run_dir / "train_log.jsonl"
    if log_path.exists():
        recs = [json.loads(ln) for ln in log_path.read_text().splitlines() if ln]
        if recs:
            keys = ["iter", "lr", "g_total", "d_total", "g_l1", "g_cyc", "g_gan"]
            lines += ["## Training", "", "| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
            step = max(1, len(recs) // 10)
            for r in recs[::step] + ([recs[-1]] if (len(recs) - 1) % step else []):
                lines.append("| " + " | ".join(f"{r[k]:.4g}" if isinstance(r[k], float) else str(r[k])
                                               for k in keys) + " |")
            lines.append("")
    for table in sorted(run_dir.rglob("results.tsv")):
        rows = [ln.split("\t") for ln in table.read_text().strip().splitlines()]
        lines += [f"## Evaluation ({table.parent.relative_to(run_dir)})", "",
                  "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0]),
                  *("| " + " | ".join(r) + " |" for r in rows[1:]), ""]
        for panel in sorted((table.parent / "panels").glob("*.png")):
            lines.append(f"![{panel.stem}]({panel.relative_to(run_dir)})")
        lines.append("")
    out = run_dir / "report.md"
    out.write_text("\n".join(lines))
    print(f"wrote {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srstar", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    kw = dict(allow_abbrev=False)
    sub.required = True

    s = sub.add_parser("synth", **kw, help="write bicubic/bilinear/nearest LR folders from an HR folder")
    s.add_argument("--hr", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--bits", type=int, choices=(8, 16), default=8)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", **kw, help="train (or resume) a run; extra --key value pairs override the config")
    t.add_argument("--data", nargs="+")
    t.add_argument("--manifest")
    t.add_argument("--config")
    t.add_argument("--mode", choices=ABLATION_MODES)
    t.add_argument("--desk-scale", action="store_true")
    t.add_argument("--resume")
    t.add_argument("--run-dir")
    t.add_argument("--name", default="default")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", **kw, help="blind SR of every PNG in a folder")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--scale", type=int, default=4)
    i.add_argument("--bits", type=int, choices=(8, 16), default=8)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", **kw, help="per-domain PSNR/SSIM/LPIPS table")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", nargs="+")
    e.add_argument("--manifest")
    e.add_argument("--domains", default=",".join(EVAL_DOMAINS))
    e.add_argument("--backbone", default="fixed-random", help="fixed-random, vgg19, alexnet or none")
    e.add_argument("--out", required=True)
    e.add_argument("--panels", action="store_true", help="also write LR | SR | HR panels")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", **kw, help="markdown summary of a run directory")
    r.add_argument("--run-dir")
    r.add_argument("--name", default="default")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if rest and args.command != "train":
            raise UsageError(f"unrecognised arguments: {' '.join(rest)}")
        overrides = parse_overrides(rest)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, overrides)
    except (UsageError, ConfigValidationError, CheckpointMismatchError, ConfigError,
            InvalidDomainError, BackboneUnavailableError) as exc:
        problems = getattr(exc, "problems", None)
        print(f"error: {exc}" if not problems else "error: invalid configuration:\n  "
              + "\n  ".join(problems), file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptyCorpusError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
