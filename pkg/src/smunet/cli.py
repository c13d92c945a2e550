"""``smunet`` command line: synth, train, eval and ablate.

Values resolve as command-line flag, then JSON config file, then built-in
default.  ``SMUNET_SEED`` supplies the seed when neither flag nor file does.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .decomposition import STYLE_VARIANTS
from .engine import MASK_POLICIES, TrainConfig, load_checkpoint, train
from .evaluation import emit_plot, emit_table, evaluate_subsets, read_table
from .objectives import LossWeights
from .phantom import ModalityMask, PhantomConfig, PhantomError, generate_phantom, ingest_raw, write_raw

log = logging.getLogger("smunet")

MANIFEST = "manifest.json"
ABLATION_HEADER = ["consistency", "content", "style", "style_module", "dice_wt", "dice_ct", "dice_et", "average"]


class CommandError(Exception):
    """A user-facing failure; reported on stderr with exit status 2."""


# --- run manifest -------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    started: str = field(default_factory=_now)
    finished: str | None = None
    outputs: list[str] = field(default_factory=list)
    run_id: str = ""

    def __post_init__(self):
        if not self.run_id:
            # content address of what was run, independent of where the outputs went
            blob = json.dumps({"command": self.command[:1], "config": self.config}, sort_keys=True)
            self.run_id = hashlib.sha1(blob.encode()).hexdigest()[:12]

    def write(self, out_dir: Path):
        tmp = out_dir / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True))
        os.replace(tmp, out_dir / MANIFEST)

    @classmethod
    def read(cls, out_dir: Path) -> "RunManifest":
        return cls(**json.loads((Path(out_dir) / MANIFEST).read_text()))


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CommandError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise CommandError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _start_run(out: Path, argv: list[str], config: dict) -> RunManifest:
    manifest = RunManifest(command=argv, config=config)
    manifest.write(out)
    return manifest


def _finish_run(out: Path, manifest: RunManifest, outputs):
    manifest.outputs = sorted(str(Path(p).relative_to(out)) for p in outputs)
    manifest.finished = _now()
    manifest.write(out)


# --- configuration ------------------------------------------------------------------

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CommandError(f"config file {path} must hold a JSON object")
    return data


def _pick(data: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in data.items() if k in names}


def _check_keys(data: dict, *classes):
    known = {f.name for cls in classes for f in fields(cls)} | {f.name for f in fields(LossWeights)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise CommandError(f"unknown config keys: {', '.join(unknown)}")


def _resolve_seed(flag, file_value, default=0) -> int:
    if flag is not None:
        return flag
    if file_value is not None:
        return int(file_value)
    env = os.environ.get("SMUNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CommandError(f"SMUNET_SEED must be an integer, got {env!r}") from exc
    return default


def phantom_config(args, file_cfg: dict) -> PhantomConfig:
    values = _pick(file_cfg, PhantomConfig)
    values["seed"] = _resolve_seed(args.seed, file_cfg.get("seed"))
    if args.count is not None:
        values["num_volumes"] = args.count
    if args.size is not None:
        values["spatial_size"] = (args.size,) * 3
    if args.style_gap is not None:
        values["style_gap"] = args.style_gap
    if args.tumor_probability is not None:
        values["tumor_probability"] = args.tumor_probability
    if "spatial_size" in values:
        values["spatial_size"] = tuple(values["spatial_size"])
    try:
        return PhantomConfig(**values)
    except (PhantomError, TypeError, ValueError) as exc:
        raise CommandError(f"invalid phantom config: {exc}") from exc


def train_config(args, file_cfg: dict) -> TrainConfig:
    values = _pick(file_cfg, TrainConfig)
    weights = dict(values.pop("weights", None) or {})
    weights.update(_pick(file_cfg, LossWeights))
    values["seed"] = _resolve_seed(args.seed, file_cfg.get("seed"))
    flags = {
        "style_module": args.style_module, "epochs": args.epochs, "mask": args.mask,
        "mask_policy": args.mask_policy, "learning_rate": args.lr, "d_z": args.d_z,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    for name in ("lambda_seg", "lambda_consistency", "lambda_style", "lambda_content"):
        v = getattr(args, name)
        if v is not None:
            weights[name] = v
    if args.no_texture_loss:
        values["add_texture_loss"] = False
    if args.no_modification:
        values["use_modification"] = False
    try:
        values["weights"] = LossWeights(**weights)
        return TrainConfig(**values)
    except (PhantomError, TypeError, ValueError) as exc:
        raise CommandError(f"invalid training config: {exc}") from exc


def _load_data(path: str, spatial_size=None):
    if not Path(path).is_dir():
        raise CommandError(f"data directory {path} not found")
    try:
        data = ingest_raw(path, spatial_size)
    except PhantomError as exc:
        raise CommandError(str(exc)) from exc
    if not data:
        raise CommandError(f"no cases found in {path}")
    return data


# --- commands -----------------------------------------------------------------------

def cmd_synth(args, argv) -> int:
    file_cfg = _load_config_file(args.config)
    _check_keys(file_cfg, PhantomConfig, TrainConfig)
    cfg = phantom_config(args, file_cfg)
    out = _prepare_out_dir(args.out, args.force)
    manifest = _start_run(out, argv, {"phantom": _phantom_dict(cfg)})
    cases = write_raw(generate_phantom(cfg), out)
    _finish_run(out, manifest, cases)
    print(f"wrote {len(cases)} cases to {out}")
    return 0


def _phantom_dict(cfg: PhantomConfig) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v) for f in fields(cfg)}


def cmd_train(args, argv) -> int:
    file_cfg = _load_config_file(args.config)
    _check_keys(file_cfg, PhantomConfig, TrainConfig)
    cfg = train_config(args, file_cfg)
    data = _load_data(args.data, cfg.spatial_size)
    out = _prepare_out_dir(args.out, args.force)
    manifest = _start_run(out, argv, {"train": cfg.to_dict(), "data": str(Path(args.data).resolve())})
    train(cfg, data, run_dir=out)
    _finish_run(out, manifest, [p for p in out.iterdir() if p.name != MANIFEST])
    print(f"trained {cfg.epochs} epochs x {len(data)} volumes; run in {out}")
    return 0


def _final_checkpoint(run_dir: str):
    ckpt = Path(run_dir) / "final.ckpt"
    if not ckpt.is_file():
        raise CommandError(f"no final checkpoint in {run_dir}")
    return load_checkpoint(ckpt)


def _masks(arg: str | None):
    if arg is None:
        return None
    try:
        return [ModalityMask.parse(arg)]
    except PhantomError as exc:
        raise CommandError(str(exc)) from exc


def cmd_eval(args, argv) -> int:
    state = _final_checkpoint(args.run)
    data = _load_data(args.data, state.config.spatial_size)
    report = evaluate_subsets(state, data, masks=_masks(args.mask))
    try:
        table = emit_table(report, args.out)
    except OSError as exc:
        raise CommandError(str(exc)) from exc
    print(f"wrote {table}")
    if args.plot:
        reports = {Path(args.run).name or "model": report}
        for entry in args.compare or []:
            name, _, path = entry.partition("=")
            if not path:
                raise CommandError(f"--compare expects NAME=CSV, got {entry!r}")
            reports[name] = read_table(path)
        print(f"wrote {emit_plot(reports, args.plot)}")
    return 0


def ablation_grid(base: TrainConfig) -> list[tuple[dict, TrainConfig]]:
    """Three single-loss ablations on the adversarial variant, then each full variant."""
    w = base.weights
    adv = replace(base, style_module="adversarial")
    grid = [
        ({"consistency": False, "content": True, "style": True},
         replace(adv, weights=replace(w, lambda_consistency=0.0))),
        ({"consistency": True, "content": False, "style": True},
         replace(adv, weights=replace(w, lambda_content=0.0))),
        ({"consistency": True, "content": True, "style": False},
         replace(adv, weights=replace(w, lambda_style=0.0), use_modification=False)),
    ]
    on = {"consistency": True, "content": True, "style": True}
    grid += [(on, replace(base, style_module=v)) for v in ("distribution", "texture", "adversarial")]
    return grid


def _split(data, test_fraction: float):
    n_test = max(1, int(round(len(data) * test_fraction)))
    if n_test >= len(data):
        raise CommandError(f"need more than {n_test} cases to hold out a test split")
    return data[:-n_test], data[-n_test:]


def cmd_ablate(args, argv) -> int:
    file_cfg = _load_config_file(args.config)
    _check_keys(file_cfg, PhantomConfig, TrainConfig)
    cfg = train_config(args, file_cfg)
    data = _load_data(args.data, cfg.spatial_size)
    if args.test_data:
        train_set, test_set = data, _load_data(args.test_data, cfg.spatial_size)
    else:
        train_set, test_set = _split(data, args.test_fraction)
    out = _prepare_out_dir(args.out, args.force)
    manifest = _start_run(out, argv, {"train": cfg.to_dict(), "data": str(Path(args.data).resolve())})
    mask = cfg.fixed_mask
    lines = [",".join(ABLATION_HEADER)]
    for k, (toggles, run_cfg) in enumerate(ablation_grid(cfg)):
        state = train(run_cfg, train_set, run_dir=out / f"config_{k}", checkpoint_every=0)
        row = evaluate_subsets(state, test_set, masks=[mask]).rows[0]
        avg = float(np.mean(row.scores))
        flags = [str(int(toggles[n])) for n in ("consistency", "content", "style")]
        lines.append(",".join([*flags, run_cfg.style_module, *(repr(s) for s in row.scores), repr(avg)]))
        log.info("config %d %s: WT %.4f CT %.4f ET %.4f", k, run_cfg.style_module, *row.scores)
    table = out / "ablation.csv"
    tmp = out / "ablation.csv.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, table)
    _finish_run(out, manifest, [p for p in out.iterdir() if p.name != MANIFEST])
    print(f"wrote {table}")
    return 0


# --- parser -------------------------------------------------------------------------

def _size(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return v


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--data", required=True, help="directory of raw cases")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.add_argument("--style-module", choices=STYLE_VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mask", help="present modalities as 4 bits, FLAIR T1 T1c T2 (e.g. 1000)")
    p.add_argument("--mask-policy", choices=MASK_POLICIES)
    p.add_argument("--lr", type=float)
    p.add_argument("--d-z", type=int)
    for name in ("seg", "consistency", "style", "content"):
        p.add_argument(f"--lambda-{name}", type=float, dest=f"lambda_{name}")
    p.add_argument("--no-texture-loss", action="store_true")
    p.add_argument("--no-modification", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smunet", description="Missing-modality brain tumour segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--config", help="JSON file with PhantomConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=_size)
    p.add_argument("--style-gap", type=float)
    p.add_argument("--tumor-probability", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="co-train both paths")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice table over modality subsets")
    p.add_argument("--run", required=True, help="run directory holding final.ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--mask", help="evaluate a single subset, e.g. 1000")
    p.add_argument("--plot", help="also write a bar chart to this image path")
    p.add_argument("--compare", action="append", metavar="NAME=CSV",
                   help="extra table to include in the plot (repeatable)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss and style-module ablation grid")
    _add_train_flags(p)
    p.add_argument("--test-data", help="held-out cases (default: last --test-fraction of --data)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except CommandError as exc:
        print(f"smunet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
