"""Desk-scale directional benchmark: SMU-Net variants vs a Dice-only baseline.

Every run trains on the same synthetic split with a single-modality (FLAIR)
mask and reports the joint-loss trajectory plus test Dice.  The baseline
zeroes the consistency, style and content weights and disables the style
modification, leaving a plain U-Net on the masked input.

    python -m smunet.benchmark --out bench_runs
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .engine import TrainConfig, train
from .evaluation import evaluate_subsets
from .objectives import LossReport, LossWeights
from .phantom import ModalityMask, PhantomConfig, generate_phantom

log = logging.getLogger(__name__)

VARIANTS = ("distribution", "texture", "adversarial")
BASELINE = "baseline"


@dataclass(frozen=True)
class BenchmarkSetup:
    data_seed: int = 7
    n_train: int = 40
    n_test: int = 10
    size: int = 32
    style_gap: float = 0.5
    mask: str = "1000"
    epochs: int = 20
    train_seeds: tuple[int, ...] = (0, 1, 2)


@dataclass
class RunResult:
    method: str
    seed: int
    initial_joint: float
    final_joint: float
    dice_wt: float
    dice_ct: float
    dice_et: float
    seconds: float
    run_dir: str


def make_split(setup: BenchmarkSetup):
    cfg = PhantomConfig((setup.size,) * 3, setup.n_train + setup.n_test, setup.data_seed, setup.style_gap)
    vols = generate_phantom(cfg)
    return vols[:setup.n_train], vols[setup.n_train:]


def method_config(method: str, setup: BenchmarkSetup, seed: int) -> TrainConfig:
    base = TrainConfig(epochs=setup.epochs, seed=seed, mask=setup.mask, spatial_size=(setup.size,) * 3)
    if method == BASELINE:
        return replace(base, style_module="texture", use_modification=False,
                       weights=LossWeights(1.0, 0.0, 0.0, 0.0))
    return replace(base, style_module=method)


def read_losses(run_dir: Path) -> list[LossReport]:
    with open(Path(run_dir) / "losses.jsonl") as fh:
        return [LossReport.from_json(line) for line in fh if line.strip()]


def joint_trajectory(reports: list[LossReport], steps_per_epoch: int) -> tuple[float, float]:
    """(joint at the first step, mean joint over the last epoch)."""
    initial = reports[0].joint
    final = float(np.mean([r.joint for r in reports[-steps_per_epoch:]]))
    return initial, final


def run_method(method: str, seed: int, setup: BenchmarkSetup, train_set, test_set, out: Path) -> RunResult:
    cfg = method_config(method, setup, seed)
    run_dir = out / f"{method}_seed{seed}"
    t0 = time.time()
    state = train(cfg, train_set, run_dir=run_dir, checkpoint_every=0)
    seconds = time.time() - t0
    report = evaluate_subsets(state, test_set, masks=[ModalityMask.parse(setup.mask)])
    initial, final = joint_trajectory(read_losses(run_dir), len(train_set))
    row = report.rows[0]
    result = RunResult(method, seed, initial, final, row.dice_wt, row.dice_ct, row.dice_et, seconds, str(run_dir))
    log.info("%s seed=%d: joint %.4f -> %.4f, WT %.4f CT %.4f ET %.4f (%.0fs)", method, seed,
             initial, final, row.dice_wt, row.dice_ct, row.dice_et, seconds)
    return result


def run_benchmark(out: str | Path, setup: BenchmarkSetup | None = None,
                  methods=(BASELINE, *VARIANTS)) -> list[RunResult]:
    setup = setup or BenchmarkSetup()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = make_split(setup)
    results = [run_method(m, s, setup, train_set, test_set, out)
               for s in setup.train_seeds for m in methods]
    (out / "results.json").write_text(json.dumps(
        {"setup": asdict(setup), "runs": [asdict(r) for r in results]}, indent=2))
    return results


def mean_wt(results: list[RunResult]) -> dict[str, float]:
    by_method: dict[str, list[float]] = {}
    for r in results:
        by_method.setdefault(r.method, []).append(r.dice_wt)
    return {m: float(np.mean(v)) for m, v in by_method.items()}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="bench_runs")
    parser.add_argument("--epochs", type=int, default=BenchmarkSetup.epochs)
    parser.add_argument("--seeds", type=int, nargs="+", default=list(BenchmarkSetup.train_seeds))
    parser.add_argument("--methods", nargs="+", default=[BASELINE, *VARIANTS])
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = BenchmarkSetup(epochs=args.epochs, train_seeds=tuple(args.seeds))
    results = run_benchmark(args.out, setup, tuple(args.methods))
    for method, wt in mean_wt(results).items():
        print(f"{method:>14s}  mean WT Dice {wt:.4f}")


if __name__ == "__main__":
    main()
