"""Time one co-training step with the oneDNN conv route on and off.

    python benchmarks/bench_conv.py --steps 5

The route is chosen per call from ``SMUNET_FAST_CONV``, so both settings run
in one process on identical models and data.  Also reports the largest
relative difference in the step's losses between the two routes.
"""

import argparse
import os
import time

import torch

from smunet.engine import TrainConfig, init_state, train_step
from smunet.phantom import PhantomConfig, generate_phantom


def time_steps(flag: str, cfg: TrainConfig, volumes, steps: int):
    os.environ["SMUNET_FAST_CONV"] = flag
    state = init_state(cfg)
    state, first = train_step(state, volumes[0])  # warm-up, also the comparison point
    start = time.perf_counter()
    for i in range(steps):
        state, _ = train_step(state, volumes[(i + 1) % len(volumes)])
    return (time.perf_counter() - start) / steps, first


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=5)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--style-module", default="adversarial")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    torch.set_num_threads(args.threads)

    cfg = TrainConfig(spatial_size=(args.size,) * 3, style_module=args.style_module)
    volumes = generate_phantom(PhantomConfig(cfg.spatial_size, num_volumes=4, seed=0))
    fast, r_fast = time_steps("1", cfg, volumes, args.steps)
    stock, r_stock = time_steps("0", cfg, volumes, args.steps)

    terms = ("seg_full", "seg_missing", "mi", "l1", "style", "content")
    drift = max(abs(getattr(r_fast, t) - getattr(r_stock, t)) / max(abs(getattr(r_stock, t)), 1e-12)
                for t in terms)
    print(f"{'route':>8s} {'s/step':>8s}")
    print(f"{'oneDNN':>8s} {fast:8.3f}")
    print(f"{'stock':>8s} {stock:8.3f}")
    print(f"speed-up x{stock / fast:.2f}; max relative loss difference on step 0: {drift:.1e}")


if __name__ == "__main__":
    main()
