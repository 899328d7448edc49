"""Timing comparison of the compiled kernel backend against the NumPy fallback.

Two views:

* per-kernel microbenchmarks at the shapes the default desk config actually
  hits (in-process, both backends via ``available_backends()``);
* one short end-to-end training run per backend, in subprocesses, because
  the backend binds at import time (``CSKT_KERNELS`` environment variable).

Run from the repository root after an editable install::

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --repeats 200 --steps 30
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cskt._kernels import available_backends

# shapes seen by a d_model=64, seq-len-16, 4-head forward/backward pass
CASES = {
    "relu_fwd": lambda rng: (rng.standard_normal((16, 128)),),
    "relu_bwd": lambda rng: (rng.standard_normal((16, 128)),
                             rng.standard_normal((16, 128))),
    "sigmoid_fwd": lambda rng: (rng.standard_normal((16, 1)),),
    "sigmoid_bwd": lambda rng: (1.0 / (1.0 + np.exp(-rng.standard_normal((16, 1)))),
                                rng.standard_normal((16, 1))),
    "softmax_fwd": lambda rng: (rng.standard_normal((64, 16)),),
    "softmax_bwd": lambda rng: (_softmax(rng.standard_normal((64, 16))),
                                rng.standard_normal((64, 16))),
    "layer_norm_fwd": lambda rng: (rng.standard_normal((16, 64)),
                                   rng.standard_normal(64),
                                   rng.standard_normal(64), 1e-9),
    "adamw_update": lambda rng: (rng.standard_normal((64, 128)),
                                 rng.standard_normal((64, 128)),
                                 np.zeros((64, 128)), np.zeros((64, 128)),
                                 3, 1e-3, 0.9, 0.999, 1e-8, 0.01),
}

TRAIN_SNIPPET = """
import time
from cskt.data import SynthWorldConfig, generate_synthetic_world
from cskt.encoder import EncoderConfig
from cskt.head import HeadConfig, LossWeights
from cskt.model import ModelConfig
from cskt.training import TrainConfig, run_stage1
from cskt._kernels import BACKEND

world = generate_synthetic_world(SynthWorldConfig(
    n_concepts=24, n_train=200, n_dev=8, n_test=8, n_parallel=8, seed=0))
config = ModelConfig(
    EncoderConfig(vocab_size=len(world.vocab), d_model=64, n_layers=2,
                  n_heads=4, d_ff=128, max_len=16, seed=0),
    HeadConfig(d_model=64, d_embed=64, seed=0))
items = world.splits["train"][0] + world.splits["train"][1]
tc = TrainConfig(stage=1, total_steps={steps}, batch_size=16, lr=1e-3,
                 warmup_steps=5, loss_weights=LossWeights(ce=1.0), seed=0)
start = time.perf_counter()
run_stage1(tc, items, model_config=config, vocab=world.vocab)
print(f"{{BACKEND}} {{time.perf_counter() - start:.3f}}")
"""


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _layer_norm_grad_case(rng, backend):
    x, gain, bias, eps = CASES["layer_norm_fwd"](rng)
    _, xhat, inv_std = backend.layer_norm_fwd(x, gain, bias, eps)
    return (rng.standard_normal(x.shape), xhat, inv_std, gain)


def bench_micro(repeats: int) -> None:
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    header = f"{'kernel':16s}" + "".join(f"{name + ' (us)':>16s}" for name in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10s}"
    print(header)
    names = list(CASES) + ["layer_norm_bwd"]
    for kernel in names:
        per_backend = []
        for backend_name, backend in backends.items():
            rng = np.random.default_rng(0)
            if kernel == "layer_norm_bwd":
                args = _layer_norm_grad_case(rng, backend)
            else:
                args = CASES[kernel](rng)
            fn = getattr(backend, kernel)
            if kernel == "adamw_update":
                # in-place kernel: rebuild mutable state each trial
                def call(args=args, fn=fn):
                    p, g, m, v, *rest = args
                    fn(p.copy(), g, m.copy(), v.copy(), *rest)
            else:
                def call(args=args, fn=fn):
                    fn(*args)
            best = min(timeit.repeat(call, number=repeats, repeat=3)) / repeats
            per_backend.append(best * 1e6)
        row = f"{kernel:16s}" + "".join(f"{t:16.2f}" for t in per_backend)
        if len(per_backend) > 1:
            row += f"{per_backend[0] / per_backend[1]:9.2f}x"
        print(row)


def bench_end_to_end(steps: int) -> None:
    print(f"\nend-to-end: {steps} training steps of the desk-scale model per backend")
    for backend_name in available_backends():
        env = dict(os.environ, CSKT_KERNELS=backend_name)
        out = subprocess.run(
            [sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)],
            capture_output=True, text=True, env=env, check=True)
        reported, wall = out.stdout.split()
        assert reported == backend_name, f"subprocess ran {reported}, wanted {backend_name}"
        print(f"  {backend_name:10s} {wall}s")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=500,
                        help="microbenchmark calls per timing sample")
    parser.add_argument("--steps", type=int, default=20,
                        help="training steps for the end-to-end comparison")
    parser.add_argument("--no-train", action="store_true",
                        help="skip the end-to-end comparison")
    args = parser.parse_args()
    bench_micro(args.repeats)
    if not args.no_train:
        bench_end_to_end(args.steps)


if __name__ == "__main__":
    main()
