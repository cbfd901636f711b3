"""Compare the compiled and numpy MLP kernels: agreement and speed.

    python benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Times ``mlp_loss_grad`` (the training/sharpness hot loop) and ``mlp_loss``
for a few layer shapes and batch sizes, and checks the two backends agree.
When both are present the ``auto`` size-based dispatch is timed as well.
"""

import argparse
import json
import sys
import timeit
from types import SimpleNamespace

import numpy as np

from sharpdiag import kernels
from sharpdiag.diffcore import mlp_layout

SHAPES = ((20, 32, 32, 2), (20, 64, 64, 2))
BATCHES = (32, 64, 256, 2000)


def bench_case(backends, dims, m, repeat, rng):
    dims = np.asarray(dims, dtype=np.int64)
    n_params = sum(e.size for e in mlp_layout(tuple(dims)))
    params = 0.2 * rng.standard_normal(n_params)
    X = rng.standard_normal((m, dims[0]))
    y = rng.integers(0, 2, m).astype(np.int64)
    sw = np.where(y == 0, 0.9, 0.1)
    row = {"dims": dims.tolist(), "batch": m}
    ref = None
    for name, mod in backends.items():
        loss, grad = mod.mlp_loss_grad(params, dims, kernels.RELU, X, y, sw)
        if name == "auto":
            pass
        elif ref is None:
            ref = (loss, grad)
        else:
            row["max_grad_diff"] = float(np.max(np.abs(grad - ref[1])))
            row["loss_diff"] = abs(loss - ref[0])
        for fn in ("mlp_loss_grad", "mlp_loss"):
            f = getattr(mod, fn)
            t = min(timeit.repeat(lambda: f(params, dims, kernels.RELU, X, y, sw), number=repeat, repeat=3))
            row[f"{name}_{fn}_us"] = 1e6 * t / repeat
    if "cython" in backends:
        row["speedup_grad"] = row["python_mlp_loss_grad_us"] / row["cython_mlp_loss_grad_us"]
    return row


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--json", help="also write the rows as JSON")
    args = parser.parse_args(argv)

    backends = {name: kernels.get_backend(name) for name in ("python", "cython")
                if name in kernels.available_backends()}
    if "cython" in backends:
        backends["auto"] = SimpleNamespace(mlp_loss_grad=kernels._auto_loss_grad, mlp_loss=kernels._auto_loss)
    else:
        print("compiled backend not built; timing the numpy backend only", file=sys.stderr)
    both = "cython" in backends
    rng = np.random.default_rng(0)
    rows = [bench_case(backends, dims, m, args.repeat, rng) for dims in SHAPES for m in BATCHES]

    print(f"{'dims':<16}{'batch':>6}" + "".join(f"{b + ' grad us':>18}" for b in backends)
          + (f"{'cy/py':>9}{'max |dg|':>11}" if both else ""))
    for r in rows:
        line = f"{'x'.join(map(str, r['dims'])):<16}{r['batch']:>6}"
        line += "".join(f"{r[f'{b}_mlp_loss_grad_us']:>18.1f}" for b in backends)
        if both:
            line += f"{r['speedup_grad']:>8.2f}x{r['max_grad_diff']:>11.1e}"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
