"""Smoke test for the bpfa_py extension.

Run after `maturin develop -m crates/python/Cargo.toml`, or after
`cargo build -p bpfa-py --features extension-module`, in which case the library
is loaded straight from target/.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

import numpy as np


def load():
    try:
        import bpfa_py

        return bpfa_py
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libbpfa_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("bpfa_py", str(lib))
            spec = importlib.util.spec_from_file_location("bpfa_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("bpfa_py not found; build it first")


def main():
    bp = load()
    assert "GIBBS_SSVI" in bp.strategies()

    hyper = bp.Hyperparameters(k=4)
    rng = np.random.default_rng(0)
    y = rng.normal(size=(30, 6))
    mask = np.ones_like(y, dtype=bool)
    mask[0, 0] = False
    ys, means, stds = bp.standardize(y.tolist(), mask.tolist())
    ys = np.array(ys)
    assert np.allclose(ys[1:, 0].mean(), 0.0, atol=1e-12)
    assert ys[0, 0] == 0.0

    prior = bp.GlobalState.prior(hyper, 6)
    state = bp.GlobalState.random(hyper, 6, seed=1)
    for t in range(1, 4):
        stats = [
            bp.local_stats(s, state, ys[i].tolist(), mask[i].tolist(), seed=10 * t + i)
            for i, s in enumerate(["MF_SSVI", "gibbs-ssvi", "titsias-ssvi"])
        ]
        state = state.step(prior, stats, 30, hyper.step_size(t))
    assert all(0.0 < p < 1.0 for p in state.feature_probabilities())
    beta = state.sample(seed=3)
    assert len(beta["phi"]) == 4 and beta["gamma_obs"] > 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "state.ckpt"
        state.save(str(path), iteration=3, seed=1)
        again = bp.GlobalState.load(str(path))
        assert again.mu == state.mu and again.a == state.a

        cfg = bp.Config(task="synthetic", strategy="mf-ssvi", K=5, N=200, D=8, batch=20,
                        iterations=20, eval_every_iters=10, M=4, out=tmp, wall_clock=False)
        records = cfg.run()
        assert [r["iteration"] for r in records] == [10, 20]
        assert all(math.isfinite(r["pred_loglik"]) for r in records)

    img = rng.integers(0, 256, size=(12, 10)).astype(float)
    patches = bp.patchify(img.ravel().tolist(), 12, 10)
    assert len(patches) == 5 * 3
    back = np.array(bp.reconstruct(patches, 12, 10))
    assert np.array_equal(back, img.ravel())
    assert bp.psnr(img.ravel().tolist(), back.tolist(), 12, 10) == math.inf

    try:
        bp.local_stats("nope", state, ys[0].tolist(), mask[0].tolist(), seed=0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown strategy accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
