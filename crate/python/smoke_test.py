"""End-to-end smoke test for the `injected` Python extension.

Build the module first:

    cargo build -p injected-py

The script copies the compiled cdylib next to itself under an importable
name, then runs a miniature version of the full pipeline: load, normalize,
split, train, sample, metrics, drift fields, save/load. Exits non-zero on
the first failed check.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def import_module():
    for profile in ("debug", "release"):
        so = ROOT / "target" / profile / "libinjected.so"
        if so.exists():
            build_dir = ROOT / "python" / "_build"
            build_dir.mkdir(exist_ok=True)
            shutil.copy2(so, build_dir / "injected.so")
            sys.path.insert(0, str(build_dir))
            import injected

            return injected
    sys.exit("libinjected.so not found; run `cargo build -p injected-py` first")


def expect_raises(kind, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except kind:
        return
    raise AssertionError(f"{fn} did not raise {kind.__name__}")


def main():
    injected = import_module()

    # Dataset: load, normalize, split.
    raw = injected.load_csv(ROOT / "data" / "circle.csv")
    assert len(raw) == 142, f"expected 142 circle points, got {len(raw)}"
    points, stats = injected.normalize(raw)
    assert all(abs(m) < 1e-9 for m in stats) is False  # raw stats, not zeros
    for axis in (0, 1):
        mean = sum(p[axis] for p in points) / len(points)
        var = sum(p[axis] ** 2 for p in points) / len(points) - mean**2
        assert abs(mean) < 1e-12 and abs(var - 1.0) < 1e-9
    train_pts, test_pts = injected.replicate_and_split(points, copies=6, train_fraction=0.9, seed=11)
    assert (len(train_pts), len(test_pts)) == (766, 86)

    # Schedule and config names.
    ab = injected.alpha_bar(50, 0.95)
    assert len(ab) == 51 and ab[0] == 1.0
    assert all(a > b for a, b in zip(ab, ab[1:]))
    assert injected.config_modes("identity-zero-0.95") == ("identity", "zero", 0.95)
    assert injected.config_modes("fourier-fourier-0.98") == ("fourier", "fourier", 0.98)
    assert len(injected.CONFIG_NAMES) == 4
    expect_raises(ValueError, injected.config_modes, "fourier-zero-0.5")

    # Seed derivation is deterministic and stage-separated.
    stages = [injected.STAGE_MODEL_INIT, injected.STAGE_TRAIN, injected.STAGE_SPLIT,
              injected.STAGE_SAMPLE, injected.STAGE_CLUSTER]
    derived = [injected.derive_seed(42, s) for s in stages]
    assert derived == [injected.derive_seed(42, s) for s in stages]
    assert len(set(derived)) == len(derived)

    # Model: train twice from the same seed and compare runs bit for bit.
    t_max = 6

    def fresh():
        return injected.Denoiser("fourier", "fourier", t_max=t_max, alpha_min=0.95, seed=1)

    model = fresh()
    assert (model.input_mode, model.time_mode) == ("fourier", "fourier")
    assert model.t_max == t_max and model.alpha_min == 0.95 and model.param_count > 0
    losses, mse = model.train(train_pts, test_pts, epochs=3, batch_size=32, seed=2)
    assert len(losses) == 3 and len(mse) == t_max
    assert all(math.isfinite(v) and v >= 0 for v in losses + mse)
    losses2, mse2 = fresh().train(train_pts, test_pts, epochs=3, batch_size=32, seed=2)
    assert losses == losses2 and mse == mse2, "training is not deterministic"

    # Sampling: recorded shapes and determinism.
    trajs = model.sample(5, seed=3)
    assert len(trajs) == 5 and all(len(t) == t_max + 1 for t in trajs)
    assert trajs == model.sample(5, seed=3), "sampling is not deterministic"
    finals_only = model.sample(5, seed=3, record=False)
    assert all(len(t) == 1 for t in finals_only)
    assert [t[-1] for t in trajs] == [t[0] for t in finals_only]

    # Trajectory metrics.
    disp = injected.displacement(trajs)
    vel = injected.velocity(trajs)
    assert len(disp) == 5 and all(d >= 0 for d in disp)
    assert len(vel) == t_max and all(v >= 0 for v in vel)
    labels, inertia = injected.cluster_trajectories(trajs, k=2, seed=4)
    assert len(labels) == 5 and set(labels) <= {0, 1} and inertia >= 0
    expect_raises(ValueError, injected.cluster_trajectories, trajs, 0, 4)
    expect_raises(ValueError, injected.displacement, [trajs[0], trajs[1][:3]])

    w = injected.wasserstein(points, points)
    assert w == (0.0, 0.0, 0.0)
    gen = [t[-1] for t in trajs]
    wx, wy, combined = injected.wasserstein(points, gen)
    assert combined == (wx + wy) / 2 and combined > 0

    # Prediction bounds and save/load round trip.
    probe = model.predict_noise(0.3, -0.7, t_max)
    assert all(math.isfinite(v) for v in probe)
    expect_raises(ValueError, model.predict_noise, 0.0, 0.0, 0)
    expect_raises(ValueError, model.predict_noise, 0.0, 0.0, t_max + 1)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.txt"
        model.save(path)
        loaded = injected.Denoiser.load(path)
        assert (loaded.t_max, loaded.alpha_min) == (t_max, 0.95)
        assert loaded.predict_noise(0.3, -0.7, t_max) == probe
    expect_raises(OSError, injected.Denoiser.load, Path("/nonexistent/model.txt"))

    # Drift fields and alignment.
    bounds = injected.grid_bounds(points, margin=0.5)
    assert bounds[0] < bounds[1] and bounds[2] < bounds[3]
    fwd = injected.forward_drift(points, t=3, t_max=t_max, alpha_min=0.95, bounds=bounds, nx=5, ny=4)
    bwd = model.backward_drift(t=3, bounds=bounds, nx=5, ny=4)
    assert len(fwd) == 20 and len(bwd) == 20
    for rows in (fwd, bwd):
        assert all(math.isfinite(v) for row in rows for v in row)
        assert all(abs(math.hypot(r[2], r[3]) - r[4]) < 1e-12 for r in rows)
    assert [r[:2] for r in fwd] == [r[:2] for r in bwd], "grids disagree"

    mean_cs, included, excluded = model.drift_alignment(trajs, bounds)
    assert len(mean_cs) == t_max
    assert all(i + e == 5 for i, e in zip(included, excluded))
    assert all(c is None or -1.0 <= c <= 1.0 for c in mean_cs)

    print("smoke test passed")


if __name__ == "__main__":
    main()
