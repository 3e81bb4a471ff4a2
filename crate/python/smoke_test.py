#!/usr/bin/env python3
"""Smoke test for the vidcap_py extension module.

Builds the extension with cargo (unless VIDCAP_PY_SO points at an existing
.so), stages it under a temp directory as vidcap_py.so, imports it, and
drives the pipeline end to end: synthesize a dataset, train a small model,
generate captions, evaluate, and sanity-check the metric and loss
functions against hand-computed values.
"""

import json
import math
import os
import shutil
import subprocess
import sys
import tempfile

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

failures = []


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"{status:4} {name}" + (f" ({detail})" if detail else ""))
    if not ok:
        failures.append(name)


def build_extension(stage_dir):
    so = os.environ.get("VIDCAP_PY_SO")
    if not so:
        subprocess.run(
            ["cargo", "build", "-p", "vidcap-py"], cwd=REPO, check=True
        )
        so = os.path.join(REPO, "target", "debug", "libvidcap_py.so")
    staged = os.path.join(stage_dir, "vidcap_py.so")
    shutil.copyfile(so, staged)
    sys.path.insert(0, stage_dir)


def main():
    stage = tempfile.mkdtemp(prefix="vidcap_py_")
    build_extension(stage)
    import vidcap_py as vc

    # --- pure helpers -----------------------------------------------------
    check("tokenize", vc.tokenize("A man, is Walking!") == ["a", "man", "is", "walking"])
    check(
        "dominant_object",
        vc.dominant_object([("dog", 0.9), ("cat", 0.8)]) == "dog"
        and vc.dominant_object([]) is None,
    )
    check("subsample", vc.subsample_indices(160, 80)[:3] == [0, 2, 4])

    # --- losses against hand values ---------------------------------------
    v = [0.25, -1.0, 2.0]
    check("loss_sim zero", vc.loss_sim(v, v) == 0.0)
    check("loss_dis one", vc.loss_dis(v, v) == 1.0)
    w = list(v)
    w[0] += math.log(2.0)
    check("loss at ln2", abs(vc.loss_sim(v, w) - 0.5) < 1e-12 and abs(vc.loss_dis(v, w) - 0.5) < 1e-12)
    check("triplet margin", vc.triplet_loss(v, v, [v], margin=1.0) == 1.0)

    # --- metrics -----------------------------------------------------------
    cand = [["a", "man", "is", "walking"]]
    refs = [[["a", "man", "is", "walking"]]]
    check("bleu perfect", abs(vc.bleu4(cand, refs) - 1.0) < 1e-12)
    check(
        "bleu strict zero",
        vc.bleu4([["a", "b", "c", "d"]], [[["a", "b", "c", "x"]]]) == 0.0,
    )
    check(
        "meteor identical",
        abs(vc.meteor_lite([["a", "b", "c"]], [[["a", "b", "c"]]]) - (1 - 0.5 / 27)) < 1e-12,
    )
    two_cand = [["a", "b", "c", "d"], ["e", "f", "g", "h"]]
    two_refs = [[["a", "b", "c", "d"]], [["e", "f", "g", "h"]]]
    check("cider echo", abs(vc.cider(two_cand, two_refs) - 10.0) < 1e-9)

    # --- pipeline ----------------------------------------------------------
    with tempfile.TemporaryDirectory(prefix="vidcap_data_") as work:
        data = os.path.join(work, "data")
        n = vc.synth_dataset(data, videos=6, events=3, seed=11, d_vis=8)
        check("synth", n == 6)

        config = json.dumps(
            {
                "batch_size": 2,
                "max_frames": 8,
                "hidden": 16,
                "d_emb": 8,
                "d_vis": 8,
                "lr_all": 3e-3,
                "lr_meaning": 3e-3,
                "seed": 11,
                "max_len": 8,
                "max_epochs_word": 60,
                "patience": 60,
                "pretrain_epochs": 3,
                "mixed_steps": 10,
            }
        )
        ckpt = os.path.join(work, "ckpt.bin")
        epoch, step = vc.train_pipeline(config, data, ckpt, phase="all")
        check("train", os.path.exists(ckpt), f"epoch={epoch} step={step}")

        captions = vc.generate(ckpt, data, split="train")
        check(
            "generate",
            len(captions) == 6 and all(isinstance(c, str) for _, c in captions),
            f"e.g. {captions[0]}",
        )

        report = json.loads(vc.evaluate(ckpt, data, split="train", label="smoke"))
        row = report["rows"][0]
        check(
            "evaluate",
            0.0 <= row["bleu4"] <= 1.0 and row["cider"] >= 0.0,
            f"bleu4={row['bleu4']:.3f} cider={row['cider']:.3f}",
        )
        # same seed, same metrics
        report2 = json.loads(vc.evaluate(ckpt, data, split="train", label="smoke"))
        check("evaluate deterministic", report == report2)

    if failures:
        print(f"\n{len(failures)} check(s) failed: {', '.join(failures)}")
        return 1
    print("\nall smoke checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
