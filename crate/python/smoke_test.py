#!/usr/bin/env python3
"""Smoke test for the `noinject` Python extension.

Builds the extension (unless NOINJECT_SKIP_BUILD=1), loads it from the
cargo target directory, and exercises the public surface end to end on a
tiny world: config parsing, benchmark generation and persistence, a full
run, checkpoint re-scoring, and error mapping.
"""

import json
import os
import shutil
import subprocess
import sys
import tempfile

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TINY_CONFIG = """
[benchmark]
schedule = [2, 2]
common_size = 5
per_concept_train = 4
per_concept_test = 3
sigma = 0.2
k_primitives = 6
s_sparsity = 2

[model]
v_tok = 211
d = 8
l_layers = 3
d_v = 8
max_tokens = 6
k_trainable = 2
projector_trainable = true

[training]
epochs = 2
lr = 1e-2
lr_decay_epochs = [2]
lr_decay_factor = 0.1
batch_size = 4

[training.pretrain]
target_accuracy = 0.9
floor_accuracy = 0.05
max_steps = 800
check_interval = 20
samples_per_concept = 6

[seeds]
benchmark = 5
run = 11
"""


def build_and_import():
    if os.environ.get("NOINJECT_SKIP_BUILD") != "1":
        subprocess.run(
            ["cargo", "build", "-p", "noinject-py"], cwd=REPO_ROOT, check=True
        )
    src = os.path.join(REPO_ROOT, "target", "debug", "libnoinject.so")
    if not os.path.exists(src):
        sys.exit(f"extension not found at {src}; build noinject-py first")
    stage = tempfile.mkdtemp(prefix="noinject_py_")
    shutil.copy2(src, os.path.join(stage, "noinject.so"))
    sys.path.insert(0, stage)
    import noinject  # noqa: E402

    return noinject


def check(label, ok):
    print(f"{'PASS' if ok else 'FAIL'}  {label}")
    if not ok:
        sys.exit(1)


def main():
    ni = build_and_import()
    check("import + version string", bool(ni.build_version()) and ni.__version__ == ni.build_version())

    ids = ni.tokenize("task1_concept0")
    check("tokenize returns non-pad ids", len(ids) == 8 and all(i > 0 for i in ids))
    check(
        "sibling names tokenize differently",
        ni.tokenize("task1_concept0") != ni.tokenize("task1_concept1"),
    )

    try:
        ni.Config("[training]\nepochz = 3\n")
        check("strict config rejects unknown keys", False)
    except ValueError as e:
        check("strict config rejects unknown keys", "epochz" in str(e))

    config = ni.Config(TINY_CONFIG)
    echo = config.echo()
    check("config echo carries the schedule", echo["benchmark"]["schedule"] == [2, 2])

    bench = ni.Benchmark.generate(config)
    check(
        "benchmark counts",
        bench.task_count == 2 and bench.novel_concepts == 4 and bench.common_concepts == 5,
    )
    check(
        "benchmark generation is deterministic",
        ni.Benchmark.generate(config).checksum() == bench.checksum(),
    )

    with tempfile.TemporaryDirectory(prefix="noinject_run_") as tmp:
        bench_path = os.path.join(tmp, "bench.json")
        bench.save(bench_path)
        loaded = ni.Benchmark.load(bench_path)
        check("benchmark save/load round-trip", loaded.checksum() == bench.checksum())

        out_dir = os.path.join(tmp, "run")
        result = ni.run(config, bench, out_dir)
        report = result.report
        check("pretrain summary present", result.pretrain is not None and result.pretrain["steps"] > 0)
        check("run completes both stages", report.stages_completed == 2)
        check("clean data audit", report.audit_violations == 0)
        check(
            "evaluation matrix shape",
            [c["test_set"] for c in report.cells()]
            == ["common", "task1", "common", "task1", "task2"],
        )
        check("final averages materialize", report.final_avg_top1 is not None)
        csv = report.to_csv()
        check(
            "csv header",
            csv.splitlines()[0] == "stage,test_set,protocol,top1,mrr"
            and len(csv.splitlines()) == len(report.cells()) + 1,
        )

        on_disk = json.load(open(os.path.join(out_dir, "report.json")))
        check("report matches on-disk artifact", on_disk == report.to_dict())

        rescored = ni.evaluate_checkpoint(os.path.join(out_dir, "checkpoint_final.json"), bench)
        check(
            "checkpoint re-score agrees with fresh report",
            rescored.final_avg_top1 == report.final_avg_top1
            and rescored.stages_completed == report.stages_completed,
        )

        try:
            ni.evaluate_checkpoint(bench_path, bench)
            check("corrupt checkpoint maps to OSError", False)
        except OSError:
            check("corrupt checkpoint maps to OSError", True)

    print("all smoke tests passed")


if __name__ == "__main__":
    main()
