"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The two benchmark criteria train 25 models on the default synthetic dataset
(about an hour on one CPU core). Set ``SPARSEKP_ACCEPTANCE_OUT`` to keep their
CSV/SVG results; otherwise they go to a temporary directory.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import oracle_localization, oracle_multilabel, random_instance, random_station_map
from sparsekp import bench
from sparsekp.cli import GRADCHECK_TOL, gradcheck_table, main
from sparsekp.codec import CodecParams, DecodeParams, decode_points, encode_target
from sparsekp.evalkit import multilabel_station_metrics, point_localization_metrics
from sparsekp.losses import LossConfig, loss_pixels, make_ablation_config
from sparsekp.synth import SceneSpec, build_dataset, generate_scene, sparsify_labels
from sparsekp.trainer import direct_logit_optimize

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def report(capsys):
    def emit(num, name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return emit


def test_1_gradient_fidelity(report):
    t0 = time.perf_counter()
    table = gradcheck_table(trials=1000, seed=0)
    dt = time.perf_counter() - t0
    worst_name, worst = max(table, key=lambda kv: kv[1])
    failing = [n for n, e in table if e >= GRADCHECK_TOL]
    ok = not failing and dt < 10 and len(table) == 20
    report(1, "gradient fidelity", ok, f"{len(table)} configs, worst {worst_name}={worst:.2e}, "
           f"failing {failing}, {dt:.2f}s")
    assert ok


def spaced_points(rng, h, w, n, min_dist):
    pts = []
    while len(pts) < n:
        p = (int(rng.integers(0, h)), int(rng.integers(0, w)))
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_dist ** 2 for q in pts):
            pts.append(p)
    return pts


def test_2_codec_round_trip(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    codec, decode = CodecParams(delta=2.0), DecodeParams(t=0.3, k=30, activation="identity")
    misses = extras = 0
    for _ in range(100):
        pts = spaced_points(rng, 64, 64, int(rng.integers(1, 21)), 6)
        got = set(decode_points(encode_target(pts, 64, 64, codec), decode).coords())
        misses += len(set(pts) - got)
        extras += len(got - set(pts))
    dt = time.perf_counter() - t0
    ok = misses == 0 and extras == 0 and dt < 5
    report(2, "codec round trip", ok, f"misses={misses}, extras={extras}, {dt:.2f}s")
    assert ok


def test_3_hill_tail(report):
    p = np.round(np.arange(0.05, 0.951, 0.05), 2)
    z = np.log(p / (1 - p))
    h = np.zeros_like(p)
    _, gz = loss_pixels(h, z, LossConfig("Hill", lam=1.5))
    g = gz / (p * (1 - p))                     # chain rule back to the negative-branch probability
    rel = np.max(np.abs(g - 3 * p * (1 - p)) / (3 * p * (1 - p)))
    g_at = dict(zip(p, g))
    _, mse_g = loss_pixels(np.zeros(2), np.array([0.95, 0.5]), LossConfig("MSE"))
    ok = rel < 1e-10 and g_at[0.95] < g_at[0.5] and abs(mse_g[0]) > abs(mse_g[1])
    report(3, "hill tail", ok, f"max rel err {rel:.1e}, g(0.95)={g_at[0.95]:.4f} < g(0.5)={g_at[0.5]:.4f}, "
           f"MSE |g| {abs(mse_g[0]):.2f} > {abs(mse_g[1]):.2f}")
    assert ok


def test_4_direct_logit_false_negative(report):
    t0 = time.perf_counter()
    spec = SceneSpec()
    s = sparsify_labels(generate_scene(spec, 0, 0), spec, 0)
    target = encode_target(s.sparse_labels, *s.shape).values
    r, c = map(int, np.argwhere(target == 0)[0])
    init = np.zeros(s.shape)
    init[r, c] = 4.0
    sig = lambda x: 1 / (1 + np.exp(-x))
    drop = {}
    for v in ("MSE", "CragAndTail"):
        [z] = direct_logit_optimize([s], LossConfig(v), 100, 0.1, init=[init])
        drop[v] = sig(4.0) - sig(z.values[r, c])
    dt = time.perf_counter() - t0
    ok = drop["CragAndTail"] < drop["MSE"] and dt < 1
    report(4, "direct-logit FN suppression", ok,
           f"sigmoid drop CaT={drop['CragAndTail']:+.4f} vs MSE={drop['MSE']:+.4f}, {dt:.2f}s")
    assert ok


# --- benchmark criteria --------------------------------------------------------------

class BenchRuns:
    """Trains each named config over SEEDS once and remembers rows and wall time."""

    def __init__(self, root: Path):
        self.root = root
        self.cfg = bench.RunConfig(data_dir=str(root / "data"), out_dir=str(root))
        t0 = time.perf_counter()
        man = build_dataset(self.cfg.scene, self.cfg.counts, self.cfg.data_seed, self.cfg.data_dir)
        self.data = bench.BenchData.from_manifest(man, self.cfg.codec)
        self.data_time = time.perf_counter() - t0
        self.rows, self.times = {}, {}

    def get(self, name: str, loss: LossConfig) -> list[dict]:
        if name not in self.rows:
            t0 = time.perf_counter()
            self.rows[name] = bench.run_matrix(self.cfg, {name: loss}, SEEDS, self.data)
            self.times[name] = time.perf_counter() - t0
        return self.rows[name]

    def save(self, stem: str, names) -> None:
        rows = [r for n in names for r in self.rows[n]]
        rows += bench.median_rows(rows)
        bench.write_results_csv(rows, self.root / f"{stem}.csv")
        (self.root / f"{stem}.svg").write_text(bench.render_bar_svg(rows, stem))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    out = os.environ.get("SPARSEKP_ACCEPTANCE_OUT")
    root = Path(out) if out else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    return BenchRuns(root)


def med(rows, col):
    return float(np.median([r[col] for r in rows]))


@pytest.mark.slow
def test_5_loss_ordering(runs, report):
    res = {v: runs.get(v, LossConfig(v)) for v in ("MSE", "Hill", "CragAndTail")}
    runs.save("benchmark", res)
    f1 = {v: med(rows, "locF1") for v, rows in res.items()}
    rec_wins = sum(c["locR"] > m["locR"] for c, m in zip(res["CragAndTail"], res["MSE"]))
    total = runs.data_time + sum(runs.times[v] for v in res)
    ok = f1["CragAndTail"] >= f1["Hill"] > f1["MSE"] and rec_wins >= 4 and total < 45 * 60
    report(5, "loss ordering", ok, "median F1 " + ", ".join(f"{v}={f:.3f}" for v, f in f1.items())
           + f"; CaT recall > MSE recall in {rec_wins}/5 seeds; {total / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_6_lambda_ablation(runs, report):
    res = {r: runs.get("CragAndTail" if r == "default" else r, make_ablation_config(r))
           for r in ("default", "lambda1", "lambda0")}
    runs.save("ablation_lambda", ["CragAndTail", "lambda1", "lambda0"])
    rec = {r: med(rows, "locR") for r, rows in res.items()}
    prec = {r: med(rows, "locP") for r, rows in res.items()}
    total = sum(runs.times[n] for n in ("CragAndTail", "lambda1", "lambda0"))
    ok = rec["lambda1"] >= rec["default"] and prec["lambda0"] < 0.5 * prec["default"] and total < 30 * 60
    report(6, "lambda ablation", ok, f"median recall lambda1={rec['lambda1']:.3f} vs default={rec['default']:.3f}; "
           f"median precision lambda0={prec['lambda0']:.3f} vs default={prec['default']:.3f}; "
           f"{total / 60:.1f} min")
    assert ok


def test_7_metrics_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        _, masks, pts = random_instance(rng)
        m = point_localization_metrics(pts, masks)
        mismatches += (m["precision"], m["recall"], m["f1"], m["tp"], m["fp"], m["fn"]) != \
            oracle_localization(pts, masks)
    for _ in range(1000):
        (h, w), _, pts = random_instance(rng)
        h, w = max(h, 3), max(w, 3)
        pts = list(dict.fromkeys((r % h, c % w) for r, c in pts))
        smap = random_station_map(rng, h, w)
        gt = list(rng.integers(0, 2, 6))
        res = multilabel_station_metrics([pts], [smap], [gt])
        mismatches += (res["precision"], res["recall"], res["f1"]) != oracle_multilabel([pts], [smap], [gt])
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 5
    report(7, "metrics oracle equivalence", ok, f"{mismatches} mismatches over 2000 instances, {dt:.2f}s")
    assert ok


def test_8_determinism(tmp_path, report, capsys):
    cfg = {"counts": {"train": 6, "val": 3, "test": 4},
           "scene": {"height": 32, "width": 32, "instances_range": [2, 5], "instances_mean": 3.5,
                     "texture_seed_groups": 5},
           "model": {"channels": [3, 8, 1]}, "train": {"lr": 0.1, "max_epochs": 2}, "seeds": [0, 1]}
    outputs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        (d / "cfg.json").write_text(json.dumps({**cfg, "data_dir": str(d / "data"), "out_dir": str(d / "out")}))
        c = str(d / "cfg.json")
        codes = [main(["gen-data", "--config", c]),
                 main(["train", "--config", c, "--losses", "CragAndTail", "--out", str(d / "out" / "train")]),
                 main(["eval", "--config", c, "--checkpoint", str(d / "out" / "train" / "best.ckpt")]),
                 main(["benchmark", "--config", c, "--losses", "MSE,Hill"]),
                 main(["ablate", "--config", c, "--rows", "default,lambda0"]),
                 main(["report", "--csv", str(d / "out" / "benchmark" / "benchmark.csv")])]
        main(["gradcheck", "--trials", "300"])
        stdout = capsys.readouterr().out
        gradcheck_out = stdout[stdout.rindex("MSE "):]
        files = {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*"))
                 if p.is_file() and p.suffix in (".csv", ".json", ".svg", ".png", ".ckpt")}
        # configs embed their own directory, so compare them with it stripped
        files = {k: v.replace(str(d).encode(), b"<root>") for k, v in files.items()}
        outputs.append((codes, files, gradcheck_out))
    (codes_a, fa, ga), (codes_b, fb, gb) = outputs
    diff = sorted(str(k) for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))
    ok = codes_a == codes_b == [0] * 6 and not diff and ga == gb
    report(8, "determinism", ok, f"{len(fa)} output files compared, {len(diff)} differ {diff[:3]}, "
           f"exit codes {codes_a}")
    assert ok
