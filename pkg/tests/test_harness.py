import csv
import gzip
import json
import struct

import numpy as np
import pytest
from fastapi.testclient import TestClient

from expertswitch.cli import main
from expertswitch.harness import (AccuracyMatrix, ConfigError, ExperimentConfig, FormatError, StreamSpec,
                                  acc_from_log, build_stream, evaluate_checkpoint, load_idx, run_experiment,
                                  run_sweep, sweep_prune_capacity)
from expertswitch.harness.data import read_idx
from expertswitch.harness.evaluate import Evaluation, expert_task_map
from expertswitch.service import create_app


def write_idx(path, arr, magic, compress=False):
    arr = np.asarray(arr, dtype=np.uint8)
    raw = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path.write_bytes(gzip.compress(raw) if compress else raw)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 4, 4))
    images[0] = 0
    labels = np.array([3, 1, 4, 1, 5])
    write_idx(tmp_path / "img", images, 0x803)
    write_idx(tmp_path / "lab", labels, 0x801)
    return tmp_path, images, labels


def test_idx_roundtrip_and_normalisation(idx_pair):
    d, images, labels = idx_pair
    x, y = load_idx(d / "img", d / "lab")
    assert x.shape == (5, 1, 4, 4) and x.dtype == np.float32
    np.testing.assert_array_equal(y, labels)
    assert x[0, 0, 0, 0] == pytest.approx((0 - 0.1307) / 0.3081, abs=1e-6)
    assert x[0, 0, 0, 0] == pytest.approx(-0.4242, abs=1e-4)


def test_idx_gzip_accepted(tmp_path):
    write_idx(tmp_path / "a.gz", np.arange(6).reshape(2, 3), 0x802, compress=True)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.gz"), np.arange(6).reshape(2, 3))


def test_idx_bad_magic(idx_pair):
    d, _, _ = idx_pair
    with pytest.raises(FormatError, match="magic"):
        load_idx(d / "lab", d / "lab")


def test_idx_truncated(idx_pair):
    d, _, _ = idx_pair
    raw = (d / "img").read_bytes()
    (d / "short").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_idx(d / "short", d / "lab")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", np.zeros((3, 2, 2)), 0x803)
    write_idx(tmp_path / "lab", np.zeros(2), 0x801)
    with pytest.raises(FormatError, match="3 images but 2 labels"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def fake_mnist(n_per_class=30, seed=0):
    rng = np.random.default_rng(seed)

    def part(n):
        y = np.repeat(np.arange(10), n)
        x = rng.normal(size=(len(y), 1, 6, 6)).astype(np.float32) + y[:, None, None, None] * 0.5
        return x, y
    return part(n_per_class), part(n_per_class // 3)


def test_split_stream_has_five_disjoint_pairs():
    stream = build_stream(StreamSpec(kind="split_mnist", epochs=1, batch_size=10), fake_mnist())
    assert [t.classes for t in stream.tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
    assert stream.order == [0, 1, 2, 3, 4]
    for t in stream.tasks:
        _, y = t.train_data(0)
        assert set(y.tolist()) == {0, 1}


def test_permuted_stream_task_count_and_permutations():
    stream = build_stream(StreamSpec(kind="permuted_mnist", n_tasks=20, epochs=1, batch_size=10), fake_mnist())
    assert len(stream.tasks) == 20 and len(stream.order) == 20
    perms = {tuple(t.perm) for t in stream.tasks}
    assert len(perms) == 20
    x, _ = stream.tasks[3].train_data(0)
    flat = stream.tasks[3].transform(x[:2]).reshape(2, -1)
    np.testing.assert_array_equal(flat, x[:2].reshape(2, -1)[:, stream.tasks[3].perm])


def test_revisit_sequence_segments():
    spec = StreamSpec(kind="custom_sequence", order=[0, 1, 2, 3, 4, 0, 1, 2, 3, 4], epochs=1, synthetic_train=256)
    stream = build_stream(spec)
    assert len(stream.order) == 10
    segs = [b.segment for b in stream.batches()]
    assert sorted(set(segs)) == list(range(10))
    assert segs == sorted(segs)
    assert stream.distinct_tasks() == [0, 1, 2, 3, 4]


def test_overlapping_class_sets_rejected():
    with pytest.raises(ConfigError, match="overlap"):
        build_stream(StreamSpec(kind="split_mnist", task_classes=[[0, 1], [1, 2]]), fake_mnist())
    with pytest.raises(ConfigError):
        build_stream(StreamSpec(kind="custom_sequence"))
    with pytest.raises(ConfigError):
        build_stream(StreamSpec(kind="cifar"))


def test_batches_do_not_cross_segments_and_reshuffle_per_epoch():
    stream = build_stream(StreamSpec(kind="split_synthetic", n_tasks=2, epochs=2, synthetic_train=256,
                                     batch_size=128))
    batches = list(stream.batches())
    assert len(batches) == len(stream) == 8
    assert all(len(b.y) == 128 for b in batches)
    assert not np.array_equal(batches[0].x, batches[2].x)
    assert {b.task for b in batches[:4]} == {0}


def test_config_text_roundtrip(tmp_path):
    text = """
    # comment
    kind = split_synthetic
    Cp = 200
    W_th = 50
    alpha = 0.3
    task_classes = 0 1; 2 3
    order = 0,1,0
    nesterov = false
    """
    cfg = ExperimentConfig.from_text(text)
    assert cfg.prune_capacity == 200 and cfg.window_size == 50 and cfg.alpha == 0.3
    assert cfg.task_classes == [[0, 1], [2, 3]] and cfg.order == [0, 1, 0] and cfg.nesterov is False
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("bogus = 1")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("epochs = many")
    with pytest.raises(ValueError):
        ExperimentConfig.from_text("alpha = 2")


def test_acc_examples():
    assert Evaluation({0: 1.0, 1: 0.5}).acc == 0.75
    m = AccuracyMatrix([0, 1], 2)
    m.set_row(0, {0: 0.9})
    m.set_row(1, {0: 1.0, 1: 0.5})
    assert m.final_acc() == 0.75
    log = [{"task": 0, "label": 1, "prediction": 1}, {"task": 1, "label": 2, "prediction": 2},
           {"task": 1, "label": 3, "prediction": 2}]
    assert acc_from_log(log) == 0.75


def test_expert_task_map_majority():
    assert expert_task_map([0, 0, 1, 1, 1, 0], [0, 0, 1, 1, 0, 1]) == {0: 0, 1: 1}


def small_cfg(tmp_path, **kw):
    base = dict(kind="split_synthetic", n_tasks=2, epochs=6, synthetic_train=2560, out=str(tmp_path / "run"),
                selector_capacity=500, prune_capacity=200, retrain_epochs=3, selector_epochs=5)
    base.update(kw)
    return ExperimentConfig(**base)


def test_smoke_run_writes_outputs(tmp_path):
    import time
    t0 = time.perf_counter()
    res = run_experiment(small_cfg(tmp_path))
    assert time.perf_counter() - t0 < 60
    s = res.summary
    assert s["n_experts"] == 2
    assert s["acc"] == pytest.approx(acc_from_log(res.finished.final.log))
    out = res.out_dir
    for name in ("config.txt", "trace.csv", "acc_matrix.csv", "summary.json", "predictions.csv",
                 "checkpoints/selector.bin", "checkpoints/expert_0.bin", "checkpoints/pool.bin"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert list(rows[0]) == ["step", "active_expert", "raw_loss", "smoothed_loss", "threshold", "fired", "event",
                             "segment", "task"]
    assert len(rows) == s["steps"]
    matrix = list(csv.reader(open(out / "acc_matrix.csv")))
    assert len(matrix) == 3
    assert json.loads((out / "summary.json").read_text())["n_experts"] == 2
    per_task, acc = evaluate_checkpoint(out / "checkpoints")
    assert acc == pytest.approx(s["acc"])


def test_runs_are_reproducible(tmp_path):
    a = run_experiment(small_cfg(tmp_path, epochs=3, eval_each_segment=False), write=False)
    b = run_experiment(small_cfg(tmp_path, epochs=3, eval_each_segment=False), write=False)
    assert [r.row() for r in a.run.trace] == [r.row() for r in b.run.trace]
    assert a.summary["acc"] == b.summary["acc"]


def test_capacity_sweep_shortcut_equals_independent_runs(tmp_path):
    cfg = small_cfg(tmp_path, epochs=4, eval_each_segment=False)
    rows = sweep_prune_capacity(cfg, [20, 200])
    for c, row in zip([20, 200], rows):
        single = run_experiment(cfg.replace(prune_capacity=c), write=False).summary
        assert row["acc"] == single["acc"]
        assert row["params_surviving"] == single["params_surviving"]


def test_sweep_writes_csv(tmp_path):
    cfg = small_cfg(tmp_path, epochs=3, eval_each_segment=False)
    rows = run_sweep(cfg, "Cp", ["50", "100"])
    assert [r["value"] for r in rows] == ["50", "100"]
    lines = list(csv.DictReader(open(tmp_path / "run" / "sweep.csv")))
    assert [r["param"] for r in lines] == ["prune_capacity"] * 2
    with pytest.raises(ConfigError):
        run_sweep(cfg, "nope", [1])


def test_cli_run_sweep_eval(tmp_path, capsys):
    cfg_file = tmp_path / "cfg.txt"
    cfg_file.write_text(small_cfg(tmp_path, epochs=3).to_text())
    out = tmp_path / "cli"
    assert main(["run", "--config", str(cfg_file), "--seed", "1", "--out", str(out)]) == 0
    assert "ACC" in capsys.readouterr().out
    assert "seed = 1" in (out / "config.txt").read_text()
    assert main(["eval", "--checkpoint", str(out / "checkpoints")]) == 0
    assert "ACC" in capsys.readouterr().out
    assert main(["sweep", "--param", "Cp", "--values", "50,100", "--config", str(cfg_file),
                 "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "sweep.csv").exists()
    assert main(["run", "--config", str(cfg_file), "--set", "bogus=1"]) == 2


def test_service_session_lifecycle():
    client = TestClient(create_app())
    assert client.get("/health").json()["status"] == "ok"
    r = client.post("/sessions", json={"input_shape": [20], "window_size": 20, "selector_capacity": 200,
                                       "prune_capacity": 100})
    assert r.status_code == 201
    sid = r.json()["session_id"]
    stream = build_stream(StreamSpec(kind="split_synthetic", n_tasks=2, epochs=3, synthetic_train=1280))
    events = []
    for x, y in stream.training_batches():
        step = client.post(f"/sessions/{sid}/batches", json={"x": x.tolist(), "y": y.tolist()})
        assert step.status_code == 200
        events.append(step.json()["event"])
    state = client.get(f"/sessions/{sid}").json()
    assert state["steps"] == len(events) and state["n_experts"] == 1 + events.count("create")
    assert client.post(f"/sessions/{sid}/predict", json={"x": [[0.0] * 20]}).status_code == 409
    assert client.post(f"/sessions/{sid}/finalize", json={"retrain_epochs": 1}).json()["finalized"]
    pred = client.post(f"/sessions/{sid}/predict", json={"x": [[0.0] * 20, [1.0] * 20]}).json()
    assert len(pred["expert_ids"]) == 2 and all(0 <= p < 2 for p in pred["local_predictions"])
    assert client.post(f"/sessions/{sid}/batches", json={"x": [[0.0] * 3], "y": [0]}).status_code == 422
    assert client.post(f"/sessions/{sid}/batches", json={"x": [[0.0] * 20], "y": [7]}).status_code == 422
    assert client.get("/sessions/nope").status_code == 404


def test_service_experiment_job(tmp_path):
    import time
    client = TestClient(create_app())
    cfg = {"kind": "split_synthetic", "n_tasks": 2, "epochs": 2, "synthetic_train": 1280,
           "eval_each_segment": False, "retrain_epochs": 1, "out": str(tmp_path / "svc")}
    job = client.post("/experiments", json={"config": cfg}).json()
    for _ in range(300):
        job = client.get(f"/experiments/{job['experiment_id']}").json()
        if job["state"] in ("done", "failed"):
            break
        time.sleep(0.2)
    assert job["state"] == "done", job.get("error")
    assert 0 <= job["summary"]["acc"] <= 1
    assert client.post("/experiments", json={"config": {"bogus": 1}}).status_code == 422
