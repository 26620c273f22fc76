import io
import json
import subprocess
import sys

import numpy as np
import pytest

from setdist import checkpoint
from setdist.cli import main
from setdist.data import Dataset, load, save
from setdist.measures import Tracklet
from setdist.ot import cost_matrix


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert run("gen", "--out", root, "--seed", 1, "--identities", 5, "--dim", 6)[0] == 0
    return root


def single(tmp_path, name, frames):
    root = tmp_path / name
    save(Dataset(frames.shape[1], [Tracklet(frames, 0, 0, name)]), root)
    return root


class TestDist:
    def test_identical_exact(self, tmp_path, rng):
        frames = rng.normal(size=(5, 3)).astype(np.float32).astype(float)
        a, b = single(tmp_path, "a", frames), single(tmp_path, "b", frames)
        code, out = run("dist", "--method", "exact", a, b)
        assert code == 0
        assert abs(float(out)) <= 1e-9

    def test_lambda_zero(self, dataset):
        ds = load(dataset)
        ta, tb = ds.tracklets[0], ds.tracklets[3]
        code, out = run("dist", "--method", "sinkhorn", "--lambda", 0,
                        f"{dataset}:{ta.tracklet_id}", f"{dataset}:{tb.tracklet_id}")
        assert code == 0
        assert float(out) == cost_matrix(ta.frames, tb.frames).mean()

    def test_emit_plan(self, dataset, tmp_path):
        ds = load(dataset)
        ta, tb = ds.tracklets[0], ds.tracklets[1]
        plan_csv = tmp_path / "plan.csv"
        code, out = run("dist", "--method", "exact", "--json", "--emit-plan", plan_csv,
                        f"{dataset}:{ta.tracklet_id}", f"{dataset}:{tb.tracklet_id}")
        assert code == 0
        payload = json.loads(out)
        rows = plan_csv.read_text().splitlines()
        assert rows[0] == "row,col,weight"
        assert len(rows) == 1 + ta.num_frames * tb.num_frames
        plan = np.zeros((ta.num_frames, tb.num_frames))
        for line in rows[1:]:
            i, j, w = line.split(",")
            plan[int(i), int(j)] = float(w)
        assert float(np.sum(plan * cost_matrix(ta.frames, tb.frames))) == pytest.approx(payload["value"])

    def test_emit_plan_needs_plan_method(self, dataset, tmp_path, capsys):
        ids = [t.tracklet_id for t in load(dataset).tracklets[:2]]
        code, _ = run("dist", "--method", "gaussian", "--emit-plan", tmp_path / "p.csv",
                      f"{dataset}:{ids[0]}", f"{dataset}:{ids[1]}")
        assert code == 2
        assert "usage:" in capsys.readouterr().err

    def test_ambiguous_directory(self, dataset, capsys):
        assert run("dist", dataset, dataset)[0] == 2
        assert "usage:" in capsys.readouterr().err

    def test_missing_tracklet(self, dataset, capsys):
        assert run("dist", f"{dataset}:nope", f"{dataset}:nope")[0] == 1
        assert "nope" in capsys.readouterr().err


class TestUsage:
    def test_unknown_flag(self, capsys):
        code, _ = run("dist", "--bogus", "a", "b")
        assert code == 2
        assert "usage:" in capsys.readouterr().err

    def test_missing_command(self, capsys):
        assert run()[0] == 2
        assert "usage:" in capsys.readouterr().err

    def test_bad_choice(self, dataset, capsys):
        assert run("eval", "--data", dataset, "--method", "cosine")[0] == 2

    def test_flag_not_valid_for_command(self, dataset, capsys):
        assert run("gen", "--out", "x", "--lambda", 3)[0] == 2

    def test_negative_window(self, dataset, capsys):
        assert run("eval", "--data", dataset, "--window", 0)[0] == 2

    def test_runtime_error(self, tmp_path, capsys):
        assert run("eval", "--data", tmp_path / "missing")[0] == 1
        assert "missing manifest" in capsys.readouterr().err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "setdist", "--nope"], capture_output=True, text=True)
        assert proc.returncode == 2
        assert "usage:" in proc.stderr


class TestConfigFile:
    def test_flags_override_file(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"method": "gaussian", "window": 2, "data": str(dataset)}))
        code, out = run("eval", "--config", cfg)
        assert code == 0 and out.splitlines()[1].startswith("gaussian,,2,")
        code, out = run("eval", "--config", cfg, "--window", 1)
        assert out.splitlines()[1].startswith("gaussian,,1,")

    def test_list_values(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"lambdas": [0, 10]}))
        code, out = run("sweep-lambda", "--data", dataset, "--config", cfg)
        assert code == 0 and len(out.splitlines()) == 3

    def test_unknown_key(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"nonsense": 1}))
        assert run("eval", "--data", dataset, "--config", cfg)[0] == 2


class TestPipeline:
    def test_rank(self, dataset):
        code, out = run("rank", "--data", dataset, "--query", "id0002_cam0", "--method", "exact")
        ids = out.split()
        assert code == 0
        assert "id0002_cam0" not in ids and len(ids) == 9
        code, out = run("rank", "--data", dataset, "--query", "id0002_cam0", "--method", "exact",
                        "--same-camera", "--json")
        rows = json.loads(out)
        assert len(rows) == 9
        assert [r["distance"] for r in rows] == sorted(r["distance"] for r in rows)

    def test_train_eval_sweeps(self, dataset, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        code, _ = run("train", "--data", dataset, "--out", ckpt, "--epochs", 2, "--seed", 3, "--out-dim", 4)
        assert code == 0
        model, classifier = checkpoint.load(ckpt)
        assert (model.in_dim, model.out_dim, classifier.num_identities) == (6, 4, 5)
        history = (tmp_path / "m.csv").read_text().splitlines()
        assert history[0] == "epoch,lr,triplet,id,total,active_triplets" and len(history) == 3

        report = tmp_path / "r.csv"
        assert run("eval", "--data", dataset, "--model", ckpt, "--out", report)[0] == 0
        assert report.read_text().startswith("method,lambda,K,top1,top5,top20,mAP\nsinkhorn,20,1,")
        code, out = run("sweep-lambda", "--data", dataset, "--model", ckpt, "--json")
        assert [r["lambda"] for r in json.loads(out)] == ["0", "5", "10", "20", "30", "50"]
        code, out = run("sweep-window", "--data", dataset, "--model", ckpt, "--method", "gaussian")
        assert [line.split(",")[2] for line in out.splitlines()[1:]] == ["1", "2", "4", "8"]

    def test_determinism(self, tmp_path):
        for tag in ("a", "b"):
            root = tmp_path / tag
            assert run("gen", "--out", root / "ds", "--seed", 7, "--identities", 4)[0] == 0
            assert run("train", "--data", root / "ds", "--out", root / "m.ckpt", "--epochs", 2,
                       "--seed", 7)[0] == 0
            assert run("sweep-window", "--data", root / "ds", "--model", root / "m.ckpt",
                       "--windows", "1,4", "--out", root / "sweep.csv")[0] == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert str(tmp_path) not in (tmp_path / "a" / "ds" / "manifest.json").read_text()
