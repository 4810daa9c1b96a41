import pytest

from edgedistill.cli import main
from edgedistill.config import Config
from edgedistill.container import load_container


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "24", "--classes", "3"]) == 0
    (root / "cfg.txt").write_text("# tiny run\nsteps=3\nbatch=6\nprecision=fp32\n")
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_print_config_roundtrip(capsys):
    code, out, _ = run(capsys, "--print-config")
    assert code == 0
    assert Config.from_lines(out.splitlines()).to_dict() == Config().to_dict()
    assert "lambda=0.1" in out and "trainable_suffix=6" in out and "embed_dim=768" in out


def test_print_config_with_overrides(capsys, tmp_path):
    (tmp_path / "c.txt").write_text("steps=7\n")
    code, out, _ = run(capsys, "--config", tmp_path / "c.txt", "--set", "lambda=0.5", "--print-config")
    assert code == 0 and "steps=7" in out and "lambda=0.5" in out


@pytest.mark.parametrize("argv", [["--bogus"], [], ["export", "--ckpt", "x"], ["--set", "nokey=1", "--print-config"]])
def test_usage_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert len([l for l in err.splitlines() if l.startswith("edgedistill:")]) == 1


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    rows = [l.split() for l in out.splitlines()[1:]]
    assert {r[0] for r in rows} >= {"pca", "gl", "disc", "adv_student", "frozen"}
    assert all(float(r[-2]) < 1e-4 for r in rows)


def test_data_errors(capsys, tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"nope")
    code, _, err = run(capsys, "export", "--ckpt", tmp_path / "bad.bin", "--out", tmp_path / "o.bin")
    assert code == 2 and "magic" in err and len(err.strip().splitlines()) == 1
    code, _, _ = run(capsys, "eval", "--model", tmp_path / "missing", "--queries", "q", "--data", tmp_path,
                     "--labels", "l", "--out", tmp_path / "r.csv")
    assert code == 2
    blocker = tmp_path / "f"
    blocker.write_text("")
    assert run(capsys, "synth", "--out", blocker / "d", "--n", "4", "--classes", "2")[0] == 2


def test_pipeline(capsys, workspace):
    w = workspace
    data = w / "data"
    code, _, _ = run(capsys, "distill", "--config", w / "cfg.txt", "--data", data, "--out", w / "ck.bin",
                     "--history", w / "h.csv")
    assert code == 0
    assert len((w / "h.csv").read_text().splitlines()) == 4
    assert load_container(w / "ck.bin").metadata["checkpoint"] == "true"

    code, out, _ = run(capsys, "export", "--ckpt", w / "ck.bin", "--out", w / "m.bin",
                       "--quantize", "int16", "--calib", data)
    assert code == 0 and "calibration mean cosine" in out
    model = load_container(w / "m.bin")
    assert not [n for n in model.names() if n.startswith(("pca.", "gl.", "disc."))]

    assert run(capsys, "queries", "--model", "teacher", "--data", data, "--labels", data / "labels.csv",
               "--out", w / "q.txt")[0] == 0
    code, out, _ = run(capsys, "eval", "--model", w / "m.bin", "--queries", w / "q.txt", "--data", data,
                       "--labels", data / "labels.csv", "--out", w / "r.csv", "--plot", w / "plots")
    assert code == 0
    assert (w / "r.csv").read_text().splitlines()[0] == "class,auc,n_pos,n_neg"
    assert sorted(p.name for p in (w / "plots").iterdir()) == ["roc_class0.svg", "roc_class1.svg", "roc_class2.svg"]

    code, out, _ = run(capsys, "embed", "--model", w / "m.bin", "--image", data / "img_00000.ppm")
    assert code == 0 and out.startswith("dim=768\nimg_00000.ppm\t")

    code, out, _ = run(capsys, "label", "--model", w / "m.bin", "--queries", w / "q.txt",
                       "--image", data / "img_00000.ppm", "--threshold", "2")
    assert code == 0 and len(out.splitlines()) == 3 and "*" not in out

    assert run(capsys, "embed", "--model", "teacher", "--data", data, "--out", w / "e.txt")[0] == 0
    code, out, _ = run(capsys, "curate", "--embeddings", w / "e.txt", "--dedup-tau", "0.999",
                       "--retrieve-k", "2", "--kmeans-k", "3", "--out", w / "cur.csv")
    assert code == 0
    assert (w / "cur.csv").read_text().startswith("id,source,group\n")


def test_eval_single_class_labels(capsys, workspace):
    w = workspace
    data = w / "data"
    if not (w / "m.bin").exists():
        pytest.skip("pipeline test did not run")
    one = w / "one.csv"
    one.write_text("filename,class\n" + "".join(f"img_{i:05d}.ppm,class0\n" for i in range(24)))
    code, _, err = run(capsys, "eval", "--model", w / "m.bin", "--queries", w / "q.txt", "--data", data,
                       "--labels", one, "--out", w / "r1.csv")
    assert code == 0
    assert "skipped" in err
    assert "class0,nan,24,0" in (w / "r1.csv").read_text()
