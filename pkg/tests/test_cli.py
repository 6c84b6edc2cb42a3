import json

import numpy as np
import pytest

from rediffuse import cli, dataio, suites
from rediffuse.harness import EquivarianceReport

SMALL = ["--base-ch", "8", "--gn-groups", "2", "--T", "10", "--batch", "2"]


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds") / "data"
    assert cli.main(["gen-data", "--out", str(d), "--count", "4", "--size", "16", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck") / "m.rdck"
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "1"] + SMALL) == 0
    return out


def test_gen_data_layout(dataset):
    names = sorted(p.name for p in dataset.iterdir())
    assert len([n for n in names if n.endswith(".pgm")]) == 16
    lines = [json.loads(x) for x in (dataset / "manifest.jsonl").read_text().splitlines()]
    assert lines[0]["type"] == "config" and lines[0]["seed"] == 3
    assert [r["index"] for r in lines[1:]] == [0, 1, 2, 3]
    assert dataio.read_pgm(dataset / "gt_0.pgm").shape == (16, 16)


def test_gen_data_byte_identical(tmp_path, dataset):
    out = tmp_path / "again"
    assert cli.main(["gen-data", "--out", str(out), "--count", "4", "--size", "16", "--seed", "3"]) == 0
    assert _files(out) == _files(dataset)


def test_gen_data_refuses_to_clobber(tmp_path):
    out = tmp_path / "d"
    args = ["gen-data", "--out", str(out), "--count", "1", "--size", "16"]
    assert cli.main(args) == 0
    assert cli.main(args) == 2
    assert cli.main(args + ["--overwrite", "--seed", "1"]) == 0


@pytest.mark.parametrize("extra", [["--size", "15"], ["--count", "0"], ["--blur-sigma", "0"]])
def test_gen_data_bad_arguments(tmp_path, extra):
    assert cli.main(["gen-data", "--out", str(tmp_path / "x")] + extra) == 2
    assert not (tmp_path / "x").exists()


def test_train_zero_epochs(dataset, tmp_path):
    out = tmp_path / "m.rdck"
    assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "0"] + SMALL) == 0
    header, tensors = dataio.load_checkpoint(out)
    assert header["epoch"] == 0 and header["image_size"] == [16, 16]
    lines = (tmp_path / "m.rdck.loss.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["type"] == "config"


def test_train_dc_anchor_flag_in_header(dataset, tmp_path):
    base = ["train", "--data", str(dataset), "--epochs", "0"] + SMALL
    assert cli.main(base + ["--out", str(tmp_path / "on.rdck")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "off.rdck"), "--no-dc-anchor"]) == 0
    assert dataio.load_checkpoint(tmp_path / "on.rdck")[0]["model"]["dc_anchor"] is True
    assert dataio.load_checkpoint(tmp_path / "off.rdck")[0]["model"]["dc_anchor"] is False


def test_train_log_and_resume(dataset, tmp_path):
    out = tmp_path / "m.rdck"
    base = ["train", "--data", str(dataset), "--out", str(out)] + SMALL
    assert cli.main(base + ["--epochs", "1"]) == 0
    assert cli.main(base + ["--epochs", "2", "--resume", str(out)]) == 0
    recs = [json.loads(x) for x in (tmp_path / "m.rdck.loss.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs if r["type"] == "epoch"] == [1, 2]
    assert set(recs[1]) == {"type", "epoch", "loss", "lr"}

    straight = tmp_path / "s.rdck"
    assert cli.main(["train", "--data", str(dataset), "--out", str(straight), "--epochs", "2"] + SMALL) == 0
    assert dataio.load_checkpoint(straight)[1].keys() == dataio.load_checkpoint(out)[1].keys()
    for k, v in dataio.load_checkpoint(straight)[1].items():
        assert np.array_equal(v, dataio.load_checkpoint(out)[1][k]), k


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(dataset, tmp_path):
    out = tmp_path / "m.rdck"
    code = cli.main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "3", "--lr", "1e38"] + SMALL)
    assert code == 3
    _, tensors = dataio.load_checkpoint(out)
    assert all(np.all(np.isfinite(v)) for v in tensors.values())


def test_train_missing_dataset(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m.rdck")]) == 2


def test_fuse_deterministic_with_diff(dataset, checkpoint, tmp_path):
    outs = []
    for name in ("f1.pgm", "f2.pgm"):
        out = tmp_path / name
        assert cli.main(["fuse", "--a", str(dataset / "a_0.pgm"), "--b", str(dataset / "b_0.pgm"),
                         "--ckpt", str(checkpoint), "--out", str(out), "--seed", "4", "--diff"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    diff = (tmp_path / "f1_diff_a.pgm").read_bytes()
    assert any(c.startswith("max=") for c in dataio.pgm_comments(diff))


def test_fuse_missing_checkpoint_writes_nothing(dataset, tmp_path):
    code = cli.main(["fuse", "--a", str(dataset / "a_0.pgm"), "--b", str(dataset / "b_0.pgm"),
                     "--ckpt", str(tmp_path / "nope.rdck"), "--out", str(tmp_path / "f.pgm"), "--diff"])
    assert code == 4
    assert list(tmp_path.iterdir()) == []


def test_fuse_corrupt_checkpoint(dataset, tmp_path):
    bad = tmp_path / "bad.rdck"
    bad.write_bytes(b"RDCK" + b"\0" * 20)
    code = cli.main(["fuse", "--a", str(dataset / "a_0.pgm"), "--b", str(dataset / "b_0.pgm"),
                     "--ckpt", str(bad), "--out", str(tmp_path / "f.pgm")])
    assert code == 4


def test_fuse_size_mismatch_and_crop(checkpoint, tmp_path, caplog):
    dataio.write_pgm(tmp_path / "a.pgm", np.zeros((16, 16)))
    dataio.write_pgm(tmp_path / "b.pgm", np.zeros((18, 18)))
    base = ["fuse", "--ckpt", str(checkpoint), "--out", str(tmp_path / "f.pgm")]
    assert cli.main(base + ["--a", str(tmp_path / "a.pgm"), "--b", str(tmp_path / "b.pgm")]) == 2
    dataio.write_pgm(tmp_path / "a.pgm", np.full((18, 18), 0.3))
    assert cli.main(base + ["--a", str(tmp_path / "a.pgm"), "--b", str(tmp_path / "b.pgm")]) == 0
    assert "center-cropping" in caplog.text
    assert dataio.read_pgm(tmp_path / "f.pgm").shape == (16, 16)


def test_metrics_identical_images(tmp_path, capsys):
    g = str(tmp_path / "g.pgm")
    dataio.write_pgm(g, dataio.gen_pair(0).ground_truth)
    out = tmp_path / "m.txt"
    assert cli.main(["metrics", "--fused", g, "--a", g, "--b", g, "--gt", g, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text == "ms_ssim=1.000000\nqmi=2.000000\nqabf=1.000000\nms_ssim_gt=1.000000\n"
    assert out.read_text() == text


def test_metrics_bad_input(dataset, tmp_path):
    (tmp_path / "junk.pgm").write_bytes(b"P5 4 4 255\n")
    g = str(dataset / "gt_0.pgm")
    assert cli.main(["metrics", "--fused", str(tmp_path / "junk.pgm"), "--a", g, "--b", g]) == 2


def test_verify_ops_report(tmp_path, capsys):
    report = tmp_path / "r.jsonl"
    assert cli.main(["verify", "--suite", "ops", "--m", "4", "--report", str(report)]) == 0
    lines = [json.loads(x) for x in report.read_text().splitlines()]
    assert lines[0]["type"] == "config"
    assert lines[-1] == {"type": "summary", "records": len(lines) - 2, "failed": 0, "passed": True}
    assert all(r["passed"] for r in lines[1:-1])
    assert capsys.readouterr().out.startswith("ok ")


def test_verify_failure_exit_code(monkeypatch, capsys):
    bad = EquivarianceReport("maxpool", 8, 1, 0.7, 0.1, 1.0, 0.1, False)
    monkeypatch.setattr(suites, "suite_ops", lambda *a: [bad])
    assert cli.main(["verify"]) == 5
    assert "FAIL maxpool" in capsys.readouterr().out


def test_bad_thread_count(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("REDIFFUSE_THREADS", "zero")
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--count", "1", "--size", "16"]) == 2


def test_verbose_before_or_after_subcommand(tmp_path):
    assert cli.main(["-v", "gen-data", "--out", str(tmp_path / "a"), "--count", "1", "--size", "16"]) == 0
    assert cli.main(["gen-data", "-v", "--out", str(tmp_path / "b"), "--count", "1", "--size", "16"]) == 0


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        cli.main(["fuse"])
    assert info.value.code == 2
