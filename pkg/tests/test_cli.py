import json

import numpy as np
import pytest

from pcrdiff.cli import main
from pcrdiff.evalkit import CSV_HEADER, ICP_RESULTS_COMMENT, RESULTS_COMMENT
from pcrdiff.geom3d import load_transforms

TINY_MODEL = """
[model]
encoder_widths = [8, 12]
transform_hidden = 8
embed_dim = 8
decoder_widths = [16, 8]
"""


def run(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    argv = ["generate", "--pairs", "4", "--points", "16", "--seed", "3"]
    assert run([*argv, "--out", str(out)]) == 0
    return out


@pytest.fixture
def trained(tmp_path, dataset):
    config = tmp_path / "tiny.toml"
    config.write_text(TINY_MODEL)
    out = tmp_path / "run"
    argv = ["train", "--config", str(config), "--data", str(dataset), "--out", str(out)]
    argv += ["--epochs", "1", "--batch-size", "2", "--T", "20", "--seed", "1"]
    assert run(argv) == 0
    return out / "last.pcrd"


def test_generate_writes_manifest(dataset, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["pairs"]) == 4
    assert (dataset / "pair_00003_src.xyz").exists()


def test_generate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        argv = ["generate", "--regime", "noise", "--pairs", "2", "--points", "12"]
        assert run([*argv, "--seed", "5", "--out", str(tmp_path / name)]) == 0
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_generate_zero_pairs(tmp_path, capsys):
    assert run(["generate", "--pairs", "0", "--out", str(tmp_path / "empty")]) == 0
    assert "wrote 0 pairs" in capsys.readouterr().out


def test_generate_partial_counts(tmp_path):
    out = tmp_path / "partial"
    argv = ["generate", "--regime", "partial", "--pairs", "1", "--points", "40"]
    assert run([*argv, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["pairs"][0]["source_points"] == 28


def test_generate_rejects_bad_keep(tmp_path, capsys):
    argv = ["generate", "--regime", "partial", "--keep", "1.5", "--out", str(tmp_path / "x")]
    assert run(argv) == 1
    assert "error:" in capsys.readouterr().err


def test_schedule_dump(capsys):
    assert run(["schedule-dump", "--T", "10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t,beta,alpha_bar,posterior_var"
    assert len(lines) == 11
    assert lines[1].startswith("1,")
    assert float(lines[-1].split(",")[2]) < float(lines[1].split(",")[2])


def test_schedule_dump_to_file(tmp_path):
    out = tmp_path / "sched.csv"
    assert run(["schedule-dump", "--T", "5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 6


def test_register_missing_file_is_io_error(tmp_path, capsys):
    argv = ["register", "--model", str(tmp_path / "none.pcrd")]
    argv += ["--src", str(tmp_path / "a.xyz"), "--tpl", str(tmp_path / "b.xyz")]
    assert run(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_train_requires_dataset(tmp_path):
    assert run(["train", "--data", str(tmp_path), "--out", str(tmp_path / "run")]) == 2


def test_train_register_and_eval(tmp_path, dataset, trained, capsys):
    assert trained.exists()
    assert (trained.parent / "loss.csv").exists()
    capsys.readouterr()

    out = tmp_path / "reg"
    argv = ["register", "--model", str(trained), "--src", str(dataset / "pair_00000_src.xyz")]
    argv += ["--tpl", str(dataset / "pair_00000_tpl.xyz"), "--steps", "2", "--out", str(out)]
    assert run(argv) == 0
    printed = [float(v) for v in capsys.readouterr().out.split()]
    assert len(printed) == 7
    (estimate,) = load_transforms(out / "transform.txt")
    assert np.linalg.norm(estimate.rotation.as_array()) == pytest.approx(1.0)
    assert len((out / "aligned.xyz").read_text().splitlines()) == 16

    results = tmp_path / "results.csv"
    argv = ["eval", "--model", str(trained), "--data", str(dataset), "--steps", "1,2"]
    assert run([*argv, "--no-timing", "--out", str(results)]) == 0
    lines = results.read_text().splitlines()
    assert lines[0] == RESULTS_COMMENT
    assert lines[1] == ",".join(CSV_HEADER)
    assert len(lines) == 2 + 8 + 2
    assert lines[-2].startswith("mean,clean,1,")
    assert lines[-1].startswith("mean,clean,2,")

    again = tmp_path / "again.csv"
    assert run([*argv, "--no-timing", "--out", str(again)]) == 0
    assert again.read_text() == results.read_text()


def test_eval_icp_needs_no_model(dataset, capsys):
    argv = ["eval", "--method", "icp", "--data", str(dataset), "--icp-iters", "3", "--no-timing"]
    assert run(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 + 4 + 1
    assert lines[0] == ICP_RESULTS_COMMENT


def test_eval_without_model_is_config_error(dataset, capsys):
    assert run(["eval", "--data", str(dataset)]) == 1
    assert "model" in capsys.readouterr().err


def test_eval_rejects_bad_step_list(dataset, trained):
    assert run(["eval", "--model", str(trained), "--data", str(dataset), "--steps", "x"]) == 1
    assert run(["eval", "--model", str(trained), "--data", str(dataset), "--steps", "50"]) == 1


def test_fusion_flag_requires_cf_variant(tmp_path, dataset):
    argv = ["train", "--variant", "cb", "--fusion", "cat_all", "--data", str(dataset)]
    assert run([*argv, "--out", str(tmp_path / "run")]) == 1


def test_grad_check_passes_on_tiny_network(tmp_path, capsys):
    config = tmp_path / "tiny.toml"
    config.write_text(TINY_MODEL)
    argv = ["grad-check", "--config", str(config), "--T", "20", "--samples", "300"]
    assert run([*argv, "--threshold", "1e-3", "--seed", "2"]) == 0
    assert capsys.readouterr().out.startswith("ok:")


def test_grad_check_default_network_meets_threshold(capsys):
    assert run(["grad-check", "--samples", "300", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ok:")
    assert float(out.split("error ")[1].split()[0]) < 1e-4


def test_eval_on_malformed_manifest_exits_2(dataset, capsys):
    manifest = json.loads((dataset / "manifest.json").read_text())
    del manifest["pairs"][0]["transform"]
    (dataset / "manifest.json").write_text(json.dumps(manifest))
    assert run(["eval", "--method", "icp", "--data", str(dataset)]) == 2
    assert "missing" in capsys.readouterr().err
