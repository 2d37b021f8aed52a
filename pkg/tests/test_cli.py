import csv
import json

import numpy as np
import pytest

from ficots import cli
from ficots.codec import decode_checkpoint, encode_checkpoint
from ficots.data import save_csv, synthetic_sinusoids
from ficots.experiment import load_checkpoint, save_checkpoint

TOY_CONFIG = """\
data_path = "series.csv"
dataset_key = "synthetic"
input_len = 32
horizon = 8
patch_len = 8
stride = 4
d_model = 8
n_heads = 2
max_epochs = 2
seed = 3
"""


def write_inputs(root, text=TOY_CONFIG, n_vars=2):
    root.mkdir(parents=True, exist_ok=True)
    save_csv(synthetic_sinusoids(300, n_vars, seed=1), root / "series.csv")
    (root / "toy.toml").write_text(text)
    return root / "toy.toml"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    config = write_inputs(root / "in")
    assert cli.main(["train", "--config", str(config), "--out", str(root / "out")]) == 0
    return root


def test_train_writes_run_directory(trained):
    out = trained / "out"
    for name in ("checkpoint.fcck", "history.txt", "manifest.toml", "learning_curve.png"):
        assert (out / name).is_file(), name
    assert "seed = 3" in (out / "manifest.toml").read_text()
    assert len((out / "history.txt").read_text().splitlines()) == 2


def test_train_rerun_is_byte_identical(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--config", trained / "in" / "toy.toml", "--out", tmp_path, "--no-plots")
    assert code == 0
    for name in ("history.txt", "checkpoint.fcck", "manifest.toml"):
        assert (tmp_path / name).read_bytes() == (trained / "out" / name).read_bytes()


def test_manifest_reproduces_the_run(trained, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--config", trained / "out" / "manifest.toml", "--out", tmp_path, "--no-plots")
    assert code == 0
    assert (tmp_path / "checkpoint.fcck").read_bytes() == (trained / "out" / "checkpoint.fcck").read_bytes()


def test_seed_override_changes_the_run(trained, tmp_path, capsys):
    code, _, _ = run(
        capsys, "train", "--config", trained / "in" / "toy.toml", "--out", tmp_path, "--seed", "4", "--no-plots"
    )
    assert code == 0
    assert "seed = 4" in (tmp_path / "manifest.toml").read_text()
    assert (tmp_path / "history.txt").read_bytes() != (trained / "out" / "history.txt").read_bytes()


def test_patch_longer_than_input_is_a_config_error(tmp_path, capsys):
    config = write_inputs(tmp_path, TOY_CONFIG.replace("patch_len = 8", "patch_len = 40"))
    code, out, err = run(capsys, "train", "--config", config, "--out", tmp_path / "out")
    assert code == 2
    reason = json.loads(err.strip())
    assert reason["code"] == 2 and "patch_len <= T_in" in reason["reason"]
    assert not (tmp_path / "out" / "checkpoint.fcck").exists()


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    config = write_inputs(tmp_path, TOY_CONFIG + "learning_rat = 0.1\n")
    code, _, err = run(capsys, "train", "--config", config)
    assert code == 2 and "learning_rat" in err


def test_bad_data_is_a_data_error(tmp_path, capsys):
    config = write_inputs(tmp_path)
    lines = (tmp_path / "series.csv").read_text().splitlines()
    lines[5] = lines[5].rsplit(",", 1)[0] + ",n/a"
    (tmp_path / "series.csv").write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "train", "--config", config, "--out", tmp_path / "out")
    assert code == 3 and "row 5" in err


def test_eval_prints_metrics_and_writes_predictions(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "out" / "checkpoint.fcck", "--out", tmp_path)
    assert code == 0
    metrics = last_json(out)
    assert set(metrics) == {"mse", "mae", "n_windows", "space"}
    assert metrics["space"] == "normalized"
    with (tmp_path / "predictions.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["window_start", "step", "variable", "pred", "truth"]
    assert len(rows) - 1 == metrics["n_windows"] * 8 * 2
    assert (tmp_path / "horizon_error.png").is_file()


def test_eval_raw_space(trained, tmp_path, capsys):
    code, out, _ = run(
        capsys, "eval", "--checkpoint", trained / "out" / "checkpoint.fcck", "--out", tmp_path, "--raw-space", "--no-plots"
    )
    assert code == 0 and last_json(out)["space"] == "raw"


def test_eval_variable_count_mismatch(trained, tmp_path, capsys):
    save_csv(synthetic_sinusoids(300, 3, seed=1), tmp_path / "three.csv")
    code, _, err = run(
        capsys, "eval", "--checkpoint", trained / "out" / "checkpoint.fcck", "--data", tmp_path / "three.csv",
        "--out", tmp_path,
    )
    assert code != 0 and "variables" in err


def test_eval_rejects_version_99(trained, tmp_path, capsys):
    buf = (trained / "out" / "checkpoint.fcck").read_bytes()
    bad = buf[:4] + (99).to_bytes(2, "little") + buf[6:]
    (tmp_path / "v99.fcck").write_bytes(bad)
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "v99.fcck", "--out", tmp_path)
    assert code == 3 and "version 99" in err


def test_checkpoint_round_trip(trained, tmp_path):
    ckpt = load_checkpoint(trained / "out" / "checkpoint.fcck")
    save_checkpoint(tmp_path / "again.fcck", ckpt)
    assert (tmp_path / "again.fcck").read_bytes() == (trained / "out" / "checkpoint.fcck").read_bytes()
    blob = decode_checkpoint((tmp_path / "again.fcck").read_bytes())
    assert encode_checkpoint(blob) == (tmp_path / "again.fcck").read_bytes()


def test_gradcheck_default_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    report = last_json(out)
    assert code == 0 and report["passed"] and report["max_rel_error"] < 1e-4
    assert report["worst_parameter"]
    assert "param graph.W_time max_rel_error=" in out


def test_gradcheck_negative_control(capsys):
    args = cli.build_parser().parse_args(["gradcheck"])
    code = cli.cmd_gradcheck(args, corrupt=lambda name, g: g * 1.1 if name == "attn.W_V" else g)
    report = last_json(capsys.readouterr().out)
    assert code == 4 and not report["passed"] and report["worst_parameter"] == "attn.W_V"


def test_gradcheck_invalid_config(tmp_path, capsys):
    config = write_inputs(tmp_path, TOY_CONFIG.replace("patch_len = 8", "patch_len = 40"))
    code, _, _ = run(capsys, "gradcheck", "--config", config)
    assert code == 2


def test_dump_prompts(trained, tmp_path, capsys):
    ckpt = trained / "out" / "checkpoint.fcck"
    assert run(capsys, "dump", "prompts", "--checkpoint", ckpt, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, "dump", "prompts", "--checkpoint", ckpt, "--out", tmp_path / "b")[0] == 0
    text = (tmp_path / "a" / "prompts.txt").read_text()
    assert text == (tmp_path / "b" / "prompts.txt").read_text()
    assert all("Forecast the next" in line for line in text.splitlines())


def test_dump_prompts_on_ett_key(tmp_path, capsys):
    config = write_inputs(tmp_path, TOY_CONFIG.replace('"synthetic"', '"ETTh1"'))
    assert run(capsys, "train", "--config", config, "--out", tmp_path / "run", "--no-plots")[0] == 0
    code, _, _ = run(capsys, "dump", "prompts", "--checkpoint", tmp_path / "run" / "checkpoint.fcck", "--out", tmp_path)
    lines = (tmp_path / "prompts.txt").read_text().splitlines()
    assert code == 0 and lines
    assert all("Electricity Transformer Temperature" in l and "Forecast the next" in l for l in lines)


def test_dump_embeddings(trained, tmp_path, capsys):
    ckpt = trained / "out" / "checkpoint.fcck"
    run(capsys, "dump", "embeddings", "--checkpoint", ckpt, "--out", tmp_path / "a")
    run(capsys, "dump", "embeddings", "--checkpoint", ckpt, "--out", tmp_path / "b")
    a = (tmp_path / "a" / "embeddings.csv").read_bytes()
    assert a == (tmp_path / "b" / "embeddings.csv").read_bytes()
    rows = list(csv.reader(a.decode().splitlines()))
    assert rows[0][:3] == ["variable", "patch", "stage"] and len(rows[0]) == 3 + 8
    assert {r[2] for r in rows[1:]} == {"pre_align", "post_align"}
    # 2 variables x 7 patches x 2 stages
    assert len(rows) - 1 == 2 * 7 * 2


def test_unknown_dump_target_is_a_usage_error(trained):
    with pytest.raises(SystemExit) as exc:
        cli.main(["dump", "weights", "--checkpoint", str(trained / "out" / "checkpoint.fcck")])
    assert exc.value.code != 0


def test_commands_write_only_into_the_output_dir(tmp_path, capsys):
    config = write_inputs(tmp_path / "in")

    def snapshot():
        return {p: p.stat().st_mtime_ns for p in tmp_path.rglob("*")}

    before = snapshot()
    out = tmp_path / "out"
    assert run(capsys, "train", "--config", config, "--out", out)[0] == 0
    ckpt = out / "checkpoint.fcck"
    for argv in (["eval"], ["dump", "prompts"], ["dump", "embeddings"]):
        assert run(capsys, *argv, "--checkpoint", ckpt, "--out", out)[0] == 0
    after = snapshot()
    changed = {p for p in after if before.get(p) != after[p]}
    assert changed and all(p == out or out in p.parents for p in changed)


def test_few_shot_flag_shrinks_training(trained, tmp_path, capsys):
    code, out, _ = run(
        capsys, "train", "--config", trained / "in" / "toy.toml", "--out", tmp_path, "--few-shot", "0.1", "--no-plots"
    )
    assert code == 0 and "few_shot_fraction = 0.1" in (tmp_path / "manifest.toml").read_text()


def test_eval_without_out_writes_next_to_checkpoint(trained, tmp_path, capsys):
    run(capsys, "train", "--config", trained / "in" / "toy.toml", "--out", tmp_path / "run", "--no-plots")
    assert run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoint.fcck", "--no-plots")[0] == 0
    assert (tmp_path / "run" / "predictions.csv").exists()
