import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from slip.harness import (
    GenDataSpec,
    cmd_evaluate,
    cmd_gen_data,
    cmd_gradcheck,
    cmd_pretrain,
    config_from_dict,
    load_config,
    load_gen_spec,
)
from slip.harness.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_FAILED, EXIT_NUMERICAL, EXIT_OK, main
from slip.harness.config import MODES
from slip.errors import ConfigError
from slip.train import read_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cmd_gen_data(load_gen_spec(CONFIGS / "tiny_data.yaml"), out)
    return out


def tiny_config(corpus, out_dir, **over):
    raw = yaml.safe_load((CONFIGS / "tiny.yaml").read_text())
    for section in ("data", "eval"):
        for key, value in list(raw[section].items()):
            if isinstance(value, str) and value.startswith("../data/tiny/"):
                raw[section][key] = str(corpus / value.rsplit("/", 1)[1])
    raw["out_dir"] = str(out_dir)
    for k, v in over.items():
        if isinstance(v, dict):
            raw.setdefault(k, {}).update(v)
        else:
            raw[k] = v
    return raw


def write_config(tmp_path, raw):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------
class TestGenData:
    def test_four_classes_on_disk(self, corpus):
        assert (corpus / "classes.txt").read_text().split("\n")[:-1] == ["red circle", "blue circle", "red cross", "blue cross"]
        lines = (corpus / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 64
        first = json.loads(lines[0])
        assert (corpus / first["image"]).exists()
        assert len((corpus / "templates.txt").read_text().splitlines()) >= 1

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = GenDataSpec(num_images=8, eval_images=4, image_size=16)
        cmd_gen_data(spec, tmp_path / "a")
        cmd_gen_data(spec, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b and len(files_a) == 16
        for f in files_a:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_one_shape_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            cmd_gen_data(GenDataSpec(shapes=("circle",), num_images=8, eval_images=0), tmp_path)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "d.yaml").write_text("num_imagez: 4\n")
        with pytest.raises(ConfigError, match="num_imagez"):
            load_gen_spec(tmp_path / "d.yaml")

    def test_ppm(self, tmp_path):
        cmd_gen_data(GenDataSpec(num_images=4, eval_images=0, image_size=16, image_format="ppm"), tmp_path)
        assert len(list((tmp_path / "images" / "train").glob("*.ppm"))) == 4


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------
class TestConfig:
    def test_unknown_nested_key_named(self):
        with pytest.raises(ConfigError, match="optim.base_lrr"):
            config_from_dict({"optim": {"base_lrr": 1.0}})

    def test_yaml_error_has_line(self, tmp_path):
        (tmp_path / "c.yaml").write_text("mode: slip\noptim: [unclosed\n")
        with pytest.raises(ConfigError, match="line"):
            load_config(tmp_path / "c.yaml")

    def test_decoupled_needs_ssl_source(self):
        with pytest.raises(ConfigError):
            config_from_dict({"mode": "decoupled"})

    def test_fingerprint_ignores_output_location(self):
        a = config_from_dict({"out_dir": "x"})
        b = config_from_dict({"out_dir": "y"})
        c = config_from_dict({"seed": 1})
        assert a.fingerprint() == b.fingerprint() != c.fingerprint()

    def test_bundled_configs_parse(self):
        for name in ("tiny.yaml", "slip_nano.yaml"):
            load_config(CONFIGS / name)
        for name in ("tiny_data.yaml", "data.yaml"):
            load_gen_spec(CONFIGS / name)


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("mode", MODES)
def test_mode_smoke_run(corpus, tmp_path, mode):
    cfg = config_from_dict(tiny_config(corpus, tmp_path / "run", mode=mode))
    run = cmd_pretrain(cfg)
    dirs = [run / "phase1", run / "phase2"] if mode == "ssl_then_clip" else [run]
    for d in dirs:
        rows = [ln.split(",") for ln in (d / "metrics.csv").read_text().splitlines()[1:]]
        assert len(rows) == 20
        assert all(np.isfinite(float(r[2])) for r in rows)
    assert yaml.safe_load((run / "config.yaml").read_text())["mode"] == mode
    stamp = json.loads((run / "run.json").read_text())
    assert stamp["seed"] == 0 and stamp["fingerprint"] == cfg.fingerprint()


def test_clip_mode_ssl_column_zero(corpus, tmp_path):
    run = cmd_pretrain(config_from_dict(tiny_config(corpus, tmp_path / "run", mode="clip", loss={"ssl_scale": 1.0})))
    rows = list(__import__("csv").DictReader((run / "metrics.csv").open()))
    assert all(float(r["ssl_loss"]) == 0.0 for r in rows)


def test_ssl_then_clip_initializes_from_phase1(corpus, tmp_path):
    run = cmd_pretrain(config_from_dict(tiny_config(corpus, tmp_path / "run", mode="ssl_then_clip", optim={"max_steps": 3, "warmup_steps": 1})))
    p1 = read_checkpoint(run / "phase1" / "checkpoints" / "latest.ckpt").group("model")
    p2_first = read_checkpoint(run / "phase2" / "checkpoints" / "step-000003.ckpt").group("model")
    assert p1["logit_scale"].tolist() != [] and set(p1) == set(p2_first)


def test_resume_after_kill_matches(corpus, tmp_path):
    full = cmd_pretrain(config_from_dict(tiny_config(corpus, tmp_path / "full")))
    part_cfg = config_from_dict(tiny_config(corpus, tmp_path / "part"))
    cmd_pretrain(part_cfg, until_step=10)
    cmd_pretrain(part_cfg, resume=tmp_path / "part" / "checkpoints" / "step-000010.ckpt")
    assert (full / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_two_runs_byte_identical(corpus, tmp_path):
    a = cmd_pretrain(config_from_dict(tiny_config(corpus, tmp_path / "a")))
    b = cmd_pretrain(config_from_dict(tiny_config(corpus, tmp_path / "b")))
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    ta = read_checkpoint(a / "checkpoints" / "latest.ckpt").tensors
    tb = read_checkpoint(b / "checkpoints" / "latest.ckpt").tensors
    assert ta.keys() == tb.keys() and all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------
def test_evaluate_twice_identical(corpus, tmp_path):
    cfg = config_from_dict(tiny_config(corpus, tmp_path / "run", optim={"max_steps": 4, "warmup_steps": 1}))
    run = cmd_pretrain(cfg)
    a = cmd_evaluate(run / "checkpoints" / "latest.ckpt", cfg)
    b = cmd_evaluate(run / "checkpoints" / "latest.ckpt", cfg)
    assert a == b
    assert set(a) >= {"zeroshot_acc", "probe_acc", "finetune_acc"}
    assert len((run / "eval_metrics.csv").read_text().splitlines()) == 3


def test_evaluate_needs_zero_shot_files(corpus, tmp_path):
    raw = tiny_config(corpus, tmp_path / "run", optim={"max_steps": 2, "warmup_steps": 1})
    cfg = config_from_dict(raw)
    run = cmd_pretrain(cfg)
    raw["eval"]["templates"] = None
    raw["eval"]["monitor_every"] = 0
    with pytest.raises(ConfigError):
        cmd_evaluate(run / "checkpoints" / "latest.ckpt", config_from_dict(raw))


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------
class TestCli:
    def test_full_round(self, corpus, tmp_path, capsys):
        raw = tiny_config(corpus, tmp_path / "ignored", optim={"max_steps": 4, "warmup_steps": 1})
        cfg_path = write_config(tmp_path, raw)
        assert main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "run"), "--seed", "2", "--mode-override", "clip"]) == EXIT_OK
        saved = yaml.safe_load((tmp_path / "run" / "config.yaml").read_text())
        assert saved["mode"] == "clip" and saved["seed"] == 2
        assert main(["evaluate", str(tmp_path / "run" / "checkpoints" / "latest.ckpt"), "--config", str(cfg_path)]) == EXIT_OK
        assert "zeroshot_acc" in capsys.readouterr().out

    def test_gen_data(self, tmp_path):
        assert main(["gen-data", "--config", str(CONFIGS / "tiny_data.yaml"), "--out", str(tmp_path / "d"), "--seed", "4"]) == EXIT_OK
        assert (tmp_path / "d" / "manifest.jsonl").exists()

    def test_config_error_exit(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("mood: slip\n")
        assert main(["pretrain", "--config", str(tmp_path / "bad.yaml")]) == EXIT_CONFIG

    def test_data_error_exit(self, corpus, tmp_path):
        raw = tiny_config(corpus, tmp_path / "run")
        raw["data"]["manifest"] = str(tmp_path / "missing.jsonl")
        assert main(["pretrain", "--config", str(write_config(tmp_path, raw))]) == EXIT_DATA

    def test_checkpoint_error_exit(self, corpus, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"SLIPCKPT")
        raw = tiny_config(corpus, tmp_path / "run")
        assert main(["evaluate", str(tmp_path / "junk.ckpt"), "--config", str(write_config(tmp_path, raw))]) == EXIT_CHECKPOINT

    def test_numerical_error_exit(self, corpus, tmp_path):
        raw = tiny_config(corpus, tmp_path / "run", optim={"base_lr": 1e30})
        with np.errstate(all="ignore"):
            assert main(["pretrain", "--config", str(write_config(tmp_path, raw))]) == EXIT_NUMERICAL

    def test_exit_codes_distinct(self):
        assert len({EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_CHECKPOINT}) == 6

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--instances", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "matmul" in out and "clip_loss" in out


def test_gradcheck_command_reports_every_op():
    result = cmd_gradcheck(instances=1)
    assert result.passed
